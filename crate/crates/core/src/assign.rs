//! Channel assignment principles and cardinality audits.
//!
//! Channels are 1-indexed. A width `c` activates the left interval
//! `[1:c]` and, for the coupled principles, the right interval
//! `[(W-c+1):W]` of a physical layer of width `W`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{build_grid, LayerSpec};

/// Physical width used by the base-width coupled principle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// `W = l + l_s`: every channel has the same cardinality.
    #[default]
    ExactFair,
    /// `W = l + l_s - d`: non-base channels are counted once more than base channels.
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Principle {
    /// Unilaterally augmented: leftmost `c` channels only.
    Ua,
    /// Bilaterally coupled: leftmost and rightmost `c` channels.
    Bc,
    /// Bilaterally coupled over a layer widened by its base channels.
    BcV2 {
        #[serde(default)]
        overlap: OverlapMode,
    },
}

impl Principle {
    pub fn is_bilateral(&self) -> bool {
        !matches!(self, Principle::Ua)
    }

    /// Width `W` of the physical supernet layer.
    pub fn physical_width(&self, layer: &LayerSpec) -> Result<usize> {
        match self {
            Principle::Ua | Principle::Bc => Ok(layer.max_width),
            Principle::BcV2 { overlap } => {
                let w = layer.max_width + layer.base_width;
                match overlap {
                    OverlapMode::ExactFair => Ok(w),
                    // without base channels both modes are plain BC
                    OverlapMode::PaperLiteral if layer.base_width == 0 => Ok(w),
                    OverlapMode::PaperLiteral => {
                        let d = layer.step()?;
                        if layer.base_width < d {
                            return Err(Error::InvalidLayer(format!(
                                "literal overlap needs base width {} >= step {d}",
                                layer.base_width
                            )));
                        }
                        Ok(w - d)
                    }
                }
            }
        }
    }
}

impl fmt::Display for Principle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Principle::Ua => write!(f, "ua"),
            Principle::Bc => write!(f, "bc"),
            Principle::BcV2 {
                overlap: OverlapMode::ExactFair,
            } => write!(f, "bcv2"),
            Principle::BcV2 {
                overlap: OverlapMode::PaperLiteral,
            } => write!(f, "bcv2-literal"),
        }
    }
}

impl FromStr for Principle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ua" => Ok(Principle::Ua),
            "bc" => Ok(Principle::Bc),
            "bcv2" => Ok(Principle::BcV2 {
                overlap: OverlapMode::ExactFair,
            }),
            "bcv2-literal" => Ok(Principle::BcV2 {
                overlap: OverlapMode::PaperLiteral,
            }),
            other => Err(Error::Parse(format!("unknown principle `{other}`"))),
        }
    }
}

impl FromStr for OverlapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-fair" | "exact_fair" => Ok(OverlapMode::ExactFair),
            "paper-literal" | "paper_literal" => Ok(OverlapMode::PaperLiteral),
            other => Err(Error::Parse(format!("unknown overlap mode `{other}`"))),
        }
    }
}

/// Inclusive 1-indexed channel interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpan {
    pub first: usize,
    pub last: usize,
}

impl ChannelSpan {
    pub fn new(first: usize, last: usize) -> Self {
        debug_assert!(first >= 1 && first <= last);
        Self { first, last }
    }

    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, channel: usize) -> bool {
        (self.first..=self.last).contains(&channel)
    }

    /// Zero-based half-open range for array slicing.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.first - 1..self.last
    }
}

/// Which path of a coupled layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

/// Channels activated by one width: the left interval and, for coupled
/// principles, the right interval (a multiset union of the two).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexAssignment {
    pub left: ChannelSpan,
    pub right: Option<ChannelSpan>,
}

impl IndexAssignment {
    pub fn span(&self, side: Side) -> Option<ChannelSpan> {
        match side {
            Side::Left => Some(self.left),
            Side::Right => self.right,
        }
    }

    /// Size of the multiset union.
    pub fn multiplicity(&self) -> usize {
        self.left.len() + self.right.map_or(0, |r| r.len())
    }

    /// Number of times `channel` occurs in the multiset.
    pub fn count(&self, channel: usize) -> usize {
        usize::from(self.left.contains(channel)) + usize::from(self.right.is_some_and(|r| r.contains(channel)))
    }
}

/// Assignment of width `c` on `layer` under `principle`.
pub fn indices(principle: Principle, layer: &LayerSpec, c: usize) -> Result<IndexAssignment> {
    let grid = build_grid(layer)?;
    if grid.binary_search(&c).is_err() {
        return Err(Error::OffGrid { layer: 0, width: c });
    }
    let left = ChannelSpan::new(1, c);
    let right = if principle.is_bilateral() {
        let w = principle.physical_width(layer)?;
        Some(ChannelSpan::new(w + 1 - c, w))
    } else {
        None
    };
    Ok(IndexAssignment { left, right })
}

/// For each physical channel `1..=W`, the number of widths in `widths`
/// whose assignment contains it, with multiplicity.
pub fn cardinality_audit(principle: Principle, layer: &LayerSpec, widths: &[usize]) -> Result<Vec<u64>> {
    if widths.is_empty() {
        return Err(Error::Empty("width set".into()));
    }
    let w = principle.physical_width(layer)?;
    let mut counts = vec![0u64; w];
    for &c in widths {
        let a = indices(principle, layer, c)?;
        for ch in a.left.range() {
            counts[ch] += 1;
        }
        if let Some(r) = a.right {
            for ch in r.range() {
                counts[ch] += 1;
            }
        }
    }
    Ok(counts)
}

/// Audit over the full candidate grid of `layer`.
pub fn grid_audit(principle: Principle, layer: &LayerSpec) -> Result<Vec<u64>> {
    cardinality_audit(principle, layer, &build_grid(layer)?)
}

/// True for channels that every width of the grid activates on one side
/// (the left block `[1:l_s-d]` and the right block beyond `l`).
pub fn is_base_channel(principle: Principle, layer: &LayerSpec, channel: usize) -> Result<bool> {
    if layer.base_width == 0 {
        return Ok(false);
    }
    let d = layer.step()?;
    let w = principle.physical_width(layer)?;
    let left_block = match principle {
        Principle::BcV2 {
            overlap: OverlapMode::PaperLiteral,
        } => layer.base_width - d,
        _ => layer.base_width,
    };
    Ok(channel <= left_block || (channel > layer.max_width && channel <= w))
}
