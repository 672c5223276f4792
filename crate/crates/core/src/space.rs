//! Width vectors, per-layer candidate grids and the FLOPs lookup table.
//!
//! A network has `L` searchable hidden layers. Layer `i` carries a maximum
//! width `l`, an optional base width `l_s` and a candidate count `K'`; the
//! candidate grid is `{l_s + j*d}` (or `{j*d}` when there is no base width).
//! Layers that share a `tie_group` are one gene: they always take equal
//! widths and are sampled, crossed and mutated together.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One searchable layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub max_width: usize,
    #[serde(default)]
    pub base_width: usize,
    pub grid_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_group: Option<String>,
}

impl LayerSpec {
    pub fn new(max_width: usize, base_width: usize, grid_count: usize) -> Self {
        Self {
            max_width,
            base_width,
            grid_count,
            tie_group: None,
        }
    }

    pub fn tied(mut self, group: impl Into<String>) -> Self {
        self.tie_group = Some(group.into());
        self
    }

    /// Grid step `d`.
    pub fn step(&self) -> Result<usize> {
        let (l, ls, k) = (self.max_width, self.base_width, self.grid_count);
        if l == 0 || k == 0 {
            return Err(Error::InvalidLayer(format!(
                "max_width and grid_count must be positive (l={l}, K'={k})"
            )));
        }
        if ls >= l {
            return Err(Error::InvalidLayer(format!(
                "base_width {ls} must be below max_width {l}"
            )));
        }
        if ls == 0 {
            if l % k != 0 {
                return Err(Error::InvalidLayer(format!(
                    "max_width {l} is not divisible into {k} groups"
                )));
            }
            return Ok(l / k);
        }
        if k < 2 {
            return Err(Error::InvalidLayer(format!(
                "a base width needs at least two candidates (l={l}, l_s={ls})"
            )));
        }
        if (l - ls) % (k - 1) != 0 {
            return Err(Error::InvalidLayer(format!(
                "step ({l} - {ls}) / ({k} - 1) is not an integer"
            )));
        }
        Ok((l - ls) / (k - 1))
    }
}

/// Sorted candidate widths of a layer.
pub fn build_grid(spec: &LayerSpec) -> Result<Vec<usize>> {
    let d = spec.step()?;
    let grid = if spec.base_width == 0 {
        (1..=spec.grid_count).map(|j| j * d).collect()
    } else {
        (0..spec.grid_count).map(|j| spec.base_width + j * d).collect()
    };
    Ok(grid)
}

/// A per-layer channel count vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WidthVector(pub Vec<usize>);

impl WidthVector {
    pub fn new(widths: Vec<usize>) -> Self {
        Self(widths)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl std::ops::Index<usize> for WidthVector {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

impl fmt::Display for WidthVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl std::str::FromStr for WidthVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim().trim_start_matches('(').trim_end_matches(')');
        trimmed
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("width `{p}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(WidthVector)
    }
}

#[derive(Deserialize)]
struct SearchSpaceDef {
    layers: Vec<LayerSpec>,
    input_dim: usize,
    output_dim: usize,
}

/// The searchable layers plus the fixed input and output dimensions.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "SearchSpaceDef")]
pub struct SearchSpace {
    layers: Vec<LayerSpec>,
    input_dim: usize,
    output_dim: usize,
    #[serde(skip)]
    grids: Vec<Vec<usize>>,
    #[serde(skip)]
    genes: Vec<Vec<usize>>,
}

impl PartialEq for SearchSpace {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.input_dim == other.input_dim && self.output_dim == other.output_dim
    }
}

impl TryFrom<SearchSpaceDef> for SearchSpace {
    type Error = Error;

    fn try_from(def: SearchSpaceDef) -> Result<Self> {
        SearchSpace::new(def.layers, def.input_dim, def.output_dim)
    }
}

impl SearchSpace {
    pub fn new(layers: Vec<LayerSpec>, input_dim: usize, output_dim: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpace("no searchable layers".into()));
        }
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidSpace("input_dim and output_dim must be positive".into()));
        }
        let grids = layers.iter().map(build_grid).collect::<Result<Vec<_>>>()?;

        let mut genes: Vec<Vec<usize>> = Vec::new();
        let mut by_group: HashMap<&str, usize> = HashMap::new();
        for (i, layer) in layers.iter().enumerate() {
            match layer.tie_group.as_deref() {
                Some(group) => match by_group.get(group) {
                    Some(&g) => {
                        let first = genes[g][0];
                        if grids[first] != grids[i] {
                            return Err(Error::InvalidSpace(format!(
                                "tied layers {first} and {i} have different grids"
                            )));
                        }
                        genes[g].push(i);
                    }
                    None => {
                        by_group.insert(group, genes.len());
                        genes.push(vec![i]);
                    }
                },
                None => genes.push(vec![i]),
            }
        }

        Ok(Self {
            layers,
            input_dim,
            output_dim,
            grids,
            genes,
        })
    }

    /// `n` untied layers sharing the same spec.
    pub fn uniform(n: usize, spec: LayerSpec, input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::new(vec![spec; n], input_dim, output_dim)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn grid(&self, layer: usize) -> &[usize] {
        &self.grids[layer]
    }

    /// Layer groups that move together; one entry per independent gene.
    pub fn genes(&self) -> &[Vec<usize>] {
        &self.genes
    }

    pub fn gene_grid(&self, gene: usize) -> &[usize] {
        &self.grids[self.genes[gene][0]]
    }

    /// Number of distinct widths (product over genes of their grid sizes).
    pub fn size(&self) -> u128 {
        self.genes.iter().map(|g| self.grids[g[0]].len() as u128).product()
    }

    pub fn min_width(&self) -> WidthVector {
        WidthVector(self.grids.iter().map(|g| g[0]).collect())
    }

    pub fn max_width(&self) -> WidthVector {
        WidthVector(self.grids.iter().map(|g| *g.last().unwrap()).collect())
    }

    /// Checks grid membership and tie consistency.
    pub fn validate(&self, c: &WidthVector) -> Result<()> {
        if c.len() != self.layers.len() {
            return Err(Error::WidthLength {
                expected: self.layers.len(),
                got: c.len(),
            });
        }
        for (i, &w) in c.0.iter().enumerate() {
            if self.grids[i].binary_search(&w).is_err() {
                return Err(Error::OffGrid { layer: i, width: w });
            }
        }
        for gene in &self.genes {
            for &j in &gene[1..] {
                if c[j] != c[gene[0]] {
                    return Err(Error::TieViolation { a: gene[0], b: j });
                }
            }
        }
        Ok(())
    }

    /// Grid index of every gene.
    pub fn to_genes(&self, c: &WidthVector) -> Result<Vec<usize>> {
        self.validate(c)?;
        Ok(self
            .genes
            .iter()
            .map(|g| self.grids[g[0]].binary_search(&c[g[0]]).unwrap())
            .collect())
    }

    /// Width vector from per-gene grid indices; indices must be in range.
    pub fn from_genes(&self, idx: &[usize]) -> WidthVector {
        let mut widths = vec![0; self.layers.len()];
        for (g, gene) in self.genes.iter().enumerate() {
            let w = self.grids[gene[0]][idx[g]];
            for &layer in gene {
                widths[layer] = w;
            }
        }
        WidthVector(widths)
    }

    /// Every width of the space in lexicographic gene-index order.
    pub fn enumerate(&self) -> impl Iterator<Item = WidthVector> + '_ {
        let radices: Vec<usize> = (0..self.genes.len()).map(|g| self.gene_grid(g).len()).collect();
        let total = self.size() as usize;
        (0..total).map(move |mut n| {
            let mut idx = vec![0; radices.len()];
            for g in (0..radices.len()).rev() {
                idx[g] = n % radices[g];
                n /= radices[g];
            }
            self.from_genes(&idx)
        })
    }

    /// Draws each gene independently and uniformly from its grid.
    pub fn sample_uniform<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> WidthVector {
        let idx: Vec<usize> = (0..self.genes.len())
            .map(|g| rng.random_range(0..self.gene_grid(g).len()))
            .collect();
        self.from_genes(&idx)
    }

    /// The complementary width: `(l + l_s) - c` per layer, with the full
    /// width mapped to itself when the layer has no base width.
    pub fn complement(&self, c: &WidthVector) -> Result<WidthVector> {
        self.validate(c)?;
        let widths = self
            .layers
            .iter()
            .zip(&c.0)
            .map(|(spec, &w)| complement_width(spec, w))
            .collect();
        Ok(WidthVector(widths))
    }

    /// Exact parameter count of the standalone dense network of width `c`.
    pub fn params(&self, c: &WidthVector) -> u64 {
        let dims = self.dims(c);
        dims.windows(2).map(|p| (p[0] * p[1] + p[1]) as u64).sum()
    }

    /// `[input_dim, c_1, ..., c_L, output_dim]`.
    pub fn dims(&self, c: &WidthVector) -> Vec<usize> {
        let mut dims = Vec::with_capacity(c.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&c.0);
        dims.push(self.output_dim);
        dims
    }
}

/// Per-layer complement. `w` must be on the layer's grid.
pub fn complement_width(spec: &LayerSpec, w: usize) -> usize {
    if spec.base_width > 0 {
        spec.max_width + spec.base_width - w
    } else if w == spec.max_width {
        w
    } else {
        spec.max_width - w
    }
}

/// Dense-layer FLOPs: one multiply and one add per weight.
pub fn dense_flops(c_in: usize, c_out: usize) -> u64 {
    2 * c_in as u64 * c_out as u64
}

/// FLOPs of one dense map for every (input, output) grid pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub in_widths: Vec<usize>,
    pub out_widths: Vec<usize>,
    /// Row-major `[in][out]`.
    pub flops: Vec<u64>,
}

impl LayerFlops {
    pub fn get(&self, c_in: usize, c_out: usize) -> Option<u64> {
        let i = self.in_widths.binary_search(&c_in).ok()?;
        let j = self.out_widths.binary_search(&c_out).ok()?;
        Some(self.flops[i * self.out_widths.len() + j])
    }

    pub fn at(&self, i: usize, j: usize) -> u64 {
        self.flops[i * self.out_widths.len() + j]
    }
}

/// Lookup table `F(layer, c_in, c_out)` for the `L + 1` dense maps of a
/// space (map `k` takes layer `k - 1` to layer `k`; the boundary maps use
/// the fixed input and output dimensions as single-point grids).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsTable {
    pub layers: Vec<LayerFlops>,
}

impl FlopsTable {
    /// Table under the dense `2 * c_in * c_out` convention.
    pub fn dense(space: &SearchSpace) -> Self {
        Self::build(space, dense_flops)
    }

    pub fn build(space: &SearchSpace, per_map: impl Fn(usize, usize) -> u64) -> Self {
        let n = space.num_layers();
        let grid_of = |k: usize| -> Vec<usize> {
            if k == 0 {
                vec![space.input_dim()]
            } else if k == n + 1 {
                vec![space.output_dim()]
            } else {
                space.grid(k - 1).to_vec()
            }
        };
        let layers = (0..=n)
            .map(|k| {
                let in_widths = grid_of(k);
                let out_widths = grid_of(k + 1);
                let flops = in_widths
                    .iter()
                    .flat_map(|&a| out_widths.iter().map(move |&b| (a, b)))
                    .map(|(a, b)| per_map(a, b))
                    .collect();
                LayerFlops {
                    in_widths,
                    out_widths,
                    flops,
                }
            })
            .collect();
        Self { layers }
    }

    /// Total FLOPs of width `c`.
    pub fn flops(&self, c: &WidthVector) -> Result<u64> {
        let n = c.len();
        if self.layers.len() != n + 1 {
            return Err(Error::WidthLength {
                expected: self.layers.len().saturating_sub(1),
                got: n,
            });
        }
        let mut total = 0u64;
        for (k, table) in self.layers.iter().enumerate() {
            let c_in = if k == 0 { table.in_widths[0] } else { c[k - 1] };
            let c_out = if k == n { table.out_widths[0] } else { c[k] };
            total += table
                .get(c_in, c_out)
                .ok_or(Error::MissingFlopsEntry { layer: k, c_in, c_out })?;
        }
        Ok(total)
    }
}

/// Total FLOPs of `c` looked up in `table`.
pub fn flops(c: &WidthVector, table: &FlopsTable) -> Result<u64> {
    table.flops(c)
}
