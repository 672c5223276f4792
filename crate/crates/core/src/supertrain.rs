//! Supernet training under the UA, BC and BCv2 assignment principles.
//!
//! Each batch samples a width uniformly from the space. Coupled principles
//! train the left and right paths of that width, either together with the
//! averaged loss (`BothPaths`) or one side per batch, odd batches left and
//! even batches right (`Iterative`). With complementary training the
//! complementary width is trained on the same batch, so every channel of a
//! coupled layer is visited equally often.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::assign::{Principle, Side};
use crate::error::{Error, Result};
use crate::net::{Batch, Dataset, Grads, MiniNet, Path, Sgd};
use crate::rng::substream;
use crate::space::{SearchSpace, WidthVector};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    #[default]
    BothPaths,
    Iterative,
}

/// How the sampled width and its complement share optimizer updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplementarySchedule {
    /// Gradients of `c` and `c̄` summed into one update.
    #[default]
    Joint,
    /// One update for `c`, then one for `c̄`.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub seed: u64,
    pub principle: Principle,
    pub complementary: bool,
    #[serde(default)]
    pub update_mode: UpdateMode,
    #[serde(default)]
    pub complementary_schedule: ComplementarySchedule,
    #[serde(default)]
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr0: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            seed: 0,
            principle: Principle::Bc,
            complementary: true,
            update_mode: UpdateMode::BothPaths,
            complementary_schedule: ComplementarySchedule::Joint,
            normalize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parse("epochs and batch_size must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr_min.is_finite() && self.momentum.is_finite()) {
            return Err(Error::Parse("non-finite optimizer setting".into()));
        }
        Ok(())
    }

    /// Cosine schedule from `lr0` at step 0 to `lr_min` at `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let t = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Sides trained on the 1-based global batch `batch_index`.
    pub fn sides_for(&self, batch_index: u64) -> &'static [Side] {
        if !self.principle.is_bilateral() {
            return &[Side::Left];
        }
        match self.update_mode {
            UpdateMode::BothPaths => &[Side::Left, Side::Right],
            UpdateMode::Iterative if batch_index % 2 == 1 => &[Side::Left],
            UpdateMode::Iterative => &[Side::Right],
        }
    }
}

/// Which paths produced a logged loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSide {
    Both,
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub width: WidthVector,
    pub loss: f64,
    pub side: LossSide,
    pub step: u64,
}

/// Bounded history of `(width, training loss)` observations.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLog {
    capacity: usize,
    entries: VecDeque<LossEntry>,
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    config_hash: String,
    capacity: usize,
}

impl LossLog {
    pub const DEFAULT_CAPACITY: usize = 1 << 20;

    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, entry: LossEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &LossEntry> {
        self.entries.iter()
    }

    /// The `m` retained entries with the smallest loss (earlier step first on ties).
    pub fn top_m(&self, m: usize) -> Vec<&LossEntry> {
        let mut all: Vec<&LossEntry> = self.entries.iter().collect();
        all.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.step.cmp(&b.step)));
        all.truncate(m);
        all
    }

    /// JSON lines: a header object, then one entry per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W, config_hash: &str) -> Result<()> {
        let header = LogHeader {
            config_hash: config_hash.to_string(),
            capacity: self.capacity,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    /// Returns the log and the header's config hash.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<(Self, String)> {
        let mut lines = r.lines();
        let header: LogHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::Empty("loss log".into())),
        };
        let mut log = LossLog::new(header.capacity);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            log.push(serde_json::from_str(&line)?);
        }
        Ok((log, header.config_hash))
    }
}

/// Result of running some paths of one width over one batch.
#[derive(Clone, Debug)]
pub struct PassTrace {
    /// Mean loss over the sides run.
    pub loss: f64,
    /// Activation values held at once (all sides' forward caches).
    pub live_values: usize,
    /// Per hidden layer, the zero-based channel ranges that were activated.
    pub spans: Vec<Vec<std::ops::Range<usize>>>,
}

/// Forwards `batch` through every side of width `c` (keeping all caches
/// alive, as a summed loss requires), then backpropagates each side with
/// weight `scale / sides.len()` into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn path_pass(
    net: &MiniNet,
    space: &SearchSpace,
    principle: Principle,
    sides: &[Side],
    batch: Batch<'_>,
    c: &WidthVector,
    scale: f64,
    grads: &mut Grads,
) -> Result<PassTrace> {
    let paths = sides
        .iter()
        .map(|&s| Path::for_width(space, principle, c, s))
        .collect::<Result<Vec<_>>>()?;
    let caches = paths
        .iter()
        .map(|p| net.forward(batch, p))
        .collect::<Result<Vec<_>>>()?;
    let live_values = caches.iter().map(|c| c.live_values()).sum();
    let loss = caches.iter().map(|c| c.loss).sum::<f64>() / caches.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence { width: c.to_string() });
    }
    let w = scale / caches.len() as f64;
    for cache in &caches {
        net.backward(cache, batch, w, grads);
    }
    let spans = (0..space.num_layers())
        .map(|k| paths.iter().map(|p| p.hidden[k].clone()).collect())
        .collect();
    Ok(PassTrace {
        loss,
        live_values,
        spans,
    })
}

/// Counters and memory statistics collected while training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub batches: u64,
    pub updates: u64,
    /// Per hidden layer, how many trained paths used each physical channel.
    pub channel_counts: Vec<Vec<u64>>,
    /// Largest number of activation values alive at once.
    pub peak_live_values: usize,
    /// Mean training loss over the final epoch.
    pub final_epoch_loss: f64,
}

impl TrainStats {
    fn record_spans(&mut self, spans: &[Vec<std::ops::Range<usize>>]) {
        for (k, layer_spans) in spans.iter().enumerate() {
            for r in layer_spans {
                for ch in r.clone() {
                    self.channel_counts[k][ch] += 1;
                }
            }
        }
    }
}

/// Stateful trainer; one call to [`SupernetTrainer::train_batch`] per batch.
pub struct SupernetTrainer<'a> {
    space: &'a SearchSpace,
    config: &'a TrainConfig,
    pub net: MiniNet,
    opt: Sgd,
    grads: Grads,
    pub log: LossLog,
    pub stats: TrainStats,
}

impl<'a> SupernetTrainer<'a> {
    pub fn new(space: &'a SearchSpace, config: &'a TrainConfig, net: MiniNet) -> Result<Self> {
        config.validate()?;
        let expected = MiniNet::supernet(space, config.principle, net.normalize, &mut substream(0, "shape"))?.dims();
        if net.dims() != expected {
            return Err(Error::Dimension(format!(
                "net dims {:?} do not match space under {}: {:?}",
                net.dims(),
                config.principle,
                expected
            )));
        }
        let stats = TrainStats {
            channel_counts: net.dims()[1..net.dims().len() - 1]
                .iter()
                .map(|&w| vec![0; w])
                .collect(),
            ..TrainStats::default()
        };
        Ok(Self {
            space,
            config,
            opt: Sgd::new(&net, config.momentum),
            grads: Grads::zeros_like(&net),
            net,
            log: LossLog::new(LossLog::DEFAULT_CAPACITY),
            stats,
        })
    }

    /// Trains the sampled width `c` (and its complement, if enabled) on one batch.
    pub fn train_batch(&mut self, batch: Batch<'_>, c: &WidthVector, lr: f64) -> Result<f64> {
        self.stats.batches += 1;
        let index = self.stats.batches;
        let sides = self.config.sides_for(index);
        let side_tag = match sides {
            [Side::Left, Side::Right] => LossSide::Both,
            [Side::Right] => LossSide::Right,
            _ => LossSide::Left,
        };

        let mut widths = vec![c.clone()];
        if self.config.complementary {
            widths.push(self.space.complement(c)?);
        }

        let joint = self.config.complementary_schedule == ComplementarySchedule::Joint;
        let mut losses = 0.0;
        self.grads.clear();
        for (i, w) in widths.iter().enumerate() {
            if !joint && i > 0 {
                self.grads.clear();
            }
            let trace = path_pass(
                &self.net,
                self.space,
                self.config.principle,
                sides,
                batch,
                w,
                1.0,
                &mut self.grads,
            )?;
            self.stats.peak_live_values = self.stats.peak_live_values.max(trace.live_values);
            self.stats.record_spans(&trace.spans);
            self.log.push(LossEntry {
                width: w.clone(),
                loss: trace.loss,
                side: side_tag,
                step: index,
            });
            losses += trace.loss;
            if !joint {
                self.opt.step(&mut self.net, &self.grads, lr)?;
                self.stats.updates += 1;
            }
        }
        if joint {
            self.opt.step(&mut self.net, &self.grads, lr)?;
            self.stats.updates += 1;
        }
        Ok(losses / widths.len() as f64)
    }
}

/// Output of [`train_supernet`].
pub struct TrainOutcome {
    pub net: MiniNet,
    pub log: LossLog,
    pub stats: TrainStats,
}

/// Trains `net` as a supernet over `space` on `data`.
pub fn train_supernet(space: &SearchSpace, net: MiniNet, config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = SupernetTrainer::new(space, config, net)?;
    let mut shuffle = substream(config.seed, "shuffle");
    let mut sampler = substream(config.seed, "widths");
    let per_epoch = data.len().div_ceil(config.batch_size) as u64;
    let total = per_epoch * config.epochs as u64;
    let mut step = 0u64;
    for _ in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let batches = data.epoch_order(config.batch_size, &mut shuffle);
        for rows in &batches {
            let (x, y) = data.gather(rows);
            let batch = Batch::new(&x, &y, data.dim);
            let c = space.sample_uniform(&mut sampler);
            let lr = config.lr_at(step, total);
            epoch_loss += trainer.train_batch(batch, &c, lr)?;
            step += 1;
        }
        trainer.stats.final_epoch_loss = epoch_loss / batches.len() as f64;
    }
    Ok(TrainOutcome {
        net: trainer.net,
        log: trainer.log,
        stats: trainer.stats,
    })
}

/// Plain full-width training of a standalone net with the same batch
/// order and schedule as [`train_supernet`]. Returns the final-epoch loss.
pub fn train_plain(net: &mut MiniNet, config: &TrainConfig, data: &Dataset) -> Result<f64> {
    config.validate()?;
    let mut opt = Sgd::new(net, config.momentum);
    let mut grads = Grads::zeros_like(net);
    let path = Path::full(net);
    let mut shuffle = substream(config.seed, "shuffle");
    let per_epoch = data.len().div_ceil(config.batch_size) as u64;
    let total = per_epoch * config.epochs as u64;
    let mut step = 0u64;
    let mut last = f64::NAN;
    for _ in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let batches = data.epoch_order(config.batch_size, &mut shuffle);
        for rows in &batches {
            let (x, y) = data.gather(rows);
            let batch = Batch::new(&x, &y, data.dim);
            let cache = net.forward(batch, &path)?;
            if !cache.loss.is_finite() {
                return Err(Error::Divergence {
                    width: format!("{:?}", path.widths()),
                });
            }
            grads.clear();
            net.backward(&cache, batch, 1.0, &mut grads);
            opt.step(net, &grads, config.lr_at(step, total))?;
            epoch_loss += cache.loss;
            step += 1;
        }
        last = epoch_loss / batches.len() as f64;
    }
    Ok(last)
}
