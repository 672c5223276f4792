//! Seeded synthetic classification data. Datasets are regenerated from
//! their config on demand and never stored.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Batch;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Generator {
    /// Each class is a mixture of `clusters_per_class` isotropic Gaussians
    /// whose centres are drawn from `N(0, spread²)`.
    GaussianBlobs {
        clusters_per_class: usize,
        spread: f64,
        noise: f64,
    },
    /// Interleaved spiral arms in the plane, one per class.
    TwoSpirals { turns: f64, noise: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub generator: Generator,
}

impl DataConfig {
    pub fn blobs(seed: u64, input_dim: usize, num_classes: usize) -> Self {
        Self {
            seed,
            n_train: 1024,
            n_val: 512,
            num_classes,
            input_dim,
            generator: Generator::GaussianBlobs {
                clusters_per_class: 3,
                spread: 2.0,
                noise: 0.6,
            },
        }
    }
}

/// Row-major features with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(&self.x, &self.y, self.dim)
    }

    /// Copies the rows in `order[range]` into a contiguous batch.
    pub fn gather(&self, rows: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        let mut y = Vec::with_capacity(rows.len());
        for &r in rows {
            x.extend_from_slice(&self.x[r * self.dim..(r + 1) * self.dim]);
            y.push(self.y[r]);
        }
        (x, y)
    }

    /// Shuffled mini-batches of row indices.
    pub fn epoch_order<R: rand::Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size).map(|c| c.to_vec()).collect()
    }
}

/// Train and validation splits drawn from one generator stream: the first
/// `n_train` samples train, the rest validate.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: DataConfig,
    pub train: Dataset,
    pub val: Dataset,
}

impl SynthDataset {
    pub fn generate(config: &DataConfig) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::InvalidSpace("need at least two classes".into()));
        }
        if config.n_train == 0 || config.n_val == 0 {
            return Err(Error::Empty("train or validation split".into()));
        }
        let mut rng = substream(config.seed, "data");
        let total = config.n_train + config.n_val;
        let dim = config.input_dim;
        let mut x = Vec::with_capacity(total * dim);
        let mut y = Vec::with_capacity(total);

        match &config.generator {
            Generator::GaussianBlobs {
                clusters_per_class,
                spread,
                noise,
            } => {
                let k = config.num_classes * clusters_per_class.max(&1);
                let centres: Vec<Vec<f64>> = (0..k)
                    .map(|_| (0..dim).map(|_| spread * normal(&mut rng)).collect())
                    .collect();
                for _ in 0..total {
                    let cluster = rng.random_range(0..k);
                    for c in &centres[cluster] {
                        x.push(c + noise * normal(&mut rng));
                    }
                    y.push(cluster % config.num_classes);
                }
            }
            Generator::TwoSpirals { turns, noise } => {
                if dim != 2 {
                    return Err(Error::Dimension(format!("spirals are 2-D, input_dim is {dim}")));
                }
                let arms = config.num_classes;
                for _ in 0..total {
                    let arm = rng.random_range(0..arms);
                    let t: f64 = rng.random_range(0.05..1.0);
                    let angle = 2.0 * PI * turns * t + 2.0 * PI * arm as f64 / arms as f64;
                    x.push(t * angle.cos() + noise * normal(&mut rng));
                    x.push(t * angle.sin() + noise * normal(&mut rng));
                    y.push(arm);
                }
            }
        }

        let split = config.n_train * dim;
        let train = Dataset {
            x: x[..split].to_vec(),
            y: y[..config.n_train].to_vec(),
            dim,
        };
        let val = Dataset {
            x: x[split..].to_vec(),
            y: y[config.n_train..].to_vec(),
            dim,
        };
        Ok(Self {
            config: config.clone(),
            train,
            val,
        })
    }
}

fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
