//! Bilateral evaluation of widths on a trained supernet, and retraining
//! from scratch.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{Principle, Side};
use crate::error::Result;
use crate::net::{Dataset, MiniNet, Path, SynthDataset};
use crate::rng::substream;
use crate::space::{FlopsTable, SearchSpace, WidthVector};
use crate::supertrain::{train_plain, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub width: WidthVector,
    pub acc_left: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_right: Option<f64>,
    pub acc_mean: f64,
    pub flops: u64,
    pub loss_mean: f64,
}

impl EvalReport {
    /// Report for a one-sided evaluator.
    pub fn unilateral(width: WidthVector, acc: f64, loss: f64, flops: u64) -> Self {
        Self {
            width,
            acc_left: acc,
            acc_right: None,
            acc_mean: acc,
            flops,
            loss_mean: loss,
        }
    }
}

/// Better-first ordering: higher accuracy, then lower loss, then fewer
/// FLOPs, then the lexicographically smaller width.
pub fn rank_cmp(a: &EvalReport, b: &EvalReport) -> Ordering {
    b.acc_mean
        .total_cmp(&a.acc_mean)
        .then(a.loss_mean.total_cmp(&b.loss_mean))
        .then(a.flops.cmp(&b.flops))
        .then(a.width.cmp(&b.width))
}

/// Anything that can score a width.
pub trait WidthEvaluator: Sync {
    fn evaluate(&self, c: &WidthVector) -> Result<EvalReport>;

    /// Evaluates a list in parallel; the output order matches the input.
    fn evaluate_all(&self, widths: &[WidthVector]) -> Result<Vec<EvalReport>> {
        widths.par_iter().map(|c| self.evaluate(c)).collect()
    }
}

/// Scores `c` on a frozen supernet: accuracy of the left path, of the
/// right path for coupled principles, and their average.
pub fn evaluate(
    net: &MiniNet,
    space: &SearchSpace,
    flops: &FlopsTable,
    c: &WidthVector,
    val: &Dataset,
    principle: Principle,
) -> Result<EvalReport> {
    space.validate(c)?;
    let left = Path::for_width(space, principle, c, Side::Left)?;
    let (acc_left, loss_left) = net.score(val.batch(), &left)?;
    let (acc_right, loss_mean) = if principle.is_bilateral() {
        let right = Path::for_width(space, principle, c, Side::Right)?;
        let (acc, loss) = net.score(val.batch(), &right)?;
        (Some(acc), (loss_left + loss) / 2.0)
    } else {
        (None, loss_left)
    };
    let acc_mean = match acc_right {
        Some(r) => (acc_left + r) / 2.0,
        None => acc_left,
    };
    Ok(EvalReport {
        width: c.clone(),
        acc_left,
        acc_right,
        acc_mean,
        flops: flops.flops(c)?,
        loss_mean,
    })
}

/// A trained supernet bound to its space and validation split.
pub struct SupernetEvaluator<'a> {
    pub net: &'a MiniNet,
    pub space: &'a SearchSpace,
    pub flops: &'a FlopsTable,
    pub val: &'a Dataset,
    pub principle: Principle,
}

impl WidthEvaluator for SupernetEvaluator<'_> {
    fn evaluate(&self, c: &WidthVector) -> Result<EvalReport> {
        evaluate(self.net, self.space, self.flops, c, self.val, self.principle)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainResult {
    pub accuracy: f64,
    pub val_loss: f64,
    pub train_loss: f64,
    pub params: u64,
}

/// Trains the standalone network of width `c` from a fresh initialization
/// and returns its validation accuracy.
pub fn retrain_from_scratch(
    space: &SearchSpace,
    c: &WidthVector,
    config: &TrainConfig,
    data: &SynthDataset,
) -> Result<RetrainResult> {
    space.validate(c)?;
    let dims = space.dims(c);
    let mut net = MiniNet::new(&dims, config.normalize, &mut substream(config.seed, "init"));
    let train_loss = train_plain(&mut net, config, &data.train)?;
    let (accuracy, val_loss) = net.score(data.val.batch(), &Path::full(&net))?;
    Ok(RetrainResult {
        accuracy,
        val_loss,
        train_loss,
        params: space.params(c),
    })
}
