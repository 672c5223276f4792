//! Exhaustive width benchmarks: every width of a small space retrained from
//! scratch, stored as JSON Lines, and used as ground truth for scoring how
//! well a supernet ranks widths.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{retrain_from_scratch, EvalReport, WidthEvaluator};
use crate::net::SynthDataset;
use crate::rng::{indexed_substream, substream};
use crate::space::{FlopsTable, SearchSpace, WidthVector};
use crate::supertrain::TrainConfig;

/// Largest space `generate_benchmark` will enumerate.
pub const GENERATE_GUARD: u128 = 4096;

pub const FORMAT: &str = "widthsearch-bench/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchHeader {
    pub format: String,
    pub family: String,
    pub space: SearchSpace,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub widths: WidthVector,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub header: BenchHeader,
    pub records: Vec<BenchRecord>,
}

impl BenchmarkTable {
    /// Checks one record per width of the declared space, non-negative
    /// spread and FLOPs/params matching the dense convention.
    pub fn validate(&self) -> Result<()> {
        let space = &self.header.space;
        if self.records.len() as u128 != space.size() {
            return Err(Error::SpaceMismatch(format!(
                "{} records for a space of {} widths",
                self.records.len(),
                space.size()
            )));
        }
        let flops = FlopsTable::dense(space);
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            space.validate(&r.widths)?;
            if !seen.insert(&r.widths) {
                return Err(Error::SpaceMismatch(format!("duplicate record for {}", r.widths)));
            }
            if r.acc_std.is_nan() || r.acc_std < 0.0 {
                return Err(Error::Parse(format!("negative acc_std for {}", r.widths)));
            }
            if r.flops != flops.flops(&r.widths)? || r.params != space.params(&r.widths) {
                return Err(Error::Parse(format!("flops or params disagree for {}", r.widths)));
            }
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<WidthVector> {
        self.records.iter().map(|r| r.widths.clone()).collect()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.acc_mean).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Empty("benchmark file".into()))??;
        let header: BenchHeader = serde_json::from_str(&first)?;
        if header.format != FORMAT {
            return Err(Error::Parse(format!("unknown benchmark format {:?}", header.format)));
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        let table = Self { header, records };
        table.validate()?;
        Ok(table)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "widths,acc_mean,acc_std,flops,params")?;
        for r in &self.records {
            let ws: Vec<String> = r.widths.0.iter().map(|x| x.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{}",
                ws.join("-"),
                r.acc_mean,
                r.acc_std,
                r.flops,
                r.params
            )?;
        }
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Retrains every width of `space` once per seed (`train.seed + k`) and
/// records mean and sample standard deviation of validation accuracy.
pub fn generate_benchmark(
    space: &SearchSpace,
    train: &TrainConfig,
    data: &SynthDataset,
    seeds: usize,
) -> Result<BenchmarkTable> {
    if space.size() > GENERATE_GUARD {
        return Err(Error::SpaceTooLarge {
            size: space.size(),
            guard: GENERATE_GUARD,
        });
    }
    if seeds == 0 {
        return Err(Error::Empty("benchmark seeds".into()));
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| train.seed.wrapping_add(k)).collect();
    let widths: Vec<WidthVector> = space.enumerate().collect();
    let jobs: Vec<(usize, u64)> = (0..widths.len())
        .flat_map(|i| seed_list.iter().map(move |&s| (i, s)))
        .collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let cfg = TrainConfig {
                seed: s,
                ..train.clone()
            };
            retrain_from_scratch(space, &widths[i], &cfg, data).map(|r| r.accuracy)
        })
        .collect::<Result<_>>()?;
    let flops = FlopsTable::dense(space);
    let records = widths
        .iter()
        .zip(accs.chunks(seeds))
        .map(|(c, a)| {
            let (acc_mean, acc_std) = mean_std(a);
            Ok(BenchRecord {
                widths: c.clone(),
                acc_mean,
                acc_std,
                flops: flops.flops(c)?,
                params: space.params(c),
            })
        })
        .collect::<Result<_>>()?;
    Ok(BenchmarkTable {
        header: BenchHeader {
            format: FORMAT.into(),
            family: "mlp".into(),
            space: space.clone(),
            seeds: seed_list,
            config_hash: None,
        },
        records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    pub kendall_tau: f64,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Undefined(format!("need at least two points, got {}", a.len())));
    }
    for (name, v) in [("first", a), ("second", b)] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Undefined(format!("{name} input has non-finite values")));
        }
        if v.iter().all(|x| *x == v[0]) {
            return Err(Error::Undefined(format!("{name} input is constant")));
        }
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` and returns the number of inversions.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall tau-b in O(n log n) (Knight's algorithm).
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as u64;
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let xs: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let xy: Vec<(f64, f64)> = idx.iter().map(|&i| (a[i], b[i])).collect();
    let mut ys: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let n0 = n * (n - 1) / 2;
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&xy);
    let swaps = merge_count(&mut ys, &mut Vec::with_capacity(a.len()));
    let n2 = tied_pairs(&ys);
    let num = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    let den = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

pub fn correlate(predicted: &[f64], truth: &[f64]) -> Result<CorrelationReport> {
    Ok(CorrelationReport {
        pearson: pearson(predicted, truth)?,
        spearman: spearman(predicted, truth)?,
        kendall_tau: kendall_tau_b(predicted, truth)?,
    })
}

/// Evaluates every benchmark width and correlates the estimates with the
/// table's ground truth.
pub fn score_supernet<E: WidthEvaluator + ?Sized>(
    evaluator: &E,
    space: &SearchSpace,
    table: &BenchmarkTable,
) -> Result<(CorrelationReport, Vec<EvalReport>)> {
    if table.header.space != *space {
        return Err(Error::SpaceMismatch(
            "benchmark was generated for a different space".into(),
        ));
    }
    let reports = evaluator.evaluate_all(&table.widths())?;
    let predicted: Vec<f64> = reports.iter().map(|r| r.acc_mean).collect();
    Ok((correlate(&predicted, &table.accuracies())?, reports))
}

/// Correlation between FLOPs and ground-truth accuracy.
pub fn flops_correlation(table: &BenchmarkTable) -> Result<CorrelationReport> {
    let f: Vec<f64> = table.records.iter().map(|r| r.flops as f64).collect();
    correlate(&f, &table.accuracies())
}

/// Analytic stand-in for trained accuracy, for exercising the searches
/// without training. Fitness is a concave, increasing function of the
/// layer-weighted total log width, plus a fixed per-width noise term.
#[derive(Clone, Debug)]
pub struct SyntheticOracle {
    space: SearchSpace,
    flops: FlopsTable,
    weights: Vec<f64>,
    noise: f64,
    seed: u64,
    range: (f64, f64),
}

impl SyntheticOracle {
    pub const DEFAULT_NOISE: f64 = 0.005;

    pub fn new(space: &SearchSpace, seed: u64, noise: f64) -> Self {
        let mut rng = substream(seed, "oracle");
        let weights: Vec<f64> = (0..space.num_layers())
            .map(|_| rand::Rng::random_range(&mut rng, 0.5..1.5))
            .collect();
        let score = |c: &WidthVector| -> f64 { c.0.iter().zip(&weights).map(|(&w, k)| k * (w as f64).ln()).sum() };
        let range = (score(&space.min_width()), score(&space.max_width()));
        Self {
            space: space.clone(),
            flops: FlopsTable::dense(space),
            weights,
            noise,
            seed,
            range,
        }
    }

    fn raw(&self, c: &WidthVector) -> f64 {
        let t: f64 = c.0.iter().zip(&self.weights).map(|(&w, k)| k * (w as f64).ln()).sum();
        let (lo, hi) = self.range;
        let u = if hi > lo { (t - lo) / (hi - lo) } else { 1.0 };
        0.5 + 0.45 * (1.0 - (-3.0 * u).exp()) / (1.0 - (-3.0f64).exp())
    }

    fn jitter(&self, c: &WidthVector) -> f64 {
        if self.noise == 0.0 {
            return 0.0;
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &w in &c.0 {
            h ^= w as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let z: f64 = StandardNormal.sample(&mut indexed_substream(self.seed, "oracle-noise", h));
        self.noise * z
    }

    pub fn fitness(&self, c: &WidthVector) -> Result<f64> {
        self.space.validate(c)?;
        Ok(self.raw(c) + self.jitter(c))
    }

    /// Training-loss proxy used to synthesize loss logs.
    pub fn loss(&self, c: &WidthVector) -> Result<f64> {
        Ok(1.0 - self.fitness(c)?)
    }

    /// Noise-free table of the whole space.
    pub fn table(&self) -> Result<BenchmarkTable> {
        let records = self
            .space
            .enumerate()
            .map(|c| {
                Ok(BenchRecord {
                    acc_mean: self.fitness(&c)?,
                    acc_std: 0.0,
                    flops: self.flops.flops(&c)?,
                    params: self.space.params(&c),
                    widths: c,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BenchmarkTable {
            header: BenchHeader {
                format: FORMAT.into(),
                family: "synthetic-oracle".into(),
                space: self.space.clone(),
                seeds: vec![self.seed],
                config_hash: None,
            },
            records,
        })
    }
}

impl WidthEvaluator for SyntheticOracle {
    fn evaluate(&self, c: &WidthVector) -> Result<EvalReport> {
        let acc = self.fitness(c)?;
        Ok(EvalReport::unilateral(c.clone(), acc, 1.0 - acc, self.flops.flops(c)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::LayerSpec;
    use rand::Rng as _;

    fn brute_kendall(a: &[f64], b: &[f64]) -> f64 {
        let (mut c, mut d, mut ta, mut tb) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let s = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
                if a[i] == a[j] && b[i] == b[j] {
                } else if a[i] == a[j] {
                    ta += 1;
                } else if b[i] == b[j] {
                    tb += 1;
                } else if s > 0.0 {
                    c += 1;
                } else {
                    d += 1;
                }
            }
        }
        (c - d) as f64 / (((c + d + ta) as f64) * ((c + d + tb) as f64)).sqrt()
    }

    #[test]
    fn textbook_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = correlate(&a, &a).unwrap();
        assert_eq!((r.pearson, r.spearman, r.kendall_tau), (1.0, 1.0, 1.0));
        let rev = [5.0, 4.0, 3.0, 2.0, 1.0];
        let r = correlate(&a, &rev).unwrap();
        assert_eq!((r.spearman, r.kendall_tau), (-1.0, -1.0));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            correlate(&[1.0, 2.0], &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(correlate(&[1.0], &[1.0]), Err(Error::Undefined(_))));
        assert!(matches!(correlate(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::Undefined(_))));
    }

    #[test]
    fn kendall_matches_pair_counting() {
        let mut rng = substream(9, "k");
        for _ in 0..300 {
            let n = rng.random_range(2..=10);
            // few distinct values to exercise ties
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
            match kendall_tau_b(&a, &b) {
                Ok(t) => assert!((t - brute_kendall(&a, &b)).abs() < 1e-12, "{a:?} {b:?}"),
                Err(_) => assert!(a.iter().all(|x| *x == a[0]) || b.iter().all(|x| *x == b[0])),
            }
        }
    }

    #[test]
    fn oracle_table_round_trips() {
        let space = SearchSpace::uniform(3, LayerSpec::new(8, 0, 4), 3, 2).unwrap();
        let oracle = SyntheticOracle::new(&space, 3, SyntheticOracle::DEFAULT_NOISE);
        let table = oracle.table().unwrap();
        assert_eq!(table.records.len(), 64);
        let mut buf = Vec::new();
        table.write_jsonl(&mut buf).unwrap();
        let back = BenchmarkTable::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, table);
        let mut again = Vec::new();
        back.write_jsonl(&mut again).unwrap();
        assert_eq!(again, buf);

        let (r, _) = score_supernet(&oracle, &space, &table).unwrap();
        assert_eq!((r.pearson, r.spearman, r.kendall_tau), (1.0, 1.0, 1.0));
        assert!(flops_correlation(&table).unwrap().kendall_tau > 0.0);
        let other = SearchSpace::uniform(3, LayerSpec::new(8, 0, 2), 3, 2).unwrap();
        assert!(matches!(
            score_supernet(&oracle, &other, &table),
            Err(Error::SpaceMismatch(_))
        ));
    }

    #[test]
    fn truncated_table_is_rejected() {
        let space = SearchSpace::uniform(2, LayerSpec::new(4, 0, 2), 2, 2).unwrap();
        let mut table = SyntheticOracle::new(&space, 0, 0.0).table().unwrap();
        table.records.pop();
        let mut buf = Vec::new();
        table.write_jsonl(&mut buf).unwrap();
        assert!(BenchmarkTable::read_jsonl(buf.as_slice()).is_err());
    }

    #[test]
    fn generation_guard_and_single_width() {
        let big = SearchSpace::uniform(7, LayerSpec::new(16, 0, 4), 3, 2).unwrap();
        assert_eq!(big.size(), 16384);
        let data = SynthDataset::generate(&crate::net::DataConfig {
            n_train: 64,
            n_val: 32,
            ..crate::net::DataConfig::blobs(1, 3, 2)
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        assert!(matches!(
            generate_benchmark(&big, &cfg, &data, 3),
            Err(Error::SpaceTooLarge { .. })
        ));
        let one = SearchSpace::uniform(2, LayerSpec::new(4, 0, 1), 3, 2).unwrap();
        let t = generate_benchmark(&one, &cfg, &data, 3).unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.header.seeds, vec![0, 1, 2]);
        assert!(t.records[0].acc_std >= 0.0);
    }
}
