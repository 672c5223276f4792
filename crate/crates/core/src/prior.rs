//! Prior initial population sampling.
//!
//! The best `m` widths seen during supernet training give, for every layer
//! and candidate width, a potential error: the mean training loss of the
//! retained widths that used it. Per-layer categorical distributions are
//! then chosen to minimize the expected potential error subject to a
//! budget on expected FLOPs, a bilinear form over adjacent layers. The
//! initial population of the evolutionary search is drawn from them.

use std::collections::HashSet;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed_substream, Rng};
use crate::space::{FlopsTable, SearchSpace, WidthVector};
use crate::supertrain::LossLog;

/// Default number of retained widths.
pub const DEFAULT_TOP_M: usize = 100;
/// Relative slack allowed on the expected-FLOPs budget.
pub const FEASIBILITY_SLACK: f64 = 1e-3;

/// `E(layer, width)` with visit counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialErrorTable {
    /// Per layer, one value per grid width.
    pub values: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    /// Cells with no retained observation, filled by imputation.
    pub imputed: Vec<Vec<bool>>,
}

impl PotentialErrorTable {
    pub fn is_observed(&self, layer: usize, idx: usize) -> bool {
        !self.imputed[layer][idx]
    }
}

/// Averages the losses of the `m` best logged widths per (layer, width).
/// Unobserved cells get the largest observed value plus one sample standard
/// deviation of the retained losses.
pub fn build_error_table(log: &LossLog, m: usize, space: &SearchSpace) -> Result<PotentialErrorTable> {
    if log.len() < m {
        warn!("loss log holds {} entries, fewer than m = {m}; using all", log.len());
    }
    let top = log.top_m(m);
    if top.is_empty() {
        return Err(Error::Empty("loss log".into()));
    }
    let n = space.num_layers();
    let mut sums: Vec<Vec<f64>> = (0..n).map(|l| vec![0.0; space.grid(l).len()]).collect();
    let mut counts: Vec<Vec<usize>> = (0..n).map(|l| vec![0; space.grid(l).len()]).collect();
    for e in &top {
        space.validate(&e.width)?;
        for l in 0..n {
            let i = space.grid(l).binary_search(&e.width[l]).unwrap();
            sums[l][i] += e.loss;
            counts[l][i] += 1;
        }
    }

    let losses: Vec<f64> = top.iter().map(|e| e.loss).collect();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let sd = if losses.len() > 1 {
        (losses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (losses.len() - 1) as f64).sqrt()
    } else {
        0.0
    };

    let mut values: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| {
            s.iter()
                .zip(c)
                .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
                .collect()
        })
        .collect();
    let max_observed = values
        .iter()
        .flatten()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let fill = max_observed + sd;
    let imputed = counts.iter().map(|c| c.iter().map(|&k| k == 0).collect()).collect();
    for row in values.iter_mut() {
        for v in row.iter_mut() {
            if v.is_nan() {
                *v = fill;
            }
        }
    }
    Ok(PotentialErrorTable {
        values,
        counts,
        imputed,
    })
}

/// Per-layer categorical distributions over the grid widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingDistribution {
    pub widths: Vec<Vec<usize>>,
    pub probs: Vec<Vec<f64>>,
}

impl SamplingDistribution {
    pub fn uniform(space: &SearchSpace) -> Self {
        let widths: Vec<Vec<usize>> = (0..space.num_layers()).map(|l| space.grid(l).to_vec()).collect();
        let probs = widths.iter().map(|w| vec![1.0 / w.len() as f64; w.len()]).collect();
        Self { widths, probs }
    }

    /// Largest deviation of any layer's probability sum from 1, or infinity
    /// if an entry is negative or non-finite.
    pub fn simplex_error(&self) -> f64 {
        self.probs
            .iter()
            .map(|p| {
                if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
                    f64::INFINITY
                } else {
                    (p.iter().sum::<f64>() - 1.0).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    /// `Σ_l P(l,·)·E(l,·)`.
    pub fn objective(&self, table: &PotentialErrorTable) -> f64 {
        self.probs
            .iter()
            .zip(&table.values)
            .map(|(p, e)| p.iter().zip(e).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    /// Expected FLOPs when every gene is drawn independently from its
    /// distribution; consecutive tied layers share one draw.
    pub fn expected_flops(&self, space: &SearchSpace, flops: &FlopsTable) -> f64 {
        let probs: Vec<&[f64]> = self.probs.iter().map(|p| p.as_slice()).collect();
        expected_flops_of(space, flops, &probs)
    }
}

fn gene_of(space: &SearchSpace) -> Vec<usize> {
    let mut g = vec![0; space.num_layers()];
    for (i, gene) in space.genes().iter().enumerate() {
        for &l in gene {
            g[l] = i;
        }
    }
    g
}

fn expected_flops_of(space: &SearchSpace, flops: &FlopsTable, probs: &[&[f64]]) -> f64 {
    let n = space.num_layers();
    let gene = gene_of(space);
    let point = [1.0];
    let mut total = 0.0;
    for (k, map) in flops.layers.iter().enumerate() {
        let pin: &[f64] = if k == 0 { &point } else { probs[k - 1] };
        let pout: &[f64] = if k == n { &point } else { probs[k] };
        if k > 0 && k < n && gene[k - 1] == gene[k] {
            for (i, &a) in pin.iter().enumerate() {
                total += a * map.at(i, i) as f64;
            }
        } else {
            for (i, &a) in pin.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (j, &b) in pout.iter().enumerate() {
                    total += a * b * map.at(i, j) as f64;
                }
            }
        }
    }
    total
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &x) in u.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Solver knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub restarts: usize,
    pub iterations: usize,
    pub step: f64,
    pub initial_penalty: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            iterations: 2000,
            step: 0.05,
            initial_penalty: 10.0,
            seed: 0,
        }
    }
}

/// The optimization problem on per-gene distributions.
struct Problem<'a> {
    space: &'a SearchSpace,
    flops: &'a FlopsTable,
    /// Per gene, summed potential error over its layers.
    cost: Vec<Vec<f64>>,
    budget: f64,
}

impl Problem<'_> {
    fn layer_probs<'p>(&self, genes: &'p [Vec<f64>]) -> Vec<&'p [f64]> {
        gene_of(self.space).iter().map(|&g| genes[g].as_slice()).collect()
    }

    fn objective(&self, p: &[Vec<f64>]) -> f64 {
        p.iter()
            .zip(&self.cost)
            .map(|(a, e)| a.iter().zip(e).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    fn exp_flops(&self, p: &[Vec<f64>]) -> f64 {
        expected_flops_of(self.space, self.flops, &self.layer_probs(p))
    }

    /// Normalized constraint `E[FLOPs]/F_b - 1` and its gradient per gene.
    fn constraint(&self, p: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let n = self.space.num_layers();
        let gene = gene_of(self.space);
        let probs = self.layer_probs(p);
        let mut grad: Vec<Vec<f64>> = p.iter().map(|g| vec![0.0; g.len()]).collect();
        let point = [1.0];
        let mut total = 0.0;
        for (k, map) in self.flops.layers.iter().enumerate() {
            let pin: &[f64] = if k == 0 { &point } else { probs[k - 1] };
            let pout: &[f64] = if k == n { &point } else { probs[k] };
            if k > 0 && k < n && gene[k - 1] == gene[k] {
                for (i, &a) in pin.iter().enumerate() {
                    let f = map.at(i, i) as f64;
                    total += a * f;
                    grad[gene[k]][i] += f;
                }
                continue;
            }
            for (i, &a) in pin.iter().enumerate() {
                for (j, &b) in pout.iter().enumerate() {
                    let f = map.at(i, j) as f64;
                    total += a * b * f;
                    if k > 0 {
                        grad[gene[k - 1]][i] += b * f;
                    }
                    if k < n {
                        grad[gene[k]][j] += a * f;
                    }
                }
            }
        }
        for g in grad.iter_mut() {
            g.iter_mut().for_each(|v| *v /= self.budget);
        }
        (total / self.budget - 1.0, grad)
    }

    fn penalized(&self, p: &[Vec<f64>], rho: f64) -> f64 {
        let h = (self.exp_flops(p) / self.budget - 1.0).max(0.0);
        self.objective(p) + 0.5 * rho * h * h
    }

    /// Shifts mass toward every gene's smallest width, by the least amount
    /// that satisfies the budget exactly.
    fn repair(&self, p: &mut [Vec<f64>]) {
        if self.exp_flops(p) <= self.budget {
            return;
        }
        let mix = |t: f64| -> Vec<Vec<f64>> {
            p.iter()
                .map(|g| {
                    let mut out: Vec<f64> = g.iter().map(|x| (1.0 - t) * x).collect();
                    out[0] += t;
                    out
                })
                .collect()
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.exp_flops(&mix(mid)) <= self.budget {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let fixed = mix(hi);
        p.iter_mut().zip(fixed).for_each(|(a, b)| *a = b);
    }

    fn solve_from(&self, mut p: Vec<Vec<f64>>, cfg: &SolverConfig) -> Vec<Vec<f64>> {
        let mut rho = cfg.initial_penalty;
        for it in 0..cfg.iterations {
            let (h, gh) = self.constraint(&p);
            let viol = h.max(0.0);
            let grad: Vec<Vec<f64>> = self
                .cost
                .iter()
                .zip(&gh)
                .map(|(e, g)| e.iter().zip(g).map(|(a, b)| a + rho * viol * b).collect())
                .collect();
            let current = self.penalized(&p, rho);
            let mut t = cfg.step;
            let mut moved = false;
            for _ in 0..40 {
                let cand: Vec<Vec<f64>> = p
                    .iter()
                    .zip(&grad)
                    .map(|(x, g)| {
                        let stepped: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - t * b).collect();
                        project_simplex(&stepped)
                    })
                    .collect();
                let mut lin = 0.0;
                let mut sq = 0.0;
                for ((c, x), g) in cand.iter().zip(&p).zip(&grad) {
                    for ((ci, xi), gi) in c.iter().zip(x).zip(g) {
                        lin += gi * (ci - xi);
                        sq += (ci - xi) * (ci - xi);
                    }
                }
                if sq == 0.0 {
                    break;
                }
                if self.penalized(&cand, rho) <= current + lin + sq / (2.0 * t) {
                    p = cand;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if (it + 1) % 50 == 0 && self.constraint(&p).0 > 1e-6 {
                rho = (rho * 2.0).min(1e12);
            }
            if !moved && viol == 0.0 {
                break;
            }
        }
        self.repair(&mut p);
        self.polish(&mut p);
        p
    }

    /// Block-coordinate polish. With all other genes fixed, expected FLOPs
    /// is linear in one gene's distribution, so each block is a small LP
    /// whose optimum has at most two non-zero entries; solve it exactly and
    /// cycle until no block improves. Feasibility is preserved.
    fn polish(&self, p: &mut [Vec<f64>]) {
        for _ in 0..100 {
            let mut improved = false;
            for g in 0..p.len() {
                let k = p[g].len();
                let saved = p[g].clone();
                let a: Vec<f64> = (0..k)
                    .map(|i| {
                        p[g] = unit(k, i);
                        self.exp_flops(p)
                    })
                    .collect();
                p[g] = saved;
                let e = &self.cost[g];
                let current: f64 = p[g].iter().zip(e).map(|(x, y)| x * y).sum();
                let r = self.budget;

                let mut best: Option<(f64, Vec<f64>)> = None;
                let mut offer = |obj: f64, dist: Vec<f64>| {
                    if best.as_ref().is_none_or(|b| obj < b.0) {
                        best = Some((obj, dist));
                    }
                };
                for i in 0..k {
                    if a[i] > r {
                        continue;
                    }
                    offer(e[i], unit(k, i));
                    for j in 0..k {
                        if a[j] > r && e[j] < e[i] {
                            let t = (r - a[i]) / (a[j] - a[i]);
                            let mut d = vec![0.0; k];
                            d[i] = 1.0 - t;
                            d[j] = t;
                            offer(e[i] + t * (e[j] - e[i]), d);
                        }
                    }
                }
                if let Some((obj, dist)) = best {
                    if obj < current - 1e-12 {
                        let saved = std::mem::replace(&mut p[g], dist);
                        if self.exp_flops(p) <= r {
                            improved = true;
                        } else {
                            p[g] = saved;
                        }
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
}

fn unit(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

/// Solved distribution with its diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSolution {
    pub distribution: SamplingDistribution,
    pub objective: f64,
    pub expected_flops: f64,
    pub budget: u64,
    pub restart: usize,
}

/// Minimizes `Σ_l P(l,·)·E(l,·)` over products of simplices subject to
/// `E[FLOPs] ≤ F_b`.
pub fn solve_distribution(
    table: &PotentialErrorTable,
    space: &SearchSpace,
    flops: &FlopsTable,
    budget: u64,
    cfg: &SolverConfig,
) -> Result<PriorSolution> {
    let minimum = flops.flops(&space.min_width())?;
    if budget < minimum {
        return Err(Error::InfeasibleBudget { budget, minimum });
    }
    let cost: Vec<Vec<f64>> = space
        .genes()
        .iter()
        .map(|gene| {
            (0..space.grid(gene[0]).len())
                .map(|i| gene.iter().map(|&l| table.values[l][i]).sum())
                .collect()
        })
        .collect();
    let problem = Problem {
        space,
        flops,
        cost,
        budget: budget as f64,
    };

    let inits: Vec<Vec<Vec<f64>>> = (0..cfg.restarts.max(1))
        .map(|r| {
            let mut rng = indexed_substream(cfg.seed, "prior", r as u64);
            problem
                .cost
                .iter()
                .map(|e| {
                    if r == 0 {
                        vec![1.0 / e.len() as f64; e.len()]
                    } else {
                        dirichlet_ones(e.len(), &mut rng)
                    }
                })
                .collect()
        })
        .collect();

    let limit = problem.budget * (1.0 + FEASIBILITY_SLACK);
    let candidates: Vec<(usize, f64, Vec<Vec<f64>>)> = inits
        .into_par_iter()
        .enumerate()
        .flat_map_iter(|(r, init)| {
            let mut out = Vec::with_capacity(2);
            if problem.exp_flops(&init) <= limit {
                out.push((r, problem.objective(&init), init.clone()));
            }
            let solved = problem.solve_from(init, cfg);
            out.push((r, problem.objective(&solved), solved));
            out
        })
        .collect();

    let feasible: Vec<_> = candidates
        .into_iter()
        .filter(|(_, _, p)| problem.exp_flops(p) <= limit)
        .collect();
    let best = feasible.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    // ties (up to rounding) go to the lowest restart index
    let tol = 1e-12 * best.abs().max(1.0);
    let (restart, objective, genes) = feasible
        .into_iter()
        .find(|c| c.1 <= best + tol)
        .expect("repair always yields a feasible point");

    let gene = gene_of(space);
    let distribution = SamplingDistribution {
        widths: (0..space.num_layers()).map(|l| space.grid(l).to_vec()).collect(),
        probs: gene.iter().map(|&g| genes[g].clone()).collect(),
    };
    let expected_flops = distribution.expected_flops(space, flops);
    Ok(PriorSolution {
        distribution,
        objective,
        expected_flops,
        budget,
        restart,
    })
}

fn dirichlet_ones(k: usize, rng: &mut Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / s).collect()
}

/// Draws `n` widths from `dist` (genes independent), keeping only those
/// within budget. Fails if fewer than 0.1% of draws are accepted after a
/// million draws.
pub fn draw_feasible(
    dist: &SamplingDistribution,
    space: &SearchSpace,
    flops: &FlopsTable,
    budget: u64,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<WidthVector>> {
    let samplers = space
        .genes()
        .iter()
        .map(|g| {
            WeightedIndex::new(dist.probs[g[0]].iter().map(|p| p.max(0.0)))
                .map_err(|e| Error::Parse(format!("bad distribution for layer {}: {e}", g[0])))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(n);
    let mut draws = 0usize;
    while out.len() < n {
        let idx: Vec<usize> = samplers.iter().map(|s| s.sample(rng)).collect();
        let c = space.from_genes(&idx);
        draws += 1;
        if flops.flops(&c)? <= budget {
            out.push(c);
        }
        if draws >= 1_000_000 && (out.len() as f64) < 1e-3 * draws as f64 {
            return Err(Error::LowAcceptance {
                accepted: out.len(),
                draws,
            });
        }
    }
    Ok(out)
}

/// Uniform rejection sampling of up to `n` distinct feasible widths, not
/// repeating anything in `exclude`. Stops early once the feasible region
/// looks exhausted.
pub fn uniform_feasible(
    space: &SearchSpace,
    flops: &FlopsTable,
    budget: u64,
    n: usize,
    exclude: &HashSet<WidthVector>,
    rng: &mut Rng,
) -> Result<Vec<WidthVector>> {
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(n);
    let mut draws = 0usize;
    let mut accepted = 0usize;
    let mut since_new = 0usize;
    while out.len() < n {
        let c = space.sample_uniform(rng);
        draws += 1;
        if flops.flops(&c)? <= budget {
            accepted += 1;
            if seen.insert(c.clone()) {
                out.push(c);
                since_new = 0;
                continue;
            }
        }
        since_new += 1;
        if draws >= 1_000_000 && (accepted as f64) < 1e-3 * draws as f64 {
            return Err(Error::LowAcceptance { accepted, draws });
        }
        if since_new >= 100_000 {
            warn!("feasible region exhausted after {} distinct widths", out.len());
            break;
        }
    }
    Ok(out)
}

/// Initial population: `size` feasible draws from `dist`, deduplicated,
/// then padded with uniform feasible widths.
pub fn sample_population(
    dist: &SamplingDistribution,
    space: &SearchSpace,
    flops: &FlopsTable,
    budget: u64,
    size: usize,
    rng: &mut Rng,
) -> Result<Vec<WidthVector>> {
    let drawn = draw_feasible(dist, space, flops, budget, size, rng)?;
    let mut seen = HashSet::new();
    let mut population: Vec<WidthVector> = drawn.into_iter().filter(|c| seen.insert(c.clone())).collect();
    if population.len() < size {
        let pad = uniform_feasible(space, flops, budget, size - population.len(), &seen, rng)?;
        population.extend(pad);
    }
    Ok(population)
}
