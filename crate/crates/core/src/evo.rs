//! Budget-constrained search over the width space: an elitist genetic
//! algorithm, greedy slimming and uniform random search.
//!
//! Genomes are vectors of grid indices, one per gene (tied layers share a
//! gene). Every width handed to the evaluator by [`evolve`] and
//! [`random_search`] goes through [`Searcher::evaluate`], which asserts the
//! budget.

use std::collections::{HashMap, HashSet};

use log::debug;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{rank_cmp, EvalReport, WidthEvaluator};
use crate::prior::uniform_feasible;
use crate::rng::Rng;
use crate::space::{FlopsTable, SearchSpace, WidthVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoConfig {
    pub population_size: usize,
    pub iterations: usize,
    pub survivors: usize,
    pub tournament_size: usize,
    /// Distribution index of the polynomial mutation.
    pub eta: f64,
    /// Per-gene mutation probability; `None` means one over the gene count.
    pub mutation_rate: Option<f64>,
    pub seed: u64,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            population_size: 40,
            iterations: 50,
            survivors: 10,
            tournament_size: 2,
            eta: 20.0,
            mutation_rate: None,
            seed: 0,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.survivors == 0 || self.survivors >= self.population_size {
            return Err(Error::Parse(format!(
                "survivors ({}) must be in 1..population_size ({})",
                self.survivors, self.population_size
            )));
        }
        if self.tournament_size == 0 || self.iterations == 0 {
            return Err(Error::Parse("tournament size and iterations must be positive".into()));
        }
        if self.eta.is_nan() || self.eta < 0.0 {
            return Err(Error::Parse(format!("eta must be non-negative, got {}", self.eta)));
        }
        if let Some(r) = self.mutation_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Parse(format!("mutation rate {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: WidthVector,
    pub fitness: f64,
    pub flops: u64,
}

impl From<&EvalReport> for Individual {
    fn from(r: &EvalReport) -> Self {
        Self {
            genome: r.width.clone(),
            fitness: r.acc_mean,
            flops: r.flops,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_width: WidthVector,
    pub best_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: EvalReport,
    pub history: Vec<HistoryRow>,
    /// Distinct widths evaluated.
    pub evaluations: usize,
}

/// Swaps the gene segment `[cut1, cut2)`.
pub fn two_point_crossover(a: &[usize], b: &[usize], cut1: usize, cut2: usize) -> (Vec<usize>, Vec<usize>) {
    assert!(
        a.len() == b.len() && cut1 < cut2 && cut2 <= a.len(),
        "bad crossover cuts"
    );
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x[cut1..cut2].copy_from_slice(&b[cut1..cut2]);
    y[cut1..cut2].copy_from_slice(&a[cut1..cut2]);
    (x, y)
}

/// Polynomial perturbation in `[-1, 1]` for a uniform draw `u ∈ [0, 1)`.
/// Its CDF is `½(1+δ)^(η+1)` below zero and `1 − ½(1−δ)^(η+1)` above.
pub fn polynomial_perturbation(u: f64, eta: f64) -> f64 {
    let e = 1.0 / (eta + 1.0);
    if u < 0.5 {
        (2.0 * u).powf(e) - 1.0
    } else {
        1.0 - (2.0 * (1.0 - u)).powf(e)
    }
}

/// Mutates each gene with probability `rate`: the grid index moves by the
/// perturbation scaled to the grid span, rounded and clamped.
pub fn polynomial_mutation(space: &SearchSpace, genes: &[usize], eta: f64, rate: f64, rng: &mut Rng) -> Vec<usize> {
    genes
        .iter()
        .enumerate()
        .map(|(g, &idx)| {
            let k = space.gene_grid(g).len();
            if k < 2 || !rng.random_bool(rate) {
                return idx;
            }
            let delta = polynomial_perturbation(rng.random::<f64>(), eta);
            let moved = (idx as f64 + delta * (k - 1) as f64).round();
            moved.clamp(0.0, (k - 1) as f64) as usize
        })
        .collect()
}

/// Steps genes down one grid index at a time until the width fits the
/// budget, each time choosing the step that removes the fewest FLOPs
/// (lowest gene index on ties).
pub fn repair(space: &SearchSpace, flops: &FlopsTable, budget: u64, genes: &mut [usize]) -> Result<()> {
    let mut current = flops.flops(&space.from_genes(genes))?;
    while current > budget {
        let mut best: Option<(u64, usize)> = None;
        for g in 0..genes.len() {
            if genes[g] == 0 {
                continue;
            }
            genes[g] -= 1;
            let f = flops.flops(&space.from_genes(genes))?;
            genes[g] += 1;
            let loss = current - f.min(current);
            if best.is_none_or(|(l, _)| loss < l) {
                best = Some((loss, g));
            }
        }
        let Some((_, g)) = best else {
            let minimum = flops.flops(&space.min_width())?;
            return Err(Error::InfeasibleBudget { budget, minimum });
        };
        genes[g] -= 1;
        current = flops.flops(&space.from_genes(genes))?;
    }
    Ok(())
}

/// Evaluation front end shared by the searches: caches reports and refuses
/// widths over budget.
struct Searcher<'a, E: WidthEvaluator + ?Sized> {
    evaluator: &'a E,
    space: &'a SearchSpace,
    flops: &'a FlopsTable,
    budget: u64,
    cache: HashMap<WidthVector, EvalReport>,
}

impl<'a, E: WidthEvaluator + ?Sized> Searcher<'a, E> {
    fn new(evaluator: &'a E, space: &'a SearchSpace, flops: &'a FlopsTable, budget: u64) -> Self {
        Self {
            evaluator,
            space,
            flops,
            budget,
            cache: HashMap::new(),
        }
    }

    fn evaluate(&mut self, widths: &[WidthVector]) -> Result<Vec<EvalReport>> {
        let mut fresh = Vec::new();
        let mut queued = HashSet::new();
        for c in widths {
            self.space.validate(c)?;
            let f = self.flops.flops(c)?;
            assert!(
                f <= self.budget,
                "search evaluated {c} with {f} FLOPs over budget {}",
                self.budget
            );
            if !self.cache.contains_key(c) && queued.insert(c.clone()) {
                fresh.push(c.clone());
            }
        }
        for r in self.evaluator.evaluate_all(&fresh)? {
            self.cache.insert(r.width.clone(), r);
        }
        Ok(widths.iter().map(|c| self.cache[c].clone()).collect())
    }
}

fn best_of(reports: &[EvalReport]) -> &EvalReport {
    reports.iter().min_by(|a, b| rank_cmp(a, b)).expect("non-empty")
}

/// Elitist genetic search. Each iteration evaluates the population,
/// keeps the best member plus tournament winners as survivors, and refills
/// with mutated two-point crossover children repaired into the budget. The
/// result is the best width of the final iteration.
pub fn evolve<E: WidthEvaluator + ?Sized>(
    evaluator: &E,
    space: &SearchSpace,
    flops: &FlopsTable,
    budget: u64,
    config: &EvoConfig,
    init: &[WidthVector],
    rng: &mut Rng,
) -> Result<SearchOutcome> {
    config.validate()?;
    let mut population: Vec<WidthVector> = Vec::new();
    let mut seen = HashSet::new();
    for c in init {
        space.validate(c)?;
        if flops.flops(c)? <= budget && seen.insert(c.clone()) {
            population.push(c.clone());
        }
    }
    if population.is_empty() {
        return Err(Error::Empty("no feasible width in the initial population".into()));
    }
    population.truncate(config.population_size);

    let rate = config.mutation_rate.unwrap_or(1.0 / space.genes().len() as f64);
    let mut searcher = Searcher::new(evaluator, space, flops, budget);
    let mut history = Vec::with_capacity(config.iterations);
    let mut final_best = None;

    for iteration in 0..config.iterations {
        let reports = searcher.evaluate(&population)?;
        let best = best_of(&reports).clone();
        let mean = reports.iter().map(|r| r.acc_mean).sum::<f64>() / reports.len() as f64;
        debug!(
            "iteration {iteration}: best {} at {:.4}, mean {mean:.4}",
            best.width, best.acc_mean
        );
        history.push(HistoryRow {
            iteration,
            best_fitness: best.acc_mean,
            mean_fitness: mean,
            best_width: best.width.clone(),
            best_flops: best.flops,
        });
        if iteration + 1 == config.iterations {
            final_best = Some(best);
            break;
        }

        let survivors = select_survivors(&reports, config, rng);
        let mut next: Vec<WidthVector> = survivors.clone();
        let mut members: HashSet<WidthVector> = next.iter().cloned().collect();
        let parents: Vec<Vec<usize>> = survivors.iter().map(|c| space.to_genes(c)).collect::<Result<_>>()?;
        let n_genes = space.genes().len();
        while next.len() < config.population_size {
            let mut child = None;
            for _ in 0..10 {
                let a = &parents[rng.random_range(0..parents.len())];
                let b = &parents[rng.random_range(0..parents.len())];
                let (mut x, y) = if n_genes >= 2 {
                    let i = rng.random_range(0..n_genes);
                    let j = rng.random_range(0..n_genes);
                    let (c1, c2) = if i == j { (i, i + 1) } else { (i.min(j), i.max(j)) };
                    two_point_crossover(a, b, c1, c2)
                } else {
                    (a.clone(), b.clone())
                };
                if rng.random_bool(0.5) {
                    x = y;
                }
                let mut g = polynomial_mutation(space, &x, config.eta, rate, rng);
                repair(space, flops, budget, &mut g)?;
                let c = space.from_genes(&g);
                let fresh = !members.contains(&c);
                child = Some(c);
                if fresh {
                    break;
                }
            }
            let c = child.expect("at least one attempt");
            members.insert(c.clone());
            next.push(c);
        }
        population = next;
    }

    Ok(SearchOutcome {
        best: final_best.expect("at least one iteration"),
        history,
        evaluations: searcher.cache.len(),
    })
}

/// The best report always survives; the remaining slots are filled by
/// tournaments drawn without replacement from the rest.
fn select_survivors(reports: &[EvalReport], config: &EvoConfig, rng: &mut Rng) -> Vec<WidthVector> {
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| rank_cmp(&reports[a], &reports[b]));
    let mut pool: Vec<usize> = order[1..].to_vec();
    pool.sort_unstable();
    let mut out = vec![reports[order[0]].width.clone()];
    while out.len() < config.survivors && !pool.is_empty() {
        let k = config.tournament_size.min(pool.len());
        let mut entrants: Vec<usize> = Vec::with_capacity(k);
        while entrants.len() < k {
            let pick = rng.random_range(0..pool.len());
            if !entrants.contains(&pick) {
                entrants.push(pick);
            }
        }
        let winner = *entrants
            .iter()
            .min_by(|&&a, &&b| rank_cmp(&reports[pool[a]], &reports[pool[b]]))
            .expect("non-empty tournament");
        out.push(reports[pool.remove(winner)].width.clone());
    }
    out
}

/// One step of greedy slimming.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlimStep {
    pub gene: usize,
    pub width: WidthVector,
    pub acc_mean: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyOutcome {
    pub best: EvalReport,
    pub steps: Vec<SlimStep>,
}

/// Starts at full width and repeatedly applies the single one-step gene
/// reduction with the best resulting accuracy until the budget is met.
/// Intermediate widths above budget are evaluated by design.
pub fn greedy_slim<E: WidthEvaluator + ?Sized>(
    evaluator: &E,
    space: &SearchSpace,
    flops: &FlopsTable,
    budget: u64,
) -> Result<GreedyOutcome> {
    let minimum = flops.flops(&space.min_width())?;
    if budget < minimum {
        return Err(Error::InfeasibleBudget { budget, minimum });
    }
    let mut genes = space.to_genes(&space.max_width())?;
    let mut steps = Vec::new();
    loop {
        let c = space.from_genes(&genes);
        if flops.flops(&c)? <= budget {
            let best = evaluator.evaluate(&c)?;
            return Ok(GreedyOutcome { best, steps });
        }
        let moves: Vec<(usize, WidthVector)> = (0..genes.len())
            .filter(|&g| genes[g] > 0)
            .map(|g| {
                let mut m = genes.clone();
                m[g] -= 1;
                (g, space.from_genes(&m))
            })
            .collect();
        let widths: Vec<WidthVector> = moves.iter().map(|(_, w)| w.clone()).collect();
        let reports = evaluator.evaluate_all(&widths)?;
        let (pos, pick) = reports
            .iter()
            .enumerate()
            .min_by(|a, b| rank_cmp(a.1, b.1))
            .expect("some gene can shrink while over budget");
        let gene = moves[pos].0;
        genes[gene] -= 1;
        steps.push(SlimStep {
            gene,
            width: pick.width.clone(),
            acc_mean: pick.acc_mean,
            flops: pick.flops,
        });
    }
}

/// `n` distinct feasible widths drawn uniformly.
pub fn random_search(
    space: &SearchSpace,
    flops: &FlopsTable,
    budget: u64,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<WidthVector>> {
    let minimum = flops.flops(&space.min_width())?;
    if budget < minimum {
        return Err(Error::InfeasibleBudget { budget, minimum });
    }
    uniform_feasible(space, flops, budget, n, &HashSet::new(), rng)
}

/// Random search followed by picking the best candidate on the evaluator.
pub fn random_best<E: WidthEvaluator + ?Sized>(
    evaluator: &E,
    space: &SearchSpace,
    flops: &FlopsTable,
    budget: u64,
    n: usize,
    rng: &mut Rng,
) -> Result<SearchOutcome> {
    let widths = random_search(space, flops, budget, n, rng)?;
    let mut searcher = Searcher::new(evaluator, space, flops, budget);
    let reports = searcher.evaluate(&widths)?;
    let best = best_of(&reports).clone();
    let mean = reports.iter().map(|r| r.acc_mean).sum::<f64>() / reports.len() as f64;
    Ok(SearchOutcome {
        history: vec![HistoryRow {
            iteration: 0,
            best_fitness: best.acc_mean,
            mean_fitness: mean,
            best_width: best.width.clone(),
            best_flops: best.flops,
        }],
        best,
        evaluations: searcher.cache.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::space::LayerSpec;

    /// Fitness increasing in every width, with a layer-dependent weight.
    struct Monotone<'a> {
        flops: &'a FlopsTable,
    }

    impl WidthEvaluator for Monotone<'_> {
        fn evaluate(&self, c: &WidthVector) -> Result<EvalReport> {
            let acc =
                c.0.iter()
                    .enumerate()
                    .map(|(l, &w)| ((l + 1) as f64 * w as f64).ln())
                    .sum::<f64>();
            Ok(EvalReport::unilateral(c.clone(), acc, -acc, self.flops.flops(c)?))
        }
    }

    fn space() -> SearchSpace {
        SearchSpace::uniform(4, LayerSpec::new(8, 0, 4), 3, 3).unwrap()
    }

    #[test]
    fn crossover_examples() {
        let a = [1, 1, 1, 1];
        let b = [4, 4, 4, 4];
        assert_eq!(two_point_crossover(&a, &b, 1, 3), (vec![1, 4, 4, 1], vec![4, 1, 1, 4]));
        assert_eq!(two_point_crossover(&a, &b, 0, 4), (b.to_vec(), a.to_vec()));
        assert_eq!(two_point_crossover(&a, &a, 1, 2), (a.to_vec(), a.to_vec()));
    }

    #[test]
    fn perturbation_limits() {
        assert_eq!(polynomial_perturbation(0.0, 20.0), -1.0);
        assert_eq!(polynomial_perturbation(0.5, 20.0), 0.0);
        assert!(polynomial_perturbation(0.999, 1e9).abs() < 1e-8);
        let space = space();
        let mut rng = substream(1, "t");
        for _ in 0..500 {
            let m = polynomial_mutation(&space, &[0, 3, 0, 3], 0.0, 1.0, &mut rng);
            assert!(m.iter().all(|&i| i < 4));
        }
        let unchanged = polynomial_mutation(&space, &[1, 2, 0, 3], 1e12, 1.0, &mut rng);
        assert_eq!(unchanged, vec![1, 2, 0, 3]);
    }

    #[test]
    fn repair_reaches_budget_with_cheapest_steps() {
        let space = space();
        let flops = FlopsTable::dense(&space);
        let budget = flops.flops(&WidthVector(vec![4, 4, 4, 4])).unwrap();
        let mut g = vec![3, 3, 3, 3];
        repair(&space, &flops, budget, &mut g).unwrap();
        assert!(flops.flops(&space.from_genes(&g)).unwrap() <= budget);
        let mut g = vec![0, 0, 0, 0];
        assert!(repair(&space, &flops, 0, &mut g).is_err());
    }

    #[test]
    fn single_width_space() {
        let space = SearchSpace::uniform(3, LayerSpec::new(4, 0, 1), 2, 2).unwrap();
        let flops = FlopsTable::dense(&space);
        let ev = Monotone { flops: &flops };
        let only = space.max_width();
        let budget = flops.flops(&only).unwrap();
        let out = evolve(
            &ev,
            &space,
            &flops,
            budget,
            &EvoConfig::default(),
            std::slice::from_ref(&only),
            &mut substream(0, "evo"),
        )
        .unwrap();
        assert_eq!(out.best.width, only);
        assert_eq!(greedy_slim(&ev, &space, &flops, budget).unwrap().best.width, only);
    }

    #[test]
    fn evolve_is_elitist_feasible_and_deterministic() {
        let space = space();
        let flops = FlopsTable::dense(&space);
        let ev = Monotone { flops: &flops };
        let mid = flops.flops(&WidthVector(vec![4, 4, 4, 4])).unwrap();
        let cfg = EvoConfig {
            iterations: 15,
            ..EvoConfig::default()
        };
        let init = random_search(&space, &flops, mid, 40, &mut substream(2, "init")).unwrap();
        let run = || evolve(&ev, &space, &flops, mid, &cfg, &init, &mut substream(2, "evo")).unwrap();
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.history.len(), 15);
        for w in a.history.windows(2) {
            assert!(w[1].best_fitness >= w[0].best_fitness);
        }
        assert!(a.best.flops <= mid);
    }

    #[test]
    fn greedy_takes_single_steps() {
        let space = space();
        let flops = FlopsTable::dense(&space);
        let ev = Monotone { flops: &flops };
        let full = flops.flops(&space.max_width()).unwrap();
        assert!(greedy_slim(&ev, &space, &flops, full).unwrap().steps.is_empty());
        let budget = full / 3;
        let out = greedy_slim(&ev, &space, &flops, budget).unwrap();
        let mut prev = space.to_genes(&space.max_width()).unwrap();
        for s in &out.steps {
            let g = space.to_genes(&s.width).unwrap();
            let diff: Vec<usize> = (0..g.len()).filter(|&i| g[i] != prev[i]).collect();
            assert_eq!(diff, vec![s.gene]);
            assert_eq!(prev[s.gene] - g[s.gene], 1);
            prev = g;
        }
        assert!(out.best.flops <= budget);
        assert!(greedy_slim(&ev, &space, &flops, 1).is_err());
    }

    #[test]
    fn random_search_distinct_and_feasible() {
        let space = space();
        let flops = FlopsTable::dense(&space);
        let budget = flops.flops(&WidthVector(vec![4, 4, 4, 4])).unwrap();
        let ws = random_search(&space, &flops, budget, 20, &mut substream(5, "r")).unwrap();
        assert_eq!(ws.len(), 20);
        assert_eq!(ws.iter().collect::<HashSet<_>>().len(), 20);
        assert!(ws.iter().all(|c| flops.flops(c).unwrap() <= budget));
    }
}
