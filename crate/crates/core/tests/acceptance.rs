//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every criterion reports even when
//! an earlier one fails. Exits non-zero if any criterion fails.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path as FsPath;
use std::time::{Duration, Instant};

use rand::Rng as _;
use widthsearch::assign::{grid_audit, OverlapMode, Principle, Side};
use widthsearch::bench::{generate_benchmark, kendall_tau_b, pearson, score_supernet, spearman};
use widthsearch::eval::{SupernetEvaluator, WidthEvaluator};
use widthsearch::net::{grad_check, Batch, DataConfig, Grads, MiniNet, Path, Sgd, SynthDataset};
use widthsearch::pipeline::{
    median_flops, population_stage, run_pipeline, search_stage, train_stage, Method, OracleConfig, RunConfig, Trained,
    THREADS_ENV,
};
use widthsearch::prior::{solve_distribution, PotentialErrorTable, SolverConfig};
use widthsearch::rng::{substream, Rng};
use widthsearch::space::{FlopsTable, LayerSpec, SearchSpace, WidthVector};
use widthsearch::supertrain::{path_pass, train_supernet, SupernetTrainer, TrainConfig, UpdateMode};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.2?}, limit {limit:?}"))
}

fn load_space(name: &str) -> SearchSpace {
    let path = FsPath::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn unit_layer(l: usize) -> LayerSpec {
    LayerSpec::new(l, 0, l)
}

fn random_rows(rng: &mut Rng, data: &SynthDataset, n: usize) -> (Vec<f64>, Vec<usize>) {
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.train.len())).collect();
    data.train.gather(&rows)
}

fn c1_cardinality() -> Outcome {
    let start = Instant::now();
    for l in 2..=64 {
        let layer = unit_layer(l);
        let ua = grid_audit(Principle::Ua, &layer).map_err(|e| e.to_string())?;
        let bc = grid_audit(Principle::Bc, &layer).map_err(|e| e.to_string())?;
        ensure(ua.len() == l && bc.len() == l, || format!("l={l}: audit length"))?;
        for j in 1..=l {
            ensure(ua[j - 1] == (l - j + 1) as u64, || {
                format!("UA l={l} channel {j}: {}", ua[j - 1])
            })?;
            ensure(bc[j - 1] == (l + 1) as u64, || {
                format!("BC l={l} channel {j}: {}", bc[j - 1])
            })?;
        }
    }
    let six = grid_audit(Principle::Bc, &unit_layer(6)).unwrap();
    ensure(six.iter().all(|&c| c == 7), || format!("l=6 BC audit {six:?}"))?;
    within(start, Duration::from_secs(1))?;
    Ok(format!(
        "l in 2..=64 exact, l=6 gives 7 everywhere, {:.2?}",
        start.elapsed()
    ))
}

fn c2_base_width() -> Outcome {
    let start = Instant::now();
    let fair = Principle::BcV2 {
        overlap: OverlapMode::ExactFair,
    };
    let literal = Principle::BcV2 {
        overlap: OverlapMode::PaperLiteral,
    };
    let mut pairs = 0;
    for l in 2..=64usize {
        for ls in 1..l {
            let k = l - ls + 1;
            let layer = LayerSpec::new(l, ls, k);
            let a = grid_audit(fair, &layer).map_err(|e| e.to_string())?;
            ensure(a.len() == l + ls, || format!("exact l={l} ls={ls}: width {}", a.len()))?;
            ensure(a.iter().all(|&c| c == (l + 1 - ls) as u64), || {
                format!("exact l={l} ls={ls}: {a:?}")
            })?;
            let b = grid_audit(literal, &layer).map_err(|e| e.to_string())?;
            ensure(b.len() == l + ls - 1, || {
                format!("literal l={l} ls={ls}: width {}", b.len())
            })?;
            for (i, &c) in b.iter().enumerate() {
                let ch = i + 1;
                let base = ch < ls || ch > l;
                let want = if base { k } else { k + 1 } as u64;
                ensure(c == want, || {
                    format!("literal l={l} ls={ls} channel {ch}: {c} != {want}")
                })?;
            }
            pairs += 1;
        }
    }
    within(start, Duration::from_secs(5))?;
    Ok(format!(
        "{pairs} (l, l_s) pairs: exact mode uniform, literal mode base channels one below the rest, {:.2?}",
        start.elapsed()
    ))
}

fn c3_complement() -> Outcome {
    let space = SearchSpace::uniform(3, unit_layer(6), 4, 2).unwrap();
    let c = space.complement(&WidthVector::new(vec![3, 2, 4])).unwrap();
    ensure(c == WidthVector::new(vec![3, 4, 2]), || {
        format!("complement of (3,2,4) is {c}")
    })?;
    let spaces = [
        load_space("oracle_5x4.json"),
        load_space("base_width_tied.json"),
        SearchSpace::new(
            vec![
                LayerSpec::new(20, 4, 5),
                LayerSpec::new(12, 0, 6),
                LayerSpec::new(9, 3, 7),
            ],
            3,
            2,
        )
        .unwrap(),
    ];
    let mut rng = substream(3, "acceptance-complement");
    for i in 0..10_000 {
        let s = &spaces[i % spaces.len()];
        let w = s.sample_uniform(&mut rng);
        let once = s.complement(&w).map_err(|e| e.to_string())?;
        let twice = s.complement(&once).map_err(|e| e.to_string())?;
        ensure(twice == w, || format!("involution fails at {w}: {once} -> {twice}"))?;
    }
    Ok("(3,2,4) -> (3,4,2); involution on 10^4 widths".into())
}

fn c4_fairness_counters() -> Outcome {
    let start = Instant::now();
    let space = SearchSpace::uniform(2, unit_layer(4), 3, 2).unwrap();
    let data = SynthDataset::generate(&DataConfig {
        n_train: 64,
        n_val: 8,
        ..DataConfig::blobs(4, 3, 2)
    })
    .unwrap();
    let run = |principle: Principle, complementary: bool| -> Result<Vec<Vec<u64>>, String> {
        let config = TrainConfig {
            principle,
            complementary,
            lr0: 0.01,
            ..TrainConfig::default()
        };
        let net = MiniNet::supernet(&space, principle, false, &mut substream(4, "init")).unwrap();
        let mut trainer = SupernetTrainer::new(&space, &config, net).map_err(|e| e.to_string())?;
        let mut rng = substream(4, "acceptance-fairness");
        for _ in 0..10_000 {
            let (x, y) = random_rows(&mut rng, &data, 4);
            let c = space.sample_uniform(&mut rng);
            trainer
                .train_batch(Batch::new(&x, &y, 3), &c, 0.01)
                .map_err(|e| e.to_string())?;
        }
        Ok(trainer.stats.channel_counts)
    };
    let bc = run(Principle::Bc, true)?;
    for (k, counts) in bc.iter().enumerate() {
        ensure(counts.iter().all(|&c| c == counts[0]), || {
            format!("BC layer {k}: {counts:?}")
        })?;
    }
    let ua = run(Principle::Ua, false)?;
    for (k, counts) in ua.iter().enumerate() {
        ensure(counts.windows(2).all(|w| w[0] > w[1]), || {
            format!("UA layer {k}: {counts:?}")
        })?;
    }
    within(start, Duration::from_secs(30))?;
    Ok(format!("BC {:?}, UA {:?}, {:.2?}", bc[0], ua[0], start.elapsed()))
}

fn c5_gradients() -> Outcome {
    let space = SearchSpace::uniform(2, LayerSpec::new(8, 0, 4), 5, 3).unwrap();
    let mut rng = substream(5, "acceptance-grad");
    let x: Vec<f64> = (0..12 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
    let batch = Batch::new(&x, &y, 5);
    let c = WidthVector::new(vec![4, 6]);
    let mut worst = 0.0f64;
    for normalize in [false, true] {
        let mut net = MiniNet::supernet(&space, Principle::Bc, normalize, &mut substream(5, "init")).unwrap();
        // nonzero biases keep pre-activations off the ReLU kink, where
        // central differences are undefined
        for layer in net.layers.iter_mut() {
            layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        ensure(net.layers.len() == 3, || "expected three dense layers".into())?;
        for side in [Side::Left, Side::Right] {
            let path = Path::for_width(&space, Principle::Bc, &c, side).unwrap();
            let err = grad_check(&net, batch, &path).map_err(|e| e.to_string())?;
            ensure(err < 1e-4, || {
                format!("normalize={normalize} {side:?}: rel err {err:e}")
            })?;
            worst = worst.max(err);
        }
    }

    // slice locality: an optimizer step touches exactly the active block
    let mut net = MiniNet::supernet(&space, Principle::Bc, false, &mut substream(6, "init")).unwrap();
    let path = Path::for_width(&space, Principle::Bc, &c, Side::Right).unwrap();
    let before = net.flatten();
    let (_, grads) = net.loss_and_grads(batch, &path).unwrap();
    let mut opt = Sgd::new(&net, 0.9);
    opt.step(&mut net, &grads, 0.1).unwrap();
    let after = net.flatten();
    let dims = net.dims();
    let ranges: Vec<_> = std::iter::once(0..dims[0])
        .chain(path.hidden.iter().cloned())
        .chain(std::iter::once(0..dims[dims.len() - 1]))
        .collect();
    let mut idx = 0;
    let (mut inside_changed, mut inside) = (0, 0);
    for k in 0..net.layers.len() {
        let (ni, no) = (dims[k], dims[k + 1]);
        let active_w = |o: usize, i: usize| ranges[k + 1].contains(&o) && ranges[k].contains(&i);
        for o in 0..no {
            for i in 0..ni {
                let moved = before[idx] != after[idx];
                if active_w(o, i) {
                    inside += 1;
                    inside_changed += moved as usize;
                } else {
                    ensure(!moved, || format!("layer {k} weight ({o},{i}) moved outside the slice"))?;
                }
                idx += 1;
            }
        }
        for o in 0..no {
            let moved = before[idx] != after[idx];
            if ranges[k + 1].contains(&o) {
                inside += 1;
                inside_changed += moved as usize;
            } else {
                ensure(!moved, || format!("layer {k} bias {o} moved outside the slice"))?;
            }
            idx += 1;
        }
    }
    ensure(idx == before.len(), || "flatten layout mismatch".into())?;
    ensure(inside_changed > 0, || "nothing inside the slice moved".into())?;
    Ok(format!(
        "max rel err {worst:.2e}; {inside_changed}/{inside} active entries moved, none outside"
    ))
}

fn block_sums(g: &Grads) -> Vec<f64> {
    g.weight
        .iter()
        .zip(&g.bias)
        .flat_map(|(w, b)| [w.iter().sum::<f64>(), b.iter().sum::<f64>()])
        .collect()
}

fn c6_iterative_updates() -> Outcome {
    let space = SearchSpace::uniform(3, LayerSpec::new(8, 0, 4), 6, 3).unwrap();
    let data = SynthDataset::generate(&DataConfig {
        n_train: 512,
        n_val: 64,
        ..DataConfig::blobs(6, 6, 3)
    })
    .unwrap();
    let both = TrainConfig::default();
    let iterative = TrainConfig {
        update_mode: UpdateMode::Iterative,
        ..TrainConfig::default()
    };
    let net = MiniNet::supernet(&space, Principle::Bc, false, &mut substream(6, "init")).unwrap();
    let mut rng = substream(6, "acceptance-iterative");

    // summed gradient of c and its complement under the sides of `index`
    let step_grads = |cfg: &TrainConfig, index: u64, batch: Batch<'_>, c: &WidthVector| -> Grads {
        let mut g = Grads::zeros_like(&net);
        for w in [c.clone(), space.complement(c).unwrap()] {
            path_pass(
                &net,
                &space,
                cfg.principle,
                cfg.sides_for(index),
                batch,
                &w,
                1.0,
                &mut g,
            )
            .unwrap();
        }
        g
    };

    const PAIRS: usize = 10_000;
    let blocks = 2 * net.layers.len();
    let mut sum = vec![0.0; blocks];
    let mut sum_sq = vec![0.0; blocks];
    for _ in 0..PAIRS {
        let (x1, y1) = random_rows(&mut rng, &data, 16);
        let (x2, y2) = random_rows(&mut rng, &data, 16);
        let (b1, b2) = (Batch::new(&x1, &y1, 6), Batch::new(&x2, &y2, 6));
        let (c1, c2) = (space.sample_uniform(&mut rng), space.sample_uniform(&mut rng));
        let it: Vec<f64> = block_sums(&step_grads(&iterative, 1, b1, &c1))
            .iter()
            .zip(block_sums(&step_grads(&iterative, 2, b2, &c2)))
            .map(|(a, b)| a + b)
            .collect();
        let bp: Vec<f64> = block_sums(&step_grads(&both, 1, b1, &c1))
            .iter()
            .zip(block_sums(&step_grads(&both, 2, b2, &c2)))
            .map(|(a, b)| a + b)
            .collect();
        for j in 0..blocks {
            let d = it[j] - bp[j];
            sum[j] += d;
            sum_sq[j] += d * d;
        }
    }
    let n = PAIRS as f64;
    let mut worst_z = 0.0f64;
    for j in 0..blocks {
        let mean = sum[j] / n;
        let var = (sum_sq[j] - n * mean * mean) / (n - 1.0);
        let se = (var / n).sqrt();
        let z = mean.abs() / se;
        worst_z = worst_z.max(z);
        ensure(mean.abs() <= 2.0 * se, || {
            format!("block {j}: mean difference {mean:e} exceeds 2 SE ({se:e})")
        })?;
    }

    let peak = |cfg: &TrainConfig| {
        let net = MiniNet::supernet(&space, Principle::Bc, false, &mut substream(6, "init")).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..cfg.clone()
        };
        train_supernet(&space, net, &cfg, &data.train)
            .unwrap()
            .stats
            .peak_live_values
    };
    let (pb, pi) = (peak(&both), peak(&iterative));
    let ratio = pi as f64 / pb as f64;
    ensure(ratio <= 0.55, || format!("peak memory ratio {ratio:.3} ({pi}/{pb})"))?;
    Ok(format!(
        "max |mean|/SE {worst_z:.2} over {blocks} blocks; peak memory ratio {ratio:.3}"
    ))
}

/// All 3-point distributions on a 1/20 lattice.
fn lattice() -> Vec<[f64; 3]> {
    let mut pts = Vec::new();
    for a in 0..=20 {
        for b in 0..=(20 - a) {
            pts.push([a as f64 / 20.0, b as f64 / 20.0, (20 - a - b) as f64 / 20.0]);
        }
    }
    pts
}

fn dot(a: &[f64; 3], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Exhaustive lattice search; expected FLOPs written out map by map.
fn lattice_oracle(flops: &FlopsTable, e: &[Vec<f64>], budget: f64) -> f64 {
    let pts = lattice();
    let f = |k: usize, i: usize, j: usize| flops.layers[k].at(i, j) as f64;
    let lin0: Vec<f64> = (0..3).map(|j| f(0, 0, j)).collect();
    let lin3: Vec<f64> = (0..3).map(|i| f(3, i, 0)).collect();
    let mut best = f64::INFINITY;
    for p2 in &pts {
        let c2 = dot(p2, &e[1]);
        let f1: Vec<f64> = (0..3).map(|i| (0..3).map(|j| f(1, i, j) * p2[j]).sum()).collect();
        let f2: Vec<f64> = (0..3).map(|j| (0..3).map(|i| p2[i] * f(2, i, j)).sum()).collect();
        for p1 in &pts {
            let c1 = dot(p1, &e[0]);
            if c1 + c2 >= best {
                continue;
            }
            let fl1 = dot(p1, &lin0) + dot(p1, &f1);
            for p3 in &pts {
                if fl1 + dot(p3, &f2) + dot(p3, &lin3) <= budget {
                    best = best.min(c1 + c2 + dot(p3, &e[2]));
                }
            }
        }
    }
    best
}

fn prior_instance(seed: u64) -> (SearchSpace, FlopsTable, PotentialErrorTable) {
    let space = SearchSpace::uniform(3, LayerSpec::new(12, 0, 3), 6, 4).unwrap();
    let flops = FlopsTable::dense(&space);
    let mut rng = substream(seed, "instance");
    let values: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let slope: f64 = rng.random_range(0.05..0.6);
            (0..3)
                .map(|i| 1.0 - slope * i as f64 + rng.random_range(-0.1..0.1))
                .collect()
        })
        .collect();
    let table = PotentialErrorTable {
        values,
        counts: vec![vec![1; 3]; 3],
        imputed: vec![vec![false; 3]; 3],
    };
    (space, flops, table)
}

fn c7_prior_solver() -> Outcome {
    let start = Instant::now();
    let solver = SolverConfig::default();
    let mut worst_gap = f64::NEG_INFINITY;
    let mut solves = 0;
    for seed in 0..4 {
        let (space, flops, table) = prior_instance(seed);
        let min = flops.flops(&space.min_width()).unwrap() as f64;
        let max = flops.flops(&space.max_width()).unwrap() as f64;
        let mut last = f64::INFINITY;
        for step in 1..=9 {
            let frac = step as f64 / 10.0;
            let budget = (min + frac * (max - min)).round() as u64;
            let sol = solve_distribution(&table, &space, &flops, budget, &solver).map_err(|e| e.to_string())?;
            solves += 1;
            let simplex = sol.distribution.simplex_error();
            ensure(simplex < 1e-9, || {
                format!("seed {seed} frac {frac}: simplex error {simplex:e}")
            })?;
            ensure(sol.expected_flops <= budget as f64 * 1.001, || {
                format!(
                    "seed {seed} frac {frac}: expected FLOPs {} > {budget}",
                    sol.expected_flops
                )
            })?;
            ensure(sol.objective <= last + 1e-9, || {
                format!(
                    "seed {seed}: objective rose from {last} to {} at frac {frac}",
                    sol.objective
                )
            })?;
            last = sol.objective;
            if step == 2 || step == 5 {
                let best = lattice_oracle(&flops, &table.values, budget as f64);
                let gap = sol.objective - best;
                worst_gap = worst_gap.max(gap);
                ensure(gap <= 1e-3, || {
                    format!("seed {seed} frac {frac}: solver {} vs lattice {best}", sol.objective)
                })?;
            }
        }
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{solves} solves feasible and monotone; worst gap to lattice oracle {worst_gap:.2e}, {:.2?}",
        start.elapsed()
    ))
}

fn c8_search() -> Outcome {
    let start = Instant::now();
    let space = load_space("oracle_5x4.json");
    let flops = FlopsTable::dense(&space);
    let budget = median_flops(&space, &flops).unwrap();
    let mut top = 0;
    let mut means = [0.0; 3];
    let methods = [Method::Greedy, Method::Evo, Method::EvoPrior];
    for seed in 0..10u64 {
        let mut fitness = [0.0; 3];
        let mut threshold = f64::NAN;
        for (m, &method) in methods.iter().enumerate() {
            let mut config = RunConfig::new(space.clone(), budget, method, seed);
            config.oracle = Some(OracleConfig::default());
            config.reseed(seed);
            let (trained, log) = train_stage(&config).unwrap();
            let Trained::Oracle(oracle) = trained else {
                return Err("oracle config trained a supernet".into());
            };
            if m == 0 {
                let mut feasible: Vec<f64> = space
                    .enumerate()
                    .filter(|c| flops.flops(c).unwrap() <= budget)
                    .map(|c| oracle.fitness(&c).unwrap())
                    .collect();
                feasible.sort_by(|a, b| b.total_cmp(a));
                let k = (feasible.len() as f64 * 0.01).ceil() as usize;
                threshold = feasible[k - 1];
            }
            let init = match method {
                Method::Greedy => Vec::new(),
                _ => population_stage(&config, &flops, &log).unwrap().1,
            };
            let out = search_stage(&config, &flops, &oracle, &init).unwrap();
            ensure(out.best.flops <= budget, || {
                format!("seed {seed} {method}: over budget")
            })?;
            fitness[m] = oracle.fitness(&out.best.width).unwrap();
            if method == Method::Evo && fitness[m] >= threshold {
                top += 1;
            }
        }
        for m in 0..3 {
            means[m] += fitness[m] / 10.0;
        }
    }
    ensure(top >= 9, || format!("evolution reached the top 1% in {top}/10 seeds"))?;
    ensure(means[0] <= means[1] && means[1] <= means[2], || {
        format!(
            "mean fitness greedy {:.5}, evo {:.5}, evo-prior {:.5}",
            means[0], means[1], means[2]
        )
    })?;
    within(start, Duration::from_secs(120))?;
    Ok(format!(
        "top 1% in {top}/10 seeds; mean fitness greedy {:.5} <= evo {:.5} <= evo-prior {:.5}, {:.2?}",
        means[0],
        means[1],
        means[2],
        start.elapsed()
    ))
}

fn c9_ranking_fidelity() -> Outcome {
    let start = Instant::now();
    let space = load_space("toy_3x4.json");
    ensure(space.size() == 64, || format!("toy space has {} widths", space.size()))?;
    let flops = FlopsTable::dense(&space);
    let data = SynthDataset::generate(&DataConfig::blobs(9, space.input_dim(), space.output_dim())).unwrap();
    let retrain = TrainConfig {
        seed: 900,
        ..TrainConfig::default()
    };
    let table = generate_benchmark(&space, &retrain, &data, 3).map_err(|e| e.to_string())?;
    let tau = |principle: Principle, complementary: bool, seed: u64| -> Result<f64, String> {
        let cfg = TrainConfig {
            seed,
            principle,
            complementary,
            ..TrainConfig::default()
        };
        let net = MiniNet::supernet(&space, principle, false, &mut substream(seed, "init")).unwrap();
        let net = train_supernet(&space, net, &cfg, &data.train)
            .map_err(|e| e.to_string())?
            .net;
        let ev = SupernetEvaluator {
            net: &net,
            space: &space,
            flops: &flops,
            val: &data.val,
            principle,
        };
        let (report, _) = score_supernet(&ev as &dyn WidthEvaluator, &space, &table).map_err(|e| e.to_string())?;
        Ok(report.kendall_tau)
    };
    let (mut bc, mut ua) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        bc.push(tau(Principle::Bc, true, seed)?);
        ua.push(tau(Principle::Ua, false, seed)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mb, mu) = (mean(&bc), mean(&ua));
    let detail = format!("BC taus {bc:.3?} (mean {mb:.3}), UA taus {ua:.3?} (mean {mu:.3})");
    ensure(bc.iter().all(|&t| t > 0.0), || format!("non-positive BC tau: {detail}"))?;
    ensure(mb >= mu, || format!("BC below UA: {detail}"))?;
    Ok(format!("{detail}, {:.2?}", start.elapsed()))
}

fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    num / (va * vb).sqrt()
}

/// Mid-ranks by counting: `#less + (#equal + 1) / 2`.
fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_kendall(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 {
                ties_a += 1;
            }
            if db == 0.0 {
                ties_b += 1;
            }
            if da * db > 0.0 {
                conc += 1;
            } else if da * db < 0.0 {
                disc += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    (conc - disc) as f64 / (((n0 - ties_a) * (n0 - ties_b)) as f64).sqrt()
}

fn c10_correlations() -> Outcome {
    let mut rng = substream(10, "acceptance-correlation");
    let (mut checked, mut degenerate) = (0, 0);
    let mut worst = 0.0f64;
    let draw = |rng: &mut Rng, n: usize, tied: bool| -> Vec<f64> {
        (0..n)
            .map(|_| {
                if tied {
                    rng.random_range(0..4) as f64
                } else {
                    rng.random_range(-10.0..10.0)
                }
            })
            .collect()
    };
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let tied = rng.random_bool(0.5);
        let a = draw(&mut rng, n, tied);
        let tied_b = rng.random_bool(0.5);
        let b = draw(&mut rng, n, tied_b);
        let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
        if constant(&a) || constant(&b) {
            ensure(
                pearson(&a, &b).is_err() && spearman(&a, &b).is_err() && kendall_tau_b(&a, &b).is_err(),
                || format!("constant input accepted: {a:?} {b:?}"),
            )?;
            degenerate += 1;
            continue;
        }
        let pairs = [
            ("pearson", pearson(&a, &b), brute_pearson(&a, &b)),
            (
                "spearman",
                spearman(&a, &b),
                brute_pearson(&brute_ranks(&a), &brute_ranks(&b)),
            ),
            ("kendall", kendall_tau_b(&a, &b), brute_kendall(&a, &b)),
        ];
        for (name, got, want) in pairs {
            let got = got.map_err(|e| format!("{name} on {a:?} {b:?}: {e}"))?;
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure(err <= 1e-12, || format!("{name} {got} vs {want} on {a:?} {b:?}"))?;
        }
        checked += 1;
    }
    Ok(format!(
        "{checked} vector pairs agree (max error {worst:.1e}); {degenerate} constant pairs rejected"
    ))
}

fn c11_determinism() -> Outcome {
    let toy = load_space("toy_3x4.json");
    let toy_budget = median_flops(&toy, &FlopsTable::dense(&toy)).unwrap();
    let mut supernet = RunConfig::new(toy, toy_budget, Method::EvoPrior, 11);
    supernet.train.epochs = 3;
    supernet.evo.population_size = 10;
    supernet.evo.survivors = 4;
    supernet.evo.iterations = 5;

    let big = load_space("oracle_5x4.json");
    let big_budget = median_flops(&big, &FlopsTable::dense(&big)).unwrap();
    let mut oracle = RunConfig::new(big, big_budget, Method::EvoPrior, 11);
    oracle.oracle = Some(OracleConfig::default());
    oracle.reseed(11);

    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    for (name, config) in [("supernet", &supernet), ("oracle", &oracle)] {
        let mut reports: Vec<Vec<u8>> = Vec::new();
        for threads in ["1", "4", "1"] {
            std::env::set_var(THREADS_ENV, threads);
            let out = dir.path().join(format!("{name}-{threads}-{}", reports.len()));
            run_pipeline(config, &out).map_err(|e| format!("{name} with {threads} threads: {e}"))?;
            reports.push(std::fs::read(out.join("report.json")).unwrap());
        }
        std::env::remove_var(THREADS_ENV);
        ensure(reports.iter().all(|r| r == &reports[0]), || {
            format!("{name}: report.json differs across runs")
        })?;
        notes.push(format!("{name} {} bytes", reports[0].len()));
    }
    Ok(format!(
        "report.json identical at 1 and 4 threads ({})",
        notes.join(", ")
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "cardinality exactness", c1_cardinality),
        (2, "base-width cardinality", c2_base_width),
        (3, "complementary widths", c3_complement),
        (4, "training fairness counters", c4_fairness_counters),
        (5, "gradient correctness and slice locality", c5_gradients),
        (6, "iterative-update equivalence", c6_iterative_updates),
        (7, "prior solver quality", c7_prior_solver),
        (8, "search on an exhaustive oracle", c8_search),
        (9, "ranking-fidelity ordering", c9_ranking_fidelity),
        (10, "correlation oracles", c10_correlations),
        (11, "determinism across thread counts", c11_determinism),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let quiet = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut seen = HashSet::new();
    for (n, name, check) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        seen.insert(n);
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("[PASS] criterion {n}: {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] criterion {n}: {name}: {detail}");
            }
        }
    }
    std::panic::set_hook(quiet);
    println!("{} of {} criteria passed", seen.len() - failed, seen.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
