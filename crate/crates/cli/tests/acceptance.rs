//! End-to-end acceptance checks. Prints one PASS/FAIL/SKIP line per criterion
//! and exits nonzero if any gating criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use corefed_cli::{cmd_run, RunManifest};
use corefed_core::aggregation::{
    assemble_round, fairness_weights, participation_frequency, reuse_gradient, ParticipationLedger,
};
use corefed_core::datasets::{gen_synthetic, split_test, PartitionPlan};
use corefed_core::nnmodel::{backward, forward, loss};
use corefed_core::orchestrator::{run_experiment, Experiment};
use corefed_core::representation::{alignment_vector, contrastive_loss, distill, Embedding};
use corefed_core::{
    Algorithm, Batch, DatasetSource, ExperimentConfig, Matrix, ModelSpec, OnlineClients,
    ParameterVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
const NEUTRAL_TOL: f64 = 1e-9;
const NEUTRAL_BUDGET: Duration = Duration::from_secs(30);
const SIMPLEX_TOL: f64 = 1e-9;
const SIMPLEX_DRAWS: usize = 1000;
const SIMPLEX_BUDGET: Duration = Duration::from_secs(5);
const GOLDEN_TOL: f64 = 1e-5;
const BENCH_SEEDS: [u64; 3] = [1, 2, 3];
const BENCH_ROUNDS: usize = 150;
const BENCH_BUDGET: Duration = Duration::from_secs(300);
const DETERMINISM_BUDGET: Duration = Duration::from_secs(60);
const FMNIST_TARGET: f64 = 0.80;
const FMNIST_ENV: &str = "COREFED_FMNIST_DIR";

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn timed(budget: Duration, f: impl FnOnce() -> Result<String, String>) -> Outcome {
    let start = Instant::now();
    let res = f();
    let took = start.elapsed();
    match res {
        Ok(_) if took > budget => Outcome::Fail(format!("took {took:.1?}, budget {budget:?}")),
        Ok(detail) => Outcome::Pass(format!("{detail} ({took:.1?})")),
        Err(e) => Outcome::Fail(e),
    }
}

// 1. Analytic gradients against central finite differences.

fn criterion_gradients() -> Outcome {
    timed(GRAD_BUDGET, || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        let mut models = 0;
        while models < 20 {
            let hidden: Vec<usize> = (0..rng.random_range(1..=2))
                .map(|_| rng.random_range(2..=12))
                .collect();
            let spec =
                ModelSpec::new(rng.random_range(2..=10), hidden, rng.random_range(2..=6)).unwrap();
            if spec.num_params() > 500 {
                continue;
            }
            models += 1;
            let model = ParameterVector::new(
                (0..spec.num_params())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            );
            let n = rng.random_range(1..=8);
            let inputs = (0..n * spec.input_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let labels = (0..n)
                .map(|_| rng.random_range(0..spec.num_classes))
                .collect();
            let batch =
                Batch::new(Matrix::from_vec(n, spec.input_dim, inputs).unwrap(), labels).unwrap();
            let f = |p: &ParameterVector<f64>| {
                loss(&forward(p, &spec, &batch).unwrap().logits, &batch.labels).unwrap()
            };
            let analytic = backward(&model, &spec, &batch).unwrap();
            for i in 0..model.len() {
                let mut plus = model.clone();
                plus.as_mut_slice()[i] += h;
                let mut minus = model.clone();
                minus.as_mut_slice()[i] -= h;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                let a = analytic.as_slice()[i];
                let scale = a.abs().max(numeric.abs());
                // Dead units: both sides are exactly zero.
                let rel = if scale == 0.0 {
                    0.0
                } else {
                    (a - numeric).abs() / scale
                };
                ensure(rel < GRAD_REL_TOL, || {
                    format!("model {models} coord {i}: analytic {a:e} vs numeric {numeric:e} (rel {rel:e})")
                })?;
                worst = worst.max(rel);
                checked += 1;
            }
        }
        Ok(format!(
            "20 models, {checked} coordinates, worst rel err {worst:.2e}"
        ))
    })
}

// 2. Neutral parameters reduce the full method to FedAvg.

fn criterion_neutral_reduction() -> Outcome {
    timed(NEUTRAL_BUDGET, || {
        // 5 clients, 4 classes, round-robin: each client gets 20 samples of every class.
        let (clients, classes, dim) = (5, 4, 8);
        let data = gen_synthetic::<f64>(classes, dim, clients * classes * 20, 11)
            .map_err(|e| e.to_string())?;
        let plan = PartitionPlan::round_robin(data.len(), clients, 11);
        let shards = split_test(&data, &plan, 0.2).map_err(|e| e.to_string())?;
        let sizes: BTreeSet<usize> = shards.iter().map(|s| s.train.len()).collect();
        ensure(sizes.len() == 1, || {
            format!("unequal train sizes {sizes:?}")
        })?;
        let base = ExperimentConfig {
            rounds: 10,
            clients,
            online_per_round: OnlineClients::Count(clients),
            gamma: 0.0,
            k: 0.0,
            batch_size: 16,
            seed: 11,
            model: ModelSpec::new(dim, vec![16, 12], classes).unwrap(),
            dataset: DatasetSource::Synthetic {
                num_classes: classes,
                input_dim: dim,
                samples: data.len(),
            },
            ..ExperimentConfig::default()
        };
        let mut globals = Vec::new();
        for algorithm in [Algorithm::Corefed, Algorithm::Fedavg] {
            let mut exp = Experiment::<f64>::with_shards(
                ExperimentConfig {
                    algorithm,
                    ..base.clone()
                },
                shards.clone(),
            )
            .map_err(|e| e.to_string())?;
            exp.run().map_err(|e| e.to_string())?;
            globals.push(exp.global().clone());
        }
        let diff = globals[0]
            .iter()
            .zip(globals[1].iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(diff <= NEUTRAL_TOL, || {
            format!("max coordinate difference {diff:e}")
        })?;
        Ok(format!("10 rounds, max coordinate difference {diff:.1e}"))
    })
}

// 3. Fairness weights lie on the simplex and are monotone.

fn criterion_weight_simplex() -> Outcome {
    timed(SIMPLEX_BUDGET, || {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        for draw in 0..SIMPLEX_DRAWS {
            let m = rng.random_range(2..=10);
            let gamma = rng.random_range(0.0..=4.0);
            let k = rng.random_range(0.0..=4.0);
            let mut freqs: BTreeMap<usize, f64> =
                (0..m).map(|i| (i, 1.0 - rng.random::<f64>())).collect();
            let mut sims: BTreeMap<usize, f64> =
                (0..m).map(|i| (i, rng.random_range(-1.0..=1.0))).collect();
            let members: Vec<usize> = (0..m).collect();
            let w =
                fairness_weights(&members, &freqs, &sims, gamma, k).map_err(|e| e.to_string())?;
            let total: f64 = w.weights.values().sum();
            ensure(w.weights.values().all(|&x| x > 0.0), || {
                format!("draw {draw}: non-positive weight")
            })?;
            ensure((total - 1.0).abs() < SIMPLEX_TOL, || {
                format!("draw {draw}: sum {total}")
            })?;

            // Raise one client's similarity, then lower its frequency.
            let i = rng.random_range(0..m);
            let base = w.weights[&i];
            let rho = sims[&i];
            sims.insert(i, rho + (1.0 - rho) * rng.random_range(0.1..=1.0));
            let up = fairness_weights(&members, &freqs, &sims, gamma, k)
                .unwrap()
                .weights[&i];
            ensure(up >= base && (k == 0.0 || up > base), || {
                format!("draw {draw}: weight {base} -> {up} after raising similarity (k = {k})")
            })?;
            sims.insert(i, rho);
            let f = freqs[&i];
            freqs.insert(i, f * rng.random_range(0.1..0.9));
            let down = fairness_weights(&members, &freqs, &sims, gamma, k)
                .unwrap()
                .weights[&i];
            ensure(down >= base && (gamma == 0.0 || down > base), || {
                format!("draw {draw}: weight {base} -> {down} after lowering frequency (gamma = {gamma})")
            })?;
        }
        Ok(format!("{SIMPLEX_DRAWS} draws"))
    })
}

// 4. Hand-derived golden values.

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn criterion_golden_values() -> Outcome {
    timed(Duration::MAX, || {
        let e = |v: &[f64]| Embedding::new(v.to_vec());
        let z1 = e(&[1.0, 0.0, 0.0]);
        let clients = [z1.clone(), e(&[0.0, 1.0, 0.0]), e(&[0.0, 0.0, 1.0])];
        let l = contrastive_loss(0, &clients, &z1, 1.0).ok_or("loss undefined")?;
        let expected = 2f64.ln() - 1.0;
        ensure(
            (l - expected).abs() < GOLDEN_TOL && (l + 0.30685).abs() < GOLDEN_TOL,
            || format!("contrastive loss {l}, expected {expected}"),
        )?;

        let (zi, zg) = (e(&[1.0, 0.0]), e(&[0.0, 1.0]));
        let target = alignment_vector(&zi, &zg);
        let refined = distill(&zi, &target, 0.5).map_err(|e| e.to_string())?;
        let r = refined.as_slice();
        ensure(
            (r[0] - 0.5).abs() < GOLDEN_TOL && r[1].abs() < GOLDEN_TOL,
            || format!("distilled embedding {r:?}, expected (0.5, 0)"),
        )?;

        let freqs = BTreeMap::from([(0, 1.0), (1, 1.0)]);
        let sims = BTreeMap::from([(0, 1.0), (1, -1.0)]);
        let w = fairness_weights(&[0, 1], &freqs, &sims, 2.0, 2.0).map_err(|e| e.to_string())?;
        let oracle = sigmoid(2.0) / (sigmoid(2.0) + sigmoid(-2.0));
        let (w0, w1): (f64, f64) = (w.weights[&0], w.weights[&1]);
        ensure(
            (w0 - 0.88080).abs() < GOLDEN_TOL
                && (w1 - 0.11920).abs() < GOLDEN_TOL
                && (w0 - oracle).abs() < 1e-12,
            || format!("weights ({w0}, {w1}), expected (0.88080, 0.11920)"),
        )?;
        Ok(format!(
            "loss {l:.5}, distilled ({:.5}, {:.5}), weights ({w0:.5}, {w1:.5})",
            r[0], r[1]
        ))
    })
}

// 5. Sliding-window frequencies and gradient reuse on a scripted schedule.

fn tagged(client: usize, round: usize) -> ParameterVector<f64> {
    ParameterVector::new(vec![(10 * client + round) as f64, 1.0])
}

fn fixed_window_script() -> Result<(), String> {
    const TAU: usize = 3;
    let schedule: [&[usize]; 6] = [&[0, 1, 4], &[0], &[2], &[0, 3], &[1], &[0]];
    // Hand-computed hits in rounds t-2..=t, in thirds; rows are rounds 1..6, columns clients 0..4.
    let hits: [[usize; 5]; 6] = [
        [1, 1, 0, 0, 1],
        [2, 1, 0, 0, 1],
        [2, 1, 1, 0, 1],
        [2, 0, 1, 1, 0],
        [1, 1, 1, 1, 0],
        [2, 1, 0, 1, 0],
    ];
    // Offline clients whose cached gradient is reused, with the round it was cached.
    let reuse: [&[(usize, usize)]; 6] = [
        &[],
        &[(1, 1), (4, 1)],
        &[(0, 2), (1, 1), (4, 1)],
        &[(1, 1), (2, 3), (4, 1)],
        &[(0, 4), (2, 3), (3, 4)],
        &[(1, 5), (2, 3), (3, 4)],
    ];
    let mut ledger = ParticipationLedger::<f64>::new();
    for (idx, online) in schedule.iter().enumerate() {
        let t = idx + 1;
        let online: BTreeSet<usize> = online.iter().copied().collect();
        ledger.record_round(t, &online).map_err(|e| e.to_string())?;
        for &c in &online {
            let g = reuse_gradient(&mut ledger, c, t, TAU, Some(tagged(c, t)));
            ensure(g == Some(tagged(c, t)), || {
                format!("round {t}: client {c} lost its fresh gradient")
            })?;
        }
        let mut got = Vec::new();
        for (c, &h) in hits[idx].iter().enumerate() {
            let f: f64 = participation_frequency(&ledger, c, t, TAU);
            let want = h as f64 / TAU as f64;
            ensure(f == want, || {
                format!("round {t}: f_{c} = {f}, expected {want}")
            })?;
            if !online.contains(&c) {
                if let Some(g) = reuse_gradient(&mut ledger, c, t, TAU, None) {
                    got.push((c, g));
                }
            }
        }
        let want: Vec<(usize, ParameterVector<f64>)> =
            reuse[idx].iter().map(|&(c, r)| (c, tagged(c, r))).collect();
        ensure(got == want, || {
            format!("round {t}: reused {got:?}, expected {want:?}")
        })?;
    }
    Ok(())
}

/// Driven through round assembly, where the window grows to 3 by round 4 and
/// client 2 is reused at exactly 3 rounds stale in round 6.
fn assembled_script() -> Result<(), String> {
    let (gamma, k) = (0.5, 2.0);
    let rho = |c: usize| 0.3 * c as f64 - 0.2;
    let schedule = [0usize, 1, 2, 0, 1, 0];
    // (window, members with their frequency in units of 1/window)
    let expected: [(usize, &[(usize, usize)]); 6] = [
        (1, &[(0, 1)]),
        (1, &[(0, 1), (1, 1)]),
        (2, &[(0, 1), (1, 1), (2, 1)]),
        (3, &[(0, 1), (1, 1), (2, 1)]),
        (3, &[(0, 1), (1, 1), (2, 1)]),
        (3, &[(0, 2), (1, 1), (2, 1)]),
    ];
    let mut ledger = ParticipationLedger::<f64>::new();
    for (idx, &c) in schedule.iter().enumerate() {
        let t = idx + 1;
        let online = BTreeSet::from([c]);
        let a = assemble_round(
            &mut ledger,
            &online,
            BTreeMap::from([(c, tagged(c, t))]),
            &BTreeMap::from([(c, rho(c))]),
            t,
            gamma,
            k,
        )
        .map_err(|e| e.to_string())?;
        let (tau, members) = expected[idx];
        ensure(a.assignment.window_tau == tau, || {
            format!(
                "round {t}: window {}, expected {tau}",
                a.assignment.window_tau
            )
        })?;
        let want_f: BTreeMap<usize, f64> = members
            .iter()
            .map(|&(m, h)| (m, h as f64 / tau as f64))
            .collect();
        ensure(a.assignment.frequencies == want_f, || {
            format!(
                "round {t}: frequencies {:?}, expected {want_f:?}",
                a.assignment.frequencies
            )
        })?;
        let raw: BTreeMap<usize, f64> = want_f
            .iter()
            .map(|(&m, &f)| (m, (1.0 / f).powf(gamma) * sigmoid(k * rho(m))))
            .collect();
        let z: f64 = raw.values().sum();
        for (m, r) in &raw {
            let w = a.assignment.weights[m];
            ensure((w - r / z).abs() < 1e-12, || {
                format!("round {t}: w_{m} = {w}, expected {}", r / z)
            })?;
        }
        if t == 6 {
            ensure(
                a.reused.contains(&2) && a.gradients[&2] == tagged(2, 3),
                || "round 6: client 2 at the window boundary was not reused".into(),
            )?;
        }
    }
    Ok(())
}

fn criterion_sliding_window() -> Outcome {
    timed(Duration::MAX, || {
        fixed_window_script()?;
        assembled_script()?;
        Ok("6-round fixed-window and assembled schedules match".into())
    })
}

// 6 and 7. Synthetic benchmark.

fn default_samples() -> usize {
    match ExperimentConfig::default().dataset {
        DatasetSource::Synthetic { samples, .. } => samples,
        DatasetSource::Idx { .. } => unreachable!("default dataset is synthetic"),
    }
}

fn benchmark_config(algorithm: Algorithm, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        algorithm,
        rounds: BENCH_ROUNDS,
        clients: 10,
        online_per_round: OnlineClients::Fraction(0.4),
        dirichlet_alpha: 0.5,
        seed,
        model: ModelSpec::synthetic(4),
        dataset: DatasetSource::Synthetic {
            num_classes: 4,
            input_dim: 32,
            samples: default_samples(),
        },
        ..ExperimentConfig::default()
    }
}

struct Final {
    accuracy: f64,
    d_cosine: f64,
}

fn final_metrics(config: ExperimentConfig) -> Result<Final, String> {
    let out = run_experiment::<f64>(config).map_err(|e| e.to_string())?;
    let last = out.reports.last().ok_or("no rounds")?;
    Ok(Final {
        accuracy: last.mean_accuracy,
        d_cosine: last.d_cosine_mean.ok_or("d_cosine undefined")?,
    })
}

fn criterion_ablation() -> Outcome {
    timed(BENCH_BUDGET, || {
        let mut cos_wins = 0;
        let mut acc_wins = 0;
        let mut rows = Vec::new();
        for seed in BENCH_SEEDS {
            let run = |a| final_metrics(benchmark_config(a, seed));
            let (core, co, re, avg) = (
                run(Algorithm::Corefed)?,
                run(Algorithm::Cofed)?,
                run(Algorithm::Refed)?,
                run(Algorithm::Fedavg)?,
            );
            if core.d_cosine <= re.d_cosine && core.d_cosine <= co.d_cosine {
                cos_wins += 1;
            }
            if core.accuracy >= avg.accuracy {
                acc_wins += 1;
            }
            rows.push(format!(
                "seed {seed}: d_cos corefed {:.4e} cofed {:.4e} refed {:.4e}; acc corefed {:.4} fedavg {:.4}",
                core.d_cosine, co.d_cosine, re.d_cosine, core.accuracy, avg.accuracy
            ));
        }
        let detail = format!(
            "d_cos wins {cos_wins}/3, accuracy wins {acc_wins}/3 [{}]",
            rows.join(" | ")
        );
        ensure(cos_wins >= 2 && acc_wins >= 2, || detail.clone())?;
        Ok(detail)
    })
}

fn criterion_tradeoff() -> Outcome {
    timed(BENCH_BUDGET, || {
        let mut wins = 0;
        let mut rows = Vec::new();
        for seed in BENCH_SEEDS {
            let with = |k, gamma| {
                final_metrics(ExperimentConfig {
                    k,
                    gamma,
                    ..benchmark_config(Algorithm::Corefed, seed)
                })
            };
            let default = with(2.0, 0.5)?;
            let skewed = with(0.5, 2.0)?;
            if default.accuracy >= skewed.accuracy {
                wins += 1;
            }
            rows.push(format!(
                "seed {seed}: {:.4} vs {:.4}",
                default.accuracy, skewed.accuracy
            ));
        }
        let detail = format!("wins {wins}/3 [{}]", rows.join(" | "));
        ensure(wins >= 2, || detail.clone())?;
        Ok(detail)
    })
}

// 8. Byte-identical reruns.

fn criterion_determinism() -> Outcome {
    timed(DETERMINISM_BUDGET, || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = ExperimentConfig {
            rounds: 20,
            ..benchmark_config(Algorithm::Corefed, 5)
        };
        let mut files = Vec::new();
        for id in ["first", "second"] {
            let manifest =
                RunManifest::new("bench.toml", tmp.path(), Some(id.into()), config.clone())
                    .map_err(|e| e.to_string())?;
            cmd_run(&manifest, false).map_err(|e| e.to_string())?;
            files.push(
                std::fs::read(manifest.run_dir().join("rounds.csv")).map_err(|e| e.to_string())?,
            );
        }
        ensure(files[0] == files[1], || {
            "rounds.csv differs between runs".into()
        })?;
        Ok(format!("{} identical bytes", files[0].len()))
    })
}

// 9. FMNIST stretch goal; needs the IDX files.

fn criterion_fmnist() -> Outcome {
    let Some(dir) = std::env::var_os(FMNIST_ENV).map(PathBuf::from) else {
        return Outcome::Skip(format!(
            "set {FMNIST_ENV} to a directory with the FMNIST training IDX files"
        ));
    };
    let images = dir.join("train-images-idx3-ubyte");
    let labels = dir.join("train-labels-idx1-ubyte");
    if !images.exists() || !labels.exists() {
        return Outcome::Skip(format!("IDX files not found in {}", dir.display()));
    }
    let config = ExperimentConfig {
        rounds: 300,
        model: ModelSpec::fmnist(),
        dataset: DatasetSource::Idx { images, labels },
        ..ExperimentConfig::default()
    };
    match final_metrics(config) {
        Ok(f) if f.accuracy >= FMNIST_TARGET => {
            Outcome::Pass(format!("accuracy {:.4}", f.accuracy))
        }
        Ok(f) => Outcome::Fail(format!("accuracy {:.4} below {FMNIST_TARGET}", f.accuracy)),
        Err(e) => Outcome::Fail(e),
    }
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, bool, Check); 9] = [
        (1, "gradient correctness", true, criterion_gradients),
        (
            2,
            "neutral-parameter reduction",
            true,
            criterion_neutral_reduction,
        ),
        (3, "weight simplex", true, criterion_weight_simplex),
        (4, "golden values", true, criterion_golden_values),
        (
            5,
            "sliding-window semantics",
            true,
            criterion_sliding_window,
        ),
        (6, "ablation direction", true, criterion_ablation),
        (7, "hyper-parameter trade-off", true, criterion_tradeoff),
        (8, "determinism", true, criterion_determinism),
        (9, "FMNIST stretch (non-gating)", false, criterion_fmnist),
    ];
    panic::set_hook(Box::new(|_| {}));
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, gating, check) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                if gating {
                    failed += 1;
                }
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {n} [{name}]: {tag} - {detail}");
    }
    if failed > 0 {
        println!("{failed} gating criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
