//! Acceptance suite: one pass/fail line per criterion.
//!
//! Set `ACCEPTANCE_ONLY=1,4,7` to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use qatten_core::agent::{AgentNet, AgentNetConfig};
use qatten_core::envs::{load_env, EnvSpec};
use qatten_core::grad::check::{analytic_gradient, numeric_gradient, relative_error, resolution_floor, scalar_value};
use qatten_core::grad::{Array, ParamStore, Tape, Var};
use qatten_core::mixers::{monotonicity_probe, qatten_mix, Mixer, MixerConfig, QattenConfig, QmixConfig};
use qatten_core::theory::{check_theorem3, igm_suite, run_suite, Composition, Outer, Utility, THEOREM3_RADIUS};
use qatten_core::trainer::{greedy_episode, median, MetricsRow, Trainer};
use qatten_core::Result;
use qatten_lab::attention::read_attention;
use qatten_lab::config::{parse_config, RunConfig};
use qatten_lab::run::{train_run, RunPaths};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run_config(name: &str, seed: u64, out: &Path) -> RunConfig {
    let mut c = parse_config(&root().join("configs").join(name)).unwrap();
    c.train.seed = seed;
    c.output_dir = out.join(format!("{}-{seed}", name.trim_end_matches(".json")));
    c
}

fn train_rows(c: &RunConfig) -> (Trainer, Vec<MetricsRow>) {
    let mut trainer = Trainer::new(c.train.clone(), c.load_env().unwrap()).unwrap();
    let mut rows = Vec::new();
    trainer.run(&mut rows).unwrap();
    (trainer, rows)
}

// 1 -------------------------------------------------------------------------

/// Max relative error per parameter-name prefix between backward and
/// central differences with h = 1e-6, with denominators floored at the
/// resolution of the difference quotient.
fn grad_errors<F>(f: &mut F, store: &ParamStore, groups: &[&str]) -> Vec<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let a = analytic_gradient(f, store).unwrap();
    let n = numeric_gradient(f, store, 1e-6).unwrap();
    let floor = resolution_floor(scalar_value(f, store).unwrap(), 1e-6);
    let mut worst = vec![0.0f64; groups.len()];
    for ((p, a), n) in store.iter().zip(&a).zip(&n) {
        for (g, prefix) in groups.iter().enumerate() {
            if p.name.starts_with(prefix) {
                for (x, y) in a.data().iter().zip(n.data()) {
                    worst[g] = worst[g].max(relative_error(*x, *y, floor));
                }
            }
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn small_qatten(weighted: bool) -> MixerConfig {
    MixerConfig::Qatten(QattenConfig {
        heads: 2,
        embed: 4,
        query_hidden: 6,
        constant_hidden: 5,
        weight_hidden: 6,
        weighted,
        nonlinear: false,
    })
}

fn gradient_suite() -> Outcome {
    const DRAWS: u64 = 50;
    let (n, s, f, b) = (3, 5, 4, 2);
    let names = ["agent GRU net", "qatten base", "qatten weighted", "qmix", "c(s)", "f_nn"];
    let mut worst = [0.0f64; 6];
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);

        // agent network over three recurrent steps
        let mut store = ParamStore::new();
        let cfg = AgentNetConfig {
            n_agents: 2,
            obs_width: 5,
            n_actions: 4,
            hidden: 8,
            share_params: true,
            agent_id: true,
        };
        let net = AgentNet::new(cfg.clone(), &mut store, &mut rng, "agent").unwrap();
        let inputs: Vec<Vec<f64>> = (0..3).map(|_| uniform(&mut rng, 2 * cfg.input_width(), 1.0)).collect();
        let mut loss = |t: &mut Tape, st: &ParamStore| -> Result<Var> {
            let bound = net.bind(t, st);
            let mut h = t.input(Array::zeros(&[2, 8]))?;
            let mut outs = Vec::new();
            for x in &inputs {
                let xv = t.input(Array::matrix(2, cfg.input_width(), x.clone())?)?;
                let (q, h2) = bound.step(t, xv, h)?;
                h = h2;
                outs.push(q);
            }
            let all = t.concat_rows(&outs)?;
            let sq = t.square(all)?;
            t.sum_all(sq)
        };
        worst[0] = worst[0].max(grad_errors(&mut loss, &store, &["agent"])[0]);

        let q = uniform(&mut rng, b * n, 2.0);
        let st = uniform(&mut rng, b * s, 1.0);
        let ft = uniform(&mut rng, b * n * f, 1.0);
        for (slot, cfg) in [(1, small_qatten(false)), (2, small_qatten(true)), (3, MixerConfig::Qmix(QmixConfig { embed: 4 }))] {
            let mut store = ParamStore::new();
            let m = Mixer::new(&cfg, n, s, f, &mut store, &mut rng, "mixer").unwrap();
            let mut loss = |t: &mut Tape, p: &ParamStore| -> Result<Var> {
                let qv = t.input(Array::matrix(b, n, q.clone())?)?;
                let sv = t.input(Array::matrix(b, s, st.clone())?)?;
                let fv = t.input(Array::matrix(b * n, f, ft.clone())?)?;
                let out = m.forward(t, p, qv, sv, fv)?;
                let sq = t.square(out.q_tot)?;
                t.sum_all(sq)
            };
            let e = grad_errors(&mut loss, &store, &["mixer", "mixer.constant", "mixer.head_weights"]);
            worst[slot] = worst[slot].max(e[0]);
            if slot == 2 {
                worst[4] = worst[4].max(e[1]);
                worst[5] = worst[5].max(e[2]);
            }
        }
    }
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(worst.iter().all(|w| *w < 1e-4), format!("max rel error over {DRAWS} draws: {detail}"))
}

// 2, 3 ----------------------------------------------------------------------

fn random_mixer(cfg: &MixerConfig, n: usize, s: usize, f: usize, rng: &mut ChaCha8Rng) -> (Mixer, ParamStore) {
    let mut store = ParamStore::new();
    let m = Mixer::new(cfg, n, s, f, &mut store, rng, "mixer").unwrap();
    (m, store)
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| uniform(rng, f, 2.0)).collect()
}

fn attention_invariants() -> Outcome {
    let (s, f) = (6, 4);
    let mut worst_sum = 0.0f64;
    let mut min_entry = f64::INFINITY;
    let mut worst_perm = 0.0f64;
    for draw in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + draw);
        let n = 2 + (draw % 4) as usize;
        let cfg = MixerConfig::Qatten(QattenConfig {
            weighted: draw % 2 == 1,
            ..QattenConfig::default()
        });
        let (m, store) = random_mixer(&cfg, n, s, f, &mut rng);
        let state = uniform(&mut rng, s, 2.0);
        let feats = random_features(&mut rng, n, f);
        let q = uniform(&mut rng, n, 5.0);
        let (v, rec) = qatten_mix(&m, &store, &q, &state, &feats).unwrap();
        for row in &rec.lambda {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            min_entry = row.iter().copied().fold(min_entry, f64::min);
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1 + (draw as usize % (n - 1)));
        let pq: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
        let pf: Vec<Vec<f64>> = perm.iter().map(|&i| feats[i].clone()).collect();
        let (pv, prec) = qatten_mix(&m, &store, &pq, &state, &pf).unwrap();
        worst_perm = worst_perm.max((pv - v).abs());
        for (row, prow) in rec.lambda.iter().zip(&prec.lambda) {
            for (k, &i) in perm.iter().enumerate() {
                worst_perm = worst_perm.max((prow[k] - row[i]).abs());
            }
        }
    }
    outcome(
        worst_sum <= 1e-9 && min_entry >= 0.0 && worst_perm <= 1e-9,
        format!("max |sum-1| {worst_sum:.1e}, min lambda {min_entry:.1e}, max permutation gap {worst_perm:.1e}"),
    )
}

fn monotonicity() -> Outcome {
    let (n, s, f) = (4, 6, 4);
    let configs = [
        MixerConfig::Qatten(QattenConfig::default()),
        MixerConfig::Qatten(QattenConfig {
            weighted: true,
            ..QattenConfig::default()
        }),
        MixerConfig::Qmix(QmixConfig::default()),
    ];
    let mut min_partial = f64::INFINITY;
    let mut worst_match = 0.0f64;
    for draw in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + draw);
        for cfg in &configs {
            let (m, store) = random_mixer(cfg, n, s, f, &mut rng);
            let state = uniform(&mut rng, s, 2.0);
            let feats = random_features(&mut rng, n, f);
            let q = uniform(&mut rng, n, 5.0);
            let probe = monotonicity_probe(&m, &store, &state, &q, &feats, 1e-6).unwrap();
            min_partial = probe.iter().copied().fold(min_partial, f64::min);
            if m.is_qatten() {
                let (_, rec) = qatten_mix(&m, &store, &q, &state, &feats).unwrap();
                for (i, p) in probe.iter().enumerate() {
                    let expected: f64 = rec
                        .head_weights
                        .iter()
                        .zip(&rec.lambda)
                        .map(|(w, row)| w * row[i])
                        .sum();
                    worst_match = worst_match.max((p - expected).abs());
                }
            }
        }
    }
    outcome(
        min_partial >= -1e-9 && worst_match <= 1e-6,
        format!("min dQtot/dQi {min_partial:.3e}, max |probe - sum_h w_h lambda_ih| {worst_match:.1e}"),
    )
}

// 4 -------------------------------------------------------------------------

fn igm_oracle() -> Outcome {
    let start = Instant::now();
    let records = igm_suite(0).unwrap();
    let elapsed = start.elapsed();
    let ok = records.iter().all(|r| r.passed == Some(true));
    let detail = records
        .iter()
        .map(|r| format!("{} {}", r.name, if r.passed == Some(true) { "ok" } else { "FAILED" }))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        ok && elapsed < Duration::from_secs(60),
        format!("{detail} ({:.1} s)", elapsed.as_secs_f64()),
    )
}

// 5, 6, 7 -------------------------------------------------------------------

fn suite_values(name: &str, key: &str) -> Vec<f64> {
    let report = run_suite(0).unwrap();
    report
        .checks_named(name)
        .map(|c| c.measured[key].as_f64().unwrap())
        .collect()
}

fn theorem1() -> Outcome {
    let at = suite_values("cross_derivatives", "max_at_maximum");
    let off = suite_values("cross_derivatives", "min_off_maximum");
    let max_at = at.iter().copied().fold(0.0, f64::max);
    let min_off = off.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        at.len() == 20 && max_at < 1e-3 && min_off > 1e-2,
        format!(
            "{} compositions: max cross derivative at maxima {max_at:.1e}, min at a_o+0.2 {min_off:.2e}",
            at.len()
        ),
    )
}

fn theorem2() -> Outcome {
    let report = run_suite(0).unwrap();
    let fits: Vec<_> = report.checks_named("local_linear_fit").collect();
    let max_ratio = fits
        .iter()
        .map(|c| c.measured["residual_ratio"].as_f64().unwrap())
        .fold(0.0, f64::max);
    let min_lambda = fits
        .iter()
        .flat_map(|c| c.measured["lambda"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()))
        .fold(f64::INFINITY, f64::min);
    outcome(
        fits.len() == 20 && max_ratio <= 0.3 && min_lambda >= -1e-8,
        format!("max residual(0.05)/residual(0.1) {max_ratio:.3}, min fitted lambda {min_lambda:.3}"),
    )
}

fn theorem3() -> Outcome {
    let gaps = suite_values("theorem3_coefficients", "max_rel_gap");
    let max_gap = gaps.iter().copied().fold(0.0, f64::max);
    let utilities = vec![
        Utility {
            alpha: 2.0,
            beta: -1.0,
            rho: 0.0,
            center: 0.0,
        },
        Utility {
            alpha: 3.0,
            beta: -1.5,
            rho: 0.0,
            center: 0.0,
        },
    ];
    let outer = Outer {
        constant: 0.0,
        linear: vec![1.0, 1.0],
        pairs: vec![0.0, 0.1, 0.1, 0.0],
        triples: None,
    };
    let comp = Composition::new(utilities, outer).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let worked = check_theorem3(&comp, &[0.0, 0.0], THEOREM3_RADIUS, &mut rng).unwrap();
    let predicted_ok = (worked.predicted[0] - 1.6).abs() < 1e-12 && (worked.predicted[1] - 1.4).abs() < 1e-12;
    outcome(
        gaps.len() == 20 && max_gap <= 0.01 && predicted_ok && worked.max_rel_gap <= 0.01,
        format!(
            "suite max relative gap {max_gap:.1e}; worked case predicted ({}, {}), fitted ({:.4}, {:.4})",
            worked.predicted[0], worked.predicted[1], worked.fitted[0], worked.fitted[1]
        ),
    )
}

// 8, 9 ----------------------------------------------------------------------

fn matrix_game() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let env = load_env(&root().join("games/sum3.json")).unwrap();
    let optimum = env.oracle_optimal(0.99, 0).unwrap().value;
    let mut parts = Vec::new();
    let mut ok = true;
    for m in ["qatten", "vdn", "iql"] {
        let mut solved = 0;
        let mut slowest = Duration::ZERO;
        for seed in SEEDS {
            let c = run_config(&format!("sum3_{m}.json"), seed, tmp.path());
            let start = Instant::now();
            let (_, rows) = train_rows(&c);
            slowest = slowest.max(start.elapsed());
            let last = rows.last().unwrap();
            assert!(last.step >= c.train.total_steps);
            solved += usize::from(last.median_return >= optimum - 1e-9);
        }
        ok &= solved >= 4 && slowest < Duration::from_secs(300);
        parts.push(format!("{m} {solved}/5 (slowest {:.0} s)", slowest.as_secs_f64()));
    }
    outcome(ok, format!("optimum {optimum}: {}", parts.join(", ")))
}

fn discounted_greedy_return(trainer: &Trainer, gamma: f64) -> f64 {
    let ep = greedy_episode(&trainer.learner.agent, &trainer.learner.params, &trainer.env, 0).unwrap();
    ep.rewards
        .iter()
        .enumerate()
        .map(|(t, r)| gamma.powi(t as i32) * r)
        .sum()
}

fn two_step() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let env = load_env(&root().join("games/two_step.json")).unwrap();
    let gamma = env.gamma().unwrap();
    let optimum = env.oracle_optimal(gamma, 0).unwrap().value;
    let mut medians = Vec::new();
    for m in ["qatten", "vdn"] {
        let returns: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let c = run_config(&format!("two_step_{m}.json"), seed, tmp.path());
                let (trainer, _) = train_rows(&c);
                discounted_greedy_return(&trainer, gamma)
            })
            .collect();
        medians.push((m, median(&returns), returns));
    }
    let (q, v) = (medians[0].1, medians[1].1);
    outcome(
        q >= v && q >= 0.95 * optimum,
        format!(
            "optimum {optimum}: qatten median {q} {:?}, vdn median {v} {:?}",
            medians[0].2, medians[1].2
        ),
    )
}

// 10 ------------------------------------------------------------------------

fn skirmish() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let mut med = Vec::new();
    let mut slowest = Duration::ZERO;
    for m in ["qatten", "vdn", "iql", "qatten_weighted"] {
        let mut wins = Vec::new();
        for seed in SEEDS {
            let c = run_config(&format!("skirmish_{m}.json"), seed, tmp.path());
            let start = Instant::now();
            let (_, rows) = train_rows(&c);
            let took = start.elapsed();
            slowest = slowest.max(took);
            let w = rows.last().unwrap().win_rate;
            println!("    skirmish {m} seed {seed}: final win rate {w} ({:.0} s)", took.as_secs_f64());
            wins.push(w);
        }
        med.push((m, median(&wins)));
    }
    let (q, v, i, w) = (med[0].1, med[1].1, med[2].1, med[3].1);
    outcome(
        q >= v && q >= i && slowest < Duration::from_secs(7200),
        format!(
            "median win rate qatten {q}, vdn {v}, iql {i}; weighted qatten {w} (reported only); slowest run {:.0} s",
            slowest.as_secs_f64()
        ),
    )
}

// 11, 12 --------------------------------------------------------------------

fn short_skirmish(tmp: &Path, seed: u64, steps: usize, mixer: &str) -> RunConfig {
    let mut c = run_config(&format!("skirmish_{mixer}.json"), seed, tmp);
    c.train.total_steps = steps;
    c.train.eval_interval = steps / 4;
    c.train.eval_episodes = 8;
    c.train.checkpoint_interval = Some(steps / 2);
    c.train.anneal_steps = None;
    c
}

fn reproducibility() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let c = short_skirmish(tmp.path(), 3, 3000, "qatten");
    let paths = RunPaths::new(&c.output_dir);
    train_run(&c, None).unwrap();
    let first = std::fs::read(paths.metrics()).unwrap();
    let first_ckpt = std::fs::read(paths.final_checkpoint()).unwrap();
    train_run(&c, None).unwrap();
    let second = std::fs::read(paths.metrics()).unwrap();

    let mid = std::fs::read_dir(paths.checkpoints())
        .unwrap()
        .map(|e| e.unwrap().path())
        .min()
        .expect("a midpoint checkpoint");
    train_run(&c, Some(&mid)).unwrap();
    let resumed = std::fs::read(paths.metrics()).unwrap();
    let resumed_ckpt = std::fs::read(paths.final_checkpoint()).unwrap();
    let rows = String::from_utf8_lossy(&first).lines().count() - 1;
    outcome(
        first == second && first == resumed && first_ckpt == resumed_ckpt,
        format!(
            "{rows} metric rows; repeat identical: {}; resume from {} identical: {}",
            first == second,
            mid.file_name().unwrap().to_string_lossy(),
            first == resumed && first_ckpt == resumed_ckpt
        ),
    )
}

fn attention_export() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let mut c = short_skirmish(tmp.path(), 5, 5000, "qatten_weighted");
    c.export_attention = true;
    c.attention_episodes = 1;
    let summary = train_run(&c, None).unwrap();
    let env: EnvSpec = c.load_env().unwrap();
    let snapshot = qatten_lab::checkpoint::load_checkpoint(&summary.final_checkpoint).unwrap();
    let heads = match &snapshot.learner.mixer {
        Mixer::Qatten(q) => q.config.heads,
        _ => unreachable!("qatten config"),
    };
    let table = read_attention(&summary.attention_files[0]).unwrap();
    let steps = table.constants.len();
    let sums = table.group_sums();
    let worst = sums.values().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let complete = sums.len() == steps * heads
        && table.lambda.len() == steps * heads * env.n_agents()
        && table.weights.len() == steps * heads
        && steps >= 1;
    outcome(
        complete && worst <= 1e-6,
        format!("{steps} steps x {heads} heads x {} agents, max |sum-1| {worst:.1e}", env.n_agents()),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [Criterion; 12] = [
        (1, "gradient suite", gradient_suite),
        (2, "attention invariants", attention_invariants),
        (3, "monotonicity", monotonicity),
        (4, "IGM oracle", igm_oracle),
        (5, "vanishing cross derivatives", theorem1),
        (6, "local linear decomposition", theorem2),
        (7, "head coefficient formula", theorem3),
        (8, "matrix-game learning", matrix_game),
        (9, "state-dependent two-step game", two_step),
        (10, "desk-scale skirmish", skirmish),
        (11, "reproducibility", reproducibility),
        (12, "attention export", attention_export),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] criterion {id:>2} {name} ({:.1} s): {}",
            start.elapsed().as_secs_f64(),
            result.detail
        );
        if !result.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
