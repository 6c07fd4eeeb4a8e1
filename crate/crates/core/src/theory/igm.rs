use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::CheckRecord;

use crate::agent::{greedy_action, select_action, AgentNet};
use crate::envs::EnvSpec;
use crate::error::{LabError, Result};
use crate::grad::ParamStore;
use crate::mixers::{Mixer, MixerConfig, QattenConfig, QmixConfig};
use crate::trainer::{rollout, AgentRunner};

/// Largest joint action space enumerated per case.
pub const IGM_LIMIT: u128 = 100_000;

/// Relative slack when comparing the exhaustive maximum with the greedy
/// joint value; batched evaluation may round rows differently.
const VALUE_SLACK: f64 = 1e-9;

/// Everything needed to evaluate `Q_tot` at one decision point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgmCase {
    /// Per-agent utilities over actions.
    pub utilities: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub state: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

impl IgmCase {
    fn available(&self) -> Vec<Vec<usize>> {
        self.masks
            .iter()
            .map(|m| (0..m.len()).filter(|&a| m[a]).collect())
            .collect()
    }

    fn joint_count(&self) -> u128 {
        self.available().iter().map(|a| a.len() as u128).product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub case: usize,
    pub greedy: Vec<usize>,
    pub greedy_value: f64,
    pub best: Vec<usize>,
    pub best_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgmReport {
    pub cases: usize,
    pub joint_actions: u128,
    pub passed: bool,
    pub counterexample: Option<Counterexample>,
}

/// Exhaustive IGM check with an arbitrary mixing function. `mix` receives
/// the case and a list of chosen-utility rows (one per joint action) and
/// returns one `Q_tot` per row.
pub fn check_igm_with<F>(cases: &[IgmCase], mut mix: F) -> Result<IgmReport>
where
    F: FnMut(&IgmCase, &[Vec<f64>]) -> Result<Vec<f64>>,
{
    let mut joint_actions = 0u128;
    for (k, case) in cases.iter().enumerate() {
        let n = case.utilities.len();
        if n == 0 || case.masks.len() != n || case.features.len() != n {
            return Err(LabError::dim("igm_case", &[case.masks.len(), case.features.len()], &[n, n]));
        }
        let size = case.joint_count();
        if size > IGM_LIMIT {
            return Err(LabError::Capacity {
                size,
                limit: IGM_LIMIT,
            });
        }
        if size == 0 {
            return Err(LabError::contract(format!("case {k} has an agent with no available action")));
        }
        joint_actions += size;
        let available = case.available();
        let greedy = case
            .utilities
            .iter()
            .zip(&case.masks)
            .map(|(q, m)| greedy_action(q, m))
            .collect::<Result<Vec<_>>>()?;

        let mut joints = Vec::with_capacity(size as usize);
        let mut idx = vec![0usize; n];
        loop {
            joints.push(idx.iter().enumerate().map(|(i, &j)| available[i][j]).collect::<Vec<_>>());
            let mut i = n;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                idx[i] += 1;
                if idx[i] < available[i].len() {
                    break;
                }
                idx[i] = 0;
            }
            if idx.iter().all(|&j| j == 0) {
                break;
            }
        }
        let greedy_row = joints.iter().position(|j| *j == greedy).expect("greedy is available");
        let rows: Vec<Vec<f64>> = joints
            .iter()
            .map(|j| j.iter().enumerate().map(|(i, &a)| case.utilities[i][a]).collect())
            .collect();
        let values = mix(case, &rows)?;
        if values.len() != rows.len() {
            return Err(LabError::dim("igm_mix", &[values.len()], &[rows.len()]));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(LabError::NonFinite(format!("mixed value {v} in case {k}")));
        }
        let mut best = 0;
        for (r, v) in values.iter().enumerate() {
            if *v > values[best] {
                best = r;
            }
        }
        let (gv, bv) = (values[greedy_row], values[best]);
        if bv > gv + VALUE_SLACK * (1.0 + gv.abs()) {
            return Ok(IgmReport {
                cases: k + 1,
                joint_actions,
                passed: false,
                counterexample: Some(Counterexample {
                    case: k,
                    greedy,
                    greedy_value: gv,
                    best: joints[best].clone(),
                    best_value: bv,
                }),
            });
        }
    }
    Ok(IgmReport {
        cases: cases.len(),
        joint_actions,
        passed: true,
        counterexample: None,
    })
}

/// Exhaustive IGM check of a mixer with parameters `store`.
pub fn check_igm(mixer: &Mixer, store: &ParamStore, cases: &[IgmCase]) -> Result<IgmReport> {
    if mixer.is_independent() {
        return Err(LabError::UnsupportedMixer("independent learners have no Q_tot".into()));
    }
    check_igm_with(cases, |case, rows| {
        let states = vec![case.state.clone(); rows.len()];
        let features = vec![case.features.clone(); rows.len()];
        Ok(mixer.mix_batch(store, rows, &states, &features)?.0)
    })
}

/// Decision points visited by ε-greedy episodes of `agent`, one case per
/// step, with the agent's utilities at that step.
pub fn igm_cases_from_env<R: Rng>(
    agent: &AgentNet,
    params: &ParamStore,
    env: &EnvSpec,
    seeds: &[u64],
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<IgmCase>> {
    let mut cases = Vec::new();
    for &seed in seeds {
        let mut runner = AgentRunner::new(agent, params);
        let episode = rollout(env, seed, |obs| {
            let utilities = runner.utilities(obs)?;
            let joint = utilities
                .iter()
                .zip(obs)
                .map(|(q, o)| select_action(q, &o.mask, epsilon, rng))
                .collect::<Result<Vec<_>>>()?;
            runner.record(&joint);
            cases.push(IgmCase {
                utilities,
                masks: obs.iter().map(|o| o.mask.clone()).collect(),
                state: Vec::new(),
                features: obs.iter().map(|o| o.features.clone()).collect(),
            });
            Ok(joint)
        })?;
        let start = cases.len() - episode.len();
        for (t, c) in cases[start..].iter_mut().enumerate() {
            c.state = episode.state_at(t).to_vec();
        }
    }
    Ok(cases)
}

/// Agents, actions per agent, state width and feature width of the
/// random IGM cases.
pub const IGM_SUITE_SHAPE: (usize, usize, usize, usize) = (4, 5, 8, 6);
pub const IGM_SUITE_CASES: usize = 100;

/// Random decision points: uniform utilities, states and features, and
/// masks where each action is available with probability 0.8 (at least one
/// per agent).
pub fn random_igm_cases<R: Rng>(
    count: usize,
    (n, actions, state_width, feature_width): (usize, usize, usize, usize),
    rng: &mut R,
) -> Vec<IgmCase> {
    (0..count)
        .map(|_| {
            let masks = (0..n)
                .map(|_| {
                    let mut m: Vec<bool> = (0..actions).map(|_| rng.gen_bool(0.8)).collect();
                    if !m.contains(&true) {
                        m[rng.gen_range(0..actions)] = true;
                    }
                    m
                })
                .collect();
            IgmCase {
                utilities: (0..n)
                    .map(|_| (0..actions).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect(),
                masks,
                state: (0..state_width).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                features: (0..n)
                    .map(|_| (0..feature_width).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
            }
        })
        .collect()
}

/// IGM checks of freshly initialized VDN, QMIX and Qatten mixers on seeded
/// random cases, plus a negative control: a Qatten mixer fed the negated
/// utility of agent 0, which gives that agent a negative coefficient.
pub fn igm_suite(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = IGM_SUITE_SHAPE;
    let (n, _, s, f) = shape;
    let cases = random_igm_cases(IGM_SUITE_CASES, shape, &mut rng);
    let configs = [
        MixerConfig::Vdn,
        MixerConfig::Qmix(QmixConfig::default()),
        MixerConfig::Qatten(QattenConfig::default()),
        MixerConfig::Qatten(QattenConfig {
            weighted: true,
            ..QattenConfig::default()
        }),
    ];
    let inputs = json!({"seed": seed, "cases": IGM_SUITE_CASES, "shape": [shape.0, shape.1, shape.2, shape.3]});
    let mut out = Vec::new();
    for cfg in &configs {
        let mut store = ParamStore::new();
        let mixer = Mixer::new(cfg, n, s, f, &mut store, &mut rng, "mixer")?;
        let report = check_igm(&mixer, &store, &cases)?;
        out.push(CheckRecord {
            name: format!("igm_{}", cfg.label()),
            composition: 0,
            inputs: inputs.clone(),
            passed: Some(report.passed),
            measured: serde_json::to_value(&report).expect("report serializes"),
        });
    }
    let mut store = ParamStore::new();
    let mixer = Mixer::new(&configs[2], n, s, f, &mut store, &mut rng, "mixer")?;
    let report = check_igm_with(&cases, |case, rows| {
        let flipped: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r[0] = -r[0];
                r
            })
            .collect();
        let states = vec![case.state.clone(); rows.len()];
        let features = vec![case.features.clone(); rows.len()];
        Ok(mixer.mix_batch(&store, &flipped, &states, &features)?.0)
    })?;
    out.push(CheckRecord {
        name: "igm_negative_control_detected".into(),
        composition: 0,
        inputs,
        passed: Some(!report.passed),
        measured: serde_json::to_value(&report).expect("report serializes"),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cases(n: usize, actions: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<IgmCase> {
        (0..count)
            .map(|_| IgmCase {
                utilities: (0..n)
                    .map(|_| (0..actions).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
                masks: (0..n).map(|_| vec![true; actions]).collect(),
                state: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                features: (0..n)
                    .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn vdn_and_qatten_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cases = random_cases(3, 4, 20, &mut rng);
        let mut store = ParamStore::new();
        let vdn = Mixer::new(&MixerConfig::Vdn, 3, 3, 2, &mut store, &mut rng, "mixer").unwrap();
        let r = check_igm(&vdn, &store, &cases).unwrap();
        assert!(r.passed && r.cases == 20 && r.joint_actions == 20 * 64);

        let mut store = ParamStore::new();
        let cfg = MixerConfig::Qatten(QattenConfig::default());
        let q = Mixer::new(&cfg, 3, 3, 2, &mut store, &mut rng, "mixer").unwrap();
        assert!(check_igm(&q, &store, &cases).unwrap().passed);
    }

    #[test]
    fn seeded_suite_passes_and_control_fails() {
        let records = igm_suite(3).unwrap();
        assert_eq!(records.len(), 5);
        for r in &records {
            assert_eq!(r.passed, Some(true), "{}: {}", r.name, r.measured);
        }
    }

    #[test]
    fn negative_weight_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cases = random_cases(2, 3, 5, &mut rng);
        let r = check_igm_with(&cases, |_, rows| Ok(rows.iter().map(|q| q[0] - 0.5 * q[1]).collect())).unwrap();
        assert!(!r.passed);
        let ce = r.counterexample.unwrap();
        assert!(ce.best_value > ce.greedy_value);
        assert_ne!(ce.best, ce.greedy);
    }

    #[test]
    fn masks_restrict_enumeration() {
        let case = IgmCase {
            utilities: vec![vec![9.0, 1.0, 0.0], vec![0.0, 2.0]],
            masks: vec![vec![false, true, true], vec![true, true]],
            state: vec![],
            features: vec![vec![], vec![]],
        };
        let mut seen = Vec::new();
        let r = check_igm_with(std::slice::from_ref(&case), |_, rows| {
            seen = rows.to_vec();
            Ok(rows.iter().map(|q| q.iter().sum()).collect())
        })
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.joint_actions, 4);
        assert!(seen.iter().all(|q| q[0] != 9.0));
    }

    #[test]
    fn env_cases_follow_the_episode() {
        use crate::agent::AgentNetConfig;
        use crate::envs::{EnvKind, MatrixGame, TwoStepGame};
        let env = EnvSpec {
            name: "two_step".into(),
            kind: EnvKind::TwoStep(TwoStepGame {
                actions: vec![2, 2],
                mode_a: MatrixGame::new(vec![2, 2], vec![7.0; 4]).unwrap(),
                mode_b: MatrixGame::new(vec![2, 2], vec![0.0, 1.0, 1.0, 8.0]).unwrap(),
                branch_agent: 0,
                gamma: 0.99,
            }),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = AgentNetConfig {
            n_agents: 2,
            obs_width: env.obs_width(),
            n_actions: 2,
            hidden: 8,
            share_params: true,
            agent_id: true,
        };
        let agent = AgentNet::new(cfg, &mut store, &mut rng, "agent").unwrap();
        let cases = igm_cases_from_env(&agent, &store, &env, &[1, 2], 1.0, &mut rng).unwrap();
        assert_eq!(cases.len(), 4);
        // the second decision of each episode happens in mode A or B
        assert_eq!(cases[0].state, vec![1.0, 0.0, 0.0]);
        assert!(cases[1].state[0] == 0.0 && cases[1].state[1] + cases[1].state[2] == 1.0);
        let mut store2 = ParamStore::new();
        let vdn = Mixer::new(&MixerConfig::Vdn, 2, 3, env.obs_width(), &mut store2, &mut rng, "mixer").unwrap();
        assert!(check_igm(&vdn, &store2, &cases).unwrap().passed);
    }

    #[test]
    fn capacity_is_enforced() {
        let case = IgmCase {
            utilities: vec![vec![0.0; 10]; 6],
            masks: vec![vec![true; 10]; 6],
            state: vec![],
            features: vec![vec![]; 6],
        };
        let err = check_igm_with(&[case], |_, rows| Ok(vec![0.0; rows.len()])).unwrap_err();
        assert!(matches!(err, LabError::Capacity { size: 1_000_000, .. }));
    }
}
