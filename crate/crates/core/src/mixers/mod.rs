//! Centralized mixers combining per-agent utilities into a joint value.

mod qatten;
mod qmix;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use qatten::{QattenConfig, QattenMixer};
pub use qmix::{QmixConfig, QmixMixer};

use crate::error::{LabError, Result};
use crate::grad::{Array, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixerConfig {
    Qatten(QattenConfig),
    Vdn,
    Qmix(QmixConfig),
    /// Independent learners: every agent is trained on its own utility.
    Independent,
}

impl MixerConfig {
    pub fn label(&self) -> &'static str {
        match self {
            MixerConfig::Qatten(c) if c.weighted => "qatten-weighted",
            MixerConfig::Qatten(_) => "qatten",
            MixerConfig::Vdn => "vdn",
            MixerConfig::Qmix(_) => "qmix",
            MixerConfig::Independent => "iql",
        }
    }
}

/// Tape handles to the Qatten internals of one forward pass.
#[derive(Clone, Debug)]
pub struct MixTrace {
    /// One `[B, N]` softmax per head.
    pub lambdas: Vec<Var>,
    /// Unweighted head values `sum_i lambda_{i,h} q_i`, each `[B]`.
    pub head_values: Vec<Var>,
    /// `|f(s)|`, `[B, H]`, weighted variant only.
    pub weights: Option<Var>,
    pub constant: Var,
}

/// Mixer internals for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    /// `lambda[h][i]`.
    pub lambda: Vec<Vec<f64>>,
    pub head_values: Vec<f64>,
    pub head_weights: Vec<f64>,
    pub constant: f64,
    pub q_tot: f64,
}

impl MixTrace {
    pub fn record(&self, tape: &Tape, q_tot: Var, row: usize) -> MixRecord {
        let heads = self.lambdas.len();
        MixRecord {
            lambda: self
                .lambdas
                .iter()
                .map(|l| tape.value(*l).row(row).to_vec())
                .collect(),
            head_values: self
                .head_values
                .iter()
                .map(|v| tape.value(*v).data()[row])
                .collect(),
            head_weights: match self.weights {
                Some(w) => tape.value(w).row(row).to_vec(),
                None => vec![1.0; heads],
            },
            constant: tape.value(self.constant).data()[row],
            q_tot: tape.value(q_tot).data()[row],
        }
    }
}

pub struct MixOutput {
    /// `[B]` joint values, or `[B, N]` for independent learners.
    pub q_tot: Var,
    pub trace: Option<MixTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Mixer {
    Qatten(QattenMixer),
    Vdn { n_agents: usize },
    Qmix(QmixMixer),
    Independent { n_agents: usize },
}

impl Mixer {
    pub fn new<R: Rng>(
        config: &MixerConfig,
        n_agents: usize,
        state_width: usize,
        feature_width: usize,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self> {
        if n_agents == 0 {
            return Err(LabError::contract("mixer needs at least one agent"));
        }
        Ok(match config {
            MixerConfig::Qatten(c) => Mixer::Qatten(QattenMixer::new(
                c.clone(),
                n_agents,
                state_width,
                feature_width,
                store,
                rng,
                prefix,
            )?),
            MixerConfig::Vdn => Mixer::Vdn { n_agents },
            MixerConfig::Qmix(c) => Mixer::Qmix(QmixMixer::new(
                c.clone(),
                n_agents,
                state_width,
                store,
                rng,
                prefix,
            )?),
            MixerConfig::Independent => Mixer::Independent { n_agents },
        })
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Mixer::Qatten(m) => m.n_agents,
            Mixer::Qmix(m) => m.n_agents,
            Mixer::Vdn { n_agents } | Mixer::Independent { n_agents } => *n_agents,
        }
    }

    pub fn is_independent(&self) -> bool {
        matches!(self, Mixer::Independent { .. })
    }

    pub fn is_qatten(&self) -> bool {
        matches!(self, Mixer::Qatten(_))
    }

    /// Batched forward: `q [B, N]`, `state [B, S]`, `features [B*N, F]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        state: Var,
        features: Var,
    ) -> Result<MixOutput> {
        let n = self.n_agents();
        let qv = tape.value(q);
        if qv.cols() != n || qv.shape().len() != 2 {
            return Err(LabError::dim("mixer", qv.shape(), &[qv.rows(), n]));
        }
        let batch = qv.rows();
        if tape.value(state).rows() != batch {
            return Err(LabError::dim("mixer", qv.shape(), tape.value(state).shape()));
        }
        match self {
            Mixer::Qatten(m) => {
                if tape.value(features).rows() != batch * n {
                    return Err(LabError::dim(
                        "mixer",
                        qv.shape(),
                        tape.value(features).shape(),
                    ));
                }
                let (q_tot, trace) = m.forward(tape, store, q, state, features)?;
                Ok(MixOutput {
                    q_tot,
                    trace: Some(trace),
                })
            }
            Mixer::Vdn { .. } => Ok(MixOutput {
                q_tot: tape.sum_last(q)?,
                trace: None,
            }),
            Mixer::Qmix(m) => Ok(MixOutput {
                q_tot: m.forward(tape, store, q, state)?,
                trace: None,
            }),
            Mixer::Independent { .. } => Ok(MixOutput {
                q_tot: q,
                trace: None,
            }),
        }
    }

    /// Evaluates the mixer on a batch of plain inputs and returns one joint
    /// value per row (plus the Qatten record per row).
    pub fn mix_batch(
        &self,
        store: &ParamStore,
        q: &[Vec<f64>],
        states: &[Vec<f64>],
        features: &[Vec<Vec<f64>>],
    ) -> Result<(Vec<f64>, Option<Vec<MixRecord>>)> {
        if self.is_independent() {
            return Err(LabError::UnsupportedMixer(
                "independent learners have no joint value".into(),
            ));
        }
        let n = self.n_agents();
        let batch = q.len();
        if batch == 0 {
            return Err(LabError::contract("empty mixer batch"));
        }
        if states.len() != batch || features.len() != batch {
            return Err(LabError::dim("mix_batch", &[batch], &[states.len(), features.len()]));
        }
        let mut qa = Vec::with_capacity(batch * n);
        let mut sa = Vec::new();
        let mut fa = Vec::new();
        let width = features[0].first().map_or(0, |f| f.len());
        for b in 0..batch {
            if q[b].len() != n || features[b].len() != n {
                return Err(LabError::dim("mix_batch", &[n], &[q[b].len(), features[b].len()]));
            }
            qa.extend_from_slice(&q[b]);
            sa.extend_from_slice(&states[b]);
            for f in &features[b] {
                if f.len() != width {
                    return Err(LabError::dim("mix_batch", &[width], &[f.len()]));
                }
                fa.extend_from_slice(f);
            }
        }
        let s_width = states[0].len();
        let mut tape = Tape::new();
        let qv = tape.input(Array::matrix(batch, n, qa)?)?;
        let sv = tape.input(Array::matrix(batch, s_width, sa)?)?;
        let fv = tape.input(Array::matrix(batch * n, width, fa)?)?;
        let out = self.forward(&mut tape, store, qv, sv, fv)?;
        let values = tape.value(out.q_tot).data().to_vec();
        let records = out
            .trace
            .map(|t| (0..batch).map(|b| t.record(&tape, out.q_tot, b)).collect());
        Ok((values, records))
    }

    pub fn mix_one(
        &self,
        store: &ParamStore,
        q: &[f64],
        state: &[f64],
        features: &[Vec<f64>],
    ) -> Result<f64> {
        let (v, _) = self.mix_batch(
            store,
            &[q.to_vec()],
            &[state.to_vec()],
            &[features.to_vec()],
        )?;
        Ok(v[0])
    }
}

/// Qatten on a single sample: joint value and the full record.
pub fn qatten_mix(
    mixer: &Mixer,
    store: &ParamStore,
    q_agents: &[f64],
    state: &[f64],
    features: &[Vec<f64>],
) -> Result<(f64, MixRecord)> {
    if !mixer.is_qatten() {
        return Err(LabError::UnsupportedMixer("qatten_mix needs a Qatten mixer".into()));
    }
    if q_agents.is_empty() {
        return Err(LabError::contract("qatten_mix needs at least one agent"));
    }
    if q_agents.iter().chain(state).any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("qatten_mix inputs".into()));
    }
    let (v, records) = mixer.mix_batch(
        store,
        &[q_agents.to_vec()],
        &[state.to_vec()],
        &[features.to_vec()],
    )?;
    let record = records.and_then(|mut r| r.pop()).expect("qatten produces a record");
    Ok((v[0], record))
}

pub fn vdn_mix(q_agents: &[f64]) -> Result<f64> {
    if q_agents.is_empty() {
        return Err(LabError::contract("vdn_mix needs at least one agent"));
    }
    Ok(q_agents.iter().sum())
}

/// Central-difference partials of the joint value with respect to each
/// agent utility. Features are passed unchanged; a non-linear Qatten mixer
/// appends the perturbed utility to them internally, so its probe is the
/// total derivative.
pub fn monotonicity_probe(
    mixer: &Mixer,
    store: &ParamStore,
    state: &[f64],
    q_agents: &[f64],
    features: &[Vec<f64>],
    h: f64,
) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(LabError::contract("probe step must be positive"));
    }
    let n = q_agents.len();
    let mut qs = Vec::with_capacity(2 * n);
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut q = q_agents.to_vec();
            q[i] += sign * h;
            qs.push(q);
        }
    }
    let states = vec![state.to_vec(); 2 * n];
    let feats = vec![features.to_vec(); 2 * n];
    let (v, _) = mixer.mix_batch(store, &qs, &states, &feats)?;
    Ok((0..n).map(|i| (v[2 * i] - v[2 * i + 1]) / (2.0 * h)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qatten(weighted: bool, nonlinear: bool, n: usize, seed: u64) -> (Mixer, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = MixerConfig::Qatten(QattenConfig {
            weighted,
            nonlinear,
            ..Default::default()
        });
        let m = Mixer::new(&cfg, n, 5, 3, &mut store, &mut rng, "mixer").unwrap();
        (m, store)
    }

    fn zero_prefix(store: &mut ParamStore, prefix: &str) {
        for p in store.iter_mut() {
            if p.name.starts_with(prefix) {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn feats(n: usize, seed: u64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..3)
                    .map(|k| ((seed as f64 + 1.0) * (i * 3 + k) as f64 * 0.61).sin())
                    .collect()
            })
            .collect()
    }

    const STATE: [f64; 5] = [0.3, -0.7, 0.1, 0.9, -0.2];

    #[test]
    fn uniform_attention_gives_heads_times_mean() {
        let (m, mut store) = qatten(false, false, 3, 1);
        for h in 0..4 {
            zero_prefix(&mut store, &format!("mixer.head{h}.key"));
        }
        zero_prefix(&mut store, "mixer.constant");
        let q = [1.0, 2.5, -0.5];
        let (v, rec) = qatten_mix(&m, &store, &q, &STATE, &feats(3, 0)).unwrap();
        assert!((v - 4.0 * (3.0 / 3.0)).abs() < 1e-12);
        for row in &rec.lambda {
            for l in row {
                assert!((l - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert_eq!(rec.head_weights, vec![1.0; 4]);
    }

    #[test]
    fn zero_head_weights_leave_the_constant() {
        let (m, mut store) = qatten(true, false, 3, 2);
        zero_prefix(&mut store, "mixer.head_weights");
        let (v, rec) = qatten_mix(&m, &store, &[3.0, -1.0, 7.0], &STATE, &feats(3, 1)).unwrap();
        assert_eq!(v, rec.constant);
        assert_eq!(rec.head_weights, vec![0.0; 4]);
    }

    #[test]
    fn single_agent_has_unit_attention() {
        for weighted in [false, true] {
            let (m, store) = qatten(weighted, false, 1, 3);
            let q1 = 2.75;
            let (v, rec) = qatten_mix(&m, &store, &[q1], &STATE, &feats(1, 2)).unwrap();
            assert!(rec.lambda.iter().all(|r| r == &vec![1.0]));
            let wsum: f64 = rec.head_weights.iter().sum();
            assert!((v - (rec.constant + wsum * q1)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_agents_is_a_contract_error() {
        let (m, store) = qatten(false, false, 2, 4);
        assert!(matches!(
            qatten_mix(&m, &store, &[], &STATE, &[]),
            Err(LabError::Contract(_))
        ));
        assert!(matches!(
            qatten_mix(&m, &store, &[f64::NAN, 1.0], &STATE, &feats(2, 0)),
            Err(LabError::NonFinite(_))
        ));
    }

    #[test]
    fn vdn_cases() {
        assert_eq!(vdn_mix(&[1.0, 2.0, 3.0]).unwrap(), 6.0);
        assert_eq!(vdn_mix(&[0.0; 4]).unwrap(), 0.0);
        assert_eq!(vdn_mix(&[3.0, 1.0, 2.0]).unwrap(), vdn_mix(&[1.0, 2.0, 3.0]).unwrap());
        let m = Mixer::Vdn { n_agents: 3 };
        let store = ParamStore::new();
        assert_eq!(m.mix_one(&store, &[1.0, 2.0, 3.0], &[0.0], &feats(3, 0)).unwrap(), 6.0);
    }

    fn qmix(seed: u64) -> (Mixer, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = Mixer::new(
            &MixerConfig::Qmix(QmixConfig::default()),
            3,
            5,
            3,
            &mut store,
            &mut rng,
            "mixer",
        )
        .unwrap();
        (m, store)
    }

    #[test]
    fn qmix_with_summing_hypernet_reduces_to_vdn() {
        let (m, mut store) = qmix(5);
        store.fill(0.0);
        let e = 32;
        store.set("mixer.hyper_w1.bias", &vec![1.0; 3 * e]).unwrap();
        store.set("mixer.hyper_w2.bias", &vec![1.0 / e as f64; e]).unwrap();
        let q = [0.5, 1.25, 2.0];
        let v = m.mix_one(&store, &q, &STATE, &feats(3, 0)).unwrap();
        assert!((v - 3.75).abs() < 1e-12);
    }

    #[test]
    fn qmix_zero_everything_returns_final_bias() {
        let (m, mut store) = qmix(6);
        store.fill(0.0);
        store.set("mixer.value.l2.bias", &[3.7]).unwrap();
        let v = m.mix_one(&store, &[1.0, -2.0, 0.3], &[0.0; 5], &feats(3, 0)).unwrap();
        assert_eq!(v, 3.7);
    }

    #[test]
    fn probe_on_vdn_is_one() {
        let m = Mixer::Vdn { n_agents: 4 };
        let p = monotonicity_probe(
            &m,
            &ParamStore::new(),
            &[0.0],
            &[0.3, -1.0, 2.0, 5.0],
            &feats(4, 0),
            1e-5,
        )
        .unwrap();
        for d in p {
            assert!((d - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn probe_matches_attention_weights() {
        for weighted in [false, true] {
            let (m, store) = qatten(weighted, false, 3, 7);
            let q = [0.4, -1.1, 2.2];
            let f = feats(3, 4);
            let (_, rec) = qatten_mix(&m, &store, &q, &STATE, &f).unwrap();
            let p = monotonicity_probe(&m, &store, &STATE, &q, &f, 1e-5).unwrap();
            for (i, d) in p.iter().enumerate() {
                let expected: f64 = (0..4)
                    .map(|h| rec.head_weights[h] * rec.lambda[h][i])
                    .sum();
                assert!(*d >= -1e-9);
                assert!((d - expected).abs() < 1e-6, "{d} vs {expected}");
            }
        }
    }

    #[test]
    fn one_uniform_head_is_scaled_vdn() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cfg = MixerConfig::Qatten(QattenConfig {
            heads: 1,
            ..Default::default()
        });
        let m = Mixer::new(&cfg, 4, 5, 3, &mut store, &mut rng, "mixer").unwrap();
        zero_prefix(&mut store, "mixer.head0.key");
        zero_prefix(&mut store, "mixer.constant");
        let q = [1.0, -3.0, 0.5, 2.0];
        let v = m.mix_one(&store, &q, &STATE, &feats(4, 3)).unwrap();
        assert!((v - vdn_mix(&q).unwrap() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn qatten_and_qmix_gradients() {
        let configs = [
            MixerConfig::Qatten(QattenConfig {
                heads: 2,
                embed: 4,
                query_hidden: 6,
                constant_hidden: 5,
                weight_hidden: 6,
                weighted: true,
                nonlinear: true,
            }),
            MixerConfig::Qmix(QmixConfig { embed: 4 }),
        ];
        for cfg in configs {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let mut store = ParamStore::new();
            let m = Mixer::new(&cfg, 3, 5, 3, &mut store, &mut rng, "mixer").unwrap();
            let q: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
            let s: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3).sin()).collect();
            let f: Vec<f64> = (0..18).map(|i| (i as f64 * 1.3).sin()).collect();
            let loss = |t: &mut Tape, st: &ParamStore| -> Result<Var> {
                let qv = t.input(Array::matrix(2, 3, q.clone())?)?;
                let sv = t.input(Array::matrix(2, 5, s.clone())?)?;
                let fv = t.input(Array::matrix(6, 3, f.clone())?)?;
                let out = m.forward(t, st, qv, sv, fv)?;
                let sq = t.square(out.q_tot)?;
                t.sum_all(sq)
            };
            let r = grad_check(loss, &store, 1e-6, 1e-4).unwrap();
            assert!(r.passed, "{cfg:?}: {r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lambda_rows_are_distributions(
            seed in 0u64..1000,
            q in proptest::collection::vec(-10.0f64..10.0, 3),
            state in proptest::collection::vec(-5.0f64..5.0, 5),
        ) {
            let (m, store) = qatten(seed % 2 == 0, seed % 3 == 0, 3, seed);
            let (_, rec) = qatten_mix(&m, &store, &q, &state, &feats(3, seed)).unwrap();
            for row in &rec.lambda {
                prop_assert!(row.iter().all(|l| *l >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            prop_assert!(rec.head_weights.iter().all(|w| *w >= 0.0));
        }

        #[test]
        fn qatten_is_permutation_equivariant(
            seed in 0u64..1000,
            q in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let (m, store) = qatten(seed % 2 == 1, seed % 4 == 0, 3, seed);
            let f = feats(3, seed);
            let v = m.mix_one(&store, &q, &STATE, &f).unwrap();
            let perm = [2usize, 0, 1];
            let qp: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
            let fp: Vec<Vec<f64>> = perm.iter().map(|&i| f[i].clone()).collect();
            let vp = m.mix_one(&store, &qp, &STATE, &fp).unwrap();
            prop_assert!((v - vp).abs() < 1e-9);
        }
    }
}
