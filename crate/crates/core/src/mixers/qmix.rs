use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grad::nn::{Linear, Mlp2};
use crate::grad::{Activation, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QmixConfig {
    pub embed: usize,
}

impl Default for QmixConfig {
    fn default() -> Self {
        QmixConfig { embed: 32 }
    }
}

/// Monotonic two-layer mixing network whose weights come from
/// state-conditioned hypernetworks:
///
/// ```text
/// hidden = elu(q · |W1(s)| + b1(s))
/// q_tot  = hidden · |w2(s)| + V(s)
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmixMixer {
    pub config: QmixConfig,
    pub n_agents: usize,
    hyper_w1: Linear,
    hyper_b1: Linear,
    hyper_w2: Linear,
    value: Mlp2,
}

impl QmixMixer {
    pub fn new<R: Rng>(
        config: QmixConfig,
        n_agents: usize,
        state_width: usize,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self> {
        let e = config.embed;
        Ok(QmixMixer {
            hyper_w1: Linear::new(
                store,
                rng,
                &format!("{prefix}.hyper_w1"),
                state_width,
                n_agents * e,
                true,
            )?,
            hyper_b1: Linear::new(store, rng, &format!("{prefix}.hyper_b1"), state_width, e, true)?,
            hyper_w2: Linear::new(store, rng, &format!("{prefix}.hyper_w2"), state_width, e, true)?,
            value: Mlp2::new(store, rng, &format!("{prefix}.value"), state_width, e, 1)?,
            config,
            n_agents,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var, state: Var) -> Result<Var> {
        let batch = tape.value(q).rows();
        let w1 = self.hyper_w1.forward(tape, store, state)?;
        let w1 = tape.abs(w1)?;
        let b1 = self.hyper_b1.forward(tape, store, state)?;
        let hidden = tape.row_vec_mat(q, w1)?;
        let hidden = tape.add(hidden, b1)?;
        let hidden = tape.activation(Activation::Elu, hidden)?;
        let w2 = self.hyper_w2.forward(tape, store, state)?;
        let w2 = tape.abs(w2)?;
        let out = tape.mul(hidden, w2)?;
        let out = tape.sum_last(out)?;
        let v = self.value.forward(tape, store, state)?;
        let v = tape.reshape(v, &[batch])?;
        tape.add(out, v)
    }
}
