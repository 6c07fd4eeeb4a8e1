use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MixTrace;
use crate::error::{LabError, Result};
use crate::grad::nn::{Linear, Mlp2};
use crate::grad::{ParamStore, Tape, Var};

/// Widths default to the reference mixing-network configuration: 4 heads,
/// query embedding 64 (relu) -> 32, key embedding 32, constant network
/// 32 (relu) -> 1, head-weight network 64 (relu) -> heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QattenConfig {
    pub heads: usize,
    pub embed: usize,
    pub query_hidden: usize,
    pub constant_hidden: usize,
    pub weight_hidden: usize,
    /// Scale head values by `|f(s)|_h`.
    pub weighted: bool,
    /// Append each agent's utility to its key features.
    pub nonlinear: bool,
}

impl Default for QattenConfig {
    fn default() -> Self {
        QattenConfig {
            heads: 4,
            embed: 32,
            query_hidden: 64,
            constant_hidden: 32,
            weight_hidden: 64,
            weighted: false,
            nonlinear: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Head {
    query: Mlp2,
    key: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QattenMixer {
    pub config: QattenConfig,
    pub n_agents: usize,
    heads: Vec<Head>,
    constant: Mlp2,
    head_weights: Option<Mlp2>,
}

impl QattenMixer {
    pub fn new<R: Rng>(
        config: QattenConfig,
        n_agents: usize,
        state_width: usize,
        feature_width: usize,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self> {
        if config.heads == 0 || config.embed == 0 {
            return Err(LabError::Config {
                key: "mixer.heads".into(),
                reason: "need at least one head and a positive embedding width".into(),
            });
        }
        let key_width = feature_width + usize::from(config.nonlinear);
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            heads.push(Head {
                query: Mlp2::new(
                    store,
                    rng,
                    &format!("{prefix}.head{h}.query"),
                    state_width,
                    config.query_hidden,
                    config.embed,
                )?,
                // a key bias adds the same logit to every agent and cancels
                // in the softmax
                key: Linear::new(
                    store,
                    rng,
                    &format!("{prefix}.head{h}.key"),
                    key_width,
                    config.embed,
                    false,
                )?,
            });
        }
        let constant = Mlp2::new(
            store,
            rng,
            &format!("{prefix}.constant"),
            state_width,
            config.constant_hidden,
            1,
        )?;
        let head_weights = if config.weighted {
            Some(Mlp2::new(
                store,
                rng,
                &format!("{prefix}.head_weights"),
                state_width,
                config.weight_hidden,
                config.heads,
            )?)
        } else {
            None
        };
        Ok(QattenMixer {
            config,
            n_agents,
            heads,
            constant,
            head_weights,
        })
    }

    /// `q [B, N]`, `state [B, S]`, `features [B*N, F]` (agent-minor rows).
    ///
    /// `lambda_h = softmax_i(<key_h(f_i), query_h(s)>)` (plain dot product),
    /// `q_tot = c(s) + sum_h w_h sum_i lambda_{i,h} q_i`, with `w_h = 1`
    /// unless the mixer is weighted.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        state: Var,
        features: Var,
    ) -> Result<(Var, MixTrace)> {
        let n = self.n_agents;
        let batch = tape.value(q).rows();
        let keys_in = if self.config.nonlinear {
            let qcol = tape.reshape(q, &[batch * n, 1])?;
            tape.concat_cols(&[features, qcol])?
        } else {
            features
        };
        let weights = match &self.head_weights {
            Some(net) => {
                let raw = net.forward(tape, store, state)?;
                Some(tape.abs(raw)?)
            }
            None => None,
        };

        let mut lambdas = Vec::with_capacity(self.heads.len());
        let mut head_values = Vec::with_capacity(self.heads.len());
        let mut total: Option<Var> = None;
        for (h, head) in self.heads.iter().enumerate() {
            let query = head.query.forward(tape, store, state)?;
            let keys = head.key.forward(tape, store, keys_in)?;
            let query = tape.repeat_rows(query, n)?;
            let prod = tape.mul(keys, query)?;
            let logits = tape.sum_last(prod)?;
            let logits = tape.reshape(logits, &[batch, n])?;
            let lambda = tape.softmax(logits)?;
            let weighted_q = tape.mul(lambda, q)?;
            let qh = tape.sum_last(weighted_q)?;
            let contribution = match weights {
                Some(w) => {
                    let wh = tape.slice_cols(w, h, 1)?;
                    let wh = tape.reshape(wh, &[batch])?;
                    tape.mul(qh, wh)?
                }
                None => qh,
            };
            total = Some(match total {
                Some(t) => tape.add(t, contribution)?,
                None => contribution,
            });
            lambdas.push(lambda);
            head_values.push(qh);
        }
        let c = self.constant.forward(tape, store, state)?;
        let c = tape.reshape(c, &[batch])?;
        let q_tot = tape.add(c, total.expect("at least one head"))?;
        Ok((
            q_tot,
            MixTrace {
                lambdas,
                head_values,
                weights,
                constant: c,
            },
        ))
    }
}
