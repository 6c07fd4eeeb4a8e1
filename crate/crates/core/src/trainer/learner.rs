use serde::{Deserialize, Serialize};

use super::episode::Episode;
use crate::agent::{greedy_action, AgentNet};
use crate::error::{LabError, Result};
use crate::grad::{Array, ParamStore, RmsProp, Tape, Var};
use crate::mixers::Mixer;

/// Online and target copies of the agent network and mixer, which share
/// one parameter namespace (`agent.*`, `mixer.*`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub agent: AgentNet,
    pub mixer: Mixer,
    pub params: ParamStore,
    pub target: ParamStore,
    pub optim: RmsProp,
    pub gamma: f64,
    pub grad_clip: f64,
}

/// Time-major batch layout shared by the online and target passes:
/// row `t * B + b` is step `t` of episode `b`.
struct Batch<'a> {
    episodes: &'a [&'a Episode],
    steps: usize,
    n: usize,
}

impl<'a> Batch<'a> {
    fn new(episodes: &'a [&'a Episode]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| LabError::contract("empty training batch"))?;
        if episodes.iter().any(|e| {
            e.n_agents != first.n_agents
                || e.obs_width != first.obs_width
                || e.n_actions != first.n_actions
                || e.state_width != first.state_width
        }) {
            return Err(LabError::contract("episodes in a batch must share one layout"));
        }
        Ok(Batch {
            steps: episodes.iter().map(|e| e.len()).max().unwrap_or(0),
            n: first.n_agents,
            episodes,
        })
    }

    fn b(&self) -> usize {
        self.episodes.len()
    }

    fn first(&self) -> &Episode {
        self.episodes[0]
    }

    /// Agent-net inputs for slot `t` (`t == len` is the bootstrap slot;
    /// later slots are zero padding).
    fn agent_inputs(&self, agent: &AgentNet, t: usize) -> Result<Array> {
        let width = agent.config.input_width();
        let mut rows = Vec::with_capacity(self.b() * self.n * width);
        for e in self.episodes {
            for i in 0..self.n {
                if t <= e.len() {
                    agent.write_input(&mut rows, e.obs_at(t, i), e.last_action(t, i), i)?;
                } else {
                    rows.resize(rows.len() + width, 0.0);
                }
            }
        }
        Array::matrix(self.b() * self.n, width, rows)
    }

    /// Global states `[T*B, S]` and agent features `[T*B*N, F]` for slots
    /// `offset..offset + steps`.
    fn mixer_inputs(&self, offset: usize) -> Result<(Array, Array)> {
        let (s, f) = (self.first().state_width, self.first().obs_width);
        let rows = self.steps * self.b();
        let mut states = Vec::with_capacity(rows * s);
        let mut feats = Vec::with_capacity(rows * self.n * f);
        for t in offset..offset + self.steps {
            for e in self.episodes {
                if t <= e.len() {
                    states.extend_from_slice(e.state_at(t));
                    for i in 0..self.n {
                        feats.extend_from_slice(e.obs_at(t, i));
                    }
                } else {
                    states.resize(states.len() + s, 0.0);
                    feats.resize(feats.len() + self.n * f, 0.0);
                }
            }
        }
        Ok((
            Array::matrix(rows, s, states)?,
            Array::matrix(rows * self.n, f, feats)?,
        ))
    }
}

impl Learner {
    pub fn new(agent: AgentNet, mixer: Mixer, params: ParamStore, optim: RmsProp, gamma: f64, grad_clip: f64) -> Self {
        Learner {
            agent,
            mixer,
            target: params.clone(),
            params,
            optim,
            gamma,
            grad_clip,
        }
    }

    pub fn update_target(&mut self) -> Result<()> {
        self.target.copy_values_from(&self.params)
    }

    /// TD targets `y` and the validity mask, flattened like the mixer
    /// output (`[T*B]`, or `[T*B*N]` for independent learners).
    fn targets(&self, batch: &Batch) -> Result<(Vec<f64>, Vec<f64>)> {
        let (b, n, steps) = (batch.b(), batch.n, batch.steps);
        let mut tape = Tape::new();
        let bound = self.agent.bind(&mut tape, &self.target);
        let mut h = tape.input(Array::zeros(&[b * n, self.agent.config.hidden]))?;
        // greedy target utilities for slots 1..=steps, time-major [T*B, N]
        let mut next_q = vec![0.0; steps * b * n];
        for t in 0..=steps {
            let x = tape.input(batch.agent_inputs(&self.agent, t)?)?;
            let (q, h2) = bound.step(&mut tape, x, h)?;
            h = h2;
            if t == 0 {
                continue;
            }
            let qv = tape.value(q);
            for (bi, e) in batch.episodes.iter().enumerate() {
                if t > e.len() {
                    continue;
                }
                for i in 0..n {
                    let row = qv.row(bi * n + i);
                    let a = greedy_action(row, e.mask_at(t, i))?;
                    next_q[((t - 1) * b + bi) * n + i] = row[a];
                }
            }
        }
        let per_agent = self.mixer.is_independent();
        let bootstrap = if per_agent {
            next_q
        } else {
            let (states, feats) = batch.mixer_inputs(1)?;
            let mut tape = Tape::new();
            let qv = tape.input(Array::matrix(steps * b, n, next_q)?)?;
            let sv = tape.input(states)?;
            let fv = tape.input(feats)?;
            let out = self.mixer.forward(&mut tape, &self.target, qv, sv, fv)?;
            tape.value(out.q_tot).data().to_vec()
        };
        let width = if per_agent { n } else { 1 };
        let mut y = vec![0.0; steps * b * width];
        let mut mask = vec![0.0; steps * b * width];
        for t in 0..steps {
            for (bi, e) in batch.episodes.iter().enumerate() {
                if t >= e.len() {
                    continue;
                }
                let cont = if e.done(t) { 0.0 } else { self.gamma };
                for k in 0..width {
                    let idx = (t * b + bi) * width + k;
                    y[idx] = e.rewards[t] + cont * bootstrap[idx];
                    mask[idx] = 1.0;
                }
            }
        }
        Ok((y, mask))
    }

    /// Masked mean squared TD error on `tape`, differentiable with respect
    /// to the online parameters only.
    pub fn loss_on(&self, tape: &mut Tape, episodes: &[&Episode]) -> Result<Var> {
        let batch = Batch::new(episodes)?;
        let (b, n, steps) = (batch.b(), batch.n, batch.steps);
        let (y, mask) = self.targets(&batch)?;
        let valid: f64 = mask.iter().sum();
        if valid == 0.0 {
            return Err(LabError::contract("training batch has no transitions"));
        }

        let bound = self.agent.bind(tape, &self.params);
        let mut h = tape.input(Array::zeros(&[b * n, self.agent.config.hidden]))?;
        let mut chosen = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = tape.input(batch.agent_inputs(&self.agent, t)?)?;
            let (q, h2) = bound.step(tape, x, h)?;
            h = h2;
            let actions: Vec<usize> = batch
                .episodes
                .iter()
                .flat_map(|e| (0..n).map(move |i| if t < e.len() { e.action(t, i) } else { 0 }))
                .collect();
            let picked = tape.pick_cols(q, &actions)?;
            chosen.push(tape.reshape(picked, &[b, n])?);
        }
        let q = tape.concat_rows(&chosen)?;
        let (states, feats) = batch.mixer_inputs(0)?;
        let sv = tape.input(states)?;
        let fv = tape.input(feats)?;
        let out = self.mixer.forward(tape, &self.params, q, sv, fv)?;
        let shape = tape.value(out.q_tot).shape().to_vec();
        let yv = tape.input(Array::new(shape.clone(), y)?)?;
        let mv = tape.input(Array::new(shape, mask)?)?;
        let err = tape.sub(out.q_tot, yv)?;
        let sq = tape.square(err)?;
        let masked = tape.mul(sq, mv)?;
        let total = tape.sum_all(masked)?;
        tape.scale(total, 1.0 / valid)
    }

    pub fn td_loss(&self, episodes: &[&Episode]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss_on(&mut tape, episodes)?;
        Ok(tape.value(loss).data()[0])
    }

    /// One optimizer step on the batch; returns the pre-update loss.
    pub fn train_step(&mut self, episodes: &[&Episode]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss_on(&mut tape, episodes)?;
        let value = tape.value(loss).data()[0];
        self.params.zero_grad();
        tape.backward(loss, &mut self.params)?;
        self.params.clip_grad_norm(self.grad_clip);
        self.optim.step(&mut self.params)?;
        Ok(value)
    }
}
