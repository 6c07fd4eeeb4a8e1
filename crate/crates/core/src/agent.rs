//! Recurrent per-agent utility network and ε-greedy action selection.
//!
//! Each agent maps `(observation, previous action one-hot, [agent id
//! one-hot])` through `fc(64) -> relu -> GRU(64) -> fc(actions)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grad::nn::{BoundGru, BoundLinear, GruCell, Linear};
use crate::grad::{Array, ParamStore, Tape, Var};

/// Utility written into unavailable action slots before any argmax.
pub const MASKED_UTILITY: f64 = -1e10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentNetConfig {
    pub n_agents: usize,
    pub obs_width: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub share_params: bool,
    pub agent_id: bool,
}

impl AgentNetConfig {
    pub fn new(n_agents: usize, obs_width: usize, n_actions: usize) -> Self {
        AgentNetConfig {
            n_agents,
            obs_width,
            n_actions,
            hidden: 64,
            share_params: true,
            agent_id: true,
        }
    }

    pub fn input_width(&self) -> usize {
        self.obs_width + self.n_actions + if self.agent_id { self.n_agents } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.n_actions == 0 || self.hidden == 0 {
            return Err(LabError::Config {
                key: "agent".into(),
                reason: "agent count, action count and hidden width must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Local view of one agent: features plus the availability mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub features: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Recurrent state for a batch of agent rows, `[rows, hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Array);

impl HiddenState {
    pub fn zeros(rows: usize, width: usize) -> Self {
        HiddenState(Array::zeros(&[rows, width]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AgentCore {
    fc1: Linear,
    gru: GruCell,
    fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct BoundCore {
    fc1: BoundLinear,
    gru: BoundGru,
    fc2: BoundLinear,
}

impl BoundCore {
    fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<(Var, Var)> {
        let e = self.fc1.forward(tape, x)?;
        let e = tape.relu(e)?;
        let h = self.gru.step(tape, e, h)?;
        let q = self.fc2.forward(tape, h)?;
        Ok((q, h))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentNet {
    pub config: AgentNetConfig,
    cores: Vec<AgentCore>,
}

/// Agent network parameters bound to a tape, ready for repeated steps.
pub struct BoundAgents {
    cores: Vec<BoundCore>,
    n_agents: usize,
    hidden: usize,
}

impl AgentNet {
    /// Registers parameters under `prefix` (`prefix.fc1.weight`, ... or
    /// `prefix.3.fc1.weight` when agents do not share parameters).
    pub fn new<R: Rng>(
        config: AgentNetConfig,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        let copies = if config.share_params { 1 } else { config.n_agents };
        let mut cores = Vec::with_capacity(copies);
        for k in 0..copies {
            let p = if config.share_params {
                prefix.to_string()
            } else {
                format!("{prefix}.{k}")
            };
            let h = config.hidden;
            cores.push(AgentCore {
                fc1: Linear::new(store, rng, &format!("{p}.fc1"), config.input_width(), h, true)?,
                gru: GruCell::new(store, rng, &format!("{p}.gru"), h, h)?,
                fc2: Linear::new(store, rng, &format!("{p}.fc2"), h, config.n_actions, true)?,
            });
        }
        Ok(AgentNet { config, cores })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundAgents {
        let cores = self
            .cores
            .iter()
            .map(|c| BoundCore {
                fc1: c.fc1.bind(tape, store),
                gru: c.gru.bind(tape, store),
                fc2: c.fc2.bind(tape, store),
            })
            .collect();
        BoundAgents {
            cores,
            n_agents: self.config.n_agents,
            hidden: self.config.hidden,
        }
    }

    /// Writes one input row: observation, previous action one-hot (all
    /// zeros when `last_action` is `None`), agent id one-hot.
    pub fn write_input(
        &self,
        out: &mut Vec<f64>,
        obs: &[f64],
        last_action: Option<usize>,
        agent: usize,
    ) -> Result<()> {
        let c = &self.config;
        if obs.len() != c.obs_width {
            return Err(LabError::dim("agent_input", &[c.obs_width], &[obs.len()]));
        }
        if agent >= c.n_agents {
            return Err(LabError::contract(format!("agent id {agent} out of range")));
        }
        out.extend_from_slice(obs);
        let start = out.len();
        out.resize(start + c.n_actions, 0.0);
        if let Some(a) = last_action {
            if a >= c.n_actions {
                return Err(LabError::contract(format!("last action {a} out of range")));
            }
            out[start + a] = 1.0;
        }
        if c.agent_id {
            let start = out.len();
            out.resize(start + c.n_agents, 0.0);
            out[start + agent] = 1.0;
        }
        Ok(())
    }

    /// Single-agent step outside of training: returns utilities over the
    /// agent's actions and the advanced hidden state (`[1, hidden]`).
    pub fn agent_forward(
        &self,
        store: &ParamStore,
        obs: &AgentObservation,
        last_action: Option<usize>,
        hidden: &HiddenState,
        agent: usize,
    ) -> Result<(Vec<f64>, HiddenState)> {
        if hidden.0.shape() != [1, self.config.hidden] {
            return Err(LabError::dim(
                "agent_forward",
                hidden.0.shape(),
                &[1, self.config.hidden],
            ));
        }
        let mut row = Vec::with_capacity(self.config.input_width());
        self.write_input(&mut row, &obs.features, last_action, agent)?;
        let mut tape = Tape::new();
        let core = if self.config.share_params {
            &self.cores[0]
        } else {
            &self.cores[agent]
        };
        let bound = BoundCore {
            fc1: core.fc1.bind(&mut tape, store),
            gru: core.gru.bind(&mut tape, store),
            fc2: core.fc2.bind(&mut tape, store),
        };
        let x = tape.input(Array::matrix(1, row.len(), row)?)?;
        let h = tape.input(hidden.0.clone())?;
        let (q, h) = bound.step(&mut tape, x, h)?;
        Ok((
            tape.value(q).data().to_vec(),
            HiddenState(tape.value(h).clone()),
        ))
    }
}

impl BoundAgents {
    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    /// One step for `rows = batch * n_agents` rows ordered batch-major
    /// (row `b * n_agents + i` belongs to agent `i`).
    pub fn step(&self, tape: &mut Tape, inputs: Var, hidden: Var) -> Result<(Var, Var)> {
        if self.cores.len() == 1 {
            return self.cores[0].step(tape, inputs, hidden);
        }
        let rows = tape.value(inputs).rows();
        let n = self.n_agents;
        if !rows.is_multiple_of(n) {
            return Err(LabError::dim("agent_step", &[rows], &[n]));
        }
        let batch = rows / n;
        let mut qs = Vec::with_capacity(n);
        let mut hs = Vec::with_capacity(n);
        for (i, core) in self.cores.iter().enumerate() {
            let idx: Vec<usize> = (0..batch).map(|b| b * n + i).collect();
            let x = tape.gather_rows(inputs, &idx)?;
            let h = tape.gather_rows(hidden, &idx)?;
            let (q, h) = core.step(tape, x, h)?;
            qs.push(q);
            hs.push(h);
        }
        // stacked agent-major; restore batch-major order
        let back: Vec<usize> = (0..rows).map(|r| (r % n) * batch + r / n).collect();
        let q = tape.concat_rows(&qs)?;
        let q = tape.gather_rows(q, &back)?;
        let h = tape.concat_rows(&hs)?;
        let h = tape.gather_rows(h, &back)?;
        Ok((q, h))
    }
}

/// Utilities with unavailable entries replaced by [`MASKED_UTILITY`].
pub fn masked_utilities(q: &[f64], mask: &[bool]) -> Vec<f64> {
    q.iter()
        .zip(mask)
        .map(|(v, &ok)| if ok { *v } else { MASKED_UTILITY })
        .collect()
}

/// Index of the largest available utility; ties go to the lowest index.
pub fn greedy_action(q: &[f64], mask: &[bool]) -> Result<usize> {
    if q.len() != mask.len() {
        return Err(LabError::dim("greedy_action", &[q.len()], &[mask.len()]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(LabError::contract("no available action"));
    }
    let masked = masked_utilities(q, mask);
    let mut best = 0;
    for (i, v) in masked.iter().enumerate() {
        if *v > masked[best] {
            best = i;
        }
    }
    Ok(best)
}

/// ε-greedy choice over available actions. One uniform draw decides
/// exploration; exploring draws a second uniform index over the available
/// set.
pub fn select_action<R: Rng>(q: &[f64], mask: &[bool], epsilon: f64, rng: &mut R) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(LabError::contract(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let greedy = greedy_action(q, mask)?;
    if rng.gen::<f64>() < epsilon {
        let avail: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        Ok(avail[rng.gen_range(0..avail.len())])
    } else {
        Ok(greedy)
    }
}
