use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{select_action, AgentNet, AgentObservation};
use crate::envs::EnvSpec;
use crate::error::{LabError, Result};
use crate::grad::{Array, ParamStore, Tape};

/// One recorded trajectory. Observation, mask and state slots hold
/// `len + 1` entries: the final slot is the state reached by the last
/// transition and is used only for bootstrapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub n_agents: usize,
    pub obs_width: usize,
    pub n_actions: usize,
    pub state_width: usize,
    /// Environment reset seed; with `actions` it determines everything else.
    pub seed: u64,
    pub obs: Vec<f64>,
    pub masks: Vec<bool>,
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// The last transition reached a true terminal state (not the limit).
    pub terminated: bool,
    pub win: bool,
}

impl Episode {
    fn new(env: &EnvSpec, seed: u64) -> Self {
        Episode {
            seed,
            n_agents: env.n_agents(),
            obs_width: env.obs_width(),
            n_actions: env.n_actions(),
            state_width: env.state_width(),
            obs: Vec::new(),
            masks: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: false,
            win: false,
        }
    }

    fn push_view(&mut self, observations: &[AgentObservation], state: &[f64]) {
        for o in observations {
            self.obs.extend_from_slice(&o.features);
            self.masks.extend_from_slice(&o.mask);
        }
        self.states.extend_from_slice(state);
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn obs_at(&self, t: usize, agent: usize) -> &[f64] {
        let start = (t * self.n_agents + agent) * self.obs_width;
        &self.obs[start..start + self.obs_width]
    }

    pub fn mask_at(&self, t: usize, agent: usize) -> &[bool] {
        let start = (t * self.n_agents + agent) * self.n_actions;
        &self.masks[start..start + self.n_actions]
    }

    pub fn state_at(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_width..(t + 1) * self.state_width]
    }

    pub fn action(&self, t: usize, agent: usize) -> usize {
        self.actions[t * self.n_agents + agent]
    }

    pub fn last_action(&self, t: usize, agent: usize) -> Option<usize> {
        (t > 0).then(|| self.action(t - 1, agent))
    }

    /// Transition `t` ends in a true terminal state: no bootstrapping.
    pub fn done(&self, t: usize) -> bool {
        self.terminated && t + 1 == self.len()
    }
}

/// Runs one episode from `reset(seed)`, asking `choose` for a joint action
/// at each step.
pub fn rollout<F>(env: &EnvSpec, seed: u64, mut choose: F) -> Result<Episode>
where
    F: FnMut(&[AgentObservation]) -> Result<Vec<usize>>,
{
    let (mut state, mut view) = env.reset(seed);
    let mut ep = Episode::new(env, seed);
    ep.push_view(&view.observations, &view.state);
    loop {
        let joint = choose(&view.observations)?;
        view = env.step(&mut state, &joint)?;
        ep.actions.extend_from_slice(&joint);
        ep.rewards.push(view.reward);
        ep.push_view(&view.observations, &view.state);
        if view.terminal {
            ep.terminated = !view.truncated;
            ep.win = view.win;
            return Ok(ep);
        }
    }
}

/// Rebuilds an episode from its seed and joint actions.
pub fn replay(env: &EnvSpec, seed: u64, actions: &[usize]) -> Result<Episode> {
    let n = env.n_agents();
    let mut chunks = actions.chunks(n.max(1));
    let ep = rollout(env, seed, |_| {
        chunks
            .next()
            .map(<[usize]>::to_vec)
            .ok_or_else(|| LabError::contract("recorded actions end before the episode"))
    })?;
    if ep.actions.len() != actions.len() {
        return Err(LabError::contract("recorded actions outlast the episode"));
    }
    Ok(ep)
}

/// Decentralized per-step policy state: each agent's recurrent state and
/// previous action, fed only with that agent's own observation.
pub struct AgentRunner<'a> {
    agent: &'a AgentNet,
    params: &'a ParamStore,
    hidden: Array,
    last: Vec<Option<usize>>,
}

impl<'a> AgentRunner<'a> {
    pub fn new(agent: &'a AgentNet, params: &'a ParamStore) -> Self {
        let n = agent.config.n_agents;
        AgentRunner {
            agent,
            params,
            hidden: Array::zeros(&[n, agent.config.hidden]),
            last: vec![None; n],
        }
    }

    /// Utilities for every agent, advancing the hidden states.
    pub fn utilities(&mut self, observations: &[AgentObservation]) -> Result<Vec<Vec<f64>>> {
        let n = self.agent.config.n_agents;
        if observations.len() != n {
            return Err(LabError::dim("agent_runner", &[observations.len()], &[n]));
        }
        let mut rows = Vec::with_capacity(n * self.agent.config.input_width());
        for (i, o) in observations.iter().enumerate() {
            self.agent.write_input(&mut rows, &o.features, self.last[i], i)?;
        }
        let mut tape = Tape::new();
        let bound = self.agent.bind(&mut tape, self.params);
        let x = tape.input(Array::matrix(n, self.agent.config.input_width(), rows)?)?;
        let h = tape.input(self.hidden.clone())?;
        let (q, h) = bound.step(&mut tape, x, h)?;
        self.hidden = tape.value(h).clone();
        let qv = tape.value(q);
        Ok((0..n).map(|i| qv.row(i).to_vec()).collect())
    }

    pub fn record(&mut self, joint: &[usize]) {
        for (l, &a) in self.last.iter_mut().zip(joint) {
            *l = Some(a);
        }
    }
}

/// ε-greedy episode with the current agent parameters.
pub fn collect_episode<R: Rng>(
    agent: &AgentNet,
    params: &ParamStore,
    env: &EnvSpec,
    seed: u64,
    epsilon: f64,
    rng: &mut R,
) -> Result<Episode> {
    let mut runner = AgentRunner::new(agent, params);
    rollout(env, seed, |obs| {
        let q = runner.utilities(obs)?;
        let joint = q
            .iter()
            .zip(obs)
            .map(|(q, o)| select_action(q, &o.mask, epsilon, rng))
            .collect::<Result<Vec<_>>>()?;
        runner.record(&joint);
        Ok(joint)
    })
}

/// FIFO ring of the most recent episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(LabError::contract("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(1024)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn insert(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn get(&self, i: usize) -> &Episode {
        &self.episodes[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// `size` distinct episodes drawn uniformly.
    pub fn sample<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Vec<&Episode>> {
        if size == 0 || size > self.len() {
            return Err(LabError::contract(format!(
                "cannot sample {size} episodes from {}",
                self.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.len(), size)
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect())
    }
}
