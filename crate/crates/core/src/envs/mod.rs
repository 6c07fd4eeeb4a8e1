//! Cooperative shared-reward environments and their exact optimality
//! oracles.

mod matrix;
mod skirmish;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use matrix::{MatrixGame, Mode, TwoStepGame};
pub use skirmish::{Roster, SeedPolicy, Skirmish, SkirmishConfig, TeamConfig, Unit};

use crate::agent::AgentObservation;
use crate::error::{LabError, Result};

/// Joint state-action entries the oracle may visit.
pub const ORACLE_LIMIT: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnvKind {
    Matrix(MatrixGame),
    TwoStep(TwoStepGame),
    Skirmish(Skirmish),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Inner {
    Matrix,
    TwoStep { mode: Option<Mode> },
    Skirmish(Roster),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub step: usize,
    pub done: bool,
    pub inner: Inner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub reward: f64,
    pub observations: Vec<AgentObservation>,
    pub state: Vec<f64>,
    /// The episode is over (win, loss, or time limit).
    pub terminal: bool,
    /// The episode ended only because the step limit was reached.
    pub truncated: bool,
    pub win: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    /// Greedy optimal joint actions from the initial state.
    pub policy: Vec<Vec<usize>>,
}

impl EnvSpec {
    pub fn n_agents(&self) -> usize {
        match &self.kind {
            EnvKind::Matrix(g) => g.actions.len(),
            EnvKind::TwoStep(g) => g.actions.len(),
            EnvKind::Skirmish(s) => s.config.allies.count,
        }
    }

    /// Per-agent action counts.
    pub fn action_counts(&self) -> Vec<usize> {
        match &self.kind {
            EnvKind::Matrix(g) => g.actions.clone(),
            EnvKind::TwoStep(g) => g.actions.clone(),
            EnvKind::Skirmish(s) => vec![s.n_actions(); s.config.allies.count],
        }
    }

    /// Width of the shared action head: the largest per-agent count.
    pub fn n_actions(&self) -> usize {
        self.action_counts().into_iter().max().unwrap_or(0)
    }

    pub fn obs_width(&self) -> usize {
        match &self.kind {
            EnvKind::Matrix(g) => g.actions.len(),
            EnvKind::TwoStep(g) => g.actions.len() + 2,
            EnvKind::Skirmish(s) => s.obs_width(),
        }
    }

    pub fn state_width(&self) -> usize {
        match &self.kind {
            EnvKind::Matrix(_) => 1,
            EnvKind::TwoStep(_) => 3,
            EnvKind::Skirmish(s) => s.state_width(),
        }
    }

    pub fn episode_limit(&self) -> usize {
        match &self.kind {
            EnvKind::Matrix(_) => 1,
            EnvKind::TwoStep(_) => 2,
            EnvKind::Skirmish(s) => s.config.limit,
        }
    }

    /// Discount the environment file recommends, if it carries one.
    pub fn gamma(&self) -> Option<f64> {
        match &self.kind {
            EnvKind::TwoStep(g) => Some(g.gamma),
            _ => None,
        }
    }

    pub fn reset(&self, seed: u64) -> (EnvState, StepResult) {
        let inner = match &self.kind {
            EnvKind::Matrix(_) => Inner::Matrix,
            EnvKind::TwoStep(_) => Inner::TwoStep { mode: None },
            EnvKind::Skirmish(s) => Inner::Skirmish(s.spawn(seed)),
        };
        let state = EnvState {
            step: 0,
            done: false,
            inner,
        };
        let result = self.result(&state, 0.0, false);
        (state, result)
    }

    pub fn masks(&self, state: &EnvState) -> Vec<Vec<bool>> {
        let width = self.n_actions();
        match (&self.kind, &state.inner) {
            (EnvKind::Skirmish(s), Inner::Skirmish(r)) => s.masks(r),
            _ => self
                .action_counts()
                .iter()
                .map(|&k| (0..width).map(|a| a < k).collect())
                .collect(),
        }
    }

    fn observations(&self, state: &EnvState) -> Vec<Vec<f64>> {
        let n = self.n_agents();
        let one_hot = |i: usize, extra: usize| {
            let mut v = vec![0.0; n + extra];
            v[i] = 1.0;
            v
        };
        match (&self.kind, &state.inner) {
            (EnvKind::Matrix(_), _) => (0..n).map(|i| one_hot(i, 0)).collect(),
            (EnvKind::TwoStep(_), _) => (0..n)
                .map(|i| {
                    let mut v = one_hot(i, 2);
                    v[n + state.step.min(1)] = 1.0;
                    v
                })
                .collect(),
            (EnvKind::Skirmish(s), Inner::Skirmish(r)) => s.observations(r),
            _ => unreachable!("state kind matches spec kind"),
        }
    }

    fn global_state(&self, state: &EnvState) -> Vec<f64> {
        match (&self.kind, &state.inner) {
            (EnvKind::Matrix(_), _) => vec![1.0],
            (EnvKind::TwoStep(_), Inner::TwoStep { mode }) => vec![
                if state.step == 0 { 1.0 } else { 0.0 },
                if *mode == Some(Mode::A) { 1.0 } else { 0.0 },
                if *mode == Some(Mode::B) { 1.0 } else { 0.0 },
            ],
            (EnvKind::Skirmish(s), Inner::Skirmish(r)) => s.state_vector(r),
            _ => unreachable!("state kind matches spec kind"),
        }
    }

    fn result(&self, state: &EnvState, reward: f64, win: bool) -> StepResult {
        let masks = self.masks(state);
        let observations = self
            .observations(state)
            .into_iter()
            .zip(masks)
            .map(|(features, mask)| AgentObservation { features, mask })
            .collect();
        StepResult {
            reward,
            observations,
            state: self.global_state(state),
            terminal: state.done,
            truncated: false,
            win,
        }
    }

    /// Advances `state` by one joint action, checking every action against
    /// the current availability masks.
    pub fn step(&self, state: &mut EnvState, joint: &[usize]) -> Result<StepResult> {
        if state.done {
            return Err(LabError::contract("step called on a finished episode"));
        }
        let n = self.n_agents();
        if joint.len() != n {
            return Err(LabError::dim("env_step", &[joint.len()], &[n]));
        }
        for (agent, (mask, &action)) in self.masks(state).iter().zip(joint).enumerate() {
            if !mask.get(action).copied().unwrap_or(false) {
                return Err(LabError::UnavailableAction { agent, action });
            }
        }
        let (reward, ended, win) = match (&self.kind, &mut state.inner) {
            (EnvKind::Matrix(g), _) => (g.payoff(joint), true, false),
            (EnvKind::TwoStep(g), Inner::TwoStep { mode }) => match mode {
                None => {
                    *mode = Some(g.branch(joint));
                    (0.0, false, false)
                }
                Some(m) => (g.mode_game(*m).payoff(joint), true, false),
            },
            (EnvKind::Skirmish(s), Inner::Skirmish(r)) => {
                let outcome = s.advance(r, joint);
                (outcome.reward, outcome.ended, outcome.win)
            }
            _ => unreachable!("state kind matches spec kind"),
        };
        state.step += 1;
        let truncated = !ended && state.step >= self.episode_limit();
        state.done = ended || truncated;
        let mut result = self.result(state, reward, win);
        result.truncated = truncated;
        Ok(result)
    }

    /// Exact optimal discounted return from the initial state for `seed`,
    /// by exhaustive search over the reachable state graph.
    pub fn oracle_optimal(&self, gamma: f64, seed: u64) -> Result<OracleResult> {
        let joint: u128 = self
            .action_counts()
            .iter()
            .map(|&k| k as u128)
            .product();
        if joint > ORACLE_LIMIT {
            return Err(LabError::Capacity {
                size: joint,
                limit: ORACLE_LIMIT,
            });
        }
        let mut search = Search {
            spec: self,
            gamma,
            memo: HashMap::new(),
            visited: 0,
        };
        let (start, _) = self.reset(seed);
        let value = search.value(&start)?;
        let mut policy = Vec::new();
        let mut state = start;
        while !state.done {
            let (_, best) = search.best(&state)?;
            self.step(&mut state, &best)?;
            policy.push(best);
        }
        Ok(OracleResult { value, policy })
    }
}

struct Search<'a> {
    spec: &'a EnvSpec,
    gamma: f64,
    memo: HashMap<EnvState, (f64, Vec<usize>)>,
    visited: u128,
}

impl Search<'_> {
    fn value(&mut self, state: &EnvState) -> Result<f64> {
        Ok(self.best(state)?.0)
    }

    fn best(&mut self, state: &EnvState) -> Result<(f64, Vec<usize>)> {
        if let Some(hit) = self.memo.get(state) {
            return Ok(hit.clone());
        }
        let options: Vec<Vec<usize>> = self
            .spec
            .masks(state)
            .iter()
            .map(|m| (0..m.len()).filter(|&a| m[a]).collect())
            .collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut idx = vec![0usize; options.len()];
        loop {
            self.visited += 1;
            if self.visited > ORACLE_LIMIT {
                return Err(LabError::Capacity {
                    size: self.visited,
                    limit: ORACLE_LIMIT,
                });
            }
            let joint: Vec<usize> = idx.iter().zip(&options).map(|(&k, o)| o[k]).collect();
            let mut next = state.clone();
            let r = self.spec.step(&mut next, &joint)?;
            let v = if next.done {
                r.reward
            } else {
                r.reward + self.gamma * self.value(&next)?
            };
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, joint));
            }
            // odometer over the per-agent option lists, last agent fastest
            let mut k = idx.len();
            loop {
                if k == 0 {
                    let out = best.expect("every agent has an available action");
                    self.memo.insert(state.clone(), out.clone());
                    return Ok(out);
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < options[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
}

fn parse_err(path: &Path, field: impl Into<String>, reason: impl Into<String>) -> LabError {
    LabError::Parse {
        path: path.to_path_buf(),
        field: field.into(),
        reason: reason.into(),
    }
}

/// Loads a matrix game, two-step game or skirmish description, picking the
/// kind from the fields present.
pub fn load_env(path: &Path) -> Result<EnvSpec> {
    let text = std::fs::read_to_string(path)?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| parse_err(path, "<root>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(path, "<root>", "expected a JSON object"))?;
    let name = match obj.get("name") {
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(parse_err(path, "name", "expected a string")),
    };
    let kind = if obj.contains_key("grid") {
        EnvKind::Skirmish(Skirmish::from_value(path, &value)?)
    } else if obj.contains_key("modes") {
        EnvKind::TwoStep(TwoStepGame::from_value(path, &value)?)
    } else if obj.contains_key("payoff") {
        EnvKind::Matrix(MatrixGame::from_value(path, &value)?)
    } else {
        return Err(parse_err(
            path,
            "<root>",
            "expected `payoff` (matrix game), `modes` (two-step game) or `grid` (skirmish)",
        ));
    };
    Ok(EnvSpec { name, kind })
}

pub fn load_matrix_game(path: &Path) -> Result<EnvSpec> {
    let spec = load_env(path)?;
    match spec.kind {
        EnvKind::Matrix(_) => Ok(spec),
        _ => Err(parse_err(path, "payoff", "not a matrix game")),
    }
}
