use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::parse_err;
use crate::error::{LabError, Result};

/// One-step cooperative game with a dense payoff tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixGame {
    pub actions: Vec<usize>,
    /// Row-major payoff, last agent fastest.
    pub payoff: Vec<f64>,
}

impl MatrixGame {
    pub fn new(actions: Vec<usize>, payoff: Vec<f64>) -> Result<Self> {
        if actions.is_empty() || actions.contains(&0) {
            return Err(LabError::contract("every agent needs at least one action"));
        }
        let size: usize = actions.iter().product();
        if payoff.len() != size {
            return Err(LabError::dim("payoff", &[payoff.len()], &actions));
        }
        if payoff.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("payoff tensor".into()));
        }
        Ok(MatrixGame { actions, payoff })
    }

    pub fn payoff(&self, joint: &[usize]) -> f64 {
        let idx = joint
            .iter()
            .zip(&self.actions)
            .fold(0, |acc, (&a, &k)| acc * k + a);
        self.payoff[idx]
    }

    pub fn max_payoff(&self) -> f64 {
        self.payoff.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(super) fn from_value(path: &Path, value: &Value) -> Result<Self> {
        let obj = object(path, value)?;
        check_keys(path, obj, &["name", "agents", "actions", "payoff"])?;
        let actions = agents_and_actions(path, obj)?;
        let payoff_value = obj
            .get("payoff")
            .ok_or_else(|| parse_err(path, "payoff", "missing"))?;
        let payoff = tensor(path, "payoff", payoff_value, &actions)?;
        MatrixGame::new(actions, payoff).map_err(|e| parse_err(path, "payoff", e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    A,
    B,
}

/// Two-step game: the branch agent's first action picks a latent payoff
/// matrix for the second step. The mode is visible in the global state only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStepGame {
    pub actions: Vec<usize>,
    pub mode_a: MatrixGame,
    pub mode_b: MatrixGame,
    pub branch_agent: usize,
    pub gamma: f64,
}

impl TwoStepGame {
    /// Branch agent action 0 selects mode A, any other action mode B.
    pub fn branch(&self, joint: &[usize]) -> Mode {
        if joint[self.branch_agent] == 0 {
            Mode::A
        } else {
            Mode::B
        }
    }

    pub fn mode_game(&self, mode: Mode) -> &MatrixGame {
        match mode {
            Mode::A => &self.mode_a,
            Mode::B => &self.mode_b,
        }
    }

    pub(super) fn from_value(path: &Path, value: &Value) -> Result<Self> {
        let obj = object(path, value)?;
        check_keys(
            path,
            obj,
            &["name", "agents", "actions", "modes", "branch_agent", "gamma"],
        )?;
        let actions = agents_and_actions(path, obj)?;
        let modes = obj
            .get("modes")
            .and_then(Value::as_object)
            .ok_or_else(|| parse_err(path, "modes", "expected an object with keys A and B"))?;
        check_keys(path, modes, &["A", "B"]).map_err(|_| {
            parse_err(path, "modes", "only keys A and B are allowed")
        })?;
        let mut games = Vec::new();
        for key in ["A", "B"] {
            let field = format!("modes.{key}");
            let v = modes
                .get(key)
                .ok_or_else(|| parse_err(path, &field, "missing"))?;
            let payoff = tensor(path, &field, v, &actions)?;
            games.push(
                MatrixGame::new(actions.clone(), payoff)
                    .map_err(|e| parse_err(path, &field, e.to_string()))?,
            );
        }
        let branch_agent = match obj.get("branch_agent") {
            None => 0,
            Some(v) => v
                .as_u64()
                .map(|b| b as usize)
                .filter(|&b| b < actions.len())
                .ok_or_else(|| parse_err(path, "branch_agent", "expected an agent index"))?,
        };
        let gamma = match obj.get("gamma") {
            None => 0.99,
            Some(v) => v
                .as_f64()
                .filter(|g| (0.0..=1.0).contains(g))
                .ok_or_else(|| parse_err(path, "gamma", "expected a number in [0, 1]"))?,
        };
        let mode_b = games.pop().expect("two modes");
        let mode_a = games.pop().expect("two modes");
        Ok(TwoStepGame {
            actions,
            mode_a,
            mode_b,
            branch_agent,
            gamma,
        })
    }
}

fn object<'a>(path: &Path, value: &'a Value) -> Result<&'a Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| parse_err(path, "<root>", "expected a JSON object"))
}

fn check_keys(path: &Path, obj: &Map<String, Value>, allowed: &[&str]) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(parse_err(path, k.as_str(), "unknown field")),
        None => Ok(()),
    }
}

fn agents_and_actions(path: &Path, obj: &Map<String, Value>) -> Result<Vec<usize>> {
    let actions: Vec<usize> = obj
        .get("actions")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(path, "actions", "expected an array of action counts"))?
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_u64()
                .filter(|&k| k >= 1)
                .map(|k| k as usize)
                .ok_or_else(|| parse_err(path, format!("actions[{i}]"), "expected an integer >= 1"))
        })
        .collect::<Result<_>>()?;
    if actions.is_empty() {
        return Err(parse_err(path, "actions", "need at least one agent"));
    }
    if let Some(agents) = obj.get("agents") {
        if agents.as_u64() != Some(actions.len() as u64) {
            return Err(parse_err(
                path,
                "agents",
                format!("declares {agents} agents but `actions` lists {}", actions.len()),
            ));
        }
    }
    Ok(actions)
}

/// Flattens a nested array whose shape must equal `dims`.
fn tensor(path: &Path, field: &str, value: &Value, dims: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(dims.iter().product());
    fill(path, field, value, dims, &mut out)?;
    Ok(out)
}

fn fill(path: &Path, field: &str, value: &Value, dims: &[usize], out: &mut Vec<f64>) -> Result<()> {
    match dims.split_first() {
        None => {
            let v = value
                .as_f64()
                .ok_or_else(|| parse_err(path, field, "expected a number"))?;
            out.push(v);
            Ok(())
        }
        Some((&len, rest)) => {
            let items = value.as_array().ok_or_else(|| {
                parse_err(path, field, format!("expected an array of length {len}"))
            })?;
            if items.len() != len {
                return Err(parse_err(
                    path,
                    field,
                    format!("length {} does not match declared action count {len}", items.len()),
                ));
            }
            for (i, item) in items.iter().enumerate() {
                fill(path, &format!("{field}[{i}]"), item, rest, out)?;
            }
            Ok(())
        }
    }
}
