//! Centralized training with decentralized execution: episodic replay,
//! ε-greedy rollouts, TD targets through the mixer, hard target updates
//! and periodic greedy evaluation.

mod episode;
mod learner;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use episode::{collect_episode, replay, rollout, AgentRunner, Episode, ReplayBuffer};
pub use learner::Learner;

use crate::agent::{greedy_action, AgentNet, AgentNetConfig};
use crate::envs::EnvSpec;
use crate::error::{LabError, Result};
use crate::grad::{ParamStore, RmsProp, RmsPropConfig};
use crate::mixers::{MixRecord, Mixer, MixerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mixer: MixerConfig,
    pub total_steps: usize,
    pub gamma: f64,
    /// Episodes per update.
    pub batch_size: usize,
    /// Episodes kept in replay.
    pub buffer_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    /// Linear anneal length in environment steps; defaults to
    /// `min(50_000, total_steps / 4)`.
    pub anneal_steps: Option<usize>,
    /// Hard target copy every this many episodes.
    pub target_update_episodes: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Hand a snapshot to the sink every this many environment steps.
    pub checkpoint_interval: Option<usize>,
    pub seed: u64,
    pub hidden: usize,
    pub share_params: bool,
    pub agent_id: bool,
    pub optimizer: RmsPropConfig,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mixer: MixerConfig::Qatten(Default::default()),
            total_steps: 20_000,
            gamma: 0.99,
            batch_size: 32,
            buffer_capacity: 5000,
            epsilon_start: 1.0,
            epsilon_finish: 0.05,
            anneal_steps: None,
            target_update_episodes: 200,
            eval_interval: 1000,
            eval_episodes: 32,
            checkpoint_interval: None,
            seed: 0,
            hidden: 64,
            share_params: true,
            agent_id: true,
            optimizer: RmsPropConfig::default(),
            grad_clip: 10.0,
        }
    }
}

fn config_err(key: &str, reason: &str) -> LabError {
    LabError::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn anneal_window(&self) -> usize {
        self.anneal_steps
            .unwrap_or_else(|| 50_000.min(self.total_steps / 4))
    }

    pub fn epsilon(&self, t_env: usize) -> f64 {
        let window = self.anneal_window();
        if window == 0 || t_env >= window {
            return self.epsilon_finish;
        }
        let frac = t_env as f64 / window as f64;
        self.epsilon_start + frac * (self.epsilon_finish - self.epsilon_start)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(config_err("gamma", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be positive"));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(config_err("buffer_capacity", "must hold at least one batch"));
        }
        for (key, e) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_finish", self.epsilon_finish),
        ] {
            if !(0.0..=1.0).contains(&e) {
                return Err(config_err(key, "must lie in [0, 1]"));
            }
        }
        if self.anneal_steps.is_some_and(|w| w > self.total_steps) {
            return Err(config_err("anneal_steps", "must not exceed total_steps"));
        }
        for (key, v) in [
            ("target_update_episodes", self.target_update_episodes),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(config_err(key, "must be positive"));
            }
        }
        if self.checkpoint_interval == Some(0) {
            return Err(config_err("checkpoint_interval", "must be positive"));
        }
        if !(self.optimizer.lr > 0.0 && self.grad_clip > 0.0) {
            return Err(config_err("optimizer", "learning rate and clip norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub median_return: f64,
    pub mean_return: f64,
    pub win_rate: f64,
    /// Loss of the most recent update; `None` before the first one.
    pub loss: Option<f64>,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub returns: Vec<f64>,
    pub median_return: f64,
    pub mean_return: f64,
    pub win_rate: f64,
}

/// Receives metric rows and optional snapshots; file handling lives with the
/// caller.
pub trait RunSink {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()>;

    fn checkpoint(&mut self, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

impl RunSink for Vec<MetricsRow> {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Episode seeds of evaluation `index` for a run seeded with `seed`.
pub fn eval_seeds(seed: u64, index: usize, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    (0..count).map(|_| rng.gen()).collect()
}

/// Greedy rollouts; no learning state is touched.
pub fn evaluate(agent: &AgentNet, params: &ParamStore, env: &EnvSpec, seeds: &[u64]) -> Result<EvalMetrics> {
    if seeds.is_empty() {
        return Err(LabError::contract("evaluation needs at least one episode"));
    }
    let mut returns = Vec::with_capacity(seeds.len());
    let mut wins = 0usize;
    for &seed in seeds {
        let ep = greedy_episode(agent, params, env, seed)?;
        returns.push(ep.total_return());
        wins += usize::from(ep.win);
    }
    Ok(EvalMetrics {
        median_return: median(&returns),
        mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
        win_rate: wins as f64 / seeds.len() as f64,
        returns,
    })
}

pub fn greedy_episode(agent: &AgentNet, params: &ParamStore, env: &EnvSpec, seed: u64) -> Result<Episode> {
    let mut runner = AgentRunner::new(agent, params);
    rollout(env, seed, |obs| {
        let q = runner.utilities(obs)?;
        let joint = q
            .iter()
            .zip(obs)
            .map(|(q, o)| greedy_action(q, &o.mask))
            .collect::<Result<Vec<_>>>()?;
        runner.record(&joint);
        Ok(joint)
    })
}

/// Mixer records along one greedy episode: at every step the mixer sees the
/// chosen utilities, the global state and the agents' observations.
pub fn greedy_mix_records(learner: &Learner, env: &EnvSpec, seed: u64) -> Result<Vec<MixRecord>> {
    if !learner.mixer.is_qatten() {
        return Err(LabError::UnsupportedMixer("attention records need a Qatten mixer".into()));
    }
    let mut runner = AgentRunner::new(&learner.agent, &learner.params);
    let mut qs = Vec::new();
    let mut feats = Vec::new();
    let ep = rollout(env, seed, |obs| {
        let q = runner.utilities(obs)?;
        let joint = q
            .iter()
            .zip(obs)
            .map(|(q, o)| greedy_action(q, &o.mask))
            .collect::<Result<Vec<_>>>()?;
        qs.push(q.iter().zip(&joint).map(|(q, &a)| q[a]).collect::<Vec<_>>());
        feats.push(obs.iter().map(|o| o.features.clone()).collect::<Vec<_>>());
        runner.record(&joint);
        Ok(joint)
    })?;
    let states: Vec<Vec<f64>> = (0..ep.len()).map(|t| ep.state_at(t).to_vec()).collect();
    let (_, records) = learner.mixer.mix_batch(&learner.params, &qs, &states, &feats)?;
    Ok(records.expect("qatten mixers produce records"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// Decimal string: JSON numbers cannot carry 128 bits losslessly.
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| LabError::contract("corrupt rng position"))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Replay entries stored by seed and joint actions; the episodes are
/// rebuilt by replaying them through the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EpisodeRecord {
    seed: u64,
    actions: Vec<usize>,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub config: TrainConfig,
    pub learner: Learner,
    buffer: Vec<EpisodeRecord>,
    rng: RngState,
    pub t_env: usize,
    pub episodes: usize,
    pub updates: usize,
    last_target_episode: usize,
    last_eval_t: usize,
    evals_done: usize,
    last_checkpoint_t: usize,
    last_loss: Option<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub env: EnvSpec,
    pub learner: Learner,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    pub t_env: usize,
    pub episodes: usize,
    pub updates: usize,
    last_target_episode: usize,
    last_eval_t: usize,
    evals_done: usize,
    last_checkpoint_t: usize,
    last_loss: Option<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, env: EnvSpec) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let agent_cfg = AgentNetConfig {
            n_agents: env.n_agents(),
            obs_width: env.obs_width(),
            n_actions: env.n_actions(),
            hidden: config.hidden,
            share_params: config.share_params,
            agent_id: config.agent_id,
        };
        let agent = AgentNet::new(agent_cfg, &mut params, &mut rng, "agent")?;
        let mixer = Mixer::new(
            &config.mixer,
            env.n_agents(),
            env.state_width(),
            env.obs_width(),
            &mut params,
            &mut rng,
            "mixer",
        )?;
        let optim = RmsProp::new(config.optimizer, &params);
        let learner = Learner::new(agent, mixer, params, optim, config.gamma, config.grad_clip);
        Ok(Trainer {
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            config,
            env,
            learner,
            rng,
            t_env: 0,
            episodes: 0,
            updates: 0,
            last_target_episode: 0,
            last_eval_t: 0,
            evals_done: 0,
            last_checkpoint_t: 0,
            last_loss: None,
        })
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            config: self.config.clone(),
            learner: self.learner.clone(),
            buffer: self
                .buffer
                .iter()
                .map(|e| EpisodeRecord {
                    seed: e.seed,
                    actions: e.actions.clone(),
                })
                .collect(),
            rng: RngState::capture(&self.rng),
            t_env: self.t_env,
            episodes: self.episodes,
            updates: self.updates,
            last_target_episode: self.last_target_episode,
            last_eval_t: self.last_eval_t,
            evals_done: self.evals_done,
            last_checkpoint_t: self.last_checkpoint_t,
            last_loss: self.last_loss,
        }
    }

    pub fn restore(snapshot: Snapshot, env: EnvSpec) -> Result<Self> {
        snapshot.config.validate()?;
        let mut buffer = ReplayBuffer::new(snapshot.config.buffer_capacity)?;
        for r in &snapshot.buffer {
            buffer.insert(replay(&env, r.seed, &r.actions)?);
        }
        Ok(Trainer {
            rng: snapshot.rng.restore()?,
            config: snapshot.config,
            env,
            learner: snapshot.learner,
            buffer,
            t_env: snapshot.t_env,
            episodes: snapshot.episodes,
            updates: snapshot.updates,
            last_target_episode: snapshot.last_target_episode,
            last_eval_t: snapshot.last_eval_t,
            evals_done: snapshot.evals_done,
            last_checkpoint_t: snapshot.last_checkpoint_t,
            last_loss: snapshot.last_loss,
        })
    }

    /// Evaluation episode seeds depend only on the run seed and the
    /// evaluation index, so evaluation never perturbs the training stream.
    pub fn eval_seeds(&self, index: usize) -> Vec<u64> {
        eval_seeds(self.config.seed, index, self.config.eval_episodes)
    }

    pub fn evals_done(&self) -> usize {
        self.evals_done
    }

    pub fn evaluate_now(&self) -> Result<EvalMetrics> {
        evaluate(
            &self.learner.agent,
            &self.learner.params,
            &self.env,
            &self.eval_seeds(self.evals_done),
        )
    }

    fn log_eval(&mut self, sink: &mut dyn RunSink) -> Result<()> {
        let m = self.evaluate_now()?;
        self.evals_done += 1;
        self.last_eval_t = self.t_env;
        sink.metrics(&MetricsRow {
            step: self.t_env,
            median_return: m.median_return,
            mean_return: m.mean_return,
            win_rate: m.win_rate,
            loss: self.last_loss,
            epsilon: self.config.epsilon(self.t_env),
        })
    }

    pub fn finished(&self) -> bool {
        self.evals_done > 0 && self.t_env >= self.config.total_steps
    }

    /// Runs until `total_steps` environment steps have been collected.
    pub fn run(&mut self, sink: &mut dyn RunSink) -> Result<()> {
        self.run_until(sink, usize::MAX)
    }

    /// Like [`Trainer::run`] but returns once `stop_at` steps have been
    /// collected (used to interrupt runs).
    pub fn run_until(&mut self, sink: &mut dyn RunSink, stop_at: usize) -> Result<()> {
        if self.evals_done == 0 {
            self.log_eval(sink)?;
        }
        while self.t_env < self.config.total_steps && self.t_env < stop_at {
            self.iteration(sink)?;
        }
        if self.t_env >= self.config.total_steps && self.last_eval_t < self.t_env {
            self.log_eval(sink)?;
        }
        Ok(())
    }

    fn iteration(&mut self, sink: &mut dyn RunSink) -> Result<()> {
        let epsilon = self.config.epsilon(self.t_env);
        let seed: u64 = self.rng.gen();
        let ep = collect_episode(
            &self.learner.agent,
            &self.learner.params,
            &self.env,
            seed,
            epsilon,
            &mut self.rng,
        )?;
        self.t_env += ep.len();
        self.episodes += 1;
        self.buffer.insert(ep);

        if self.buffer.len() >= self.config.batch_size {
            let batch = self.buffer.sample(self.config.batch_size, &mut self.rng)?;
            let loss = self.learner.train_step(&batch)?;
            self.last_loss = Some(loss);
            self.updates += 1;
        }
        if self.episodes - self.last_target_episode >= self.config.target_update_episodes {
            self.learner.update_target()?;
            self.last_target_episode = self.episodes;
        }
        if self.t_env - self.last_eval_t >= self.config.eval_interval {
            self.log_eval(sink)?;
        }
        if let Some(every) = self.config.checkpoint_interval {
            if self.t_env - self.last_checkpoint_t >= every {
                self.last_checkpoint_t = self.t_env;
                sink.checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// Builds a trainer and runs it to completion.
pub fn train(config: TrainConfig, env: EnvSpec, sink: &mut dyn RunSink) -> Result<Trainer> {
    let mut trainer = Trainer::new(config, env)?;
    trainer.run(sink)?;
    Ok(trainer)
}
