//! Agents: the amortized variational DQN, the epsilon-greedy DQN baseline and a
//! tabular Q-learning reference.
//!
//! An AVDQN network emits `2 |A|` numbers laid out as
//! `(mu_1, raw_1, mu_2, raw_2, ...)`: one posterior head per action. Actions are
//! chosen greedily over one reparameterized sample per head, and the network
//! is trained on the per-sample surrogate `1/2 (q - d)^2 - H[q]` of the taken
//! action's head, with `d` bootstrapped from sampled target-network heads.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffnet::{FeedforwardNet, NetArch};
use crate::dist::{self, PosteriorParams, Stage};
use crate::envs::{make_env, Environment};
use crate::error::{Error, Result};
use crate::harness::{EpisodeRecord, RunRecord};
use crate::replay::{Batch, RankedReplay, Replay, Transition, UniformReplay};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Dqn,
    Avdqn,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Dqn => "dqn",
            AgentKind::Avdqn => "avdqn",
        }
    }
}

impl std::str::FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dqn" => Ok(AgentKind::Dqn),
            "avdqn" => Ok(AgentKind::Avdqn),
            other => Err(format!("unknown agent `{other}` (expected dqn or avdqn)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayKind {
    Uniform,
    Ranked,
}

impl std::str::FromStr for ReplayKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(ReplayKind::Uniform),
            "ranked" | "per" => Ok(ReplayKind::Ranked),
            other => Err(format!(
                "unknown replay `{other}` (expected uniform or ranked)"
            )),
        }
    }
}

impl ReplayKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReplayKind::Uniform => "uniform",
            ReplayKind::Ranked => "ranked",
        }
    }
}

/// Which TD error feeds the replay priorities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrioritySource {
    /// `|q_sample - d|`, the error the loss sees.
    Sampled,
    /// `|mu - d|`.
    Mean,
}

impl std::str::FromStr for PrioritySource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sampled" => Ok(PrioritySource::Sampled),
            "mean" => Ok(PrioritySource::Mean),
            other => Err(format!("unknown priority source `{other}`")),
        }
    }
}

impl PrioritySource {
    pub fn as_str(self) -> &'static str {
        match self {
            PrioritySource::Sampled => "sampled",
            PrioritySource::Mean => "mean",
        }
    }
}

/// Whether epsilon decays per environment step or per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayUnit {
    Step,
    Episode,
}

impl std::str::FromStr for DecayUnit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "step" => Ok(DecayUnit::Step),
            "episode" => Ok(DecayUnit::Episode),
            other => Err(format!("unknown decay unit `{other}`")),
        }
    }
}

impl DecayUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            DecayUnit::Step => "step",
            DecayUnit::Episode => "episode",
        }
    }
}

/// Linear epsilon decay `max(end, start - (start - end) t / decay)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay: usize,
}

impl EpsilonSchedule {
    pub fn new(decay: usize) -> Self {
        Self {
            start: 1.0,
            end: 0.01,
            decay,
        }
    }

    pub fn value(&self, t: usize) -> f64 {
        if t >= self.decay {
            return self.end;
        }
        let frac = t as f64 / self.decay as f64;
        (self.start - (self.start - self.end) * frac).max(self.end)
    }
}

/// Default bound on each per-transition output gradient. Single Cauchy draws
/// in the bootstrap targets occasionally reach 1e6 and beyond; left unbounded
/// they drive the network to overflow.
pub const DEFAULT_GRAD_CLIP: f64 = 1e4;

/// Every knob of a training run. `None` fields take a default that depends on
/// the agent, the environment or the episode count.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: String,
    pub agent: AgentKind,
    pub episodes: usize,
    pub seed: u64,
    /// Pre-train episodes; default `episodes - 200` (clamped at 0).
    pub omega: Option<usize>,
    /// Default 1 on chains, 0.99 otherwise.
    pub gamma: Option<f64>,
    /// Default 1e-3 for AVDQN, 1e-2 for DQN.
    pub lr: Option<f64>,
    /// Fine-tune learning rate is `lr / (1 + lr_decay (e - omega))`.
    pub lr_decay: f64,
    pub tau: usize,
    pub batch: usize,
    pub hidden: Vec<usize>,
    /// Default ranked for AVDQN, uniform for DQN.
    pub replay: Option<ReplayKind>,
    pub capacity: usize,
    pub per_alpha: f64,
    /// Importance-sampling exponent; `None` disables the correction.
    pub per_beta: Option<f64>,
    pub sort_every: u64,
    pub entropy_coef: f64,
    pub priority_source: PrioritySource,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Default: 10% of `episodes * horizon` steps (or episodes).
    pub epsilon_decay: Option<usize>,
    pub epsilon_unit: DecayUnit,
    /// Element-wise bound on the per-transition output gradient; `None`
    /// disables clipping.
    pub grad_clip: Option<f64>,
    /// Record wall-clock seconds per episode; when off the column is zero.
    pub record_time: bool,
}

impl TrainConfig {
    pub fn new(env: impl Into<String>, agent: AgentKind) -> Self {
        Self {
            env: env.into(),
            agent,
            episodes: 1000,
            seed: 0,
            omega: None,
            gamma: None,
            lr: None,
            lr_decay: 0.9,
            tau: 100,
            batch: 128,
            hidden: NetArch::DEFAULT_HIDDEN.to_vec(),
            replay: None,
            capacity: crate::replay::DEFAULT_CAPACITY,
            per_alpha: crate::replay::DEFAULT_PER_ALPHA,
            per_beta: None,
            sort_every: crate::replay::DEFAULT_SORT_EVERY,
            entropy_coef: 1.0,
            priority_source: PrioritySource::Sampled,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_decay: None,
            epsilon_unit: DecayUnit::Step,
            grad_clip: Some(DEFAULT_GRAD_CLIP),
            record_time: true,
        }
    }

    pub fn omega(&self) -> usize {
        self.omega
            .unwrap_or_else(|| self.episodes.saturating_sub(200))
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
            .unwrap_or(if self.is_chain() { 1.0 } else { 0.99 })
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.agent {
            AgentKind::Avdqn => 1e-3,
            AgentKind::Dqn => 1e-2,
        })
    }

    pub fn replay_kind(&self) -> ReplayKind {
        self.replay.unwrap_or(match self.agent {
            AgentKind::Avdqn => ReplayKind::Ranked,
            AgentKind::Dqn => ReplayKind::Uniform,
        })
    }

    pub fn epsilon_schedule(&self, horizon: usize) -> EpsilonSchedule {
        let decay = self
            .epsilon_decay
            .unwrap_or_else(|| match self.epsilon_unit {
                DecayUnit::Step => (self.episodes * horizon) / 10,
                DecayUnit::Episode => self.episodes / 10,
            });
        EpsilonSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            decay,
        }
    }

    /// Learning rate for 1-based episode `e`.
    pub fn lr_at(&self, episode: usize) -> f64 {
        let omega = self.omega();
        if self.agent == AgentKind::Avdqn && episode > omega {
            self.lr() / (1.0 + self.lr_decay * (episode - omega) as f64)
        } else {
            self.lr()
        }
    }

    pub fn stage_at(&self, episode: usize) -> Stage {
        Stage::for_episode(episode, self.omega())
    }

    fn is_chain(&self) -> bool {
        self.env.trim().to_ascii_lowercase().starts_with("chain:")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.tau < 1 {
            return bad("tau must be >= 1".into());
        }
        let g = self.gamma();
        if !(g > 0.0 && g <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {g}"));
        }
        if self.omega() > self.episodes {
            return bad(format!(
                "omega {} exceeds episodes {}",
                self.omega(),
                self.episodes
            ));
        }
        if self.batch < 1 {
            return bad("batch must be >= 1".into());
        }
        if !(self.lr() >= 0.0 && self.lr().is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.lr()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("invalid hidden layers {:?}", self.hidden));
        }
        if self.capacity < self.batch {
            return bad("replay capacity smaller than the batch".into());
        }
        if !(self.per_alpha >= 0.0 && self.per_alpha.is_finite()) {
            return bad(format!("per_alpha must be >= 0, got {}", self.per_alpha));
        }
        if self.sort_every == 0 {
            return bad("sort_every must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Splits an interleaved `(mu, raw)` output vector into per-action heads.
pub fn split_heads(output: &[f64]) -> Vec<PosteriorParams> {
    output
        .chunks_exact(2)
        .map(|c| PosteriorParams::from_raw(c[0], c[1]))
        .collect()
}

/// One forward pass of `net` on `observation`, split into heads.
pub fn heads(net: &FeedforwardNet, observation: &[f64]) -> Result<Vec<PosteriorParams>> {
    Ok(split_heads(&net.predict(observation)?))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Samples one Q per head under the stage's family.
pub fn sample_heads<R: Rng + ?Sized>(
    heads: &[PosteriorParams],
    stage: Stage,
    rng: &mut R,
) -> Vec<f64> {
    heads
        .iter()
        .map(|h| {
            let noise = stage.draw_noise(rng);
            dist::sample(h, stage, noise).expect("drawn noise is always valid")
        })
        .collect()
}

/// Per-step diagnostics from a training step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepDiagnostics {
    /// A gradient update was attempted (the replay held a full batch).
    pub learned: bool,
    /// The update was dropped because of a non-finite loss or gradient.
    pub skipped: bool,
    /// The target network was synced after this step.
    pub synced: bool,
    /// Mean per-transition loss of the batch.
    pub loss: f64,
}

/// Evaluation and target networks, replay, and the global step counter.
#[derive(Debug, Clone)]
pub struct Agent {
    kind: AgentKind,
    n_actions: usize,
    eval_net: FeedforwardNet,
    target_net: FeedforwardNet,
    replay: Replay,
    step_counter: u64,
    tau: u64,
    batch: usize,
    gamma: f64,
    entropy_coef: f64,
    priority_source: PrioritySource,
    per_beta: Option<f64>,
    grad_clip: Option<f64>,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        config: &TrainConfig,
        obs_dim: usize,
        n_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let out = match config.agent {
            AgentKind::Avdqn => 2 * n_actions,
            AgentKind::Dqn => n_actions,
        };
        let arch = NetArch::new(obs_dim, config.hidden.clone(), out)?;
        let eval_net = FeedforwardNet::new(arch, rng);
        let mut target_net = eval_net.clone();
        target_net.copy_params_from(&eval_net)?;
        let replay = match config.replay_kind() {
            ReplayKind::Uniform => Replay::Uniform(UniformReplay::new(config.capacity)),
            ReplayKind::Ranked => Replay::Ranked(RankedReplay::with_sort_period(
                config.capacity,
                config.per_alpha,
                config.sort_every,
            )),
        };
        Ok(Self {
            kind: config.agent,
            n_actions,
            eval_net,
            target_net,
            replay,
            step_counter: 0,
            tau: config.tau as u64,
            batch: config.batch,
            gamma: config.gamma(),
            entropy_coef: config.entropy_coef,
            priority_source: config.priority_source,
            per_beta: config.per_beta,
            grad_clip: config.grad_clip,
        })
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn eval_net(&self) -> &FeedforwardNet {
        &self.eval_net
    }

    pub fn eval_net_mut(&mut self) -> &mut FeedforwardNet {
        &mut self.eval_net
    }

    pub fn target_net(&self) -> &FeedforwardNet {
        &self.target_net
    }

    pub fn target_net_mut(&mut self) -> &mut FeedforwardNet {
        &mut self.target_net
    }

    pub fn replay(&self) -> &Replay {
        &self.replay
    }

    pub fn step_counter(&self) -> u64 {
        self.step_counter
    }

    pub fn remember(&mut self, t: Transition) {
        self.replay.push(t);
    }

    /// Posterior heads of the evaluation network.
    pub fn heads(&self, observation: &[f64]) -> Result<Vec<PosteriorParams>> {
        self.expect_kind(AgentKind::Avdqn)?;
        heads(&self.eval_net, observation)
    }

    /// Greedy action over one sampled Q per action.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        observation: &[f64],
        stage: Stage,
        rng: &mut R,
    ) -> Result<usize> {
        let hs = self.heads(observation)?;
        Ok(argmax(&sample_heads(&hs, stage, rng)))
    }

    /// Epsilon-greedy action of the DQN baseline.
    pub fn dqn_select<R: Rng + ?Sized>(
        &self,
        observation: &[f64],
        epsilon: f64,
        rng: &mut R,
    ) -> Result<usize> {
        self.expect_kind(AgentKind::Dqn)?;
        dqn_select(&self.eval_net, observation, epsilon, rng)
    }

    /// Bootstrap targets `d_j = r_j + gamma max_a Q_target(s'_j, a)` (`d_j = r_j` at
    /// terminals). AVDQN samples each target Q from the target net's heads.
    pub fn compute_targets<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        stage: Stage,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let m = batch.len();
        let obs_dim = self.target_net.arch().input_dim;
        let mut xs = Vec::with_capacity(m * obs_dim);
        for t in &batch.transitions {
            xs.extend_from_slice(&t.s_next);
        }
        let out = self.target_net.predict_batch(&xs, m)?;
        let width = self.target_net.arch().output_dim;
        let targets = batch
            .transitions
            .iter()
            .zip(out.chunks_exact(width))
            .map(|(t, row)| {
                let best = match self.kind {
                    AgentKind::Avdqn => {
                        let q = sample_heads(&split_heads(row), stage, rng);
                        q.into_iter().fold(f64::NEG_INFINITY, f64::max)
                    }
                    AgentKind::Dqn => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
                if t.done {
                    t.r
                } else {
                    t.r + self.gamma * best
                }
            })
            .collect();
        Ok(targets)
    }

    /// Advances the global step counter, learning from a minibatch when the
    /// replay holds at least one, and syncs the target network every `tau`
    /// steps.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        stage: Stage,
        lr: f64,
        rng: &mut R,
    ) -> Result<StepDiagnostics> {
        let mut diag = if self.replay.len() >= self.batch {
            self.learn(stage, lr, rng)?
        } else {
            StepDiagnostics::default()
        };
        self.step_counter += 1;
        if self.step_counter.is_multiple_of(self.tau) {
            self.target_net.copy_params_from(&self.eval_net)?;
            diag.synced = true;
        }
        Ok(diag)
    }

    /// DQN form of [`Agent::train_step`].
    pub fn dqn_train_step<R: Rng + ?Sized>(
        &mut self,
        lr: f64,
        rng: &mut R,
    ) -> Result<StepDiagnostics> {
        self.expect_kind(AgentKind::Dqn)?;
        self.train_step(Stage::FineTune, lr, rng)
    }

    fn learn<R: Rng + ?Sized>(
        &mut self,
        stage: Stage,
        lr: f64,
        rng: &mut R,
    ) -> Result<StepDiagnostics> {
        let m = self.batch;
        let batch = self.replay.sample(m, rng)?;
        let targets = self.compute_targets(&batch, stage, rng)?;
        let weights = match self.per_beta {
            Some(beta) => self.replay.importance_weights(&batch.indices, beta)?,
            None => vec![1.0; m],
        };

        let obs_dim = self.eval_net.arch().input_dim;
        let width = self.eval_net.arch().output_dim;
        let mut xs = Vec::with_capacity(m * obs_dim);
        for t in &batch.transitions {
            xs.extend_from_slice(&t.s);
        }
        let (out, tape) = self.eval_net.forward_batch(&xs, m)?;

        let mut dy = vec![0.0; m * width];
        let mut td = Vec::with_capacity(m);
        let mut total_loss = 0.0;
        let clip = |g: f64| match self.grad_clip {
            Some(c) => g.clamp(-c, c),
            None => g,
        };
        for (j, (t, &d)) in batch.transitions.iter().zip(&targets).enumerate() {
            let row = &out[j * width..(j + 1) * width];
            let scale = weights[j] / m as f64;
            match self.kind {
                AgentKind::Avdqn => {
                    let head = PosteriorParams::from_raw(row[2 * t.a], row[2 * t.a + 1]);
                    let noise = stage.draw_noise(rng);
                    let q = dist::sample(&head, stage, noise)?;
                    let hl = dist::head_loss_grad(&head, q, noise, d, stage, self.entropy_coef)?;
                    total_loss += hl.loss;
                    dy[j * width + 2 * t.a] = clip(hl.d_mu) * scale;
                    dy[j * width + 2 * t.a + 1] = clip(hl.d_raw_scale) * scale;
                    td.push(match self.priority_source {
                        PrioritySource::Sampled => q - d,
                        PrioritySource::Mean => head.mu - d,
                    });
                }
                AgentKind::Dqn => {
                    let err = row[t.a] - d;
                    total_loss += 0.5 * err * err;
                    dy[j * width + t.a] = clip(err) * scale;
                    td.push(err);
                }
            }
        }
        let loss = total_loss / m as f64;
        let mut diag = StepDiagnostics {
            learned: true,
            loss,
            ..Default::default()
        };
        if !loss.is_finite() {
            diag.skipped = true;
            return Ok(diag);
        }
        let grads = self.eval_net.backward(&tape, &dy)?;
        if !grads.is_finite() {
            diag.skipped = true;
            return Ok(diag);
        }
        if lr > 0.0 {
            self.eval_net.sgd_step(&grads, lr)?;
        }
        self.replay.update_priorities(&batch.indices, &td)?;
        Ok(diag)
    }

    fn expect_kind(&self, kind: AgentKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Unsupported(format!(
                "{} operation on a {} agent",
                kind.as_str(),
                self.kind.as_str()
            )));
        }
        Ok(())
    }
}

/// Epsilon-greedy over the scalar outputs of a DQN network.
pub fn dqn_select<R: Rng + ?Sized>(
    net: &FeedforwardNet,
    observation: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    let q = net.predict(observation)?;
    if rng.gen::<f64>() < epsilon {
        Ok(rng.gen_range(0..q.len()))
    } else {
        Ok(argmax(&q))
    }
}

/// Runs a full training session and returns its per-episode record.
pub fn train(config: &TrainConfig) -> Result<RunRecord> {
    config.validate()?;
    let mut env = make_env(&config.env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut agent = Agent::new(config, env.obs_dim(), env.n_actions(), &mut rng)?;
    let schedule = config.epsilon_schedule(env.horizon());
    let track_chain = env.chain_position().is_some();
    let started = Instant::now();

    let mut record = RunRecord::new(config);
    for episode in 1..=config.episodes {
        let stage = config.stage_at(episode);
        let lr = config.lr_at(episode);
        let mut obs = env.reset(rng.gen());
        let mut trajectory = Vec::new();
        if let Some(p) = env.chain_position() {
            trajectory.push(p);
        }
        let mut total = 0.0;
        let mut skipped = 0;
        loop {
            let action = match config.agent {
                AgentKind::Avdqn => agent.select_action(&obs, stage, &mut rng)?,
                AgentKind::Dqn => {
                    let t = match config.epsilon_unit {
                        DecayUnit::Step => agent.step_counter() as usize,
                        DecayUnit::Episode => episode - 1,
                    };
                    agent.dqn_select(&obs, schedule.value(t), &mut rng)?
                }
            };
            let step = env.step(action)?;
            total += step.reward;
            if let Some(p) = env.chain_position() {
                trajectory.push(p);
            }
            agent.remember(Transition {
                s: std::mem::take(&mut obs),
                a: action,
                r: step.reward,
                s_next: step.next_observation.clone(),
                done: step.done,
            });
            let diag = agent.train_step(stage, lr, &mut rng)?;
            skipped += usize::from(diag.skipped);
            obs = step.next_observation;
            if step.done {
                break;
            }
        }
        let seconds = if config.record_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        record.episodes.push(EpisodeRecord {
            episode,
            reward: total,
            seconds,
            stage,
            skipped,
        });
        if track_chain {
            record.trajectories.push(trajectory);
        }
    }
    Ok(record)
}

// ---------------------------------------------------------------------------
// Tabular reference

/// One transition between discrete states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularTransition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularQ {
    n_states: usize,
    n_actions: usize,
    table: Vec<f64>,
}

impl TabularQ {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            table: vec![0.0; n_states * n_actions],
        }
    }

    /// Table sized for a discrete environment; continuous ones are rejected.
    pub fn for_env(env: &dyn Environment) -> Result<Self> {
        if env.chain_position().is_none() {
            return Err(Error::Unsupported(format!(
                "tabular Q-learning needs a discrete state space, `{}` is continuous",
                env.id()
            )));
        }
        Ok(Self::new(env.obs_dim(), env.n_actions()))
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.table[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.table[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn greedy(&self, s: usize) -> usize {
        argmax(self.row(s))
    }

    /// `Q(s,a) <- (1 - alpha) Q(s,a) + alpha (r + gamma max_a' Q(s',a'))`; no
    /// bootstrap on terminal transitions.
    pub fn update(&mut self, t: &TabularTransition, alpha: f64, gamma: f64) -> Result<()> {
        if t.s >= self.n_states || t.s_next >= self.n_states {
            return Err(Error::IndexOutOfRange {
                index: t.s.max(t.s_next),
                len: self.n_states,
            });
        }
        if t.a >= self.n_actions {
            return Err(Error::InvalidAction {
                action: t.a,
                n_actions: self.n_actions,
            });
        }
        let bootstrap = if t.done {
            0.0
        } else {
            self.row(t.s_next)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let cell = &mut self.table[t.s * self.n_actions + t.a];
        *cell = (1.0 - alpha) * *cell + alpha * (t.r + gamma * bootstrap);
        Ok(())
    }
}

/// Free-function form of [`TabularQ::update`].
pub fn tabular_q_update(
    table: &mut TabularQ,
    t: &TabularTransition,
    alpha: f64,
    gamma: f64,
) -> Result<()> {
    table.update(t, alpha, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::one_hot;

    fn small_config(env: &str, kind: AgentKind) -> TrainConfig {
        let mut c = TrainConfig::new(env, kind);
        c.hidden = vec![8, 8];
        c.batch = 4;
        c.capacity = 1000;
        c.record_time = false;
        c
    }

    fn transition(n: usize, s: usize, a: usize, r: f64, s_next: usize, done: bool) -> Transition {
        Transition {
            s: one_hot(s, n),
            a,
            r,
            s_next: one_hot(s_next, n),
            done,
        }
    }

    #[test]
    fn heads_are_interleaved() {
        let h = split_heads(&[1.0, 0.0, -2.0, 3.0]);
        assert_eq!(h.len(), 2);
        assert_eq!(h[0].mu, 1.0);
        assert!((h[0].scale - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(h[1].mu, -2.0);
        assert_eq!(h[1].raw_scale, 3.0);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    #[test]
    fn epsilon_schedule_points() {
        let s = EpsilonSchedule::new(1000);
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(500) - 0.505).abs() < 1e-12);
        assert_eq!(s.value(1000), 0.01);
        assert_eq!(s.value(10_000), 0.01);
    }

    #[test]
    fn learning_rate_and_stage_schedule() {
        let mut c = TrainConfig::new("chain:5", AgentKind::Avdqn);
        c.episodes = 1000;
        assert_eq!(c.omega(), 800);
        assert_eq!(c.lr_at(800), 1e-3);
        assert!((c.lr_at(810) - 1e-4).abs() < 1e-18);
        assert_eq!(c.stage_at(800), Stage::PreTrain);
        assert_eq!(c.stage_at(801), Stage::FineTune);
        assert_eq!(c.gamma(), 1.0);
        assert_eq!(
            TrainConfig::new("cartpole-v0", AgentKind::Dqn).gamma(),
            0.99
        );
        assert_eq!(TrainConfig::new("cartpole-v0", AgentKind::Dqn).lr(), 1e-2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = TrainConfig::new("chain:5", AgentKind::Avdqn);
        let mut c = base.clone();
        c.tau = 0;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        for g in [0.0, 1.5, f64::NAN] {
            let mut c = base.clone();
            c.gamma = Some(g);
            assert!(c.validate().is_err(), "gamma {g}");
        }
        let mut c = base.clone();
        c.omega = Some(c.episodes + 1);
        assert!(c.validate().is_err());
        let mut c = base;
        c.grad_clip = Some(0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn shifting_every_mean_keeps_the_action() {
        let heads = split_heads(&[0.3, -0.5, 0.1, 0.2, -0.4, 1.0]);
        let shifted: Vec<_> = heads
            .iter()
            .map(|h| PosteriorParams::from_raw(h.mu + 7.25, h.raw_scale))
            .collect();
        for stage in [Stage::PreTrain, Stage::FineTune] {
            let mut r1 = ChaCha8Rng::seed_from_u64(3);
            let mut r2 = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..500 {
                let a = argmax(&sample_heads(&heads, stage, &mut r1));
                let b = argmax(&sample_heads(&shifted, stage, &mut r2));
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn targets_ignore_the_eval_network() {
        let c = small_config("chain:5", AgentKind::Avdqn);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut agent = Agent::new(&c, 5, 2, &mut rng).unwrap();
        let batch = Batch {
            indices: vec![0, 1],
            transitions: vec![
                transition(5, 1, 1, 0.0, 2, false),
                transition(5, 0, 0, 0.001, 0, true),
            ],
        };
        let before = agent
            .compute_targets(&batch, Stage::FineTune, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let perturbed: Vec<f64> = agent.eval_net().params().iter().map(|p| p + 0.5).collect();
        agent.eval_net_mut().set_params(&perturbed).unwrap();
        let after = agent
            .compute_targets(&batch, Stage::FineTune, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(before, after);
        assert_eq!(after[1], 0.001);
    }

    #[test]
    fn target_syncs_every_tau_steps() {
        let mut c = small_config("chain:5", AgentKind::Avdqn);
        c.tau = 5;
        c.batch = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut agent = Agent::new(&c, 5, 2, &mut rng).unwrap();
        agent.remember(transition(5, 1, 1, 0.0, 2, false));
        let initial = agent.target_net().params();
        for step in 1..=5 {
            let d = agent.train_step(Stage::PreTrain, 0.1, &mut rng).unwrap();
            assert!(d.learned && !d.skipped);
            if step < 5 {
                assert!(!d.synced);
                assert_eq!(agent.target_net().params(), initial);
            } else {
                assert!(d.synced);
            }
        }
        assert_ne!(agent.target_net().params(), initial);
        assert_eq!(agent.target_net().params(), agent.eval_net().params());
    }

    #[test]
    fn no_learning_before_a_full_batch() {
        let c = small_config("chain:5", AgentKind::Avdqn);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agent = Agent::new(&c, 5, 2, &mut rng).unwrap();
        let params = agent.eval_net().params();
        for _ in 0..3 {
            agent.remember(transition(5, 1, 0, 0.0, 0, false));
            let d = agent.train_step(Stage::PreTrain, 0.1, &mut rng).unwrap();
            assert!(!d.learned);
        }
        assert_eq!(agent.eval_net().params(), params);
        assert_eq!(agent.step_counter(), 3);
        agent.remember(transition(5, 1, 0, 0.0, 0, false));
        assert!(
            agent
                .train_step(Stage::PreTrain, 0.1, &mut rng)
                .unwrap()
                .learned
        );
    }

    #[test]
    fn dqn_fits_the_reward_with_zero_discount() {
        let mut c = small_config("chain:5", AgentKind::Dqn);
        c.gamma = Some(1e-300);
        c.batch = 1;
        c.capacity = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut agent = Agent::new(&c, 5, 2, &mut rng).unwrap();
        agent.remember(transition(5, 2, 1, 0.75, 3, false));
        for _ in 0..2000 {
            agent.dqn_train_step(0.05, &mut rng).unwrap();
        }
        let q = agent.eval_net().predict(&one_hot(2, 5)).unwrap();
        assert!((q[1] - 0.75).abs() < 1e-6, "{q:?}");
    }

    #[test]
    fn collapsed_heads_step_like_dqn() {
        let (n, actions) = (5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut dc = small_config("chain:5", AgentKind::Dqn);
        dc.batch = 1;
        dc.capacity = 1;
        dc.gamma = Some(0.9);
        dc.replay = Some(ReplayKind::Uniform);
        let mut ac = dc.clone();
        ac.agent = AgentKind::Avdqn;
        ac.entropy_coef = 0.0;
        let mut dqn = Agent::new(&dc, n, actions, &mut rng).unwrap();
        let mut avdqn = Agent::new(&ac, n, actions, &mut rng).unwrap();

        // Same hidden layers; the last layer's mean rows copy the DQN rows and
        // the scale rows pin softplus(raw) to the floor.
        let layers = dqn.eval_net().layers();
        let mut flat = Vec::new();
        for l in &layers[..layers.len() - 1] {
            flat.extend_from_slice(l.weights());
            flat.extend_from_slice(l.bias());
        }
        let last = &layers[layers.len() - 1];
        for a in 0..actions {
            flat.extend((0..last.n_in()).map(|i| last.weight(a, i)));
            flat.extend(std::iter::repeat_n(0.0, last.n_in()));
        }
        for a in 0..actions {
            flat.push(last.bias()[a]);
            flat.push(-1e3);
        }
        avdqn.eval_net_mut().set_params(&flat).unwrap();
        avdqn.target_net_mut().set_params(&flat).unwrap();

        let t = transition(n, 2, 1, 0.5, 3, false);
        dqn.remember(t.clone());
        avdqn.remember(t);
        for _ in 0..3 {
            dqn.dqn_train_step(0.01, &mut rng).unwrap();
            avdqn.train_step(Stage::FineTune, 0.01, &mut rng).unwrap();
            for s in 0..n {
                let x = one_hot(s, n);
                let q = dqn.eval_net().predict(&x).unwrap();
                let h = avdqn.heads(&x).unwrap();
                for a in 0..actions {
                    assert!((q[a] - h[a].mu).abs() < 1e-12, "{} vs {}", q[a], h[a].mu);
                }
            }
        }
    }

    #[test]
    fn dqn_selection_extremes() {
        let c = small_config("chain:5", AgentKind::Dqn);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let agent = Agent::new(&c, 5, 2, &mut rng).unwrap();
        let x = one_hot(1, 5);
        let greedy = argmax(&agent.eval_net().predict(&x).unwrap());
        for _ in 0..50 {
            assert_eq!(agent.dqn_select(&x, 0.0, &mut rng).unwrap(), greedy);
        }
        let mut seen = [false; 2];
        for _ in 0..100 {
            seen[agent.dqn_select(&x, 1.0, &mut rng).unwrap()] = true;
        }
        assert_eq!(seen, [true, true]);
        assert!(matches!(
            agent.select_action(&x, Stage::PreTrain, &mut rng),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn identical_configs_reproduce() {
        let mut c = small_config("chain:5", AgentKind::Avdqn);
        c.episodes = 20;
        c.omega = Some(10);
        let a = train(&c).unwrap();
        let b = train(&c).unwrap();
        assert_eq!(a, b);
        assert!(a.is_consistent());
        assert_eq!(a.trajectories.len(), 20);
        assert!(a.episodes.iter().all(|e| e.seconds == 0.0));
        c.seed = 1;
        assert_ne!(train(&c).unwrap().rewards(), a.rewards());
    }

    #[test]
    fn single_family_runs_execute() {
        for omega in [0, 6] {
            for agent in [AgentKind::Avdqn, AgentKind::Dqn] {
                let mut c = small_config("chain:5", agent);
                c.episodes = 6;
                c.omega = Some(omega);
                let r = train(&c).unwrap();
                let expected = if omega == 0 {
                    Stage::FineTune
                } else {
                    Stage::PreTrain
                };
                assert!(r.episodes.iter().all(|e| e.stage == expected));
            }
        }
        let mut c = small_config("acrobot-v1", AgentKind::Avdqn);
        c.episodes = 1;
        assert!(train(&c).unwrap().trajectories.is_empty());
    }

    #[test]
    fn tabular_update_rules() {
        let mut q = TabularQ::new(3, 2);
        let t = TabularTransition {
            s: 1,
            a: 0,
            r: 1.0,
            s_next: 2,
            done: true,
        };
        tabular_q_update(&mut q, &t, 0.0, 1.0).unwrap();
        assert_eq!(q.get(1, 0), 0.0);
        tabular_q_update(&mut q, &t, 1.0, 1.0).unwrap();
        assert_eq!(q.get(1, 0), 1.0);
        let boot = TabularTransition {
            s: 0,
            a: 1,
            r: 0.5,
            s_next: 1,
            done: false,
        };
        q.update(&boot, 0.5, 0.9).unwrap();
        assert!((q.get(0, 1) - 0.5 * (0.5 + 0.9)).abs() < 1e-15);
        assert_eq!(q.greedy(0), 1);
        assert!(q
            .update(&TabularTransition { s: 3, ..boot }, 1.0, 1.0)
            .is_err());
        assert!(q
            .update(&TabularTransition { a: 2, ..boot }, 1.0, 1.0)
            .is_err());
    }

    #[test]
    fn tabular_needs_a_discrete_env() {
        let env = make_env("cartpole-v0").unwrap();
        assert!(matches!(
            TabularQ::for_env(env.as_ref()),
            Err(Error::Unsupported(_))
        ));
        let chain = make_env("chain:5").unwrap();
        assert_eq!(TabularQ::for_env(chain.as_ref()).unwrap().n_states(), 5);
    }
}
