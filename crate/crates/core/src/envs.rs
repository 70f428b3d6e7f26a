//! Episodic environments: the chain MDP and the classic-control tasks.
//!
//! Control dynamics follow the published Gym equations and constants
//! (Euler cart-pole, RK4 "book" acrobot, cosine-hill mountain car).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Common interface of every environment.
pub trait Environment: Send {
    fn id(&self) -> String;
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Maximum number of steps in an episode.
    fn horizon(&self) -> usize;
    /// Start a new episode; the seed fixes any random initial state.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    /// Observation vector for the current internal state.
    fn encode(&self) -> Vec<f64>;
    /// Steps taken in the current episode.
    fn elapsed(&self) -> usize;
    /// 1-based chain position, for environments that have one.
    fn chain_position(&self) -> Option<usize> {
        None
    }
}

/// Build an environment from its id: `chain:N`, `cartpole-v0`, `cartpole-v1`,
/// `acrobot-v1` or `mountaincar-v0`.
pub fn make_env(id: &str) -> Result<Box<dyn Environment>> {
    let id = id.trim().to_ascii_lowercase();
    if let Some(n) = id.strip_prefix("chain:") {
        let n: usize = n.parse().map_err(|_| Error::UnknownEnv(id.clone()))?;
        return Ok(Box::new(ChainMdp::new(n)?));
    }
    match id.as_str() {
        "cartpole-v0" => Ok(Box::new(CartPole::v0())),
        "cartpole-v1" => Ok(Box::new(CartPole::v1())),
        "acrobot-v1" => Ok(Box::new(Acrobot::new())),
        "mountaincar-v0" => Ok(Box::new(MountainCar::new())),
        _ => Err(Error::UnknownEnv(id)),
    }
}

fn check_action(action: usize, n_actions: usize) -> Result<()> {
    if action >= n_actions {
        return Err(Error::InvalidAction { action, n_actions });
    }
    Ok(())
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

// ---------------------------------------------------------------------------
// Chain MDP

/// `n` states in a line. The agent starts at `s_2` and acts for `n + 9` steps.
/// Going left from `s_1` pays 1/1000, going right from `s_n` pays 1.
#[derive(Debug, Clone)]
pub struct ChainMdp {
    n: usize,
    position: usize,
    t: usize,
}

impl ChainMdp {
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;
    pub const SMALL_REWARD: f64 = 1.0 / 1000.0;
    pub const LARGE_REWARD: f64 = 1.0;

    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidConfig(format!(
                "chain needs at least 3 states, got {n}"
            )));
        }
        Ok(Self {
            n,
            position: 2,
            t: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Deterministic transition from `position`.
    pub fn transition(n: usize, position: usize, action: usize) -> (usize, f64) {
        if action == Self::LEFT {
            let r = if position == 1 {
                Self::SMALL_REWARD
            } else {
                0.0
            };
            (position.saturating_sub(1).max(1), r)
        } else {
            let r = if position == n {
                Self::LARGE_REWARD
            } else {
                0.0
            };
            ((position + 1).min(n), r)
        }
    }
}

impl Environment for ChainMdp {
    fn id(&self) -> String {
        format!("chain:{}", self.n)
    }

    fn obs_dim(&self) -> usize {
        self.n
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.n + 9
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.position = 2;
        self.t = 0;
        self.encode()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        check_action(action, 2)?;
        if self.t >= self.horizon() {
            return Err(Error::EpisodeFinished);
        }
        let (next, reward) = Self::transition(self.n, self.position, action);
        self.position = next;
        self.t += 1;
        Ok(StepResult {
            next_observation: self.encode(),
            reward,
            done: self.t == self.horizon(),
        })
    }

    fn encode(&self) -> Vec<f64> {
        one_hot(self.position - 1, self.n)
    }

    fn elapsed(&self) -> usize {
        self.t
    }

    fn chain_position(&self) -> Option<usize> {
        Some(self.position)
    }
}

// ---------------------------------------------------------------------------
// CartPole

const CP_GRAVITY: f64 = 9.8;
const CP_MASS_CART: f64 = 1.0;
const CP_MASS_POLE: f64 = 0.1;
const CP_TOTAL_MASS: f64 = CP_MASS_CART + CP_MASS_POLE;
const CP_HALF_LENGTH: f64 = 0.5;
const CP_POLE_MASS_LENGTH: f64 = CP_MASS_POLE * CP_HALF_LENGTH;
const CP_FORCE: f64 = 10.0;
const CP_TAU: f64 = 0.02;
const CP_THETA_LIMIT: f64 = 12.0 * 2.0 * PI / 360.0;
const CP_X_LIMIT: f64 = 2.4;

/// `[x, x_dot, theta, theta_dot]`.
#[derive(Debug, Clone)]
pub struct CartPole {
    state: [f64; 4],
    horizon: usize,
    version: u8,
    t: usize,
    done: bool,
}

impl CartPole {
    pub fn v0() -> Self {
        Self::with_horizon(200, 0)
    }

    pub fn v1() -> Self {
        Self::with_horizon(500, 1)
    }

    fn with_horizon(horizon: usize, version: u8) -> Self {
        Self {
            state: [0.0; 4],
            horizon,
            version,
            t: 0,
            done: false,
        }
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    /// Place the system in an arbitrary state and start a fresh episode there.
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.t = 0;
        self.done = false;
    }

    /// One Euler step of the cart-pole equations of motion.
    pub fn dynamics(state: [f64; 4], action: usize) -> [f64; 4] {
        let [x, x_dot, theta, theta_dot] = state;
        let force = if action == 1 { CP_FORCE } else { -CP_FORCE };
        let (sin, cos) = theta.sin_cos();
        let temp = (force + CP_POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / CP_TOTAL_MASS;
        let theta_acc = (CP_GRAVITY * sin - cos * temp)
            / (CP_HALF_LENGTH * (4.0 / 3.0 - CP_MASS_POLE * cos * cos / CP_TOTAL_MASS));
        let x_acc = temp - CP_POLE_MASS_LENGTH * theta_acc * cos / CP_TOTAL_MASS;
        [
            x + CP_TAU * x_dot,
            x_dot + CP_TAU * x_acc,
            theta + CP_TAU * theta_dot,
            theta_dot + CP_TAU * theta_acc,
        ]
    }

    pub fn is_failure(state: &[f64; 4]) -> bool {
        state[0].abs() > CP_X_LIMIT || state[2].abs() > CP_THETA_LIMIT
    }
}

impl Environment for CartPole {
    fn id(&self) -> String {
        format!("cartpole-v{}", self.version)
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
        self.set_state(state);
        self.encode()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        check_action(action, 2)?;
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        self.state = Self::dynamics(self.state, action);
        self.t += 1;
        self.done = Self::is_failure(&self.state) || self.t >= self.horizon;
        Ok(StepResult {
            next_observation: self.encode(),
            reward: 1.0,
            done: self.done,
        })
    }

    fn encode(&self) -> Vec<f64> {
        self.state.to_vec()
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}

// ---------------------------------------------------------------------------
// Acrobot

const AC_DT: f64 = 0.2;
const AC_LINK_LENGTH_1: f64 = 1.0;
const AC_LINK_MASS_1: f64 = 1.0;
const AC_LINK_MASS_2: f64 = 1.0;
const AC_LINK_COM_1: f64 = 0.5;
const AC_LINK_COM_2: f64 = 0.5;
const AC_LINK_MOI: f64 = 1.0;
const AC_MAX_VEL_1: f64 = 4.0 * PI;
const AC_MAX_VEL_2: f64 = 9.0 * PI;
const AC_GRAVITY: f64 = 9.8;

/// `[theta1, theta2, dtheta1, dtheta2]`; actions apply torque -1, 0, +1.
#[derive(Debug, Clone)]
pub struct Acrobot {
    state: [f64; 4],
    t: usize,
    done: bool,
}

impl Default for Acrobot {
    fn default() -> Self {
        Self::new()
    }
}

impl Acrobot {
    pub const HORIZON: usize = 500;

    pub fn new() -> Self {
        Self {
            state: [0.0; 4],
            t: 0,
            done: false,
        }
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.t = 0;
        self.done = false;
    }

    fn derivatives(s: [f64; 5]) -> [f64; 5] {
        let (m1, m2) = (AC_LINK_MASS_1, AC_LINK_MASS_2);
        let (l1, lc1, lc2) = (AC_LINK_LENGTH_1, AC_LINK_COM_1, AC_LINK_COM_2);
        let (i1, i2, g) = (AC_LINK_MOI, AC_LINK_MOI, AC_GRAVITY);
        let [theta1, theta2, dtheta1, dtheta2, torque] = s;
        let d1 =
            m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * theta2.cos()) + i1 + i2;
        let d2 = m2 * (lc2 * lc2 + l1 * lc2 * theta2.cos()) + i2;
        let phi2 = m2 * lc2 * g * (theta1 + theta2 - PI / 2.0).cos();
        let phi1 = -m2 * l1 * lc2 * dtheta2 * dtheta2 * theta2.sin()
            - 2.0 * m2 * l1 * lc2 * dtheta2 * dtheta1 * theta2.sin()
            + (m1 * lc1 + m2 * l1) * g * (theta1 - PI / 2.0).cos()
            + phi2;
        let ddtheta2 =
            (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1 * dtheta1 * theta2.sin() - phi2)
                / (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
        let ddtheta1 = -(d2 * ddtheta2 + phi1) / d1;
        [dtheta1, dtheta2, ddtheta1, ddtheta2, 0.0]
    }

    /// One RK4 step of length `dt`, then angle wrapping and velocity bounds.
    pub fn dynamics(state: [f64; 4], action: usize) -> [f64; 4] {
        let torque = action as f64 - 1.0;
        let y0 = [state[0], state[1], state[2], state[3], torque];
        let shift = |y: [f64; 5], k: [f64; 5], h: f64| {
            std::array::from_fn::<f64, 5, _>(|i| y[i] + h * k[i])
        };
        let k1 = Self::derivatives(y0);
        let k2 = Self::derivatives(shift(y0, k1, AC_DT / 2.0));
        let k3 = Self::derivatives(shift(y0, k2, AC_DT / 2.0));
        let k4 = Self::derivatives(shift(y0, k3, AC_DT));
        let y: [f64; 5] = std::array::from_fn(|i| {
            y0[i] + AC_DT / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        });
        [
            wrap(y[0], -PI, PI),
            wrap(y[1], -PI, PI),
            y[2].clamp(-AC_MAX_VEL_1, AC_MAX_VEL_1),
            y[3].clamp(-AC_MAX_VEL_2, AC_MAX_VEL_2),
        ]
    }

    pub fn is_terminal(state: &[f64; 4]) -> bool {
        -state[0].cos() - (state[1] + state[0]).cos() > 1.0
    }
}

fn wrap(mut x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    while x > hi {
        x -= span;
    }
    while x < lo {
        x += span;
    }
    x
}

impl Environment for Acrobot {
    fn id(&self) -> String {
        "acrobot-v1".into()
    }

    fn obs_dim(&self) -> usize {
        6
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn horizon(&self) -> usize {
        Self::HORIZON
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = std::array::from_fn(|_| rng.gen_range(-0.1..0.1));
        self.set_state(state);
        self.encode()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        check_action(action, 3)?;
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        self.state = Self::dynamics(self.state, action);
        self.t += 1;
        let terminal = Self::is_terminal(&self.state);
        self.done = terminal || self.t >= Self::HORIZON;
        Ok(StepResult {
            next_observation: self.encode(),
            reward: if terminal { 0.0 } else { -1.0 },
            done: self.done,
        })
    }

    /// `[cos t1, sin t1, cos t2, sin t2, dt1, dt2]`.
    fn encode(&self) -> Vec<f64> {
        let [t1, t2, d1, d2] = self.state;
        vec![t1.cos(), t1.sin(), t2.cos(), t2.sin(), d1, d2]
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}

// ---------------------------------------------------------------------------
// MountainCar

const MC_MIN_POSITION: f64 = -1.2;
const MC_MAX_POSITION: f64 = 0.6;
const MC_MAX_SPEED: f64 = 0.07;
const MC_GOAL_POSITION: f64 = 0.5;
const MC_GOAL_VELOCITY: f64 = 0.0;
const MC_FORCE: f64 = 0.001;
const MC_GRAVITY: f64 = 0.0025;

/// `[position, velocity]`; actions push left, nothing, right.
#[derive(Debug, Clone)]
pub struct MountainCar {
    state: [f64; 2],
    t: usize,
    done: bool,
}

impl Default for MountainCar {
    fn default() -> Self {
        Self::new()
    }
}

impl MountainCar {
    pub const HORIZON: usize = 200;

    pub fn new() -> Self {
        Self {
            state: [-0.5, 0.0],
            t: 0,
            done: false,
        }
    }

    pub fn state(&self) -> [f64; 2] {
        self.state
    }

    pub fn set_state(&mut self, state: [f64; 2]) {
        self.state = state;
        self.t = 0;
        self.done = false;
    }

    pub fn dynamics(state: [f64; 2], action: usize) -> [f64; 2] {
        let [mut position, mut velocity] = state;
        velocity += (action as f64 - 1.0) * MC_FORCE + (3.0 * position).cos() * (-MC_GRAVITY);
        velocity = velocity.clamp(-MC_MAX_SPEED, MC_MAX_SPEED);
        position += velocity;
        position = position.clamp(MC_MIN_POSITION, MC_MAX_POSITION);
        if position == MC_MIN_POSITION && velocity < 0.0 {
            velocity = 0.0;
        }
        [position, velocity]
    }

    pub fn is_terminal(state: &[f64; 2]) -> bool {
        state[0] >= MC_GOAL_POSITION && state[1] >= MC_GOAL_VELOCITY
    }
}

impl Environment for MountainCar {
    fn id(&self) -> String {
        "mountaincar-v0".into()
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn horizon(&self) -> usize {
        Self::HORIZON
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.set_state([rng.gen_range(-0.6..-0.4), 0.0]);
        self.encode()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        check_action(action, 3)?;
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        self.state = Self::dynamics(self.state, action);
        self.t += 1;
        self.done = Self::is_terminal(&self.state) || self.t >= Self::HORIZON;
        Ok(StepResult {
            next_observation: self.encode(),
            reward: -1.0,
            done: self.done,
        })
    }

    fn encode(&self) -> Vec<f64> {
        self.state.to_vec()
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}
