//! Long-term memory: leaky-integrator reservoirs with fixed random weights,
//! trainable nonlinear readouts, and the group ensemble that emits memory
//! tokens.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::spectral::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::numerics::{apply_sparsity, gaussian_matrix, power_iteration, uniform_matrix, Activation, Matrix, Rng};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

const STREAM_RECURRENT: u64 = 0;
const STREAM_SPARSITY: u64 = 1;
const STREAM_INPUT: u64 = 2;
const STREAM_BIAS: u64 = 3;
const STREAM_READOUT: u64 = 4;

/// Half-width of the seeded-random initial state.
pub const INIT_STATE_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirConfig {
    /// Reservoir units N_r.
    pub size: usize,
    /// Input units N_u.
    pub input_dim: usize,
    pub leaky_alpha: f64,
    pub spectral_radius: f64,
    pub sparsity: f64,
    pub input_scaling: f64,
    pub readout_dim: usize,
    pub readout_activation: Activation,
    pub seed: u64,
    /// Stddev of the raw recurrent draw. Irrelevant after spectral rescaling
    /// except through rounding.
    #[serde(default = "one")]
    pub weight_stddev: f64,
}

fn one() -> f64 {
    1.0
}

impl ReservoirConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.size == 0 {
            problems.push("size must be positive".to_string());
        }
        if self.input_dim == 0 {
            problems.push("input_dim must be positive".to_string());
        }
        if self.readout_dim == 0 {
            problems.push("readout_dim must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.leaky_alpha) {
            problems.push(format!("leaky_alpha {} outside [0, 1]", self.leaky_alpha));
        }
        if !(self.spectral_radius > 0.0 && self.spectral_radius.is_finite()) {
            problems.push(format!("spectral_radius {} must be positive", self.spectral_radius));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            problems.push(format!("sparsity {} outside [0, 1]", self.sparsity));
        }
        if !(self.input_scaling > 0.0 && self.input_scaling.is_finite()) {
            problems.push(format!("input_scaling {} must be positive", self.input_scaling));
        }
        if !(self.weight_stddev > 0.0) {
            problems.push(format!("weight_stddev {} must be positive", self.weight_stddev));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Zero,
    SeededRandom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReservoirState<T> {
    pub x: Vec<T>,
    pub step_count: usize,
}

/// Trainable readout tensors owned by the parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Readout {
    /// m × N_r
    pub weight: ParamId,
    /// 1 × m
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Reservoir<T> {
    config: ReservoirConfig,
    w: Matrix<T>,
    w_in: Matrix<T>,
    theta: Vec<T>,
    readout: Readout,
}

impl<T: Scalar> Reservoir<T> {
    /// Draws the fixed weights from `config.seed` and registers the readout
    /// tensors under `name` in `store`.
    ///
    /// `W` is Gaussian, sparsified, then rescaled to the configured spectral
    /// radius. `W_in` and `θ` are uniform on `[−σ_in, σ_in]`. The readout
    /// weight is Gaussian with stddev `sqrt(2 / N_r)` and the bias is zero.
    pub fn build(config: ReservoirConfig, store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        config.validate()?;
        let (n, nu, m) = (config.size, config.input_dim, config.readout_dim);
        let root = Rng::new(config.seed, 0);

        let raw: Matrix<f64> = gaussian_matrix(&mut root.split(STREAM_RECURRENT), n, n, 0.0, config.weight_stddev)?;
        let raw = apply_sparsity(&mut root.split(STREAM_SPARSITY), &raw, config.sparsity)?;
        let est = power_iteration(&raw, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        if !est.converged {
            return Err(Error::Construction {
                seed: config.seed,
                reason: format!(
                    "power iteration did not converge in {} iterations (last estimate {})",
                    est.iterations, est.radius
                ),
            });
        }
        if est.radius <= 0.0 {
            return Err(Error::Construction {
                seed: config.seed,
                reason: "recurrent matrix has zero spectral radius".into(),
            });
        }
        let factor = config.spectral_radius / est.radius;
        let w = raw.map(|v| v * factor);
        let w = Matrix::from_vec(n, n, w.as_slice().iter().map(|&v| T::of(v)).collect())?;

        let s = config.input_scaling;
        let w_in = uniform_matrix(&mut root.split(STREAM_INPUT), n, nu, -s, s)?;
        let theta = uniform_matrix::<T>(&mut root.split(STREAM_BIAS), 1, n, -s, s)?.into_vec();

        let w_out = gaussian_matrix(&mut root.split(STREAM_READOUT), m, n, 0.0, (2.0 / n as f64).sqrt())?;
        let readout = Readout {
            weight: store.add(format!("{name}.w_out"), w_out),
            bias: store.add(format!("{name}.b_out"), Matrix::zeros(1, m)),
        };

        Ok(Self {
            config,
            w,
            w_in,
            theta,
            readout,
        })
    }

    pub fn config(&self) -> &ReservoirConfig {
        &self.config
    }

    pub fn recurrent(&self) -> &Matrix<T> {
        &self.w
    }

    pub fn input_weights(&self) -> &Matrix<T> {
        &self.w_in
    }

    pub fn bias(&self) -> &[T] {
        &self.theta
    }

    pub fn readout_params(&self) -> Readout {
        self.readout
    }

    /// Replaces the fixed weights. Meant for hand-built instances in tests
    /// and oracles; production reservoirs come from [`Reservoir::build`].
    pub fn with_fixed_weights(mut self, w: Matrix<T>, w_in: Matrix<T>, theta: Vec<T>) -> Result<Self> {
        let n = self.config.size;
        if w.shape() != (n, n) || w_in.shape() != (n, self.config.input_dim) || theta.len() != n {
            return Err(Error::dim("fixed weight shapes do not match the config"));
        }
        self.w = w;
        self.w_in = w_in;
        self.theta = theta;
        Ok(self)
    }

    pub fn init_state(&self, mode: InitMode, rng: &mut Rng) -> ReservoirState<T> {
        let x = match mode {
            InitMode::Zero => vec![T::zero(); self.config.size],
            InitMode::SeededRandom => (0..self.config.size)
                .map(|_| T::of(rng.uniform_range(-INIT_STATE_SCALE, INIT_STATE_SCALE)))
                .collect(),
        };
        ReservoirState { x, step_count: 0 }
    }

    /// `x_t = (1 − α) x_{t−1} + α tanh(W_in h_t + θ + W x_{t−1})`
    pub fn step(&self, state: &ReservoirState<T>, h: &[T]) -> Result<ReservoirState<T>> {
        if state.x.len() != self.config.size {
            return Err(Error::dim(format!(
                "state has {} units, reservoir has {}",
                state.x.len(),
                self.config.size
            )));
        }
        let drive = self.w_in.matvec(h)?;
        let recur = self.w.matvec(&state.x)?;
        let alpha = T::of(self.config.leaky_alpha);
        let keep = T::one() - alpha;
        let x = state
            .x
            .iter()
            .zip(drive.iter().zip(&recur).zip(&self.theta))
            .map(|(&prev, ((&d, &r), &b))| keep * prev + alpha * (d + b + r).tanh())
            .collect();
        Ok(ReservoirState {
            x,
            step_count: state.step_count + 1,
        })
    }

    /// `σ(W_out x + θ_out)`
    pub fn readout(&self, store: &ParamStore<T>, state: &ReservoirState<T>) -> Result<Vec<T>> {
        if state.x.len() != self.config.size {
            return Err(Error::dim("readout state width"));
        }
        let w_out = store.get(self.readout.weight);
        let b_out = store.get(self.readout.bias).as_slice();
        let act = self.config.readout_activation;
        Ok(w_out
            .matvec(&state.x)?
            .into_iter()
            .zip(b_out)
            .map(|(v, &b)| act.apply(v + b))
            .collect())
    }

    /// Readouts of stacked states (one per row) recorded on `tape`, so that
    /// gradients reach `W_out` and `θ_out` but stop at the states.
    pub fn readout_on_tape(&self, tape: &mut Tape<'_, T>, states: Matrix<T>) -> Result<Var> {
        let x = tape.constant(states);
        let w = tape.param(self.readout.weight);
        let b = tape.param(self.readout.bias);
        let pre = tape.matmul_t(x, w)?;
        let pre = tape.add_row(pre, b)?;
        Ok(tape.activate(pre, self.config.readout_activation))
    }
}

/// Ensemble of L reservoirs sharing one input, with a readout history window
/// of `k` steps.
#[derive(Clone, Debug)]
pub struct GroupReservoir<T> {
    members: Vec<Reservoir<T>>,
    history: usize,
}

impl<T: Scalar> GroupReservoir<T> {
    pub fn new(members: Vec<Reservoir<T>>, history: usize) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("a reservoir group needs at least one member".into()))?;
        if history == 0 {
            return Err(Error::Config("history window k must be positive".into()));
        }
        let (m, nu) = (first.config.readout_dim, first.config.input_dim);
        if members
            .iter()
            .any(|r| r.config.readout_dim != m || r.config.input_dim != nu)
        {
            return Err(Error::Config(
                "group members must share readout_dim and input_dim".into(),
            ));
        }
        Ok(Self { members, history })
    }

    /// Builds every member from its config, registering readouts as
    /// `reservoir.{i}.*`.
    pub fn build(configs: &[ReservoirConfig], history: usize, store: &mut ParamStore<T>) -> Result<Self> {
        let members = configs
            .iter()
            .enumerate()
            .map(|(i, c)| Reservoir::build(c.clone(), store, &format!("reservoir.{i}")))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members, history)
    }

    pub fn members(&self) -> &[Reservoir<T>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Reservoir<T>] {
        &mut self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn readout_dim(&self) -> usize {
        self.members[0].config.readout_dim
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].config.input_dim
    }

    pub fn configs(&self) -> Vec<ReservoirConfig> {
        self.members.iter().map(|m| m.config.clone()).collect()
    }

    /// Steps every member independently on the shared input.
    pub fn group_step(&self, states: &[ReservoirState<T>], h: &[T]) -> Result<Vec<ReservoirState<T>>> {
        self.check_states(states)?;
        self.members.iter().zip(states).map(|(r, s)| r.step(s, h)).collect()
    }

    /// `o_t = h_t^1 ⊕ … ⊕ h_t^L`
    pub fn group_readout(&self, store: &ParamStore<T>, states: &[ReservoirState<T>]) -> Result<Vec<T>> {
        self.check_states(states)?;
        let mut out = Vec::with_capacity(self.len() * self.readout_dim());
        for (r, s) in self.members.iter().zip(states) {
            out.extend(r.readout(store, s)?);
        }
        Ok(out)
    }

    fn check_states(&self, states: &[ReservoirState<T>]) -> Result<()> {
        if states.len() != self.members.len() {
            return Err(Error::dim(format!(
                "{} states for {} reservoirs",
                states.len(),
                self.members.len()
            )));
        }
        Ok(())
    }
}

/// Per-corpus mutable memory: current member states plus the states at the
/// last `k` steps, oldest first. Readouts are recomputed from the recorded
/// states so that they always reflect the current readout parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMemory<T> {
    states: Vec<ReservoirState<T>>,
    recent: VecDeque<Vec<Vec<T>>>,
    steps: usize,
}

impl<T: Scalar> GroupMemory<T> {
    pub fn init(group: &GroupReservoir<T>, mode: InitMode, rng: &Rng) -> Self {
        let states = group
            .members
            .iter()
            .enumerate()
            .map(|(i, r)| r.init_state(mode, &mut rng.split(i as u64)))
            .collect();
        Self {
            states,
            recent: VecDeque::with_capacity(group.history),
            steps: 0,
        }
    }

    pub fn states(&self) -> &[ReservoirState<T>] {
        &self.states
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn history_len(&self) -> usize {
        self.recent.len()
    }

    /// One group step on input `h`; the new states enter the history window.
    pub fn advance(&mut self, group: &GroupReservoir<T>, h: &[T]) -> Result<()> {
        let next = group.group_step(&self.states, h)?;
        if self.recent.len() == group.history {
            self.recent.pop_front();
        }
        self.recent.push_back(next.iter().map(|s| s.x.clone()).collect());
        self.states = next;
        self.steps += 1;
        Ok(())
    }

    /// M×m matrix of readouts over the last `min(k, steps)` steps: oldest
    /// step first, members in order within a step.
    pub fn memory_tokens(&self, group: &GroupReservoir<T>, store: &ParamStore<T>) -> Result<Matrix<T>> {
        if self.steps == 0 {
            return Err(Error::EmptyHistory);
        }
        let mut rows = Vec::with_capacity(self.recent.len() * group.len());
        for snapshot in &self.recent {
            for (r, x) in group.members.iter().zip(snapshot) {
                rows.push(r.readout(
                    store,
                    &ReservoirState {
                        x: x.clone(),
                        step_count: 0,
                    },
                )?);
            }
        }
        Matrix::from_rows(&rows)
    }

    /// Same rows as [`GroupMemory::memory_tokens`], recorded on the tape.
    pub fn memory_tokens_on_tape(&self, group: &GroupReservoir<T>, tape: &mut Tape<'_, T>) -> Result<Var> {
        if self.steps == 0 {
            return Err(Error::EmptyHistory);
        }
        let steps = self.recent.len();
        let mut per_member = Vec::with_capacity(group.len());
        for (l, r) in group.members.iter().enumerate() {
            let rows: Vec<Vec<T>> = self.recent.iter().map(|snap| snap[l].clone()).collect();
            per_member.push(r.readout_on_tape(tape, Matrix::from_rows(&rows)?)?);
        }
        let mut rows = Vec::with_capacity(steps * group.len());
        for t in 0..steps {
            for out in &per_member {
                rows.push(tape.row(*out, t)?);
            }
        }
        tape.concat_rows(&rows)
    }
}

/// Member sizes of the shipped full-scale group.
pub const TABLE_SIZES: [usize; 5] = [1500, 1600, 1700, 1800, 1900];
/// Member sizes of the desk-scale profile.
pub const DESK_SIZES: [usize; 5] = [60, 70, 80, 90, 100];
pub const TABLE_SPECTRAL_RADII: [f64; 5] = [0.9, 0.85, 0.8, 0.75, 0.7];
pub const TABLE_LEAKY_ALPHAS: [f64; 5] = [0.48, 0.49, 0.50, 0.51, 0.52];
pub const TABLE_SPARSITIES: [f64; 5] = [0.6, 0.55, 0.5, 0.45, 0.4];
pub const DEFAULT_INPUT_SCALING: f64 = 0.1;
pub const DEFAULT_HISTORY: usize = 2;

/// One config per table row with the given sizes; member seeds are derived
/// from `seed`.
pub fn table_group(
    sizes: &[usize],
    input_dim: usize,
    readout_dim: usize,
    activation: Activation,
    seed: u64,
) -> Vec<ReservoirConfig> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let row = i % TABLE_SPECTRAL_RADII.len();
            ReservoirConfig {
                size,
                input_dim,
                leaky_alpha: TABLE_LEAKY_ALPHAS[row],
                spectral_radius: TABLE_SPECTRAL_RADII[row],
                sparsity: TABLE_SPARSITIES[row],
                input_scaling: DEFAULT_INPUT_SCALING,
                readout_dim,
                readout_activation: activation,
                seed: crate::numerics::rng::mix_stream(seed, i as u64),
                weight_stddev: 1.0,
            }
        })
        .collect()
}
