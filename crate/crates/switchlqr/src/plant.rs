//! Ground-truth switched linear plant with an externally revealed switch
//! sequence and sub-Gaussian process noise.
//!
//! The plant is the simulation environment: `x_{t+1} = A x_t + B u_t + w`,
//! with a quadratic stage cost per mode. The switch sequence is revealed one
//! mode at a time; termination is announced after the final reveal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg;

/// Any state component beyond this magnitude aborts a simulation with a
/// divergence error instead of propagating overflow/NaN.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Error)]
pub enum PlantError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite entry in {0}")]
    NonFinite(String),
    #[error("state diverged at step {step} (|x| component exceeded {limit:e})")]
    Divergence { step: usize, limit: f64 },
    #[error("switch sequence already terminated")]
    SequenceTerminated,
    #[error("invalid mode id {0}")]
    InvalidMode(usize),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// One mode's `(A, B)` pair with its index in the mode set.
#[derive(Debug, Clone)]
pub struct ModeDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub mode_id: usize,
}

impl ModeDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, mode_id: usize) -> Result<Self, PlantError> {
        if a.nrows() != a.ncols() {
            return Err(PlantError::Shape("A must be square".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(PlantError::Shape("B row count must match A".into()));
        }
        if !linalg::all_finite(&a) || !linalg::all_finite(&b) {
            return Err(PlantError::NonFinite("mode dynamics".into()));
        }
        Ok(Self { a, b, mode_id })
    }

    /// State dimension n.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension m.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Stacked parameter matrix `Θ = (A, B)^T` of shape `(n+m) × n`.
    pub fn theta(&self) -> DMatrix<f64> {
        let n = self.n();
        let m = self.m();
        let mut theta = DMatrix::zeros(n + m, n);
        theta
            .view_mut((0, 0), (n, n))
            .copy_from(&self.a.transpose());
        theta
            .view_mut((n, 0), (m, n))
            .copy_from(&self.b.transpose());
        theta
    }

    /// Rebuild `(A, B)` from a stacked `(n+m) × n` parameter matrix.
    pub fn from_theta(theta: &DMatrix<f64>, n: usize, mode_id: usize) -> Result<Self, PlantError> {
        if theta.ncols() != n || theta.nrows() < n {
            return Err(PlantError::Shape("theta must be (n+m) x n".into()));
        }
        let m = theta.nrows() - n;
        let a = theta.view((0, 0), (n, n)).transpose().into_owned();
        let b = theta.view((n, 0), (m, n)).transpose().into_owned();
        Self::new(a, b, mode_id)
    }
}

/// Quadratic stage-cost matrices for one mode.
#[derive(Debug, Clone)]
pub struct CostMatrices {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl CostMatrices {
    /// Requires symmetry within 1e-12 and positive semidefiniteness.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, PlantError> {
        for (name, m) in [("Q", &q), ("R", &r)] {
            if m.nrows() != m.ncols() {
                return Err(PlantError::Shape(format!("{name} must be square")));
            }
            if (m - m.transpose()).abs().max() > 1e-12 {
                return Err(PlantError::InvalidParam(format!("{name} not symmetric")));
            }
            if linalg::min_eig(m) < -1e-12 {
                return Err(PlantError::InvalidParam(format!("{name} not PSD")));
            }
        }
        Ok(Self { q, r })
    }

    /// Check that the eigenvalues of Q and R lie in `[α0, α1]`.
    pub fn validate_bounds(&self, bounds: &ModeBounds) -> Result<(), PlantError> {
        for (name, m) in [("Q", &self.q), ("R", &self.r)] {
            let (lo, hi) = linalg::sym_eig_range(m);
            if lo < bounds.alpha0 - 1e-9 || hi > bounds.alpha1 + 1e-9 {
                return Err(PlantError::InvalidParam(format!(
                    "{name} eigenvalues [{lo}, {hi}] outside [{}, {}]",
                    bounds.alpha0, bounds.alpha1
                )));
            }
        }
        Ok(())
    }
}

/// Known side information for a mode: cost-eigenvalue range, a norm bound on
/// the stacked parameters, and an upper bound on the optimal average cost.
#[derive(Debug, Clone, Copy)]
pub struct ModeBounds {
    pub alpha0: f64,
    pub alpha1: f64,
    pub vartheta: f64,
    pub nu: f64,
}

impl ModeBounds {
    pub fn new(alpha0: f64, alpha1: f64, vartheta: f64, nu: f64) -> Result<Self, PlantError> {
        if !(alpha0 > 0.0 && alpha1 >= alpha0) {
            return Err(PlantError::InvalidParam("need 0 < alpha0 <= alpha1".into()));
        }
        if vartheta <= 0.0 || nu <= 0.0 {
            return Err(PlantError::InvalidParam(
                "vartheta, nu must be positive".into(),
            ));
        }
        Ok(Self {
            alpha0,
            alpha1,
            vartheta,
            nu,
        })
    }
}

/// Process-noise distribution kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    /// Gaussian resampled until every component is within six standard
    /// deviations, for bounded-support experiments.
    TruncatedGaussian,
    Zero,
}

/// i.i.d. process noise with covariance `σ_w² I`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    pub sigma_w: f64,
    pub kind: NoiseKind,
}

impl NoiseModel {
    pub fn new(sigma_w: f64, kind: NoiseKind) -> Result<Self, PlantError> {
        if sigma_w < 0.0 {
            return Err(PlantError::InvalidParam("sigma_w must be >= 0".into()));
        }
        Ok(Self { sigma_w, kind })
    }

    pub fn gaussian(sigma_w: f64) -> Self {
        Self {
            sigma_w,
            kind: NoiseKind::Gaussian,
        }
    }

    pub fn zero() -> Self {
        Self {
            sigma_w: 0.0,
            kind: NoiseKind::Zero,
        }
    }

    /// Draw one noise vector of dimension `n`.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        self.sample_into(&mut out, rng);
        out
    }

    /// Fill an existing vector with one noise draw (allocation free).
    pub fn sample_into(&self, out: &mut DVector<f64>, rng: &mut ChaCha8Rng) {
        match self.kind {
            NoiseKind::Zero => out.fill(0.0),
            NoiseKind::Gaussian => {
                for v in out.iter_mut() {
                    let draw: f64 = StandardNormal.sample(rng);
                    *v = self.sigma_w * draw;
                }
            }
            NoiseKind::TruncatedGaussian => {
                for v in out.iter_mut() {
                    *v = loop {
                        let draw: f64 = StandardNormal.sample(rng);
                        if draw.abs() <= 6.0 {
                            break self.sigma_w * draw;
                        }
                    };
                }
            }
        }
    }
}

/// One mode bundle: dynamics, cost matrices, and known bounds.
#[derive(Debug, Clone)]
pub struct Mode {
    pub dynamics: ModeDynamics,
    pub costs: CostMatrices,
    pub bounds: ModeBounds,
}

/// The switched plant: mode set, process noise, active mode, state, clock.
#[derive(Debug, Clone)]
pub struct SwitchedPlant {
    pub modes: Vec<Mode>,
    pub noise: NoiseModel,
    pub current_mode: usize,
    pub state: DVector<f64>,
    pub clock: u64,
}

impl SwitchedPlant {
    pub fn new(modes: Vec<Mode>, noise: NoiseModel, x0: DVector<f64>) -> Result<Self, PlantError> {
        if modes.is_empty() {
            return Err(PlantError::InvalidParam(
                "at least one mode required".into(),
            ));
        }
        let n = modes[0].dynamics.n();
        for mode in &modes {
            if mode.dynamics.n() != n {
                return Err(PlantError::Shape(
                    "all modes must share state dimension".into(),
                ));
            }
            mode.costs.validate_bounds(&mode.bounds)?;
            if mode.costs.q.nrows() != n || mode.costs.r.nrows() != mode.dynamics.m() {
                return Err(PlantError::Shape("cost matrix dimensions".into()));
            }
        }
        if x0.len() != n {
            return Err(PlantError::Shape("x0 dimension".into()));
        }
        Ok(Self {
            modes,
            noise,
            current_mode: 0,
            state: x0,
            clock: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.modes[0].dynamics.n()
    }

    pub fn mode(&self) -> &Mode {
        &self.modes[self.current_mode]
    }

    pub fn switch_to(&mut self, mode_id: usize) -> Result<(), PlantError> {
        if mode_id >= self.modes.len() {
            return Err(PlantError::InvalidMode(mode_id));
        }
        self.current_mode = mode_id;
        Ok(())
    }

    pub fn reset(&mut self, x0: DVector<f64>) -> Result<(), PlantError> {
        if x0.len() != self.n() {
            return Err(PlantError::Shape("x0 dimension".into()));
        }
        self.state = x0;
        self.clock = 0;
        Ok(())
    }
}

/// Advance the plant one step with input `u` and an explicit noise draw.
/// Returns the new state `A x + B u + w` and advances the clock.
pub fn step(
    plant: &mut SwitchedPlant,
    u: &DVector<f64>,
    noise_draw: &DVector<f64>,
) -> Result<DVector<f64>, PlantError> {
    let mode = &plant.modes[plant.current_mode];
    if u.len() != mode.dynamics.m() {
        return Err(PlantError::Shape(format!(
            "input has {} entries, mode {} expects {}",
            u.len(),
            mode.dynamics.mode_id,
            mode.dynamics.m()
        )));
    }
    if noise_draw.len() != plant.n() {
        return Err(PlantError::Shape("noise dimension".into()));
    }
    let next = &mode.dynamics.a * &plant.state + &mode.dynamics.b * u + noise_draw;
    plant.state = next.clone();
    plant.clock += 1;
    Ok(next)
}

/// Quadratic stage cost `x^T Q x + u^T R u`.
pub fn stage_cost(
    x: &DVector<f64>,
    u: &DVector<f64>,
    costs: &CostMatrices,
) -> Result<f64, PlantError> {
    if x.len() != costs.q.nrows() || u.len() != costs.r.nrows() {
        return Err(PlantError::Shape("stage cost dimensions".into()));
    }
    Ok((x.transpose() * &costs.q * x)[(0, 0)] + (u.transpose() * &costs.r * u)[(0, 0)])
}

/// How a switch sequence produces mode indices.
#[derive(Debug, Clone)]
pub enum SequenceGenerator {
    /// Fixed list of mode ids consumed front to back.
    Scripted(Vec<usize>),
    /// Seeded uniform draws over the mode set, terminating after a fixed
    /// number of reveals. `avoid_repeat` forbids revealing the current mode
    /// again (only meaningful with at least two modes).
    Seeded {
        num_modes: usize,
        reveals: usize,
        avoid_repeat: bool,
        rng: ChaCha8Rng,
    },
    /// Seeded uniform draws with a geometric stopping rule: after each reveal
    /// past the first, terminate with probability `stop_prob` (hard cap
    /// `max_reveals`).
    Geometric {
        num_modes: usize,
        stop_prob: f64,
        max_reveals: usize,
        avoid_repeat: bool,
        rng: ChaCha8Rng,
    },
}

/// Externally revealed switch sequence. Only the next mode is disclosed, and
/// termination is announced in place of a reveal.
#[derive(Debug, Clone)]
pub struct SwitchSequence {
    pub revealed: Vec<usize>,
    generator: SequenceGenerator,
    pub terminated: bool,
}

impl SwitchSequence {
    pub fn scripted(modes: Vec<usize>) -> Self {
        Self {
            revealed: Vec::new(),
            generator: SequenceGenerator::Scripted(modes),
            terminated: false,
        }
    }

    /// `reveals` total mode indices (so `reveals - 1` switches), then stop.
    pub fn seeded(num_modes: usize, reveals: usize, avoid_repeat: bool, rng: ChaCha8Rng) -> Self {
        Self {
            revealed: Vec::new(),
            generator: SequenceGenerator::Seeded {
                num_modes,
                reveals,
                avoid_repeat,
                rng,
            },
            terminated: false,
        }
    }

    pub fn geometric(
        num_modes: usize,
        stop_prob: f64,
        max_reveals: usize,
        avoid_repeat: bool,
        rng: ChaCha8Rng,
    ) -> Self {
        Self {
            revealed: Vec::new(),
            generator: SequenceGenerator::Geometric {
                num_modes,
                stop_prob,
                max_reveals,
                avoid_repeat,
                rng,
            },
            terminated: false,
        }
    }

    fn draw_mode(
        num_modes: usize,
        avoid_repeat: bool,
        last: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        loop {
            let candidate = rng.gen_range(0..num_modes);
            if avoid_repeat && num_modes > 1 && Some(candidate) == last {
                continue;
            }
            return candidate;
        }
    }
}

/// Reveal the next mode, or `None` when the sequence terminates.
/// Calling again after termination is a protocol error.
pub fn reveal_next(seq: &mut SwitchSequence) -> Result<Option<usize>, PlantError> {
    if seq.terminated {
        return Err(PlantError::SequenceTerminated);
    }
    let last = seq.revealed.last().copied();
    let next = match &mut seq.generator {
        SequenceGenerator::Scripted(modes) => {
            if seq.revealed.len() < modes.len() {
                Some(modes[seq.revealed.len()])
            } else {
                None
            }
        }
        SequenceGenerator::Seeded {
            num_modes,
            reveals,
            avoid_repeat,
            rng,
        } => {
            if seq.revealed.len() < *reveals {
                Some(SwitchSequence::draw_mode(
                    *num_modes,
                    *avoid_repeat,
                    last,
                    rng,
                ))
            } else {
                None
            }
        }
        SequenceGenerator::Geometric {
            num_modes,
            stop_prob,
            max_reveals,
            avoid_repeat,
            rng,
        } => {
            if seq.revealed.len() >= *max_reveals {
                None
            } else if !seq.revealed.is_empty() && rng.gen::<f64>() < *stop_prob {
                None
            } else {
                Some(SwitchSequence::draw_mode(
                    *num_modes,
                    *avoid_repeat,
                    last,
                    rng,
                ))
            }
        }
    };
    match next {
        Some(id) => {
            seq.revealed.push(id);
            Ok(Some(id))
        }
        None => {
            seq.terminated = true;
            Ok(None)
        }
    }
}

/// States, inputs and costs recorded over one epoch.
#[derive(Debug, Clone)]
pub struct EpochTrace {
    /// `duration + 1` states including the entry state.
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
}

impl EpochTrace {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }
}

/// Actuate the current mode with the fixed policy `u = K x` for `duration`
/// steps, drawing process noise from `rng`.
pub fn simulate_epoch(
    plant: &mut SwitchedPlant,
    k_mat: &DMatrix<f64>,
    duration: u64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochTrace, PlantError> {
    let mode = plant.mode().clone();
    let n = plant.n();
    if duration == 0 {
        return Err(PlantError::InvalidParam("duration must be >= 1".into()));
    }
    if k_mat.ncols() != n || k_mat.nrows() != mode.dynamics.m() {
        return Err(PlantError::Shape("policy dimensions".into()));
    }
    let mut states = Vec::with_capacity(duration as usize + 1);
    let mut inputs = Vec::with_capacity(duration as usize);
    let mut costs = Vec::with_capacity(duration as usize);
    states.push(plant.state.clone());
    for s in 0..duration as usize {
        let u = k_mat * &plant.state;
        let cost = stage_cost(&plant.state, &u, &mode.costs)?;
        let w = plant.noise.sample(n, rng);
        let next = step(plant, &u, &w)?;
        if !linalg::vec_all_finite(&next) || next.amax() > DIVERGENCE_LIMIT {
            return Err(PlantError::Divergence {
                step: s,
                limit: DIVERGENCE_LIMIT,
            });
        }
        inputs.push(u);
        costs.push(cost);
        states.push(next);
    }
    Ok(EpochTrace {
        states,
        inputs,
        costs,
    })
}
