//! End-to-end online control of the switched plant: warm-up exploration,
//! the epoch-by-epoch switching run, state-norm monitors, and regret
//! accounting against the known-parameter reference strategy.
//!
//! One run is strictly sequential (it is an online protocol); replicates are
//! independent and may execute concurrently, each owning its plant, learner
//! state and RNG stream.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::knownlqr::{self, DwellDecision};
use crate::linalg;
use crate::ofu::{self, RelaxedSolution};
use crate::plant::{self, CostMatrices, ModeBounds, PlantError, SwitchSequence, SwitchedPlant};
use crate::sysid::{self, ConfidenceSet, Dataset, RadiusRule, Registry, SysidError};

#[derive(Debug, Clone, Error)]
pub enum RunError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Sysid(#[from] SysidError),
    #[error(transparent)]
    Ofu(#[from] ofu::OfuError),
    #[error(transparent)]
    Known(#[from] knownlqr::KnownLqrError),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Known side information for one mode (never the dynamics).
#[derive(Debug, Clone)]
pub struct ModeInfo {
    pub costs: CostMatrices,
    pub bounds: ModeBounds,
}

/// Everything the learner carries across epochs.
#[derive(Debug, Clone)]
pub struct Learner {
    pub modes: Vec<ModeInfo>,
    pub sigma_w: f64,
    pub delta: f64,
    /// Split the failure probability across modes (off by default).
    pub union_bound_delta: bool,
    pub registry: Registry,
    pub datasets: Vec<Dataset>,
    /// Prior center per mode used by main-phase re-estimation.
    pub theta_prior: Vec<DMatrix<f64>>,
    /// Prior error bound per mode for the main-phase radius.
    pub epsilon_prior: Vec<f64>,
    /// Diagnostic switch: keep the registry fixed at its initial contents
    /// (used for the zero-uncertainty identity checks).
    pub freeze_registry: bool,
}

impl Learner {
    pub fn delta_effective(&self) -> f64 {
        if self.union_bound_delta {
            self.delta / self.modes.len() as f64
        } else {
            self.delta
        }
    }

    /// Assemble a learner from explicit parts (priors supplied with known
    /// error bounds instead of a warm-up phase).
    pub fn from_parts(
        modes: Vec<ModeInfo>,
        sigma_w: f64,
        delta: f64,
        registry: Registry,
        datasets: Vec<Dataset>,
        theta_prior: Vec<DMatrix<f64>>,
        epsilon_prior: Vec<f64>,
    ) -> Self {
        Self {
            modes,
            sigma_w,
            delta,
            union_bound_delta: false,
            registry,
            datasets,
            theta_prior,
            epsilon_prior,
            freeze_registry: false,
        }
    }
}

/// Warm-up configuration per mode: a stabilizing policy, its certificate
/// constant for the exploration noise, and the exploration duration.
#[derive(Debug, Clone)]
pub struct WarmupSpec {
    pub k0: DMatrix<f64>,
    pub kappa0: f64,
    pub t0: u64,
}

/// Exploration phase: for each mode, actuate `u = K₀x + η` with
/// `η ~ N(0, 2σ_w²κ₀² I)` for `T₀` steps, then build the warm-up ellipsoid
/// with `λ = σ_w²ϑ⁻²` and the norm-bound radius. The resulting registry seeds
/// the online run; the ellipsoid centers become the main-phase priors.
pub fn warmup(
    plant: &mut SwitchedPlant,
    specs: &[WarmupSpec],
    delta: f64,
    keep_samples: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Learner, RunError> {
    if specs.len() != plant.modes.len() {
        return Err(RunError::Protocol(
            "one warm-up spec per mode required".into(),
        ));
    }
    let n = plant.n();
    let sigma_w = plant.noise.sigma_w;
    let mut registry = Registry::new();
    let mut datasets = Vec::new();
    let mut theta_prior = Vec::new();
    let mut epsilon_prior = Vec::new();
    let mut modes_info = Vec::new();

    for (i, spec) in specs.iter().enumerate() {
        let mode = plant.modes[i].clone();
        let m = mode.dynamics.m();
        if spec.k0.nrows() != m || spec.k0.ncols() != n {
            return Err(RunError::Protocol(format!(
                "warm-up policy dimensions for mode {i}"
            )));
        }
        let rho = linalg::spectral_radius(&(&mode.dynamics.a + &mode.dynamics.b * &spec.k0));
        if rho >= 1.0 {
            return Err(RunError::Protocol(format!(
                "warm-up policy for mode {i} is not stabilizing (radius {rho})"
            )));
        }
        plant.switch_to(i)?;
        plant.reset(DVector::zeros(n))?;
        let mut data = Dataset::new(i, n, m, keep_samples);
        let explore_sd = (2.0 * sigma_w * sigma_w * spec.kappa0 * spec.kappa0).sqrt();
        // Allocation-free exploration loop; long warm-ups dominate the run
        // time of Monte Carlo experiments.
        let a_mat = mode.dynamics.a.clone();
        let b_mat = mode.dynamics.b.clone();
        let mut x = DVector::zeros(n);
        let mut u = DVector::zeros(m);
        let mut z = DVector::zeros(n + m);
        let mut x_next = DVector::zeros(n);
        for t in 0..spec.t0 {
            u.gemv(1.0, &spec.k0, &x, 0.0);
            for v in u.iter_mut() {
                let draw: f64 = StandardNormal.sample(rng);
                *v += explore_sd * draw;
            }
            z.rows_mut(0, n).copy_from(&x);
            z.rows_mut(n, m).copy_from(&u);
            plant.noise.sample_into(&mut x_next, rng);
            x_next.gemv(1.0, &a_mat, &x, 1.0);
            x_next.gemv(1.0, &b_mat, &u, 1.0);
            if !linalg::vec_all_finite(&x_next) || x_next.amax() > plant::DIVERGENCE_LIMIT {
                return Err(RunError::Plant(PlantError::Divergence {
                    step: t as usize,
                    limit: plant::DIVERGENCE_LIMIT,
                }));
            }
            if keep_samples {
                data.push(t, z.clone(), x_next.clone())?;
            } else {
                data.push_ref(t, &z, &x_next)?;
            }
            x.copy_from(&x_next);
        }
        plant.state.copy_from(&x);
        plant.clock += spec.t0;
        let lambda = sigma_w * sigma_w / (mode.bounds.vartheta * mode.bounds.vartheta);
        let conf = ConfidenceSet::from_dataset(
            &data,
            lambda,
            delta,
            &DMatrix::zeros(n + m, n),
            RadiusRule::NormBound(mode.bounds.vartheta),
            sigma_w,
        )?;
        // Prior error for the main phase comes from the warm-up ellipsoid:
        // tr((Θ−Θ̂)ᵀV(Θ−Θ̂)) ≤ r gives a Frobenius bound r/λ_min(V); the √n
        // factor covers the nuclear-norm reading.
        let v_min = linalg::min_eig(&conf.v);
        let eps = (n as f64).sqrt() * (conf.r / v_min).sqrt();
        theta_prior.push(conf.theta_hat.clone());
        epsilon_prior.push(eps);
        registry.update(i, conf, 0)?;
        datasets.push(data);
        modes_info.push(ModeInfo {
            costs: mode.costs.clone(),
            bounds: mode.bounds,
        });
    }
    Ok(Learner {
        modes: modes_info,
        sigma_w,
        delta,
        union_bound_delta: false,
        registry,
        datasets,
        theta_prior,
        epsilon_prior,
        freeze_registry: false,
    })
}

/// Advisory check of the warm-up duration conditions. The growth constants
/// are not pinned down by theory, so the threshold `ε̃` and the order-term
/// constant are configuration inputs.
#[derive(Debug, Clone, Copy)]
pub struct WarmupCheckConfig {
    pub epsilon_tilde: f64,
    pub second_order_constant: f64,
    pub ns_expected: u64,
    pub tau_dw_max: f64,
    pub n_state: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct WarmupCheck {
    pub cond1_ok: bool,
    pub cond1_lhs: f64,
    /// `ε̃² − lhs` (positive slack means satisfied).
    pub cond1_margin: f64,
    pub cond2_ok: bool,
    pub cond2_required: f64,
    pub cond2_margin: f64,
}

/// Evaluate both warm-up duration inequalities for a candidate `T₀`.
pub fn warmup_duration_check(
    t0: u64,
    bounds: &ModeBounds,
    kappa0: f64,
    gamma0: f64,
    delta: f64,
    sigma_w: f64,
    cfg: &WarmupCheckConfig,
) -> WarmupCheck {
    let n = cfg.n_state as f64;
    let t0f = (t0 as f64).max(1.0);
    let sig2 = sigma_w * sigma_w;
    let vartheta = bounds.vartheta;
    let lambda = sig2 / (vartheta * vartheta);
    let growth = 300.0 * sig2 * kappa0.powi(4) / (gamma0 * gamma0)
        * (n + vartheta * vartheta * kappa0 * kappa0)
        * (t0f / delta).ln();
    let inner = 2.0 * n * ((n / delta).ln() + growth.ln_1p());
    let root = sigma_w * inner.sqrt() + lambda.sqrt() * vartheta;
    let lhs = 80.0 / (t0f * sig2) * root * root;
    let threshold = cfg.epsilon_tilde * cfg.epsilon_tilde;
    let cond1_ok = lhs <= threshold;

    let horizon = (cfg.ns_expected as f64 * cfg.tau_dw_max).max(1.0);
    let log_term = (horizon / delta).ln().max(1.0);
    let required = cfg.second_order_constant * n * n * bounds.nu * bounds.nu * vartheta
        / (bounds.alpha0.powi(5) * sigma_w.powi(10))
        * (horizon * log_term * log_term).sqrt();
    let cond2_ok = (t0 as f64) >= required;
    WarmupCheck {
        cond1_ok,
        cond1_lhs: lhs,
        cond1_margin: threshold - lhs,
        cond2_ok,
        cond2_required: required,
        cond2_margin: t0 as f64 - required,
    }
}

/// One committed epoch of the online run.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub k: usize,
    pub mode: usize,
    pub next_mode: usize,
    pub start: u64,
    pub tau_es: u64,
    pub dwell: DwellDecision,
    pub k_mat: DMatrix<f64>,
    pub p_i: DMatrix<f64>,
    pub p_j: DMatrix<f64>,
    pub mu_i: f64,
    pub mu_j: f64,
    pub chi_i: DMatrix<f64>,
    pub chi_j: DMatrix<f64>,
    pub accumulated_cost: f64,
    /// Ellipsoids consumed by the synthesis (registry snapshot).
    pub conf_i: ConfidenceSet,
    pub conf_j: ConfidenceSet,
    /// Reference dwell time, filled by the diagnostics pass.
    pub tau_star: Option<u64>,
    /// Estimation-error bound, filled by the diagnostics pass.
    pub dwell_error_bound: Option<f64>,
}

/// Complete record of an online run.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub initial_mode: Option<usize>,
    pub epochs: Vec<EpochRecord>,
    /// `T+1` states where `T` is the total dwell.
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    pub mode_per_step: Vec<usize>,
    pub epoch_per_step: Vec<usize>,
    /// Set when synthesis or simulation aborted the run early.
    pub aborted: Option<String>,
    pub seed: u64,
}

impl RunTrace {
    fn empty(seed: u64) -> Self {
        Self {
            initial_mode: None,
            epochs: Vec::new(),
            states: Vec::new(),
            inputs: Vec::new(),
            costs: Vec::new(),
            mode_per_step: Vec::new(),
            epoch_per_step: Vec::new(),
            aborted: None,
            seed,
        }
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn total_time(&self) -> u64 {
        self.epochs.iter().map(|e| e.tau_es).sum()
    }

    /// Squared state norm at the instant right after switch `k`
    /// (`k = 0..=ns`; the last index is the final switch).
    pub fn post_switch_norm_sq(&self, k: usize) -> Option<f64> {
        let t = if k < self.epochs.len() {
            self.epochs[k].start as usize
        } else if k == self.epochs.len() && !self.states.is_empty() {
            self.states.len() - 1
        } else {
            return None;
        };
        self.states.get(t).map(|x| x.norm_squared())
    }
}

/// Online run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub alpha_bar: f64,
    pub x0: DVector<f64>,
    /// Informational seed echoed into the trace.
    pub seed: u64,
}

/// Execute the online switching run.
///
/// Per epoch: receive the next mode, synthesize the optimistic policy and the
/// dual pair from the current registry, estimate the minimum dwell time,
/// actuate the fixed policy for that many steps while logging data, then
/// refresh the active mode's ellipsoid and the registry. Synthesis and
/// divergence failures abort the run, preserving the partial trace.
pub fn run(
    plant: &mut SwitchedPlant,
    seq: &mut SwitchSequence,
    learner: &mut Learner,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RunTrace, RunError> {
    if !(0.0 < cfg.alpha_bar && cfg.alpha_bar < 1.0) {
        return Err(RunError::Protocol("alpha_bar must lie in (0,1)".into()));
    }
    let mut trace = RunTrace::empty(cfg.seed);
    let Some(first) = plant::reveal_next(seq)? else {
        return Ok(trace);
    };
    trace.initial_mode = Some(first);
    plant.switch_to(first)?;
    plant.reset(cfg.x0.clone())?;
    trace.states.push(plant.state.clone());

    let n = plant.n();
    let w = DMatrix::identity(n, n) * (learner.sigma_w * learner.sigma_w);
    let mut current = first;
    let mut now: u64 = 0;
    let mut k = 0usize;

    loop {
        let Some(next) = plant::reveal_next(seq)? else {
            break;
        };
        let info_i = learner.modes[current].clone();
        let info_j = learner.modes[next].clone();
        let conf_i = learner
            .registry
            .get(current)
            .ok_or_else(|| RunError::Protocol(format!("no ellipsoid for mode {current}")))?
            .clone();
        let conf_j = learner
            .registry
            .get(next)
            .ok_or_else(|| RunError::Protocol(format!("no ellipsoid for mode {next}")))?
            .clone();
        let mu_i = sysid::mu_inflation(&conf_i, info_i.bounds.vartheta);
        let mu_j = sysid::mu_inflation(&conf_j, info_j.bounds.vartheta);
        let cert_i = ofu::stability_params(&info_i.bounds, learner.sigma_w);
        let cert_j = ofu::stability_params(&info_j.bounds, learner.sigma_w);

        let synthesis =
            (|| -> Result<(RelaxedSolution, RelaxedSolution, ofu::OnlineDwell), ofu::OfuError> {
                let sol_i = ofu::solve_relaxed(
                    &conf_i,
                    &info_i.costs,
                    mu_i,
                    &w,
                    &info_i.bounds,
                    learner.sigma_w,
                )?;
                let sol_j = ofu::solve_relaxed(
                    &conf_j,
                    &info_j.costs,
                    mu_j,
                    &w,
                    &info_j.bounds,
                    learner.sigma_w,
                )?;
                let dwell =
                    ofu::tau_estimate(&sol_i, &info_i.costs, &sol_j.p, &cert_i, cfg.alpha_bar)?;
                Ok((sol_i, sol_j, dwell))
            })();
        let (sol_i, sol_j, online_dwell) = match synthesis {
            Ok(v) => v,
            Err(e) => {
                trace.aborted = Some(format!("synthesis at epoch {k}: {e}"));
                return Ok(trace);
            }
        };
        let tau = online_dwell.decision.tau;

        let epoch_trace = match plant::simulate_epoch(plant, &sol_i.k, tau, rng) {
            Ok(t) => t,
            Err(e) => {
                trace.aborted = Some(format!("simulation at epoch {k}: {e}"));
                return Ok(trace);
            }
        };

        // Log the epoch's transitions into the active mode's dataset.
        let m_dim = sol_i.k.nrows();
        for s in 0..tau as usize {
            let mut z = DVector::zeros(n + m_dim);
            z.rows_mut(0, n).copy_from(&epoch_trace.states[s]);
            z.rows_mut(n, m_dim).copy_from(&epoch_trace.inputs[s]);
            learner.datasets[current].push(now + s as u64, z, epoch_trace.states[s + 1].clone())?;
        }

        let chi_j = ofu::chi_diagnostic(&sol_j, &cert_j)?;
        trace.epochs.push(EpochRecord {
            k,
            mode: current,
            next_mode: next,
            start: now,
            tau_es: tau,
            dwell: online_dwell.decision,
            k_mat: sol_i.k.clone(),
            p_i: sol_i.p.clone(),
            p_j: sol_j.p.clone(),
            mu_i,
            mu_j,
            chi_i: online_dwell.chi.clone(),
            chi_j,
            accumulated_cost: epoch_trace.total_cost(),
            conf_i: conf_i.clone(),
            conf_j,
            tau_star: None,
            dwell_error_bound: None,
        });
        for s in 0..tau as usize {
            trace.states.push(epoch_trace.states[s + 1].clone());
            trace.inputs.push(epoch_trace.inputs[s].clone());
            trace.costs.push(epoch_trace.costs[s]);
            trace.mode_per_step.push(current);
            trace.epoch_per_step.push(k);
        }
        now += tau;

        // Refresh only the active mode's ellipsoid (lagged λ selection).
        if !learner.freeze_registry {
            let lambda = sysid::lambda_select(&info_i.bounds, learner.sigma_w, Some(&conf_i));
            let conf_new = ConfidenceSet::from_dataset(
                &learner.datasets[current],
                lambda,
                learner.delta_effective(),
                &learner.theta_prior[current],
                RadiusRule::PriorError(learner.epsilon_prior[current]),
                learner.sigma_w,
            )?;
            learner.registry.update(current, conf_new, now)?;
        }

        plant.switch_to(next)?;
        current = next;
        k += 1;
    }
    Ok(trace)
}

/// The known-parameter reference strategy: Riccati policies with the
/// known-parameter minimum dwell times, on the same revealed sequence.
pub fn run_baseline(
    plant: &mut SwitchedPlant,
    seq: &mut SwitchSequence,
    alpha_bar: f64,
    x0: &DVector<f64>,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<RunTrace, RunError> {
    let sigma_w = plant.noise.sigma_w;
    let mut dares = Vec::new();
    for mode in &plant.modes {
        dares.push(knownlqr::solve_dare(
            &mode.dynamics,
            &mode.costs,
            sigma_w,
            1e-12,
            200_000,
        )?);
    }
    let mut trace = RunTrace::empty(seed);
    let Some(first) = plant::reveal_next(seq)? else {
        return Ok(trace);
    };
    trace.initial_mode = Some(first);
    plant.switch_to(first)?;
    plant.reset(x0.clone())?;
    trace.states.push(plant.state.clone());
    let mut current = first;
    let mut now = 0u64;
    let mut k = 0usize;
    let n = plant.n();
    loop {
        let Some(next) = plant::reveal_next(seq)? else {
            break;
        };
        let costs_i = plant.modes[current].costs.clone();
        let decision = knownlqr::dwell_star(&dares[current], &costs_i, &dares[next], alpha_bar)?;
        let tau = decision.tau;
        let k_mat = dares[current].k_star.clone();
        let epoch_trace = match plant::simulate_epoch(plant, &k_mat, tau, rng) {
            Ok(t) => t,
            Err(e) => {
                trace.aborted = Some(format!("simulation at epoch {k}: {e}"));
                return Ok(trace);
            }
        };
        let placeholder_conf = ConfidenceSet {
            theta_hat: DMatrix::zeros(n + k_mat.nrows(), n),
            v: DMatrix::identity(n + k_mat.nrows(), n + k_mat.nrows()),
            r: 0.0,
            lambda: 1.0,
            delta: 0.5,
            n_samples: 0,
            epsilon_prior: 0.0,
            gram_norm: 0.0,
        };
        trace.epochs.push(EpochRecord {
            k,
            mode: current,
            next_mode: next,
            start: now,
            tau_es: tau,
            dwell: decision,
            k_mat,
            p_i: dares[current].p_star.clone(),
            p_j: dares[next].p_star.clone(),
            mu_i: 0.0,
            mu_j: 0.0,
            chi_i: DMatrix::zeros(n, n),
            chi_j: DMatrix::zeros(n, n),
            accumulated_cost: epoch_trace.total_cost(),
            conf_i: placeholder_conf.clone(),
            conf_j: placeholder_conf,
            tau_star: Some(tau),
            dwell_error_bound: Some(0.0),
        });
        for s in 0..tau as usize {
            trace.states.push(epoch_trace.states[s + 1].clone());
            trace.inputs.push(epoch_trace.inputs[s].clone());
            trace.costs.push(epoch_trace.costs[s]);
            trace.mode_per_step.push(current);
            trace.epoch_per_step.push(k);
        }
        now += tau;
        plant.switch_to(next)?;
        current = next;
        k += 1;
    }
    Ok(trace)
}

/// Reference dwell times and optimal costs for a ground-truth plant.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub dares: Vec<knownlqr::DareSolution>,
    pub j_star: Vec<f64>,
}

impl GroundTruth {
    pub fn from_plant(plant: &SwitchedPlant) -> Result<Self, RunError> {
        let sigma_w = plant.noise.sigma_w;
        let mut dares = Vec::new();
        let mut j_star = Vec::new();
        for mode in &plant.modes {
            let dare = knownlqr::solve_dare(&mode.dynamics, &mode.costs, sigma_w, 1e-12, 200_000)?;
            j_star.push(dare.j_star);
            dares.push(dare);
        }
        Ok(Self { dares, j_star })
    }

    pub fn tau_star(
        &self,
        plant: &SwitchedPlant,
        i: usize,
        j: usize,
        alpha_bar: f64,
    ) -> Result<DwellDecision, RunError> {
        Ok(knownlqr::dwell_star(
            &self.dares[i],
            &plant.modes[i].costs,
            &self.dares[j],
            alpha_bar,
        )?)
    }
}

/// Fill the diagnostics fields (`tau_star`, `dwell_error_bound`) of a trace
/// from ground truth. The online path never reads these.
pub fn annotate_trace(
    trace: &mut RunTrace,
    plant: &SwitchedPlant,
    truth: &GroundTruth,
    alpha_bar: f64,
) -> Result<(), RunError> {
    let sigma_w = plant.noise.sigma_w;
    for ep in &mut trace.epochs {
        let decision = knownlqr::dwell_star(
            &truth.dares[ep.mode],
            &plant.modes[ep.mode].costs,
            &truth.dares[ep.next_mode],
            alpha_bar,
        )?;
        ep.tau_star = Some(decision.tau);
        let bound = ofu::dwell_error_bound(
            linalg::max_eig(&ep.chi_i),
            linalg::max_eig(&ep.chi_j),
            &plant.modes[ep.mode].bounds,
            &plant.modes[ep.next_mode].bounds,
            sigma_w,
            alpha_bar,
        )?;
        ep.dwell_error_bound = Some(bound);
    }
    Ok(())
}

/// Regret accounting for one trace against the reference strategy.
#[derive(Debug, Clone)]
pub struct RegretReport {
    pub j_alg: f64,
    pub j_baseline: f64,
    pub regret: f64,
    /// Policy-suboptimality component (cost minus optimal rate over the
    /// reference dwell window of each epoch).
    pub r1: f64,
    /// Dwell-overhang component (cost of the steps beyond the reference
    /// dwell in each epoch).
    pub r2: f64,
    pub t_es: u64,
    pub t_star: u64,
    pub tau_star: Vec<u64>,
    /// Epochs where the estimated dwell fell below the reference dwell (the
    /// overhang window is clipped at zero).
    pub clipped_overhangs: usize,
    /// `|r1 + r2 + j_baseline − j_alg|`, an accounting identity.
    pub identity_residual: f64,
}

/// Decompose realized cost into the reference cost plus the two regret
/// components, aligned per epoch.
pub fn regret_report(
    trace: &RunTrace,
    plant: &SwitchedPlant,
    truth: &GroundTruth,
    alpha_bar: f64,
) -> Result<RegretReport, RunError> {
    let mut j_baseline = 0.0;
    let mut r1 = 0.0;
    let mut r2 = 0.0;
    let mut t_es = 0u64;
    let mut t_star_total = 0u64;
    let mut tau_star = Vec::new();
    let mut clipped = 0usize;
    let mut step = 0usize;
    for ep in &trace.epochs {
        let decision = truth.tau_star(plant, ep.mode, ep.next_mode, alpha_bar)?;
        let ts = decision.tau;
        let rate = truth.j_star[ep.mode];
        j_baseline += ts as f64 * rate;
        t_star_total += ts;
        t_es += ep.tau_es;
        tau_star.push(ts);
        let dur = ep.tau_es as usize;
        let window = (ts as usize).min(dur);
        for s in 0..window {
            r1 += trace.costs[step + s] - rate;
        }
        if (ts as usize) > dur {
            // Estimated switch precedes the reference switch: charge the
            // un-dwelled reference steps to R1 and clip the overhang.
            r1 -= (ts as usize - dur) as f64 * rate;
            clipped += 1;
        }
        for s in window..dur {
            r2 += trace.costs[step + s];
        }
        step += dur;
    }
    let j_alg = trace.total_cost();
    let regret = j_alg - j_baseline;
    let identity_residual = (r1 + r2 + j_baseline - j_alg).abs();
    Ok(RegretReport {
        j_alg,
        j_baseline,
        regret,
        r1,
        r2,
        t_es,
        t_star: t_star_total,
        tau_star,
        clipped_overhangs: clipped,
        identity_residual,
    })
}

/// Envelope constants for the state-norm monitors, from the mode-set bounds.
#[derive(Debug, Clone, Copy)]
pub struct NormEnvelope {
    pub kappa_star: f64,
    pub eta_star: f64,
    pub chi_star: f64,
    pub alpha_bar: f64,
    pub x0_norm_sq: f64,
    pub sigma_w: f64,
}

impl NormEnvelope {
    pub fn new(bounds: &[ModeBounds], sigma_w: f64, alpha_bar: f64, x0: &DVector<f64>) -> Self {
        let kappa_star = bounds
            .iter()
            .map(|b| (2.0 * b.nu / (sigma_w * sigma_w * b.alpha0)).sqrt())
            .fold(0.0f64, f64::max);
        let alpha1_star = bounds.iter().map(|b| b.alpha1).fold(0.0f64, f64::max);
        let alpha0_star = bounds
            .iter()
            .map(|b| b.alpha0)
            .fold(f64::INFINITY, f64::min);
        let eta_star = 1.0 / (kappa_star * kappa_star);
        let chi_star = kappa_star * kappa_star * alpha1_star / alpha0_star;
        Self {
            kappa_star,
            eta_star,
            chi_star,
            alpha_bar,
            x0_norm_sq: x0.norm_squared(),
            sigma_w,
        }
    }

    /// Post-switch envelope `X̄_k = ᾱᵏκ*²‖x₀‖² + ((2−ᾱ)/(1−ᾱ))(𝒳*²/η*)σ_w²`.
    pub fn x_bar(&self, k: usize) -> f64 {
        let decay = self.alpha_bar.powi(k as i32);
        decay * self.state_term() + self.noise_floor()
    }

    /// Uniform envelope `X̃` valid at every step.
    pub fn x_tilde(&self) -> f64 {
        self.state_term() + self.noise_floor()
    }

    fn state_term(&self) -> f64 {
        if self.x0_norm_sq == 0.0 {
            0.0
        } else {
            self.kappa_star * self.kappa_star * self.x0_norm_sq
        }
    }

    fn noise_floor(&self) -> f64 {
        if self.sigma_w == 0.0 {
            return 0.0;
        }
        (2.0 - self.alpha_bar) / (1.0 - self.alpha_bar)
            * (self.chi_star * self.chi_star / self.eta_star)
            * self.sigma_w
            * self.sigma_w
    }
}

/// Replicate-averaged state-norm monitoring against the envelopes.
#[derive(Debug, Clone)]
pub struct StateBoundReport {
    pub envelope: NormEnvelope,
    /// Per switch index: (mean ‖x‖², standard error, envelope value).
    pub post_switch: Vec<(f64, f64, f64)>,
    /// Switch indices whose mean exceeds the envelope plus 3 standard errors.
    pub violations_post_switch: Vec<usize>,
    /// Per step `t` up to the shortest trace: (mean ‖x_t‖², SE).
    pub per_step: Vec<(f64, f64)>,
    /// Steps whose mean exceeds the uniform envelope plus 3 standard errors.
    pub violations_per_step: Vec<usize>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let nn = values.len() as f64;
    let mean = values.iter().sum::<f64>() / nn;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nn - 1.0);
    (mean, (var / nn).sqrt())
}

/// Monte Carlo mean state-norm check; a single-trace exceedance is not a
/// violation, only the replicate mean (plus 3·SE slack) is compared.
pub fn monitor_state_bounds(
    traces: &[RunTrace],
    bounds: &[ModeBounds],
    sigma_w: f64,
    alpha_bar: f64,
    x0: &DVector<f64>,
) -> Result<StateBoundReport, RunError> {
    if !(0.0 < alpha_bar && alpha_bar < 1.0) {
        return Err(RunError::Protocol("alpha_bar must lie in (0,1)".into()));
    }
    if traces.is_empty() {
        return Err(RunError::Protocol("need at least one trace".into()));
    }
    let envelope = NormEnvelope::new(bounds, sigma_w, alpha_bar, x0);
    let min_switches = traces.iter().map(|t| t.epochs.len()).min().unwrap_or(0);
    let mut post_switch = Vec::new();
    let mut violations_post_switch = Vec::new();
    for k in 0..=min_switches {
        let samples: Vec<f64> = traces
            .iter()
            .filter_map(|t| t.post_switch_norm_sq(k))
            .collect();
        if samples.is_empty() {
            break;
        }
        let (mean, se) = mean_se(&samples);
        let bound = envelope.x_bar(k);
        if mean > bound + 3.0 * se {
            violations_post_switch.push(k);
        }
        post_switch.push((mean, se, bound));
    }
    let min_len = traces.iter().map(|t| t.states.len()).min().unwrap_or(0);
    let mut per_step = Vec::new();
    let mut violations_per_step = Vec::new();
    let x_tilde = envelope.x_tilde();
    for t in 0..min_len {
        let samples: Vec<f64> = traces
            .iter()
            .map(|tr| tr.states[t].norm_squared())
            .collect();
        let (mean, se) = mean_se(&samples);
        if mean > x_tilde + 3.0 * se {
            violations_per_step.push(t);
        }
        per_step.push((mean, se));
    }
    Ok(StateBoundReport {
        envelope,
        post_switch,
        violations_post_switch,
        per_step,
        violations_per_step,
    })
}

/// Replicate-averaged contraction check across switches:
/// `mean_{k+1} ≤ ᾱ·mean_k + β̄σ_w² + 3·SE`.
#[derive(Debug, Clone)]
pub struct ContractionReport {
    /// Per switch `k ≥ 1`: (mean_k, rhs bound, ok).
    pub rows: Vec<(f64, f64, bool)>,
    pub all_ok: bool,
}

pub fn contraction_check(
    traces: &[RunTrace],
    alpha_bar: f64,
    beta_bar: f64,
    sigma_w: f64,
) -> ContractionReport {
    let min_switches = traces.iter().map(|t| t.epochs.len()).min().unwrap_or(0);
    let mut rows = Vec::new();
    let mut all_ok = true;
    let mut prev_mean: Option<f64> = None;
    for k in 0..=min_switches {
        let samples: Vec<f64> = traces
            .iter()
            .filter_map(|t| t.post_switch_norm_sq(k))
            .collect();
        if samples.is_empty() {
            break;
        }
        let (mean, se) = mean_se(&samples);
        if let Some(prev) = prev_mean {
            let rhs = alpha_bar * prev + beta_bar * sigma_w * sigma_w + 3.0 * se;
            let ok = mean <= rhs;
            all_ok &= ok;
            rows.push((mean, rhs, ok));
        }
        prev_mean = Some(mean);
    }
    ContractionReport { rows, all_ok }
}

/// Additive post-switch comparison: `mean_{k+1} ≤ mean_k + κ*⁴(α₁*/α₀*)σ_w² + 3·SE`.
pub fn additive_switch_check(
    traces: &[RunTrace],
    bounds: &[ModeBounds],
    sigma_w: f64,
) -> ContractionReport {
    let kappa_star = bounds
        .iter()
        .map(|b| (2.0 * b.nu / (sigma_w * sigma_w * b.alpha0)).sqrt())
        .fold(0.0f64, f64::max);
    let alpha1_star = bounds.iter().map(|b| b.alpha1).fold(0.0f64, f64::max);
    let alpha0_star = bounds
        .iter()
        .map(|b| b.alpha0)
        .fold(f64::INFINITY, f64::min);
    let gain = kappa_star.powi(4) * alpha1_star / alpha0_star * sigma_w * sigma_w;
    let min_switches = traces.iter().map(|t| t.epochs.len()).min().unwrap_or(0);
    let mut rows = Vec::new();
    let mut all_ok = true;
    let mut prev_mean: Option<f64> = None;
    for k in 0..=min_switches {
        let samples: Vec<f64> = traces
            .iter()
            .filter_map(|t| t.post_switch_norm_sq(k))
            .collect();
        if samples.is_empty() {
            break;
        }
        let (mean, se) = mean_se(&samples);
        if let Some(prev) = prev_mean {
            let rhs = prev + gain + 3.0 * se;
            let ok = mean <= rhs;
            all_ok &= ok;
            rows.push((mean, rhs, ok));
        }
        prev_mean = Some(mean);
    }
    ContractionReport { rows, all_ok }
}

/// Total-dwell growth summary over a switch-count sweep.
#[derive(Debug, Clone)]
pub struct TimeSummary {
    /// Per sweep point: (ns, mean total dwell, excess over the mandatory step
    /// per switch).
    pub points: Vec<(u64, f64, f64)>,
    /// Least-squares slope of `ln(excess)` against `ln(ns)` over points with
    /// positive excess; `None` when every sequence was fully benign.
    pub slope: Option<f64>,
}

/// Fit the growth exponent of the dwell excess `T_es − ns` against `ns`.
/// Requires at least three distinct switch counts.
pub fn total_time_summary(points: &[(u64, f64)]) -> Result<TimeSummary, RunError> {
    let mut distinct: Vec<u64> = points.iter().map(|(ns, _)| *ns).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(RunError::Protocol(
            "need at least 3 distinct switch counts".into(),
        ));
    }
    let rows: Vec<(u64, f64, f64)> = points
        .iter()
        .map(|(ns, t)| (*ns, *t, t - *ns as f64))
        .collect();
    let fit: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(_, _, excess)| *excess > 0.0)
        .map(|(ns, _, excess)| ((*ns as f64).ln(), excess.ln()))
        .collect();
    let slope = if fit.len() >= 2 {
        let n = fit.len() as f64;
        let sx: f64 = fit.iter().map(|(x, _)| x).sum();
        let sy: f64 = fit.iter().map(|(_, y)| y).sum();
        let sxx: f64 = fit.iter().map(|(x, _)| x * x).sum();
        let sxy: f64 = fit.iter().map(|(x, y)| x * y).sum();
        let denom = n * sxx - sx * sx;
        if denom.abs() < 1e-12 {
            None
        } else {
            Some((n * sxy - sx * sy) / denom)
        }
    } else {
        None
    };
    Ok(TimeSummary {
        points: rows,
        slope,
    })
}
