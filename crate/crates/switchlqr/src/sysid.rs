//! Online regularized least-squares identification and high-probability
//! confidence ellipsoids per mode.
//!
//! A mode's dataset accumulates `(z, x⁺)` pairs with `z = (x; u)`; the running
//! Gram matrix and cross-moment let the estimate be rebuilt for any
//! regularizer. Ellipsoids carry the estimate, the regularized covariance
//! `V = λI + Σ z zᵀ`, and a radius from the self-normalized tail bound with
//! either a prior-error term (main phase) or a norm-bound term (warm-up).

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::plant::ModeBounds;

#[derive(Debug, Clone, Error)]
pub enum SysidError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error("registry timestamp for mode {0} would decrease")]
    Timestamp(usize),
    #[error("io error: {0}")]
    Io(String),
}

/// Per-mode identification data: stored samples plus running sufficient
/// statistics. Sample retention can be disabled for long Monte Carlo runs;
/// the Gram matrix and cross moment are always maintained.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub mode_id: usize,
    /// z dimension (n + m).
    pub dim_z: usize,
    /// state dimension n.
    pub dim_x: usize,
    /// Retained samples as (plant time, z, x_next).
    pub samples: Vec<(u64, DVector<f64>, DVector<f64>)>,
    pub keep_samples: bool,
    /// `Σ z zᵀ`.
    pub gram: DMatrix<f64>,
    /// `Zᵀ X = Σ z x_nextᵀ`.
    pub zx: DMatrix<f64>,
    pub count: usize,
}

impl Dataset {
    pub fn new(mode_id: usize, dim_x: usize, dim_u: usize, keep_samples: bool) -> Self {
        let dim_z = dim_x + dim_u;
        Self {
            mode_id,
            dim_z,
            dim_x,
            samples: Vec::new(),
            keep_samples,
            gram: DMatrix::zeros(dim_z, dim_z),
            zx: DMatrix::zeros(dim_z, dim_x),
            count: 0,
        }
    }

    pub fn push(
        &mut self,
        t: u64,
        z: DVector<f64>,
        x_next: DVector<f64>,
    ) -> Result<(), SysidError> {
        self.push_ref(t, &z, &x_next)?;
        if self.keep_samples {
            self.samples.push((t, z, x_next));
        }
        Ok(())
    }

    /// Allocation-free update of the sufficient statistics only; retained
    /// samples are not touched (hot-loop variant for long explorations).
    pub fn push_ref(
        &mut self,
        _t: u64,
        z: &DVector<f64>,
        x_next: &DVector<f64>,
    ) -> Result<(), SysidError> {
        if z.len() != self.dim_z || x_next.len() != self.dim_x {
            return Err(SysidError::Shape("sample dimensions".into()));
        }
        // Rank-1 updates; z_i * z_j is commutative so symmetry is exact.
        self.gram.ger(1.0, z, z, 1.0);
        self.zx.ger(1.0, z, x_next, 1.0);
        self.count += 1;
        Ok(())
    }

    /// Regularized covariance `V = λI + Σ z zᵀ`.
    pub fn covariance(&self, lambda: f64) -> DMatrix<f64> {
        &self.gram + DMatrix::identity(self.dim_z, self.dim_z) * lambda
    }

    /// Recompute the Gram matrix from retained samples (spot check).
    pub fn gram_from_samples(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.dim_z, self.dim_z);
        for (_, z, _) in &self.samples {
            g += z * z.transpose();
        }
        g
    }

    /// CSV export: `t, mode, z..., x_next...` with a fixed header.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<(), SysidError> {
        let mut header = String::from("t,mode");
        for i in 0..self.dim_z {
            header.push_str(&format!(",z{i}"));
        }
        for i in 0..self.dim_x {
            header.push_str(&format!(",x_next{i}"));
        }
        header.push('\n');
        out.write_all(header.as_bytes())
            .map_err(|e| SysidError::Io(e.to_string()))?;
        for (t, z, x) in &self.samples {
            let mut line = format!("{t},{}", self.mode_id);
            for v in z.iter() {
                line.push_str(&format!(",{v}"));
            }
            for v in x.iter() {
                line.push_str(&format!(",{v}"));
            }
            line.push('\n');
            out.write_all(line.as_bytes())
                .map_err(|e| SysidError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

/// Regularized least squares `Θ̂ = V⁻¹ (Zᵀ X + λ Θ₀)` with `V = λI + ZᵀZ`.
pub fn rls_estimate(
    data: &Dataset,
    lambda: f64,
    theta_prior: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SysidError> {
    if lambda <= 0.0 {
        return Err(SysidError::Domain("lambda must be positive".into()));
    }
    if theta_prior.nrows() != data.dim_z || theta_prior.ncols() != data.dim_x {
        return Err(SysidError::Shape("prior dimensions".into()));
    }
    let v = data.covariance(lambda);
    let rhs = &data.zx + theta_prior * lambda;
    let chol = v
        .cholesky()
        .ok_or_else(|| SysidError::Domain("covariance not positive definite".into()))?;
    Ok(chol.solve(&rhs))
}

/// Which prior term enters the confidence radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadiusRule {
    /// Main phase: `√λ · ε` with a known prior error bound `ε`.
    PriorError(f64),
    /// Warm-up phase: `√(λ ϑ)` from the parameter norm bound.
    NormBound(f64),
}

fn log_det_ratio(v: &DMatrix<f64>, lambda: f64) -> Result<f64, SysidError> {
    let d = v.nrows() as f64;
    let chol = v
        .clone()
        .cholesky()
        .ok_or_else(|| SysidError::Domain("V not positive definite".into()))?;
    let mut log_det = 0.0;
    for i in 0..v.nrows() {
        log_det += chol.l()[(i, i)].ln();
    }
    log_det *= 2.0;
    Ok(log_det - d * lambda.ln())
}

/// Self-normalized confidence radius
/// `r = (σ_w √(2n · ln(n · det V / (δ det λI))) + prior_term)²`.
pub fn radius(
    v: &DMatrix<f64>,
    lambda: f64,
    delta: f64,
    rule: RadiusRule,
    sigma_w: f64,
    n_state: usize,
) -> Result<f64, SysidError> {
    if !(0.0 < delta && delta < 1.0) {
        return Err(SysidError::Domain("delta must lie in (0,1)".into()));
    }
    if lambda <= 0.0 {
        return Err(SysidError::Domain("lambda must be positive".into()));
    }
    let n = n_state as f64;
    let log_term = n.ln() - delta.ln() + log_det_ratio(v, lambda)?;
    if log_term < 0.0 {
        return Err(SysidError::Domain("det(V) below det(lambda I)".into()));
    }
    let noise_term = sigma_w * (2.0 * n * log_term).sqrt();
    let prior_term = match rule {
        RadiusRule::PriorError(eps) => lambda.sqrt() * eps,
        RadiusRule::NormBound(vartheta) => (lambda * vartheta).sqrt(),
    };
    let root = noise_term + prior_term;
    Ok(root * root)
}

/// Main-phase radius with a prior error bound (`√λ·ε` term).
pub fn confidence_radius(
    v: &DMatrix<f64>,
    lambda: f64,
    delta: f64,
    epsilon_prior: f64,
    sigma_w: f64,
    n_state: usize,
) -> Result<f64, SysidError> {
    radius(
        v,
        lambda,
        delta,
        RadiusRule::PriorError(epsilon_prior),
        sigma_w,
        n_state,
    )
}

/// Warm-up radius with the norm-bound prior term (`√(λϑ)`).
pub fn warmup_radius(
    v: &DMatrix<f64>,
    lambda: f64,
    delta: f64,
    vartheta: f64,
    sigma_w: f64,
    n_state: usize,
) -> Result<f64, SysidError> {
    radius(
        v,
        lambda,
        delta,
        RadiusRule::NormBound(vartheta),
        sigma_w,
        n_state,
    )
}

/// High-probability confidence ellipsoid around a mode's parameters.
#[derive(Debug, Clone)]
pub struct ConfidenceSet {
    pub theta_hat: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub r: f64,
    pub lambda: f64,
    pub delta: f64,
    pub n_samples: usize,
    /// Prior error bound carried for the main-phase radius.
    pub epsilon_prior: f64,
    /// Operator norm of the data Gram matrix `Σ z zᵀ` (used by the inflation).
    pub gram_norm: f64,
}

impl ConfidenceSet {
    /// Build the ellipsoid from a dataset for the given phase.
    pub fn from_dataset(
        data: &Dataset,
        lambda: f64,
        delta: f64,
        theta_prior: &DMatrix<f64>,
        rule: RadiusRule,
        sigma_w: f64,
    ) -> Result<Self, SysidError> {
        let theta_hat = rls_estimate(data, lambda, theta_prior)?;
        let v = data.covariance(lambda);
        let r = radius(&v, lambda, delta, rule, sigma_w, data.dim_x)?;
        let epsilon_prior = match rule {
            RadiusRule::PriorError(eps) => eps,
            RadiusRule::NormBound(vt) => vt,
        };
        Ok(Self {
            theta_hat,
            v,
            r,
            lambda,
            delta,
            n_samples: data.count,
            epsilon_prior,
            gram_norm: linalg::op_norm(&data.gram),
        })
    }
}

/// Ellipsoid membership: `tr((Θ−Θ̂)ᵀ V (Θ−Θ̂)) ≤ r` (boundary inclusive).
pub fn contains(conf: &ConfidenceSet, theta: &DMatrix<f64>) -> bool {
    let d = theta - &conf.theta_hat;
    let weighted = (d.transpose() * &conf.v * &d).trace();
    weighted <= conf.r
}

/// Inflation level for the relaxed programs: the larger of the two
/// prescriptions `r + √r·ϑ·‖V‖^{1/2}` and `r·(1 + 2ϑ·(count + ‖Σzzᵀ‖)^{1/2})`,
/// so both perturbation-lemma preconditions hold.
pub fn mu_inflation(conf: &ConfidenceSet, vartheta: f64) -> f64 {
    let v_norm = linalg::max_eig(&conf.v);
    let branch_main = conf.r + conf.r.sqrt() * vartheta * v_norm.sqrt();
    let branch_appendix =
        conf.r * (1.0 + 2.0 * vartheta * (conf.n_samples as f64 + conf.gram_norm).sqrt());
    branch_main.max(branch_appendix)
}

/// Regularizer selection: the first epoch keeps the warm-up default
/// `σ_w²ϑ⁻²`; afterwards `λ = max(λ_prev, 4μ̄(prev)·ν/(α₀σ_w²))` with the
/// inflation evaluated on the previous epoch's ellipsoid (lagged to break
/// the circular dependence between λ and μ̄).
pub fn lambda_select(bounds: &ModeBounds, sigma_w: f64, conf_prev: Option<&ConfidenceSet>) -> f64 {
    match conf_prev {
        None => sigma_w * sigma_w / (bounds.vartheta * bounds.vartheta),
        Some(prev) => {
            let mu_bar = mu_inflation(prev, bounds.vartheta);
            let required = 4.0 * mu_bar * bounds.nu / (bounds.alpha0 * sigma_w * sigma_w);
            prev.lambda.max(required)
        }
    }
}

/// Most recent ellipsoid per mode, timestamped with the plant clock.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: BTreeMap<usize, (ConfidenceSet, u64)>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, mode: usize, conf: ConfidenceSet, t: u64) -> Result<(), SysidError> {
        if let Some((_, prev_t)) = self.entries.get(&mode) {
            if t < *prev_t {
                return Err(SysidError::Timestamp(mode));
            }
        }
        self.entries.insert(mode, (conf, t));
        Ok(())
    }

    pub fn get(&self, mode: usize) -> Option<&ConfidenceSet> {
        self.entries.get(&mode).map(|(c, _)| c)
    }

    pub fn timestamp(&self, mode: usize) -> Option<u64> {
        self.entries.get(&mode).map(|(_, t)| *t)
    }

    pub fn modes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }
}
