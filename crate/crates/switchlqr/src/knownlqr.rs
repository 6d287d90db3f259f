//! Known-parameter machinery: Riccati solutions, the exact LQR SDP pair,
//! Lyapunov costs for fixed policies, minimum dwell times, switch
//! classification, baseline cost, and the bound calculators used for
//! benchmarking.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg;
use crate::plant::{CostMatrices, ModeBounds, ModeDynamics};
use crate::sdp::{self, AffineMatrixExpr, LinearTerm, SdpProblem, SdpStatus, Sense};

#[derive(Debug, Clone, Error)]
pub enum KnownLqrError {
    #[error("pair (A, B) appears unstabilizable: Riccati iteration {0}")]
    Unstabilizable(String),
    #[error("closed loop is not stable (spectral radius {0})")]
    Unstable(f64),
    #[error("degenerate matrix: {0}")]
    Degenerate(String),
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error("SDP solve failed with status {0:?}")]
    Sdp(SdpStatus),
    #[error(transparent)]
    SdpBuild(#[from] sdp::SdpError),
    #[error(transparent)]
    Lyapunov(#[from] linalg::LyapunovError),
}

/// Solution of the discrete algebraic Riccati equation for one mode.
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p_star: DMatrix<f64>,
    pub k_star: DMatrix<f64>,
    /// Optimal average expected cost `σ_w² · trace(P*)`.
    pub j_star: f64,
}

/// Fixed-point value iteration for the DARE.
///
/// Iterates `P ← Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA` until the residual is
/// below `tol`; non-convergence within `max_iter` (or norm blow-up) is
/// reported as an unstabilizable pair. Returns the cost matrix, the optimal
/// feedback `K* = −(R + BᵀPB)⁻¹BᵀPA` (so `u = K*x`), and `J* = σ_w²·tr(P)`.
pub fn solve_dare(
    theta: &ModeDynamics,
    costs: &CostMatrices,
    sigma_w: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DareSolution, KnownLqrError> {
    let a = &theta.a;
    let b = &theta.b;
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = costs.q.clone();
    let mut converged = false;
    for _ in 0..max_iter {
        let gain_gram = &costs.r + &bt * &p * b;
        let inv = gain_gram
            .clone()
            .try_inverse()
            .ok_or_else(|| KnownLqrError::Degenerate("R + BᵀPB singular".into()))?;
        let next = &costs.q + &at * &p * a - &at * &p * b * &inv * &bt * &p * a;
        let next = linalg::symmetrize(&next);
        let diff = (&next - &p).abs().max();
        p = next;
        if !linalg::all_finite(&p) || p.abs().max() > 1e14 {
            return Err(KnownLqrError::Unstabilizable("diverged".into()));
        }
        if diff <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(KnownLqrError::Unstabilizable(format!(
            "no fixed point within {max_iter} iterations"
        )));
    }
    let gain_gram = &costs.r + &bt * &p * b;
    let k_star = -(gain_gram
        .try_inverse()
        .ok_or_else(|| KnownLqrError::Degenerate("R + BᵀPB singular".into()))?)
        * &bt
        * &p
        * a;
    let rho = linalg::spectral_radius(&(a + b * &k_star));
    if rho >= 1.0 {
        return Err(KnownLqrError::Unstabilizable(format!(
            "closed loop radius {rho}"
        )));
    }
    let j_star = sigma_w * sigma_w * p.trace();
    Ok(DareSolution {
        p_star: p,
        k_star,
        j_star,
    })
}

/// Exact primal/dual LQR SDP pair for one mode.
#[derive(Debug, Clone)]
pub struct ExactSdpSolution {
    /// Primal steady-state second-moment block `Σ` (dimension `(n+m)²`).
    pub sigma: DMatrix<f64>,
    /// Extracted feedback `Σ_ux Σ_xx⁻¹`.
    pub k: DMatrix<f64>,
    /// Dual cost matrix `P`.
    pub p_dual: DMatrix<f64>,
    /// Optimal average expected cost `P • W`.
    pub j_star: f64,
}

/// Selector `[I 0]` picking the state block out of `(x; u)`.
fn state_selector(n: usize, m: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n + m);
    for i in 0..n {
        e[(i, i)] = 1.0;
    }
    e
}

/// Embedding `[I; 0]` of the state block into `(x; u)` coordinates.
fn state_embed(n: usize, m: usize) -> DMatrix<f64> {
    state_selector(n, m).transpose()
}

/// Build the exact primal program: minimize `diag(Q,R) • Σ` subject to
/// `Σ_xx = Θᵀ Σ Θ + W` and `Σ ⪰ 0`.
pub fn build_exact_primal(
    theta: &ModeDynamics,
    costs: &CostMatrices,
    w: &DMatrix<f64>,
) -> SdpProblem {
    let n = theta.n();
    let m = theta.m();
    let mut prob = SdpProblem::new(Sense::Minimize);
    let sigma = prob.add_block("sigma", n + m);
    let mut cost = DMatrix::zeros(n + m, n + m);
    cost.view_mut((0, 0), (n, n)).copy_from(&costs.q);
    cost.view_mut((n, n), (m, m)).copy_from(&costs.r);
    prob.objective.push((sigma, cost));
    prob.equalities.push(
        AffineMatrixExpr::new(-w.clone())
            .with_term(
                sigma,
                LinearTerm::Congruence {
                    t: state_selector(n, m),
                    scale: 1.0,
                },
            )
            .with_term(
                sigma,
                LinearTerm::Congruence {
                    t: theta.theta().transpose(),
                    scale: -1.0,
                },
            ),
    );
    prob.require_psd(sigma);
    prob
}

/// Build the exact dual program: maximize `P • W` subject to
/// `diag(Q − P, R) + Θ P Θᵀ ⪰ 0` and `P ⪰ 0`.
pub fn build_exact_dual(
    theta: &ModeDynamics,
    costs: &CostMatrices,
    w: &DMatrix<f64>,
) -> SdpProblem {
    let n = theta.n();
    let m = theta.m();
    let mut prob = SdpProblem::new(Sense::Maximize);
    let p = prob.add_block("p", n);
    prob.objective.push((p, w.clone()));
    let mut base = DMatrix::zeros(n + m, n + m);
    base.view_mut((0, 0), (n, n)).copy_from(&costs.q);
    base.view_mut((n, n), (m, m)).copy_from(&costs.r);
    prob.lmis.push(
        AffineMatrixExpr::new(base)
            .with_term(
                p,
                LinearTerm::Congruence {
                    t: state_embed(n, m),
                    scale: -1.0,
                },
            )
            .with_term(
                p,
                LinearTerm::Congruence {
                    t: theta.theta(),
                    scale: 1.0,
                },
            ),
    );
    prob.require_psd(p);
    prob
}

fn extract_feedback(
    sigma: &DMatrix<f64>,
    n: usize,
    m: usize,
) -> Result<DMatrix<f64>, KnownLqrError> {
    let sxx = sigma.view((0, 0), (n, n)).into_owned();
    let sux = sigma.view((n, 0), (m, n)).into_owned();
    let inv = sxx
        .try_inverse()
        .ok_or_else(|| KnownLqrError::Degenerate("Σ_xx singular".into()))?;
    Ok(sux * inv)
}

/// Solve the exact LQR SDP pair. The primal supplies `Σ` and the feedback,
/// the dual supplies `P` and the average cost `P • W`; the two objectives are
/// required to agree within the solver tolerance.
pub fn exact_sdp(
    theta: &ModeDynamics,
    costs: &CostMatrices,
    w: &DMatrix<f64>,
) -> Result<ExactSdpSolution, KnownLqrError> {
    if linalg::min_eig(w) <= 0.0 {
        return Err(KnownLqrError::Domain("W must be positive definite".into()));
    }
    let tol = 1e-9;
    let primal = sdp::solve(&build_exact_primal(theta, costs, w), tol, 400_000)?;
    if primal.status != SdpStatus::Optimal {
        return Err(KnownLqrError::Sdp(primal.status));
    }
    let dual = sdp::solve(&build_exact_dual(theta, costs, w), tol, 400_000)?;
    if dual.status != SdpStatus::Optimal {
        return Err(KnownLqrError::Sdp(dual.status));
    }
    let p_dual = dual.blocks[0].clone();
    let j_star = p_dual.dot(w);
    let gap = (primal.objective - j_star).abs() / j_star.abs().max(1.0);
    if gap > 1e-5 {
        return Err(KnownLqrError::Degenerate(format!(
            "primal/dual objective mismatch {gap:e}"
        )));
    }
    let k = extract_feedback(&primal.blocks[0], theta.n(), theta.m())?;
    Ok(ExactSdpSolution {
        sigma: primal.blocks[0].clone(),
        k,
        p_dual,
        j_star,
    })
}

/// Lyapunov data for a fixed stabilizing policy.
#[derive(Debug, Clone)]
pub struct FixedPolicyData {
    pub k: DMatrix<f64>,
    /// Fixed point of `P = Q + KᵀRK + (A+BK)ᵀ P (A+BK)`.
    pub p_k: DMatrix<f64>,
    /// Stage-cost matrix `H_K = Q + KᵀRK`.
    pub h_k: DMatrix<f64>,
    /// Stationary state covariance `Σ_xx = (A+BK) Σ_xx (A+BK)ᵀ + σ_w² I`.
    pub sigma_xx: DMatrix<f64>,
    /// Average expected cost `σ_w² · tr(P_K)`.
    pub j_cost: f64,
}

/// Compute `P_K`, `H_K`, and the stationary covariance for a fixed policy.
pub fn fixed_policy_data(
    theta: &ModeDynamics,
    k: &DMatrix<f64>,
    costs: &CostMatrices,
    sigma_w: f64,
) -> Result<FixedPolicyData, KnownLqrError> {
    let closed = &theta.a + &theta.b * k;
    let rho = linalg::spectral_radius(&closed);
    if rho >= 1.0 {
        return Err(KnownLqrError::Unstable(rho));
    }
    let h_k = linalg::symmetrize(&(&costs.q + k.transpose() * &costs.r * k));
    let p_k = linalg::dlyap(&closed, &h_k, 1e-12, 100_000)?;
    let n = theta.n();
    let noise_cov = DMatrix::identity(n, n) * (sigma_w * sigma_w);
    let sigma_xx = linalg::dlyap(&closed.transpose(), &noise_cov, 1e-12, 100_000)?;
    let j_cost = sigma_w * sigma_w * p_k.trace();
    Ok(FixedPolicyData {
        k: k.clone(),
        p_k,
        h_k,
        sigma_xx,
        j_cost,
    })
}

/// Average expected cost of a fixed policy through the deviation identity:
/// `J(K) = J* + tr(Σ_xx (K−K*)ᵀ (R + BᵀP*B) (K−K*))`.
pub fn policy_cost_via_deviation(
    theta: &ModeDynamics,
    costs: &CostMatrices,
    dare: &DareSolution,
    data: &FixedPolicyData,
) -> f64 {
    let dk = &data.k - &dare.k_star;
    let weight = &costs.r + theta.b.transpose() * &dare.p_star * &theta.b;
    dare.j_star + (&data.sigma_xx * dk.transpose() * weight * dk).trace()
}

/// Spectral dwell-time operators for a fixed-policy pair:
/// `η̄ = λ_min(H_i)/λ_max(P_i)`, `ρ̄ = λ_max(P_j)/λ_min(P_i)`,
/// `𝒳̄ = λ_max(P_i)/λ_min(P_j)`.
pub fn dwell_operators_fixed(
    data_i: &FixedPolicyData,
    data_j: &FixedPolicyData,
) -> Result<(f64, f64, f64), KnownLqrError> {
    dwell_operators(&data_i.h_k, &data_i.p_k, &data_j.p_k)
}

pub(crate) fn dwell_operators(
    h_i: &DMatrix<f64>,
    p_i: &DMatrix<f64>,
    p_j: &DMatrix<f64>,
) -> Result<(f64, f64, f64), KnownLqrError> {
    let (pi_min, pi_max) = linalg::sym_eig_range(p_i);
    let (pj_min, pj_max) = linalg::sym_eig_range(p_j);
    if pi_min <= 1e-14 || pj_min <= 1e-14 {
        return Err(KnownLqrError::Degenerate(
            "P has nonpositive minimum eigenvalue".into(),
        ));
    }
    let h_min = linalg::min_eig(h_i);
    let eta = h_min / pi_max;
    let rho = pj_max / pi_min;
    let chi = pi_max / pj_min;
    Ok((eta, rho, chi))
}

/// Integer minimum dwell time for a mode pair with its diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct DwellDecision {
    pub tau: u64,
    pub eta: f64,
    pub rho: f64,
    pub chi_cross: f64,
    /// Switch needs more than the mandatory single step.
    pub malignant: bool,
    /// Real-valued formula output before the ceiling.
    pub raw: f64,
    /// η was at or above one, so the log was degenerate and τ fell back to 1.
    pub degenerate_eta: bool,
}

/// Dwell time from the spectral operators:
/// `raw = −(ln ρ + ln 𝒳 − ln ᾱ)/ln(1−η)`, `τ = max(1, ⌈raw⌉)`.
/// Malignancy is the strict inequality `ln ρ + ln 𝒳 > ln ᾱ`.
pub fn dwell_from_operators(
    eta: f64,
    rho: f64,
    chi: f64,
    alpha_bar: f64,
) -> Result<DwellDecision, KnownLqrError> {
    if !(0.0 < alpha_bar && alpha_bar < 1.0) {
        return Err(KnownLqrError::Domain("alpha_bar must lie in (0,1)".into()));
    }
    if eta <= 0.0 {
        return Err(KnownLqrError::Degenerate(format!("eta = {eta} <= 0")));
    }
    let malignant = rho.ln() + chi.ln() > alpha_bar.ln();
    if eta >= 1.0 {
        return Ok(DwellDecision {
            tau: 1,
            eta,
            rho,
            chi_cross: chi,
            malignant,
            raw: 0.0,
            degenerate_eta: true,
        });
    }
    let raw = -(rho.ln() + chi.ln() - alpha_bar.ln()) / (1.0 - eta).ln();
    let tau = if raw <= 1.0 { 1 } else { raw.ceil() as u64 };
    Ok(DwellDecision {
        tau,
        eta,
        rho,
        chi_cross: chi,
        malignant,
        raw,
        degenerate_eta: false,
    })
}

/// Minimum dwell time for a fixed-policy pair.
pub fn dwell_fixed(
    data_i: &FixedPolicyData,
    data_j: &FixedPolicyData,
    alpha_bar: f64,
) -> Result<DwellDecision, KnownLqrError> {
    let (eta, rho, chi) = dwell_operators_fixed(data_i, data_j)?;
    dwell_from_operators(eta, rho, chi, alpha_bar)
}

/// Minimum dwell time for the Riccati-optimal policies of a mode pair, with
/// `H* = Q_i + K*ᵢᵀ R_i K*ᵢ` and the operators built from `P*` matrices.
pub fn dwell_star(
    dare_i: &DareSolution,
    costs_i: &CostMatrices,
    dare_j: &DareSolution,
    alpha_bar: f64,
) -> Result<DwellDecision, KnownLqrError> {
    let h_star =
        linalg::symmetrize(&(&costs_i.q + dare_i.k_star.transpose() * &costs_i.r * &dare_i.k_star));
    let (eta, rho, chi) = dwell_operators(&h_star, &dare_i.p_star, &dare_j.p_star)?;
    dwell_from_operators(eta, rho, chi, alpha_bar)
}

/// Post-switch noise-gain constant:
/// `β̄ = 4 α₁*² κ_c*⁴ (1+κ_c*²)² / (α₀*² γ_c*²)`.
pub fn beta_bar(
    kappa_c_star: f64,
    gamma_c_star: f64,
    alpha0_star: f64,
    alpha1_star: f64,
) -> Result<f64, KnownLqrError> {
    if kappa_c_star <= 0.0 || alpha0_star <= 0.0 || alpha1_star <= 0.0 {
        return Err(KnownLqrError::Domain("constants must be positive".into()));
    }
    if !(0.0 < gamma_c_star && gamma_c_star < 1.0) {
        return Err(KnownLqrError::Domain("gamma must lie in (0,1)".into()));
    }
    let k2 = kappa_c_star * kappa_c_star;
    Ok(
        4.0 * alpha1_star * alpha1_star * k2 * k2 * (1.0 + k2) * (1.0 + k2)
            / (alpha0_star * alpha0_star * gamma_c_star * gamma_c_star),
    )
}

/// Reference accumulated cost `Σ_k τ*_k · J*(i_k)` for a dwell/cost sequence.
pub fn baseline_cost(epochs: &[(usize, u64)], j_star: &[f64]) -> f64 {
    epochs
        .iter()
        .map(|(mode, tau)| *tau as f64 * j_star[*mode])
        .sum()
}

/// Lower/upper envelope for the reference strategy cost over `ns` switches.
#[derive(Debug, Clone, Copy)]
pub struct BoundGap {
    /// `𝓛₁ = ns · min_j J*ʲ`.
    pub l1: f64,
    /// `𝒰₃ = max_{i,j} [ns · τ*_{ij} · J*ⁱ]`, reported as a magnitude.
    pub u3: f64,
    pub gap: f64,
}

/// Cost envelope calculators over a mode set with dwell matrix `τ*_{ij}`.
pub fn bound_calculators(ns: usize, j_star: &[f64], tau_star: &[Vec<u64>]) -> BoundGap {
    if ns == 0 || j_star.is_empty() {
        return BoundGap {
            l1: 0.0,
            u3: 0.0,
            gap: 0.0,
        };
    }
    let l1 = ns as f64 * j_star.iter().copied().fold(f64::INFINITY, f64::min);
    let mut u3: f64 = 0.0;
    for (i, row) in tau_star.iter().enumerate() {
        for tau in row {
            u3 = u3.max(ns as f64 * *tau as f64 * j_star[i]);
        }
    }
    BoundGap {
        l1,
        u3,
        gap: u3 - l1,
    }
}

/// Similarity certificate for a stable closed loop: `closed = H L H⁻¹` with
/// `‖L‖ ≤ 1−γ` and `‖H‖‖H⁻¹‖ ≤ κ`.
#[derive(Debug, Clone)]
pub struct KappaGamma {
    pub h: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub kappa: f64,
    pub gamma: f64,
}

/// Factor a stable closed loop into the similarity certificate, taking
/// `γ = (1−ρ)/2` and `P` from the Lyapunov equation of the rescaled matrix.
/// `H = P^{-1/2}` is normalized to unit norm (the factorization is scale
/// invariant).
pub fn kappa_gamma_decompose(closed_loop: &DMatrix<f64>) -> Result<KappaGamma, KnownLqrError> {
    let rho = linalg::spectral_radius(closed_loop);
    if rho >= 1.0 {
        return Err(KnownLqrError::Unstable(rho));
    }
    let gamma = (1.0 - rho) / 2.0;
    let n = closed_loop.nrows();
    let scaled = closed_loop / (1.0 - gamma);
    let p = linalg::dlyap(&scaled, &DMatrix::identity(n, n), 1e-13, 200_000)?;
    let p_sqrt = linalg::sqrtm_spd(&p);
    let p_sqrt_inv = p_sqrt
        .clone()
        .try_inverse()
        .ok_or_else(|| KnownLqrError::Degenerate("P^{1/2} singular".into()))?;
    let l = &p_sqrt * closed_loop * &p_sqrt_inv;
    let mut h = p_sqrt_inv;
    let h_norm = linalg::op_norm(&h);
    h /= h_norm;
    let h_inv = h
        .clone()
        .try_inverse()
        .ok_or_else(|| KnownLqrError::Degenerate("H singular".into()))?;
    let kappa = linalg::op_norm(&h) * linalg::op_norm(&h_inv);
    Ok(KappaGamma { h, l, kappa, gamma })
}

/// Upper bound on any epoch duration from the mode-set constants:
/// `−ln κ*/ln(1−γ*)` with `κᵢ = √(2νᵢ/(σ_w² α₀ⁱ))` and `γ* = 1/(2κ*²)`.
/// Degenerate certificates (`κ* ≤ 1`) return 1 with a flag.
pub fn tau_dw_max(bounds: &[ModeBounds], sigma_w: f64) -> Result<(f64, bool), KnownLqrError> {
    if bounds.is_empty() || sigma_w <= 0.0 {
        return Err(KnownLqrError::Domain(
            "need modes and positive sigma_w".into(),
        ));
    }
    let kappa_star = bounds
        .iter()
        .map(|b| (2.0 * b.nu / (sigma_w * sigma_w * b.alpha0)).sqrt())
        .fold(0.0f64, f64::max);
    if kappa_star <= 1.0 {
        return Ok((1.0, true));
    }
    let gamma_star = 1.0 / (2.0 * kappa_star * kappa_star);
    Ok((-kappa_star.ln() / (1.0 - gamma_star).ln(), false))
}

/// Membership in the policy class: `‖K‖ ≤ κ_c` and `ρ(A+BK) < 1−γ_c`.
pub fn policy_class_contains(
    k: &DMatrix<f64>,
    theta: &ModeDynamics,
    kappa_c: f64,
    gamma_c: f64,
) -> bool {
    let closed = &theta.a + &theta.b * k;
    linalg::op_norm(k) <= kappa_c && linalg::spectral_radius(&closed) < 1.0 - gamma_c
}
