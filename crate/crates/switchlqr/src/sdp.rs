//! Minimal semidefinite-program representation and solver for the dense
//! LQR-shaped programs used by this crate.
//!
//! Problems are stated over symmetric matrix variable blocks with a linear
//! objective, affine matrix inequalities `F(X) ⪰ 0`, and affine matrix
//! equalities `F(X) = 0`. The solver is a log-det barrier path-following
//! method: equalities are eliminated through a nullspace parameterization, a
//! phase-1 program finds a strictly feasible point, and damped Newton steps
//! follow the central path. Optimality is certified by residuals (constraint
//! eigenvalue slack and barrier duality gap), not trusted from the iteration.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Clone, Error)]
pub enum SdpError {
    #[error("malformed problem: {0}")]
    Malformed(String),
}

/// Optimization direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// One symmetric matrix variable.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub name: String,
    pub dim: usize,
}

/// Linear map from a symmetric block into a symmetric output space.
#[derive(Debug, Clone)]
pub enum LinearTerm {
    /// `X ↦ scale · T X T^T` where `T` is `out_dim × block_dim`.
    Congruence { t: DMatrix<f64>, scale: f64 },
    /// `X ↦ scale · (X • S) · M` where `S` is `block_dim × block_dim` and
    /// `M` is `out_dim × out_dim`.
    DotTimes {
        s: DMatrix<f64>,
        m: DMatrix<f64>,
        scale: f64,
    },
}

impl LinearTerm {
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            LinearTerm::Congruence { t, scale } => (t * x * t.transpose()) * *scale,
            LinearTerm::DotTimes { s, m, scale } => {
                let dot = x.dot(s);
                m * (dot * *scale)
            }
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            LinearTerm::Congruence { t, .. } => t.nrows(),
            LinearTerm::DotTimes { m, .. } => m.nrows(),
        }
    }

    fn block_dim(&self) -> usize {
        match self {
            LinearTerm::Congruence { t, .. } => t.ncols(),
            LinearTerm::DotTimes { s, .. } => s.nrows(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            LinearTerm::Congruence { t, scale } => json!({
                "kind": "congruence", "t": mat_json(t), "scale": scale,
            }),
            LinearTerm::DotTimes { s, m, scale } => json!({
                "kind": "dot_times", "s": mat_json(s), "m": mat_json(m), "scale": scale,
            }),
        }
    }
}

/// Symmetric-matrix-valued affine expression `constant + Σ term(X_block)`.
#[derive(Debug, Clone)]
pub struct AffineMatrixExpr {
    pub dim: usize,
    pub constant: DMatrix<f64>,
    pub terms: Vec<(usize, LinearTerm)>,
}

impl AffineMatrixExpr {
    pub fn new(constant: DMatrix<f64>) -> Self {
        let dim = constant.nrows();
        Self {
            dim,
            constant,
            terms: Vec::new(),
        }
    }

    pub fn with_term(mut self, block: usize, term: LinearTerm) -> Self {
        self.terms.push((block, term));
        self
    }

    /// Evaluate at the given block values.
    pub fn eval(&self, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (b, term) in &self.terms {
            out += term.apply(&blocks[*b]);
        }
        linalg::symmetrize(&out)
    }

    fn to_json(&self, names: &[String]) -> Value {
        json!({
            "dim": self.dim,
            "constant": mat_json(&self.constant),
            "terms": self.terms.iter().map(|(b, t)| {
                let mut v = t.to_json();
                v["block"] = json!(names[*b]);
                v
            }).collect::<Vec<_>>(),
        })
    }
}

/// A semidefinite program over symmetric matrix blocks.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub blocks: Vec<BlockSpec>,
    pub sense: Sense,
    /// Objective `Σ C_k • X_k` as (block index, coefficient matrix) pairs.
    pub objective: Vec<(usize, DMatrix<f64>)>,
    /// Inequalities `expr(X) ⪰ 0`.
    pub lmis: Vec<AffineMatrixExpr>,
    /// Equalities `expr(X) = 0`, interpreted entrywise on the upper triangle.
    pub equalities: Vec<AffineMatrixExpr>,
}

impl SdpProblem {
    pub fn new(sense: Sense) -> Self {
        Self {
            blocks: Vec::new(),
            sense,
            objective: Vec::new(),
            lmis: Vec::new(),
            equalities: Vec::new(),
        }
    }

    pub fn add_block(&mut self, name: &str, dim: usize) -> usize {
        self.blocks.push(BlockSpec {
            name: name.to_string(),
            dim,
        });
        self.blocks.len() - 1
    }

    /// Require `X_block ⪰ 0`.
    pub fn require_psd(&mut self, block: usize) {
        let d = self.blocks[block].dim;
        self.lmis
            .push(AffineMatrixExpr::new(DMatrix::zeros(d, d)).with_term(
                block,
                LinearTerm::Congruence {
                    t: DMatrix::identity(d, d),
                    scale: 1.0,
                },
            ));
    }

    pub fn objective_value(&self, blocks: &[DMatrix<f64>]) -> f64 {
        self.objective.iter().map(|(b, c)| blocks[*b].dot(c)).sum()
    }

    fn validate(&self) -> Result<(), SdpError> {
        for (b, c) in &self.objective {
            if *b >= self.blocks.len()
                || c.nrows() != self.blocks[*b].dim
                || c.ncols() != self.blocks[*b].dim
            {
                return Err(SdpError::Malformed(
                    "objective coefficient dimensions".into(),
                ));
            }
        }
        for expr in self.lmis.iter().chain(self.equalities.iter()) {
            if expr.constant.nrows() != expr.dim || expr.constant.ncols() != expr.dim {
                return Err(SdpError::Malformed("constraint constant dimensions".into()));
            }
            for (b, term) in &expr.terms {
                if *b >= self.blocks.len() {
                    return Err(SdpError::Malformed(
                        "constraint references unknown block".into(),
                    ));
                }
                if term.block_dim() != self.blocks[*b].dim || term.out_dim() != expr.dim {
                    return Err(SdpError::Malformed("constraint term dimensions".into()));
                }
            }
        }
        Ok(())
    }

    /// Self-describing JSON dump of the problem for external cross-checking.
    pub fn to_debug_json(&self) -> Value {
        let names: Vec<String> = self.blocks.iter().map(|b| b.name.clone()).collect();
        json!({
            "sense": match self.sense { Sense::Minimize => "min", Sense::Maximize => "max" },
            "blocks": self.blocks.iter().map(|b| json!({"name": b.name, "dim": b.dim})).collect::<Vec<_>>(),
            "objective": self.objective.iter().map(|(b, c)| json!({
                "block": names[*b], "coeff": mat_json(c),
            })).collect::<Vec<_>>(),
            "lmis": self.lmis.iter().map(|e| e.to_json(&names)).collect::<Vec<_>>(),
            "equalities": self.equalities.iter().map(|e| e.to_json(&names)).collect::<Vec<_>>(),
        })
    }
}

fn mat_json(m: &DMatrix<f64>) -> Value {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    json!(rows)
}

/// Solver exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

/// Residuals certifying (or disqualifying) a solution.
#[derive(Debug, Clone)]
pub struct Residuals {
    /// Largest inequality violation: `max_j max(0, -λ_min(F_j(x)))`.
    pub primal_inf: f64,
    /// Largest absolute equality-entry violation.
    pub eq_inf: f64,
    /// Barrier duality-gap estimate relative to `max(1, |objective|)`.
    pub rel_gap: f64,
    /// Norm of the centering gradient at exit, scaled by the barrier weight.
    pub dual_inf: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub blocks: Vec<DMatrix<f64>>,
    pub objective: f64,
    pub status: SdpStatus,
    pub residuals: Residuals,
    pub newton_iters: usize,
}

/// Independent recomputation of constraint slacks and objective.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// `λ_min` of each inequality slack (negative entries are violations).
    pub lmi_min_eigs: Vec<f64>,
    /// Max absolute entry of each equality residual.
    pub eq_residuals: Vec<f64>,
    pub objective: f64,
}

impl ResidualReport {
    pub fn worst_violation(&self) -> f64 {
        let lmi = self
            .lmi_min_eigs
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
            .min(0.0);
        let eq = self.eq_residuals.iter().copied().fold(0.0, f64::max);
        lmi.min(-eq)
    }
}

/// Recompute constraint violations and the objective from problem data only.
pub fn check_solution(problem: &SdpProblem, blocks: &[DMatrix<f64>]) -> ResidualReport {
    let lmi_min_eigs = problem
        .lmis
        .iter()
        .map(|e| linalg::min_eig(&e.eval(blocks)))
        .collect();
    let eq_residuals = problem
        .equalities
        .iter()
        .map(|e| e.eval(blocks).abs().max())
        .collect();
    ResidualReport {
        lmi_min_eigs,
        eq_residuals,
        objective: problem.objective_value(blocks),
    }
}

// --- svec machinery -------------------------------------------------------

const SQRT2: f64 = std::f64::consts::SQRT_2;

fn svec_dim(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Basis matrix for local svec coordinate `v` of a `d`-dim block.
fn basis_matrix(d: usize, v: usize) -> DMatrix<f64> {
    let mut count = 0;
    for j in 0..d {
        for i in 0..=j {
            if count == v {
                let mut e = DMatrix::zeros(d, d);
                if i == j {
                    e[(i, i)] = 1.0;
                } else {
                    e[(i, j)] = 1.0 / SQRT2;
                    e[(j, i)] = 1.0 / SQRT2;
                }
                return e;
            }
            count += 1;
        }
    }
    unreachable!("svec index out of range")
}

fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    let mut out = DVector::zeros(svec_dim(d));
    let mut v = 0;
    for j in 0..d {
        for i in 0..=j {
            out[v] = if i == j { m[(i, i)] } else { SQRT2 * m[(i, j)] };
            v += 1;
        }
    }
    out
}

fn smat(x: &[f64], d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d, d);
    let mut v = 0;
    for j in 0..d {
        for i in 0..=j {
            if i == j {
                out[(i, i)] = x[v];
            } else {
                out[(i, j)] = x[v] / SQRT2;
                out[(j, i)] = x[v] / SQRT2;
            }
            v += 1;
        }
    }
    out
}

// --- solver internals -----------------------------------------------------

struct Assembled {
    /// Total scalar variable count.
    p: usize,
    /// Per-block svec offset.
    offsets: Vec<usize>,
    /// Objective in minimize orientation.
    c: DVector<f64>,
    obj_sign: f64,
    /// Per LMI: constant and per-variable coefficient matrices.
    lmi_const: Vec<DMatrix<f64>>,
    lmi_coeff: Vec<Vec<DMatrix<f64>>>,
    /// Scalar equality rows.
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
}

fn assemble(problem: &SdpProblem) -> Assembled {
    let mut offsets = Vec::with_capacity(problem.blocks.len());
    let mut p = 0;
    for b in &problem.blocks {
        offsets.push(p);
        p += svec_dim(b.dim);
    }

    let obj_sign = match problem.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut c = DVector::zeros(p);
    for (b, coeff) in &problem.objective {
        let s = svec(&linalg::symmetrize(coeff));
        for v in 0..s.len() {
            c[offsets[*b] + v] += obj_sign * s[v];
        }
    }

    // Per-variable basis images under every constraint's linear maps.
    let mut lmi_const = Vec::new();
    let mut lmi_coeff = Vec::new();
    for expr in &problem.lmis {
        lmi_const.push(linalg::symmetrize(&expr.constant));
        let mut coeffs = vec![DMatrix::zeros(expr.dim, expr.dim); p];
        for (b, term) in &expr.terms {
            let d = problem.blocks[*b].dim;
            for v in 0..svec_dim(d) {
                let img = term.apply(&basis_matrix(d, v));
                coeffs[offsets[*b] + v] += linalg::symmetrize(&img);
            }
        }
        lmi_coeff.push(coeffs);
    }

    // Equalities expand to scalar rows over the upper triangle.
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for expr in &problem.equalities {
        let d = expr.dim;
        let mut coeffs = vec![DMatrix::zeros(d, d); p];
        for (b, term) in &expr.terms {
            let bd = problem.blocks[*b].dim;
            for v in 0..svec_dim(bd) {
                let img = term.apply(&basis_matrix(bd, v));
                coeffs[offsets[*b] + v] += linalg::symmetrize(&img);
            }
        }
        let constant = linalg::symmetrize(&expr.constant);
        for j in 0..d {
            for i in 0..=j {
                let mut row = DVector::zeros(p);
                for v in 0..p {
                    row[v] = coeffs[v][(i, j)];
                }
                rows.push(row);
                rhs.push(-constant[(i, j)]);
            }
        }
    }
    let a_eq = if rows.is_empty() {
        DMatrix::zeros(0, p)
    } else {
        DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])
    };
    let b_eq = DVector::from_vec(rhs);

    Assembled {
        p,
        offsets,
        c,
        obj_sign,
        lmi_const,
        lmi_coeff,
        a_eq,
        b_eq,
    }
}

/// Particular solution and orthonormal nullspace basis of `A x = b`.
/// Returns `None` when the system is inconsistent. The nullspace comes from
/// the eigendecomposition of `AᵀA` (the thin SVD of `A` omits it).
fn eliminate_equalities(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let p = a.ncols();
    if a.nrows() == 0 {
        return Some((DVector::zeros(p), DMatrix::identity(p, p)));
    }
    let svd = a.clone().svd(true, true);
    let x0 = svd.solve(b, 1e-12).ok()?;
    let resid = (a * &x0 - b).abs().max();
    let scale = 1.0 + b.abs().max();
    if resid > 1e-8 * scale {
        return None;
    }
    let gram = a.transpose() * a;
    let eig = gram.symmetric_eigen();
    let max_ev = eig.eigenvalues.amax();
    let tol = max_ev * 1e-12;
    let null_cols: Vec<usize> = (0..p).filter(|i| eig.eigenvalues[*i] <= tol).collect();
    let mut nullsp = DMatrix::zeros(p, null_cols.len());
    for (c_idx, src) in null_cols.iter().enumerate() {
        nullsp.set_column(c_idx, &eig.eigenvectors.column(*src));
    }
    Some((x0, nullsp))
}

/// View of the problem in reduced coordinates `x = x0 + N y`.
struct Reduced {
    dim_y: usize,
    c: DVector<f64>,
    /// Constant objective offset `c^T x0`.
    c0: f64,
    lmi_const: Vec<DMatrix<f64>>,
    lmi_coeff: Vec<Vec<DMatrix<f64>>>,
    m_total: usize,
}

fn reduce(asm: &Assembled, x0: &DVector<f64>, nullsp: &DMatrix<f64>) -> Reduced {
    let dim_y = nullsp.ncols();
    let c = nullsp.transpose() * &asm.c;
    let c0 = asm.c.dot(x0);
    let mut lmi_const = Vec::new();
    let mut lmi_coeff = Vec::new();
    let mut m_total = 0;
    for (j, f0) in asm.lmi_const.iter().enumerate() {
        let d = f0.nrows();
        m_total += d;
        let mut base = f0.clone();
        for v in 0..asm.p {
            if x0[v] != 0.0 {
                base += &asm.lmi_coeff[j][v] * x0[v];
            }
        }
        let mut coeffs = Vec::with_capacity(dim_y);
        for a in 0..dim_y {
            let mut g = DMatrix::zeros(d, d);
            for v in 0..asm.p {
                let w = nullsp[(v, a)];
                if w != 0.0 {
                    g += &asm.lmi_coeff[j][v] * w;
                }
            }
            coeffs.push(g);
        }
        lmi_const.push(base);
        lmi_coeff.push(coeffs);
    }
    Reduced {
        dim_y,
        c,
        c0,
        lmi_const,
        lmi_coeff,
        m_total,
    }
}

impl Reduced {
    fn eval_lmi(&self, j: usize, y: &DVector<f64>) -> DMatrix<f64> {
        let mut f = self.lmi_const[j].clone();
        for a in 0..self.dim_y {
            if y[a] != 0.0 {
                f += &self.lmi_coeff[j][a] * y[a];
            }
        }
        f
    }

    fn strictly_feasible(&self, y: &DVector<f64>) -> bool {
        self.lmi_const
            .iter()
            .enumerate()
            .all(|(j, _)| self.eval_lmi(j, y).cholesky().is_some())
    }

    /// Barrier value `t c^T y - Σ logdet F_j(y)`; `None` outside the domain.
    fn barrier_value(&self, t: f64, y: &DVector<f64>) -> Option<f64> {
        let mut val = t * self.c.dot(y);
        for j in 0..self.lmi_const.len() {
            let f = self.eval_lmi(j, y);
            let d = f.nrows();
            let chol = f.cholesky()?;
            let mut logdet = 0.0;
            for i in 0..d {
                let l_ii = chol.l()[(i, i)];
                if l_ii <= 0.0 {
                    return None;
                }
                logdet += l_ii.ln();
            }
            val -= 2.0 * logdet;
        }
        Some(val)
    }

    /// One centering run of damped Newton steps at barrier weight `t`.
    /// Returns the final gradient norm and consumed iteration count.
    fn center(&self, t: f64, y: &mut DVector<f64>, iter_budget: &mut usize) -> f64 {
        self.center_with_exit(t, y, iter_budget, |_| false)
    }

    /// Centering with an early-exit predicate evaluated after each accepted
    /// step (used by phase 1, whose objective is unbounded below once the
    /// original constraints become strictly feasible).
    fn center_with_exit<F: Fn(&DVector<f64>) -> bool>(
        &self,
        t: f64,
        y: &mut DVector<f64>,
        iter_budget: &mut usize,
        early_exit: F,
    ) -> f64 {
        let py = self.dim_y;
        let mut grad_norm = f64::INFINITY;
        // Newton converges in a handful of steps from a warm start; anything
        // beyond this cap is floating-point churn near the barrier optimum.
        let mut local_iters = 120usize;
        while *iter_budget > 0 && local_iters > 0 {
            *iter_budget -= 1;
            local_iters -= 1;
            let mut g = &self.c * t;
            let mut h = DMatrix::<f64>::zeros(py, py);
            for j in 0..self.lmi_const.len() {
                let f = self.eval_lmi(j, y);
                let chol = match f.cholesky() {
                    Some(c) => c,
                    None => return f64::INFINITY,
                };
                let solved: Vec<DMatrix<f64>> =
                    self.lmi_coeff[j].iter().map(|ga| chol.solve(ga)).collect();
                for a in 0..py {
                    g[a] -= solved[a].trace();
                    for b in a..py {
                        let hab = solved[a].dot(&solved[b].transpose());
                        h[(a, b)] += hab;
                        h[(b, a)] = h[(a, b)];
                    }
                }
            }
            grad_norm = g.norm();
            // Newton direction with jitter fallback for near-singular Hessians.
            let mut jitter = 0.0;
            let delta = loop {
                let mut hj = h.clone();
                if jitter > 0.0 {
                    for i in 0..py {
                        hj[(i, i)] += jitter;
                    }
                }
                match hj.cholesky() {
                    Some(c) => break c.solve(&(-&g)),
                    None => {
                        jitter = if jitter == 0.0 {
                            1e-12 * (1.0 + h.diagonal().amax())
                        } else {
                            jitter * 100.0
                        };
                        if jitter > 1e6 {
                            return grad_norm;
                        }
                    }
                }
            };
            let decrement = -g.dot(&delta);
            // Backtracking line search staying strictly inside the cone.
            let f_cur = match self.barrier_value(t, y) {
                Some(v) => v,
                None => return f64::INFINITY,
            };
            if decrement <= 1e-12 * (1.0 + f_cur.abs()) {
                return grad_norm;
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = y.clone() + &delta * alpha;
                if let Some(f_new) = self.barrier_value(t, &cand) {
                    if f_new <= f_cur - 0.25 * alpha * decrement {
                        *y = cand;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                return grad_norm;
            }
            if early_exit(y) {
                return grad_norm;
            }
            if decrement < 1e-9 * (1.0 + f_cur.abs() * 1e-3) {
                return grad_norm;
            }
        }
        grad_norm
    }
}

/// Solve the program by barrier path-following.
///
/// `tol` bounds both the feasibility residual and the relative duality gap of
/// an `Optimal` result; `max_iter` caps the total Newton iteration count.
pub fn solve(problem: &SdpProblem, tol: f64, max_iter: usize) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    let asm = assemble(problem);

    let infeasible = |newton_iters: usize| SdpSolution {
        blocks: zero_blocks(problem),
        objective: f64::NAN,
        status: SdpStatus::Infeasible,
        residuals: Residuals {
            primal_inf: f64::INFINITY,
            eq_inf: f64::INFINITY,
            rel_gap: f64::INFINITY,
            dual_inf: f64::INFINITY,
        },
        newton_iters,
    };

    let Some((x0, nullsp)) = eliminate_equalities(&asm.a_eq, &asm.b_eq) else {
        return Ok(infeasible(0));
    };
    let red = reduce(&asm, &x0, &nullsp);
    let mut budget = max_iter;

    // Phase 1: find strictly feasible y, or certify infeasibility.
    let mut y = DVector::zeros(red.dim_y);
    if !red.strictly_feasible(&y) {
        match phase_one(&red, &mut budget) {
            Some(feasible) => y = feasible,
            None => return Ok(infeasible(max_iter - budget)),
        }
    }

    // Phase 2: path-following on the true objective.
    let mut t = 1.0;
    let mut status = SdpStatus::Optimal;
    let mut dual_inf;
    loop {
        let grad_norm = red.center(t, &mut y, &mut budget);
        dual_inf = grad_norm / t;
        let obj_min = red.c.dot(&y) + red.c0;
        if obj_min < -1e12 {
            status = SdpStatus::Unbounded;
            break;
        }
        let gap = red.m_total as f64 / t;
        if gap <= tol * obj_min.abs().max(1.0) {
            break;
        }
        if budget == 0 {
            status = SdpStatus::MaxIter;
            break;
        }
        t *= 10.0;
    }

    // Recover block values and certify.
    let x = &x0 + &nullsp * &y;
    let blocks: Vec<DMatrix<f64>> = problem
        .blocks
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let off = asm.offsets[k];
            smat(&x.as_slice()[off..off + svec_dim(spec.dim)], spec.dim)
        })
        .collect();
    let report = check_solution(problem, &blocks);
    let primal_inf = report
        .lmi_min_eigs
        .iter()
        .map(|e| (-e).max(0.0))
        .fold(0.0, f64::max);
    let eq_inf = report.eq_residuals.iter().copied().fold(0.0, f64::max);
    let objective = asm.obj_sign * (red.c.dot(&y) + red.c0);
    let rel_gap = (red.m_total as f64 / t) / objective.abs().max(1.0);
    if status == SdpStatus::Optimal && (primal_inf > tol || rel_gap > tol) {
        status = SdpStatus::MaxIter;
    }
    Ok(SdpSolution {
        blocks,
        objective,
        status,
        residuals: Residuals {
            primal_inf,
            eq_inf,
            rel_gap,
            dual_inf,
        },
        newton_iters: max_iter - budget,
    })
}

fn zero_blocks(problem: &SdpProblem) -> Vec<DMatrix<f64>> {
    problem
        .blocks
        .iter()
        .map(|b| DMatrix::zeros(b.dim, b.dim))
        .collect()
}

/// Minimize `s` subject to `F_j(y) + s I ⪰ 0`, stopping as soon as a strictly
/// feasible `y` is found. Returns `None` when the infimum is nonnegative.
/// The early exit matters beyond speed: once the original constraints admit
/// an interior point, the phase-1 objective is unbounded below.
fn phase_one(red: &Reduced, budget: &mut usize) -> Option<DVector<f64>> {
    // Extended problem over (y, s): the slack variable multiplies I in every LMI.
    let dim_y = red.dim_y;
    let mut lmi_coeff = Vec::new();
    for (j, coeffs) in red.lmi_coeff.iter().enumerate() {
        let d = red.lmi_const[j].nrows();
        let mut ext: Vec<DMatrix<f64>> = coeffs.clone();
        ext.push(DMatrix::identity(d, d));
        lmi_coeff.push(ext);
    }
    let mut c = DVector::zeros(dim_y + 1);
    c[dim_y] = 1.0;
    let ext = Reduced {
        dim_y: dim_y + 1,
        c,
        c0: 0.0,
        lmi_const: red.lmi_const.clone(),
        lmi_coeff,
        m_total: red.m_total,
    };

    let mut s0: f64 = 0.0;
    for f in &red.lmi_const {
        s0 = s0.max(-linalg::min_eig(f));
    }
    let scale = red
        .lmi_const
        .iter()
        .map(|f| f.abs().max())
        .fold(1.0, f64::max);
    let margin = 1e-8 * scale.max(1.0);
    let base = |y_ext: &DVector<f64>| DVector::from_fn(dim_y, |i, _| y_ext[i]);
    let interior = |y_ext: &DVector<f64>| {
        let y = base(y_ext);
        (0..red.lmi_const.len()).all(|j| linalg::min_eig(&red.eval_lmi(j, &y)) > margin)
    };
    let mut y_ext = DVector::zeros(dim_y + 1);
    y_ext[dim_y] = s0 + 0.1 * scale + 1.0;

    let mut t = 1.0;
    for _ in 0..80 {
        ext.center_with_exit(t, &mut y_ext, budget, interior);
        if interior(&y_ext) {
            return Some(base(&y_ext));
        }
        // Gap on the phase-1 program bounds s - inf s.
        if ext.m_total as f64 / t < 1e-10 * scale.max(1.0) || *budget == 0 {
            break;
        }
        t *= 10.0;
    }
    if interior(&y_ext) {
        return Some(base(&y_ext));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// min x s.t. x >= 1, as a 1x1 SDP.
    fn scalar_lower_bound(bound: f64) -> SdpProblem {
        let mut p = SdpProblem::new(Sense::Minimize);
        let x = p.add_block("x", 1);
        p.objective.push((x, DMatrix::identity(1, 1)));
        p.lmis.push(
            AffineMatrixExpr::new(DMatrix::from_element(1, 1, -bound)).with_term(
                x,
                LinearTerm::Congruence {
                    t: DMatrix::identity(1, 1),
                    scale: 1.0,
                },
            ),
        );
        p
    }

    #[test]
    fn scalar_bound_attained() {
        let p = scalar_lower_bound(1.0);
        let sol = solve(&p, 1e-8, 50_000).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert_relative_eq!(sol.objective, 1.0, epsilon = 1e-6);
        assert_relative_eq!(sol.blocks[0][(0, 0)], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn contradictory_constraints_infeasible() {
        // x >= 1 and -x >= 0.
        let mut p = scalar_lower_bound(1.0);
        let x = 0;
        p.lmis
            .push(AffineMatrixExpr::new(DMatrix::zeros(1, 1)).with_term(
                x,
                LinearTerm::Congruence {
                    t: DMatrix::identity(1, 1),
                    scale: -1.0,
                },
            ));
        let sol = solve(&p, 1e-8, 50_000).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    /// Exact LQR primal for the scalar system A=1, B=1, Q=R=W=1. The optimum
    /// is the golden ratio (root of P^2 - P - 1 = 0).
    fn scalar_lqr_primal() -> SdpProblem {
        let mut p = SdpProblem::new(Sense::Minimize);
        let sigma = p.add_block("sigma", 2);
        p.objective.push((sigma, DMatrix::identity(2, 2)));
        // E Σ E^T - Θ^T Σ Θ - W = 0 with E = [1 0], Θ = [1; 1].
        let e = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let theta_t = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.equalities.push(
            AffineMatrixExpr::new(DMatrix::from_element(1, 1, -1.0))
                .with_term(sigma, LinearTerm::Congruence { t: e, scale: 1.0 })
                .with_term(
                    sigma,
                    LinearTerm::Congruence {
                        t: theta_t,
                        scale: -1.0,
                    },
                ),
        );
        p.require_psd(sigma);
        p
    }

    #[test]
    fn scalar_lqr_primal_hits_golden_ratio() {
        let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
        let sol = solve(&scalar_lqr_primal(), 1e-9, 100_000).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert_relative_eq!(sol.objective, phi, epsilon = 1e-5);
        // Extracted policy K = Σ_ux / Σ_xx.
        let k = sol.blocks[0][(1, 0)] / sol.blocks[0][(0, 0)];
        assert_relative_eq!(k, 1.0 - phi, epsilon = 1e-4);
    }

    /// Dual form of the same instance: max P s.t. [[Q-P, 0],[0, R]] + Θ P Θ^T >= 0.
    #[test]
    fn scalar_lqr_dual_hits_golden_ratio() {
        let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
        let mut p = SdpProblem::new(Sense::Maximize);
        let pd = p.add_block("p", 1);
        p.objective.push((pd, DMatrix::identity(1, 1)));
        let theta = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let embed = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        p.lmis.push(
            AffineMatrixExpr::new(DMatrix::identity(2, 2))
                .with_term(
                    pd,
                    LinearTerm::Congruence {
                        t: embed,
                        scale: -1.0,
                    },
                )
                .with_term(
                    pd,
                    LinearTerm::Congruence {
                        t: theta,
                        scale: 1.0,
                    },
                ),
        );
        p.require_psd(pd);
        let sol = solve(&p, 1e-9, 100_000).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert_relative_eq!(sol.objective, phi, epsilon = 1e-5);
    }

    #[test]
    fn check_solution_reports_constructed_perturbation() {
        let p = scalar_lower_bound(1.0);
        // Optimal point passes.
        let sol = solve(&p, 1e-8, 50_000).unwrap();
        let ok = check_solution(&p, &sol.blocks);
        assert!(ok.lmi_min_eigs.iter().all(|e| *e >= -1e-8));
        // Shifting the block down by 0.1 shows up as a -0.1 violation.
        let perturbed = vec![DMatrix::from_element(1, 1, 0.9)];
        let bad = check_solution(&p, &perturbed);
        assert_relative_eq!(bad.lmi_min_eigs[0], -0.1, epsilon = 1e-9);
        // Zero blocks violate by exactly -1.
        let zero = vec![DMatrix::zeros(1, 1)];
        let worse = check_solution(&p, &zero);
        assert_relative_eq!(worse.lmi_min_eigs[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn exhausted_budget_reports_max_iter_with_best_iterate() {
        let p = scalar_lqr_primal();
        let sol = solve(&p, 1e-12, 25).unwrap();
        assert_eq!(sol.status, SdpStatus::MaxIter);
        // The iterate is still usable and not wildly off.
        assert!(sol.objective.is_finite());
        assert!(sol.residuals.eq_inf < 1e-6);
    }

    #[test]
    fn tightening_never_decreases_minimum() {
        let mut last = f64::NEG_INFINITY;
        for bound in [0.5, 1.0, 2.0, 4.0] {
            let sol = solve(&scalar_lower_bound(bound), 1e-8, 50_000).unwrap();
            assert!(sol.objective >= last - 1e-9);
            last = sol.objective;
        }
    }

    #[test]
    fn hand_feasible_point_passes_check() {
        // Σ from a known stabilizing K for the scalar exact primal, with the
        // equality satisfied by construction.
        let p = scalar_lqr_primal();
        let k = -0.6;
        // X = (A+BK) X (A+BK) + B D B + W with D > 0 chosen freely.
        let m = 1.0 + k;
        let d = 0.05;
        let x = (d + 1.0) / (1.0 - m * m);
        let blocks = vec![DMatrix::from_row_slice(
            2,
            2,
            &[x, k * x, k * x, k * k * x + d],
        )];
        let rep = check_solution(&p, &blocks);
        assert!(
            rep.eq_residuals[0] < 1e-9,
            "eq residual {}",
            rep.eq_residuals[0]
        );
        assert!(rep.lmi_min_eigs[0] > 0.0);
    }

    #[test]
    fn debug_json_roundtrips_structure() {
        let p = scalar_lqr_primal();
        let v = p.to_debug_json();
        assert_eq!(v["blocks"][0]["dim"], 2);
        assert_eq!(v["sense"], "min");
        assert_eq!(v["equalities"].as_array().unwrap().len(), 1);
    }
}
