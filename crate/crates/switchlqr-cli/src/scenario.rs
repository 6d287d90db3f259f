//! Scenario generation: turn a config recipe into a switched plant with
//! self-consistent side information (`ϑ` from the true parameter norms, `ν`
//! from the optimal costs).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use switchlqr::knownlqr::{solve_dare, DareSolution};
use switchlqr::linalg;
use switchlqr::plant::{
    CostMatrices, Mode, ModeBounds, ModeDynamics, NoiseKind, NoiseModel, SwitchedPlant,
};

use crate::config::{NoiseKindConfig, ScenarioConfig};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown recipe '{0}'")]
    UnknownRecipe(String),
    #[error("could not generate a stabilizable mode within {0} resamples")]
    Resamples(usize),
    #[error("bad matrix shape in explicit mode {0}")]
    Shape(usize),
    #[error(transparent)]
    Plant(#[from] switchlqr::plant::PlantError),
    #[error(transparent)]
    Known(#[from] switchlqr::knownlqr::KnownLqrError),
}

pub struct Scenario {
    pub plant: SwitchedPlant,
    pub dares: Vec<DareSolution>,
}

fn mat_from(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let r = rows.len();
    if r == 0 {
        return None;
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return None;
    }
    Some(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

const MAX_RESAMPLES: usize = 100;

fn random_stabilizable(
    n: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DareSolution), ScenarioError> {
    let costs = CostMatrices::new(DMatrix::identity(n, n), DMatrix::identity(m, m)).unwrap();
    for _ in 0..MAX_RESAMPLES {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.9..0.9));
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let theta = ModeDynamics::new(a.clone(), b.clone(), 0)?;
        if let Ok(dare) = solve_dare(&theta, &costs, 1.0, 1e-12, 50_000) {
            if linalg::spectral_radius(&(&a + &b * &dare.k_star)) < 0.95 {
                return Ok((a, b, dare));
            }
        }
    }
    Err(ScenarioError::Resamples(MAX_RESAMPLES))
}

/// Raw mode matrices for a named recipe.
fn recipe_matrices(
    recipe: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>, ScenarioError> {
    match recipe {
        // Two stable scalar modes with unit costs.
        "scalar-pair" => {
            let a0 = rng.gen_range(0.2..0.5);
            let a1 = rng.gen_range(0.35..0.6);
            let b0 = rng.gen_range(0.8..1.2);
            let b1 = rng.gen_range(0.8..1.2);
            let eye = DMatrix::identity(1, 1);
            Ok(vec![
                (
                    DMatrix::from_element(1, 1, a0),
                    DMatrix::from_element(1, 1, b0),
                    eye.clone(),
                    eye.clone(),
                ),
                (
                    DMatrix::from_element(1, 1, a1),
                    DMatrix::from_element(1, 1, b1),
                    eye.clone(),
                    eye,
                ),
            ])
        }
        // Two random stabilizable 2-state/1-input modes.
        "random-2x1" => {
            let mut out = Vec::new();
            for _ in 0..2 {
                let (a, b, _) = random_stabilizable(2, 1, rng)?;
                out.push((a, b, DMatrix::identity(2, 2), DMatrix::identity(1, 1)));
            }
            Ok(out)
        }
        // Fixed anisotropic 2-state pair whose reference dwell times exceed
        // one for some switch directions.
        "dwell-demo" => {
            let a1 = DMatrix::from_row_slice(2, 2, &[0.72, 0.35, 0.0, 0.4]);
            let b1 = DMatrix::from_row_slice(2, 1, &[1.0, 0.25]);
            let a2 = DMatrix::from_row_slice(2, 2, &[0.35, 0.0, 0.45, 0.65]);
            let b2 = DMatrix::from_row_slice(2, 1, &[0.2, 1.0]);
            Ok(vec![
                (a1, b1, DMatrix::identity(2, 2), DMatrix::identity(1, 1)),
                (a2, b2, DMatrix::identity(2, 2), DMatrix::identity(1, 1)),
            ])
        }
        other => Err(ScenarioError::UnknownRecipe(other.to_string())),
    }
}

/// Build the plant for a scenario config. Side information defaults:
/// `α₀/α₁` from the cost eigenvalue range, `ϑ = 1.1·max‖Θ*‖`,
/// `ν = 1.5·max J*`.
pub fn generate_scenario(
    cfg: &ScenarioConfig,
    sigma_w: f64,
    noise_kind: NoiseKindConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Scenario, ScenarioError> {
    let raw: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> =
        if cfg.recipe == "explicit" {
            let modes = cfg.modes.as_ref().expect("validated");
            let mut out = Vec::new();
            for (i, mc) in modes.iter().enumerate() {
                let parse = |rows: &Vec<Vec<f64>>| mat_from(rows).ok_or(ScenarioError::Shape(i));
                out.push((parse(&mc.a)?, parse(&mc.b)?, parse(&mc.q)?, parse(&mc.r)?));
            }
            out
        } else {
            recipe_matrices(&cfg.recipe, rng)?
        };
    if raw.is_empty() {
        return Err(ScenarioError::Shape(0));
    }
    let n = raw[0].0.nrows();
    if n > 10 || raw.iter().any(|(_, b, _, _)| b.ncols() > 4) {
        return Err(ScenarioError::Shape(0));
    }

    // Stabilizability check and side information via the Riccati solutions.
    let mut dares = Vec::new();
    let mut theta_norm_max: f64 = 0.0;
    let mut j_star_max: f64 = 0.0;
    let mut alpha0 = f64::INFINITY;
    let mut alpha1: f64 = 0.0;
    for (i, (a, b, q, r)) in raw.iter().enumerate() {
        let dynamics = ModeDynamics::new(a.clone(), b.clone(), i)?;
        let costs = CostMatrices::new(q.clone(), r.clone())?;
        let dare = solve_dare(&dynamics, &costs, sigma_w, 1e-12, 200_000)?;
        theta_norm_max = theta_norm_max.max(linalg::op_norm(&dynamics.theta()));
        j_star_max = j_star_max.max(dare.j_star);
        let (qlo, qhi) = linalg::sym_eig_range(q);
        let (rlo, rhi) = linalg::sym_eig_range(r);
        alpha0 = alpha0.min(qlo).min(rlo);
        alpha1 = alpha1.max(qhi).max(rhi);
        dares.push(dare);
    }
    let bounds = match &cfg.bounds {
        Some(b) => ModeBounds::new(b.alpha0, b.alpha1, b.vartheta, b.nu)?,
        None => ModeBounds::new(alpha0, alpha1, 1.1 * theta_norm_max, 1.5 * j_star_max)?,
    };

    let mut modes = Vec::new();
    for (i, (a, b, q, r)) in raw.into_iter().enumerate() {
        modes.push(Mode {
            dynamics: ModeDynamics::new(a, b, i)?,
            costs: CostMatrices::new(q, r)?,
            bounds,
        });
    }
    let kind = match noise_kind {
        NoiseKindConfig::Gaussian => NoiseKind::Gaussian,
        NoiseKindConfig::TruncatedGaussian => NoiseKind::TruncatedGaussian,
        NoiseKindConfig::Zero => NoiseKind::Zero,
    };
    let noise = NoiseModel::new(sigma_w, kind)?;
    let plant = SwitchedPlant::new(modes, noise, DVector::zeros(n))?;
    Ok(Scenario { plant, dares })
}
