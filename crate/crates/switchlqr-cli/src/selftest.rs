//! Built-in verification suites at reduced sizes, runnable from the CLI.
//! A fault-injection hook exists so the suites themselves can be tested:
//! flipping the extracted feedback's sign must trip the stability suite.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switchlqr::knownlqr::{dwell_star, exact_sdp, solve_dare};
use switchlqr::linalg;
use switchlqr::ofu;
use switchlqr::online::{run, warmup, GroundTruth, Learner, ModeInfo, RunConfig, WarmupSpec};
use switchlqr::plant::{
    CostMatrices, Mode, ModeBounds, ModeDynamics, NoiseModel, SwitchSequence, SwitchedPlant,
};
use switchlqr::sysid::{self, ConfidenceSet, Dataset, RadiusRule, Registry};

/// Test-only fault injection points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the extracted feedback before the stability checks.
    FlipFeedbackSign,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("suite                          status  detail\n");
        for s in &self.suites {
            out.push_str(&format!(
                "{:<30} {:<7} {}\n",
                s.name,
                if s.passed { "pass" } else { "FAIL" },
                s.detail
            ));
        }
        out
    }
}

fn unit_costs(n: usize, m: usize) -> CostMatrices {
    CostMatrices::new(DMatrix::identity(n, n), DMatrix::identity(m, m)).unwrap()
}

fn suite_dare_sdp_agreement() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_j: f64 = 0.0;
    let mut worst_k: f64 = 0.0;
    let mut count = 0;
    'outer: while count < 5 {
        let (n, m) = ([(2usize, 1usize), (3, 1), (2, 2)])[count % 3];
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.9..0.9));
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let theta = match ModeDynamics::new(a, b, 0) {
            Ok(t) => t,
            Err(_) => continue 'outer,
        };
        let costs = unit_costs(n, m);
        let dare = match solve_dare(&theta, &costs, 1.0, 1e-12, 50_000) {
            Ok(d) => d,
            Err(_) => continue 'outer,
        };
        if linalg::spectral_radius(&(&theta.a + &theta.b * &dare.k_star)) >= 0.95 {
            continue 'outer;
        }
        let w = DMatrix::identity(n, n);
        let sdp_sol = match exact_sdp(&theta, &costs, &w) {
            Ok(s) => s,
            Err(e) => {
                return SuiteResult {
                    name: "dare-sdp-agreement",
                    passed: false,
                    detail: format!("solve failed: {e}"),
                }
            }
        };
        worst_j = worst_j.max((sdp_sol.j_star - dare.j_star).abs() / dare.j_star);
        worst_k = worst_k.max(linalg::op_norm(&(&sdp_sol.k - &dare.k_star)));
        count += 1;
    }
    SuiteResult {
        name: "dare-sdp-agreement",
        passed: worst_j <= 1e-4 && worst_k <= 1e-3,
        detail: format!("worst relative J gap {worst_j:.2e}, worst K gap {worst_k:.2e}"),
    }
}

fn suite_coverage() -> SuiteResult {
    // Reduced coverage check: 20 replicates of a 2-state mode, delta = 0.1.
    let a = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, 0.0, 0.5]);
    let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.4]);
    let theta = ModeDynamics::new(a.clone(), b.clone(), 0).unwrap();
    let truth = theta.theta();
    let vartheta = 1.1 * linalg::op_norm(&truth);
    let k0 = DMatrix::from_row_slice(1, 2, &[-0.3, -0.2]);
    let sigma = 1.0;
    let lambda = sigma * sigma / (vartheta * vartheta);
    let noise = NoiseModel::gaussian(sigma);
    let mut misses = 0;
    let reps = 20;
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + rep);
        let mut data = Dataset::new(0, 2, 1, false);
        let mut x = DVector::zeros(2);
        for t in 0..400u64 {
            let eta: f64 = rng.gen_range(-1.0..1.0) * 2.0;
            let u = &k0 * &x + DVector::from_element(1, eta);
            let w = noise.sample(2, &mut rng);
            let x_next = &a * &x + &b * &u + &w;
            let mut z = DVector::zeros(3);
            z.rows_mut(0, 2).copy_from(&x);
            z.rows_mut(2, 1).copy_from(&u);
            data.push(t, z, x_next.clone()).unwrap();
            x = x_next;
        }
        let conf = ConfidenceSet::from_dataset(
            &data,
            lambda,
            0.1,
            &DMatrix::zeros(3, 2),
            RadiusRule::NormBound(vartheta),
            sigma,
        )
        .unwrap();
        if !sysid::contains(&conf, &truth) {
            misses += 1;
        }
    }
    let rate = misses as f64 / reps as f64;
    SuiteResult {
        name: "confidence-coverage",
        passed: rate <= 0.3,
        detail: format!("miss rate {rate:.2} over {reps} replicates"),
    }
}

fn two_state_pair() -> SwitchedPlant {
    let a1 = DMatrix::from_row_slice(2, 2, &[0.72, 0.35, 0.0, 0.4]);
    let b1 = DMatrix::from_row_slice(2, 1, &[1.0, 0.25]);
    let a2 = DMatrix::from_row_slice(2, 2, &[0.35, 0.0, 0.45, 0.65]);
    let b2 = DMatrix::from_row_slice(2, 1, &[0.2, 1.0]);
    let costs = unit_costs(2, 1);
    let bounds = ModeBounds::new(1.0, 1.0, 1.46, 3.8).unwrap();
    SwitchedPlant::new(
        vec![
            Mode {
                dynamics: ModeDynamics::new(a1, b1, 0).unwrap(),
                costs: costs.clone(),
                bounds,
            },
            Mode {
                dynamics: ModeDynamics::new(a2, b2, 1).unwrap(),
                costs,
                bounds,
            },
        ],
        NoiseModel::gaussian(1.0),
        DVector::zeros(2),
    )
    .unwrap()
}

fn suite_zero_uncertainty_collapse() -> SuiteResult {
    let mut plant = two_state_pair();
    let truth: Vec<_> = plant
        .modes
        .iter()
        .map(|m| solve_dare(&m.dynamics, &m.costs, 1.0, 1e-13, 200_000).unwrap())
        .collect();
    let n = plant.n();
    let mut registry = Registry::new();
    let mut datasets = Vec::new();
    let mut priors = Vec::new();
    let mut infos = Vec::new();
    for (i, mode) in plant.modes.iter().enumerate() {
        let m = mode.dynamics.m();
        registry
            .update(
                i,
                ConfidenceSet {
                    theta_hat: mode.dynamics.theta(),
                    v: DMatrix::identity(n + m, n + m) * 1e6,
                    r: 0.0,
                    lambda: 1e6,
                    delta: 0.1,
                    n_samples: 0,
                    epsilon_prior: 0.0,
                    gram_norm: 0.0,
                },
                0,
            )
            .unwrap();
        datasets.push(Dataset::new(i, n, m, false));
        priors.push(mode.dynamics.theta());
        infos.push(ModeInfo {
            costs: mode.costs.clone(),
            bounds: mode.bounds,
        });
    }
    let mut learner =
        Learner::from_parts(infos, 1.0, 0.1, registry, datasets, priors, vec![0.0, 0.0]);
    learner.freeze_registry = true;
    let mut seq = SwitchSequence::seeded(2, 11, true, ChaCha8Rng::seed_from_u64(31));
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let cfg = RunConfig {
        alpha_bar: 0.9,
        x0: DVector::zeros(2),
        seed: 32,
    };
    let trace = match run(&mut plant, &mut seq, &mut learner, &cfg, &mut rng) {
        Ok(t) => t,
        Err(e) => {
            return SuiteResult {
                name: "zero-uncertainty-collapse",
                passed: false,
                detail: format!("run failed: {e}"),
            }
        }
    };
    if trace.aborted.is_some() || trace.epochs.len() != 10 {
        return SuiteResult {
            name: "zero-uncertainty-collapse",
            passed: false,
            detail: format!("aborted: {:?}", trace.aborted),
        };
    }
    let mut worst: f64 = 0.0;
    for ep in &trace.epochs {
        let dare = &truth[ep.mode];
        worst = worst.max(linalg::op_norm(&(&ep.k_mat - &dare.k_star)));
        worst = worst.max(linalg::frob_dist(&ep.p_i, &dare.p_star));
        let known = dwell_star(
            &truth[ep.mode],
            &plant.modes[ep.mode].costs,
            &truth[ep.next_mode],
            0.9,
        )
        .unwrap();
        if ep.tau_es != known.tau {
            return SuiteResult {
                name: "zero-uncertainty-collapse",
                passed: false,
                detail: format!("dwell mismatch at epoch {}", ep.k),
            };
        }
    }
    SuiteResult {
        name: "zero-uncertainty-collapse",
        passed: worst <= 1e-6,
        detail: format!("worst K/P deviation {worst:.2e}"),
    }
}

fn suite_online_stability(fault: Option<Fault>) -> SuiteResult {
    // Short learned run on a scalar pair; checks strong stability and the
    // dual sandwich per epoch with the ground truth. The faster mode is
    // chosen so that a sign-flipped feedback provably leaves the stability
    // margin, which the fault-injection test relies on.
    let vartheta = 1.343;
    let nu = 1.913;
    let bounds = ModeBounds::new(1.0, 1.0, vartheta, nu).unwrap();
    let mk = |id: usize, a: f64| Mode {
        dynamics: ModeDynamics::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            id,
        )
        .unwrap(),
        costs: unit_costs(1, 1),
        bounds,
    };
    let mut plant = SwitchedPlant::new(
        vec![mk(0, 0.45), mk(1, 0.7)],
        NoiseModel::gaussian(1.0),
        DVector::zeros(1),
    )
    .unwrap();
    let specs: Vec<WarmupSpec> = plant
        .modes
        .iter()
        .map(|m| WarmupSpec {
            k0: DMatrix::from_element(1, 1, -m.dynamics.a[(0, 0)]),
            kappa0: 3.0,
            t0: 2_200_000,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut learner = match warmup(&mut plant, &specs, 0.1, false, &mut rng) {
        Ok(l) => l,
        Err(e) => {
            return SuiteResult {
                name: "online-stability-sandwich",
                passed: false,
                detail: format!("warmup failed: {e}"),
            }
        }
    };
    let mut seq = SwitchSequence::seeded(2, 11, true, ChaCha8Rng::seed_from_u64(72));
    let cfg = RunConfig {
        alpha_bar: 0.9,
        x0: DVector::zeros(1),
        seed: 71,
    };
    let trace = match run(&mut plant, &mut seq, &mut learner, &cfg, &mut rng) {
        Ok(t) => t,
        Err(e) => {
            return SuiteResult {
                name: "online-stability-sandwich",
                passed: false,
                detail: format!("run failed: {e}"),
            }
        }
    };
    if trace.aborted.is_some() {
        return SuiteResult {
            name: "online-stability-sandwich",
            passed: false,
            detail: format!("aborted: {:?}", trace.aborted),
        };
    }
    let truth = GroundTruth::from_plant(&plant).unwrap();
    let mut checked = 0;
    for ep in &trace.epochs {
        let theta_i = plant.modes[ep.mode].dynamics.theta();
        if !sysid::contains(&ep.conf_i, &theta_i) {
            continue;
        }
        checked += 1;
        let mut k_mat = ep.k_mat.clone();
        if fault == Some(Fault::FlipFeedbackSign) {
            k_mat = -k_mat;
        }
        let cert = ofu::stability_params(&plant.modes[ep.mode].bounds, 1.0);
        let closed = &plant.modes[ep.mode].dynamics.a + &plant.modes[ep.mode].dynamics.b * &k_mat;
        if linalg::spectral_radius(&closed) > 1.0 - cert.gamma + 1e-8 {
            return SuiteResult {
                name: "online-stability-sandwich",
                passed: false,
                detail: format!("stability violated at epoch {}", ep.k),
            };
        }
        let p_star = &truth.dares[ep.mode].p_star;
        if linalg::min_eig(&(p_star - &ep.p_i)) < -1e-6
            || linalg::min_eig(&(&ep.p_i + &ep.chi_i - p_star)) < -1e-6
        {
            return SuiteResult {
                name: "online-stability-sandwich",
                passed: false,
                detail: format!("sandwich violated at epoch {}", ep.k),
            };
        }
    }
    SuiteResult {
        name: "online-stability-sandwich",
        passed: checked > 0,
        detail: format!("{checked} covered epochs checked"),
    }
}

fn suite_dwell_bounds() -> SuiteResult {
    // Known-parameter dwell-time spot checks on the two-state pair.
    let plant = two_state_pair();
    let truth: Vec<_> = plant
        .modes
        .iter()
        .map(|m| solve_dare(&m.dynamics, &m.costs, 1.0, 1e-13, 200_000).unwrap())
        .collect();
    for (i, j) in [(0usize, 1usize), (1, 0), (0, 0), (1, 1)] {
        let d = match dwell_star(&truth[i], &plant.modes[i].costs, &truth[j], 0.9) {
            Ok(d) => d,
            Err(e) => {
                return SuiteResult {
                    name: "dwell-bounds",
                    passed: false,
                    detail: format!("dwell failed: {e}"),
                }
            }
        };
        if d.tau < 1 || !(d.eta > 0.0 && d.eta <= 1.0) {
            return SuiteResult {
                name: "dwell-bounds",
                passed: false,
                detail: format!("degenerate dwell for ({i},{j})"),
            };
        }
    }
    SuiteResult {
        name: "dwell-bounds",
        passed: true,
        detail: "4 mode pairs".into(),
    }
}

/// Run every suite; `fault` is a test-only hook for mutation checks.
pub fn selftest(fault: Option<Fault>) -> SelftestReport {
    let suites = vec![
        suite_dare_sdp_agreement(),
        suite_coverage(),
        suite_zero_uncertainty_collapse(),
        suite_online_stability(fault),
        suite_dwell_bounds(),
    ];
    SelftestReport { suites }
}
