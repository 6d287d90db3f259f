//! Acceptance suite: one test per exit criterion, each printing a pass line.
//! Heavy Monte Carlo fixtures are computed once and shared across criteria.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use switchlqr::knownlqr::{beta_bar, dwell_star, exact_sdp, solve_dare};
use switchlqr::linalg;
use switchlqr::ofu;
use switchlqr::online::{
    annotate_trace, contraction_check, monitor_state_bounds, run, warmup, GroundTruth, Learner,
    ModeInfo, RunConfig, RunTrace, WarmupSpec,
};
use switchlqr::plant::{
    CostMatrices, Mode, ModeBounds, ModeDynamics, NoiseModel, SwitchSequence, SwitchedPlant,
};
use switchlqr::sysid::{self, ConfidenceSet, Dataset, RadiusRule, Registry};
use switchlqr_cli::config::{
    ExperimentConfig, ModeConfig, ScenarioConfig, SequenceConfig, WarmupConfig,
};
use switchlqr_cli::experiment::run_experiment;

fn pass(criterion: usize, name: &str, detail: &str) {
    println!("criterion {criterion} ({name}): PASS: {detail}");
}

// --- shared scalar scenario -------------------------------------------------

const SCALAR_A: [f64; 2] = [0.3, 0.45];
const SCALAR_B: [f64; 2] = [1.0, 1.0];
const SCALAR_VARTHETA: f64 = 1.2063;
const SCALAR_NU: f64 = 1.6595;
const SCALAR_T0: u64 = 800_000;
const ALPHA_BAR: f64 = 0.9;

fn scalar_plant() -> SwitchedPlant {
    let mk = |id: usize, a: f64, b: f64| Mode {
        dynamics: ModeDynamics::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            id,
        )
        .unwrap(),
        costs: CostMatrices::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap(),
        bounds: ModeBounds::new(1.0, 1.0, SCALAR_VARTHETA, SCALAR_NU).unwrap(),
    };
    SwitchedPlant::new(
        vec![
            mk(0, SCALAR_A[0], SCALAR_B[0]),
            mk(1, SCALAR_A[1], SCALAR_B[1]),
        ],
        NoiseModel::gaussian(1.0),
        DVector::zeros(1),
    )
    .unwrap()
}

fn scalar_specs(plant: &SwitchedPlant) -> Vec<WarmupSpec> {
    plant
        .modes
        .iter()
        .map(|m| WarmupSpec {
            k0: DMatrix::from_element(1, 1, -m.dynamics.a[(0, 0)] / m.dynamics.b[(0, 0)]),
            kappa0: 3.0,
            t0: SCALAR_T0,
        })
        .collect()
}

fn scalar_run(seed: u64, switches: usize) -> (SwitchedPlant, RunTrace) {
    let mut plant = scalar_plant();
    let specs = scalar_specs(&plant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut learner = warmup(&mut plant, &specs, 0.1, false, &mut rng).unwrap();
    let mut seq = SwitchSequence::seeded(
        2,
        switches + 1,
        true,
        ChaCha8Rng::seed_from_u64(seed ^ 0x5151),
    );
    let cfg = RunConfig {
        alpha_bar: ALPHA_BAR,
        x0: DVector::zeros(1),
        seed,
    };
    let trace = run(&mut plant, &mut seq, &mut learner, &cfg, &mut rng).unwrap();
    (plant, trace)
}

// --- shared fixtures --------------------------------------------------------

struct CertifiedRun {
    plant: SwitchedPlant,
    trace: RunTrace,
    truth: GroundTruth,
}

/// One 30-epoch learned run whose consumed ellipsoids all contain the truth.
fn certified_run() -> &'static CertifiedRun {
    static CELL: OnceLock<CertifiedRun> = OnceLock::new();
    CELL.get_or_init(|| {
        let (plant, mut trace) = scalar_run(41, 30);
        assert!(trace.aborted.is_none(), "run aborted: {:?}", trace.aborted);
        assert_eq!(trace.epochs.len(), 30);
        let truth = GroundTruth::from_plant(&plant).unwrap();
        annotate_trace(&mut trace, &plant, &truth, ALPHA_BAR).unwrap();
        for ep in &trace.epochs {
            let in_i = sysid::contains(&ep.conf_i, &plant.modes[ep.mode].dynamics.theta());
            let in_j = sysid::contains(&ep.conf_j, &plant.modes[ep.next_mode].dynamics.theta());
            assert!(
                in_i && in_j,
                "epoch {} not covered; pick another seed",
                ep.k
            );
        }
        CertifiedRun {
            plant,
            trace,
            truth,
        }
    })
}

struct MonteCarlo {
    plant: SwitchedPlant,
    traces: Vec<RunTrace>,
    gen_time: Duration,
}

/// 500-replicate Monte Carlo of the scalar scenario (15 switches each).
fn monte_carlo() -> &'static MonteCarlo {
    static CELL: OnceLock<MonteCarlo> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let template = scalar_plant();
        let traces: Vec<RunTrace> = (0..500u64)
            .into_par_iter()
            .map(|rep| {
                let mut plant = template.clone();
                let specs = scalar_specs(&plant);
                let mut rng = ChaCha8Rng::seed_from_u64(9000 + rep);
                let mut learner = warmup(&mut plant, &specs, 0.1, false, &mut rng).unwrap();
                let mut seq =
                    SwitchSequence::seeded(2, 16, true, ChaCha8Rng::seed_from_u64(77_000 + rep));
                let cfg = RunConfig {
                    alpha_bar: ALPHA_BAR,
                    x0: DVector::zeros(1),
                    seed: rep,
                };
                run(&mut plant, &mut seq, &mut learner, &cfg, &mut rng).unwrap()
            })
            .collect();
        let aborted = traces.iter().filter(|t| t.aborted.is_some()).count();
        assert_eq!(aborted, 0, "{aborted}/500 replicates aborted");
        MonteCarlo {
            plant: template,
            traces,
            gen_time: start.elapsed(),
        }
    })
}

// --- criterion 1 ------------------------------------------------------------

#[test]
fn criterion_1_dare_sdp_agreement() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_001);
    let dims = [(1usize, 1usize), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)];
    let mut worst_j: f64 = 0.0;
    let mut worst_k: f64 = 0.0;
    let mut done = 0;
    while done < 20 {
        let (n, m) = dims[done % dims.len()];
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.9..0.9));
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let theta = ModeDynamics::new(a, b, 0).unwrap();
        let costs = CostMatrices::new(DMatrix::identity(n, n), DMatrix::identity(m, m)).unwrap();
        let Ok(dare) = solve_dare(&theta, &costs, 1.0, 1e-12, 50_000) else {
            continue;
        };
        if linalg::spectral_radius(&(&theta.a + &theta.b * &dare.k_star)) >= 0.95 {
            continue;
        }
        let sol = exact_sdp(&theta, &costs, &DMatrix::identity(n, n)).unwrap();
        worst_j = worst_j.max((sol.j_star - dare.j_star).abs() / dare.j_star);
        worst_k = worst_k.max(linalg::op_norm(&(&sol.k - &dare.k_star)));
        done += 1;
    }
    let elapsed = start.elapsed();
    assert!(worst_j <= 1e-4, "relative J gap {worst_j}");
    assert!(worst_k <= 1e-3, "K gap {worst_k}");
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    pass(
        1,
        "dare-sdp-agreement",
        &format!("20 systems, worst J gap {worst_j:.2e}, worst K gap {worst_k:.2e}, {elapsed:?}"),
    );
}

// --- criterion 2 ------------------------------------------------------------

#[test]
fn criterion_2_confidence_coverage() {
    let start = Instant::now();
    let a = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, 0.0, 0.5]);
    let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.4]);
    let theta_true = ModeDynamics::new(a.clone(), b.clone(), 0).unwrap().theta();
    let k0 = DMatrix::from_row_slice(1, 2, &[-0.3, -0.2]);
    let sigma = 1.0;
    let delta = 0.1;
    let eps_prior = 1.1 * theta_true.norm();
    let lambda = sigma * sigma / (eps_prior * eps_prior);
    let checkpoints = [50usize, 200, 800];
    let noise = NoiseModel::gaussian(sigma);
    let misses: Vec<usize> = (0..200u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(31_000 + rep);
            let mut data = Dataset::new(0, 2, 1, false);
            let mut x = DVector::zeros(2);
            let mut miss_mask = 0usize;
            for t in 0..800u64 {
                let eta = noise.sample(1, &mut rng) * 2.0;
                let u = &k0 * &x + eta;
                let w = noise.sample(2, &mut rng);
                let x_next = &a * &x + &b * &u + &w;
                let mut z = DVector::zeros(3);
                z.rows_mut(0, 2).copy_from(&x);
                z.rows_mut(2, 1).copy_from(&u);
                data.push(t, z, x_next.clone()).unwrap();
                x = x_next;
                if let Some(idx) = checkpoints.iter().position(|c| *c == data.count) {
                    let conf = ConfidenceSet::from_dataset(
                        &data,
                        lambda,
                        delta,
                        &DMatrix::zeros(3, 2),
                        RadiusRule::PriorError(eps_prior),
                        sigma,
                    )
                    .unwrap();
                    if !sysid::contains(&conf, &theta_true) {
                        miss_mask |= 1 << idx;
                    }
                }
            }
            miss_mask
        })
        .collect();
    let elapsed = start.elapsed();
    let mut detail = String::new();
    for (idx, cp) in checkpoints.iter().enumerate() {
        let miss = misses.iter().filter(|m| *m & (1 << idx) != 0).count();
        let rate = miss as f64 / 200.0;
        assert!(rate <= 0.15, "checkpoint {cp}: miss rate {rate}");
        detail.push_str(&format!("n={cp}: {rate:.3} "));
    }
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    pass(
        2,
        "confidence-coverage",
        &format!("miss rates {detail}({elapsed:?})"),
    );
}

// --- criteria 3-5 on the certified run ---------------------------------------

#[test]
fn criterion_3_strong_stability() {
    let run = certified_run();
    let sigma_w = run.plant.noise.sigma_w;
    for ep in &run.trace.epochs {
        let cert = ofu::stability_params(&run.plant.modes[ep.mode].bounds, sigma_w);
        let closed =
            &run.plant.modes[ep.mode].dynamics.a + &run.plant.modes[ep.mode].dynamics.b * &ep.k_mat;
        let rho = linalg::spectral_radius(&closed);
        assert!(
            rho <= 1.0 - cert.gamma + 1e-8,
            "epoch {}: rho {} vs limit {}",
            ep.k,
            rho,
            1.0 - cert.gamma
        );
        let knorm = linalg::op_norm(&ep.k_mat);
        assert!(
            knorm <= cert.kappa + 1e-8,
            "epoch {}: |K| {} vs {}",
            ep.k,
            knorm,
            cert.kappa
        );
    }
    pass(
        3,
        "strong-stability",
        "30/30 epochs within (kappa, gamma) limits",
    );
}

#[test]
fn criterion_4_dual_sandwich() {
    let run = certified_run();
    for ep in &run.trace.epochs {
        let p_star = &run.truth.dares[ep.mode].p_star;
        let lower = linalg::min_eig(&(p_star - &ep.p_i));
        let upper = linalg::min_eig(&(&ep.p_i + &ep.chi_i - p_star));
        assert!(lower >= -1e-6, "epoch {}: lower slack {lower}", ep.k);
        assert!(upper >= -1e-6, "epoch {}: upper slack {upper}", ep.k);
    }
    pass(
        4,
        "dual-sandwich",
        "30/30 epochs inside the perturbation sandwich",
    );
}

#[test]
fn criterion_5_dwell_error_bound() {
    let run = certified_run();
    let mut worst_margin = f64::INFINITY;
    for ep in &run.trace.epochs {
        let tau_star = ep.tau_star.unwrap() as f64;
        let bound = ep.dwell_error_bound.unwrap();
        let err = ep.tau_es as f64 - tau_star;
        assert!(err <= bound, "epoch {}: error {err} vs bound {bound}", ep.k);
        worst_margin = worst_margin.min(bound - err);
    }
    pass(
        5,
        "dwell-error-bound",
        &format!("30/30 epochs within the bound, smallest slack {worst_margin:.3}"),
    );
}

// --- criteria 6-7 on the Monte Carlo fixture ---------------------------------

/// Companion invariant on the same fixture: the additive post-switch
/// comparison `mean_{k+1} ≤ mean_k + κ*⁴(α₁*/α₀*)σ² + 3·SE`.
#[test]
fn post_switch_additive_comparison() {
    let mc = monte_carlo();
    let bounds: Vec<ModeBounds> = mc.plant.modes.iter().map(|m| m.bounds).collect();
    let report = switchlqr::online::additive_switch_check(&mc.traces, &bounds, 1.0);
    assert!(!report.rows.is_empty());
    assert!(report.all_ok, "rows: {:?}", report.rows);
}

#[test]
fn criterion_6_contraction_after_switches() {
    let mc = monte_carlo();
    let bounds: Vec<ModeBounds> = mc.plant.modes.iter().map(|m| m.bounds).collect();
    let kappa_star = bounds
        .iter()
        .map(|b| (2.0 * b.nu / b.alpha0).sqrt())
        .fold(0.0f64, f64::max);
    let gamma_star = 1.0 / (2.0 * kappa_star * kappa_star);
    let beta = beta_bar(kappa_star, gamma_star, 1.0, 1.0).unwrap();
    let report = contraction_check(&mc.traces, ALPHA_BAR, beta, 1.0);
    assert!(!report.rows.is_empty());
    assert!(report.all_ok, "contraction rows: {:?}", report.rows);
    assert!(
        mc.gen_time < Duration::from_secs(180),
        "Monte Carlo took {:?}",
        mc.gen_time
    );
    pass(
        6,
        "post-switch-contraction",
        &format!(
            "{} switch steps under the contraction bound ({:?})",
            report.rows.len(),
            mc.gen_time
        ),
    );
}

#[test]
fn criterion_7_uniform_norm_envelope() {
    let mc = monte_carlo();
    let bounds: Vec<ModeBounds> = mc.plant.modes.iter().map(|m| m.bounds).collect();
    let report =
        monitor_state_bounds(&mc.traces, &bounds, 1.0, ALPHA_BAR, &DVector::zeros(1)).unwrap();
    assert!(
        report.violations_per_step.is_empty(),
        "steps above the envelope: {:?}",
        report.violations_per_step
    );
    assert!(
        report.violations_post_switch.is_empty(),
        "switches above the envelope: {:?}",
        report.violations_post_switch
    );
    let peak = report
        .per_step
        .iter()
        .map(|(m, _)| *m)
        .fold(0.0f64, f64::max);
    pass(
        7,
        "uniform-norm-envelope",
        &format!(
            "peak mean |x|^2 = {peak:.2} vs envelope {:.2} over {} steps",
            report.envelope.x_tilde(),
            report.per_step.len()
        ),
    );
}

// --- criterion 8 -------------------------------------------------------------

#[test]
fn criterion_8_zero_uncertainty_collapse() {
    let a1 = DMatrix::from_row_slice(2, 2, &[0.72, 0.35, 0.0, 0.4]);
    let b1 = DMatrix::from_row_slice(2, 1, &[1.0, 0.25]);
    let a2 = DMatrix::from_row_slice(2, 2, &[0.35, 0.0, 0.45, 0.65]);
    let b2 = DMatrix::from_row_slice(2, 1, &[0.2, 1.0]);
    let costs = CostMatrices::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1)).unwrap();
    let bounds = ModeBounds::new(1.0, 1.0, 1.46, 3.8).unwrap();
    let mut plant = SwitchedPlant::new(
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
    .unwrap();
    let truth: Vec<_> = plant
        .modes
        .iter()
        .map(|m| solve_dare(&m.dynamics, &m.costs, 1.0, 1e-13, 200_000).unwrap())
        .collect();
    let mut registry = Registry::new();
    let mut datasets = Vec::new();
    let mut priors = Vec::new();
    let mut infos = Vec::new();
    for (i, mode) in plant.modes.iter().enumerate() {
        registry
            .update(
                i,
                ConfidenceSet {
                    theta_hat: mode.dynamics.theta(),
                    v: DMatrix::identity(3, 3) * 1e6,
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
        datasets.push(Dataset::new(i, 2, 1, false));
        priors.push(mode.dynamics.theta());
        infos.push(ModeInfo {
            costs: mode.costs.clone(),
            bounds: mode.bounds,
        });
    }
    let mut learner =
        Learner::from_parts(infos, 1.0, 0.1, registry, datasets, priors, vec![0.0, 0.0]);
    learner.freeze_registry = true;
    let mut seq = SwitchSequence::seeded(2, 31, true, ChaCha8Rng::seed_from_u64(808));
    let mut rng = ChaCha8Rng::seed_from_u64(809);
    let cfg = RunConfig {
        alpha_bar: ALPHA_BAR,
        x0: DVector::zeros(2),
        seed: 809,
    };
    let trace = run(&mut plant, &mut seq, &mut learner, &cfg, &mut rng).unwrap();
    assert!(trace.aborted.is_none(), "{:?}", trace.aborted);
    assert_eq!(trace.epochs.len(), 30);
    let mut worst: f64 = 0.0;
    for ep in &trace.epochs {
        let dare = &truth[ep.mode];
        worst = worst.max(linalg::op_norm(&(&ep.k_mat - &dare.k_star)));
        worst = worst.max(linalg::frob_dist(&ep.p_i, &dare.p_star));
        let known = dwell_star(
            &truth[ep.mode],
            &plant.modes[ep.mode].costs,
            &truth[ep.next_mode],
            ALPHA_BAR,
        )
        .unwrap();
        assert_eq!(ep.tau_es, known.tau, "epoch {}: dwell mismatch", ep.k);
    }
    assert!(worst <= 1e-6, "worst K/P deviation {worst}");
    pass(
        8,
        "zero-uncertainty-collapse",
        &format!("30 epochs, worst K/P deviation {worst:.2e}, dwell identical"),
    );
}

// --- criterion 9 -------------------------------------------------------------

#[test]
fn criterion_9_regret_scaling() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        scenario: ScenarioConfig {
            recipe: "explicit".into(),
            modes: Some(vec![
                ModeConfig {
                    a: vec![vec![SCALAR_A[0]]],
                    b: vec![vec![SCALAR_B[0]]],
                    q: vec![vec![1.0]],
                    r: vec![vec![1.0]],
                },
                ModeConfig {
                    a: vec![vec![SCALAR_A[1]]],
                    b: vec![vec![SCALAR_B[1]]],
                    q: vec![vec![1.0]],
                    r: vec![vec![1.0]],
                },
            ]),
            bounds: None,
        },
        sigma_w: 1.0,
        noise_kind: switchlqr_cli::config::NoiseKindConfig::Gaussian,
        delta: 0.1,
        alpha_bar: ALPHA_BAR,
        x0: Some(vec![4.0]),
        warmup: WarmupConfig {
            t0: SCALAR_T0,
            kappa0: 3.0,
            k0: None,
            constants: None,
        },
        sequence: SequenceConfig::Seeded {
            switches: 8,
            avoid_repeat: true,
        },
        ns_sweep: Some(vec![8, 32, 128]),
        replicates: 10,
        seed: 11,
        output_dir: dir.path().join("sweep").display().to_string(),
        union_bound_delta: false,
    };
    let bundle = run_experiment(&cfg, false).unwrap();
    assert!(bundle.all_ok, "some replicates failed");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&bundle.summary_path).unwrap()).unwrap();
    let mut points = Vec::new();
    for row in summary["per_ns"].as_array().unwrap() {
        let ns = row["ns"].as_u64().unwrap() as f64;
        let mean = row["regret_mean"].as_f64().unwrap();
        assert!(mean.is_finite(), "regret at ns={ns} not finite");
        assert!(
            mean > 0.0,
            "mean regret at ns={ns} is {mean}, expected positive"
        );
        points.push((ns.ln(), mean.ln()));
    }
    assert_eq!(points.len(), 3);
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|(x, _)| x).sum();
    let sy: f64 = points.iter().map(|(_, y)| y).sum();
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let elapsed = start.elapsed();
    assert!(slope <= 0.85, "log-log regret slope {slope}");
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    pass(
        9,
        "regret-scaling",
        &format!("positive mean regret at ns 8/32/128, slope {slope:.3} ({elapsed:?})"),
    );
}

// --- criterion 10 ------------------------------------------------------------

#[test]
fn criterion_10_byte_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let make_cfg = |sub: &str| ExperimentConfig {
        scenario: ScenarioConfig {
            recipe: "scalar-pair".into(),
            modes: None,
            bounds: None,
        },
        sigma_w: 1.0,
        noise_kind: switchlqr_cli::config::NoiseKindConfig::Gaussian,
        delta: 0.1,
        alpha_bar: ALPHA_BAR,
        x0: None,
        warmup: WarmupConfig {
            t0: SCALAR_T0,
            kappa0: 3.0,
            k0: None,
            constants: None,
        },
        sequence: SequenceConfig::Seeded {
            switches: 6,
            avoid_repeat: true,
        },
        ns_sweep: None,
        replicates: 2,
        seed: 777,
        output_dir: dir.path().join(sub).display().to_string(),
        union_bound_delta: false,
    };
    let first = run_experiment(&make_cfg("one"), false).unwrap();
    let second = run_experiment(&make_cfg("two"), false).unwrap();
    assert_eq!(first.trace_paths.len(), second.trace_paths.len());
    assert!(!first.trace_paths.is_empty());
    for (a, b) in first.trace_paths.iter().zip(second.trace_paths.iter()) {
        let bytes_a = std::fs::read(a).unwrap();
        let bytes_b = std::fs::read(b).unwrap();
        assert_eq!(
            bytes_a,
            bytes_b,
            "{} and {} differ",
            a.display(),
            b.display()
        );
        assert!(!bytes_a.is_empty());
    }
    pass(
        10,
        "byte-identical-traces",
        &format!(
            "{} trace files byte-identical across invocations",
            first.trace_paths.len()
        ),
    );
}
