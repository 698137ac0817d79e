//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria. The
//! process exits successfully either way: the printed report is the result.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use curvematch::geometry::{Point, ScalarLoopField};
use curvematch::inference::{
    dip_test, effective_sample_size, run_chain, ChainRecord, ChainState, CurvePotential, Marginal, NullPotential,
    SamplerConfig,
};
use curvematch::io::write_histogram_table;
use curvematch::observation::ForwardModel;
use curvematch::optimize::{bfgs, bfgs_minimize, OptimizerConfig, Termination};
use curvematch::prior::{coefficient_std, sample_coefficients, PriorPair, SpectralField};
use curvematch::reparam::{cotangent_lift, lie_exponential, Reparameterisation};
use curvematch::scenarios::{
    run_scenario, scenario_data, stream_rng, template_circle, RunSettings, ScenarioKind, ScenarioSpec, SyntheticData,
};
use curvematch::shooting::{shoot_state, ShootConfig};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = (bool, String);

const SEED: u64 = 2024;

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "adjoint gradient vs central differences", adjoint_gradient),
        (2, "hamiltonian conservation", hamiltonian_drift),
        (3, "spatial convergence of q(1)", spatial_convergence),
        (4, "reparameterise/shoot commutation", commutation),
        (5, "pCN prior invariance", prior_invariance),
        (6, "acceptance robust under refinement", refinement_acceptance),
        (7, "posterior consistency ladder", consistency_ladder),
        (8, "multimodality scenario", multimodality),
        (9, "partial observations", partial_observations),
        (10, "MAP machinery", map_machinery),
    ];
    let mut passed = 0;
    let mut ran = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = check();
        ran += 1;
        passed += ok as usize;
        println!(
            "criterion {id:>2} {}: {name} -- {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed}/{ran} criteria passed");
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn field(values: Vec<f64>) -> ScalarLoopField {
    ScalarLoopField::new(values).unwrap()
}

fn axpy(x: &ScalarLoopField, a: f64, d: &[f64]) -> ScalarLoopField {
    field(x.values.iter().zip(d).map(|(x, d)| x + a * d).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn rms(d: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0);
    for v in d {
        s += v * v;
        n += 1;
    }
    (s / n as f64).sqrt()
}

fn settings<'a>(
    priors: &'a PriorPair,
    shoot: &'a ShootConfig,
    sampler: &'a SamplerConfig,
    optimizer: &'a OptimizerConfig,
) -> RunSettings<'a> {
    RunSettings {
        priors,
        shoot,
        sampler,
        optimizer,
        seed: SEED,
        bins: 40,
    }
}

/// Consistency-style data with `n_obs` points, synthesised at high resolution.
fn consistency_data(n_obs: usize) -> SyntheticData {
    let (priors, shoot) = (PriorPair::default(), ShootConfig::default());
    let (sampler, opt) = (SamplerConfig::default(), OptimizerConfig::default());
    let spec = ScenarioSpec {
        consistency: curvematch::scenarios::ConsistencyParams {
            n_obs: vec![n_obs],
            ..Default::default()
        },
        ..ScenarioSpec::new(ScenarioKind::Consistency)
    };
    scenario_data(&spec, &settings(&priors, &shoot, &sampler, &opt)).unwrap().remove(0).1
}

/// A joint prior draw `(p0, nu)` with `n_modes` modes.
fn prior_draw(priors: &PriorPair, n_modes: usize, rng: &mut impl Rng) -> (SpectralField, SpectralField) {
    (
        sample_coefficients(&priors.momentum, n_modes, rng),
        sample_coefficients(&priors.reparam, n_modes, rng),
    )
}

fn adjoint_gradient() -> Outcome {
    let t = Instant::now();
    let data = consistency_data(100);
    let cfg = ShootConfig::default();
    let model = ForwardModel::new(template_circle(100).unwrap(), cfg).unwrap();
    let priors = PriorPair::default();
    let mut rng = stream_rng(SEED, 1);
    let (p, n) = prior_draw(&priors, 50, &mut rng);
    let (p0, nu) = (p.to_samples(100), n.to_samples(100));
    let grad = model.gradient(&p0, &nu, &data.obs).unwrap();
    let phi = |p: &ScalarLoopField, v: &ScalarLoopField| model.potential(p, v, &data.obs);
    let mut worst: f64 = 0.0;
    for _ in 0..12 {
        // directions scaled like the fields they perturb
        let dp: Vec<f64> = normal_vec(&mut rng, 100).iter().map(|x| x * rms_of(&p0)).collect();
        let dn: Vec<f64> = normal_vec(&mut rng, 100).iter().map(|x| x * rms_of(&nu)).collect();
        let analytic = dot(&grad.p0.values, &dp) + dot(&grad.nu.values, &dn);
        let h = 1e-4;
        let f = |a: f64| phi(&axpy(&p0, a, &dp), &axpy(&nu, a, &dn));
        let fd = (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
        worst = worst.max((fd - analytic).abs() / analytic.abs());
    }
    let elapsed = t.elapsed();
    (
        worst < 1e-5 && elapsed < Duration::from_secs(60),
        format!("max relative error {worst:.2e} (< 1e-5), runtime {:.1}s (< 60s)", elapsed.as_secs_f64()),
    )
}

fn rms_of(f: &ScalarLoopField) -> f64 {
    rms(f.values.iter().copied())
}

fn lifted(p: &SpectralField, n: &SpectralField, n_p: usize, lie_steps: usize) -> curvematch::shooting::PhaseState {
    let eta = lie_exponential(&n.to_samples(n_p), lie_steps).unwrap();
    cotangent_lift(&p.to_samples(n_p), &template_circle(n_p).unwrap(), &eta).unwrap()
}

fn hamiltonian_drift() -> Outcome {
    let priors = PriorPair::default();
    let mut rng = stream_rng(SEED, 2);
    let (mut worst50, mut worst100, mut min_ratio) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..20 {
        let (p, n) = prior_draw(&priors, 50, &mut rng);
        let state = lifted(&p, &n, 100, 50);
        let drift = |steps| {
            let cfg = ShootConfig {
                steps,
                hamiltonian_tol: 1.0,
                ..Default::default()
            };
            shoot_state(&state, &cfg, false).unwrap().relative_drift()
        };
        let (d50, d100) = (drift(50), drift(100));
        worst50 = worst50.max(d50);
        worst100 = worst100.max(d100);
        min_ratio = min_ratio.min(d50 / d100);
    }
    // the reduction is judged on the worst case, like the drift bound; single
    // draws are reported since their signed drift can cancel at one step count
    let ratio = worst50 / worst100;
    (
        worst50 <= 1e-3 && ratio >= 8.0,
        format!(
            "max drift {worst50:.2e} at 50 steps (<= 1e-3), {worst100:.2e} at 100 steps, reduction {ratio:.1}x (>= 8); smallest single-draw reduction {min_ratio:.1}x"
        ),
    )
}

fn in_band(ratios: &[f64]) -> bool {
    ratios.iter().all(|r| (3.0..=5.0).contains(r))
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn spatial_convergence() -> Outcome {
    let priors = PriorPair::default();
    let (p, n) = prior_draw(&priors, 50, &mut stream_rng(SEED, 3));
    let cfg = ShootConfig::default();
    let curve_at = |n_p: usize| {
        ForwardModel::new(template_circle(n_p).unwrap(), cfg)
            .unwrap()
            .final_curve(&p.to_samples(n_p), &n.to_samples(n_p))
            .unwrap()
    };
    let reference = curve_at(1600);
    let errors: Vec<f64> = [100, 200, 400]
        .iter()
        .map(|&n_p| {
            let q = curve_at(n_p);
            // compare at the knots of the coarsest grid
            rms((0..100).map(|j| dist(q.points()[j * n_p / 100], reference.points()[j * 16])))
        })
        .collect();
    let ratios = [errors[0] / errors[1], errors[1] / errors[2]];
    (
        in_band(&ratios),
        format!("errors [{}], ratios [{}] (each in [3, 5])", fmt_list(&errors), fmt_list(&ratios)),
    )
}

fn commutation() -> Outcome {
    let priors = PriorPair::default();
    let (p, n) = prior_draw(&priors, 50, &mut stream_rng(SEED, 4));
    let cfg = ShootConfig::default();
    let gaps: Vec<f64> = [100, 200, 400]
        .iter()
        .map(|&n_p| {
            let template = template_circle(n_p).unwrap();
            let (p0, nu) = (p.to_samples(n_p), n.to_samples(n_p));
            let reparam_then_shoot = ForwardModel::new(template.clone(), cfg).unwrap().final_curve(&p0, &nu).unwrap();
            let unlifted = cotangent_lift(&p0, &template, &Reparameterisation::identity(n_p)).unwrap();
            let shot = shoot_state(&unlifted, &cfg, false).unwrap().final_state().q.spline();
            let eta = lie_exponential(&nu, cfg.lie_steps).unwrap();
            rms(eta.eta().iter().zip(reparam_then_shoot.points()).map(|(&e, &q)| dist(shot.eval(e), q)))
        })
        .collect();
    let ratios = [gaps[0] / gaps[1], gaps[1] / gaps[2]];
    (
        in_band(&ratios),
        format!("discrepancies [{}], ratios [{}] (each in [3, 5])", fmt_list(&gaps), fmt_list(&ratios)),
    )
}

/// Standardised deviations `|estimate - prior| / MCSE` of the mean and second
/// moment of every coefficient.
fn moment_deviations(series: &[Vec<f64>], sd: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(2 * sd.len());
    for (i, &s) in sd.iter().enumerate() {
        let x: Vec<f64> = series.iter().map(|r| r[i]).collect();
        let m = Marginal::of(&x);
        z.push(m.mean.abs() / m.mcse());
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let m2 = Marginal::of(&sq);
        z.push((m2.mean - s * s).abs() / m2.mcse());
    }
    z
}

fn prior_invariance() -> Outcome {
    let t = Instant::now();
    let priors = PriorPair::default();
    let k = priors.momentum.modes_for(100);
    let target = NullPotential { n_obs: 0 };
    let sampler = SamplerConfig {
        n_iters: 110_000,
        burn_in: 10_000,
        thinning: 10,
        infer_sigma2: false,
        ..Default::default()
    };
    let init = ChainState::new(SpectralField::zeros(k), SpectralField::zeros(k), 1.0, false, &target).unwrap();
    let (records, stats) = run_chain(init, &sampler, &priors, &target, &mut stream_rng(SEED, 5)).unwrap();
    let p0: Vec<Vec<f64>> = records.iter().map(|r| r.p0.clone()).collect();
    let nu: Vec<Vec<f64>> = records.iter().map(|r| r.nu.clone()).collect();
    let mut z = moment_deviations(&p0, &coefficient_std(&priors.momentum, k));
    z.extend(moment_deviations(&nu, &coefficient_std(&priors.reparam, k)));
    let worst = z.iter().cloned().fold(0.0, f64::max);
    let over = |t: f64| z.iter().filter(|&&v| v > t).count();
    // two-sided normal tail masses at 2 and 3
    let (p2, p3) = (0.0455, 0.0027);
    let elapsed = t.elapsed();
    let exact = stats.accepted == stats.proposals && stats.acceptance_rate == 1.0;
    (
        worst <= 3.0 && exact && elapsed < Duration::from_secs(300),
        format!(
            "{} coefficients x 2 fields, worst |deviation|/MCSE {worst:.2} (<= 3); {} of {} checks beyond 3 MCSE (expected {:.1} by chance), {} beyond 2 (expected {:.1}); acceptance {} ({}/{}), runtime {:.1}s (< 300s)",
            2 * k + 1,
            over(3.0),
            z.len(),
            p3 * z.len() as f64,
            over(2.0),
            p2 * z.len() as f64,
            stats.acceptance_rate,
            stats.accepted,
            stats.proposals,
            elapsed.as_secs_f64()
        ),
    )
}

fn padded(f: &SpectralField, k: usize) -> SpectralField {
    let mut out = SpectralField::zeros(k);
    out.cos[..f.cos.len()].copy_from_slice(&f.cos);
    out.sin[..f.sin.len()].copy_from_slice(&f.sin);
    out
}

fn refinement_acceptance() -> Outcome {
    let data = consistency_data(100);
    let (priors, cfg, opt) = (PriorPair::default(), ShootConfig::default(), OptimizerConfig::default());
    let target = |n_p: usize| {
        CurvePotential::new(template_circle(n_p).unwrap(), cfg, data.obs.clone(), n_p / 2).unwrap()
    };
    let coarse = target(100);
    let map = bfgs_minimize(&SpectralField::zeros(50), &SpectralField::zeros(50), &coarse, &priors, &opt).unwrap();
    let start = |t: &CurvePotential, k: usize| {
        ChainState::new(padded(&map.p0, k), padded(&map.nu, k), 1e-4, false, t).unwrap()
    };
    // step size tuned once on the coarse model, then frozen
    let tune = SamplerConfig {
        n_iters: 2000,
        burn_in: 2000,
        infer_sigma2: false,
        ..Default::default()
    };
    let (_, tuned) = run_chain(start(&coarse, 50), &tune, &priors, &coarse, &mut stream_rng(SEED, 6)).unwrap();
    let fixed = SamplerConfig {
        beta: tuned.beta,
        n_iters: 4000,
        burn_in: 500,
        adapt_beta: false,
        ..tune
    };
    let fine = target(200);
    let (_, a) = run_chain(start(&coarse, 50), &fixed, &priors, &coarse, &mut stream_rng(SEED, 7)).unwrap();
    let (_, b) = run_chain(start(&fine, 100), &fixed, &priors, &fine, &mut stream_rng(SEED, 8)).unwrap();
    let rel = (a.acceptance_rate - b.acceptance_rate).abs() / a.acceptance_rate;
    (
        rel < 0.2,
        format!(
            "beta {:.3e}, acceptance n_p=100 {:.3} vs n_p=200 {:.3}, relative difference {rel:.3} (< 0.2)",
            tuned.beta, a.acceptance_rate, b.acceptance_rate
        ),
    )
}

fn consistency_ladder() -> Outcome {
    let t = Instant::now();
    let (priors, shoot, opt) = (PriorPair::default(), ShootConfig::default(), OptimizerConfig::default());
    let sampler = SamplerConfig {
        n_iters: 50_000,
        burn_in: 10_000,
        thinning: 10,
        infer_sigma2: true,
        ..Default::default()
    };
    let spec = ScenarioSpec::new(ScenarioKind::Consistency);
    let out = run_scenario(&spec, &settings(&priors, &shoot, &sampler, &opt)).unwrap();
    let mut stds = Vec::new();
    let mut quartiles = [f64::NAN; 3];
    for (label, case) in &out.cases {
        let Ok(case) = case else {
            return (false, format!("sub-case {label} failed"));
        };
        let s = &case.summary.nu.point_std;
        stds.push(s.iter().sum::<f64>() / s.len() as f64);
        quartiles = case.summary.sigma2_quartiles;
    }
    let mut violations = 0;
    let mut within_slack = true;
    for w in stds.windows(2) {
        if w[1] > w[0] {
            violations += 1;
            within_slack &= w[1] <= 1.1 * w[0];
        }
    }
    let monotone = violations == 0 || (violations == 1 && within_slack);
    let covers = quartiles[0] <= 1e-4 && 1e-4 <= quartiles[2];
    let elapsed = t.elapsed();
    (
        monotone && covers && elapsed < Duration::from_secs(3600),
        format!(
            "mean pointwise nu std over N=10,25,50,100 [{}] ({violations} increase(s)), sigma2 IQR at N=100 [{:.3e}, {:.3e}] (must contain 1e-4), runtime {:.0}s (< 3600s)",
            fmt_list(&stds),
            quartiles[0],
            quartiles[2],
            elapsed.as_secs_f64()
        ),
    )
}

/// Draws spaced by the integrated autocorrelation time.
fn thin_to_ess(x: &[f64]) -> Vec<f64> {
    let ess = effective_sample_size(x).max(1.0);
    let stride = ((x.len() as f64 / ess).ceil() as usize).max(1);
    x.iter().step_by(stride).copied().collect()
}

fn multimodality() -> Outcome {
    let (priors, shoot, opt) = (PriorPair::default(), ShootConfig::default(), OptimizerConfig::default());
    let sampler = SamplerConfig {
        n_iters: 20_000,
        burn_in: 5_000,
        thinning: 10,
        ..Default::default()
    };
    let spec = ScenarioSpec {
        multimodality: curvematch::scenarios::MultimodalityParams {
            radii: vec![1.0, 0.5, 0.25],
            n_obs: 100,
            ..Default::default()
        },
        ..ScenarioSpec::new(ScenarioKind::Multimodality)
    };
    let out = run_scenario(&spec, &settings(&priors, &shoot, &sampler, &opt)).unwrap();
    let case = |i: usize| out.cases[i].1.as_ref().map_err(|e| format!("{}: {e}", out.cases[i].0));
    let r1 = match case(0) {
        Ok(c) => c,
        Err(e) => return (false, e),
    };
    let lowest: Vec<f64> = r1.records.iter().map(|r| r.p0[0]).collect();
    let thinned = thin_to_ess(&lowest);
    let dip = dip_test(&thinned, 2000, SEED);
    let quarter = match case(2) {
        Ok(c) => c,
        Err(e) => return (false, e),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("histograms_r0.25.csv");
    let emitted = write_histogram_table(std::fs::File::create(&path).unwrap(), &quarter.summary).is_ok()
        && std::fs::read_to_string(&path).map_or(0, |t| t.lines().count()) > 1;
    (
        dip.unimodal_at(0.05) && emitted,
        format!(
            "r=1 lowest p0 mode: dip {:.4}, p-value {:.3} on {} ESS-spaced draws (> 0.05); r=0.25 completed with {} records, histograms emitted: {emitted}; r=0.25 lowest-mode dip p-value {:.3} (reported)",
            dip.dip,
            dip.p_value,
            thinned.len(),
            quarter.records.len(),
            dip_test(&thin_to_ess(&quarter.records.iter().map(|r| r.p0[0]).collect::<Vec<_>>()), 2000, SEED).p_value
        ),
    )
}

fn partial_observations() -> Outcome {
    let (priors, shoot, opt) = (PriorPair::default(), ShootConfig::default(), OptimizerConfig::default());
    let sampler = SamplerConfig {
        n_iters: 20_000,
        burn_in: 5_000,
        thinning: 10,
        infer_sigma2: true,
        ..Default::default()
    };
    let spec = ScenarioSpec::new(ScenarioKind::Partial);
    let out = run_scenario(&spec, &settings(&priors, &shoot, &sampler, &opt)).unwrap();
    let case = match &out.cases[0].1 {
        Ok(c) => c,
        Err(e) => return (false, e.clone()),
    };
    let inside = case.records.iter().filter(|r| r.sigma2 > 1e-8 && r.sigma2 < 1e-2).count();
    let mass = inside as f64 / case.records.len() as f64;
    let spread = pointwise_spread(&case.records, &case.data, spec.model_resolution, &shoot, 200);
    let variances = spec.partial.variances();
    let (mut noisy, mut clean) = ((0.0, 0), (0.0, 0));
    for (s, v) in spread.iter().zip(&variances) {
        let acc = if *v > spec.partial.sigma_d.powi(2) { &mut noisy } else { &mut clean };
        acc.0 += s;
        acc.1 += 1;
    }
    let ratio = (noisy.0 / noisy.1 as f64) / (clean.0 / clean.1 as f64);
    (
        mass >= 0.95 && ratio >= 2.0,
        format!(
            "sigma2 mass in (1e-8, 1e-2) {mass:.3} (>= 0.95), sigma2 median {:.3e}, spread ratio noisy/clean {ratio:.2} (>= 2)",
            case.summary.sigma2_quartiles[1]
        ),
    )
}

/// Per-observation std of the sampled curve points, `sqrt(var_x + var_y)`.
fn pointwise_spread(
    records: &[ChainRecord],
    data: &SyntheticData,
    n_p: usize,
    cfg: &ShootConfig,
    count: usize,
) -> Vec<f64> {
    let model = ForwardModel::new(template_circle(n_p).unwrap(), *cfg).unwrap();
    let stride = (records.len() / count).max(1);
    let s = data.obs.parameters();
    let curves: Vec<Vec<Point>> = records
        .iter()
        .step_by(stride)
        .map(|r| {
            let p = SpectralField::from_flat(&r.p0).unwrap().to_samples(n_p);
            let v = SpectralField::from_flat(&r.nu).unwrap().to_samples(n_p);
            model.observe(&p, &v, s).unwrap()
        })
        .collect();
    let m = curves.len() as f64;
    (0..s.len())
        .map(|i| {
            let (mx, my) = curves.iter().fold((0.0, 0.0), |a, c| (a.0 + c[i][0] / m, a.1 + c[i][1] / m));
            let var = curves.iter().map(|c| (c[i][0] - mx).powi(2) + (c[i][1] - my).powi(2)).sum::<f64>() / (m - 1.0);
            var.sqrt()
        })
        .collect()
}

fn map_machinery() -> Outcome {
    let mut rng = stream_rng(SEED, 10);
    let dim = 30;
    // SPD A = M^T M / dim + I
    let m = normal_vec(&mut rng, dim * dim);
    let mut a = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            a[i * dim + j] = (0..dim).map(|k| m[k * dim + i] * m[k * dim + j]).sum::<f64>() / dim as f64;
        }
        a[i * dim + i] += 1.0;
    }
    let b = normal_vec(&mut rng, dim);
    let quad = |x: &[f64]| {
        let ax: Vec<f64> = (0..dim).map(|i| dot(&a[i * dim..(i + 1) * dim], x)).collect();
        let g: Vec<f64> = ax.iter().zip(&b).map(|(ax, b)| ax - b).collect();
        Some((0.5 * dot(x, &ax) - dot(&b, x), g))
    };
    let opt = OptimizerConfig {
        grad_tol: 1e-8,
        ..Default::default()
    };
    let q = bfgs(quad, &vec![0.0; dim], &opt).unwrap();
    let quad_ok = q.grad_norm < 1e-8 && q.iterations <= dim + 5 && q.termination == Termination::GradientTolerance;

    let data = consistency_data(100);
    let priors = PriorPair::default();
    let target = CurvePotential::new(template_circle(100).unwrap(), ShootConfig::default(), data.obs, 50).unwrap();
    let map = bfgs_minimize(&SpectralField::zeros(50), &SpectralField::zeros(50), &target, &priors, &OptimizerConfig::default())
        .unwrap();
    let margin = map.initial_value - map.value;
    (
        quad_ok && margin > 100.0,
        format!(
            "quadratic dim {dim}: |g| {:.2e} after {} iterations (< 1e-8 within {}); MAP margin {margin:.2} over zero state (> 100) after {} iterations",
            q.grad_norm,
            q.iterations,
            dim + 5,
            map.iterations
        ),
    )
}
