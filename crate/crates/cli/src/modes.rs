//! Mode implementations: each consumes the validated config, writes its
//! artifacts, and returns a verification report (empty for pure runners).

use std::path::Path;

use rayon::prelude::*;

use amp_evolve_core::amp::{run_cs, AmpProblem, RunOptions, ThresholdPolicy};
use amp_evolve_core::denoisers::DenoiserSpec;
use amp_evolve_core::distributions::quadrature::gauss_hermite;
use amp_evolve_core::ensembles::{generate, validate as validate_ensemble, EnsembleSpec};
use amp_evolve_core::error::Error as CoreError;
use amp_evolve_core::rng::key2;
use amp_evolve_core::state_evolution::{cs_se_coupled, se_run, SeParams, SeTrajectory};
use amp_evolve_core::stats;
use amp_evolve_core::verification::{
    bilinear_gaussianity, check_inner_identities, conditional_resample, gaussianity_report,
    harvest_constraints, lindeberg_empirical, moment_decay_check, projection_decay,
    stein_identity_check, CheckRecord, VerificationReport,
};
use amp_evolve_core::ScalarDistribution;

use crate::artifacts::{write_atomic, write_json_atomic, Manifest};
use crate::config::{standard_ensembles, ExperimentConfig, Mode, NamedEnsemble};

// domain-separation tags for per-replication substreams
const TAG_SIGNAL: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_MATRIX: u64 = 3;

struct Replication {
    problem: AmpProblem,
}

fn make_replication(
    spec: &EnsembleSpec,
    signal: &ScalarDistribution,
    noise: &ScalarDistribution,
    n: usize,
    big_n: usize,
    rep_seed: u64,
) -> Result<Replication, CoreError> {
    let a = generate(spec, n, big_n, key2(rep_seed, TAG_MATRIX))?;
    let x0 = signal.sample(big_n, key2(rep_seed, TAG_SIGNAL))?;
    let w = noise.sample(n, key2(rep_seed, TAG_NOISE))?;
    Ok(Replication {
        problem: AmpProblem::new(a, x0, w)?,
    })
}

fn se_params_for(
    cfg: &ExperimentConfig,
    rho: f64,
    sigma0_sq: f64,
) -> Result<SeParams, CoreError> {
    let quad = gauss_hermite(cfg.quadrature_order)?;
    let f = cfg
        .f
        .clone()
        .unwrap_or(DenoiserSpec::ConstantSignal)
        .build()?;
    let g = cfg.g.clone().unwrap_or(DenoiserSpec::Residual).build()?;
    Ok(SeParams {
        rho,
        dist_x0: cfg.signal.clone().expect("validated"),
        dist_w: cfg.noise.clone().expect("validated"),
        f,
        g,
        sigma0_sq,
        quad,
        mc_budget: cfg.mc_budget,
        mc_seed: cfg.seed,
    })
}

/// Trajectory of one CS replication against its per-seed SE prediction.
struct SeComparison {
    mse_over_rho: Vec<f64>,
    se_sigma_sq: Vec<f64>,
    max_rel_dev: f64,
    h1_ks: f64,
    inner_pass: usize,
    inner_total: usize,
}

fn run_cs_replication(
    cfg: &ExperimentConfig,
    rep: &Replication,
    iterations: usize,
) -> Result<SeComparison, CoreError> {
    let rho = rep.problem.rho();
    let n = rep.problem.n();
    let opts = RunOptions {
        retain_vectors: true,
        ..Default::default()
    };
    // per-seed SE from the realized <q0,q0>/rho; SE-coupled thresholds
    let q0 = amp_evolve_core::amp::cs_q0(&rep.problem.x0, cfg.theta_init);
    let sigma0_sq = stats::inner(&q0, &q0)? / rho;
    let quad = gauss_hermite(cfg.quadrature_order)?;
    let (se, thetas) = cs_se_coupled(
        rho,
        cfg.signal.as_ref().expect("validated"),
        cfg.noise.as_ref().expect("validated"),
        sigma0_sq,
        cfg.kappa,
        cfg.theta_init,
        iterations,
        &quad,
        cfg.mc_budget,
        cfg.seed,
    )?;
    let (traj, _) = run_cs(
        &rep.problem,
        &ThresholdPolicy::Schedule(thetas),
        cfg.theta_init,
        iterations,
        &opts,
    )?;

    let mse_over_rho: Vec<f64> = traj.records.iter().map(|r| r.qq / rho).collect();
    let max_rel_dev = mse_over_rho
        .iter()
        .enumerate()
        .map(|(t, &m)| (m - se.sigma_sq[t]).abs() / se.sigma_sq[t].max(1e-6))
        .fold(0.0f64, f64::max);

    // h^1 gaussianity against tau_0
    let vecs = traj.vectors.as_ref().expect("retained");
    let h1 = &vecs.h[0];
    let g_rep = gaussianity_report(h1, se.tau_sq[0], cfg.tolerances.ks_h1)?;
    let h1_ks = g_rep.checks[0].statistic;

    let inner = check_inner_identities(&traj, n, cfg.tolerances.inner_c)?;
    let inner_pass = inner.checks.iter().filter(|c| c.pass).count();
    let inner_total = inner.checks.len();

    Ok(SeComparison {
        mse_over_rho,
        se_sigma_sq: se.sigma_sq[..iterations].to_vec(),
        max_rel_dev,
        h1_ks,
        inner_pass,
        inner_total,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = values.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

pub fn run_mode(
    cfg: &ExperimentConfig,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<VerificationReport, CoreError> {
    match cfg.mode {
        Mode::ValidateEnsemble => validate_ensemble_mode(cfg, out, manifest),
        Mode::SePredict => se_predict(cfg, out, manifest),
        Mode::RunAmp => run_amp(cfg, out, manifest),
        Mode::VerifyTheorem1 => verify_theorem1(cfg, out, manifest),
        Mode::VerifyPropositions => verify_propositions(cfg, out, manifest),
        Mode::UniversalitySweep => universality_sweep(cfg, out, manifest),
    }
}

fn validate_ensemble_mode(
    cfg: &ExperimentConfig,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<VerificationReport, CoreError> {
    let spec = cfg.ensemble.as_ref().expect("validated");
    let validation = validate_ensemble(spec);
    let path = write_json_atomic(out, "ensemble_validation.json", &validation)?;
    manifest.record(&path);
    let mut report = VerificationReport::new();
    report.push(
        CheckRecord::new(
            "ensemble.validates",
            if validation.pass { 0.0 } else { 1.0 },
            0.5,
        )
        .with_pass(validation.pass),
    );
    Ok(report)
}

fn se_predict(
    cfg: &ExperimentConfig,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<VerificationReport, CoreError> {
    let (n, big_n) = cfg.size.unwrap().resolve().expect("validated");
    let rho = n as f64 / big_n as f64;
    let signal = cfg.signal.as_ref().expect("validated");
    let noise = cfg.noise.as_ref().expect("validated");
    let analytic_sigma0 = signal.raw_moment(2)? / rho;
    let sigma0_sq = cfg.sigma0_sq.unwrap_or(analytic_sigma0);

    let se: SeTrajectory = if cfg.f.is_none() && cfg.g.is_none() {
        // CS adapter with SE-coupled thresholds
        let quad = gauss_hermite(cfg.quadrature_order)?;
        let (se, thetas) = cs_se_coupled(
            rho,
            signal,
            noise,
            sigma0_sq,
            cfg.kappa,
            cfg.theta_init,
            cfg.iterations,
            &quad,
            cfg.mc_budget,
            cfg.seed,
        )?;
        let path = write_json_atomic(out, "thresholds.json", &thetas)?;
        manifest.record(&path);
        se
    } else {
        let params = se_params_for(cfg, rho, sigma0_sq)?;
        se_run(&params, cfg.iterations)?
    };

    let mut csv = Vec::new();
    se.write_csv(&mut csv)?;
    let path = write_atomic(out, "se_trajectory.csv", &csv)?;
    manifest.record(&path);
    Ok(VerificationReport::new())
}

fn run_amp(
    cfg: &ExperimentConfig,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<VerificationReport, CoreError> {
    let (n, big_n) = cfg.size.unwrap().resolve().expect("validated");
    let spec = cfg.ensemble.as_ref().expect("validated");
    let signal = cfg.signal.as_ref().expect("validated");
    let noise = cfg.noise.as_ref().expect("validated");

    let reps: Vec<u64> = (0..cfg.replications)
        .map(|r| key2(cfg.seed, r as u64))
        .collect();
    let results: Vec<Result<(u64, Vec<u8>, serde_json::Value), CoreError>> = reps
        .par_iter()
        .map(|&rep_seed| {
            let rep = make_replication(spec, signal, noise, n, big_n, rep_seed)?;
            let opts = RunOptions {
                retain_vectors: !cfg.retain.is_empty(),
                ..Default::default()
            };
            let traj = if let (Some(f), Some(g)) = (&cfg.f, &cfg.g) {
                let q0 = amp_evolve_core::amp::cs_q0(&rep.problem.x0, cfg.theta_init);
                amp_evolve_core::amp::run(
                    &rep.problem,
                    q0,
                    f.build()?.as_ref(),
                    g.build()?.as_ref(),
                    cfg.iterations,
                    &opts,
                )?
            } else {
                run_cs(
                    &rep.problem,
                    &ThresholdPolicy::EmpiricalCoupled { kappa: cfg.kappa },
                    cfg.theta_init,
                    cfg.iterations,
                    &opts,
                )?
                .0
            };
            let mut csv = Vec::new();
            traj.write_csv(&mut csv)?;
            Ok((rep_seed, csv, traj.gram_json()))
        })
        .collect();

    let mut report = VerificationReport::new();
    for (idx, res) in results.into_iter().enumerate() {
        let (rep_seed, csv, gram) = res?;
        let p1 = write_atomic(out, &format!("trajectory_rep{idx}.csv"), &csv)?;
        manifest.record(&p1);
        let p2 = write_json_atomic(out, &format!("gram_rep{idx}.json"), &gram)?;
        manifest.record(&p2);
        report.push(
            CheckRecord::new(format!("run.rep{idx}"), 0.0, 1.0)
                .with_pass(true)
                .with_seed(rep_seed),
        );
    }
    Ok(report)
}

fn verify_theorem1(
    cfg: &ExperimentConfig,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<VerificationReport, CoreError> {
    let (n, big_n) = cfg.size.unwrap().resolve().expect("validated");
    let spec = cfg.ensemble.as_ref().expect("validated");
    let signal = cfg.signal.as_ref().expect("validated");
    let noise = cfg.noise.as_ref().expect("validated");

    let comparisons: Vec<Result<SeComparison, CoreError>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let rep = make_replication(spec, signal, noise, n, big_n, key2(cfg.seed, r as u64))?;
            run_cs_replication(cfg, &rep, cfg.iterations)
        })
        .collect();
    let comparisons: Vec<SeComparison> = comparisons.into_iter().collect::<Result<_, _>>()?;

    let mut devs: Vec<f64> = comparisons.iter().map(|c| c.max_rel_dev).collect();
    let dev_median = median(&mut devs);
    let inner_pass: usize = comparisons.iter().map(|c| c.inner_pass).sum();
    let inner_total: usize = comparisons.iter().map(|c| c.inner_total).sum();
    let ks_ok = comparisons
        .iter()
        .filter(|c| c.h1_ks <= cfg.tolerances.ks_h1)
        .count();

    let mut report = VerificationReport::new();
    report.push(
        CheckRecord::new("theorem1.se_dev_median", dev_median, cfg.tolerances.se_rel)
            .with_sizes(Some(n), Some(big_n))
            .with_reps(cfg.replications)
            .with_seed(cfg.seed)
            .with_note("median over seeds of max_t |<q,q>/rho - sigma^2|/max(sigma^2, 1e-6)"),
    );
    let inner_rate = inner_pass as f64 / inner_total.max(1) as f64;
    report.push(
        CheckRecord::new("theorem1.inner_identity_fail_rate", 1.0 - inner_rate, 0.05)
            .with_reps(inner_total)
            .with_note(format!("pooled pass {inner_pass}/{inner_total} at C = {}", cfg.tolerances.inner_c)),
    );
    report.push(
        CheckRecord::new(
            "theorem1.h1_ks_fail_rate",
            1.0 - ks_ok as f64 / cfg.replications as f64,
            0.1 + 1e-12,
        )
        .with_reps(cfg.replications)
        .with_note(format!("KS <= {} in {ks_ok}/{} seeds", cfg.tolerances.ks_h1, cfg.replications)),
    );

    // deviation table: per-t median of empirical and SE values
    let t_len = cfg.iterations;
    let mut csv = String::from("# amp-evolve schema v1\nt,median_mse_over_rho,median_se_sigma_sq,median_rel_dev\n");
    for t in 0..t_len {
        let mut emp: Vec<f64> = comparisons.iter().map(|c| c.mse_over_rho[t]).collect();
        let mut se: Vec<f64> = comparisons.iter().map(|c| c.se_sigma_sq[t]).collect();
        let mut dev: Vec<f64> = comparisons
            .iter()
            .map(|c| (c.mse_over_rho[t] - c.se_sigma_sq[t]).abs() / c.se_sigma_sq[t].max(1e-6))
            .collect();
        csv.push_str(&format!(
            "{t},{:.10e},{:.10e},{:.10e}\n",
            median(&mut emp),
            median(&mut se),
            median(&mut dev)
        ));
    }
    let p = write_atomic(out, "se_deviation.csv", csv.as_bytes())?;
    manifest.record(&p);

    Ok(report)
}

fn verify_propositions(
    cfg: &ExperimentConfig,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<VerificationReport, CoreError> {
    let (n, big_n) = cfg.size.unwrap().resolve().expect("validated");
    let spec = cfg.ensemble.as_ref().expect("validated");
    let signal = cfg.signal.as_ref().expect("validated");
    let noise = cfg.noise.as_ref().expect("validated");
    let mut report = VerificationReport::new();

    // projection decay (isotropic vectors onto random subspaces)
    report.merge(projection_decay(1.0, 3, &[100, 400, 1600], 50, key2(cfg.seed, 10))?);

    // entry-moment decay for every law the ensemble references
    for (label, dist) in spec.rule.referenced() {
        for alpha in [1.5, 2.0] {
            let mut rep = moment_decay_check(dist, alpha, &[10, 100, 1000])?;
            for c in rep.checks.iter_mut() {
                c.name = format!("{label}.{}", c.name);
            }
            report.merge(rep);
        }
    }

    // empirical law of A v (Lindeberg / Prop-6 surrogate)
    let v = {
        let std_signal = signal.standardize()?;
        std_signal.sample(big_n, key2(cfg.seed, 11))?
    };
    report.merge(lindeberg_empirical(spec, &v, n, 20, key2(cfg.seed, 12), 0.03)?);

    // bilinear gaussianity with diffuse unit vectors
    let unit = |mut v: Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    };
    let u = unit(ScalarDistribution::Gaussian { mean: 0.0, var: 1.0 }.sample(big_n, key2(cfg.seed, 13))?);
    let vv = unit(ScalarDistribution::Gaussian { mean: 0.0, var: 1.0 }.sample(n, key2(cfg.seed, 14))?);
    report.merge(bilinear_gaussianity(
        spec,
        &u,
        &vv,
        cfg.replications.max(200),
        key2(cfg.seed, 15),
        cfg.tolerances.ks_bilinear,
        cfg.tolerances.bilinear_var.0,
        cfg.tolerances.bilinear_var.1,
    )?);

    // conditional resampling from a short recorded run
    let rep0 = make_replication(spec, signal, noise, n, big_n, key2(cfg.seed, 16))?;
    let opts = RunOptions {
        retain_vectors: true,
        ..Default::default()
    };
    let (traj, _) = run_cs(
        &rep0.problem,
        &ThresholdPolicy::EmpiricalCoupled { kappa: cfg.kappa },
        cfg.theta_init,
        3.min(cfg.iterations).max(1),
        &opts,
    )?;
    let constraints = harvest_constraints(&traj, traj.records.len())?;
    let mut worst = 0.0f64;
    let resamples = 50;
    for k in 0..resamples {
        let a_cond = conditional_resample(&constraints, spec, key2(cfg.seed, 1000 + k))?;
        let (rq, rm) = constraints.residuals(&a_cond);
        worst = worst.max(rq).max(rm);
    }
    report.push(
        CheckRecord::new("prop4.resample_residual_worst", worst, cfg.tolerances.resample_residual)
            .with_reps(resamples as usize)
            .with_sizes(Some(n), Some(big_n)),
    );

    // Stein's lemma numerical sanity
    report.merge(stein_identity_check(
        &|z: f64| z.tanh(),
        &|z: f64| 1.0 - z.tanh() * z.tanh(),
        0.3,
        1_000_000,
        key2(cfg.seed, 17),
    )?);

    let p = write_json_atomic(out, "propositions_report.json", &report)?;
    manifest.record(&p);
    Ok(report)
}

fn universality_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<VerificationReport, CoreError> {
    let (n, big_n) = cfg.size.unwrap().resolve().expect("validated");
    let signal = cfg.signal.as_ref().expect("validated");
    let noise = cfg.noise.as_ref().expect("validated");
    let alpha = cfg.ensemble.as_ref().map(|e| e.alpha).unwrap_or(2.0);
    let ensembles: Vec<NamedEnsemble> = if cfg.ensembles.is_empty() {
        standard_ensembles(alpha)
    } else {
        cfg.ensembles.clone()
    };

    // per (seed, ensemble) trajectories; x0, w, and the matrix key are
    // shared per seed across ensembles (common random numbers)
    type SweepRow = Vec<SeComparison>;
    let rows: Vec<Result<SweepRow, CoreError>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let rep_seed = key2(cfg.seed, r as u64);
            let mut row = Vec::with_capacity(ensembles.len());
            for ne in &ensembles {
                let rep = make_replication(&ne.spec, signal, noise, n, big_n, rep_seed)?;
                row.push(run_cs_replication(cfg, &rep, cfg.iterations)?);
            }
            Ok(row)
        })
        .collect();
    let rows: Vec<SweepRow> = rows.into_iter().collect::<Result<_, _>>()?;

    let mut report = VerificationReport::new();

    // per-ensemble SE-deviation tables + A2-style statistic
    for (e_idx, ne) in ensembles.iter().enumerate() {
        let mut devs: Vec<f64> = rows.iter().map(|row| row[e_idx].max_rel_dev).collect();
        let dev_median = median(&mut devs);
        report.push(
            CheckRecord::new(format!("sweep.{}.se_dev_median", ne.name), dev_median, cfg.tolerances.se_rel)
                .with_reps(cfg.replications)
                .with_sizes(Some(n), Some(big_n)),
        );
        let mut csv = String::from("# amp-evolve schema v1\nt,median_mse_over_rho,median_se_sigma_sq,median_rel_dev\n");
        for t in 0..cfg.iterations {
            let mut emp: Vec<f64> = rows.iter().map(|row| row[e_idx].mse_over_rho[t]).collect();
            let mut se: Vec<f64> = rows.iter().map(|row| row[e_idx].se_sigma_sq[t]).collect();
            let mut dev: Vec<f64> = rows
                .iter()
                .map(|row| {
                    (row[e_idx].mse_over_rho[t] - row[e_idx].se_sigma_sq[t]).abs()
                        / row[e_idx].se_sigma_sq[t].max(1e-6)
                })
                .collect();
            csv.push_str(&format!(
                "{t},{:.10e},{:.10e},{:.10e}\n",
                median(&mut emp),
                median(&mut se),
                median(&mut dev)
            ));
        }
        let p = write_atomic(out, &format!("se_deviation_{}.csv", ne.name), csv.as_bytes())?;
        manifest.record(&p);
    }

    // across-ensemble spread per t (median over seeds), tolerance
    // spread_rel * max(sigma_t^2, 1e-3)
    let mut spread_csv = String::from("# amp-evolve schema v1\nt,median_spread,allowance\n");
    let mut spread_ok = true;
    let mut worst_ratio = 0.0f64;
    for t in 0..cfg.iterations {
        let mut spreads: Vec<f64> = rows
            .iter()
            .map(|row| {
                let vals: Vec<f64> = row.iter().map(|c| c.mse_over_rho[t]).collect();
                let max = vals.iter().cloned().fold(f64::MIN, f64::max);
                let min = vals.iter().cloned().fold(f64::MAX, f64::min);
                max - min
            })
            .collect();
        let med_spread = median(&mut spreads);
        // allowance uses the per-seed SE of the first ensemble (shared x0 law)
        let mut ses: Vec<f64> = rows.iter().map(|row| row[0].se_sigma_sq[t]).collect();
        let allowance = cfg.tolerances.spread_rel * median(&mut ses).max(1e-3);
        spread_ok &= med_spread <= allowance;
        worst_ratio = worst_ratio.max(med_spread / allowance);
        spread_csv.push_str(&format!("{t},{med_spread:.10e},{allowance:.10e}\n"));
    }
    report.push(
        CheckRecord::new("sweep.spread_worst_ratio", worst_ratio, 1.0)
            .with_pass(spread_ok)
            .with_reps(cfg.replications)
            .with_note("median over seeds of across-ensemble max-min per t, vs spread_rel * max(sigma_t^2, 1e-3)"),
    );
    let p = write_atomic(out, "spread.csv", spread_csv.as_bytes())?;
    manifest.record(&p);

    // pairwise MSE differences (median over seeds of max_t |diff|)
    let mut pair_csv = String::from("# amp-evolve schema v1\nensemble_a,ensemble_b,median_max_abs_diff\n");
    for a in 0..ensembles.len() {
        for b in (a + 1)..ensembles.len() {
            let mut diffs: Vec<f64> = rows
                .iter()
                .map(|row| {
                    (0..cfg.iterations)
                        .map(|t| (row[a].mse_over_rho[t] - row[b].mse_over_rho[t]).abs())
                        .fold(0.0f64, f64::max)
                })
                .collect();
            pair_csv.push_str(&format!(
                "{},{},{:.10e}\n",
                ensembles[a].name,
                ensembles[b].name,
                median(&mut diffs)
            ));
        }
    }
    let p = write_atomic(out, "pairwise_mse_diff.csv", pair_csv.as_bytes())?;
    manifest.record(&p);

    Ok(report)
}
