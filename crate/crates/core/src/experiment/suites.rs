use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, NoiseKind, SamplingMode};
use super::data::Dataset;
use super::output::{write_json, write_run};
use super::tracker::{build_dataset, track_on, TrackedRun};
use super::ExperimentError;
use crate::dynamics::batch_size_variance_law;
use crate::mlp::{MlpSpec, MlpState};
use crate::spectral::op_norm;
use crate::tensor::{gaussian_matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    InitLaw,
    NearConvergence,
    GradNoise,
    LabelNoise,
    BatchSize,
    SamplingTrajectory,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 6] = [
        SuiteKind::InitLaw,
        SuiteKind::NearConvergence,
        SuiteKind::GradNoise,
        SuiteKind::LabelNoise,
        SuiteKind::BatchSize,
        SuiteKind::SamplingTrajectory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SuiteKind::InitLaw => "init_law",
            SuiteKind::NearConvergence => "near_convergence",
            SuiteKind::GradNoise => "grad_noise",
            SuiteKind::LabelNoise => "label_noise",
            SuiteKind::BatchSize => "batch_size",
            SuiteKind::SamplingTrajectory => "sampling_trajectory",
        }
    }

    /// Reference settings of each suite, applied on top of the defaults.
    pub fn default_config(self) -> ExperimentConfig {
        let small = ExperimentConfig {
            hidden: vec![64, 32],
            ..ExperimentConfig::default()
        };
        match self {
            SuiteKind::InitLaw => ExperimentConfig {
                n_features: 784,
                n_classes: 10,
                ..ExperimentConfig::default()
            },
            SuiteKind::NearConvergence => ExperimentConfig {
                n_samples: 512,
                spread: 0.1,
                eta: 0.05,
                batch_size: 64,
                steps: 20_000,
                stop_loss: 1e-3,
                record_stride: 10,
                ..small
            },
            SuiteKind::GradNoise => ExperimentConfig {
                steps: 1000,
                noise_mode: NoiseKind::Uniform,
                noise_scale: 0.5,
                ..small
            },
            SuiteKind::LabelNoise => ExperimentConfig {
                steps: 1000,
                ..small
            },
            SuiteKind::BatchSize => ExperimentConfig {
                steps: 500,
                sampling: SamplingMode::Iid,
                seed_grid: (1..=8).collect(),
                ..small
            },
            SuiteKind::SamplingTrajectory => ExperimentConfig {
                batch_size: 256,
                steps: 1000,
                seed_grid: (1..=5).collect(),
                ..small
            },
        }
    }
}

impl fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SuiteKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = SuiteKind::ALL.iter().map(|k| k.name()).collect();
                ExperimentError::Config(format!(
                    "unknown suite '{s}', expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Decision statistic and supporting numbers of one suite.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteSummary {
    pub suite: SuiteKind,
    pub statistic: String,
    pub value: f64,
    pub criterion: String,
    pub passed: bool,
    pub details: Value,
}

/// Runs one suite's grid. With `out_dir`, per-run files go to
/// `out_dir/<suite>/<run>/` and the summary to `out_dir/<suite>/summary.json`.
pub fn run_implication_suite(
    which: SuiteKind,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<SuiteSummary, ExperimentError> {
    cfg.validate()?;
    let suite_dir = out_dir.map(|d| d.join(which.name()));
    let mut runner = Runner {
        dir: suite_dir.as_deref(),
    };
    let summary = match which {
        SuiteKind::InitLaw => init_law(cfg)?,
        SuiteKind::NearConvergence => near_convergence(cfg, &mut runner)?,
        SuiteKind::GradNoise => monotone_grid(which, cfg, &mut runner)?,
        SuiteKind::LabelNoise => monotone_grid(which, cfg, &mut runner)?,
        SuiteKind::BatchSize => batch_size(cfg, &mut runner)?,
        SuiteKind::SamplingTrajectory => sampling_trajectory(cfg, &mut runner)?,
    };
    if let Some(dir) = &suite_dir {
        write_json(
            &dir.join("summary.json"),
            &serde_json::to_value(&summary).expect("json"),
        )?;
    }
    Ok(summary)
}

struct Runner<'a> {
    dir: Option<&'a Path>,
}

impl Runner<'_> {
    fn run(
        &mut self,
        label: &str,
        cfg: &ExperimentConfig,
        data: &Dataset,
    ) -> Result<TrackedRun, ExperimentError> {
        let run = track_on(cfg, data)?;
        if let Some(dir) = self.dir {
            write_run(&dir.join(label), cfg, &run)?;
        }
        Ok(run)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with an `n − 1` denominator; 0 for fewer than 2 values.
fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// `(√m + √n)·s` per layer for Kaiming scale `s = √(2/n)`.
pub fn kaiming_edge_prediction(spec: &MlpSpec) -> Vec<f64> {
    spec.layers()
        .iter()
        .map(|d| {
            let (m, n) = (d.output as f64, d.input as f64);
            (m.sqrt() + n.sqrt()) * (2.0 / n).sqrt()
        })
        .collect()
}

fn init_law(cfg: &ExperimentConfig) -> Result<SuiteSummary, ExperimentError> {
    let trials = cfg.init_trials.max(1);
    let std = (2.0f64 / 512.0).sqrt();
    let target = 2.0 * 2f64.sqrt();
    let spec = cfg.network(cfg.n_features, cfg.n_classes)?;
    let predicted_k0: f64 = kaiming_edge_prediction(&spec).iter().product();

    let mut sigmas = Vec::with_capacity(trials);
    let mut k0s = Vec::with_capacity(trials);
    for trial in 0..trials as u64 {
        let seed = cfg.init_seed.wrapping_add(trial);
        let w = gaussian_matrix(&mut Rng::derive(seed, 0), 512, 512, std);
        sigmas.push(op_norm(&w)?);
        let state = MlpState::kaiming(&spec, &mut Rng::derive(seed, 0), cfg.eta);
        let k0: f64 = state
            .weights
            .iter()
            .map(op_norm)
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .product();
        k0s.push(k0);
    }
    let sigma_mean = mean(&sigmas);
    let sigma_rel = (sigma_mean - target).abs() / target;
    let k0_mean = mean(&k0s);
    let k0_rel = (k0_mean - predicted_k0).abs() / predicted_k0;
    Ok(SuiteSummary {
        suite: SuiteKind::InitLaw,
        statistic: "relative error of mean sigma1 (512x512) and of mean K(0)".into(),
        value: sigma_rel.max(k0_rel),
        criterion: "sigma1 within 5% of 2*sqrt(2); K(0) within 10% of prod (sqrt(m)+sqrt(n))*s"
            .into(),
        passed: sigma_rel < 0.05 && k0_rel < 0.10,
        details: json!({
            "trials": trials,
            "sigma1_512": sigmas,
            "sigma1_mean": sigma_mean,
            "sigma1_target": target,
            "sigma1_rel_error": sigma_rel,
            "network_widths": spec.widths(),
            "k0": k0s,
            "k0_mean": k0_mean,
            "k0_predicted": predicted_k0,
            "k0_rel_error": k0_rel,
        }),
    })
}

fn near_convergence(
    cfg: &ExperimentConfig,
    runner: &mut Runner,
) -> Result<SuiteSummary, ExperimentError> {
    let data = build_dataset(cfg)?;
    let run = runner.run("run", cfg, &data)?;
    let rows = &run.trajectory.rows;
    let min_kappa = rows
        .iter()
        .map(|r| r.terms.kappa_z)
        .fold(f64::INFINITY, f64::min);
    let tail_start = rows.len() - (rows.len() * 3).div_ceil(10);
    let tail = &rows[tail_start..];
    let worst_drop = tail
        .windows(2)
        .map(|w| w[0].e_k - w[1].e_k)
        .fold(0.0f64, f64::max);
    let converged = run.final_loss < cfg.stop_loss.max(f64::MIN_POSITIVE);
    let monotone = worst_drop <= 0.0;
    Ok(SuiteSummary {
        suite: SuiteKind::NearConvergence,
        statistic: "min kappa_Z over recorded steps".into(),
        value: min_kappa,
        criterion:
            "loss below stop_loss, kappa_Z >= 0 everywhere, E[K] nondecreasing over the final 30%"
                .into(),
        passed: converged && min_kappa >= 0.0 && monotone,
        details: json!({
            "steps_run": run.steps_run,
            "final_loss": run.final_loss,
            "final_accuracy": run.final_accuracy,
            "recorded_rows": rows.len(),
            "tail_rows": tail.len(),
            "max_e_k_drop_in_tail": worst_drop,
            "min_mu_z_in_tail": tail.iter().map(|r| r.terms.mu_z).fold(f64::INFINITY, f64::min),
            "e_k_final": rows.last().map(|r| r.e_k),
            "k_observed_final": rows.last().map(|r| r.k_observed),
            "degenerate_fraction": run.trajectory.degenerate_fraction(),
        }),
    })
}

fn monotone_grid(
    which: SuiteKind,
    cfg: &ExperimentConfig,
    runner: &mut Runner,
) -> Result<SuiteSummary, ExperimentError> {
    let (grid, key): (&[f64], &str) = match which {
        SuiteKind::GradNoise => (&cfg.rho_grid, "rho"),
        _ => (&cfg.eps_grid, "eps"),
    };
    if grid.is_empty() || cfg.seed_grid.is_empty() {
        return Err(ExperimentError::Config(format!(
            "{which} needs a nonempty {key} grid and seed grid"
        )));
    }
    let data = build_dataset(cfg)?;
    let mut means = Vec::with_capacity(grid.len());
    let mut per_seed = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut finals = Vec::new();
        for &seed in &cfg.seed_grid {
            let mut run_cfg = cfg.with_run_seed(seed);
            match which {
                SuiteKind::GradNoise => run_cfg.rho = value,
                _ => run_cfg.label_eps = value,
            }
            let run = runner.run(&format!("{key}_{value}_seed_{seed}"), &run_cfg, &data)?;
            finals.push(run.trajectory.last().map_or(f64::NAN, |r| r.k_observed));
        }
        means.push(mean(&finals));
        per_seed.push(finals);
    }
    // Grid order is the direction of increasing perturbation.
    let gaps: Vec<f64> = means.windows(2).map(|w| w[0] - w[1]).collect();
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SuiteSummary {
        suite: which,
        statistic: format!("smallest drop in mean final K between consecutive {key} values"),
        value: min_gap,
        criterion: format!("mean final K strictly decreasing along the {key} grid"),
        passed: gaps.iter().all(|&g| g > 0.0),
        details: json!({
            "grid": grid,
            "seeds": cfg.seed_grid,
            "mean_final_k": means,
            "final_k_per_seed": per_seed,
        }),
    })
}

fn batch_size(
    cfg: &ExperimentConfig,
    runner: &mut Runner,
) -> Result<SuiteSummary, ExperimentError> {
    if cfg.seed_grid.len() < 2 {
        return Err(ExperimentError::Config(
            "batch_size suite needs at least 2 seeds".into(),
        ));
    }
    let data = build_dataset(cfg)?;
    let mut summed = Vec::new();
    let mut endpoint = Vec::new();
    let mut predicted = Vec::new();
    let mut rows = Vec::new();
    for &m in &cfg.batch_grid {
        let mut increments: Vec<Vec<f64>> = Vec::new();
        let mut finals = Vec::new();
        let mut var_z = Vec::new();
        for &seed in &cfg.seed_grid {
            let run_cfg = ExperimentConfig {
                batch_size: m,
                sampling_seed: seed,
                noise_seed: seed,
                ..cfg.clone()
            };
            let run = runner.run(&format!("m_{m}_seed_{seed}"), &run_cfg, &data)?;
            finals.push(run.trajectory.last().map_or(0.0, |r| r.noise_integral));
            var_z.push(run.trajectory.last().map_or(0.0, |r| r.var_z));
            increments.push(run.noise_increments);
        }
        let steps = increments.iter().map(Vec::len).min().unwrap_or(0);
        let per_step: f64 = (0..steps)
            .map(|k| sample_variance(&increments.iter().map(|s| s[k]).collect::<Vec<_>>()))
            .sum();
        let end_var = sample_variance(&finals);
        let pred = mean(&var_z);
        summed.push((m, per_step));
        endpoint.push((m, end_var));
        predicted.push((m, pred));
        rows.push(json!({
            "batch_size": m,
            "var_noise_integral_stepwise": per_step,
            "var_noise_integral_endpoint": end_var,
            "predicted_var_z": pred,
            "noise_integral_per_seed": finals,
        }));
    }
    let fit = batch_size_variance_law(&summed)?;
    let slope_or_nan =
        |pts: &[(usize, f64)]| batch_size_variance_law(pts).map_or(f64::NAN, |f| f.slope);
    Ok(SuiteSummary {
        suite: SuiteKind::BatchSize,
        statistic: "log-log slope of the cross-seed variance of the noise integral against M"
            .into(),
        value: fit.slope,
        criterion: "slope within -1 +/- 0.15".into(),
        passed: (fit.slope + 1.0).abs() <= 0.15,
        details: json!({
            "variance_estimator": "sum over steps of the cross-seed sample variance of per-step noise increments",
            "seeds": cfg.seed_grid,
            "per_batch_size": rows,
            "slope_stepwise": fit.slope,
            "slope_endpoint": slope_or_nan(&endpoint),
            "slope_predicted_var_z": slope_or_nan(&predicted),
        }),
    })
}

fn sampling_trajectory(
    cfg: &ExperimentConfig,
    runner: &mut Runner,
) -> Result<SuiteSummary, ExperimentError> {
    if cfg.seed_grid.is_empty() {
        return Err(ExperimentError::Config(
            "sampling_trajectory needs a nonempty seed grid".into(),
        ));
    }
    let data = build_dataset(cfg)?;
    let mut finals = Vec::new();
    for &seed in &cfg.seed_grid {
        let run_cfg = ExperimentConfig {
            sampling_seed: seed,
            ..cfg.clone()
        };
        finals.push(
            runner
                .run(&format!("sampling_seed_{seed}"), &run_cfg, &data)?
                .final_log_k(),
        );
    }
    let m = mean(&finals);
    let cv = sample_variance(&finals).sqrt() / m.abs();
    Ok(SuiteSummary {
        suite: SuiteKind::SamplingTrajectory,
        statistic: "coefficient of variation of final log K across sampling seeds".into(),
        value: cv,
        criterion: "below 0.01".into(),
        passed: cv < 0.01,
        details: json!({
            "batch_size": cfg.batch_size,
            "init_seed": cfg.init_seed,
            "sampling_seeds": cfg.seed_grid,
            "final_log_k": finals,
            "mean_final_log_k": m,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in SuiteKind::ALL {
            assert_eq!(k.name().parse::<SuiteKind>().unwrap(), k);
        }
        assert!("nope".parse::<SuiteKind>().is_err());
    }

    #[test]
    fn single_seed_has_zero_spread() {
        let cfg = ExperimentConfig {
            seed_grid: vec![4],
            steps: 3,
            n_samples: 300,
            ..SuiteKind::SamplingTrajectory.default_config()
        };
        let s = run_implication_suite(SuiteKind::SamplingTrajectory, &cfg, None).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.passed);
    }

    #[test]
    fn sample_variance_small_cases() {
        assert_eq!(sample_variance(&[1.0]), 0.0);
        assert_eq!(sample_variance(&[1.0, 3.0]), 2.0);
    }
}
