use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::config::ExperimentConfig;
use super::tracker::TrackedRun;
use super::ExperimentError;
use crate::dynamics::Trajectory;

/// Version string baked in at build time (`git describe` when available).
pub const VERSION: &str = env!("LIPSDE_VERSION");

pub const LAYER_COLUMNS: [&str; 8] = [
    "step",
    "t",
    "layer",
    "sigma1_observed",
    "mu",
    "kappa",
    "lambda_sq",
    "degenerate",
];

pub const NETWORK_COLUMNS: [&str; 13] = [
    "step",
    "t",
    "mu_Z",
    "kappa_Z",
    "lambda_Z_sq",
    "Z_pred_expectation",
    "Z_pred_pathwise",
    "E_K",
    "Var_K",
    "K_observed",
    "Var_Z",
    "noise_integral",
    "degenerate_layers",
];

/// 17 significant digits, round-trip exact.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn header_comment(tr: &Trajectory) -> String {
    format!(
        "# config_hash={} init_seed={} sampling_seed={} noise_seed={}\n",
        tr.meta.config_hash, tr.meta.init_seed, tr.meta.sampling_seed, tr.meta.noise_seed
    )
}

/// Per-layer rows, one block of layers per recorded step.
pub fn layers_csv(tr: &Trajectory) -> String {
    let mut out = header_comment(tr);
    out.push_str(&LAYER_COLUMNS.join(","));
    out.push('\n');
    for row in &tr.rows {
        for (l, terms) in row.terms.layers.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                row.step,
                fmt_f64(row.t),
                l,
                fmt_f64(row.sigma1_observed[l]),
                fmt_f64(terms.mu),
                fmt_f64(terms.kappa),
                fmt_f64(terms.lambda_sq),
                u8::from(terms.degenerate)
            )
            .expect("write to string");
        }
    }
    out
}

pub fn network_csv(tr: &Trajectory) -> String {
    let mut out = header_comment(tr);
    out.push_str(&NETWORK_COLUMNS.join(","));
    out.push('\n');
    for row in &tr.rows {
        let floats = [
            row.t,
            row.terms.mu_z,
            row.terms.kappa_z,
            row.terms.lambda_z_sq,
            row.z_pred_expectation,
            row.z_pred_pathwise,
            row.e_k,
            row.var_k,
            row.k_observed,
            row.var_z,
            row.noise_integral,
        ];
        let cells: Vec<String> = floats.iter().map(|&x| fmt_f64(x)).collect();
        writeln!(
            out,
            "{},{},{}",
            row.step,
            cells.join(","),
            row.terms.degenerate_layers()
        )
        .expect("write to string");
    }
    out
}

pub fn manifest(cfg: &ExperimentConfig, run: &TrackedRun) -> Value {
    let tr = &run.trajectory;
    let last = tr.last();
    json!({
        "version": VERSION,
        "config_hash": tr.meta.config_hash,
        "config": cfg,
        "seeds": {
            "data_seed": cfg.data_seed,
            "init_seed": cfg.init_seed,
            "sampling_seed": cfg.sampling_seed,
            "noise_seed": cfg.noise_seed,
        },
        "steps_run": run.steps_run,
        "recorded_rows": tr.rows.len(),
        "wall_seconds": run.wall_seconds,
        "z0": tr.z0,
        "sigma1_initial": tr.sigma1_initial,
        "final": {
            "log_k_observed": run.final_log_k(),
            "z_pred_pathwise": last.map(|r| r.z_pred_pathwise),
            "z_pred_expectation": last.map(|r| r.z_pred_expectation),
            "e_k": last.map(|r| r.e_k),
            "var_k": last.map(|r| r.var_k),
            "loss": run.final_loss,
            "accuracy": run.final_accuracy,
        },
        "degenerate_fraction": tr.degenerate_fraction(),
        "files": ["layers.csv", "network.csv", "trajectory.json"],
    })
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, contents).map_err(|e| ExperimentError::io(path, e))
}

/// JSON mirror of both CSV files.
pub fn trajectory_json(tr: &Trajectory) -> Value {
    json!({
        "meta": tr.meta,
        "z0": tr.z0,
        "sigma1_initial": tr.sigma1_initial,
        "rows": tr.rows,
    })
}

/// Writes `layers.csv`, `network.csv`, `trajectory.json` and
/// `manifest.json` into `dir`.
pub fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    run: &TrackedRun,
) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    let files = [
        (dir.join("layers.csv"), layers_csv(&run.trajectory)),
        (dir.join("network.csv"), network_csv(&run.trajectory)),
        (
            dir.join("trajectory.json"),
            serde_json::to_string(&trajectory_json(&run.trajectory)).expect("json") + "\n",
        ),
        (
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest(cfg, run)).expect("json") + "\n",
        ),
    ];
    for (path, body) in &files {
        write(path, body)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| ExperimentError::io(parent, e))?;
    }
    write(
        path,
        &(serde_json::to_string_pretty(value).expect("json") + "\n"),
    )
}

/// Description of the output files and configuration keys.
pub fn schema() -> Value {
    let defaults = serde_json::to_value(ExperimentConfig::default()).expect("json");
    json!({
        "version": VERSION,
        "float_format": "decimal scientific notation with 17 significant digits",
        "comment_lines": "lines starting with '#' carry config_hash and seeds",
        "layers.csv": {
            "row": "one per layer per recorded step",
            "columns": {
                "step": "SGD step k (integer); terms use parameters before the update, observations after it",
                "t": "k * eta",
                "layer": "layer index from the input side (integer)",
                "sigma1_observed": "largest singular value of the layer weights after the update",
                "mu": "drift: <J, -grad L> / sigma1",
                "kappa": "entropy production: eta / (2 sigma1) * <H, Sigma>",
                "lambda_sq": "squared diffusion intensity: eta / sigma1^2 * J' Sigma J",
                "degenerate": "1 when the top singular value was not simple and kappa was carried forward",
            },
        },
        "network.csv": {
            "row": "one per recorded step",
            "columns": {
                "step": "SGD step k",
                "t": "k * eta",
                "mu_Z": "sum of layer mu",
                "kappa_Z": "sum of layer kappa",
                "lambda_Z_sq": "sum of layer lambda_sq",
                "Z_pred_expectation": "E[Z(t)] from the integrated terms",
                "Z_pred_pathwise": "log K(0) plus the realized-increment reconstruction",
                "E_K": "exp(E[Z] + Var[Z] / 2)",
                "Var_K": "E_K^2 * (exp(Var[Z]) - 1)",
                "K_observed": "product of layer sigma1 after the update",
                "Var_Z": "integrated lambda_Z_sq",
                "noise_integral": "running sum of -eta <J, g_batch - g_drift> / sigma1 over layers",
                "degenerate_layers": "layers flagged degenerate in this row's terms",
            },
        },
        "trajectory.json": "meta, z0, sigma1_initial and every recorded row with its full network and layer terms",
        "manifest.json": [
            "version", "config_hash", "config", "seeds", "steps_run", "recorded_rows",
            "wall_seconds", "z0", "sigma1_initial", "final", "degenerate_fraction", "files"
        ],
        "config_defaults": defaults,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for &x in &[0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, 0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
    }
}
