//! Training configuration: defaults, key=value config files, and flag
//! overrides, applied in that order.

use std::path::Path;

use texthawkes::estimation::TrainConfig;
use texthawkes::Variant;

/// Flag-level overrides collected by the argument parser; `None` keeps the
/// value from the config file (or the default).
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainOverrides {
    /// Model variant: plain, textual, fully-textual, or neural.
    #[arg(long)]
    pub variant: Option<String>,
    /// Temporal kernel decay.
    #[arg(long)]
    pub omega: Option<f64>,
    /// Gaussian text-kernel bandwidth.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// L2 regularization constant on the base-intensity weights.
    #[arg(long)]
    pub reg_c: Option<f64>,
    /// Optimizer iteration cap.
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Relative log-likelihood convergence tolerance.
    #[arg(long)]
    pub convergence_tol: Option<f64>,
    /// Neural kernel learning rate.
    #[arg(long)]
    pub nn_learning_rate: Option<f64>,
    /// Neural kernel momentum.
    #[arg(long)]
    pub nn_momentum: Option<f64>,
    /// Neural kernel hidden layer sizes, comma separated (e.g. 20,20).
    #[arg(long)]
    pub nn_hidden: Option<String>,
    /// Neural kernel training epochs.
    #[arg(long)]
    pub nn_epochs: Option<usize>,
    /// Monte Carlo samples per thread for the neural compensator.
    #[arg(long)]
    pub nn_mc_samples: Option<usize>,
}

fn parse_hidden(text: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad hidden layer size `{p}`: {e}"))
        })
        .collect()
}

fn apply_pair(config: &mut TrainConfig, key: &str, value: &str) -> Result<(), String> {
    let bad = |e: std::num::ParseFloatError| format!("bad value for `{key}`: {e}");
    let bad_int = |e: std::num::ParseIntError| format!("bad value for `{key}`: {e}");
    match key {
        "variant" => {
            config.variant = value
                .parse::<Variant>()
                .map_err(|e| e.to_string())?;
        }
        "omega" => config.omega = value.parse().map_err(bad)?,
        "sigma" => config.sigma = value.parse().map_err(bad)?,
        "reg_c" => config.reg_c = value.parse().map_err(bad)?,
        "max_iterations" => config.max_iterations = value.parse().map_err(bad_int)?,
        "convergence_tol" => config.convergence_tol = value.parse().map_err(bad)?,
        "seed" => config.seed = value.parse().map_err(bad_int)?,
        "nn_learning_rate" => config.nn.learning_rate = value.parse().map_err(bad)?,
        "nn_momentum" => config.nn.momentum = value.parse().map_err(bad)?,
        "nn_hidden" => config.nn.hidden = parse_hidden(value)?,
        "nn_epochs" => config.nn.epochs = value.parse().map_err(bad_int)?,
        "nn_mc_samples" => config.nn.mc_samples = value.parse().map_err(bad_int)?,
        other => return Err(format!("unknown config key `{other}`")),
    }
    Ok(())
}

/// Apply a flat `key = value` config file. Lines starting with `#` and blank
/// lines are skipped; unknown keys are rejected.
pub fn apply_config_file(config: &mut TrainConfig, path: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), lineno + 1))?;
        apply_pair(config, key.trim(), value.trim())
            .map_err(|e| format!("{}:{}: {e}", path.display(), lineno + 1))?;
    }
    Ok(())
}

/// Apply command-line overrides on top of whatever the config file set.
pub fn apply_overrides(config: &mut TrainConfig, o: &TrainOverrides) -> Result<(), String> {
    if let Some(v) = &o.variant {
        config.variant = v.parse::<Variant>().map_err(|e| e.to_string())?;
    }
    if let Some(v) = o.omega {
        config.omega = v;
    }
    if let Some(v) = o.sigma {
        config.sigma = v;
    }
    if let Some(v) = o.reg_c {
        config.reg_c = v;
    }
    if let Some(v) = o.max_iterations {
        config.max_iterations = v;
    }
    if let Some(v) = o.convergence_tol {
        config.convergence_tol = v;
    }
    if let Some(v) = o.nn_learning_rate {
        config.nn.learning_rate = v;
    }
    if let Some(v) = o.nn_momentum {
        config.nn.momentum = v;
    }
    if let Some(v) = &o.nn_hidden {
        config.nn.hidden = parse_hidden(v)?;
    }
    if let Some(v) = o.nn_epochs {
        config.nn.epochs = v;
    }
    if let Some(v) = o.nn_mc_samples {
        config.nn.mc_samples = v;
    }
    Ok(())
}
