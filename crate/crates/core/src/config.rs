//! Run configuration: strict TOML schema plus the built-in experiment
//! presets with their published hyperparameters.

use crate::elasticity::problems::ProblemChoice;
use crate::losses::LossWeights;
use crate::trainer::{LrDecay, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown preset {0:?} (expected ex1, ex2, ex3 or ex4)")]
    UnknownPreset(String),
    #[error("unknown mode {0:?} (expected standard or decomposed)")]
    UnknownMode(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("i/o failure reading config: {0}")]
    Io(#[from] std::io::Error),
}

/// A full run: training setup plus output and emission switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub emit_csv: bool,
    #[serde(default)]
    pub emit_svg: bool,
}

fn default_true() -> bool {
    true
}

/// Parse a TOML run config; unknown keys are rejected.
pub fn parse_run_config(text: &str) -> Result<RunConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
}

pub fn load_run_config(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    parse_run_config(&std::fs::read_to_string(path)?)
}

/// Resolve a `--mode` flag value against a preset: under the parametric
/// problem the plain names select the parametric variants.
pub fn mode_for(name: &str, parametric: bool) -> Result<TrainMode, ConfigError> {
    match (name, parametric) {
        ("standard", false) => Ok(TrainMode::Standard),
        ("decomposed", false) => Ok(TrainMode::Decomposed),
        ("standard", true) => Ok(TrainMode::ParametricStandard),
        ("decomposed", true) => Ok(TrainMode::ParametricDecomposed),
        _ => Err(ConfigError::UnknownMode(name.to_string())),
    }
}

/// Built-in experiment presets. The decomposed weights are the published
/// ones; the standard baseline keeps the boundary weight and uses a unit
/// residual weight, which is exposed here rather than hidden in the trainer.
pub fn preset(name: &str, mode: TrainMode) -> Result<RunConfig, ConfigError> {
    let (problem, hidden, weights, n_r, n_s, n_b, epochs, delta_b) = match name {
        "ex1" => (
            ProblemChoice::Ex1 { lambda: 1e5 },
            vec![50, 50, 50, 50],
            (0.05, 1.0, 20.0),
            5000,
            5000,
            400,
            30_000,
            20.0,
        ),
        "ex2" => (
            ProblemChoice::Ex2 { lambda: 1e4 },
            vec![128, 128, 128, 128],
            (0.05, 1.0, 300.0),
            15_625,
            15_625,
            1536,
            50_000,
            300.0,
        ),
        "ex3" => (
            ProblemChoice::Ex3 { lambda_scale: 1e4 },
            vec![64, 64, 64, 64],
            (0.05, 1.0, 20.0),
            5000,
            5000,
            400,
            30_000,
            20.0,
        ),
        "ex4" => (
            ProblemChoice::Ex4 { e: 3.0, nu: 0.3 },
            vec![64, 64, 64, 64],
            (1.0, 1.0, 20.0),
            4000,
            4000,
            1200,
            60_000,
            20.0,
        ),
        other => return Err(ConfigError::UnknownPreset(other.to_string())),
    };

    // Baseline weights for the plain standard mode: unit residual weight
    // with the same boundary emphasis as the decomposed runs.
    let weights = match mode {
        TrainMode::Standard => LossWeights {
            delta_r: 1.0,
            delta_s: 1.0,
            delta_b,
        },
        _ => LossWeights {
            delta_r: weights.0,
            delta_s: weights.1,
            delta_b: weights.2,
        },
    };

    let (n_pr, n_pb) = if mode.is_parametric() { (25, 25) } else { (0, 0) };

    Ok(RunConfig {
        train: TrainConfig {
            problem,
            mode,
            hidden,
            force_net_combined: false,
            weights,
            n_r,
            n_s,
            n_b,
            n_pr,
            n_pb,
            epochs,
            lr: 1e-3,
            lr_decay: Some(LrDecay {
                factor: 0.5,
                every: 20_000,
            }),
            seed: 0,
            log_every: 100,
            checkpoint_every: None,
            resample: false,
            target_rel_l2: None,
            cosine_diag: false,
            exec: Default::default(),
            eval_grid: None,
        },
        out_dir: None,
        emit_csv: true,
        emit_svg: false,
    })
}

impl RunConfig {
    /// Override the problem's scale parameter (`lambda` for ex1/ex2, the
    /// `lambda` magnitude for ex3). Ignored for ex4.
    pub fn set_scale_param(&mut self, value: f64) {
        match &mut self.train.problem {
            ProblemChoice::Ex1 { lambda } | ProblemChoice::Ex2 { lambda } => *lambda = value,
            ProblemChoice::Ex3 { lambda_scale } => *lambda_scale = value,
            ProblemChoice::Ex4 { .. } => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_published_settings() {
        let ex1 = preset("ex1", TrainMode::Decomposed).unwrap();
        assert_eq!(ex1.train.hidden, vec![50, 50, 50, 50]);
        assert_eq!(ex1.train.n_r, 5000);
        assert_eq!(ex1.train.n_b, 400);
        assert_eq!(ex1.train.weights.delta_r, 0.05);
        assert_eq!(ex1.train.weights.delta_b, 20.0);

        let ex2 = preset("ex2", TrainMode::Decomposed).unwrap();
        assert_eq!(ex2.train.hidden, vec![128, 128, 128, 128]);
        assert_eq!(ex2.train.n_r, 15_625);
        assert_eq!(ex2.train.n_b, 1536);
        assert_eq!(ex2.train.weights.delta_b, 300.0);

        let ex3 = preset("ex3", TrainMode::Decomposed).unwrap();
        assert_eq!(ex3.train.hidden, vec![64, 64, 64, 64]);
        assert!(matches!(
            ex3.train.problem,
            ProblemChoice::Ex3 { lambda_scale } if lambda_scale == 1e4
        ));

        let ex4 = preset("ex4", TrainMode::ParametricStandard).unwrap();
        assert_eq!(ex4.train.weights.delta_r, 1.0);
        assert_eq!(ex4.train.n_pr * ex4.train.n_r, 100_000);
        assert_eq!(ex4.train.n_pb * ex4.train.n_b, 30_000);
    }

    #[test]
    fn standard_mode_gets_baseline_weights() {
        let run = preset("ex1", TrainMode::Standard).unwrap();
        assert_eq!(run.train.weights.delta_r, 1.0);
        assert_eq!(run.train.weights.delta_b, 20.0);
        let run3d = preset("ex2", TrainMode::Standard).unwrap();
        assert_eq!(run3d.train.weights.delta_b, 300.0);
    }

    #[test]
    fn unknown_preset_and_mode_are_rejected() {
        assert!(matches!(
            preset("ex9", TrainMode::Standard),
            Err(ConfigError::UnknownPreset(_))
        ));
        assert!(matches!(
            mode_for("fancy", false),
            Err(ConfigError::UnknownMode(_))
        ));
        assert_eq!(mode_for("standard", true).unwrap(), TrainMode::ParametricStandard);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let run = preset("ex3", TrainMode::Decomposed).unwrap();
        let text = toml::to_string(&run).unwrap();
        let back = parse_run_config(&text).unwrap();
        assert_eq!(run, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let run = preset("ex1", TrainMode::Decomposed).unwrap();
        let text = format!("mystery_knob = 3\n{}", toml::to_string(&run).unwrap());
        assert!(matches!(
            parse_run_config(&text),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn scale_override_applies_to_the_right_field() {
        let mut run = preset("ex3", TrainMode::Decomposed).unwrap();
        run.set_scale_param(10.0);
        assert!(matches!(
            run.train.problem,
            ProblemChoice::Ex3 { lambda_scale } if lambda_scale == 10.0
        ));
    }
}
