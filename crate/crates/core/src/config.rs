//! Run configuration: a single JSON document with unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ObjectiveSettings, RoutingConfig};
use crate::objective;
use crate::optim::AdamConfig;
use crate::transformer::ModelConfig;

/// Optional alternatives to constant auxiliary weights, kept for
/// comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxSchedule {
    /// Fixed `c1`, `c2` and temperature.
    Constant,
    /// Temperature decays linearly to `final_temperature` over the run.
    TemperatureDecay { final_temperature: f64 },
    /// `c1` decays linearly to zero over the run and `c2` is dropped.
    LinearC1Decay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub c1: f64,
    pub c2: f64,
    pub clamp_floor: f64,
    /// Feed clamped (true) or raw probabilities to the auxiliaries.
    pub clamp_aux: bool,
    pub schedule: AuxSchedule,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            c1: objective::DEFAULT_C1,
            c2: objective::DEFAULT_C2,
            clamp_floor: objective::DEFAULT_CLAMP_FLOOR,
            clamp_aux: true,
            schedule: AuxSchedule::Constant,
            label_smoothing: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_base: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_base: 5e-4,
            warmup_steps: 4000,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    /// Upper bound on epochs (passes over the training split).
    pub max_epochs: u64,
    /// Epochs without dev improvement before stopping; 0 disables.
    pub patience: u64,
    /// Dev instances scored per epoch (0 = whole dev split).
    pub eval_limit: usize,
    /// Extra decoding steps allowed beyond the longest target.
    pub decode_slack: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 2000,
            max_epochs: 1000,
            patience: 0,
            eval_limit: 0,
            decode_slack: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds initialization, dropout, Gumbel noise and batch order. The
    /// corpus has its own seed in `task`.
    pub seed: u64,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub routing: RoutingConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            model: self.model.clone(),
            routing: self.routing.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        let (enc, dec) = self.routing.order_sets()?;
        for k in [enc.len(), dec.len()] {
            if k > 1 {
                objective::check_floor(self.loss.clamp_floor, k)?;
            }
        }
        if self.model.src_vocab < self.task.vocab || self.model.tgt_vocab < self.task.vocab {
            return Err(Error::Config(format!(
                "model vocabularies {}/{} smaller than task vocabulary {}",
                self.model.src_vocab, self.model.tgt_vocab, self.task.vocab
            )));
        }
        let needed = self.task.max_src_len().max(self.task.max_tgt_len() + self.train.decode_slack);
        if needed > self.model.max_len {
            return Err(Error::Config(format!(
                "model max_len {} is below the {needed} positions the task and decoding need",
                self.model.max_len
            )));
        }
        if self.loss.c1 < 0.0 || self.loss.c2 < 0.0 {
            return Err(Error::Config("loss coefficients must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.loss.label_smoothing) {
            return Err(Error::Config("label smoothing must be in [0, 1)".into()));
        }
        if !(self.optim.lr_base > 0.0) || self.train.batch_size == 0 {
            return Err(Error::Config("lr_base and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Loss settings in effect at `step` (1-based) under the schedule.
    pub fn objective_at(&self, step: u64) -> ObjectiveSettings {
        let frac = (step as f64 / self.train.max_steps.max(1) as f64).min(1.0);
        let mut s = ObjectiveSettings {
            c1: self.loss.c1,
            c2: self.loss.c2,
            clamp_floor: self.loss.clamp_floor,
            clamp_aux: self.loss.clamp_aux,
            label_smoothing: self.loss.label_smoothing,
            temperature: self.routing.temperature,
        };
        match self.loss.schedule {
            AuxSchedule::Constant => {}
            AuxSchedule::TemperatureDecay { final_temperature } => {
                s.temperature = self.routing.temperature + (final_temperature - self.routing.temperature) * frac;
            }
            AuxSchedule::LinearC1Decay => {
                s.c1 = self.loss.c1 * (1.0 - frac);
                s.c2 = 0.0;
            }
        }
        s
    }

    /// Longest hypothesis the decoder may emit.
    pub fn decode_max_len(&self) -> usize {
        self.task.max_len + self.train.decode_slack
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [r#"{"sed": 1}"#, r#"{"loss": {"c3": 1.0}}"#, r#"{"model": {"width": 4}}"#] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn nested_keys_parse() {
        let cfg = RunConfig::from_json(
            r#"{"seed": 3, "loss": {"c1": 0.0, "c2": 0.0, "clamp_floor": 0.05},
                "routing": {"mode": {"fixed_order": 4}},
                "optim": {"adam": {"beta2": 0.98}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.loss.c1, 0.0);
        assert_eq!(cfg.routing.mode, crate::model::TrainMode::FixedOrder(4));
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.max_len = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.routing.decoder_subset = Some(6);
        cfg.loss.clamp_floor = 0.2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.task.vocab = 40;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn schedules() {
        let mut cfg = RunConfig::default();
        cfg.train.max_steps = 100;
        assert_eq!(cfg.objective_at(50).c1, cfg.loss.c1);
        cfg.loss.schedule = AuxSchedule::LinearC1Decay;
        let s = cfg.objective_at(50);
        assert!((s.c1 - 0.05).abs() < 1e-12 && s.c2 == 0.0);
        cfg.loss.schedule = AuxSchedule::TemperatureDecay { final_temperature: 0.5 };
        assert!((cfg.objective_at(100).temperature - 0.5).abs() < 1e-12);
    }
}
