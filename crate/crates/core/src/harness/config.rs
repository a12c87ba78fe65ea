use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::accountant::LedgerMode;
use crate::aggregator::GnMaxParams;
use crate::data::{Family, SplitFractions, SyntheticSpec};
use crate::nn::{AdamConfig, SourceArch, StudentConfig, TrainConfig};
use crate::prompt::{MapKind, Placement, PromptSpec};

/// How the aggregator's noise is charged. `Off` skips accounting and
/// reports no ε; it is the only mode that accepts zero noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountingMode {
    PerStep,
    PaperSimple,
    Off,
}

impl AccountingMode {
    pub fn ledger_mode(self) -> Option<LedgerMode> {
        match self {
            AccountingMode::PerStep => Some(LedgerMode::PerStep),
            AccountingMode::PaperSimple => Some(LedgerMode::PaperSimple),
            AccountingMode::Off => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Visual prompt and label map over the frozen source.
    Prompted,
    /// The source architecture trained from random initialisation.
    Scratch,
    /// Frozen source features with a freshly trained affine head.
    HeadFinetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentKind {
    Prompted,
    Scratch,
}

/// The public source task and its model. The source does not depend on the
/// master seed, so runs and sweeps share one pre-trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub data: SyntheticSpec,
    pub test_fraction: f64,
    pub arch: SourceArch,
    pub train: TrainConfig,
    /// Load a saved model from this directory instead of training one.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SourceSection {
    fn default() -> Self {
        let arch = SourceArch::default();
        Self {
            data: SyntheticSpec {
                classes: arch.classes,
                dims: arch.input_dims,
                family: Family::Mixed,
                gap_knob: 1.0,
                noise_level: 0.1,
                count: 2600,
                seed: 0,
                zoom: [0.6, 1.0],
                jitter: 0.1,
            },
            test_fraction: 0.1,
            arch,
            train: TrainConfig {
                optimizer: AdamConfig {
                    lr: 0.005,
                    ..AdamConfig::default()
                },
                lr_decay_per_epoch: 0.8,
                epochs: 8,
                ..TrainConfig::default()
            },
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    pub data: SyntheticSpec,
    pub fractions: SplitFractions,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            data: SyntheticSpec {
                classes: 10,
                dims: [1, 16, 16],
                family: Family::Stripes,
                gap_knob: 0.8,
                noise_level: 0.25,
                count: 2000,
                seed: 0,
                zoom: [1.0, 1.0],
                jitter: 0.1,
            },
            fractions: SplitFractions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub rescale: [usize; 2],
    pub masked: bool,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            rescale: [16, 16],
            masked: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Student-phase repetitions behind the reported mean and std.
    pub repeats: usize,
    pub num_teachers: usize,
    /// Queries sent to the aggregator, taken from the front of the public pool.
    pub max_queries: usize,
    pub delta: f64,
    pub accounting: AccountingMode,
    /// Vote-count sensitivity charged per mechanism call.
    pub sensitivity: f64,
    pub map_kind: MapKind,
    pub teacher_kind: TeacherKind,
    pub student_kind: StudentKind,
    /// Adds `wall_time_s` to the report, which makes it nondeterministic.
    pub record_wall_time: bool,
    pub source: SourceSection,
    pub target: TargetSection,
    pub prompt: PromptSection,
    pub aggregator: GnMaxParams,
    pub teacher_train: TrainConfig,
    pub student: StudentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            repeats: 3,
            num_teachers: 50,
            max_queries: 200,
            delta: 1e-5,
            accounting: AccountingMode::PerStep,
            sensitivity: 1.0,
            map_kind: MapKind::Fc1,
            teacher_kind: TeacherKind::Prompted,
            student_kind: StudentKind::Prompted,
            record_wall_time: false,
            source: SourceSection::default(),
            target: TargetSection::default(),
            prompt: PromptSection::default(),
            aggregator: GnMaxParams {
                threshold: 30.0,
                sigma1: 10.0,
                sigma2: 5.0,
            },
            teacher_train: TrainConfig {
                batch_size: 4,
                ..TrainConfig::default()
            },
            student: StudentConfig::default(),
        }
    }
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{key}: {msg}"))
}

/// Sizes of the target pools implied by the fractions.
pub(crate) fn pool_sizes(count: usize, f: &SplitFractions) -> (usize, usize, usize) {
    let private = (f.private * count as f64).round() as usize;
    let public = ((f.public * count as f64).round() as usize).min(count - private.min(count));
    (private, public, count.saturating_sub(private + public))
}

impl ExperimentConfig {
    pub fn prompt_spec(&self) -> PromptSpec {
        PromptSpec {
            source_dims: self.source.arch.input_dims,
            rescale: self.prompt.rescale,
            placement: Placement::Center,
            masked: self.prompt.masked,
        }
    }

    /// Checks every nested invariant; errors name the offending key.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.repeats == 0 {
            return Err(invalid("repeats", "must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta", format!("{} not in (0, 1)", self.delta)));
        }
        if !(self.sensitivity.is_finite() && self.sensitivity > 0.0) {
            return Err(invalid("sensitivity", "must be positive"));
        }
        let agg = &self.aggregator;
        for (key, v) in [
            ("aggregator.threshold", agg.threshold),
            ("aggregator.sigma1", agg.sigma1),
            ("aggregator.sigma2", agg.sigma2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(key, format!("{v} must be finite and non-negative")));
            }
        }
        match self.accounting {
            AccountingMode::Off => {}
            AccountingMode::PaperSimple | AccountingMode::PerStep => {
                if agg.sigma2 <= 0.0 {
                    return Err(invalid("aggregator.sigma2", "must be positive unless accounting = \"off\""));
                }
                if self.accounting == AccountingMode::PerStep && agg.sigma1 <= 0.0 {
                    return Err(invalid(
                        "aggregator.sigma1",
                        "must be positive for per_step accounting",
                    ));
                }
            }
        }

        let src = &self.source;
        src.data.validate().map_err(|e| invalid("source.data", e))?;
        src.arch.validate().map_err(|e| invalid("source.arch", e))?;
        src.train.validate().map_err(|e| invalid("source.train", e))?;
        if src.data.dims != src.arch.input_dims {
            return Err(invalid(
                "source.data.dims",
                format!("{:?} differs from source.arch.input_dims {:?}", src.data.dims, src.arch.input_dims),
            ));
        }
        if src.data.classes != src.arch.classes {
            return Err(invalid(
                "source.data.classes",
                format!("{} differs from source.arch.classes {}", src.data.classes, src.arch.classes),
            ));
        }
        if !(0.0..1.0).contains(&src.test_fraction) {
            return Err(invalid("source.test_fraction", "must lie in [0, 1)"));
        }

        let tgt = &self.target;
        tgt.data.validate().map_err(|e| invalid("target.data", e))?;
        tgt.fractions.validate().map_err(|e| invalid("target.fractions", e))?;
        if tgt.data.dims[0] != src.arch.input_dims[0] {
            return Err(invalid(
                "target.data.dims",
                format!("{} channels but the source takes {}", tgt.data.dims[0], src.arch.input_dims[0]),
            ));
        }
        self.prompt_spec().validate().map_err(|e| invalid("prompt.rescale", e))?;
        if self.map_kind == MapKind::Random && tgt.data.classes > src.arch.classes {
            return Err(invalid(
                "map_kind",
                format!(
                    "random map needs target classes ({}) <= source classes ({})",
                    tgt.data.classes, src.arch.classes
                ),
            ));
        }
        self.teacher_train.validate().map_err(|e| invalid("teacher_train", e))?;
        self.student.validate().map_err(|e| invalid("student", e))?;

        let (private, public, test) = pool_sizes(tgt.data.count, &tgt.fractions);
        if self.num_teachers == 0 || self.num_teachers > private {
            return Err(invalid(
                "num_teachers",
                format!("{} teachers for {private} private examples", self.num_teachers),
            ));
        }
        if self.max_queries == 0 || self.max_queries > public {
            return Err(invalid(
                "max_queries",
                format!("{} queries for a public pool of {public}", self.max_queries),
            ));
        }
        if test == 0 {
            return Err(invalid("target.fractions.test", "leaves no test examples"));
        }
        Ok(())
    }

    /// Parses a TOML or JSON document (JSON when `path` ends in `.json`).
    pub fn parse_document(text: &str, path: &Path) -> Result<Value, HarnessError> {
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
        }
    }

    /// Deserialises a config tree; errors carry the dotted key path.
    pub fn from_value(value: Value) -> Result<Self, HarnessError> {
        let config: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            HarnessError::Config(format!("{path}: {}", e.into_inner()))
        })?;
        Ok(config)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(Self::parse_document(&text, path)?)
    }
}

/// Short names accepted wherever a dotted key is expected.
pub fn resolve_alias(key: &str) -> &str {
    match key {
        "masked" => "prompt.masked",
        "rescale" => "prompt.rescale",
        "threshold" => "aggregator.threshold",
        "sigma1" => "aggregator.sigma1",
        "sigma2" => "aggregator.sigma2",
        "gap_knob" => "target.data.gap_knob",
        "teachers" => "num_teachers",
        other => other,
    }
}

/// Reads a command-line value: JSON literal when it parses, bare string
/// otherwise (`fc2`, `per_step`).
pub fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Replaces the value at dotted `key`; the key must already exist in the
/// tree (every config field serialises, so typos are caught here).
pub fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<(), HarnessError> {
    let key = resolve_alias(key);
    let mut node = tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| HarnessError::UnknownAxis(key.to_string()))?;
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_value(c.to_value()).unwrap(), c);
        let toml_text = toml::to_string(&c).unwrap();
        let v = ExperimentConfig::parse_document(&toml_text, Path::new("c.toml")).unwrap();
        assert_eq!(ExperimentConfig::from_value(v).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        let v = ExperimentConfig::parse_document("[aggregator]\nthreshold = \"high\"\n", Path::new("c.toml")).unwrap();
        let err = ExperimentConfig::from_value(v).unwrap_err().to_string();
        assert!(err.contains("aggregator.threshold"), "{err}");
        let v = ExperimentConfig::parse_document("[prompt]\nmaskd = true\n", Path::new("c.toml")).unwrap();
        let err = ExperimentConfig::from_value(v).unwrap_err().to_string();
        assert!(err.contains("maskd"), "{err}");

        let mut c = ExperimentConfig::default();
        c.aggregator.sigma2 = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("aggregator.sigma2"));
        c.accounting = AccountingMode::Off;
        c.aggregator.sigma1 = 0.0;
        c.validate().unwrap();
        c.repeats = 0;
        assert!(c.validate().unwrap_err().to_string().starts_with("invalid configuration: repeats"));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let v = ExperimentConfig::parse_document(r#"{"num_teachers": 7, "target": {"data": {"count": 400}}}"#, Path::new("c.json")).unwrap();
        let c = ExperimentConfig::from_value(v).unwrap();
        assert_eq!(c.num_teachers, 7);
        assert_eq!(c.target.data.count, 400);
        assert_eq!(c.target.data.classes, TargetSection::default().data.classes);
    }

    #[test]
    fn dotted_overrides() {
        let mut v = ExperimentConfig::default().to_value();
        set_dotted(&mut v, "aggregator.threshold", parse_scalar("480")).unwrap();
        set_dotted(&mut v, "masked", parse_scalar("false")).unwrap();
        set_dotted(&mut v, "map_kind", parse_scalar("fc2")).unwrap();
        set_dotted(&mut v, "rescale", parse_scalar("[12, 12]")).unwrap();
        let c = ExperimentConfig::from_value(v.clone()).unwrap();
        assert_eq!(c.aggregator.threshold, 480.0);
        assert!(!c.prompt.masked);
        assert_eq!(c.map_kind, MapKind::Fc2);
        assert_eq!(c.prompt.rescale, [12, 12]);
        assert!(matches!(
            set_dotted(&mut v, "aggregator.treshold", Value::Null),
            Err(HarnessError::UnknownAxis(_))
        ));
    }

    #[test]
    fn pool_sizes_match_split() {
        assert_eq!(pool_sizes(5000, &SplitFractions::default()), (3500, 1000, 500));
        assert_eq!(pool_sizes(103, &SplitFractions::default()), (72, 21, 10));
    }
}
