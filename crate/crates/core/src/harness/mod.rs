//! End-to-end runs: source model, teacher ensemble, private labelling,
//! accounting, student, and evaluation, plus grid sweeps over one key.

mod config;
mod report;

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::Value;
use thiserror::Error;

use crate::accountant::{default_orders, rdp_to_dp, AccountantError, LedgerMode, PrivacyLedger};
use crate::aggregator::{label_query_pool, AggregatorError, Ensemble, LabeledQueries};
use crate::data::{
    generate, load_source, partition, DataError, Dataset, PartitionPlan, TargetSplits,
};
use crate::nn::{
    evaluate, self_train, train_head, train_reteacher, train_scratch, train_source, train_student,
    Classifier, FrozenSourceModel, NnError, StudentConfig, Tensor,
};
use crate::prompt::{embed_target, PromptError, PromptSpec};

pub use crate::seed::derive_seed;
pub use config::{
    parse_scalar, resolve_alias, set_dotted, AccountingMode, ExperimentConfig, PromptSection,
    SourceSection, StudentKind, TargetSection, TeacherKind,
};
pub use report::{mean_std, round_to, ExperimentReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown sweep axis or key `{0}`")]
    UnknownAxis(String),
    #[error("report audit failed: {0}")]
    AuditFailed(String),
    #[error("{stage} {index} failed: {source}")]
    PartialFailure {
        stage: &'static str,
        index: usize,
        source: NnError,
    },
    #[error("worker pool: {0}")]
    Workers(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
}

impl HarnessError {
    /// Whether the fault lies in the user's configuration rather than in
    /// running it.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::UnknownAxis(_)
                | HarnessError::Data(DataError::InvalidSpec(_))
                | HarnessError::Nn(NnError::InvalidConfig(_))
        )
    }
}

/// Execution knobs that never change results.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Worker threads; `0` uses one per logical core.
    pub workers: usize,
    /// Receives one JSON line per aggregator query.
    pub audit: Option<&'a mut (dyn Write + Send)>,
}

impl RunOptions<'_> {
    pub fn with_workers(workers: usize) -> Self {
        Self { workers, audit: None }
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Workers(e.to_string()))?;
    Ok(pool.install(f))
}

type SourceCache = Mutex<HashMap<String, Arc<FrozenSourceModel>>>;

fn source_cache() -> &'static SourceCache {
    static CACHE: OnceLock<SourceCache> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// The frozen source for `section`, trained once per process and section.
pub fn source_model(section: &SourceSection) -> Result<Arc<FrozenSourceModel>, HarnessError> {
    if let Some(dir) = &section.checkpoint {
        let (model, _) = load_source(dir)?;
        if model.arch() != &section.arch {
            return Err(HarnessError::Config(format!(
                "source.checkpoint: saved architecture differs from source.arch in {}",
                dir.display()
            )));
        }
        return Ok(Arc::new(model));
    }
    let key = serde_json::to_string(section).expect("section serialises");
    if let Some(hit) = source_cache().lock().expect("cache lock").get(&key) {
        return Ok(Arc::clone(hit));
    }
    let model = Arc::new(train_source_section(section)?);
    source_cache()
        .lock()
        .expect("cache lock")
        .insert(key, Arc::clone(&model));
    Ok(model)
}

/// Trains a source model without consulting the cache.
pub fn train_source_section(section: &SourceSection) -> Result<FrozenSourceModel, HarnessError> {
    let data = generate(&section.data)?;
    let (train, test) = data.holdout(section.test_fraction, derive_seed(section.data.seed, "source-holdout", 0))?;
    let model = train_source(
        &train.examples(),
        train.labels(),
        &test.examples(),
        test.labels(),
        &section.arch,
        &section.train,
    )?;
    Ok(model)
}

/// Target examples embedded to the source input shape.
struct Embedded {
    x: Vec<Tensor>,
    y: Vec<usize>,
}

impl Embedded {
    fn new(data: &Dataset, spec: &PromptSpec) -> Result<Self, HarnessError> {
        let x = data
            .examples()
            .iter()
            .map(|t| embed_target(t, spec))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            x,
            y: data.labels().to_vec(),
        })
    }
}

struct Prepared {
    source: Arc<FrozenSourceModel>,
    spec: PromptSpec,
    classes: usize,
    private: Embedded,
    public: Embedded,
    test: Embedded,
    plan: PartitionPlan,
}

/// The private, public and test pools a run with `config` uses.
pub fn target_splits(config: &ExperimentConfig) -> Result<TargetSplits, HarnessError> {
    let master = config.master_seed;
    let mut spec = config.target.data.clone();
    spec.seed = derive_seed(master, "target-data", spec.seed);
    let target = generate(&spec)?;
    Ok(target.split_target(&config.target.fractions, derive_seed(master, "target-split", 0))?)
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    config.validate()?;
    let source = source_model(&config.source)?;
    let spec = config.prompt_spec();
    let splits = target_splits(config)?;
    let plan = partition(
        splits.private.len(),
        config.num_teachers,
        derive_seed(config.master_seed, "partition", 0),
    )?;
    Ok(Prepared {
        spec,
        classes: config.target.data.classes,
        private: Embedded::new(&splits.private, &spec)?,
        public: Embedded::new(&splits.public, &spec)?,
        test: Embedded::new(&splits.test, &spec)?,
        plan,
        source,
    })
}

/// Every teacher's votes on the query prefix, computed up front.
struct Votes {
    classes: usize,
    by_teacher: Vec<Vec<usize>>,
}

impl Ensemble for Votes {
    fn num_teachers(&self) -> usize {
        self.by_teacher.len()
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn predict_prefix(&self, teacher: usize, count: usize) -> Vec<usize> {
        self.by_teacher[teacher][..count].to_vec()
    }
}

fn train_teacher(
    config: &ExperimentConfig,
    prep: &Prepared,
    index: usize,
    slice: &[usize],
) -> Result<Box<dyn Classifier + Send>, NnError> {
    let xs: Vec<Tensor> = slice.iter().map(|&i| prep.private.x[i].clone()).collect();
    let ys: Vec<usize> = slice.iter().map(|&i| prep.private.y[i]).collect();
    let base = derive_seed(config.master_seed, "teacher-train", config.teacher_train.seed);
    let train = config.teacher_train.with_seed(derive_seed(base, "teacher", index as u64));
    let source = Arc::clone(&prep.source);
    Ok(match config.teacher_kind {
        TeacherKind::Prompted => Box::new(train_reteacher(
            &xs,
            &ys,
            prep.classes,
            source,
            &prep.spec,
            config.map_kind,
            &train,
        )?),
        TeacherKind::Scratch => Box::new(train_scratch(&xs, &ys, prep.classes, source.arch(), &train)?),
        TeacherKind::HeadFinetune => Box::new(train_head(&xs, &ys, prep.classes, source, &train)?),
    })
}

/// Outcome of training the ensemble and privately labelling the queries.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPhase {
    pub labeled: LabeledQueries,
    pub ledger: PrivacyLedger,
    /// Mean over teachers of their accuracy on the queries.
    pub teacher_accuracy: f64,
}

fn teacher_phase(
    config: &ExperimentConfig,
    prep: &Prepared,
    audit: Option<&mut (dyn Write + Send)>,
) -> Result<TeacherPhase, HarnessError> {
    let queries = &prep.public.x[..config.max_queries];
    let truth = &prep.public.y[..config.max_queries];
    let by_teacher = prep
        .plan
        .slices()
        .par_iter()
        .enumerate()
        .map(|(t, slice)| {
            let wrap = |source| HarnessError::PartialFailure {
                stage: "teacher",
                index: t,
                source,
            };
            let model = train_teacher(config, prep, t, slice).map_err(wrap)?;
            queries
                .iter()
                .map(|x| model.predict(x))
                .collect::<Result<Vec<_>, _>>()
                .map_err(wrap)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let teacher_accuracy = by_teacher
        .iter()
        .map(|preds| preds.iter().zip(truth).filter(|(p, y)| p == y).count() as f64 / truth.len() as f64)
        .sum::<f64>()
        / by_teacher.len() as f64;

    let mode = config.accounting.ledger_mode().unwrap_or(LedgerMode::PerStep);
    let mut ledger = PrivacyLedger::new(config.aggregator.sigma1, config.aggregator.sigma2, mode)
        .with_sensitivity(config.sensitivity);
    let votes = Votes {
        classes: prep.classes,
        by_teacher,
    };
    let labeled = label_query_pool(
        truth.len(),
        truth,
        &votes,
        &config.aggregator,
        config.max_queries,
        &mut ledger,
        derive_seed(config.master_seed, "aggregator", 0),
        audit.map(|w| w as &mut dyn Write),
    )?;
    Ok(TeacherPhase {
        labeled,
        ledger,
        teacher_accuracy,
    })
}

/// Trains the ensemble and labels the queries, skipping the student.
pub fn run_teacher_phase(config: &ExperimentConfig, options: RunOptions<'_>) -> Result<TeacherPhase, HarnessError> {
    let RunOptions { workers, audit } = options;
    with_pool(workers, move || {
        let prep = prepare(config)?;
        teacher_phase(config, &prep, audit)
    })?
}

fn student_accuracy(
    config: &ExperimentConfig,
    prep: &Prepared,
    labeled: &LabeledQueries,
    seed: u64,
) -> Result<f64, HarnessError> {
    let mut is_answered = vec![false; prep.public.x.len()];
    let answered: Vec<(Tensor, usize)> = labeled
        .answered
        .iter()
        .map(|&(q, label)| {
            is_answered[q] = true;
            (prep.public.x[q].clone(), label)
        })
        .collect();
    let unlabeled: Vec<Tensor> = prep
        .public
        .x
        .iter()
        .zip(&is_answered)
        .filter(|(_, &a)| !a)
        .map(|(x, _)| x.clone())
        .collect();
    let student_config = StudentConfig {
        train: config.student.train.with_seed(seed),
        ..config.student
    };
    let model: Box<dyn Classifier> = match config.student_kind {
        StudentKind::Prompted => Box::new(train_student(
            &answered,
            &unlabeled,
            prep.classes,
            Arc::clone(&prep.source),
            &prep.spec,
            config.map_kind,
            &student_config,
        )?),
        StudentKind::Scratch => Box::new(self_train(&answered, &unlabeled, &student_config, |xs, ys| {
            train_scratch(xs, ys, prep.classes, prep.source.arch(), &student_config.train)
        })?),
    };
    prep.source.verify()?;
    Ok(evaluate(model.as_ref(), &prep.test.x, &prep.test.y)?)
}

/// Runs the full pipeline and reports one results row.
pub fn run_experiment(config: &ExperimentConfig, options: RunOptions<'_>) -> Result<ExperimentReport, HarnessError> {
    let started = Instant::now();
    let RunOptions { workers, audit } = options;
    let mut report = with_pool(workers, move || -> Result<_, HarnessError> {
        let prep = prepare(config)?;
        let phase = teacher_phase(config, &prep, audit)?;
        let seeds: Vec<u64> = (0..config.repeats)
            .map(|r| derive_seed(config.master_seed, "student", r as u64))
            .collect();
        let accuracies = seeds
            .par_iter()
            .enumerate()
            .map(|(r, &seed)| {
                student_accuracy(config, &prep, &phase.labeled, seed).map_err(|e| match e {
                    HarnessError::Nn(source) => HarnessError::PartialFailure {
                        stage: "student repeat",
                        index: r,
                        source,
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        assemble(config, &prep, &phase, seeds, &accuracies)
    })??;
    if config.record_wall_time {
        report.wall_time_s = Some(round_to(started.elapsed().as_secs_f64(), 3));
    }
    Ok(report)
}

fn assemble(
    config: &ExperimentConfig,
    prep: &Prepared,
    phase: &TeacherPhase,
    seeds: Vec<u64>,
    accuracies: &[f64],
) -> Result<ExperimentReport, HarnessError> {
    let (epsilon, alpha_star) = match config.accounting.ledger_mode() {
        Some(_) => {
            let budget = rdp_to_dp(&phase.ledger, config.delta, &default_orders())?;
            (Some(round_to(budget.epsilon, 4)), Some(budget.alpha_star.get()))
        }
        None => (None, None),
    };
    let pct: Vec<f64> = accuracies.iter().map(|a| round_to(100.0 * a, 2)).collect();
    let (mean, std) = mean_std(&accuracies.iter().map(|a| 100.0 * a).collect::<Vec<_>>());
    let metrics = phase.labeled.metrics;
    let report = ExperimentReport {
        epsilon,
        delta: config.delta,
        alpha_star,
        queries: metrics.queries,
        answered_queries: metrics.answered_queries,
        answer_accuracy_pct: round_to(100.0 * metrics.answer_accuracy, 2),
        threshold: config.aggregator.threshold,
        sigma1: config.aggregator.sigma1,
        sigma2: config.aggregator.sigma2,
        accuracy_mean_pct: round_to(mean, 2),
        accuracy_std_pct: round_to(std, 2),
        accuracies_pct: pct,
        seeds,
        master_seed: config.master_seed,
        num_teachers: config.num_teachers,
        teacher_accuracy_mean_pct: round_to(100.0 * phase.teacher_accuracy, 2),
        teacher_kind: config.teacher_kind,
        student_kind: config.student_kind,
        map_kind: config.map_kind,
        masked: config.prompt.masked,
        rescale: config.prompt.rescale,
        accounting: config.accounting,
        ledger: phase.ledger,
        source_fingerprint: prep.source.fingerprint().to_string(),
        source_accuracy_pct: round_to(100.0 * prep.source.source_accuracy(), 2),
        sweep_axis: None,
        sweep_value: None,
        wall_time_s: None,
    };
    report.audit()?;
    Ok(report)
}

fn numeric_key(v: &Value) -> Option<Vec<f64>> {
    match v {
        Value::Number(n) => n.as_f64().map(|x| vec![x]),
        Value::Array(items) => items.iter().map(|i| i.as_f64()).collect(),
        _ => None,
    }
}

/// One report per value of `axis` (a dotted key or alias), everything else
/// held fixed. Numeric values are run in ascending order.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: &str,
    values: &[Value],
    workers: usize,
) -> Result<Vec<ExperimentReport>, HarnessError> {
    let mut values = values.to_vec();
    if let Some(keys) = values.iter().map(numeric_key).collect::<Option<Vec<_>>>() {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap_or(std::cmp::Ordering::Equal));
        values = order.into_iter().map(|i| values[i].clone()).collect();
    }
    let axis_key = resolve_alias(axis).to_string();
    let configs = values
        .iter()
        .map(|v| {
            let mut tree = base.to_value();
            set_dotted(&mut tree, &axis_key, v.clone())?;
            ExperimentConfig::from_value(tree)
        })
        .collect::<Result<Vec<_>, _>>()?;
    configs
        .iter()
        .zip(values)
        .map(|(config, value)| {
            let mut report = run_experiment(config, RunOptions::with_workers(workers))?;
            report.sweep_axis = Some(axis_key.clone());
            report.sweep_value = Some(value);
            Ok(report)
        })
        .collect()
}
