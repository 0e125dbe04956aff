//! Experiment orchestration: data and split loading, model training or
//! loading, per-subject evaluation, the personalization → upsampling
//! composition, ablations and the retrieval-size sweep.

use std::fs;
use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::BaselineError;
use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::dataset::{load_bundle, make_splits, BundleError, HrtfBundle, SplitSpec};
use crate::methods::{GraphNf, GraphNfSca, Method, Task};
use crate::metrics::{evaluate_subject, EvalReport, MetricsError};
use crate::model_p::{ModelP, Wiring};
use crate::model_u::{ModelU, SpatialStencil};
use crate::nn::Normalizer;
use crate::train::{self, Personalization, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Setup(String),
}

impl PipelineError {
    /// Process exit status: 2 for data and setup problems, 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Train(TrainError::Diverged { .. }) => 3,
            _ => 2,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|e| PipelineError::io(path, e))
}

/// Independent seed for one labelled use of the global seed (splitmix64 over
/// an FNV-1a digest of the label and index).
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes().chain(index.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Loaded data, splits and derived statistics shared by every stage.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub bundle: HrtfBundle,
    pub splits: SplitSpec,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// Magnitude normalization fitted on the training subjects.
    pub normalizer: Normalizer,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, bundle: HrtfBundle, splits: SplitSpec) -> Result<Self, PipelineError> {
        config.validate()?;
        splits.validate(&bundle)?;
        let train = splits.train_indices(&bundle);
        let validation = splits.validation_indices(&bundle);
        let test = splits.test_indices(&bundle);
        if train.is_empty() || test.is_empty() {
            return Err(PipelineError::Setup("splits need at least one training and one test subject".into()));
        }
        let rows = train.iter().flat_map(|&s| (0..bundle.direction_count()).map(move |d| (s, d)));
        let normalizer = Normalizer::fit(rows.map(|(s, d)| bundle.magnitude(s, d)));
        Ok(Self { config, bundle, splits, train, validation, test, normalizer })
    }

    /// Splits derived from the config when no split file is given.
    pub fn with_derived_splits(config: ExperimentConfig, bundle: HrtfBundle) -> Result<Self, PipelineError> {
        let d = &config.data;
        let splits = make_splits(&bundle, d.fractions, d.measurements, d.split_seed)?;
        Self::new(config, bundle, splits)
    }

    /// Reads the bundle and split file named by the config.
    pub fn load(config: ExperimentConfig) -> Result<Self, PipelineError> {
        let path = config
            .data
            .bundle
            .clone()
            .ok_or_else(|| PipelineError::Setup("no bundle given (data.bundle or --bundle)".into()))?;
        let bundle = load_bundle(&path)?;
        match &config.data.splits {
            Some(p) => {
                let splits = load_splits(p)?;
                Self::new(config, bundle, splits)
            }
            None => Self::with_derived_splits(config, bundle),
        }
    }

    pub fn measured(&self) -> &[usize] {
        &self.splits.measured
    }

    pub fn subject_id(&self, s: usize) -> &str {
        &self.bundle.subjects()[s]
    }

    /// Retrieval and clue features with retrieval size `m`.
    pub fn personalization(&self, m: usize) -> Result<Personalization, PipelineError> {
        let others: Vec<usize> = self.validation.iter().chain(&self.test).copied().collect();
        let r = &self.config.retrieval;
        Ok(Personalization::new(&self.bundle, &self.train, &others, self.measured(), r.kind, m, r.clue_feature)?)
    }

    /// Leave-one-out spatial stencils over the bundle's directions.
    pub fn stencils(&self) -> Result<Vec<SpatialStencil>, PipelineError> {
        SpatialStencil::leave_one_out(self.bundle.directions(), &self.config.graph)
            .map_err(|e| PipelineError::Setup(format!("spatial graph: {e}")))
    }

    /// Runs `f` for every test subject, on `jobs` threads, in subject order.
    pub fn per_test_subject<T: Send>(
        &self,
        f: impl Fn(usize) -> Result<T, PipelineError> + Sync,
    ) -> Result<Vec<T>, PipelineError> {
        if self.config.jobs <= 1 {
            return self.test.iter().map(|&s| f(s)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.jobs)
            .build()
            .map_err(|e| PipelineError::Setup(format!("thread pool: {e}")))?;
        pool.install(|| self.test.par_iter().map(|&s| f(s)).collect())
    }
}

pub fn load_splits(path: &Path) -> Result<SplitSpec, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Setup(format!("split file {}: {e}", path.display())))
}

pub fn save_splits(splits: &SplitSpec, path: &Path) -> Result<(), PipelineError> {
    write_file(path, serde_json::to_string_pretty(splits).expect("splits serialize"))
}

/// Trains HRTF-P from scratch with the given wiring and retrieval size.
pub fn train_p(
    exp: &Experiment,
    wiring: Wiring,
    m: usize,
) -> Result<(ModelP, Personalization, TrainLog), PipelineError> {
    let pers = exp.personalization(m)?;
    let dims = exp.config.p_dims(exp.bundle.k());
    let seed = exp.config.seed;
    let mut model =
        ModelP::new(dims, wiring, pers.setup.clone(), exp.normalizer.clone(), derive_seed(seed, "init-p", 0))
            .map_err(PipelineError::Setup)?;
    info!("training HRTF-P ({wiring:?}, M = {m}) on {} subjects", exp.train.len());
    let log = train::train_model_p(
        &mut model,
        &exp.bundle,
        &pers,
        &exp.validation,
        &exp.config.train_p,
        derive_seed(seed, "train-p", 0),
    )?;
    Ok((model, pers, log))
}

pub fn train_u(exp: &Experiment) -> Result<(ModelU, TrainLog), PipelineError> {
    let stencils = exp.stencils()?;
    let dims = exp.config.u_dims(exp.bundle.k());
    let seed = exp.config.seed;
    let mut model = ModelU::new(dims, exp.config.graph, exp.normalizer.clone(), derive_seed(seed, "init-u", 0))
        .map_err(PipelineError::Setup)?;
    info!("training HRTF-U on {} subjects", exp.train.len());
    let log = train::train_model_u(
        &mut model,
        &exp.bundle,
        &exp.train,
        &exp.validation,
        &stencils,
        &exp.config.train_u,
        derive_seed(seed, "train-u", 0),
    )?;
    Ok((model, log))
}

/// HRTF-P from the configured checkpoint, or freshly trained.
pub fn pretrained_p(exp: &Experiment) -> Result<(ModelP, Personalization), PipelineError> {
    match &exp.config.checkpoints.p {
        Some(path) => {
            let model = checkpoint::load_model_p(path)?;
            let pers = exp.personalization(model.setup.m)?;
            if pers.setup != model.setup {
                return Err(PipelineError::Setup(format!(
                    "{} was trained with a different measurement subset, retrieval or split",
                    path.display()
                )));
            }
            Ok((model, pers))
        }
        None => {
            let (model, pers, _) = train_p(exp, exp.config.wiring(), exp.config.retrieval.m)?;
            Ok((model, pers))
        }
    }
}

pub fn pretrained_u(exp: &Experiment) -> Result<ModelU, PipelineError> {
    match &exp.config.checkpoints.u {
        Some(path) => {
            let model = checkpoint::load_model_u(path)?;
            if model.spatial != exp.config.graph || model.normalizer.mean.len() != 2 * exp.bundle.k() {
                return Err(PipelineError::Setup(format!(
                    "{} does not match the configured graph or K",
                    path.display()
                )));
            }
            Ok(model)
        }
        None => Ok(train_u(exp)?.0),
    }
}

/// Predicted fields per test subject plus their evaluation.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub report: EvalReport,
    /// `(subject index, field)` in test-subject order.
    pub predictions: Vec<(usize, Vec<Vec<f64>>)>,
}

/// Predicts and scores every test subject. Personalization methods skip the
/// measured directions; upsampling methods are scored everywhere.
pub fn evaluate_method(exp: &Experiment, method: &dyn Method) -> Result<MethodRun, PipelineError> {
    let excluded: &[usize] = match method.task() {
        Task::Personalization => exp.measured(),
        Task::Upsampling => &[],
    };
    let per_subject = exp.per_test_subject(|s| {
        let field = method.predict(exp, s)?;
        let truth = exp.bundle.subject_field(s);
        let entries = evaluate_subject(exp.subject_id(s), exp.bundle.directions(), &field, &truth, excluded)?;
        Ok((s, field, entries))
    })?;
    let mut entries = Vec::new();
    let mut predictions = Vec::new();
    for (s, field, e) in per_subject {
        entries.extend(e);
        predictions.push((s, field));
    }
    let report = EvalReport::new(method.name(), exp.config.zeta, entries);
    info!("{}: mean LSD {:.4} dB, mean ILD error {:.4} dB", report.method, report.mean_lsd, report.mean_ild_err);
    Ok(MethodRun { report, predictions })
}

pub fn run_graphnf(exp: &Experiment, model: &ModelP, pers: &Personalization) -> Result<MethodRun, PipelineError> {
    evaluate_method(exp, &GraphNf::new(model.clone(), pers.clone()))
}

pub fn run_graphnf_sca(
    exp: &Experiment,
    model_p: &ModelP,
    pers: &Personalization,
    model_u: &ModelU,
) -> Result<MethodRun, PipelineError> {
    let m = GraphNfSca::new(model_p.clone(), pers.clone(), model_u.clone(), exp.stencils()?);
    evaluate_method(exp, &m)
}

/// Module-integration variants compared by the ablation runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    NoClueNoFusion,
    ClueNoFusion,
    Full,
    Sca,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoClueNoFusion, Variant::ClueNoFusion, Variant::Full, Variant::Sca];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoClueNoFusion => "no-clue-no-fusion",
            Variant::ClueNoFusion => "clue-no-fusion",
            Variant::Full => "full",
            Variant::Sca => "sca",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    fn wiring(self) -> Wiring {
        match self {
            Variant::NoClueNoFusion => Wiring::NoClueNoFusion,
            Variant::ClueNoFusion => Wiring::ClueNoFusion,
            Variant::Full | Variant::Sca => Wiring::Full,
        }
    }
}

/// One report per requested variant. Every variant trains from the same
/// seeds, so each result is independent of which others are requested.
pub fn run_ablation(exp: &Experiment, variants: &[Variant]) -> Result<Vec<(Variant, EvalReport)>, PipelineError> {
    let m = exp.config.retrieval.m;
    let mut full: Option<(ModelP, Personalization)> = None;
    let mut out = Vec::new();
    for &v in variants {
        let report = match v {
            Variant::NoClueNoFusion | Variant::ClueNoFusion => {
                let (model, pers, _) = train_p(exp, v.wiring(), m)?;
                run_graphnf(exp, &model, &pers)?.report
            }
            Variant::Full | Variant::Sca => {
                if full.is_none() {
                    let (model, pers, _) = train_p(exp, Wiring::Full, m)?;
                    full = Some((model, pers));
                }
                let (model, pers) = full.as_ref().expect("trained above");
                if v == Variant::Full {
                    run_graphnf(exp, model, pers)?.report
                } else {
                    let u = pretrained_u(exp)?;
                    run_graphnf_sca(exp, model, pers, &u)?.report
                }
            }
        };
        out.push((v, EvalReport { method: format!("ablation-{}", v.name()), ..report }));
    }
    Ok(out)
}

/// GraphNF retrained and evaluated for each retrieval size.
pub fn run_m_sweep(exp: &Experiment, ms: &[usize]) -> Result<Vec<(usize, EvalReport)>, PipelineError> {
    ms.iter()
        .map(|&m| {
            let (model, pers, _) = train_p(exp, exp.config.wiring(), m)?;
            let report = run_graphnf(exp, &model, &pers)?.report;
            Ok((m, EvalReport { method: format!("graphnf-m{m}"), ..report }))
        })
        .collect()
}

/// Writes `<stem>.csv` and `<stem>_summary.txt`.
pub fn write_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<(), PipelineError> {
    Ok(report.write(dir, stem)?)
}

pub fn write_log(log: &TrainLog, path: &Path) -> Result<(), PipelineError> {
    write_file(path, log.to_csv())
}
