//! Evaluation methods behind one trait, selectable by name.

use crate::baselines::{self, SparseField};
use crate::features::{FeatureKind, Measurements};
use crate::model_p::ModelP;
use crate::model_u::{ModelU, SpatialStencil};
use crate::pipeline::{derive_seed, pretrained_p, pretrained_u, Experiment, PipelineError};
use crate::train::{finetune_model_u, Personalization};

/// Which protocol a method is scored under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Full field from the sparse measurement subset; measured directions
    /// are inputs and are not scored.
    Personalization,
    /// Each direction predicted from the subject's true spectra at all other
    /// directions.
    Upsampling,
}

pub trait Method: Send + Sync {
    fn name(&self) -> &str;

    fn task(&self) -> Task {
        Task::Personalization
    }

    /// Predicted dB field of test subject `subject` over every bundle direction.
    fn predict(&self, exp: &Experiment, subject: usize) -> Result<Vec<Vec<f64>>, PipelineError>;
}

pub struct GraphNf {
    pub model: ModelP,
    pub pers: Personalization,
}

impl GraphNf {
    pub fn new(model: ModelP, pers: Personalization) -> Self {
        Self { model, pers }
    }
}

impl Method for GraphNf {
    fn name(&self) -> &str {
        "graphnf"
    }

    fn predict(&self, exp: &Experiment, subject: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
        Ok(self.pers.predict_field(&self.model, &exp.bundle, subject)?)
    }
}

/// Personalized field refined by the upsampling network after its head is
/// fine-tuned on that field and the subject's measurements.
pub struct GraphNfSca {
    pub p: GraphNf,
    pub u: ModelU,
    pub stencils: Vec<SpatialStencil>,
}

impl GraphNfSca {
    pub fn new(model: ModelP, pers: Personalization, u: ModelU, stencils: Vec<SpatialStencil>) -> Self {
        Self { p: GraphNf::new(model, pers), u, stencils }
    }

    /// Fine-tuned upsampler for one subject, with its predictions.
    pub fn adapt(&self, exp: &Experiment, subject: usize) -> Result<crate::train::Finetuned, PipelineError> {
        let field = self.p.predict(exp, subject)?;
        let measured: Vec<(usize, Vec<f64>)> =
            exp.measured().iter().map(|&d| (d, exp.bundle.magnitude(subject, d).to_vec())).collect();
        let seed = derive_seed(exp.config.seed, "finetune", subject as u64);
        Ok(finetune_model_u(&self.u, &field, &measured, &self.stencils, &exp.config.finetune, seed)?)
    }
}

impl Method for GraphNfSca {
    fn name(&self) -> &str {
        "graphnf-sca"
    }

    fn predict(&self, exp: &Experiment, subject: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
        Ok(self.adapt(exp, subject)?.predictions)
    }
}

pub struct NearestNeighbor;

impl Method for NearestNeighbor {
    fn name(&self) -> &str {
        "nn"
    }

    fn predict(&self, exp: &Experiment, subject: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
        let field = SparseField::from_bundle(&exp.bundle, subject, exp.measured());
        exp.bundle.directions().iter().map(|&d| Ok(baselines::nearest_neighbor(&field, d)?)).collect()
    }
}

/// Whole field of the best-matching training subject.
pub struct Selection {
    pub kind: FeatureKind,
}

impl Method for Selection {
    fn name(&self) -> &str {
        match self.kind {
            FeatureKind::Lsd => "sel-lsd",
            FeatureKind::Itd => "sel-itd",
            FeatureKind::Ild => "sel-ild",
        }
    }

    fn predict(&self, exp: &Experiment, subject: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
        let target = Measurements::from_bundle(&exp.bundle, subject, exp.measured());
        let best = baselines::hrtf_selection(&exp.bundle, &target, &exp.train, self.kind)?;
        Ok(exp.bundle.subject_field(best))
    }
}

pub struct LinearInterp;

impl Method for LinearInterp {
    fn name(&self) -> &str {
        "lininterp"
    }

    fn task(&self) -> Task {
        Task::Upsampling
    }

    fn predict(&self, exp: &Experiment, subject: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
        let n = exp.bundle.direction_count();
        (0..n)
            .map(|d| {
                let others: Vec<usize> = (0..n).filter(|&i| i != d).collect();
                let field = SparseField::from_bundle(&exp.bundle, subject, &others);
                Ok(baselines::linear_interp(&field, exp.bundle.directions()[d])?)
            })
            .collect()
    }
}

/// Pre-trained upsampler on the subject's true field, one held-out
/// direction at a time.
pub struct Upsampler {
    pub model: ModelU,
    pub stencils: Vec<SpatialStencil>,
}

impl Method for Upsampler {
    fn name(&self) -> &str {
        "hrtf-u"
    }

    fn task(&self) -> Task {
        Task::Upsampling
    }

    fn predict(&self, exp: &Experiment, subject: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
        let field = exp.bundle.subject_field(subject);
        let features = self.model.field_features(&field, &self.stencils).map_err(crate::train::TrainError::from)?;
        features
            .iter()
            .map(|f| Ok(self.model.predict_from_feature(f).map_err(crate::train::TrainError::from)?))
            .collect()
    }
}

type Builder = fn(&Experiment) -> Result<Box<dyn Method>, PipelineError>;

pub struct MethodEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub build: Builder,
}

fn build_graphnf(exp: &Experiment) -> Result<Box<dyn Method>, PipelineError> {
    let (model, pers) = pretrained_p(exp)?;
    Ok(Box::new(GraphNf::new(model, pers)))
}

fn build_sca(exp: &Experiment) -> Result<Box<dyn Method>, PipelineError> {
    let (model, pers) = pretrained_p(exp)?;
    let u = pretrained_u(exp)?;
    Ok(Box::new(GraphNfSca::new(model, pers, u, exp.stencils()?)))
}

fn build_upsampler(exp: &Experiment) -> Result<Box<dyn Method>, PipelineError> {
    Ok(Box::new(Upsampler { model: pretrained_u(exp)?, stencils: exp.stencils()? }))
}

const REGISTRY: &[MethodEntry] = &[
    MethodEntry { name: "graphnf", summary: "personalization network alone", build: build_graphnf },
    MethodEntry {
        name: "graphnf-sca",
        summary: "personalization refined by the fine-tuned upsampler",
        build: build_sca,
    },
    MethodEntry {
        name: "nn",
        summary: "nearest measured direction of the target",
        build: |_| Ok(Box::new(NearestNeighbor)),
    },
    MethodEntry {
        name: "sel-lsd",
        summary: "training subject with the lowest spectral distance",
        build: |_| Ok(Box::new(Selection { kind: FeatureKind::Lsd })),
    },
    MethodEntry {
        name: "sel-itd",
        summary: "training subject with the closest ITDs",
        build: |_| Ok(Box::new(Selection { kind: FeatureKind::Itd })),
    },
    MethodEntry {
        name: "sel-ild",
        summary: "training subject with the closest ILDs",
        build: |_| Ok(Box::new(Selection { kind: FeatureKind::Ild })),
    },
    MethodEntry {
        name: "lininterp",
        summary: "two-point interpolation (upsampling task)",
        build: |_| Ok(Box::new(LinearInterp)),
    },
    MethodEntry { name: "hrtf-u", summary: "pre-trained upsampler (upsampling task)", build: build_upsampler },
];

pub fn registry() -> &'static [MethodEntry] {
    REGISTRY
}

pub fn method_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|e| e.name).collect()
}

pub fn build_method(name: &str, exp: &Experiment) -> Result<Box<dyn Method>, PipelineError> {
    let entry = REGISTRY.iter().find(|e| e.name == name).ok_or_else(|| {
        PipelineError::Setup(format!("unknown method `{name}`; expected one of {}", method_names().join(", ")))
    })?;
    (entry.build)(exp)
}
