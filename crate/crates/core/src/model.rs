//! Snippet classification network.
//!
//! Two same-length temporal convolutions (ReLU after each) map features to an
//! embedding `E`. Classifier, attention head and projection head all branch
//! from `E`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Baseline {
    /// Top-k pooled logits over the action classes.
    Mil,
    /// Attention-pooled probabilities with an extra background class.
    Attention,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Mil => "mil",
            Baseline::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mil" => Some(Baseline::Mil),
            "attention" => Some(Baseline::Attention),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub baseline: Baseline,
    /// Number of action classes `C`.
    pub classes: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub kernel_width: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            baseline: Baseline::Mil,
            classes: 5,
            feature_dim: 32,
            embed_dim: 32,
            proj_dim: 16,
            kernel_width: 3,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    /// Width of the classifier output: `C`, or `C + 1` with a background class.
    pub fn class_outputs(&self) -> usize {
        match self.baseline {
            Baseline::Mil => self.classes,
            Baseline::Attention => self.classes + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 {
            return Err(Error::config("classes", "need at least one class"));
        }
        if self.feature_dim < 1 || self.embed_dim < 1 || self.proj_dim < 1 {
            return Err(Error::config("d_embed", "dimensions must be positive"));
        }
        if self.proj_dim >= self.feature_dim {
            return Err(Error::config(
                "d_proj",
                format!(
                    "projection dim {} must be smaller than feature dim {}",
                    self.proj_dim, self.feature_dim
                ),
            ));
        }
        if self.kernel_width.is_multiple_of(2) {
            return Err(Error::config(
                "kernel_width",
                format!("must be odd, got {}", self.kernel_width),
            ));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::config("init_std", "must be non-negative"));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor2D>,
}

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const CLS_W: usize = 4;
const CLS_B: usize = 5;
const PROJ_W: usize = 6;
const PROJ_B: usize = 7;
const ATT_W: usize = 8;
const ATT_B: usize = 9;

impl ModelParams {
    /// Gaussian weights with `config.init_std`, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::config("init_std", format!("{e}")))?;
        let mut gauss = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Tensor2D::new(rows, cols, data).expect("positive dims")
        };
        let (kw, df, de) = (config.kernel_width, config.feature_dim, config.embed_dim);
        let mut params = Self {
            config: config.clone(),
            names: Vec::new(),
            tensors: Vec::new(),
        };
        params.push("embed.conv1.weight", gauss(kw * df, de));
        params.push("embed.conv1.bias", Tensor2D::zeros(1, de));
        params.push("embed.conv2.weight", gauss(kw * de, de));
        params.push("embed.conv2.bias", Tensor2D::zeros(1, de));
        params.push("classifier.weight", gauss(de, config.class_outputs()));
        params.push("classifier.bias", Tensor2D::zeros(1, config.class_outputs()));
        params.push("projection.weight", gauss(de, config.proj_dim));
        params.push("projection.bias", Tensor2D::zeros(1, config.proj_dim));
        if config.baseline == Baseline::Attention {
            params.push("attention.weight", gauss(de, 1));
            params.push("attention.bias", Tensor2D::zeros(1, 1));
        }
        Ok(params)
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against a fresh initialization of `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor2D)>) -> Result<Self> {
        let template = Self::init(&ModelConfig { init_std: 0.0, ..config.clone() }, 0)?;
        if named.len() != template.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, found {}",
                template.len(),
                named.len()
            )));
        }
        let mut params = Self {
            config: config.clone(),
            names: Vec::new(),
            tensors: Vec::new(),
        };
        for ((name, tensor), (want, like)) in named.into_iter().zip(template.iter()) {
            if name != want || !tensor.same_shape(like) {
                return Err(Error::Input(format!(
                    "parameter `{name}` {:?} does not match `{want}` {:?}",
                    tensor.shape(),
                    like.shape()
                )));
            }
            params.push(want, tensor);
        }
        Ok(params)
    }

    fn push(&mut self, name: &str, tensor: Tensor2D) {
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor2D] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor2D] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        let idx = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[idx])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor2D::is_finite)
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor2D::squared_norm).sum()
    }

    /// Registers every tensor on `tape` and returns their leaf ids.
    pub fn register(&self, tape: &mut Tape) -> ParamIds {
        self.register_from(tape, &self.tensors)
    }

    /// Like [`register`](Self::register) but with substitute values, which
    /// must follow this model's layout.
    pub fn register_from(&self, tape: &mut Tape, values: &[Tensor2D]) -> ParamIds {
        assert_eq!(values.len(), self.tensors.len(), "parameter count");
        ParamIds {
            ids: values.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Tape leaves for one registration of [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamIds {
    ids: Vec<NodeId>,
}

impl ParamIds {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn attention(&self) -> Option<(NodeId, NodeId)> {
        Some((*self.ids.get(ATT_W)?, *self.ids.get(ATT_B)?))
    }
}

/// Snippet-level outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Tcas {
    pub logits: NodeId,
    pub probs: NodeId,
    /// `T×1` weights in `(0, 1)`, attention baseline only.
    pub attention: Option<NodeId>,
}

/// Full forward pass of one sequence.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub embedding: NodeId,
    pub tcas: Tcas,
    /// Unit-norm projections, when requested.
    pub projection: Option<NodeId>,
}

pub fn embed(tape: &mut Tape, ids: &ParamIds, features: NodeId) -> Result<NodeId> {
    let t_len = tape.value(features).rows();
    if t_len < 2 {
        return Err(Error::shape("embed", format!("need T >= 2, got {t_len}")));
    }
    let i = ids.ids();
    let h = tape.temporal_conv(features, i[CONV1_W], i[CONV1_B])?;
    let h = tape.relu(h);
    let h = tape.temporal_conv(h, i[CONV2_W], i[CONV2_B])?;
    Ok(tape.relu(h))
}

pub fn classify(tape: &mut Tape, ids: &ParamIds, embedding: NodeId) -> Result<Tcas> {
    let i = ids.ids();
    let logits = tape.affine(embedding, i[CLS_W], i[CLS_B])?;
    let probs = tape.softmax_rows(logits);
    let attention = match ids.attention() {
        Some((w, b)) => {
            let a = tape.affine(embedding, w, b)?;
            Some(tape.sigmoid(a))
        }
        None => None,
    };
    Ok(Tcas {
        logits,
        probs,
        attention,
    })
}

pub fn project(tape: &mut Tape, ids: &ParamIds, embedding: NodeId) -> Result<NodeId> {
    let i = ids.ids();
    let z = tape.affine(embedding, i[PROJ_W], i[PROJ_B])?;
    Ok(tape.l2_normalize_rows(z))
}

pub fn forward(
    tape: &mut Tape,
    ids: &ParamIds,
    features: NodeId,
    with_projection: bool,
) -> Result<Forward> {
    let embedding = embed(tape, ids, features)?;
    let tcas = classify(tape, ids, embedding)?;
    let projection = if with_projection {
        Some(project(tape, ids, embedding)?)
    } else {
        None
    };
    Ok(Forward {
        embedding,
        tcas,
        projection,
    })
}

/// Plain evaluation of a sequence: probabilities, logits and attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub logits: Tensor2D,
    pub probs: Tensor2D,
    pub attention: Option<Vec<f64>>,
}

pub fn evaluate(params: &ModelParams, features: &Tensor2D) -> Result<Snapshot> {
    if features.cols() != params.config.feature_dim {
        return Err(Error::shape(
            "evaluate",
            format!(
                "features have {} channels, model expects {}",
                features.cols(),
                params.config.feature_dim
            ),
        ));
    }
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let x = tape.leaf(features.clone());
    let fwd = forward(&mut tape, &ids, x, false)?;
    Ok(Snapshot {
        logits: tape.value(fwd.tcas.logits).clone(),
        probs: tape.value(fwd.tcas.probs).clone(),
        attention: fwd.tcas.attention.map(|a| tape.value(a).data().to_vec()),
    })
}
