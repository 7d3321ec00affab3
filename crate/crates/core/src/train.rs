//! Relation model, Adam, the training loop, evaluation and checkpoints.
//!
//! A scene is processed on its own tape: the graph layer refines every
//! object feature, each annotated pair is fused with its union feature, and
//! the fused vector feeds either the Gaussian head (PUM) or the classifier
//! directly (deterministic baseline). Gradients of the scenes in a batch are
//! summed in scene order, so results do not depend on scheduling.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, NodeId, Tape};
use crate::data::{DatasetSplit, SyntheticScene};
use crate::error::{Error, Result};
use crate::layers::{
    BoundParameters, ClassifierParams, ClassifierVars, FusionParams, FusionVars, Neighborhood, Parameters,
    ResCAGCNDims, ResCAGCNParams, ResCAGCNVars,
};
use crate::loss::{cross_entropy_traced, draw_noise, relation_loss_traced, LossConfig};
use crate::metrics::{MetricsReport, PredictionRun, RankedPrediction};
use crate::pum::{predict_averaged, predict_stochastic_once, GaussianParams, PumHeadParams, PumHeadVars,
    DEFAULT_VARIANCE_FLOOR};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u64 = 1;

// Stream indices derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = |p: &&Tensor| Tensor::zeros(p.shape());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, hyper: &AdamConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape {
            op: "adam",
            detail: format!(
                "{n} parameters, {} gradients, {} moment tensors",
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam",
                detail: format!("parameter {i} has shape {:?}, gradient {:?}", p.shape(), g.shape()),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * gk;
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Object feature width.
    pub feature: usize,
    /// Union feature width.
    pub union: usize,
    pub ca: usize,
    pub message: usize,
    pub hidden: usize,
    /// Width of the fused relation feature.
    pub fused: usize,
    /// Width of the Gaussian embedding.
    pub latent: usize,
    pub num_classes: usize,
}

impl ModelDims {
    /// Defaults for features of width `d`.
    pub fn for_features(d: usize, num_classes: usize) -> Self {
        let inner = (d / 2).max(4);
        Self {
            feature: d,
            union: d,
            ca: inner,
            message: inner,
            hidden: inner,
            fused: d,
            latent: d,
            num_classes,
        }
    }

    fn rescagcn(&self) -> ResCAGCNDims {
        ResCAGCNDims {
            feature: self.feature,
            union: self.union,
            ca: self.ca,
            message: self.message,
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    /// Train the Monte-Carlo branch only (`λ = 1`).
    pub without_deterministic_loss: bool,
    /// Drop the entropy margin (`α = 0`).
    pub without_regularizer: bool,
    /// Classify the fused feature directly with plain cross-entropy.
    pub without_pum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub loss: LossConfig,
    pub dims: ModelDims,
    pub variance_floor: f64,
    /// Samples averaged by the PUM model at validation time.
    pub inference_k: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl TrainConfig {
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        Self {
            batch_size: 8,
            adam: AdamConfig::default(),
            epochs: 60,
            loss: LossConfig::for_dim(dims.latent),
            dims,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            inference_k: 8,
            seed,
            ablation: Ablation::default(),
        }
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss;
        if self.ablation.without_deterministic_loss {
            l.lambda = 1.0;
        }
        if self.ablation.without_regularizer {
            l.alpha = 0.0;
        }
        l
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if !(a.lr > 0.0) || !(a.eps > 0.0) {
            return Err(Error::Config("Adam lr and eps must be positive".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config("variance floor must be positive".into()));
        }
        if self.inference_k == 0 {
            return Err(Error::Config("inference K must be at least 1".into()));
        }
        let d = &self.dims;
        if [d.feature, d.union, d.ca, d.message, d.hidden, d.fused, d.latent].contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if d.num_classes < 2 {
            return Err(Error::Config("need at least two predicate classes".into()));
        }
        self.effective_loss().validate()
    }
}

/// All parameter blocks of the relation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationModel {
    pub gcn: ResCAGCNParams,
    /// `x̂_i ⋄ x̂_j`
    pub pair_fusion: FusionParams,
    /// `(x̂_i ⋄ x̂_j) ⋄ u_ij`
    pub union_fusion: FusionParams,
    /// Absent for the deterministic baseline.
    pub head: Option<PumHeadParams>,
    pub classifier: ClassifierParams,
}

struct BoundModel {
    gcn: ResCAGCNVars,
    pair_fusion: FusionVars,
    union_fusion: FusionVars,
    head: Option<PumHeadVars>,
    classifier: ClassifierVars,
}

impl BoundModel {
    fn nodes(&self) -> Vec<NodeId> {
        let mut v = self.gcn.nodes();
        v.extend(self.pair_fusion.nodes());
        v.extend(self.union_fusion.nodes());
        if let Some(h) = &self.head {
            v.extend(h.nodes());
        }
        v.extend(self.classifier.nodes());
        v
    }
}

/// Output of one relation on a scene tape.
enum RelationOutput {
    Gaussian { mu: NodeId, sigma2: NodeId },
    Probs(NodeId),
}

impl RelationModel {
    pub fn init(dims: &ModelDims, with_pum: bool, variance_floor: f64, rng: &mut RngState) -> Self {
        let gcn = ResCAGCNParams::init(dims.rescagcn(), rng);
        let pair_fusion = FusionParams::init(dims.feature, dims.feature, dims.fused, rng);
        let union_fusion = FusionParams::init(dims.fused, dims.union, dims.fused, rng);
        let (head, cls_in) = if with_pum {
            (Some(PumHeadParams::init(dims.fused, dims.latent, variance_floor, rng)), dims.latent)
        } else {
            (None, dims.fused)
        };
        let classifier = ClassifierParams::init(cls_in, dims.num_classes, rng);
        Self {
            gcn,
            pair_fusion,
            union_fusion,
            head,
            classifier,
        }
    }

    pub fn has_pum(&self) -> bool {
        self.head.is_some()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            gcn: self.gcn.bind(tape),
            pair_fusion: self.pair_fusion.bind(tape),
            union_fusion: self.union_fusion.bind(tape),
            head: self.head.as_ref().map(|h| h.bind(tape)),
            classifier: self.classifier.bind(tape),
        }
    }

    /// Mean training loss of `scene` with every parameter read from `nodes`
    /// (in [`Parameters::tensors`] order). Noise comes from `noise_seed`.
    pub fn scene_loss_at(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        scene: &SyntheticScene,
        loss: &LossConfig,
        noise_seed: u64,
    ) -> Result<NodeId> {
        if nodes.len() != self.tensors().len() {
            return Err(Error::Shape {
                op: "attach",
                detail: format!("{} parameter tensors, {} nodes", self.tensors().len(), nodes.len()),
            });
        }
        let mut rest = nodes;
        let mut split = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        let vars = BoundModel {
            gcn: self.gcn.attach(tape, split(self.gcn.tensors().len()))?,
            pair_fusion: self.pair_fusion.attach(tape, split(self.pair_fusion.tensors().len()))?,
            union_fusion: self.union_fusion.attach(tape, split(self.union_fusion.tensors().len()))?,
            head: match &self.head {
                Some(h) => Some(h.attach(tape, split(h.tensors().len()))?),
                None => None,
            },
            classifier: self.classifier.attach(tape, split(self.classifier.tensors().len()))?,
        };
        let (total, _) = self.scene_loss_traced(tape, &vars, scene, loss, &mut RngState::seed(noise_seed))?;
        tape.scale_by(1.0 / scene.relations.len().max(1) as f64, total)
    }

    /// Sum of relation losses in `scene` and the summed entropy.
    fn scene_loss_traced(
        &self,
        tape: &mut Tape,
        vars: &BoundModel,
        scene: &SyntheticScene,
        loss: &LossConfig,
        noise_rng: &mut RngState,
    ) -> Result<(NodeId, f64)> {
        if scene.relations.is_empty() {
            return Err(Error::Contract("scene has no relations".into()));
        }
        let outputs = self.forward_scene(tape, vars, scene)?;
        let mut total: Option<NodeId> = None;
        let mut entropy_sum = 0.0;
        for (out, rel) in outputs.into_iter().zip(&scene.relations) {
            let term = match out {
                RelationOutput::Gaussian { mu, sigma2 } => {
                    let dim = tape.value(mu).len();
                    let noise = draw_noise(noise_rng, loss.n_train_samples, dim);
                    let l = relation_loss_traced(tape, mu, sigma2, &vars.classifier, rel.observed, loss, &noise)?;
                    entropy_sum += tape.value(l.entropy).data()[0];
                    l.total
                }
                RelationOutput::Probs(p) => cross_entropy_traced(tape, p, rel.observed)?,
            };
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        Ok((total.expect("scene has relations"), entropy_sum))
    }

    fn check_scene(&self, scene: &SyntheticScene) -> Result<()> {
        let d = self.gcn.dims();
        let bad = |what: &str, got: usize, want: usize| {
            Err(Error::Shape {
                op: "scene",
                detail: format!("{what} width {got}, model expects {want}"),
            })
        };
        for x in &scene.object_features {
            if x.len() != d.feature {
                return bad("object feature", x.len(), d.feature);
            }
        }
        for u in scene.union_features.values() {
            if u.len() != d.union {
                return bad("union feature", u.len(), d.union);
            }
        }
        for r in &scene.relations {
            if r.observed >= self.num_classes() {
                return Err(Error::Contract(format!(
                    "label {} out of range for {} classes",
                    r.observed,
                    self.num_classes()
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass of every relation in `scene`.
    fn forward_scene(&self, tape: &mut Tape, vars: &BoundModel, scene: &SyntheticScene) -> Result<Vec<RelationOutput>> {
        self.check_scene(scene)?;
        let xs: Vec<NodeId> = scene.object_features.iter().map(|x| tape.leaf(x.clone())).collect();
        let unions: HashMap<(usize, usize), NodeId> = scene
            .union_features
            .iter()
            .map(|(&k, u)| (k, tape.leaf(u.clone())))
            .collect();
        let refined = vars.gcn.update(tape, &xs, &unions, &Neighborhood::Full)?;
        scene
            .relations
            .iter()
            .map(|r| {
                let pair = vars.pair_fusion.forward(tape, refined[r.subject], refined[r.object])?;
                let e = vars.union_fusion.forward(tape, pair, unions[&(r.subject, r.object)])?;
                Ok(match &vars.head {
                    Some(h) => {
                        let (mu, sigma2) = h.forward(tape, e)?;
                        RelationOutput::Gaussian { mu, sigma2 }
                    }
                    None => RelationOutput::Probs(vars.classifier.forward(tape, e)?),
                })
            })
            .collect()
    }

    /// Class probabilities of every relation in `scene` under `mode`.
    ///
    /// `rng` supplies the sampling noise in relation order.
    pub fn predict_scene(&self, scene: &SyntheticScene, mode: InferenceMode, rng: &mut RngState) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let outputs = self.forward_scene(&mut tape, &vars, scene)?;
        outputs
            .into_iter()
            .map(|out| match out {
                RelationOutput::Probs(p) => Ok(tape.value(p).clone()),
                RelationOutput::Gaussian { mu, sigma2 } => {
                    let g = GaussianParams::new(tape.value(mu).clone(), tape.value(sigma2).clone())?;
                    match mode {
                        InferenceMode::Deterministic => crate::pum::predict_deterministic(&g, &self.classifier),
                        InferenceMode::Averaged(k) => predict_averaged(&g, &self.classifier, k, rng),
                        InferenceMode::SingleSample => predict_stochastic_once(&g, &self.classifier, rng),
                    }
                }
            })
            .collect()
    }

    /// Gaussian embeddings of every relation; empty for the baseline.
    pub fn embed_scene(&self, scene: &SyntheticScene) -> Result<Vec<GaussianParams>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let outputs = self.forward_scene(&mut tape, &vars, scene)?;
        outputs
            .into_iter()
            .filter_map(|out| match out {
                RelationOutput::Gaussian { mu, sigma2 } => {
                    Some(GaussianParams::new(tape.value(mu).clone(), tape.value(sigma2).clone()))
                }
                RelationOutput::Probs(_) => None,
            })
            .collect()
    }
}

impl Parameters for RelationModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.gcn.tensors();
        v.extend(self.pair_fusion.tensors());
        v.extend(self.union_fusion.tensors());
        if let Some(h) = &self.head {
            v.extend(h.tensors());
        }
        v.extend(self.classifier.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.gcn.tensors_mut();
        v.extend(self.pair_fusion.tensors_mut());
        v.extend(self.union_fusion.tensors_mut());
        if let Some(h) = &mut self.head {
            v.extend(h.tensors_mut());
        }
        v.extend(self.classifier.tensors_mut());
        v
    }
}

/// How a PUM model turns its Gaussian into class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// `classify(mu)`
    Deterministic,
    /// Mean of `K` sampled predictions.
    Averaged(usize),
    /// One sampled prediction.
    SingleSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-relation training loss.
    pub loss: f64,
    /// Mean differential entropy of the training embeddings; `None` without PUM.
    pub mean_entropy: Option<f64>,
    pub val_recall_at_1: Option<f64>,
    pub val_mean_recall_at_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub model: RelationModel,
    pub history: Vec<EpochRecord>,
}

impl TrainedModel {
    /// `epoch,loss,mean_entropy,val_R@1,val_mR@1`; missing values are empty.
    pub fn history_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,loss,mean_entropy,val_R@1,val_mR@1\n");
        for r in &self.history {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.loss,
                opt(r.mean_entropy),
                opt(r.val_recall_at_1),
                opt(r.val_mean_recall_at_1)
            );
        }
        out
    }
}

struct SceneTerms {
    loss_sum: f64,
    entropy_sum: f64,
    relations: usize,
    grads: GradientMap,
    nodes: Vec<NodeId>,
}

fn nan_error(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Numeric { node, op } => Error::NanLoss {
            epoch,
            batch,
            term: format!("{op} at node {node}"),
        },
        other => other,
    }
}

fn scene_gradients(
    model: &RelationModel,
    scene: &SyntheticScene,
    loss: &LossConfig,
    batch_relations: usize,
    noise_rng: &mut RngState,
) -> Result<SceneTerms> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let (total, entropy_sum) = model.scene_loss_traced(&mut tape, &vars, scene, loss, noise_rng)?;
    let loss_sum = tape.value(total).data()[0];
    let root = tape.scale_by(1.0 / batch_relations as f64, total)?;
    let nodes = vars.nodes();
    let grads = tape.backward(root, &nodes)?;
    Ok(SceneTerms {
        loss_sum,
        entropy_sum,
        relations: scene.relations.len(),
        grads,
        nodes,
    })
}

/// Validation R@1 and mR@1 with the model's default inference mode.
fn validation_metrics(model: &RelationModel, cfg: &TrainConfig, scenes: &[SyntheticScene]) -> Result<(Option<f64>, Option<f64>)> {
    if scenes.is_empty() {
        return Ok((None, None));
    }
    let mode = if model.has_pum() {
        EvalMode::Averaged { k: cfg.inference_k }
    } else {
        EvalMode::Deterministic
    };
    let report = evaluate(model, scenes, mode, &EvalOptions::new(cfg.seed))?;
    Ok((report.recall_at.get(&1).copied(), report.mean_recall_at.get(&1).copied()))
}

/// Trains a fresh model on `data.train`, validating on `data.validation`
/// after every epoch.
pub fn train(cfg: &TrainConfig, data: &DatasetSplit) -> Result<TrainedModel> {
    train_with_observer(cfg, data, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with_observer(
    cfg: &TrainConfig,
    data: &DatasetSplit,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.vocabulary.num_classes() != cfg.dims.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes, dataset {}",
            cfg.dims.num_classes,
            data.vocabulary.num_classes()
        )));
    }
    let loss = cfg.effective_loss();
    let mut model = RelationModel::init(
        &cfg.dims,
        !cfg.ablation.without_pum,
        cfg.variance_floor,
        &mut RngState::stream(cfg.seed, STREAM_INIT),
    );
    let mut adam = AdamState::new(&model.tensors());
    let mut shuffle_rng = RngState::stream(cfg.seed, STREAM_SHUFFLE);
    let mut noise_rng = RngState::stream(cfg.seed, STREAM_NOISE);
    let mut history = Vec::with_capacity(cfg.epochs);

    let usable: Vec<usize> = (0..data.train.len())
        .filter(|&i| !data.train[i].relations.is_empty())
        .collect();

    for epoch in 0..cfg.epochs {
        let mut order = usable.clone();
        shuffle_rng.shuffle(&mut order);
        let (mut loss_sum, mut entropy_sum, mut count) = (0.0, 0.0, 0usize);

        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_relations: usize = chunk.iter().map(|&i| data.train[i].relations.len()).sum();
            let mut grads: Vec<Tensor> = model.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for &i in chunk {
                let mut terms = scene_gradients(&model, &data.train[i], &loss, batch_relations, &mut noise_rng)
                    .map_err(|e| nan_error(epoch, batch, e))?;
                for (acc, node) in grads.iter_mut().zip(&terms.nodes) {
                    let g = terms.grads.remove(*node).expect("gradient for every parameter");
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                loss_sum += terms.loss_sum;
                entropy_sum += terms.entropy_sum;
                count += terms.relations;
            }
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::NanLoss {
                    epoch,
                    batch,
                    term: format!("gradient of parameter tensor {bad}"),
                });
            }
            let mut params = model.tensors_mut();
            adam_step(&mut params, &grads, &mut adam, &cfg.adam)?;
        }

        let (val_r, val_mr) = validation_metrics(&model, cfg, &data.validation)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: if count > 0 { loss_sum / count as f64 } else { 0.0 },
            mean_entropy: (model.has_pum() && count > 0).then(|| entropy_sum / count as f64),
            val_recall_at_1: val_r,
            val_mean_recall_at_1: val_mr,
        };
        observer(&record);
        history.push(record);
    }

    Ok(TrainedModel {
        config: cfg.clone(),
        model,
        history,
    })
}

/// Evaluation-time inference protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum EvalMode {
    Deterministic,
    /// Average of `k` sampled predictions per relation.
    Averaged { k: usize },
    /// `m` independent single-sample passes, feeding oracle recall.
    Stochastic { m: usize },
}

impl EvalMode {
    /// Builds a mode from command-line style arguments, rejecting
    /// combinations such as `M > 1` with deterministic inference.
    pub fn from_parts(mode: &str, k: Option<usize>, m: Option<usize>) -> Result<Self> {
        let usage = |msg: String| Err(Error::Config(msg));
        match mode {
            "det" | "deterministic" => {
                if m.is_some_and(|m| m > 1) {
                    return usage("deterministic mode takes no --m > 1".into());
                }
                if k.is_some_and(|k| k > 1) {
                    return usage("deterministic mode takes no --k > 1".into());
                }
                Ok(Self::Deterministic)
            }
            "avg" | "averaged" => {
                if m.is_some_and(|m| m > 1) {
                    return usage("averaged mode takes no --m > 1".into());
                }
                match k.unwrap_or(8) {
                    0 => usage("--k must be at least 1".into()),
                    k => Ok(Self::Averaged { k }),
                }
            }
            "stoch" | "stochastic" => {
                if k.is_some_and(|k| k > 1) {
                    return usage("stochastic mode takes no --k > 1".into());
                }
                match m.unwrap_or(1) {
                    0 => usage("--m must be at least 1".into()),
                    m => Ok(Self::Stochastic { m }),
                }
            }
            other => usage(format!("unknown mode '{other}', expected det, avg or stoch")),
        }
    }

    pub fn runs(&self) -> usize {
        match self {
            Self::Stochastic { m } => *m,
            _ => 1,
        }
    }

    fn inference(&self) -> InferenceMode {
        match self {
            Self::Deterministic => InferenceMode::Deterministic,
            Self::Averaged { k } => InferenceMode::Averaged(*k),
            Self::Stochastic { .. } => InferenceMode::SingleSample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub seed: u64,
    /// K values for R@K and mR@K.
    pub ks: Vec<usize>,
    /// K used to match each run in oracle recall.
    pub oracle_k: usize,
}

impl EvalOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ks: vec![1, 5, 10],
            oracle_k: 1,
        }
    }
}

/// Runs `runs` inference passes over `scenes`. Pass `m` draws its noise
/// from stream `m` of `seed`, consumed in scene and relation order.
pub fn predict_runs(
    model: &RelationModel,
    scenes: &[SyntheticScene],
    mode: InferenceMode,
    runs: usize,
    seed: u64,
) -> Result<Vec<PredictionRun>> {
    (0..runs)
        .map(|m| {
            let mut rng = RngState::stream(seed, m as u64);
            let images = scenes
                .iter()
                .map(|s| {
                    Ok(model
                        .predict_scene(s, mode, &mut rng)?
                        .iter()
                        .map(|p| RankedPrediction::from_scores(p.data(), None))
                        .collect())
                })
                .collect::<Result<_>>()?;
            Ok(PredictionRun { run_index: m, images })
        })
        .collect()
}

/// Ground truth (annotated labels) grouped by scene.
pub fn ground_truth(scenes: &[SyntheticScene]) -> Vec<Vec<usize>> {
    scenes
        .iter()
        .map(|s| s.relations.iter().map(|r| r.observed).collect())
        .collect()
}

pub fn evaluate(model: &RelationModel, scenes: &[SyntheticScene], mode: EvalMode, opts: &EvalOptions) -> Result<MetricsReport> {
    let runs = predict_runs(model, scenes, mode.inference(), mode.runs(), opts.seed)?;
    MetricsReport::build(&runs, &ground_truth(scenes), &opts.ks, opts.oracle_k)
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    version: u64,
    #[serde(flatten)]
    trained: &'a TrainedModel,
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&CheckpointRef {
        version: CHECKPOINT_VERSION,
        trained: model,
    })?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "checkpoint has no version".into(),
        })?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let model: TrainedModel = serde_json::from_value(raw).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if model.model.tensors().len() != RelationModel::init(
        &model.config.dims,
        model.model.has_pum(),
        model.config.variance_floor,
        &mut RngState::seed(0),
    )
    .tensors()
    .len()
    {
        return Err(Error::Contract("checkpoint parameter layout does not match its config".into()));
    }
    Ok(model)
}
