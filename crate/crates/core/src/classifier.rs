//! Transfer-learning classifier: backbone, global average pooling, three
//! dense layers with dropout, softmax over the six classes.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneEntry, Normalization};
use crate::dataset::{self, DatasetError, DatasetSplits, ImageSet, ImageTensor};
use crate::labels::{argmax, ClassLabel, NUM_CLASSES};
use crate::nn::{Activation, Adam, Graph, Mode, NodeId, Op, Shape, Tensor};
use crate::scalar::{Dtype, Scalar};
use crate::weights::{self, WeightsError};

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("pretrained weights for `{backbone}` not found at {path}")]
    WeightsUnavailable { backbone: String, path: PathBuf },
    #[error("invalid head configuration: {0}")]
    InvalidHead(String),
    #[error("invalid training configuration: {0}")]
    InvalidTrainConfig(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("loss became non-finite at epoch {epoch}, step {step}; lower the learning rate")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("input tensor is {found:?}, model expects {expected:?}")]
    ShapeMismatch { expected: (usize, usize, usize), found: (usize, usize, usize) },
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ClassifierError + '_ {
    move |source| ClassifierError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
    Relu6,
}

impl From<HiddenActivation> for Activation {
    fn from(a: HiddenActivation) -> Self {
        match a {
            HiddenActivation::Relu => Activation::Relu,
            HiddenActivation::Relu6 => Activation::Relu6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub dense_widths: [usize; 3],
    pub dropout_rate: f64,
    pub hidden_activation: HiddenActivation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { dense_widths: [512, 128, NUM_CLASSES], dropout_rate: 0.5, hidden_activation: HiddenActivation::Relu }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let [w1, w2, w3] = self.dense_widths;
        if w3 != NUM_CLASSES {
            return Err(ClassifierError::InvalidHead(format!("final dense width must be {NUM_CLASSES}, got {w3}")));
        }
        if w1 == 0 || w2 == 0 {
            return Err(ClassifierError::InvalidHead("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ClassifierError::InvalidHead(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub fine_tune_backbone: bool,
    pub seed: u64,
    /// Random horizontal flips of training images.
    pub augment_flip: bool,
    /// Images per forward/backward pass; gradients are accumulated over a
    /// batch. Only affects memory, not the result.
    pub micro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 20,
            early_stop_patience: 5,
            fine_tune_backbone: true,
            seed: 42,
            augment_flip: false,
            micro_batch: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::InvalidTrainConfig(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.micro_batch == 0 {
            return bad("micro_batch must be at least 1");
        }
        Ok(())
    }
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightsSource {
    /// Directory holding `<backbone_id>.safetensors`.
    Pretrained(PathBuf),
    /// He-initialized backbone; batch-norm statistics are calibrated on the
    /// first training batch.
    Random,
}

impl WeightsSource {
    pub fn file_for(dir: &Path, backbone_id: &str) -> PathBuf {
        dir.join(format!("{backbone_id}.safetensors"))
    }
}

impl fmt::Display for WeightsSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightsSource::Pretrained(dir) => write!(f, "pretrained:{}", dir.display()),
            WeightsSource::Random => f.write_str("random"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// `epoch,train_loss,train_acc,val_loss,val_acc`; validation cells are
    /// empty when no validation split was used.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(HISTORY_HEADER).expect("in-memory csv");
        for e in &self.epochs {
            w.serialize(e).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    /// Epoch rows only; `best_epoch` and `stopped_early` are not in the CSV.
    pub fn from_csv(text: &str) -> Result<Self, csv::Error> {
        let epochs = csv::Reader::from_reader(text.as_bytes()).deserialize().collect::<Result<_, _>>()?;
        Ok(Self { epochs, best_epoch: None, stopped_early: false })
    }
}

pub const HISTORY_HEADER: [&str; 5] = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"];

/// Softmax output in canonical class order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probabilities<T>(pub [T; NUM_CLASSES]);

impl<T: Scalar> Probabilities<T> {
    /// Numerically stable softmax, accumulated in `f64`.
    pub fn from_logits(logits: &[T]) -> Self {
        assert_eq!(logits.len(), NUM_CLASSES);
        let z: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        Self(std::array::from_fn(|i| T::from_f64_lossy(e[i] / sum)))
    }

    pub fn label(&self) -> ClassLabel {
        ClassLabel::from_index(argmax(&self.0)).expect("six classes")
    }

    pub fn confidence(&self) -> T {
        self.0[argmax(&self.0)]
    }

    pub fn to_f64(&self) -> [f64; NUM_CLASSES] {
        self.0.map(|v| v.to_f64_lossy())
    }

    pub fn sum(&self) -> f64 {
        self.to_f64().iter().sum()
    }
}

/// Serializable description of a model: enough to rebuild its graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub backbone_id: String,
    pub head: HeadConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub head: usize,
    pub total: usize,
    pub trainable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone_id: String,
    pub head: HeadConfig,
    pub input_size: [usize; 2],
    pub normalization: Normalization,
    pub labels: Vec<String>,
    pub dtype: Dtype,
    pub weights_origin: String,
    pub history: History,
    pub saved_at: chrono::DateTime<chrono::Utc>,
}

pub const CHECKPOINT_WEIGHTS: &str = "weights.safetensors";
pub const CHECKPOINT_META: &str = "model.json";

/// Backbone plus classification head. The graph's output is the logit
/// vector; softmax is applied by [`Classifier::predict`].
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    spec: ClassifierSpec,
    entry: &'static BackboneEntry,
    graph: Graph<T>,
    feature_node: NodeId,
    pooled_node: NodeId,
    weights_origin: String,
    needs_calibration: bool,
    history: History,
}

pub fn build_classifier<T: Scalar>(
    backbone_id: &str,
    head: HeadConfig,
    source: &WeightsSource,
    seed: u64,
) -> Result<Classifier<T>, ClassifierError> {
    Classifier::build(backbone_id, head, source, seed)
}

impl<T: Scalar> Classifier<T> {
    pub fn build(backbone_id: &str, head: HeadConfig, source: &WeightsSource, seed: u64) -> Result<Self, ClassifierError> {
        let entry = backbone::lookup(backbone_id).ok_or_else(|| ClassifierError::UnknownBackbone(backbone_id.into()))?;
        head.validate()?;
        let pretrained = match source {
            WeightsSource::Pretrained(dir) => {
                let path = WeightsSource::file_for(dir, backbone_id);
                if !path.is_file() {
                    return Err(ClassifierError::WeightsUnavailable { backbone: backbone_id.into(), path });
                }
                Some(path)
            }
            WeightsSource::Random => None,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut graph, feature_node) = backbone::build::<T>(entry, &mut rng);
        let pooled_node = graph.global_avg_pool("global_average_pooling2d", feature_node);
        let act: Activation = head.hidden_activation.into();
        let [w1, w2, w3] = head.dense_widths;
        let d1 = graph.dense(&mut rng, "dense", pooled_node, w1);
        let a1 = graph.act("dense/activation", d1, act);
        let dr = graph.dropout("dropout", a1, head.dropout_rate);
        let d2 = graph.dense(&mut rng, "dense_1", dr, w2);
        let a2 = graph.act("dense_1/activation", d2, act);
        graph.dense(&mut rng, "dense_2", a2, w3);

        if let Some(path) = &pretrained {
            let backbone_nodes: HashSet<String> =
                graph.nodes()[..=feature_node].iter().map(|n| n.name.clone()).collect();
            weights::load(&mut graph, path, |name| backbone_nodes.contains(name))?;
        }
        Ok(Self {
            spec: ClassifierSpec { backbone_id: backbone_id.into(), head },
            entry,
            graph,
            feature_node,
            pooled_node,
            weights_origin: source.to_string(),
            needs_calibration: pretrained.is_none(),
            history: History::default(),
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn backbone(&self) -> &'static BackboneEntry {
        self.entry
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn weights_origin(&self) -> &str {
        &self.weights_origin
    }

    /// Length of the pooled feature vector feeding the first dense layer.
    pub fn pooled_features(&self) -> usize {
        self.graph.shape(self.pooled_node).len()
    }

    pub fn output_width(&self) -> usize {
        self.graph.output_shape().len()
    }

    /// Expected `(height, width, channels)` of input tensors.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.entry.input_size.0, self.entry.input_size.1, 3)
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut c = ParamCounts { backbone: 0, head: 0, total: 0, trainable: 0 };
        for (i, node) in self.graph.nodes().iter().enumerate() {
            let n: usize = node.params().iter().map(|p| p.len()).sum();
            if i <= self.feature_node {
                c.backbone += n;
            } else {
                c.head += n;
            }
            if node.trainable {
                c.trainable += match &node.op {
                    Op::BatchNorm(b) => b.channels * if b.fixed_gamma { 1 } else { 2 },
                    _ => n,
                };
            }
        }
        c.total = c.backbone + c.head;
        c
    }

    fn check_shape(&self, t: &ImageTensor<T>) -> Result<(), ClassifierError> {
        let expected = self.input_shape();
        if t.shape() != expected || t.data.len() != expected.0 * expected.1 * 3 {
            return Err(ClassifierError::ShapeMismatch { expected, found: t.shape() });
        }
        Ok(())
    }

    pub fn predict(&self, tensor: &ImageTensor<T>) -> Result<Probabilities<T>, ClassifierError> {
        self.check_shape(tensor)?;
        let x = Tensor::from_vec(1, self.entry.input_shape(), tensor.to_chw());
        let logits = self.graph.infer(x);
        Ok(Probabilities::from_logits(&logits.data))
    }

    /// Predicted label (lowest index on ties) with its probabilities.
    pub fn classify(&self, tensor: &ImageTensor<T>) -> Result<(ClassLabel, Probabilities<T>), ClassifierError> {
        let p = self.predict(tensor)?;
        Ok((p.label(), p))
    }

    /// Batched inference over already-resized RGB images.
    pub fn predict_images(&self, images: &[RgbImage]) -> Vec<Probabilities<T>> {
        const CHUNK: usize = 16;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let refs: Vec<&RgbImage> = chunk.iter().collect();
            let x = batch_tensor(&refs, self.entry, &vec![false; refs.len()]);
            let logits = self.graph.infer(x);
            out.extend(logits.data.chunks_exact(NUM_CLASSES).map(Probabilities::from_logits));
        }
        out
    }

    /// Mean categorical cross-entropy and accuracy over a set.
    pub fn evaluate_set(&self, set: &ImageSet) -> (f64, f64) {
        let probs = self.predict_images(&set.images);
        let mut loss = 0.0;
        let mut correct = 0;
        for (p, label) in probs.iter().zip(&set.labels) {
            loss -= p.to_f64()[label.index()].max(1e-12).ln();
            correct += usize::from(p.label() == *label);
        }
        let n = set.len().max(1) as f64;
        (loss / n, correct as f64 / n)
    }

    /// Loads and resizes the train and validation images, then fits.
    pub fn train(&mut self, splits: &DatasetSplits, cfg: &TrainConfig) -> Result<&History, ClassifierError> {
        if splits.train.is_empty() {
            return Err(ClassifierError::EmptyTrainSplit);
        }
        let train = ImageSet::load(&splits.train, self.entry)?;
        let val = ImageSet::load(&splits.validation, self.entry)?;
        self.fit(&train, &val, cfg, |e| {
            log::info!(
                "epoch {}: loss {:.4} acc {:.4} val_loss {} val_acc {}",
                e.epoch,
                e.train_loss,
                e.train_acc,
                e.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
                e.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
            )
        })
    }

    /// Minimizes cross-entropy with Adam, with early stopping on validation
    /// loss (training loss when `val` is empty). The weights of the best
    /// epoch are restored on return.
    pub fn fit(
        &mut self,
        train: &ImageSet,
        val: &ImageSet,
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<&History, ClassifierError> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(ClassifierError::EmptyTrainSplit);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();

        if self.needs_calibration {
            dataset::shuffle(&mut order, &mut rng);
            let take: Vec<&RgbImage> = order.iter().take(cfg.batch_size.max(16)).map(|&i| &train.images[i]).collect();
            let x = batch_tensor(&take, self.entry, &vec![false; take.len()]);
            self.graph.calibrate_batch_norm(x);
            self.needs_calibration = false;
        }

        let len = self.graph.len();
        let stop = if cfg.fine_tune_backbone {
            self.graph.set_trainable(1..len, true);
            1
        } else {
            self.graph.set_trainable(1..self.pooled_node, false);
            self.graph.set_trainable(self.pooled_node..len, true);
            self.pooled_node
        };

        let mut adam = Adam::<T>::new(cfg.learning_rate);
        let mut history = History::default();
        let mut best = f64::INFINITY;
        let mut best_params = None;
        let mut since_best = 0;
        let mut step = 0;

        for epoch in 1..=cfg.max_epochs {
            dataset::shuffle(&mut order, &mut rng);
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                step += 1;
                self.graph.zero_grads();
                let scale = 1.0 / batch.len() as f64;
                for micro in batch.chunks(cfg.micro_batch) {
                    let imgs: Vec<&RgbImage> = micro.iter().map(|&i| &train.images[i]).collect();
                    let flips: Vec<bool> = micro.iter().map(|_| cfg.augment_flip && rng.random_bool(0.5)).collect();
                    let x = batch_tensor(&imgs, self.entry, &flips);
                    let trace = self.graph.forward(x, Mode::Train(&mut rng));
                    let logits = trace.output();
                    let mut grad = Tensor::zeros(micro.len(), Shape::flat(NUM_CLASSES));
                    for (s, &i) in micro.iter().enumerate() {
                        let target = train.labels[i].index();
                        let p = Probabilities::from_logits(logits.sample(s)).to_f64();
                        let l = -p[target].ln();
                        if !l.is_finite() {
                            return Err(ClassifierError::NonFiniteLoss { epoch, step });
                        }
                        loss_sum += l;
                        correct += usize::from(argmax(&p) == target);
                        for (k, g) in grad.sample_mut(s).iter_mut().enumerate() {
                            let y = if k == target { 1.0 } else { 0.0 };
                            *g = T::from_f64_lossy((p[k] - y) * scale);
                        }
                    }
                    self.graph.backward(trace, grad, stop);
                }
                adam.step(&mut self.graph, 1.0);
            }
            let n = train.len() as f64;
            let mut record =
                EpochRecord { epoch, train_loss: loss_sum / n, train_acc: correct as f64 / n, val_loss: None, val_acc: None };
            if !val.is_empty() {
                let (l, a) = self.evaluate_set(val);
                record.val_loss = Some(l);
                record.val_acc = Some(a);
            }
            on_epoch(&record);
            history.epochs.push(record);

            let monitored = record.val_loss.unwrap_or(record.train_loss);
            if !monitored.is_finite() {
                return Err(ClassifierError::NonFiniteLoss { epoch, step });
            }
            if monitored < best {
                best = monitored;
                history.best_epoch = Some(epoch);
                best_params = Some(self.snapshot());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience.max(1) {
                    history.stopped_early = epoch < cfg.max_epochs;
                    break;
                }
            }
        }
        if let Some(p) = best_params {
            self.restore(&p);
        }
        self.graph.drop_grads();
        self.history = history;
        Ok(&self.history)
    }

    fn snapshot(&self) -> Vec<Vec<T>> {
        self.graph.nodes().iter().flat_map(|n| n.params()).map(|p| p.value.clone()).collect()
    }

    fn restore(&mut self, values: &[Vec<T>]) {
        let params = self.graph.nodes_mut().iter_mut().flat_map(|n| n.params_mut());
        for (p, v) in params.zip(values) {
            p.value.copy_from_slice(v);
        }
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            backbone_id: self.spec.backbone_id.clone(),
            head: self.spec.head,
            input_size: [self.entry.input_size.0, self.entry.input_size.1],
            normalization: self.entry.normalization,
            labels: ClassLabel::names().iter().map(|s| s.to_string()).collect(),
            dtype: T::DTYPE,
            weights_origin: self.weights_origin.clone(),
            history: self.history.clone(),
            saved_at: chrono::Utc::now(),
        }
    }

    /// Writes `weights.safetensors` and `model.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ClassifierError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = HashMap::from([("backbone_id".to_string(), self.spec.backbone_id.clone())]);
        weights::save(&self.graph, &dir.join(CHECKPOINT_WEIGHTS), |_| true, Some(meta))?;
        let json = serde_json::to_vec_pretty(&self.checkpoint_meta()).expect("serializable metadata");
        let path = dir.join(CHECKPOINT_META);
        std::fs::write(&path, json).map_err(io_err(&path))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ClassifierError> {
        let dir = dir.as_ref();
        let meta_path = dir.join(CHECKPOINT_META);
        let bytes = std::fs::read(&meta_path).map_err(io_err(&meta_path))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes)
            .map_err(|e| ClassifierError::BadCheckpoint { path: meta_path.clone(), reason: e.to_string() })?;
        if meta.labels != ClassLabel::names() {
            return Err(ClassifierError::BadCheckpoint { path: meta_path, reason: "label order differs from canonical".into() });
        }
        let mut model = Self::build(&meta.backbone_id, meta.head, &WeightsSource::Random, 0)?;
        weights::load(&mut model.graph, &dir.join(CHECKPOINT_WEIGHTS), |_| true)?;
        model.needs_calibration = false;
        model.weights_origin = meta.weights_origin;
        model.history = meta.history;
        Ok(model)
    }
}

/// Normalizes resized images into an NCHW batch, optionally mirrored.
pub fn batch_tensor<T: Scalar>(images: &[&RgbImage], entry: &BackboneEntry, flips: &[bool]) -> Tensor<T> {
    let shape = entry.input_shape();
    let plane = shape.plane();
    let mut t = Tensor::zeros(images.len(), shape);
    for (s, (img, &flip)) in images.iter().zip(flips).enumerate() {
        assert_eq!((img.height() as usize, img.width() as usize), (shape.h, shape.w), "image not resized");
        let out = t.sample_mut(s);
        let w = shape.w;
        for (p, px) in img.pixels().enumerate() {
            let (y, x) = (p / w, p % w);
            let dst = if flip { y * w + (w - 1 - x) } else { p };
            let v = entry.normalization.apply(px.0);
            for c in 0..3 {
                out[c * plane + dst] = T::from_f64_lossy(v[c]);
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::synthetic_image;
    use crate::labels::ClassLabel;
    use rand_distr::{Distribution, Uniform};

    fn model(seed: u64) -> Classifier<f32> {
        build_classifier("mobilenet", HeadConfig::default(), &WeightsSource::Random, seed).unwrap()
    }

    fn random_tensor(seed: u64) -> ImageTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new_inclusive(-1.0f32, 1.0).unwrap();
        ImageTensor { height: 224, width: 224, data: (0..224 * 224 * 3).map(|_| u.sample(&mut rng)).collect(), value_range: (-1.0, 1.0) }
    }

    fn image_set(per_class: usize, offset: usize) -> ImageSet {
        let mut set = ImageSet::default();
        for label in ClassLabel::ALL {
            for i in 0..per_class {
                set.images.push(synthetic_image(label, offset + i, 224, 224));
                set.labels.push(label);
            }
        }
        set
    }

    #[test]
    fn head_shape_and_feature_width() {
        for entry in &backbone::REGISTRY {
            let m = build_classifier::<f32>(entry.id, HeadConfig::default(), &WeightsSource::Random, 0).unwrap();
            assert_eq!(m.output_width(), 6);
            assert_eq!(m.pooled_features(), entry.feature_dim, "{}", entry.id);
            let c = m.param_counts();
            assert_eq!(c.head, entry.feature_dim * 512 + 512 + 512 * 128 + 128 + 128 * 6 + 6);
            assert_eq!(c.total, m.graph().param_count());
        }
    }

    #[test]
    fn softmax_output_and_determinism() {
        let m = model(1);
        let t = random_tensor(7);
        let p = m.predict(&t).unwrap();
        assert!(p.0.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((p.sum() - 1.0).abs() <= 1e-6);
        let q = m.predict(&t).unwrap();
        for (a, b) in p.0.iter().zip(&q.0) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = model(1);
        let t = ImageTensor::<f32>::constant(299, 299, 0.0, (-1.0, 1.0));
        assert!(matches!(m.predict(&t), Err(ClassifierError::ShapeMismatch { .. })));
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let p = Probabilities::<f64>::from_logits(&[0.0, 2.0, 2.0, 1.0, 2.0, 0.0]);
        assert_eq!(p.label(), ClassLabel::Glass);
        let uniform = Probabilities::<f32>::from_logits(&[0.0; 6]);
        assert_eq!(uniform.label(), ClassLabel::Cardboard);
        assert!((uniform.confidence() - 1.0 / 6.0).abs() < 1e-7);
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let p = Probabilities::<f32>::from_logits(&[1e4, -1e4, 0.0, 3e4, 0.0, 0.0]);
        assert_eq!(p.label(), ClassLabel::Paper);
        assert!((p.sum() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn invalid_configs() {
        let mut head = HeadConfig::default();
        head.dense_widths[2] = 5;
        assert!(matches!(head.validate(), Err(ClassifierError::InvalidHead(_))));
        head = HeadConfig { dropout_rate: 1.0, ..HeadConfig::default() };
        assert!(matches!(head.validate(), Err(ClassifierError::InvalidHead(_))));
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { max_epochs: 0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(ClassifierError::InvalidTrainConfig(_))));
        }
        assert!(matches!(
            build_classifier::<f32>("vgg16", HeadConfig::default(), &WeightsSource::Random, 0),
            Err(ClassifierError::UnknownBackbone(_))
        ));
    }

    #[test]
    fn missing_pretrained_weights() {
        let dir = tempfile::tempdir().unwrap();
        let r = build_classifier::<f32>("mobilenet", HeadConfig::default(), &WeightsSource::Pretrained(dir.path().into()), 0);
        assert!(matches!(r, Err(ClassifierError::WeightsUnavailable { .. })));
    }

    #[test]
    fn pretrained_weights_fill_only_the_backbone() {
        let dir = tempfile::tempdir().unwrap();
        let donor = model(1);
        weights::save(donor.graph(), &WeightsSource::file_for(dir.path(), "mobilenet"), |_| true, None).unwrap();
        let m = build_classifier::<f32>("mobilenet", HeadConfig::default(), &WeightsSource::Pretrained(dir.path().into()), 2).unwrap();
        for (i, (a, b)) in donor.graph().nodes().iter().zip(m.graph().nodes()).enumerate() {
            for (p, q) in a.params().iter().zip(b.params()) {
                if i <= donor.feature_node {
                    assert_eq!(p.value, q.value, "{}", p.name);
                } else if p.name.ends_with("/kernel") {
                    assert_ne!(p.value, q.value, "{}", p.name);
                }
            }
        }
    }

    #[test]
    fn empty_train_split() {
        let mut m = model(0);
        let r = m.fit(&ImageSet::default(), &ImageSet::default(), &TrainConfig::default(), |_| {});
        assert!(matches!(r, Err(ClassifierError::EmptyTrainSplit)));
    }

    #[test]
    fn fit_keeps_best_validation_epoch() {
        let mut m = model(3);
        let train = image_set(1, 0);
        let val = image_set(1, 100);
        let cfg = TrainConfig { max_epochs: 3, batch_size: 6, early_stop_patience: 5, learning_rate: 3e-3, ..Default::default() };
        let mut seen = 0;
        let history = m.fit(&train, &val, &cfg, |_| seen += 1).unwrap().clone();
        assert_eq!(history.len(), 3);
        assert_eq!(seen, 3);
        let losses: Vec<f64> = history.epochs.iter().map(|e| e.val_loss.unwrap()).collect();
        let best = (0..losses.len()).min_by(|&a, &b| losses[a].total_cmp(&losses[b])).unwrap();
        assert_eq!(history.best_epoch, Some(best + 1));
        let (loss, _) = m.evaluate_set(&val);
        assert!((loss - losses[best]).abs() < 1e-6, "{loss} vs {losses:?}");
    }

    #[test]
    fn single_epoch_history_and_csv() {
        let mut m = model(4);
        let cfg = TrainConfig { max_epochs: 1, batch_size: 4, ..Default::default() };
        let history = m.fit(&image_set(1, 0), &ImageSet::default(), &cfg, |_| {}).unwrap();
        assert_eq!(history.len(), 1);
        assert_eq!(history.epochs[0].val_loss, None);
        let csv = history.to_csv();
        assert!(csv.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
        assert_eq!(History::from_csv(&csv).unwrap().epochs, history.epochs);
        assert_eq!(History::default().to_csv(), "epoch,train_loss,train_acc,val_loss,val_acc\n");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model(5);
        m.fit(&image_set(1, 0), &ImageSet::default(), &TrainConfig { max_epochs: 1, ..Default::default() }, |_| {}).unwrap();
        m.save(dir.path()).unwrap();
        let back = Classifier::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.history(), m.history());
        let t = random_tensor(9);
        assert_eq!(back.predict(&t).unwrap(), m.predict(&t).unwrap());
    }

    #[test]
    fn flip_mirrors_columns() {
        let entry = backbone::lookup("mobilenet").unwrap();
        let img = synthetic_image(ClassLabel::Trash, 0, 224, 224);
        let a = batch_tensor::<f32>(&[&img], entry, &[false]);
        let b = batch_tensor::<f32>(&[&img], entry, &[true]);
        assert_eq!(a.data[5], b.data[223 - 5]);
        assert_eq!(a.data[224 * 224 + 224 * 3 + 10], b.data[224 * 224 + 224 * 3 + 213]);
    }
}
