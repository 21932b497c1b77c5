//! Portable model artifacts: an ONNX graph plus a JSON sidecar, and an
//! inference-only loader backed by the `tract` runtime.
//!
//! The exported graph takes `image` as `[N, H, W, 3]` float32 already
//! normalized per the sidecar, and returns `probabilities` as `[N, 6]`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tract_onnx::prelude::*;

use crate::backbone::{self, Normalization};
use crate::classifier::{Classifier, Probabilities};
use crate::dataset::ImageTensor;
use crate::labels::{ClassLabel, NUM_CLASSES};
use crate::nn::{Activation, Op, PoolKind};
use crate::onnx::{self, AttributeProto, GraphProto, ModelProto, NodeProto, OperatorSetIdProto, TensorProto};
use crate::scalar::Scalar;

pub const INPUT_NAME: &str = "image";
pub const OUTPUT_NAME: &str = "probabilities";

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("cannot write artifact to {path}: {source}")]
    SerializationFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("artifact {0} does not exist")]
    NotFound(PathBuf),
    #[error("sidecar {0} is missing")]
    MissingSidecar(PathBuf),
    #[error("corrupt artifact {path}: {reason}")]
    CorruptArtifact { path: PathBuf, reason: String },
    #[error("input tensor is {found:?}, artifact expects {expected:?}")]
    ShapeMismatch { expected: (usize, usize, usize), found: (usize, usize, usize) },
    #[error("inference failed: {0}")]
    Runtime(String),
}

/// Contents of `<stem>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMetadata {
    pub backbone_id: String,
    pub input_size: [usize; 2],
    pub normalization: Normalization,
    pub labels: Vec<String>,
    pub exported_at: chrono::DateTime<chrono::Utc>,
    pub input_name: String,
    pub input_layout: String,
    pub output_name: String,
    pub format: String,
    pub opset: i64,
    #[serde(default)]
    pub weights_origin: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortableArtifact {
    pub model_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub metadata: ArtifactMetadata,
}

/// `model.onnx` -> `model.meta.json`.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    let stem = model_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    model_path.with_file_name(format!("{stem}.meta.json"))
}

fn f32s<T: Scalar>(v: &[T]) -> impl Iterator<Item = f32> + '_ {
    v.iter().map(|x| x.to_f64_lossy() as f32)
}

struct Emitter {
    nodes: Vec<NodeProto>,
    init: Vec<TensorProto>,
}

impl Emitter {
    fn node(&mut self, op: &str, name: &str, inputs: &[&str], output: &str, attrs: Vec<AttributeProto>) {
        self.nodes.push(NodeProto {
            input: inputs.iter().map(|s| s.to_string()).collect(),
            output: vec![output.into()],
            name: name.into(),
            op_type: op.into(),
            attribute: attrs,
        });
    }

    fn tensor<T: Scalar>(&mut self, name: &str, dims: &[usize], values: &[T]) -> String {
        self.init.push(TensorProto::f32(name, dims, f32s(values)));
        name.to_string()
    }

    fn scalar(&mut self, name: &str, v: f32) -> String {
        self.init.push(TensorProto::f32(name, &[], [v]));
        name.to_string()
    }
}

fn window_attrs(win: &crate::nn::ops::Window) -> Vec<AttributeProto> {
    let p = win.pads;
    vec![
        AttributeProto::ints("kernel_shape", &[win.kh as i64, win.kw as i64]),
        AttributeProto::ints("strides", &[win.sh as i64, win.sw as i64]),
        AttributeProto::ints("pads", &[p.top as i64, p.left as i64, p.bottom as i64, p.right as i64]),
    ]
}

/// Translates a classifier into an ONNX model (inference semantics:
/// dropout removed, softmax appended).
pub fn to_onnx<T: Scalar>(model: &Classifier<T>) -> ModelProto {
    let graph = model.graph();
    let entry = model.backbone();
    let (h, w) = entry.input_size;
    let mut e = Emitter { nodes: Vec::new(), init: Vec::new() };
    // Output tensor name of each graph node, and whether it is rank 2.
    let mut names: Vec<String> = Vec::with_capacity(graph.len());
    let mut flat: Vec<bool> = Vec::with_capacity(graph.len());

    e.node("Transpose", "input/nchw", &[INPUT_NAME], "input/nchw", vec![AttributeProto::ints("perm", &[0, 3, 1, 2])]);
    names.push("input/nchw".into());
    flat.push(false);

    for node in graph.nodes().iter().skip(1) {
        let ins: Vec<&str> = node.inputs.iter().map(|&i| names[i].as_str()).collect();
        let in_flat = flat[node.inputs[0]];
        let out = node.name.clone();
        let mut out_flat = in_flat;
        match &node.op {
            Op::Input => unreachable!("only node 0 is an input"),
            Op::Conv(c) => {
                let wname = e.tensor(&c.weight.name, &c.weight.dims, &c.weight.value);
                let mut inputs = vec![ins[0], wname.as_str()];
                let bname = c.bias.as_ref().map(|b| e.tensor(&b.name, &b.dims, &b.value));
                if let Some(b) = &bname {
                    inputs.push(b);
                }
                e.node("Conv", &out, &inputs, &out, window_attrs(&c.win));
            }
            Op::Depthwise(c) => {
                let wname = e.tensor(&c.weight.name, &c.weight.dims, &c.weight.value);
                let mut inputs = vec![ins[0], wname.as_str()];
                let bname = c.bias.as_ref().map(|b| e.tensor(&b.name, &b.dims, &b.value));
                if let Some(b) = &bname {
                    inputs.push(b);
                }
                let mut attrs = window_attrs(&c.win);
                attrs.push(AttributeProto::int("group", c.channels as i64));
                e.node("Conv", &out, &inputs, &out, attrs);
            }
            Op::BatchNorm(b) => {
                let params: Vec<String> =
                    [&b.gamma, &b.beta, &b.mean, &b.var].iter().map(|p| e.tensor(&p.name, &p.dims, &p.value)).collect();
                let inputs = [ins[0], &params[0], &params[1], &params[2], &params[3]];
                e.node("BatchNormalization", &out, &inputs, &out, vec![AttributeProto::float("epsilon", b.eps as f32)]);
            }
            Op::Act(Activation::Relu) => e.node("Relu", &out, &ins, &out, vec![]),
            Op::Act(Activation::Relu6) => {
                let lo = e.scalar(&format!("{out}/min"), 0.0);
                let hi = e.scalar(&format!("{out}/max"), 6.0);
                e.node("Clip", &out, &[ins[0], &lo, &hi], &out, vec![]);
            }
            Op::Add if ins.len() == 2 => e.node("Add", &out, &ins, &out, vec![]),
            Op::Add => e.node("Sum", &out, &ins, &out, vec![]),
            Op::Concat => e.node("Concat", &out, &ins, &out, vec![AttributeProto::int("axis", 1)]),
            Op::Pool(p) => {
                let mut attrs = window_attrs(&p.win);
                let op = match p.kind {
                    PoolKind::Max => "MaxPool",
                    PoolKind::Avg => {
                        attrs.push(AttributeProto::int("count_include_pad", 0));
                        "AveragePool"
                    }
                };
                e.node(op, &out, &ins, &out, attrs);
            }
            Op::GlobalAvgPool => e.node("GlobalAveragePool", &out, &ins, &out, vec![]),
            Op::Dense(d) => {
                let mut x = ins[0].to_string();
                if !in_flat {
                    let f = format!("{out}/flatten");
                    e.node("Flatten", &f, &[&x], &f, vec![AttributeProto::int("axis", 1)]);
                    x = f;
                }
                let wname = e.tensor(&d.weight.name, &d.weight.dims, &d.weight.value);
                let bname = e.tensor(&d.bias.name, &d.bias.dims, &d.bias.value);
                e.node("Gemm", &out, &[&x, &wname, &bname], &out, vec![AttributeProto::int("transB", 1)]);
                out_flat = true;
            }
            Op::Dropout(_) => {
                names.push(ins[0].to_string());
                flat.push(in_flat);
                continue;
            }
            Op::Scale(f) => {
                let s = e.scalar(&format!("{out}/factor"), *f as f32);
                e.node("Mul", &out, &[ins[0], &s], &out, vec![]);
            }
        }
        names.push(out);
        flat.push(out_flat);
    }
    let logits = names.last().expect("non-empty graph").clone();
    e.node("Softmax", OUTPUT_NAME, &[&logits], OUTPUT_NAME, vec![AttributeProto::int("axis", 1)]);

    ModelProto {
        ir_version: onnx::IR_VERSION,
        producer_name: env!("CARGO_PKG_NAME").into(),
        producer_version: env!("CARGO_PKG_VERSION").into(),
        opset_import: vec![OperatorSetIdProto { domain: String::new(), version: onnx::OPSET }],
        graph: Some(GraphProto {
            node: e.nodes,
            name: model.spec().backbone_id.clone(),
            initializer: e.init,
            input: vec![onnx::float_value_info(INPUT_NAME, &[None, Some(h), Some(w), Some(3)], "N")],
            output: vec![onnx::float_value_info(OUTPUT_NAME, &[None, Some(NUM_CLASSES)], "N")],
        }),
    }
}

/// Writes the ONNX file and its `<stem>.meta.json` sidecar.
pub fn export_portable<T: Scalar>(model: &Classifier<T>, out_path: impl AsRef<Path>) -> Result<PortableArtifact, ExportError> {
    let model_path = out_path.as_ref().to_path_buf();
    let fail = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExportError::SerializationFailure { path, source }
    };
    let entry = model.backbone();
    let metadata = ArtifactMetadata {
        backbone_id: entry.id.into(),
        input_size: [entry.input_size.0, entry.input_size.1],
        normalization: entry.normalization,
        labels: ClassLabel::names().iter().map(|s| s.to_string()).collect(),
        exported_at: chrono::Utc::now(),
        input_name: INPUT_NAME.into(),
        input_layout: "NHWC".into(),
        output_name: OUTPUT_NAME.into(),
        format: "onnx".into(),
        opset: onnx::OPSET,
        weights_origin: model.weights_origin().into(),
    };
    let bytes = onnx::encode(&to_onnx(model));
    std::fs::write(&model_path, bytes).map_err(fail(&model_path))?;
    let sidecar = sidecar_path(&model_path);
    let json = serde_json::to_vec_pretty(&metadata).expect("serializable metadata");
    std::fs::write(&sidecar, json).map_err(fail(&sidecar))?;
    Ok(PortableArtifact { model_path, sidecar_path: sidecar, metadata })
}

/// Inference-only model loaded from a portable artifact. Immutable and
/// shareable across threads.
#[derive(Clone)]
pub struct PortableModel {
    metadata: ArtifactMetadata,
    plan: Arc<TypedRunnableModel>,
}

impl std::fmt::Debug for PortableModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PortableModel").field("metadata", &self.metadata).finish_non_exhaustive()
    }
}

/// Checks the artifact exists and reads and validates its sidecar.
pub fn read_sidecar(path: impl AsRef<Path>) -> Result<ArtifactMetadata, ExportError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(ExportError::NotFound(path.to_path_buf()));
    }
    let sidecar = sidecar_path(path);
    let corrupt = |reason: String| ExportError::CorruptArtifact { path: sidecar.clone(), reason };
    let meta_bytes = std::fs::read(&sidecar).map_err(|_| ExportError::MissingSidecar(sidecar.clone()))?;
    let metadata: ArtifactMetadata = serde_json::from_slice(&meta_bytes).map_err(|e| corrupt(e.to_string()))?;
    if metadata.labels != ClassLabel::names() {
        return Err(corrupt(format!("label order {:?} is not canonical", metadata.labels)));
    }
    let entry = backbone::lookup(&metadata.backbone_id)
        .ok_or_else(|| corrupt(format!("unknown backbone `{}`", metadata.backbone_id)))?;
    if metadata.input_size != [entry.input_size.0, entry.input_size.1] || metadata.normalization != entry.normalization {
        return Err(corrupt("input size or normalization disagrees with the backbone registry".into()));
    }
    Ok(metadata)
}

pub fn load_portable(path: impl AsRef<Path>) -> Result<PortableModel, ExportError> {
    let path = path.as_ref();
    let metadata = read_sidecar(path)?;
    let [h, w] = metadata.input_size;
    let plan = (|| -> TractResult<_> {
        let bytes = std::fs::read(path)?;
        tract_onnx::onnx()
            .model_for_read(&mut bytes.as_slice())?
            .with_input_fact(0, f32::fact([1, h, w, 3]).into())?
            .into_optimized()?
            .into_runnable()
    })()
    .map_err(|e| ExportError::CorruptArtifact { path: path.to_path_buf(), reason: format!("{e:#}") })?;
    Ok(PortableModel { metadata, plan })
}

impl PortableModel {
    pub fn metadata(&self) -> &ArtifactMetadata {
        &self.metadata
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.metadata.input_size[0], self.metadata.input_size[1], 3)
    }

    pub fn normalization(&self) -> Normalization {
        self.metadata.normalization
    }

    pub fn predict(&self, tensor: &ImageTensor<f32>) -> Result<Probabilities<f32>, ExportError> {
        let expected = self.input_shape();
        if tensor.shape() != expected || tensor.data.len() != expected.0 * expected.1 * 3 {
            return Err(ExportError::ShapeMismatch { expected, found: tensor.shape() });
        }
        let input = tract_ndarray::Array4::from_shape_vec((1, expected.0, expected.1, 3), tensor.data.clone())
            .map_err(|e| ExportError::Runtime(e.to_string()))?;
        let out = self
            .plan
            .run(tvec!(Tensor::from(input).into()))
            .map_err(|e| ExportError::Runtime(format!("{e:#}")))?;
        let view = out[0].to_plain_array_view::<f32>().map_err(|e| ExportError::Runtime(format!("{e:#}")))?;
        let values: Vec<f32> = view.iter().copied().collect();
        if values.len() != NUM_CLASSES {
            return Err(ExportError::Runtime(format!("expected {NUM_CLASSES} outputs, got {}", values.len())));
        }
        Ok(Probabilities(std::array::from_fn(|i| values[i])))
    }

    pub fn classify(&self, tensor: &ImageTensor<f32>) -> Result<(ClassLabel, Probabilities<f32>), ExportError> {
        let p = self.predict(tensor)?;
        Ok((p.label(), p))
    }

    /// Resizes and normalizes a decoded image as the sidecar declares.
    pub fn prepare(&self, image: &image::DynamicImage) -> ImageTensor<f32> {
        let entry = backbone::lookup(&self.metadata.backbone_id).expect("validated at load");
        crate::dataset::preprocess_image(image, entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{build_classifier, HeadConfig, WeightsSource};
    use crate::dataset::preprocess_image;
    use crate::fixtures::synthetic_image;

    fn calibrated(backbone: &str) -> Classifier<f32> {
        crate::fixtures::quick_classifier(backbone, 11).unwrap()
    }

    #[test]
    fn round_trip_parity_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let model = calibrated("mobilenet_v2");
        let art = export_portable(&model, dir.path().join("m.onnx")).unwrap();
        assert_eq!(art.sidecar_path, dir.path().join("m.meta.json"));
        let portable = load_portable(&art.model_path).unwrap();
        assert_eq!(portable.metadata().labels, ClassLabel::names());
        assert_eq!(portable.metadata().backbone_id, "mobilenet_v2");
        let zero = ImageTensor::constant(224, 224, 0.0f32, (-1.0, 1.0));
        let mut tensors = vec![zero];
        for (i, l) in ClassLabel::ALL.iter().enumerate() {
            tensors.push(preprocess_image(&image::DynamicImage::ImageRgb8(synthetic_image(*l, 40 + i, 300, 200)), model.backbone()));
        }
        for t in &tensors {
            let a = model.predict(t).unwrap();
            let b = portable.predict(t).unwrap();
            for (x, y) in a.0.iter().zip(&b.0) {
                assert!((x - y).abs() <= 1e-3, "{a:?} vs {b:?}");
            }
            assert_eq!(a.label(), b.label());
        }
    }

    #[test]
    fn every_backbone_exports_and_loads() {
        let dir = tempfile::tempdir().unwrap();
        for entry in &backbone::REGISTRY {
            let model = build_classifier::<f32>(entry.id, HeadConfig::default(), &WeightsSource::Random, 1).unwrap();
            let path = dir.path().join(format!("{}.onnx", entry.id));
            export_portable(&model, &path).unwrap();
            let portable = load_portable(&path).unwrap();
            let t = ImageTensor::constant(entry.input_size.0, entry.input_size.1, 0.25f32, (-1.0, 1.0));
            let a = model.predict(&t).unwrap();
            let b = portable.predict(&t).unwrap();
            let drift = a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(drift <= 1e-3, "{}: drift {drift}", entry.id);
        }
    }

    #[test]
    fn artifact_errors() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_classifier::<f32>("mobilenet", HeadConfig::default(), &WeightsSource::Random, 1).unwrap();
        let path = dir.path().join("m.onnx");
        export_portable(&model, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_portable(&path), Err(ExportError::CorruptArtifact { .. })));

        std::fs::write(&path, &bytes).unwrap();
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(matches!(load_portable(&path), Err(ExportError::MissingSidecar(_))));

        assert!(matches!(load_portable(dir.path().join("absent.onnx")), Err(ExportError::NotFound(_))));
        let r = export_portable(&model, dir.path().join("no/such/dir/m.onnx"));
        assert!(matches!(r, Err(ExportError::SerializationFailure { .. })));
    }

    #[test]
    fn shape_checked() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_classifier::<f32>("mobilenet", HeadConfig::default(), &WeightsSource::Random, 1).unwrap();
        let path = dir.path().join("m.onnx");
        export_portable(&model, &path).unwrap();
        let p = load_portable(&path).unwrap();
        let t = ImageTensor::constant(10, 10, 0.0f32, (-1.0, 1.0));
        assert!(matches!(p.predict(&t), Err(ExportError::ShapeMismatch { .. })));
    }
}
