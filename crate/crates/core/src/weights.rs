//! Parameter (de)serialization in the safetensors format.
//!
//! Tensors are keyed by `{layer}/{kind}` names (`conv1/kernel`,
//! `bn_Conv1/moving_mean`, ...). Convolution kernels are stored as
//! `[out, in, kh, kw]`, dense kernels as `[out, in]`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};

use crate::nn::Graph;
use crate::scalar::{Dtype, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed weights file: {0}")]
    Format(#[from] safetensors::SafeTensorError),
    #[error("tensor `{0}` missing from weights file")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor `{name}` has unsupported dtype {dtype:?}")]
    Dtype { name: String, dtype: StDtype },
}

fn st_dtype(d: Dtype) -> StDtype {
    match d {
        Dtype::F32 => StDtype::F32,
        Dtype::F64 => StDtype::F64,
    }
}

/// Encodes the parameters of every node accepted by `keep`.
pub fn to_bytes<T: Scalar>(
    graph: &Graph<T>,
    keep: impl Fn(&str) -> bool,
    metadata: Option<HashMap<String, String>>,
) -> Result<Vec<u8>, WeightsError> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for node in graph.nodes() {
        if !keep(&node.name) {
            continue;
        }
        for p in node.params() {
            let mut bytes = Vec::with_capacity(p.len() * T::DTYPE.size_of());
            for v in &p.value {
                v.write_le(&mut bytes);
            }
            buffers.push((p.name.clone(), p.dims.clone(), bytes));
        }
    }
    let views = buffers
        .iter()
        .map(|(name, dims, bytes)| Ok((name.as_str(), TensorView::new(st_dtype(T::DTYPE), dims.clone(), bytes)?)))
        .collect::<Result<Vec<_>, WeightsError>>()?;
    Ok(safetensors::serialize(views, metadata)?)
}

pub fn save<T: Scalar>(
    graph: &Graph<T>,
    path: &Path,
    keep: impl Fn(&str) -> bool,
    metadata: Option<HashMap<String, String>>,
) -> Result<(), WeightsError> {
    let bytes = to_bytes(graph, keep, metadata)?;
    std::fs::write(path, bytes).map_err(|source| WeightsError::Io { path: path.to_path_buf(), source })
}

/// Overwrites the parameters of every node accepted by `keep` from an
/// encoded file. Every such parameter must be present with a matching shape;
/// extra tensors in the file are ignored. Returns the number of tensors read.
pub fn load_bytes<T: Scalar>(graph: &mut Graph<T>, bytes: &[u8], keep: impl Fn(&str) -> bool) -> Result<usize, WeightsError> {
    let st = SafeTensors::deserialize(bytes)?;
    let mut loaded = 0;
    for node in graph.nodes_mut() {
        if !keep(&node.name) {
            continue;
        }
        for p in node.params_mut() {
            let view = st.tensor(&p.name).map_err(|_| WeightsError::Missing(p.name.clone()))?;
            if view.shape() != p.dims.as_slice() {
                return Err(WeightsError::Shape { name: p.name.clone(), expected: p.dims.clone(), found: view.shape().to_vec() });
            }
            let dtype = match view.dtype() {
                StDtype::F32 => Dtype::F32,
                StDtype::F64 => Dtype::F64,
                other => return Err(WeightsError::Dtype { name: p.name.clone(), dtype: other }),
            };
            for (dst, chunk) in p.value.iter_mut().zip(view.data().chunks_exact(dtype.size_of())) {
                *dst = T::read_le(chunk, dtype).expect("chunk width matches dtype");
            }
            loaded += 1;
        }
    }
    Ok(loaded)
}

pub fn load<T: Scalar>(graph: &mut Graph<T>, path: &Path, keep: impl Fn(&str) -> bool) -> Result<usize, WeightsError> {
    let bytes = std::fs::read(path).map_err(|source| WeightsError::Io { path: path.to_path_buf(), source })?;
    load_bytes(graph, &bytes, keep)
}

/// Reads the free-form string metadata of an encoded file.
pub fn metadata(bytes: &[u8]) -> Result<HashMap<String, String>, WeightsError> {
    let (_, meta) = SafeTensors::read_metadata(bytes)?;
    Ok(meta.metadata().clone().unwrap_or_default())
}
