//! Named-array files (safetensors layout) and parameter checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Result, TensorError};
use crate::param::HasParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Metadata = BTreeMap<String, String>;

fn ck(e: impl std::fmt::Display) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

/// Serialises named tensors with string metadata.
pub fn encode_tensors<'a, T: Scalar>(
    tensors: impl IntoIterator<Item = (String, &'a Tensor<T>)>,
    metadata: &Metadata,
) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .into_iter()
        .map(|(name, t)| {
            let mut b = Vec::with_capacity(t.numel() * std::mem::size_of::<T>());
            t.data().iter().for_each(|v| v.write_le(&mut b));
            (name, t.shape().to_vec(), b)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(n, s, b)| Ok((n.clone(), TensorView::new(T::DTYPE, s.clone(), b).map_err(ck)?)))
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    safetensors::serialize(views, Some(meta)).map_err(ck)
}

/// Parses a buffer, converting every stored float array to `T`.
pub fn decode_tensors<T: Scalar>(buf: &[u8]) -> Result<(BTreeMap<String, Tensor<T>>, Metadata)> {
    let (_, header) = SafeTensors::read_metadata(buf).map_err(ck)?;
    let metadata: Metadata = header
        .metadata()
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default();
    let st = SafeTensors::deserialize(buf).map_err(ck)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data: Vec<T> = match view.dtype() {
            Dtype::F32 => view.data().chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            Dtype::F64 => view.data().chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
            Dtype::U8 => view.data().iter().map(|&b| T::of(b as f64)).collect(),
            other => return Err(ck(format!("{name}: unsupported dtype {other:?}"))),
        };
        out.insert(name, Tensor::new(view.shape(), data)?);
    }
    Ok((out, metadata))
}

pub fn write_tensors<'a, T: Scalar>(
    path: &Path,
    tensors: impl IntoIterator<Item = (String, &'a Tensor<T>)>,
    metadata: &Metadata,
) -> Result<()> {
    std::fs::write(path, encode_tensors(tensors, metadata)?)?;
    Ok(())
}

pub fn read_tensors<T: Scalar>(path: &Path) -> Result<(BTreeMap<String, Tensor<T>>, Metadata)> {
    decode_tensors(&std::fs::read(path)?)
}

/// Stores every parameter and buffer of `model` under its dotted path.
pub fn save_params<T: Scalar>(model: &impl HasParams<T>, path: &Path, metadata: &Metadata) -> Result<()> {
    let values: Vec<(String, std::rc::Rc<Tensor<T>>)> =
        model.named_params().into_iter().map(|(n, p)| (n, p.value())).collect();
    write_tensors(path, values.iter().map(|(n, t)| (n.clone(), &**t)), metadata)
}

/// Loads a checkpoint into `model`. Names and shapes must match exactly.
pub fn load_params<T: Scalar>(model: &impl HasParams<T>, path: &Path) -> Result<Metadata> {
    let (mut stored, metadata) = read_tensors::<T>(path)?;
    let params = model.named_params();
    for (name, p) in &params {
        let t = stored
            .remove(name)
            .ok_or_else(|| ck(format!("missing tensor {name}")))?;
        if t.shape() != p.shape().as_slice() {
            return Err(ck(format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), p.shape())));
        }
        p.set(t)?;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(ck(format!("unexpected tensor {extra}")));
    }
    Ok(metadata)
}
