//! Weight files: a JSON manifest next to a little-endian f32 blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layers::LayerSpec;
use super::net::{Net, NetBuilder};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub name: String,
    pub layer: LayerSpec,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format_version: u32,
    pub seed: u64,
    pub nodes: Vec<NodeEntry>,
    pub output: usize,
    pub taps: BTreeMap<String, usize>,
    pub fusion_taps: Vec<usize>,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
}

fn encode(net: &Net) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, kind: TensorKind, shape: Vec<usize>, values: &[f64], trainable: Option<bool>| {
        for &v in values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry { name, kind, shape, offset, trainable });
        offset += values.len();
    };
    for node in &net.nodes {
        for p in node.layer.params() {
            push(p.name.clone(), TensorKind::Param, p.value.shape().to_vec(), p.value.data(), Some(p.trainable));
        }
        for (i, b) in node.layer.buffers().into_iter().enumerate() {
            let tag = if i == 0 { "moving_mean" } else { "moving_variance" };
            push(format!("{}/{tag}", node.name), TensorKind::Buffer, vec![b.len()], b, None);
        }
    }
    (entries, blob)
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns both paths.
pub fn save(net: &Net, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (tensors, blob) = encode(net);
    let bin_name = format!("{stem}.bin");
    let manifest = WeightManifest {
        format_version: FORMAT_VERSION,
        seed: net.seed,
        nodes: net
            .nodes
            .iter()
            .map(|n| NodeEntry { name: n.name.clone(), layer: n.spec.clone(), inputs: n.inputs.clone() })
            .collect(),
        output: net.output,
        taps: net.taps.clone(),
        fusion_taps: net.fusion_taps.clone(),
        tensors,
        blob: bin_name.clone(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    let bin_path = dir.join(bin_name);
    fs::write(&json_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
    Ok((json_path, bin_path))
}

/// Rebuilds the graph from the manifest and fills in the stored weights.
pub fn load(json_path: &Path) -> Result<Net> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let manifest: WeightManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::State(format!("unsupported weight format {}", manifest.format_version)));
    }
    let bin_path = json_path.with_file_name(&manifest.blob);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::State("weight blob length is not a multiple of 4".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let mut b = NetBuilder::new(manifest.seed);
    for n in &manifest.nodes {
        match &n.layer {
            LayerSpec::Input { shape } => b.input(&n.name, shape)?,
            spec => b.add(&n.name, spec.clone(), &n.inputs)?,
        };
    }
    let mut net = b.finish(manifest.output)?;
    net.taps = manifest.taps.clone();
    net.fusion_taps = manifest.fusion_taps.clone();

    let mut entries = manifest.tensors.iter();
    let mut take = |name: &str, shape: &[usize]| -> Result<(Tensor, Option<bool>)> {
        let e = entries.next().ok_or_else(|| Error::State(format!("manifest lacks tensor `{name}`")))?;
        if e.name != name || e.shape != shape {
            return Err(Error::State(format!(
                "tensor `{}` {:?} does not match `{name}` {shape:?}",
                e.name, e.shape
            )));
        }
        let len: usize = shape.iter().product();
        let data = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::State(format!("blob too short for `{name}`")))?
            .to_vec();
        Ok((Tensor::new(shape.to_vec(), data)?, e.trainable))
    };
    for node in net.nodes.iter_mut() {
        for p in node.layer.params_mut() {
            let (t, trainable) = take(&p.name, p.value.shape())?;
            p.value = t;
            p.trainable = trainable.unwrap_or(true);
        }
        let node_name = node.name.clone();
        for (i, buf) in node.layer.buffers_mut().into_iter().enumerate() {
            let tag = if i == 0 { "moving_mean" } else { "moving_variance" };
            let (t, _) = take(&format!("{node_name}/{tag}"), &[buf.len()])?;
            *buf = t.into_data();
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};

    #[test]
    fn round_trip_is_f32_exact_and_stable() {
        let mut b = NetBuilder::new(3);
        let x = b.input("x", &[4]).unwrap();
        let h = b.add("dense", LayerSpec::dense(3, Activation::Relu), &[x]).unwrap();
        let n = b.add("bn", LayerSpec::batch_norm(), &[h]).unwrap();
        let o = b.add("softmax", LayerSpec::Softmax, &[n]).unwrap();
        let net = b.finish(o).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (json, bin) = save(&net, dir.path(), "m").unwrap();
        let loaded = load(&json).unwrap();
        for (a, b) in net.params().zip(loaded.params()) {
            let rounded: Vec<f64> = a.value.data().iter().map(|v| *v as f32 as f64).collect();
            assert_eq!(rounded, b.value.data());
        }
        let dir2 = tempfile::tempdir().unwrap();
        let (json2, bin2) = save(&loaded, dir2.path(), "m").unwrap();
        assert_eq!(fs::read(bin).unwrap(), fs::read(bin2).unwrap());
        assert_eq!(fs::read(json).unwrap(), fs::read(json2).unwrap());
    }
}
