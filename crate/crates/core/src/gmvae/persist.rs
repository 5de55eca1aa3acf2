//! Model files: a text manifest record followed by every parameter tensor
//! in f64, in the fixed order of [`param_names`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::tensor::io::{read_bytes, read_tensor, write_bytes, write_tensor, DType};
use crate::tensor::Tensor;

use super::arch::{Network, LATENT_DIM, LAYERS};
use super::mixture::Mixture;
use super::GmvaeModel;

pub const FORMAT: &str = "gmfcvae-model";
pub const VERSION: u32 = 1;

pub fn param_names() -> Vec<String> {
    let mut names: Vec<String> = LAYERS
        .iter()
        .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
        .collect();
    names.extend(["mixture.logits", "mixture.means", "mixture.log_vars"].map(String::from));
    names
}

fn params(model: &GmvaeModel) -> Vec<&Tensor> {
    let mut out: Vec<&Tensor> = model.net.layers.iter().flat_map(|(w, b)| [w, b]).collect();
    out.extend([&model.mixture.logits, &model.mixture.means, &model.mixture.log_vars]);
    out
}

/// Write `model`; `extra` entries are appended to the manifest.
pub fn save_model(path: &Path, model: &GmvaeModel, extra: &Manifest) -> Result<()> {
    let mut m = Manifest::new();
    m.set("format", FORMAT)
        .set("version", VERSION)
        .set("components", model.components())
        .set("latent_dim", LATENT_DIM);
    for l in &LAYERS {
        m.set(format!("layer.{}", l.name), l.describe());
    }
    m.set("params", param_names().join(","));
    for (k, v) in extra.entries() {
        m.set(k.clone(), v);
    }
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_bytes(&mut w, m.render().as_bytes()).map_err(io)?;
    for t in params(model) {
        write_tensor(&mut w, t, DType::F64).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a model and its full manifest.
pub fn load_model(path: &Path) -> Result<(GmvaeModel, Manifest)> {
    let fmt = |reason: String| Error::format(path, reason);
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let text = read_bytes(&mut r).map_err(|e| fmt(format!("manifest: {e}")))?;
    let text = String::from_utf8(text).map_err(|_| fmt("manifest is not UTF-8".into()))?;
    let m = Manifest::parse_text(&text).map_err(|e| fmt(e.to_string()))?;
    if m.get("format") != Some(FORMAT) {
        return Err(fmt("not a model file".into()));
    }
    if m.parse::<u32>("version").map_err(|e| fmt(e.to_string()))? != Some(VERSION) {
        return Err(fmt(format!("unsupported version {:?}", m.get("version"))));
    }
    if m.parse::<usize>("latent_dim").map_err(|e| fmt(e.to_string()))? != Some(LATENT_DIM) {
        return Err(fmt("latent dimension mismatch".into()));
    }
    for l in &LAYERS {
        if m.get(&format!("layer.{}", l.name)) != Some(l.describe().as_str()) {
            return Err(fmt(format!("layer {} geometry differs", l.name)));
        }
    }
    let names = param_names();
    let mut tensors = Vec::with_capacity(names.len());
    for name in &names {
        let (t, dtype) = read_tensor(&mut r).map_err(|e| fmt(format!("{name}: {e}")))?;
        if dtype != DType::F64 {
            return Err(fmt(format!("{name} is not stored as f64")));
        }
        tensors.push(t);
    }
    let mixture = tensors.split_off(2 * LAYERS.len());
    let net = Network {
        layers: tensors.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect(),
    };
    let [logits, means, log_vars]: [Tensor; 3] = mixture.try_into().expect("three mixture tensors");
    let mixture = Mixture::new(logits, means, log_vars).map_err(|e| fmt(e.to_string()))?;
    let model = GmvaeModel::new(net, mixture).map_err(|e| fmt(e.to_string()))?;
    if m.parse::<usize>("components").map_err(|e| fmt(e.to_string()))? != Some(model.components()) {
        return Err(fmt("component count disagrees with stored mixture".into()));
    }
    Ok((model, m))
}
