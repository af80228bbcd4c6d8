//! "AWCK" checkpoint files: magic, u32 LE version, u32 LE tensor count, then
//! per tensor a u16 LE name length, the UTF-8 name and an AWTF record,
//! followed by a trailing UTF-8 `key = value` block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AwracleNet, ModelConfig};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{read_awtf_from, write_awtf_to, Tensor};

pub const AWCK_MAGIC: &[u8; 4] = b"AWCK";
pub const AWCK_VERSION: u32 = 1;

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: KeyValues,
}

impl Checkpoint {
    pub fn from_model(net: &AwracleNet<f32>) -> Self {
        let tensors = net
            .collect_parameters()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(false)))
            .collect();
        let mut meta = KeyValues::new("checkpoint");
        net.config.to_kv(&mut meta);
        Checkpoint { tensors, meta }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model described by the `model.*` metadata. Tensors whose
    /// names start with `extra_prefixes` (optimizer state) are ignored.
    pub fn to_model(&self, extra_prefixes: &[&str]) -> Result<AwracleNet<f32>> {
        let mut meta = self.meta.clone().split_prefix("model");
        let mut config = ModelConfig::default();
        config.apply_kv(&mut meta)?;
        meta.finish()?;
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if extra_prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            store.add(name.clone(), t.clone());
        }
        AwracleNet::from_params(config, &store)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(AWCK_MAGIC).map_err(io)?;
    w.write_all(&AWCK_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(ck.tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in &ck.tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::format(path.display().to_string(), format!("name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        write_awtf_to(&mut w, t).map_err(io)?;
    }
    w.write_all(ck.meta.to_text().as_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ctx = path.display().to_string();
    let fmt = |m: String| Error::format(ctx.clone(), m);
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|e| fmt(format!("truncated header: {e}")))?;
    if &head[..4] != AWCK_MAGIC {
        return Err(fmt(format!("bad magic {:?}", &head[..4])));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != AWCK_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)
            .map_err(|e| fmt(format!("tensor {i}: truncated name length: {e}")))?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)
            .map_err(|e| fmt(format!("tensor {i}: truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| fmt(format!("tensor {i}: {e}")))?;
        let t = read_awtf_from(&mut r, &format!("{ctx} [{name}]"))?;
        tensors.push((name, t));
    }
    let mut rest = String::new();
    r.read_to_string(&mut rest)
        .map_err(|e| fmt(format!("metadata block: {e}")))?;
    let meta = KeyValues::parse(&rest, &ctx)?;
    Ok(Checkpoint { tensors, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::desk();
        cfg.num_levels = 2;
        cfg.backbone_channels.truncate(2);
        cfg.dce_channels.truncate(2);
        cfg.ablation.fusion_level_when_single = 1;
        cfg.zero_init_head = false;
        let net = AwracleNet::<f32>::new(cfg).unwrap();
        let mut ck = Checkpoint::from_model(&net);
        ck.tensors.push(("optim.m.x".into(), Tensor::zeros(&[2])));
        ck.meta.set("train.epoch", 3);
        let path = dir.path().join("a.awck");
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta.get("train.epoch"), Some("3"));
        let net2 = back.to_model(&["optim."]).unwrap();
        assert_eq!(net2.config, net.config);
        for ((n1, t1), (n2, t2)) in net.collect_parameters().iter().zip(net2.collect_parameters()) {
            assert_eq!(*n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.awck");
        std::fs::write(&path, b"AWCK\x01\x00\x00\x00\x05\x00\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
