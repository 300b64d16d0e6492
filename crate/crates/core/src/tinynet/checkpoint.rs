//! Versioned binary checkpoint.
//!
//! Layout (little endian): 8-byte magic, `u32` version, `u32` header length,
//! JSON header (configuration echo, optimizer step, tensor names), then for
//! every tensor in declared order a `u64` element count and `f64` values.
//! Per unit the tensors are conv weight, conv bias, gamma and beta (all
//! conditional sets), running mean and running variance; then the head
//! weight and bias; then, if present, Adam first and second moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::net::Net;
use super::norm::NormPolicy;
use super::{NetConfig, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSSEGCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: Net,
    pub adam: Option<Adam>,
    pub train_config: Option<TrainConfig>,
    pub iteration: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    net_config: NetConfig,
    policy: NormPolicy,
    train_config: Option<TrainConfig>,
    iteration: usize,
    adam: Option<AdamHeader>,
    condin_sets: usize,
    tensors: Vec<(String, usize)>,
}

fn net_tensors(net: &Net) -> Vec<(String, &Vec<f64>)> {
    let mut out = Vec::new();
    for (i, u) in net.units.iter().enumerate() {
        out.push((format!("unit{i}.conv.weight"), &u.conv.weight));
        out.push((format!("unit{i}.conv.bias"), &u.conv.bias));
        out.push((format!("unit{i}.norm.gamma"), &u.norm.gamma));
        out.push((format!("unit{i}.norm.beta"), &u.norm.beta));
        out.push((format!("unit{i}.norm.running_mean"), &u.norm.running_mean));
        out.push((format!("unit{i}.norm.running_var"), &u.norm.running_var));
    }
    out.push(("head.weight".into(), &net.head.weight));
    out.push(("head.bias".into(), &net.head.bias));
    out
}

fn net_tensors_mut(net: &mut Net) -> Vec<&mut Vec<f64>> {
    let mut out = Vec::new();
    for u in &mut net.units {
        out.push(&mut u.conv.weight);
        out.push(&mut u.conv.bias);
        out.push(&mut u.norm.gamma);
        out.push(&mut u.norm.beta);
        out.push(&mut u.norm.running_mean);
        out.push(&mut u.norm.running_var);
    }
    out.push(&mut net.head.weight);
    out.push(&mut net.head.bias);
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = net_tensors(&self.net);
        if let Some(adam) = &self.adam {
            for (k, m) in adam.m.iter().enumerate() {
                tensors.push((format!("adam.m.{k}"), m));
            }
            for (k, v) in adam.v.iter().enumerate() {
                tensors.push((format!("adam.v.{k}"), v));
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            net_config: self.net.config.clone(),
            policy: self.net.policy,
            train_config: self.train_config.clone(),
            iteration: self.iteration,
            adam: self
                .adam
                .as_ref()
                .map(|a| AdamHeader { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step }),
            condin_sets: self.net.units.first().map_or(0, |u| u.norm.n_sets),
            tensors: tensors.iter().map(|(n, t)| (n.clone(), t.len())).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut pos = 16 + hlen;
        let mut values = Vec::with_capacity(header.tensors.len());
        for (name, len) in &header.tensors {
            let n = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated tensor table"))?;
            let n = u64::from_le_bytes(n.try_into().unwrap()) as usize;
            if n != *len {
                return Err(Error::Checkpoint(format!("tensor {name}: {n} values, header says {len}")));
            }
            pos += 8;
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| Error::Checkpoint(format!("tensor {name} truncated")))?;
            values.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<f64>>());
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }

        let mut net = Net::new(header.net_config, header.policy, 0)?;
        let slots = net_tensors_mut(&mut net);
        let n_net = slots.len();
        if values.len() < n_net {
            return Err(bad("missing network tensors"));
        }
        let mut it = values.into_iter();
        for (slot, v) in slots.into_iter().zip(it.by_ref()) {
            if slot.len() != v.len() {
                return Err(bad("tensor size does not match the configured architecture"));
            }
            *slot = v;
        }
        let rest: Vec<Vec<f64>> = it.collect();
        let adam = match header.adam {
            Some(h) => {
                if rest.len() % 2 != 0 {
                    return Err(bad("odd number of optimizer tensors"));
                }
                let half = rest.len() / 2;
                let mut a = Adam::new(h.lr, h.beta1, h.beta2, h.eps);
                a.step = h.step;
                a.m = rest[..half].to_vec();
                a.v = rest[half..].to_vec();
                Some(a)
            }
            None if rest.is_empty() => None,
            None => return Err(bad("optimizer tensors without optimizer state")),
        };
        Ok(Self { net, adam, train_config: header.train_config, iteration: header.iteration })
    }

    /// Number of `(gamma, beta)` sets per normalization layer.
    pub fn condition_sets(&self) -> usize {
        self.net.units.first().map_or(0, |u| u.norm.n_sets)
    }
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::NormMode;

    #[test]
    fn round_trip_preserves_everything() {
        let mut net = Net::new(NetConfig::desk(), NormPolicy::new(NormMode::CondIn), 5).unwrap();
        net.units[3].norm.running_var[2] = 0.25;
        net.units[0].norm.gamma[14 * 8 + 1] = 3.5;
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let grads: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.5; p.len()]).collect();
        adam.update(net.params_mut(), grads.iter().collect());
        let ck = Checkpoint { net, adam: Some(adam), train_config: Some(TrainConfig::default()), iteration: 1 };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.net, ck.net);
        assert_eq!(back.adam, ck.adam);
        assert_eq!(back.iteration, 1);
        assert_eq!(back.condition_sets(), 15);
    }

    #[test]
    fn rejects_corruption() {
        let net = Net::new(NetConfig::desk(), NormPolicy::new(NormMode::Bn), 5).unwrap();
        let ck = Checkpoint { net, adam: None, train_config: None, iteration: 0 };
        let mut b = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
    }
}
