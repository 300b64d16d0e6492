use serde::{Deserialize, Serialize};

use super::net::{slabs_to_tensor, Net};
use super::norm::Phase;
use crate::error::Result;
use crate::orient::Slab25D;

/// Channel-wise statistics of the normalized (pre-affine) features of one
/// layer for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStatRecord {
    pub input_id: usize,
    pub layer_id: usize,
    pub channel: usize,
    pub mean: f64,
    pub var: f64,
}

/// Runs each input alone through `net` at inference and records the mean
/// and population variance of every channel of the listed layers (unit
/// indices). An empty `layers` list means the first encoder unit and the
/// bottleneck.
pub fn export_norm_stats(net: &Net, inputs: &[Slab25D], layers: &[usize]) -> Result<Vec<NormStatRecord>> {
    let default = [0, net.bottleneck_unit()];
    let layers = if layers.is_empty() { &default[..] } else { layers };
    let mut out = Vec::new();
    for (input_id, slab) in inputs.iter().enumerate() {
        let x = slabs_to_tensor(std::slice::from_ref(slab))?;
        let cache = net.forward(&x, &[slab.availability], Phase::Infer)?;
        for &layer_id in layers {
            let xhat = &cache.units[layer_id].norm.xhat;
            for channel in 0..xhat.c {
                let v = xhat.channel(0, channel);
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                out.push(NormStatRecord { input_id, layer_id, channel, mean, var });
            }
        }
    }
    Ok(out)
}

pub fn stats_to_csv(records: &[NormStatRecord]) -> String {
    let mut s = String::from("input_id,layer_id,channel,mean,var\n");
    for r in records {
        s.push_str(&format!("{},{},{},{},{}\n", r.input_id, r.layer_id, r.channel, r.mean, r.var));
    }
    s
}
