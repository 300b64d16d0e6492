//! Feature normalization `y = gamma * (x - mean) / sqrt(var + eps) + beta`
//! with batch, per-instance, or stored running statistics.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volio::Availability;

/// How the affine parameters were trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Batch statistics over `(n, H, W)` per channel.
    Bn,
    /// Per-instance statistics over `(H, W)`.
    In,
    /// Per-instance statistics with one `(gamma, beta)` set per contrast combination.
    #[serde(rename = "condin")]
    CondIn,
}

impl NormMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Some(NormMode::Bn),
            "in" => Some(NormMode::In),
            "condin" => Some(NormMode::CondIn),
            _ => None,
        }
    }

    pub fn n_sets(self) -> usize {
        match self {
            NormMode::CondIn => Availability::N_COMBINATIONS,
            _ => 1,
        }
    }
}

/// Which statistics normalize features at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InferenceStats {
    /// Moving averages accumulated during training.
    #[serde(rename = "train")]
    TrainStats,
    /// Statistics of each test input (test-time instance normalization).
    #[serde(rename = "ttin")]
    InstanceStats,
}

impl InferenceStats {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" | "train_stats" => Some(InferenceStats::TrainStats),
            "ttin" | "instance" | "instance_stats" => Some(InferenceStats::InstanceStats),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Normalization settings shared by every layer of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormPolicy {
    pub mode: NormMode,
    pub eps: f64,
    pub momentum: f64,
    pub inference_stats: InferenceStats,
}

impl NormPolicy {
    pub fn new(mode: NormMode) -> Self {
        Self { mode, eps: 1e-5, momentum: 0.1, inference_stats: InferenceStats::InstanceStats }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("momentum must lie in (0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    pub fn source(&self, phase: Phase) -> StatsSource {
        match (phase, self.mode, self.inference_stats) {
            (Phase::Train, NormMode::Bn, _) => StatsSource::Batch,
            (Phase::Train, _, _) => StatsSource::Instance,
            (Phase::Infer, _, InferenceStats::TrainStats) => StatsSource::Running,
            (Phase::Infer, _, InferenceStats::InstanceStats) => StatsSource::Instance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsSource {
    Batch,
    Instance,
    Running,
}

/// Parameters and running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub channels: usize,
    pub n_sets: usize,
    /// `[set][channel]`
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub source: StatsSource,
    /// Normalized features before the affine step.
    pub xhat: Tensor,
    /// `1 / sqrt(var + eps)` per group (channel for batch/running, sample×channel for instance).
    pub inv_std: Vec<f64>,
    pub sets: Vec<usize>,
    /// Per-channel statistics over `(n, H, W)` of the input, for moving averages.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct NormGrad {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

fn mean_var(values: impl Iterator<Item = f64> + Clone, count: usize) -> (f64, f64) {
    let m = values.clone().sum::<f64>() / count as f64;
    let v = values.map(|x| (x - m) * (x - m)).sum::<f64>() / count as f64;
    (m, v)
}

impl Norm {
    pub fn new(channels: usize, mode: NormMode) -> Self {
        let n_sets = mode.n_sets();
        Self {
            channels,
            n_sets,
            gamma: vec![1.0; n_sets * channels],
            beta: vec![0.0; n_sets * channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn set_index(&self, mode: NormMode, combo: Availability) -> usize {
        if mode == NormMode::CondIn && self.n_sets == Availability::N_COMBINATIONS {
            combo.condition_index()
        } else {
            0
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        policy: &NormPolicy,
        phase: Phase,
        combos: &[Availability],
    ) -> Result<(Tensor, NormCache)> {
        if x.c != self.channels {
            return Err(Error::Shape(format!("norm expects {} channels, got {}", self.channels, x.c)));
        }
        if combos.len() != x.n {
            return Err(Error::Shape(format!("{} contrast combinations for batch of {}", combos.len(), x.n)));
        }
        let (n, c, p) = (x.n, x.c, x.plane());
        let source = policy.source(phase);
        let sets: Vec<usize> = combos.iter().map(|&a| self.set_index(policy.mode, a)).collect();

        let mut batch_mean = vec![0.0; c];
        let mut batch_var = vec![0.0; c];
        if phase == Phase::Train {
            for ch in 0..c {
                let it = (0..n).flat_map(|s| x.channel(s, ch).iter().copied());
                let (m, v) = mean_var(it, n * p);
                batch_mean[ch] = m;
                batch_var[ch] = v;
            }
        }

        let mut xhat = Tensor::zeros(n, c, x.h, x.w);
        let mut inv_std = Vec::new();
        match source {
            StatsSource::Batch | StatsSource::Running => {
                for ch in 0..c {
                    let (m, v) = match source {
                        StatsSource::Batch => (batch_mean[ch], batch_var[ch]),
                        _ => (self.running_mean[ch], self.running_var[ch]),
                    };
                    let is = 1.0 / (v + policy.eps).sqrt();
                    inv_std.push(is);
                    for s in 0..n {
                        let src = x.channel(s, ch);
                        for (d, &v) in xhat.channel_mut(s, ch).iter_mut().zip(src) {
                            *d = (v - m) * is;
                        }
                    }
                }
            }
            StatsSource::Instance => {
                for s in 0..n {
                    for ch in 0..c {
                        let src = x.channel(s, ch);
                        let (m, v) = mean_var(src.iter().copied(), p);
                        let is = 1.0 / (v + policy.eps).sqrt();
                        inv_std.push(is);
                        for (d, &v) in xhat.channel_mut(s, ch).iter_mut().zip(src) {
                            *d = (v - m) * is;
                        }
                    }
                }
            }
        }

        let mut y = xhat.clone();
        for s in 0..n {
            let set = sets[s];
            for ch in 0..c {
                let g = self.gamma[set * c + ch];
                let b = self.beta[set * c + ch];
                for v in y.channel_mut(s, ch) {
                    *v = g * *v + b;
                }
            }
        }
        Ok((y, NormCache { source, xhat, inv_std, sets, batch_mean, batch_var }))
    }

    /// `stat <- (1 - momentum) * stat + momentum * batch_stat`.
    pub fn update_running(&mut self, cache: &NormCache, momentum: f64) {
        for ch in 0..self.channels {
            self.running_mean[ch] = (1.0 - momentum) * self.running_mean[ch] + momentum * cache.batch_mean[ch];
            self.running_var[ch] = (1.0 - momentum) * self.running_var[ch] + momentum * cache.batch_var[ch];
        }
    }

    pub fn backward(&self, cache: &NormCache, dy: &Tensor, grad: &mut NormGrad) -> Tensor {
        let (n, c, p) = (dy.n, dy.c, dy.plane());
        if grad.gamma.is_empty() {
            grad.gamma = vec![0.0; self.gamma.len()];
            grad.beta = vec![0.0; self.beta.len()];
        }
        // dxhat = gamma * dy, affine parameter gradients
        let mut dxhat = Tensor::zeros(n, c, dy.h, dy.w);
        for s in 0..n {
            let set = cache.sets[s];
            for ch in 0..c {
                let g = self.gamma[set * c + ch];
                let gy = dy.channel(s, ch);
                let xh = cache.xhat.channel(s, ch);
                let mut dg = 0.0;
                let mut db = 0.0;
                for ((d, &gv), &xv) in dxhat.channel_mut(s, ch).iter_mut().zip(gy).zip(xh) {
                    *d = g * gv;
                    dg += gv * xv;
                    db += gv;
                }
                grad.gamma[set * c + ch] += dg;
                grad.beta[set * c + ch] += db;
            }
        }

        let mut dx = Tensor::zeros(n, c, dy.h, dy.w);
        match cache.source {
            StatsSource::Running => {
                for ch in 0..c {
                    let is = cache.inv_std[ch];
                    for s in 0..n {
                        for (d, &g) in dx.channel_mut(s, ch).iter_mut().zip(dxhat.channel(s, ch)) {
                            *d = g * is;
                        }
                    }
                }
            }
            StatsSource::Batch => {
                let m = (n * p) as f64;
                for ch in 0..c {
                    let is = cache.inv_std[ch];
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for s in 0..n {
                        for (&g, &xh) in dxhat.channel(s, ch).iter().zip(cache.xhat.channel(s, ch)) {
                            sg += g;
                            sgx += g * xh;
                        }
                    }
                    let (mg, mgx) = (sg / m, sgx / m);
                    for s in 0..n {
                        let xh = cache.xhat.channel(s, ch);
                        let g = dxhat.channel(s, ch);
                        for ((d, &gv), &xv) in dx.channel_mut(s, ch).iter_mut().zip(g).zip(xh) {
                            *d = is * (gv - mg - xv * mgx);
                        }
                    }
                }
            }
            StatsSource::Instance => {
                let m = p as f64;
                for s in 0..n {
                    for ch in 0..c {
                        let is = cache.inv_std[s * c + ch];
                        let g = dxhat.channel(s, ch);
                        let xh = cache.xhat.channel(s, ch);
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        for (&gv, &xv) in g.iter().zip(xh) {
                            sg += gv;
                            sgx += gv * xv;
                        }
                        let (mg, mgx) = (sg / m, sgx / m);
                        for ((d, &gv), &xv) in dx.channel_mut(s, ch).iter_mut().zip(g).zip(xh) {
                            *d = is * (gv - mg - xv * mgx);
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Normalizes `x` with a standalone layer; `combos` are raw availability
/// bitmasks, which must be nonzero under conditional normalization.
pub fn normalize(x: &Tensor, layer: &Norm, policy: &NormPolicy, phase: Phase, combos: &[u8]) -> Result<Tensor> {
    let combos = combos
        .iter()
        .map(|&b| match policy.mode {
            NormMode::CondIn => Availability::new(b),
            _ => Ok(Availability::new(b).unwrap_or(Availability::FULL)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(layer.forward(x, policy, phase, &combos)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn infer_policy(mode: NormMode, stats: InferenceStats, eps: f64) -> NormPolicy {
        NormPolicy { mode, eps, momentum: 0.1, inference_stats: stats }
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::from_vec(1, 1, 2, 3, vec![5.0; 6]).unwrap();
        let layer = Norm::new(1, NormMode::In);
        let p = infer_policy(NormMode::In, InferenceStats::InstanceStats, 1e-5);
        let y = normalize(&x, &layer, &p, Phase::Infer, &[0b1111]).unwrap();
        assert!(y.data.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn three_values_population_variance() {
        // mean 2, population variance 2/3: (x - 2) / sqrt(2/3)
        let x = Tensor::from_vec(1, 1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let layer = Norm::new(1, NormMode::In);
        let mut p = infer_policy(NormMode::In, InferenceStats::InstanceStats, 1e-5);
        p.eps = 0.0;
        let y = normalize(&x, &layer, &p, Phase::Infer, &[1]).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in y.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn condin_rejects_zero_combination() {
        let x = Tensor::zeros(1, 1, 2, 2);
        let layer = Norm::new(1, NormMode::CondIn);
        let p = infer_policy(NormMode::CondIn, InferenceStats::InstanceStats, 1e-5);
        assert!(matches!(normalize(&x, &layer, &p, Phase::Infer, &[0]), Err(Error::InvalidCondition(0))));
    }

    #[test]
    fn train_stats_inference_reads_running_averages() {
        let mut layer = Norm::new(1, NormMode::Bn);
        layer.running_mean = vec![2.0];
        layer.running_var = vec![4.0];
        let x = Tensor::from_vec(1, 1, 1, 2, vec![2.0, 6.0]).unwrap();
        let mut p = infer_policy(NormMode::Bn, InferenceStats::TrainStats, 1e-5);
        p.eps = 0.0;
        let y = normalize(&x, &layer, &p, Phase::Infer, &[15]).unwrap();
        assert_eq!(y.data, vec![0.0, 2.0]);
    }

    #[test]
    fn moving_average_update_rule() {
        let mut layer = Norm::new(1, NormMode::Bn);
        let x = Tensor::from_vec(2, 1, 1, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let p = NormPolicy::new(NormMode::Bn);
        let (_, cache) = layer.forward(&x, &p, Phase::Train, &[Availability::FULL; 2]).unwrap();
        assert_eq!(cache.batch_mean, vec![4.0]);
        assert_eq!(cache.batch_var, vec![5.0]);
        layer.update_running(&cache, 0.1);
        assert!((layer.running_mean[0] - 0.4).abs() < 1e-15);
        assert!((layer.running_var[0] - (0.9 + 0.5)).abs() < 1e-15);
    }
}
