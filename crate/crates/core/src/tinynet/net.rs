use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{
    maxpool2, maxpool2_backward, sigmoid, sigmoid_backward, upsample_nearest, upsample_nearest_backward,
    Activation, Conv2d, ConvGrad,
};
use super::norm::{Norm, NormCache, NormGrad, NormPolicy, Phase};
use super::tensor::Tensor;
use super::NetConfig;
use crate::error::{Error, Result};
use crate::fusion::SlabPredictor;
use crate::orient::Slab25D;
use crate::volio::Availability;

/// Convolution followed by normalization and activation (order configurable).
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub conv: Conv2d,
    pub norm: Norm,
}

#[derive(Debug, Clone)]
pub struct UnitCache {
    input: Tensor,
    /// Input of the activation function.
    pre_act: Tensor,
    pub norm: NormCache,
}

#[derive(Debug, Clone, Default)]
pub struct UnitGrad {
    pub conv: ConvGrad,
    pub norm: NormGrad,
}

impl Unit {
    fn forward(
        &self,
        x: Tensor,
        act: Activation,
        norm_first: bool,
        policy: &NormPolicy,
        phase: Phase,
        combos: &[Availability],
    ) -> Result<(Tensor, UnitCache)> {
        let c = self.conv.forward(&x);
        if norm_first {
            let (n, nc) = self.norm.forward(&c, policy, phase, combos)?;
            let out = act.forward(&n);
            Ok((out, UnitCache { input: x, pre_act: n, norm: nc }))
        } else {
            let a = act.forward(&c);
            let (out, nc) = self.norm.forward(&a, policy, phase, combos)?;
            Ok((out, UnitCache { input: x, pre_act: c, norm: nc }))
        }
    }

    fn backward(&self, dout: &Tensor, cache: &UnitCache, act: Activation, norm_first: bool) -> (Tensor, UnitGrad) {
        let mut g = UnitGrad::default();
        let dconv = if norm_first {
            let dn = act.backward(&cache.pre_act, dout);
            self.norm.backward(&cache.norm, &dn, &mut g.norm)
        } else {
            let da = self.norm.backward(&cache.norm, dout, &mut g.norm);
            act.backward(&cache.pre_act, &da)
        };
        let dx = self.conv.backward(&cache.input, &dconv, &mut g.conv);
        (dx, g)
    }
}

/// U-shaped encoder-decoder producing a sigmoid probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub config: NetConfig,
    pub policy: NormPolicy,
    /// Encoder units `2l, 2l+1`; then one up-convolution per decoder level;
    /// then two units per decoder level.
    pub units: Vec<Unit>,
    /// 1×1 convolution to a single logit channel.
    pub head: Conv2d,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub units: Vec<UnitCache>,
    pools: Vec<((usize, usize, usize, usize), Vec<usize>)>,
    up_shapes: Vec<(usize, usize)>,
    head_in: Tensor,
    pub probs: Tensor,
}

impl ForwardCache {
    /// On/off pattern of every activation input and every pooling argmax.
    /// Two parameter settings with equal signatures lie on the same linear
    /// piece of the ReLU/max-pool nonlinearities.
    pub fn kink_signature(&self) -> (Vec<bool>, Vec<usize>) {
        let on = self.units.iter().flat_map(|u| u.pre_act.data.iter().map(|&v| v > 0.0)).collect();
        let arg = self.pools.iter().flat_map(|(_, a)| a.iter().copied()).collect();
        (on, arg)
    }
}

/// Parameter gradients in the same order as [`Net::params_mut`].
#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub units: Vec<UnitGrad>,
    pub head: ConvGrad,
}

impl Grads {
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for u in &self.units {
            out.extend([&u.conv.weight, &u.conv.bias, &u.norm.gamma, &u.norm.beta]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }
}

impl Net {
    /// He-initialized weights, zero biases, unit `gamma`, zero `beta`.
    pub fn new(config: NetConfig, policy: NormPolicy, seed: u64) -> Result<Self> {
        config.validate()?;
        policy.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = config.levels;
        let ch = &config.channels;
        let mut conv = |cin: usize, cout: usize, k: usize| {
            let mut c = Conv2d::zeros(cin, cout, k);
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            for w in &mut c.weight {
                *w = dist.sample(&mut rng);
            }
            c
        };
        let mut units = Vec::new();
        let unit = |conv: Conv2d| {
            let cout = conv.cout;
            Unit { conv, norm: Norm::new(cout, policy.mode) }
        };
        for lvl in 0..l {
            let cin = if lvl == 0 { config.in_channels } else { ch[lvl - 1] };
            units.push(unit(conv(cin, ch[lvl], 3)));
            units.push(unit(conv(ch[lvl], ch[lvl], 3)));
        }
        for lvl in 0..l - 1 {
            units.push(unit(conv(ch[lvl + 1], ch[lvl], 3)));
        }
        for lvl in 0..l - 1 {
            units.push(unit(conv(2 * ch[lvl], ch[lvl], 3)));
            units.push(unit(conv(ch[lvl], ch[lvl], 3)));
        }
        let head = conv(ch[0], 1, 1);
        Ok(Self { config, policy, units, head })
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    fn enc(&self, lvl: usize, k: usize) -> usize {
        2 * lvl + k
    }

    fn up(&self, lvl: usize) -> usize {
        2 * self.levels() + lvl
    }

    fn dec(&self, lvl: usize, k: usize) -> usize {
        3 * self.levels() - 1 + 2 * lvl + k
    }

    /// Unit index of the last encoder unit at the coarsest level.
    pub fn bottleneck_unit(&self) -> usize {
        self.enc(self.levels() - 1, 1)
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for u in &self.units {
            out.extend([&u.conv.weight, &u.conv.bias, &u.norm.gamma, &u.norm.beta]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for u in &mut self.units {
            out.push(&mut u.conv.weight);
            out.push(&mut u.conv.bias);
            out.push(&mut u.norm.gamma);
            out.push(&mut u.norm.beta);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Forward pass returning `(n, 1, h, w)` probabilities and the cache.
    pub fn forward(&self, x: &Tensor, combos: &[Availability], phase: Phase) -> Result<ForwardCache> {
        if x.c != self.config.in_channels {
            return Err(Error::Shape(format!("network expects {} input channels, got {}", self.config.in_channels, x.c)));
        }
        if combos.len() != x.n {
            return Err(Error::Shape(format!("{} combinations for batch of {}", combos.len(), x.n)));
        }
        let act = self.config.activation;
        let nf = self.config.norm_before_activation;
        let l = self.levels();
        let mut caches: Vec<Option<UnitCache>> = vec![None; self.units.len()];
        let mut run = |idx: usize, input: Tensor| -> Result<Tensor> {
            let (out, c) = self.units[idx].forward(input, act, nf, &self.policy, phase, combos)?;
            caches[idx] = Some(c);
            Ok(out)
        };

        let mut pools = Vec::new();
        let mut skips = Vec::new();
        let mut h = x.clone();
        for lvl in 0..l {
            if lvl > 0 {
                let shape = h.shape();
                let (p, arg) = maxpool2(&h);
                pools.push((shape, arg));
                h = p;
            }
            h = run(self.enc(lvl, 0), h)?;
            h = run(self.enc(lvl, 1), h)?;
            if lvl < l - 1 {
                skips.push(h.clone());
            }
        }
        let mut up_shapes = vec![(0, 0); l - 1];
        for lvl in (0..l - 1).rev() {
            let skip = &skips[lvl];
            up_shapes[lvl] = (h.h, h.w);
            let u = upsample_nearest(&h, skip.h, skip.w);
            let u = run(self.up(lvl), u)?;
            let cat = Tensor::concat_channels(skip, &u);
            h = run(self.dec(lvl, 0), cat)?;
            h = run(self.dec(lvl, 1), h)?;
        }
        let logits = self.head.forward(&h);
        let probs = sigmoid(&logits);
        Ok(ForwardCache {
            units: caches.into_iter().map(|c| c.expect("every unit runs")).collect(),
            pools,
            up_shapes,
            head_in: h,
            probs,
        })
    }

    /// Backpropagates `dprobs` (gradient of the loss w.r.t. the output
    /// probabilities). Returns parameter gradients and the input gradient.
    pub fn backward(&self, cache: &ForwardCache, dprobs: &Tensor) -> (Grads, Tensor) {
        let dlogits = sigmoid_backward(&cache.probs, dprobs);
        self.backward_from_logits(cache, &dlogits)
    }

    /// Pre-sigmoid head output of a cached forward pass.
    pub fn logits(&self, cache: &ForwardCache) -> Tensor {
        self.head.forward(&cache.head_in)
    }

    /// As [`Net::backward`], starting from the gradient w.r.t. the logits.
    pub fn backward_from_logits(&self, cache: &ForwardCache, dlogits: &Tensor) -> (Grads, Tensor) {
        let act = self.config.activation;
        let nf = self.config.norm_before_activation;
        let l = self.levels();
        let ch = &self.config.channels;
        let mut grads = Grads { units: vec![UnitGrad::default(); self.units.len()], head: ConvGrad::default() };
        let back = |idx: usize, d: &Tensor, grads: &mut Grads| -> Tensor {
            let (dx, g) = self.units[idx].backward(d, &cache.units[idx], act, nf);
            grads.units[idx] = g;
            dx
        };

        let mut dh = self.head.backward(&cache.head_in, dlogits, &mut grads.head);
        let mut dskips = Vec::with_capacity(l - 1);
        for lvl in 0..l - 1 {
            dh = back(self.dec(lvl, 1), &dh, &mut grads);
            let dcat = back(self.dec(lvl, 0), &dh, &mut grads);
            let (dskip, du) = dcat.split_channels(ch[lvl]);
            dskips.push(dskip);
            let du = back(self.up(lvl), &du, &mut grads);
            let (uh, uw) = cache.up_shapes[lvl];
            dh = upsample_nearest_backward(&du, uh, uw);
        }
        for lvl in (0..l).rev() {
            if lvl < l - 1 {
                for (a, b) in dh.data.iter_mut().zip(&dskips[lvl].data) {
                    *a += b;
                }
            }
            dh = back(self.enc(lvl, 1), &dh, &mut grads);
            dh = back(self.enc(lvl, 0), &dh, &mut grads);
            if lvl > 0 {
                let (shape, arg) = &cache.pools[lvl - 1];
                dh = maxpool2_backward(*shape, arg, &dh);
            }
        }
        (grads, dh)
    }

    /// Folds the batch statistics of a training forward pass into the
    /// moving averages of every normalization layer.
    pub fn update_running(&mut self, cache: &ForwardCache) {
        let m = self.policy.momentum;
        for (u, c) in self.units.iter_mut().zip(&cache.units) {
            u.norm.update_running(&c.norm, m);
        }
    }

    /// Probability map of the slab's center slice, `(width, height)` layout.
    pub fn predict_slab(&self, slab: &Slab25D) -> Result<Vec<f32>> {
        let x = slabs_to_tensor(std::slice::from_ref(slab))?;
        let cache = self.forward(&x, &[slab.availability], Phase::Infer)?;
        Ok(cache.probs.data.iter().map(|&p| p as f32).collect())
    }

    pub fn with_inference_stats(&self, stats: super::InferenceStats) -> Net {
        let mut n = self.clone();
        n.policy.inference_stats = stats;
        n
    }
}

impl SlabPredictor for Net {
    fn predict(&self, slab: &Slab25D) -> Result<Vec<f32>> {
        self.predict_slab(slab)
    }
}

/// Stacks equally shaped slabs into an `(n, 12, height, width)` tensor.
pub fn slabs_to_tensor(slabs: &[Slab25D]) -> Result<Tensor> {
    let first = slabs.first().ok_or_else(|| Error::Empty("no slabs".into()))?;
    let (w, h) = first.shape;
    let mut data = Vec::with_capacity(slabs.len() * Slab25D::N_CHANNELS * w * h);
    for s in slabs {
        if s.shape != first.shape {
            return Err(Error::Shape(format!("slab shapes {:?} and {:?} differ", s.shape, first.shape)));
        }
        data.extend(s.channels.iter().map(|&v| v as f64));
    }
    Tensor::from_vec(slabs.len(), Slab25D::N_CHANNELS, h, w, data)
}
