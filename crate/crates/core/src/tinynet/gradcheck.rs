//! Central finite-difference checks of the hand-written gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::{
    maxpool2, maxpool2_backward, sigmoid, sigmoid_backward, upsample_nearest, upsample_nearest_backward,
    Activation, Conv2d, ConvGrad,
};
use super::net::{ForwardCache, Net};
use super::norm::{Norm, NormGrad, NormMode, NormPolicy, Phase};
use super::tensor::Tensor;
use super::NetConfig;
use crate::error::Result;
use crate::volio::Availability;

/// `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

/// Max relative error between `analytic[i]` and the central difference of
/// `f` at `x` along coordinate `i`, over `indices`.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    indices: &[usize],
) -> f64 {
    let mut x = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * h)));
    }
    worst
}

/// Which network output the scalar probe loss is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    Probabilities,
    Logits,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckSpec {
    pub h: f64,
    /// Number of sampled parameter coordinates.
    pub samples: usize,
    pub seed: u64,
    pub phase: Phase,
    pub target: CheckTarget,
}

impl Default for CheckSpec {
    fn default() -> Self {
        Self { h: 1e-4, samples: 200, seed: 0, phase: Phase::Train, target: CheckTarget::Probabilities }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..n * c * h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(n, c, h, w, data).expect("sized")
}

fn probe(out: &Tensor, r: &[f64]) -> f64 {
    out.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Outcome of [`backward_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Max relative error over the checked coordinates.
    pub max_error: f64,
    pub checked: usize,
    /// Coordinates whose `+-h` interval crosses a ReLU or max-pool switch
    /// point; central differences are meaningless there.
    pub skipped_kinks: usize,
}

/// Relative error of the network parameter gradients for the probe loss
/// `sum(r * output)` with fixed random `r`, over sampled coordinates.
pub fn backward_check(net: &Net, x: &Tensor, combos: &[Availability], spec: &CheckSpec) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let outputs = |net: &Net| -> Result<(Tensor, ForwardCache)> {
        let cache = net.forward(x, combos, spec.phase)?;
        let out = match spec.target {
            CheckTarget::Probabilities => cache.probs.clone(),
            CheckTarget::Logits => net.logits(&cache),
        };
        Ok((out, cache))
    };
    let (out, cache) = outputs(net)?;
    let signature = cache.kink_signature();
    let r: Vec<f64> = (0..out.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dout = Tensor::from_vec(out.n, out.c, out.h, out.w, r.clone())?;
    let (grads, _) = match spec.target {
        CheckTarget::Probabilities => net.backward(&cache, &dout),
        CheckTarget::Logits => net.backward_from_logits(&cache, &dout),
    };
    let analytic: Vec<Vec<f64>> = grads
        .tensors()
        .iter()
        .zip(net.params())
        .map(|(g, p)| if g.is_empty() { vec![0.0; p.len()] } else { (*g).clone() })
        .collect();

    // a conv bias followed directly by normalization is removed by the mean
    // subtraction: its exact gradient is zero and only roundoff would be measured
    let inert = |k: usize| net.config.norm_before_activation && k < 4 * net.units.len() && k % 4 == 1;
    let coords: Vec<(usize, usize)> = net
        .params()
        .iter()
        .enumerate()
        .filter(|(k, _)| !inert(*k))
        .flat_map(|(k, p)| (0..p.len()).map(move |i| (k, i)))
        .collect();
    let picks = sample(&mut rng, coords.len(), spec.samples.min(coords.len()));
    let mut probe_net = net.clone();
    let mut report = GradCheck { max_error: 0.0, checked: 0, skipped_kinks: 0 };
    for pick in picks {
        let (k, i) = coords[pick];
        let orig = probe_net.params()[k][i];
        let mut eval = |v: f64| -> Result<(f64, bool)> {
            probe_net.params_mut()[k][i] = v;
            let (o, c) = outputs(&probe_net)?;
            Ok((probe(&o, &r), c.kink_signature() == signature))
        };
        let (fp, same_p) = eval(orig + spec.h)?;
        let (fm, same_m) = eval(orig - spec.h)?;
        probe_net.params_mut()[k][i] = orig;
        if !(same_p && same_m) {
            report.skipped_kinks += 1;
            continue;
        }
        report.checked += 1;
        report.max_error = report.max_error.max(relative_error(analytic[k][i], (fp - fm) / (2.0 * spec.h)));
    }
    Ok(report)
}

/// Input-gradient check of a single layer over every input coordinate.
fn input_check(
    x: &Tensor,
    forward: impl Fn(&Tensor) -> Tensor,
    backward: impl Fn(&Tensor, &Tensor) -> Tensor,
    rng: &mut ChaCha8Rng,
    h: f64,
) -> f64 {
    let y = forward(x);
    let r: Vec<f64> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dy = Tensor::from_vec(y.n, y.c, y.h, y.w, r.clone()).expect("sized");
    let dx = backward(x, &dy);
    let idx: Vec<usize> = (0..x.data.len()).collect();
    let mut xt = x.clone();
    finite_difference_check(
        |v| {
            xt.data.copy_from_slice(v);
            probe(&forward(&xt), &r)
        },
        &x.data,
        &dx.data,
        h,
        &idx,
    )
}

fn norm_check(mode: NormMode, phase: Phase, rng: &mut ChaCha8Rng, h: f64) -> f64 {
    let policy = NormPolicy::new(mode);
    let mut norm = Norm::new(3, mode);
    for g in norm.gamma.iter_mut() {
        *g = rng.random_range(0.5..1.5);
    }
    for b in norm.beta.iter_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    let combos = [Availability::new(0b1011).unwrap(), Availability::new(0b0001).unwrap()];
    let x = random_tensor(rng, 2, 3, 4, 5);
    let fwd = |t: &Tensor| norm.forward(t, &policy, phase, &combos).expect("valid").0;
    let r: Vec<f64> = (0..x.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, cache) = norm.forward(&x, &policy, phase, &combos).expect("valid");
    let dy = Tensor::from_vec(2, 3, 4, 5, r.clone()).expect("sized");
    let mut grad = NormGrad::default();
    let dx = norm.backward(&cache, &dy, &mut grad);
    let idx: Vec<usize> = (0..x.data.len()).collect();

    let mut xt = x.clone();
    let ex = finite_difference_check(
        |v| {
            xt.data.copy_from_slice(v);
            probe(&fwd(&xt), &r)
        },
        &x.data,
        &dx.data,
        h,
        &idx,
    );
    let pidx: Vec<usize> = (0..norm.gamma.len()).collect();
    let mut nt = norm.clone();
    let eg = finite_difference_check(
        |v| {
            nt.gamma.copy_from_slice(v);
            probe(&nt.forward(&x, &policy, phase, &combos).expect("valid").0, &r)
        },
        &norm.gamma,
        &grad.gamma,
        h,
        &pidx,
    );
    let mut nt = norm.clone();
    let eb = finite_difference_check(
        |v| {
            nt.beta.copy_from_slice(v);
            probe(&nt.forward(&x, &policy, phase, &combos).expect("valid").0, &r)
        },
        &norm.beta,
        &grad.beta,
        h,
        &pidx,
    );
    ex.max(eg).max(eb)
}

fn conv_check(rng: &mut ChaCha8Rng, h: f64) -> (f64, f64) {
    let mut conv = Conv2d::zeros(3, 2, 3);
    for w in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
        *w = rng.random_range(-1.0..1.0);
    }
    let x = random_tensor(rng, 2, 3, 5, 6);
    let ein = input_check(
        &x,
        |t| conv.forward(t),
        |t, d| conv.backward(t, d, &mut ConvGrad::default()),
        rng,
        h,
    );
    let y = conv.forward(&x);
    let r: Vec<f64> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dy = Tensor::from_vec(y.n, y.c, y.h, y.w, r.clone()).expect("sized");
    let mut g = ConvGrad::default();
    conv.backward(&x, &dy, &mut g);
    let mut ct = conv.clone();
    let ew = finite_difference_check(
        |v| {
            ct.weight.copy_from_slice(v);
            probe(&ct.forward(&x), &r)
        },
        &conv.weight,
        &g.weight,
        h,
        &(0..conv.weight.len()).collect::<Vec<_>>(),
    );
    let mut ct = conv.clone();
    let eb = finite_difference_check(
        |v| {
            ct.bias.copy_from_slice(v);
            probe(&ct.forward(&x), &r)
        },
        &conv.bias,
        &g.bias,
        h,
        &(0..conv.bias.len()).collect::<Vec<_>>(),
    );
    (ein, ew.max(eb))
}

fn tiny_input(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    random_tensor(rng, n, crate::orient::Slab25D::N_CHANNELS, 8, 8)
}

fn tiny_config(activation: Activation) -> NetConfig {
    NetConfig { levels: 2, channels: vec![2, 4], activation, ..NetConfig::desk() }
}

/// Worst relative error per layer type and per tiny network, at `h = 1e-4`.
/// The `linear_*` entries are exactly linear in the perturbed coordinate.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (ein, eparam) = conv_check(&mut rng, h);
    out.push(("linear_conv_input", ein));
    out.push(("linear_conv_params", eparam));

    let x = random_tensor(&mut rng, 2, 2, 5, 7);
    let e = input_check(
        &x,
        |t| maxpool2(t).0,
        |t, d| {
            let (_, arg) = maxpool2(t);
            maxpool2_backward(t.shape(), &arg, d)
        },
        &mut rng,
        h,
    );
    out.push(("linear_maxpool", e));

    let x = random_tensor(&mut rng, 2, 2, 3, 4);
    let e = input_check(
        &x,
        |t| upsample_nearest(t, 5, 7),
        |t, d| upsample_nearest_backward(d, t.h, t.w),
        &mut rng,
        h,
    );
    out.push(("linear_upsample", e));

    let x = random_tensor(&mut rng, 2, 1, 4, 4);
    let e = input_check(&x, sigmoid, |t, d| sigmoid_backward(&sigmoid(t), d), &mut rng, h);
    out.push(("sigmoid", e));

    out.push(("bn", norm_check(NormMode::Bn, Phase::Train, &mut rng, h)));
    out.push(("in", norm_check(NormMode::In, Phase::Train, &mut rng, h)));
    out.push(("condin", norm_check(NormMode::CondIn, Phase::Train, &mut rng, h)));

    let combos = [Availability::new(0b1111).unwrap(), Availability::new(0b0110).unwrap()];
    let x = tiny_input(&mut rng, 2);

    let net = Net::new(tiny_config(Activation::Identity), NormPolicy::new(NormMode::Bn), seed)?;
    let spec = CheckSpec {
        seed,
        phase: Phase::Infer,
        target: CheckTarget::Logits,
        ..CheckSpec::default()
    };
    let lin = Net { policy: NormPolicy { inference_stats: super::InferenceStats::TrainStats, ..net.policy }, ..net };
    out.push(("linear_net", backward_check(&lin, &x, &combos, &spec)?.max_error));

    for (name, mode) in [("net_bn", NormMode::Bn), ("net_in", NormMode::In), ("net_condin", NormMode::CondIn)] {
        let net = Net::new(tiny_config(Activation::Relu), NormPolicy::new(mode), seed)?;
        let spec = CheckSpec { seed, ..CheckSpec::default() };
        let report = backward_check(&net, &x, &combos, &spec)?;
        if report.checked < spec.samples / 2 {
            return Err(crate::error::Error::Contract(format!("{name}: only {} coordinates away from kinks", report.checked)));
        }
        out.push((name, report.max_error));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let e = finite_difference_check(f, &[2.0, 1.0], &[4.0, 3.0], 1e-3, &[0, 1]);
        assert!(e < 1e-9);
    }

    #[test]
    fn suite_passes() {
        for seed in 0..3 {
            for (name, e) in gradient_suite(seed).unwrap() {
                let tol = if name.starts_with("linear") { 1e-7 } else { 1e-3 };
                assert!(e < tol, "seed {seed} {name}: {e}");
            }
        }
    }
}
