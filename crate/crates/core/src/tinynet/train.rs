use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::augment::{SpatialWarp, WarpKind};
use super::net::{slabs_to_tensor, Net};
use super::norm::{NormPolicy, Phase};
use super::tensor::Tensor;
use super::{NetConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::orient::{extract_slab, extract_slice, Dihedral, Plane};
use crate::volio::{Availability, BinaryMask3D, MultiContrastVolume};

/// One training subject with its two reference delineations.
#[derive(Debug, Clone)]
pub struct TrainingSubject {
    pub mcv: MultiContrastVolume,
    pub rater1: BinaryMask3D,
    pub rater2: BinaryMask3D,
}

/// Uniformly samples a nonempty subset of `available`.
pub fn sample_keep_set<R: Rng + ?Sized>(available: Availability, rng: &mut R) -> Availability {
    let subsets: Vec<u8> = (1u8..16).filter(|s| s & !available.bits() == 0).collect();
    Availability::new(subsets[rng.random_range(0..subsets.len())]).expect("nonzero subset")
}

/// Zeroes a random subset of the available contrasts, never all of them.
/// The kept set is uniform over the nonempty subsets of the available set.
pub fn contrast_dropout<R: Rng + ?Sized>(mcv: &MultiContrastVolume, rng: &mut R) -> MultiContrastVolume {
    let keep = sample_keep_set(mcv.availability(), rng);
    mcv.restrict(keep).expect("kept subset is nonempty and available")
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Sampling = 0,
    Dropout = 1,
    Augmentation = 2,
}

fn stream_rng(seed: u64, iteration: usize, stream: Stream) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(iteration as u64).to_le_bytes());
    key[16] = stream as u8;
    key[24..].copy_from_slice(b"trainrng");
    ChaCha8Rng::from_seed(key)
}

/// Per-iteration losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// `(iteration, loss)`, iterations counted from 1.
    pub losses: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (i, l) in &self.losses {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }

    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let v: Vec<f64> = self.losses.iter().filter(|(i, _)| range.contains(i)).map(|(_, l)| *l).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Network plus optimizer state; every iteration draws its randomness from
/// `(seed, iteration)`, so a resumed run continues exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Net,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub iteration: usize,
}

struct Sample {
    input: Tensor,
    target: Vec<f64>,
    combos: Vec<Availability>,
}

impl Trainer {
    pub fn new(net: Net, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self { net, adam, cfg, iteration: 0 })
    }

    fn lesion_subjects(data: &[TrainingSubject]) -> Result<Vec<usize>> {
        let idx: Vec<usize> = data
            .iter()
            .enumerate()
            .filter(|(_, s)| s.rater1.count() > 0 || s.rater2.count() > 0)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return Err(Error::Unsampleable("no subject contains a lesion voxel".into()));
        }
        Ok(idx)
    }

    fn draw_batch(&self, data: &[TrainingSubject], candidates: &[usize], iteration: usize) -> Result<Sample> {
        let cfg = &self.cfg;
        let mut rs = stream_rng(cfg.seed, iteration, Stream::Sampling);
        let mut rd = stream_rng(cfg.seed, iteration, Stream::Dropout);
        let mut ra = stream_rng(cfg.seed, iteration, Stream::Augmentation);

        // one plane, one dihedral element and one dropout draw per batch
        let plane = Plane::ALL[rs.random_range(0..3)];
        let dihedral = Dihedral::from_id(rs.random_range(0..8));
        let keep = sample_keep_set(Availability::FULL, &mut rd);

        let mut slabs = Vec::with_capacity(cfg.batch_size);
        let mut target = Vec::new();
        let mut combos = Vec::with_capacity(cfg.batch_size);
        const ATTEMPTS: usize = 32;
        for _ in 0..cfg.batch_size {
            let mut drawn = None;
            for _ in 0..ATTEMPTS {
                let subj = &data[candidates[rs.random_range(0..candidates.len())]];
                let second_rater = rs.random_bool(0.5);
                let label = if cfg.rater_sampling && second_rater { &subj.rater2 } else { &subj.rater1 };
                let augment = ra.random_bool(cfg.augmentation_probability);
                let kind = if ra.random_bool(0.5) { WarpKind::Elastic } else { WarpKind::Affine };
                let candidates = lesion_slices(label, plane);
                if candidates.is_empty() {
                    continue;
                }
                let idx = candidates[rs.random_range(0..candidates.len())];
                let (mcv, label) = if cfg.spatial_augmentation && augment {
                    let warp = SpatialWarp::random(kind, subj.mcv.dims(), &mut ra);
                    let only = (plane.slice_axis(), idx..idx + 1);
                    (warp.warp_subject_slab(&subj.mcv, plane, idx)?, warp.warp_mask_slab(label, Some(only)))
                } else {
                    (subj.mcv.clone(), label.clone())
                };
                // the warp may move the lesion out of the sampled slice
                if !extract_slice(&label, plane, idx).contains(&true) {
                    continue;
                }
                let mcv = if cfg.contrast_dropout {
                    let k = keep.bits() & mcv.availability().bits();
                    match Availability::new(k) {
                        Ok(k) => mcv.restrict(k)?,
                        Err(_) => contrast_dropout(&mcv, &mut rd),
                    }
                } else {
                    mcv
                };
                drawn = Some((mcv, label, idx));
                break;
            }
            let (mcv, label, idx) = drawn.ok_or_else(|| {
                Error::Unsampleable(format!("no lesion-bearing {} slice found after {ATTEMPTS} draws", plane.name()))
            })?;
            let slab = extract_slab(&mcv, plane, idx)?.transformed(dihedral);
            let lab = extract_slice(&label, plane, idx);
            let (lab, _) = dihedral.apply_2d(&lab, plane.slice_shape(label.dims()));
            target.extend(lab.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            combos.push(slab.availability);
            slabs.push(slab);
        }
        Ok(Sample { input: slabs_to_tensor(&slabs)?, target, combos })
    }

    /// One optimization step; returns the batch L2 loss (mean squared error).
    pub fn step(&mut self, data: &[TrainingSubject]) -> Result<f64> {
        let candidates = Self::lesion_subjects(data)?;
        let iteration = self.iteration + 1;
        let batch = self.draw_batch(data, &candidates, iteration)?;
        let cache = self.net.forward(&batch.input, &batch.combos, Phase::Train)?;
        let n = batch.target.len() as f64;
        let mut loss = 0.0;
        let mut dprobs = cache.probs.clone();
        for (d, (&p, &y)) in dprobs.data.iter_mut().zip(cache.probs.data.iter().zip(&batch.target)) {
            loss += (p - y) * (p - y);
            *d = 2.0 * (p - y) / n;
        }
        let (grads, _) = self.net.backward(&cache, &dprobs);
        self.adam.update(self.net.params_mut(), grads.tensors());
        self.net.update_running(&cache);
        self.iteration = iteration;
        Ok(loss / n)
    }

    /// Runs `iterations` more steps, appending to `log`.
    pub fn run(&mut self, data: &[TrainingSubject], iterations: usize, log: &mut TrainLog) -> Result<()> {
        Self::lesion_subjects(data)?;
        for _ in 0..iterations {
            let loss = self.step(data)?;
            log.losses.push((self.iteration, loss));
        }
        Ok(())
    }
}

/// Slice indices in `plane` whose slice contains a lesion voxel.
fn lesion_slices(label: &BinaryMask3D, plane: Plane) -> Vec<usize> {
    let axis = plane.slice_axis();
    let mut hit = vec![false; label.dims()[axis]];
    for (i, &v) in label.data().iter().enumerate() {
        if v {
            hit[label.coords(i)[axis]] = true;
        }
    }
    hit.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect()
}

/// Trains a fresh network for `cfg.iterations` steps.
pub fn train(
    data: &[TrainingSubject],
    net_config: NetConfig,
    policy: NormPolicy,
    cfg: &TrainConfig,
) -> Result<(Net, TrainLog)> {
    let net = Net::new(net_config, policy, cfg.seed)?;
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let mut log = TrainLog::default();
    trainer.run(data, cfg.iterations, &mut log)?;
    Ok((trainer.net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::{Contrast, Volume3D};

    fn four_contrasts() -> MultiContrastVolume {
        let v = Volume3D::filled([2, 2, 2], 1.0);
        MultiContrastVolume::from_pairs(Contrast::ALL.map(|c| (c, v.clone()))).unwrap()
    }

    #[test]
    fn dropout_never_empties_single_contrast() {
        let mcv = MultiContrastVolume::from_pairs([(Contrast::T2w, Volume3D::filled([2, 2, 2], 1.0))]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(contrast_dropout(&mcv, &mut rng), mcv);
        }
    }

    #[test]
    fn dropped_contrast_is_absent_and_zero_at_input() {
        let mcv = four_contrasts();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = (0..100)
            .map(|_| contrast_dropout(&mcv, &mut rng))
            .find(|m| !m.availability().contains(Contrast::Flair))
            .unwrap();
        assert!(out.get(Contrast::Flair).is_none());
        assert!(out.materialized()[Contrast::Flair.index()].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn keep_set_is_subset_of_available() {
        let avail = Availability::new(0b1010).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let k = sample_keep_set(avail, &mut rng);
            assert_eq!(k.bits() & !avail.bits(), 0);
        }
    }

    #[test]
    fn unsampleable_without_lesions() {
        let s = TrainingSubject {
            mcv: four_contrasts(),
            rater1: BinaryMask3D::empty([2, 2, 2]),
            rater2: BinaryMask3D::empty([2, 2, 2]),
        };
        let err = train(&[s], NetConfig::desk(), NormPolicy::new(super::super::NormMode::Bn), &TrainConfig::default());
        assert!(matches!(err, Err(Error::Unsampleable(_))));
    }
}
