//! Online augmentation: SpecAugment-style masking and speed perturbation.
//! Both return new tensors and never touch the stored corpus.

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugConfig {
    pub freq_masks: usize,
    pub max_freq_width: usize,
    pub time_masks: usize,
    /// Upper bound on the fraction of frames covered by all time masks.
    pub max_time_coverage: f64,
}

impl SpecAugConfig {
    /// Two channel masks of width up to 27 on an 80-channel scale, rescaled
    /// to `feature_dim`, and five time masks covering at most 5% of frames.
    pub fn scaled(feature_dim: usize) -> Self {
        Self {
            freq_masks: 2,
            max_freq_width: (27.0 * feature_dim as f64 / 80.0).round() as usize,
            time_masks: 5,
            max_time_coverage: 0.05,
        }
    }
}

/// Mask placement of one augmentation draw, as `(start, width)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskRecord {
    pub time: Vec<(usize, usize)>,
    pub freq: Vec<(usize, usize)>,
}

impl MaskRecord {
    /// Distinct frames covered by any time mask.
    pub fn masked_frames(&self, total: usize) -> usize {
        let mut hit = vec![false; total];
        for &(s, w) in &self.time {
            hit[s..s + w].iter_mut().for_each(|h| *h = true);
        }
        hit.iter().filter(|&&h| h).count()
    }
}

/// Zeroes random channel bands and frame spans of a `[T, F]` tensor.
pub fn spec_augment(
    features: &Tensor<f32>,
    cfg: &SpecAugConfig,
    rng: &mut impl Rng,
) -> (Tensor<f32>, MaskRecord) {
    let (t, f) = features.dims2().expect("features are [T, F]");
    let mut out = features.clone();
    let mut record = MaskRecord::default();

    let max_fw = cfg.max_freq_width.min(f);
    for _ in 0..cfg.freq_masks {
        let w = rng.random_range(0..=max_fw);
        let start = rng.random_range(0..=f - w);
        record.freq.push((start, w));
    }

    // Each time mask gets an equal share of the coverage budget, so the
    // union can never exceed it.
    let budget = (cfg.max_time_coverage * t as f64).floor() as usize;
    let per_mask = if cfg.time_masks == 0 {
        0
    } else {
        budget / cfg.time_masks
    };
    for _ in 0..cfg.time_masks {
        let w = rng.random_range(0..=per_mask);
        let start = rng.random_range(0..=t - w);
        record.time.push((start, w));
    }

    let data = out.data_mut();
    for &(s, w) in &record.freq {
        for row in 0..t {
            data[row * f + s..row * f + s + w].fill(0.0);
        }
    }
    for &(s, w) in &record.time {
        data[s * f..(s + w) * f].fill(0.0);
    }
    (out, record)
}

pub const SPEED_FACTORS: [f64; 3] = [0.9, 1.0, 1.1];

pub fn random_speed_factor(rng: &mut impl Rng) -> f64 {
    SPEED_FACTORS[rng.random_range(0..SPEED_FACTORS.len())]
}

/// Linear resampling of the time axis to `round(T / factor)` frames.
pub fn speed_perturb(features: &Tensor<f32>, factor: f64) -> Tensor<f32> {
    let (t, f) = features.dims2().expect("features are [T, F]");
    if t == 0 || factor == 1.0 {
        return features.clone();
    }
    let t_out = ((t as f64 / factor).round() as usize).max(1);
    let src = features.data();
    let mut out = Vec::with_capacity(t_out * f);
    for j in 0..t_out {
        let pos = (j as f64 * factor).min((t - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = (pos - lo as f64) as f32;
        for c in 0..f {
            let a = src[lo * f + c];
            let b = src[hi * f + c];
            out.push(a + (b - a) * frac);
        }
    }
    Tensor::new(vec![t_out, f], out).expect("whole rows")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scaled_frequency_width_for_sixteen_channels() {
        assert_eq!(SpecAugConfig::scaled(16).max_freq_width, 5);
        assert_eq!(SpecAugConfig::scaled(80).max_freq_width, 27);
    }

    #[test]
    fn zero_width_masks_are_identity() {
        let x = Tensor::from_fn(&[40, 16], |i| i as f32 + 1.0);
        let cfg = SpecAugConfig {
            max_freq_width: 0,
            max_time_coverage: 0.0,
            ..SpecAugConfig::scaled(16)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(spec_augment(&x, &cfg, &mut rng).0, x);
    }

    #[test]
    fn masked_cells_are_zero() {
        let x = Tensor::full(&[200, 16], 1.0f32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, rec) = spec_augment(&x, &SpecAugConfig::scaled(16), &mut rng);
        for &(s, w) in &rec.time {
            assert!(y.data()[s * 16..(s + w) * 16].iter().all(|&v| v == 0.0));
        }
        for &(s, w) in &rec.freq {
            assert!((0..200).all(|r| y.row(r)[s..s + w].iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn speed_perturb_lengths_and_identity() {
        let x = Tensor::from_fn(&[90, 2], |i| (i as f32).sin());
        assert_eq!(speed_perturb(&x, 1.0), x);
        assert_eq!(speed_perturb(&x, 0.9).shape(), &[100, 2]);
        assert_eq!(speed_perturb(&x, 1.1).shape(), &[82, 2]);
    }

    proptest! {
        #[test]
        fn constant_features_survive_resampling(v in -5.0f32..5.0, t in 1usize..60, k in 0usize..3) {
            let x = Tensor::full(&[t, 3], v);
            let y = speed_perturb(&x, SPEED_FACTORS[k]);
            prop_assert!(y.data().iter().all(|&u| u == v));
        }
    }
}
