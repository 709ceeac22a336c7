//! Patch sampling for training: random crops with a foreground guarantee
//! plus on-the-fly coarse-mask perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::perturb::perturb_mask;
use crate::data::{read_image_png, read_mask_png, BinaryMask, CorpusManifest};
use crate::diffcore::Tensor;
use crate::error::{CrmError, Result};

/// Crops with less foreground than this fraction are resampled.
const MIN_FOREGROUND: f64 = 0.01;
/// Resampling attempts before accepting the last crop regardless.
const MAX_CROP_TRIES: usize = 50;

struct TrainItem {
    rgb: Vec<u8>,
    h: usize,
    w: usize,
    gt: BinaryMask,
}

/// Training images held in memory as 8-bit RGB plus binary ground truth.
pub struct TrainDataset {
    items: Vec<TrainItem>,
}

impl TrainDataset {
    pub fn from_corpus(corpus: &CorpusManifest) -> Result<Self> {
        let mut items = Vec::with_capacity(corpus.len());
        for entry in &corpus.items {
            let image = read_image_png(&entry.image)?;
            let gt = BinaryMask::from_tensor(&read_mask_png(&entry.gt)?, 0.5)?;
            let s = image.shape();
            let (h, w) = (s[1], s[2]);
            if gt.h != h || gt.w != w {
                return Err(CrmError::Corpus(format!(
                    "item '{}': image {h}x{w} vs mask {}x{}",
                    entry.stem, gt.h, gt.w
                )));
            }
            let data = image.data();
            let plane = h * w;
            let rgb: Vec<u8> = (0..3 * plane)
                .map(|i| (data[i] * 255.0).round() as u8)
                .collect();
            items.push(TrainItem { rgb, h, w, gt });
        }
        if items.is_empty() {
            return Err(CrmError::Corpus("training corpus is empty".into()));
        }
        Ok(TrainDataset { items })
    }

    /// Build directly from in-memory samples (used by tests and presets).
    pub fn from_samples(samples: Vec<(Tensor<f32>, BinaryMask)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(CrmError::Corpus("training corpus is empty".into()));
        }
        let items = samples
            .into_iter()
            .map(|(image, gt)| {
                let s = image.shape();
                let (h, w) = (s[1], s[2]);
                let data = image.data();
                let rgb: Vec<u8> = (0..3 * h * w)
                    .map(|i| (data[i] * 255.0).round() as u8)
                    .collect();
                TrainItem { rgb, h, w, gt }
            })
            .collect();
        Ok(TrainDataset { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn min_extent(&self) -> usize {
        self.items
            .iter()
            .map(|i| i.h.min(i.w))
            .min()
            .unwrap_or(0)
    }

    fn crop_image(&self, idx: usize, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
        let item = &self.items[idx];
        let plane = item.h * item.w;
        let mut data = Vec::with_capacity(3 * size * size);
        for c in 0..3 {
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    data.push(item.rgb[c * plane + y * item.w + x] as f32 / 255.0);
                }
            }
        }
        Tensor::from_vec(vec![3, size, size], data)
    }
}

/// One training example: image patch, ground-truth patch, perturbed coarse
/// patch with `tau ~ U[0.8, 1.0]`.
pub fn sample_training_example(
    dataset: &TrainDataset,
    patch: usize,
    seed: u64,
) -> Result<(Tensor<f32>, BinaryMask, BinaryMask)> {
    if dataset.min_extent() < patch {
        return Err(CrmError::invalid(format!(
            "sample_training_example: patch {patch} exceeds smallest image extent {}",
            dataset.min_extent()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = None;
    for attempt in 0..MAX_CROP_TRIES {
        let idx = rng.gen_range(0..dataset.len());
        let item = &dataset.items[idx];
        let y0 = rng.gen_range(0..=item.h - patch);
        let x0 = rng.gen_range(0..=item.w - patch);
        let gt_patch = item.gt.crop(y0, x0, patch);
        let enough = gt_patch.foreground_fraction() >= MIN_FOREGROUND;
        if enough || attempt + 1 == MAX_CROP_TRIES {
            chosen = Some((idx, y0, x0, gt_patch));
            if enough {
                break;
            }
        }
    }
    let (idx, y0, x0, gt_patch) = chosen.expect("at least the fallback crop");
    let image_patch = dataset.crop_image(idx, y0, x0, patch);
    let tau = rng.gen_range(0.8..=1.0);
    let coarse = if gt_patch.count_ones() == 0 {
        // Degenerate fallback crop: nothing to perturb.
        gt_patch.clone()
    } else {
        perturb_mask(&gt_patch, tau, rng.gen())?
    };
    Ok((image_patch, gt_patch, coarse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_sample;

    fn dataset(n: usize, res: usize) -> TrainDataset {
        let samples = (0..n as u64).map(|s| gen_sample(s, res)).collect();
        TrainDataset::from_samples(samples).unwrap()
    }

    #[test]
    fn patch_shapes() {
        let ds = dataset(4, 64);
        let (img, gt, coarse) = sample_training_example(&ds, 32, 0).unwrap();
        assert_eq!(img.shape(), vec![3, 32, 32]);
        assert_eq!((gt.h, gt.w), (32, 32));
        assert_eq!((coarse.h, coarse.w), (32, 32));
    }

    #[test]
    fn oversized_patch_is_error() {
        let ds = dataset(2, 32);
        assert!(sample_training_example(&ds, 64, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = dataset(4, 64);
        let (a_img, a_gt, a_coarse) = sample_training_example(&ds, 48, 7).unwrap();
        let (b_img, b_gt, b_coarse) = sample_training_example(&ds, 48, 7).unwrap();
        assert_eq!(a_img.to_vec(), b_img.to_vec());
        assert_eq!(a_gt, b_gt);
        assert_eq!(a_coarse, b_coarse);
    }

    #[test]
    fn foreground_fraction_mostly_respected() {
        let ds = dataset(8, 64);
        let mut ok = 0;
        let n = 200;
        for seed in 0..n {
            let (_, gt, _) = sample_training_example(&ds, 32, seed).unwrap();
            if gt.foreground_fraction() >= MIN_FOREGROUND {
                ok += 1;
            }
        }
        assert!(ok * 100 >= n * 99, "{ok}/{n} crops had enough foreground");
    }

    #[test]
    fn coarse_stays_close_to_gt() {
        use crate::metrics::iou;
        let ds = dataset(4, 96);
        for seed in 0..12 {
            let (_, gt, coarse) = sample_training_example(&ds, 64, seed).unwrap();
            if gt.count_ones() == 0 {
                continue;
            }
            let v = iou(&coarse, &gt).unwrap();
            assert!(v >= 0.8, "seed {seed}: IoU {v}");
        }
    }
}
