//! Multi-resolution refinement.
//!
//! Each stage concatenates the full-resolution image with the current mask
//! (the coarse input at stage 0, the previous stage's refinement after),
//! rescales that stack by the stage ratio, encodes it, and decodes at the
//! full output resolution. Later stages see sharper inputs and recover finer
//! boundary detail; the mask is carried forward soft, never binarized
//! between stages.

use crate::data::BinaryMask;
use crate::decoder::{CrmModel, RefineMode};
use crate::diffcore::{concat, resize_bilinear, Element, Tensor};
use crate::error::{CrmError, Result};

/// Ordered rescale ratios for multi-resolution inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementSchedule {
    pub ratios: Vec<f64>,
    /// Stages whose rescaled long side falls below this are dropped.
    pub min_side: usize,
}

pub const DEFAULT_MIN_SIDE: usize = 32;

impl RefinementSchedule {
    /// A complete schedule: strictly increasing ratios in (0, 1] ending at 1.
    pub fn new(ratios: Vec<f64>, min_side: usize) -> Result<Self> {
        let s = Self::partial(ratios, min_side)?;
        if *s.ratios.last().expect("non-empty") != 1.0 {
            return Err(CrmError::invalid(
                "schedule must end at ratio 1.0 (full resolution)",
            ));
        }
        Ok(s)
    }

    /// A schedule prefix for experiments; may stop short of full resolution.
    pub fn partial(ratios: Vec<f64>, min_side: usize) -> Result<Self> {
        if ratios.is_empty() {
            return Err(CrmError::invalid("schedule must have at least one ratio"));
        }
        for pair in ratios.windows(2) {
            if pair[1] <= pair[0] {
                return Err(CrmError::invalid(format!(
                    "schedule ratios must be strictly increasing, got {ratios:?}"
                )));
            }
        }
        if ratios.iter().any(|&r| r <= 0.0 || r > 1.0) {
            return Err(CrmError::invalid(format!(
                "schedule ratios must lie in (0, 1], got {ratios:?}"
            )));
        }
        Ok(RefinementSchedule { ratios, min_side })
    }

    /// The four-stage default: 0.125, 0.25, 0.5, 1.0.
    pub fn default_schedule() -> Self {
        RefinementSchedule {
            ratios: vec![0.125, 0.25, 0.5, 1.0],
            min_side: DEFAULT_MIN_SIDE,
        }
    }

    /// `n` uniformly spaced ratios k/n for k = 1..n.
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(CrmError::invalid("uniform schedule needs n >= 1"));
        }
        Ok(RefinementSchedule {
            ratios: (1..=n).map(|k| k as f64 / n as f64).collect(),
            min_side: DEFAULT_MIN_SIDE,
        })
    }

    /// Parse `"0.125,0.25,0.5,1.0"` or `"uniform:N"`.
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(n) = spec.strip_prefix("uniform:") {
            let n: usize = n
                .parse()
                .map_err(|_| CrmError::invalid(format!("bad uniform schedule '{spec}'")))?;
            return Self::uniform(n);
        }
        let ratios: Vec<f64> = spec
            .split(',')
            .map(|part| {
                part.trim()
                    .parse::<f64>()
                    .map_err(|_| CrmError::invalid(format!("bad schedule ratio '{part}'")))
            })
            .collect::<Result<_>>()?;
        Self::partial(ratios, DEFAULT_MIN_SIDE)
    }

    /// Ratios that survive the minimum-side rule for an H x W input.
    pub fn effective_ratios(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        let long = h.max(w) as f64;
        let kept: Vec<f64> = self
            .ratios
            .iter()
            .copied()
            .filter(|r| (long * r).round() as usize >= self.min_side)
            .collect();
        if kept.is_empty() {
            return Err(CrmError::invalid(format!(
                "no schedule ratio keeps the long side {long} above {}",
                self.min_side
            )));
        }
        Ok(kept)
    }

    pub fn describe(&self) -> String {
        self.ratios
            .iter()
            .map(|r| format!("{r}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn scaled_extent(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).max(1)
}

/// Refine `coarse` against `image` through the schedule; outputs a soft mask
/// at the full image resolution.
pub fn refine_multires<T: Element>(
    model: &CrmModel<T>,
    image: &Tensor<T>,
    coarse: &Tensor<T>,
    schedule: &RefinementSchedule,
) -> Result<Tensor<T>> {
    refine_multires_traced(model, image, coarse, schedule, RefineMode::Full, |_, _, _| {
        Ok(())
    })
}

/// [`refine_multires`] with an ablation mode and a per-stage observer.
///
/// `on_stage(index, ratio, soft_mask)` runs after every stage; stage masks
/// are valid soft masks at the full output resolution.
pub fn refine_multires_traced<T: Element>(
    model: &CrmModel<T>,
    image: &Tensor<T>,
    coarse: &Tensor<T>,
    schedule: &RefinementSchedule,
    mode: RefineMode,
    mut on_stage: impl FnMut(usize, f64, &Tensor<T>) -> Result<()>,
) -> Result<Tensor<T>> {
    let si = image.shape();
    let sm = coarse.shape();
    if si.len() != 3 || si[0] != 3 {
        return Err(CrmError::shape(format!(
            "refine_multires: expected 3 x H x W image, got {si:?}"
        )));
    }
    if sm != vec![1, si[1], si[2]] {
        return Err(CrmError::shape(format!(
            "refine_multires: coarse mask {sm:?} does not align with image {si:?}"
        )));
    }
    let (h, w) = (si[1], si[2]);
    let ratios = schedule.effective_ratios(h, w)?;

    let mut mask = coarse.clone();
    for (i, &ratio) in ratios.iter().enumerate() {
        let stacked = concat(&[image, &mask], 0)?;
        let scaled = resize_bilinear(&stacked, scaled_extent(h, ratio), scaled_extent(w, ratio))?;
        let latent = model.encode(&scaled)?;
        mask = model.decode(&latent, (h, w), mode)?;
        on_stage(i, ratio, &mask)?;
    }
    Ok(mask)
}

/// Threshold a soft mask into a binary one (pixel >= threshold -> 1).
pub fn binarize(soft: &Tensor<f32>, threshold: f32) -> Result<BinaryMask> {
    BinaryMask::from_tensor(soft, threshold)
}

/// Analytic multiply-accumulate counts for one refinement stage.
#[derive(Debug, Clone, Copy)]
pub struct StageCost {
    pub ratio: f64,
    pub input_extent: (usize, usize),
    pub encode_macs: u64,
    pub decode_macs: u64,
}

impl StageCost {
    pub fn total_macs(&self) -> u64 {
        self.encode_macs + self.decode_macs
    }
}

/// Estimate per-stage compute for refining an H x W image.
///
/// Counts convolution and affine multiply-accumulates; elementwise work is
/// ignored. Mirrors the cost structure the `bench` subcommand reports.
pub fn schedule_cost<T: Element>(
    model: &CrmModel<T>,
    h: usize,
    w: usize,
    schedule: &RefinementSchedule,
) -> Result<Vec<StageCost>> {
    let ratios = schedule.effective_ratios(h, w)?;
    let cfg = &model.enc_cfg;
    Ok(ratios
        .iter()
        .map(|&ratio| {
            let (ih, iw) = (scaled_extent(h, ratio), scaled_extent(w, ratio));
            let mut macs: u64 = 0;
            let mut conv = |c_in: usize, c_out: usize, k: usize, oh: usize, ow: usize| {
                macs += (c_in * c_out * k * k * oh * ow) as u64;
            };
            // Stem at full scaled extent.
            let b = cfg.base_channels;
            conv(4, b, 3, ih, iw);
            let (mut ch, mut oh, mut ow) = (b, ih, iw);
            let stages = cfg.output_stride.trailing_zeros() as usize;
            for s in 0..stages {
                let next = b << (s + 1);
                oh = oh.div_ceil(2);
                ow = ow.div_ceil(2);
                conv(ch, next, 3, oh, ow);
                for _ in 0..cfg.depth {
                    conv(next, next, 3, oh, ow);
                    conv(next, next, 3, oh, ow);
                }
                ch = next;
            }
            if cfg.global_context {
                conv(2 * ch, ch, 1, oh, ow);
            }
            // Skip projection + head.
            conv(ch / 2, ch, 1, oh, ow);
            conv(ch, cfg.latent_channels, 1, oh, ow);
            let encode_macs = macs;

            let rows = (h * w * crate::cam::CORNERS) as u64;
            let per_row: u64 = model
                .mlp_cfg
                .layer_dims()
                .iter()
                .map(|&(i, o)| (i * o) as u64)
                .sum();
            StageCost {
                ratio,
                input_extent: (ih, iw),
                encode_macs,
                decode_macs: rows * per_row,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> CrmModel<f32> {
        let cfg = EncoderConfig {
            base_channels: 4,
            latent_channels: 8,
            output_stride: 4,
            depth: 1,
            global_context: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CrmModel::init(cfg, 16, &mut rng).unwrap()
    }

    #[test]
    fn default_schedule_ratios() {
        assert_eq!(
            RefinementSchedule::default_schedule().ratios,
            vec![0.125, 0.25, 0.5, 1.0]
        );
    }

    #[test]
    fn min_side_drops_small_stages() {
        let s = RefinementSchedule::default_schedule();
        // 128^2 image: ratio 0.125 gives side 16 < 32.
        assert_eq!(s.effective_ratios(128, 128).unwrap(), vec![0.25, 0.5, 1.0]);
        // 512^2 keeps everything.
        assert_eq!(s.effective_ratios(512, 512).unwrap().len(), 4);
    }

    #[test]
    fn uniform_schedules() {
        assert_eq!(RefinementSchedule::uniform(1).unwrap().ratios, vec![1.0]);
        assert_eq!(
            RefinementSchedule::uniform(4).unwrap().ratios,
            vec![0.25, 0.5, 0.75, 1.0]
        );
        let eight = RefinementSchedule::uniform(8).unwrap();
        assert_eq!(eight.ratios.len(), 8);
        assert_eq!(*eight.ratios.last().unwrap(), 1.0);
        assert!(RefinementSchedule::uniform(0).is_err());
    }

    #[test]
    fn schedules_must_increase() {
        assert!(RefinementSchedule::new(vec![0.5, 0.5, 1.0], 32).is_err());
        assert!(RefinementSchedule::new(vec![0.5, 0.25, 1.0], 32).is_err());
        assert!(RefinementSchedule::new(vec![0.25, 0.5], 32).is_err());
        assert!(RefinementSchedule::partial(vec![0.25, 0.5], 32).is_ok());
    }

    #[test]
    fn parse_forms() {
        assert_eq!(
            RefinementSchedule::parse("0.125,0.25,0.5,1.0").unwrap().ratios,
            vec![0.125, 0.25, 0.5, 1.0]
        );
        assert_eq!(
            RefinementSchedule::parse("uniform:2").unwrap().ratios,
            vec![0.5, 1.0]
        );
        assert!(RefinementSchedule::parse("abc").is_err());
    }

    #[test]
    fn single_stage_schedule_equals_refine_once() {
        let model = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = Tensor::randn(vec![3, 40, 40], 0.3, &mut rng);
        let coarse = Tensor::full(vec![1, 40, 40], 0.5);
        let s = RefinementSchedule::new(vec![1.0], 32).unwrap();
        let multi = refine_multires(&model, &image, &coarse, &s).unwrap();
        let once = model.refine_once(&image, &coarse, (40, 40)).unwrap();
        assert_eq!(multi.to_vec(), once.to_vec());
    }

    #[test]
    fn stage_count_and_shapes() {
        let model = tiny_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let image = Tensor::randn(vec![3, 64, 48], 0.3, &mut rng);
        let coarse = Tensor::full(vec![1, 64, 48], 0.5);
        let s = RefinementSchedule::new(vec![0.5, 1.0], 16).unwrap();
        let mut stages = Vec::new();
        let out = refine_multires_traced(
            &model,
            &image,
            &coarse,
            &s,
            RefineMode::Full,
            |i, ratio, mask| {
                assert_eq!(mask.shape(), vec![1, 64, 48]);
                assert!(mask.data().iter().all(|&v| v > 0.0 && v < 1.0));
                stages.push((i, ratio));
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(stages, vec![(0, 0.5), (1, 1.0)]);
        assert_eq!(out.shape(), vec![1, 64, 48]);
    }

    #[test]
    fn deterministic_across_runs() {
        let model = tiny_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let image = Tensor::randn(vec![3, 48, 48], 0.3, &mut rng);
        let coarse = Tensor::full(vec![1, 48, 48], 0.4);
        let s = RefinementSchedule::new(vec![0.5, 1.0], 16).unwrap();
        let a = refine_multires(&model, &image, &coarse, &s).unwrap();
        let b = refine_multires(&model, &image, &coarse, &s).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn binarize_rules() {
        let soft = Tensor::from_vec(vec![1, 1, 4], vec![0.6, 0.6, 0.6, 0.6]);
        let b = binarize(&soft, 0.5).unwrap();
        assert!(b.data.iter().all(|&v| v == 1));
        let strict = binarize(&soft, 1.0).unwrap();
        assert!(strict.data.iter().all(|&v| v == 0));
        let exact = Tensor::from_vec(vec![1, 1, 2], vec![1.0, 0.999]);
        let be = binarize(&exact, 1.0).unwrap();
        assert_eq!(be.data, vec![1, 0]);
        // Idempotent: binarizing a binary mask changes nothing.
        let again = binarize(&b.to_tensor(), 0.5).unwrap();
        assert_eq!(again, b);
    }

    #[test]
    fn empty_effective_schedule_is_error() {
        let s = RefinementSchedule::partial(vec![0.125], 32).unwrap();
        assert!(s.effective_ratios(64, 64).is_err());
    }

    #[test]
    fn cost_model_scales_with_ratio() {
        let model = tiny_model(9);
        let s = RefinementSchedule::default_schedule();
        let costs = schedule_cost(&model, 256, 256, &s).unwrap();
        assert_eq!(costs.len(), 4);
        // Encoder cost grows with the input ratio; decode cost is constant.
        for pair in costs.windows(2) {
            assert!(pair[1].encode_macs > pair[0].encode_macs);
            assert_eq!(pair[1].decode_macs, pair[0].decode_macs);
        }
    }
}
