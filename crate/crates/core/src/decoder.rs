//! Implicit decoder: a five-layer MLP over aligned feature vectors, plus
//! the area-weighted aggregation of the four corner predictions.

use rand::Rng;

use crate::cam::{self, CORNERS, POSITION_CHANNELS};
use crate::diffcore::{
    aggregate_corners, clamp, concat, gather_cells, linear, relu, reshape, resize_bilinear,
    sigmoid, Element, Tensor,
};
use crate::encoder::{encode, EncoderConfig, EncoderParams, LatentFeature};
use crate::error::{CrmError, Result};

/// Logits are clamped to this magnitude before the output sigmoid so the
/// soft mask stays strictly inside (0, 1) in f32.
const LOGIT_CLAMP: f64 = 15.0;

/// Pixels decoded per chunk on the untracked (inference) path.
const DECODE_CHUNK: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpConfig {
    /// Latent channels plus the six position channels.
    pub in_dim: usize,
    /// Width of the four hidden layers.
    pub hidden: usize,
}

impl MlpConfig {
    pub fn new(latent_channels: usize, hidden: usize) -> Self {
        MlpConfig {
            in_dim: latent_channels + POSITION_CHANNELS,
            hidden,
        }
    }

    /// Five affine layers: input, three hidden-to-hidden, output.
    pub fn layer_dims(&self) -> [(usize, usize); 5] {
        let h = self.hidden;
        [
            (self.in_dim, h),
            (h, h),
            (h, h),
            (h, h),
            (h, 1),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }
}

pub struct MlpParams<T: Element = f32> {
    /// (weight out x in, bias out) per affine layer.
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> MlpParams<T> {
    pub fn init<R: Rng>(cfg: &MlpConfig, rng: &mut R) -> Self {
        let layers = cfg
            .layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| {
                let w = Tensor::randn(
                    vec![fan_out, fan_in],
                    (2.0 / fan_in as f64).sqrt(),
                    rng,
                );
                (w, Tensor::zeros(vec![fan_out]))
            })
            .collect();
        MlpParams { layers }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("decoder.layer{i}.weight"), w));
            out.push((format!("decoder.layer{i}.bias"), b));
        }
        out
    }

    /// Rebuild from tensors in [`MlpParams::named`] order.
    pub fn from_flat(cfg: &MlpConfig, tensors: Vec<Tensor<T>>) -> Self {
        assert_eq!(tensors.len(), cfg.layer_dims().len() * 2);
        let layers = tensors
            .chunks_exact(2)
            .map(|pair| (pair[0].clone(), pair[1].clone()))
            .collect();
        MlpParams { layers }
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }
}

/// Logits for a matrix of feature rows (N x in_dim) -> (N x 1).
pub fn mlp_rows<T: Element>(rows: &Tensor<T>, params: &MlpParams<T>) -> Result<Tensor<T>> {
    let shape = rows.shape();
    if shape.len() != 2 || shape[1] != params.layers[0].0.shape()[1] {
        return Err(CrmError::shape(format!(
            "mlp_rows: rows {:?} do not match input dim {}",
            shape,
            params.layers[0].0.shape()[1]
        )));
    }
    let mut x = rows.clone();
    let last = params.layers.len() - 1;
    for (i, (w, b)) in params.layers.iter().enumerate() {
        x = linear(&x, w, Some(b))?;
        if i != last {
            x = relu(&x);
        }
    }
    Ok(x)
}

/// Logit of a single aligned feature vector.
pub fn mlp_forward<T: Element>(vec: &Tensor<T>, params: &MlpParams<T>) -> Result<Tensor<T>> {
    let n = vec.len();
    let rows = reshape(vec, vec![1, n])?;
    let out = mlp_rows(&rows, params)?;
    reshape(&out, vec![1])
}

/// Normalized weighted mean of the four corner logits.
pub fn aggregate(logits: [f64; CORNERS], weights: [f64; CORNERS]) -> Result<f64> {
    if weights.iter().any(|&w| w < 0.0) {
        return Err(CrmError::invalid("aggregate: negative weight"));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(CrmError::invalid("aggregate: all-zero weights"));
    }
    Ok(logits
        .iter()
        .zip(weights.iter())
        .map(|(&l, &w)| l * w / total)
        .sum())
}

/// Inference-time variants of the decode pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefineMode {
    /// Continuous alignment + four-corner implicit aggregation.
    #[default]
    Full,
    /// Bilinear feature upsampling, zeroed position channels, one MLP
    /// evaluation per pixel.
    NoCam,
    /// Hard assignment to the nearest corner instead of the area-weighted
    /// ensemble.
    NoImplicit,
}

/// Encoder and decoder weights plus their configurations.
pub struct CrmModel<T: Element = f32> {
    pub enc_cfg: EncoderConfig,
    pub mlp_cfg: MlpConfig,
    pub encoder: EncoderParams<T>,
    pub mlp: MlpParams<T>,
}

impl<T: Element> CrmModel<T> {
    pub fn init<R: Rng>(enc_cfg: EncoderConfig, hidden: usize, rng: &mut R) -> Result<Self> {
        enc_cfg.validate()?;
        let mlp_cfg = MlpConfig::new(enc_cfg.latent_channels, hidden);
        Ok(CrmModel {
            enc_cfg,
            mlp_cfg,
            encoder: EncoderParams::init(&enc_cfg, rng),
            mlp: MlpParams::init(&mlp_cfg, rng),
        })
    }

    /// Paper-scale defaults: 64 latent channels, width-256 MLP.
    pub fn paper_default<R: Rng>(rng: &mut R) -> Self {
        Self::init(EncoderConfig::default(), 256, rng).expect("default config is valid")
    }

    /// CPU-scale defaults used by the bundled experiments.
    pub fn desk<R: Rng>(rng: &mut R) -> Self {
        Self::init(EncoderConfig::desk(), 48, rng).expect("desk config is valid")
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.named();
        out.extend(self.mlp.named());
        out
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        let mut out = self.encoder.tensors();
        out.extend(self.mlp.tensors());
        out
    }

    pub fn set_tracked(&self) {
        for t in self.tensors() {
            let _ = t.requires_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn encode(&self, i_coarse: &Tensor<T>) -> Result<LatentFeature<T>> {
        encode(i_coarse, &self.enc_cfg, &self.encoder)
    }

    /// Decode a latent map at `target_shape` into a soft mask 1 x H_t x W_t.
    pub fn decode(
        &self,
        latent: &LatentFeature<T>,
        target_shape: (usize, usize),
        mode: RefineMode,
    ) -> Result<Tensor<T>> {
        let (th, tw) = target_shape;
        if th == 0 || tw == 0 {
            return Err(CrmError::invalid("decode: empty target shape"));
        }
        let total = th * tw;
        let tracked = latent.tensor.is_tracked()
            || self.mlp.layers.iter().any(|(w, _)| w.is_tracked());
        if tracked || total <= DECODE_CHUNK {
            let soft = self.decode_range(latent, target_shape, 0..total, mode)?;
            return reshape(&soft, vec![1, th, tw]);
        }
        // Chunked path: pixels are independent, so stitching ranges is
        // bit-identical to one pass.
        let mut data = Vec::with_capacity(total);
        let mut start = 0;
        while start < total {
            let end = (start + DECODE_CHUNK).min(total);
            let soft = self.decode_range(latent, target_shape, start..end, mode)?;
            data.extend_from_slice(&soft.data());
            start = end;
        }
        Ok(Tensor::from_vec(vec![1, th, tw], data))
    }

    /// Soft mask values for a contiguous pixel range, shape [len].
    fn decode_range(
        &self,
        latent: &LatentFeature<T>,
        target_shape: (usize, usize),
        range: std::ops::Range<usize>,
        mode: RefineMode,
    ) -> Result<Tensor<T>> {
        let logits = match mode {
            RefineMode::Full => {
                let set = cam::assemble_range(latent, target_shape, range)?;
                let logits = mlp_rows(&set.features, &self.mlp)?;
                aggregate_corners(&logits, &set.weights_as::<T>(), CORNERS)?
            }
            RefineMode::NoImplicit => {
                let set = cam::assemble_range(latent, target_shape, range)?;
                // Hard assignment: all weight on the nearest corner.
                let mut hard = vec![T::ZERO; set.weights.len()];
                for (pix, chunk) in set.weights.chunks(CORNERS).enumerate() {
                    let nearest = chunk
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite weights"))
                        .map(|(k, _)| k)
                        .unwrap_or(0);
                    hard[pix * CORNERS + nearest] = T::ONE;
                }
                let logits = mlp_rows(&set.features, &self.mlp)?;
                aggregate_corners(&logits, &hard, CORNERS)?
            }
            RefineMode::NoCam => {
                let (th, tw) = target_shape;
                let resized = resize_bilinear(&latent.tensor, th, tw)?;
                let cells: Vec<usize> = range.clone().collect();
                let feat_rows = gather_cells(&resized, &cells)?;
                let zeros = Tensor::zeros(vec![cells.len(), POSITION_CHANNELS]);
                let rows = concat(&[&zeros, &feat_rows], 1)?;
                let logits = mlp_rows(&rows, &self.mlp)?;
                reshape(&logits, vec![cells.len()])?
            }
        };
        Ok(sigmoid(&clamp(&logits, -LOGIT_CLAMP, LOGIT_CLAMP)))
    }

    /// One refinement pass: image + mask in, soft mask at `target_shape` out.
    pub fn refine_once(
        &self,
        image: &Tensor<T>,
        mask: &Tensor<T>,
        target_shape: (usize, usize),
    ) -> Result<Tensor<T>> {
        self.refine_once_mode(image, mask, target_shape, RefineMode::Full)
    }

    pub fn refine_once_mode(
        &self,
        image: &Tensor<T>,
        mask: &Tensor<T>,
        target_shape: (usize, usize),
        mode: RefineMode,
    ) -> Result<Tensor<T>> {
        let si = image.shape();
        let sm = mask.shape();
        if si.len() != 3 || si[0] != 3 {
            return Err(CrmError::shape(format!(
                "refine_once: expected 3 x H x W image, got {si:?}"
            )));
        }
        if sm.len() != 3 || sm[0] != 1 || sm[1] != si[1] || sm[2] != si[2] {
            return Err(CrmError::shape(format!(
                "refine_once: mask {sm:?} does not align with image {si:?}"
            )));
        }
        let stacked = concat(&[image, mask], 0)?;
        let latent = self.encode(&stacked)?;
        self.decode(&latent, target_shape, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn five_layer_param_count_formula() {
        // C = 64, width 256: 70*256+256 + 3*(256*256+256) + 256*1+1.
        let cfg = MlpConfig::new(64, 256);
        assert_eq!(cfg.in_dim, 70);
        let expect = 70 * 256 + 256 + 3 * (256 * 256 + 256) + 256 + 1;
        assert_eq!(cfg.param_count(), expect);
        assert_eq!(expect, 215_809);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = MlpParams::<f32>::init(&cfg, &mut rng);
        let total: usize = params.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(total, expect);
    }

    #[test]
    fn zero_weights_pass_only_output_bias() {
        let cfg = MlpConfig::new(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = MlpParams::<f64>::init(&cfg, &mut rng);
        for (w, b) in params.layers.iter_mut() {
            *w = Tensor::zeros(w.shape());
            *b = Tensor::zeros(b.shape());
        }
        let out_bias = 0.37;
        params.layers[4].1 = Tensor::from_vec(vec![1], vec![out_bias]);
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vec = Tensor::randn(vec![cfg.in_dim], 1.0, &mut rng);
            let logit = mlp_forward(&vec, &params).unwrap().item();
            assert!((logit - out_bias).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_dimension_mismatch_is_error() {
        let cfg = MlpConfig::new(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = MlpParams::<f32>::init(&cfg, &mut rng);
        let bad = Tensor::zeros(vec![cfg.in_dim + 1]);
        assert!(mlp_forward(&bad, &params).is_err());
    }

    #[test]
    fn mlp_gradcheck_random_vector() {
        use crate::diffcore::{grad_check_fn, mean_all};
        let cfg = MlpConfig::new(8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = MlpParams::<f64>::init(&cfg, &mut rng);
        let vec = Tensor::randn(vec![cfg.in_dim], 1.0, &mut rng);
        let report = grad_check_fn(
            "mlp_forward",
            |ins| {
                let p = MlpParams {
                    layers: vec![
                        (ins[1].clone(), ins[2].clone()),
                        (ins[3].clone(), ins[4].clone()),
                        (ins[5].clone(), ins[6].clone()),
                        (ins[7].clone(), ins[8].clone()),
                        (ins[9].clone(), ins[10].clone()),
                    ],
                };
                mean_all(&mlp_forward(&ins[0], &p).unwrap())
            },
            &{
                let mut inputs = vec![vec];
                for (w, b) in &params.layers {
                    inputs.push(w.clone());
                    inputs.push(b.clone());
                }
                inputs
            },
            Some(20),
            7,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn aggregate_examples() {
        let equal = aggregate([5.0; 4], [0.4, 0.3, 0.2, 0.1]).unwrap();
        assert!((equal - 5.0).abs() < 1e-12);
        assert_eq!(
            aggregate([1.0, 2.0, 3.0, 4.0], [1.0, 0.0, 0.0, 0.0]).unwrap(),
            1.0
        );
        let v = aggregate([1.0, 2.0, 3.0, 4.0], [0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
        assert!(aggregate([0.0; 4], [0.0; 4]).is_err());
    }

    #[test]
    fn refine_once_output_contract() {
        let model = tiny_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let image = Tensor::randn(vec![3, 16, 16], 0.3, &mut rng);
        let mask = Tensor::full(vec![1, 16, 16], 0.5);
        // Arbitrary non-integer scale factors, including shrink.
        for target in [(16, 16), (25, 25), (40, 26), (7, 13), (1, 1)] {
            let out = model.refine_once(&image, &mask, target).unwrap();
            assert_eq!(out.shape(), vec![1, target.0, target.1]);
            assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn refine_once_deterministic() {
        let model = tiny_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let image = Tensor::randn(vec![3, 20, 20], 0.3, &mut rng);
        let mask = Tensor::full(vec![1, 20, 20], 0.25);
        let a = model.refine_once(&image, &mask, (33, 30)).unwrap();
        let b = model.refine_once(&image, &mask, (33, 30)).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn chunked_decode_matches_unchunked() {
        // Force both paths over the same latent and compare bits.
        let model = tiny_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let image = Tensor::randn(vec![3, 16, 16], 0.3, &mut rng);
        let mask = Tensor::full(vec![1, 16, 16], 0.5);
        let stacked = concat(&[&image, &mask], 0).unwrap();
        let latent = model.encode(&stacked).unwrap();
        let full = model
            .decode(&latent, (64, 64), RefineMode::Full)
            .unwrap();
        let mut stitched = Vec::new();
        let total = 64 * 64;
        let mut start = 0;
        while start < total {
            let end = (start + 777).min(total);
            let part = model
                .decode_range(&latent, (64, 64), start..end, RefineMode::Full)
                .unwrap();
            stitched.extend_from_slice(&part.data());
            start = end;
        }
        assert_eq!(full.to_vec(), stitched);
    }

    #[test]
    fn aggregation_convexity_in_logit_space() {
        // The aggregated logit must lie within [min, max] of corner logits;
        // checked through the soft mask by comparing against corner-wise
        // sigmoid bounds.
        let model = tiny_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let image = Tensor::randn(vec![3, 16, 16], 0.5, &mut rng);
        let mask = Tensor::full(vec![1, 16, 16], 0.5);
        let stacked = concat(&[&image, &mask], 0).unwrap();
        let latent = model.encode(&stacked).unwrap();
        let set = cam::assemble(&latent, (24, 24)).unwrap();
        let logits = mlp_rows(&set.features, &model.mlp).unwrap();
        let lv = logits.to_vec();
        let agg = aggregate_corners(&logits, &set.weights_as::<f32>(), CORNERS).unwrap();
        for (pix, &a) in agg.data().iter().enumerate() {
            let corner = &lv[pix * CORNERS..(pix + 1) * CORNERS];
            let lo = corner.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = corner.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(a >= lo - 1e-5 && a <= hi + 1e-5, "pixel {pix}: {a} not in [{lo}, {hi}]");
        }
    }

    #[test]
    fn ablation_modes_diverge_from_full() {
        let model = tiny_model(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let image = Tensor::randn(vec![3, 16, 16], 0.5, &mut rng);
        let mask = Tensor::full(vec![1, 16, 16], 0.5);
        let full = model
            .refine_once_mode(&image, &mask, (32, 32), RefineMode::Full)
            .unwrap();
        for mode in [RefineMode::NoCam, RefineMode::NoImplicit] {
            let ablated = model
                .refine_once_mode(&image, &mask, (32, 32), mode)
                .unwrap();
            assert_eq!(ablated.shape(), vec![1, 32, 32]);
            let delta = full
                .to_vec()
                .iter()
                .zip(ablated.to_vec().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(delta > 0.0, "{mode:?} output identical to full");
        }
    }
}
