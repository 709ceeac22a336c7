//! Encoder: 4-channel image+mask stack to a latent feature map.
//!
//! A small residual CNN with configurable width and output stride. After the
//! strided stages, a global-context block pools the whole map into one
//! vector, broadcasts it back, and fuses it with a 1x1 convolution; a skip
//! connection from the half-stride stage is projected in before the head.
//! Any encoder satisfying `h = ceil(H/s), w = ceil(W/s)` can be substituted
//! behind [`encode`].

use rand::Rng;

use crate::diffcore::{
    add, broadcast_hw, concat, conv2d, global_avg_pool, relu, Element, Tensor,
};
use crate::error::{CrmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub base_channels: usize,
    pub latent_channels: usize,
    pub output_stride: usize,
    /// Residual blocks per strided stage.
    pub depth: usize,
    /// Ablation flag for the global-context block.
    pub global_context: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            base_channels: 32,
            latent_channels: 64,
            output_stride: 4,
            depth: 2,
            global_context: true,
        }
    }
}

impl EncoderConfig {
    /// Reduced configuration for CPU-scale training runs.
    pub fn desk() -> Self {
        EncoderConfig {
            base_channels: 16,
            latent_channels: 32,
            output_stride: 4,
            depth: 1,
            global_context: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.output_stride, 4 | 8) {
            return Err(CrmError::invalid(format!(
                "encoder output_stride must be 4 or 8, got {}",
                self.output_stride
            )));
        }
        if self.latent_channels < 8 {
            return Err(CrmError::invalid(format!(
                "encoder latent_channels must be >= 8, got {}",
                self.latent_channels
            )));
        }
        if self.base_channels == 0 || self.depth == 0 {
            return Err(CrmError::invalid("encoder base_channels/depth must be > 0"));
        }
        Ok(())
    }

    fn num_stages(&self) -> usize {
        // stride 4 -> 2 stride-2 stages, stride 8 -> 3
        self.output_stride.trailing_zeros() as usize
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << (stage + 1)
    }

    fn trunk_channels(&self) -> usize {
        self.stage_channels(self.num_stages() - 1)
    }
}

/// Encoder output: a C x h x w map plus the input extent it came from.
#[derive(Clone)]
pub struct LatentFeature<T: Element = f32> {
    pub tensor: Tensor<T>,
    pub source_shape: (usize, usize),
}

impl<T: Element> LatentFeature<T> {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        let s = self.tensor.shape();
        (s[1], s[2])
    }
}

pub struct ConvParams<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> ConvParams<T> {
    fn init<R: Rng>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (c_in * k * k) as f64;
        ConvParams {
            weight: Tensor::randn(vec![c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(vec![c_out]),
        }
    }

    fn collect<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{name}.weight"), &self.weight));
        out.push((format!("{name}.bias"), &self.bias));
    }
}

pub struct BlockParams<T: Element = f32> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
}

pub struct StageParams<T: Element = f32> {
    pub down: ConvParams<T>,
    pub blocks: Vec<BlockParams<T>>,
}

/// All encoder weights in a fixed traversal order.
pub struct EncoderParams<T: Element = f32> {
    pub stem: ConvParams<T>,
    pub stages: Vec<StageParams<T>>,
    pub ctx_fuse: ConvParams<T>,
    pub skip_proj: ConvParams<T>,
    pub head: ConvParams<T>,
}

impl<T: Element> EncoderParams<T> {
    pub fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let b = cfg.base_channels;
        let mut stages = Vec::new();
        let mut ch = b;
        for stage in 0..cfg.num_stages() {
            let out_ch = cfg.stage_channels(stage);
            let down = ConvParams::init(out_ch, ch, 3, rng);
            let blocks = (0..cfg.depth)
                .map(|_| BlockParams {
                    conv1: ConvParams::init(out_ch, out_ch, 3, rng),
                    conv2: ConvParams::init(out_ch, out_ch, 3, rng),
                })
                .collect();
            stages.push(StageParams { down, blocks });
            ch = out_ch;
        }
        let trunk = cfg.trunk_channels();
        let half = cfg.stage_channels(cfg.num_stages().saturating_sub(2));
        let half = if cfg.num_stages() >= 2 { half } else { b };
        EncoderParams {
            stem: ConvParams::init(b, 4, 3, rng),
            stages,
            ctx_fuse: ConvParams::init(trunk, 2 * trunk, 1, rng),
            skip_proj: ConvParams::init(trunk, half, 1, rng),
            head: ConvParams::init(cfg.latent_channels, trunk, 1, rng),
        }
    }

    /// Rebuild from tensors in the exact order [`EncoderParams::named`]
    /// produces them; used when loading checkpoints.
    pub fn from_flat(cfg: &EncoderConfig, tensors: Vec<Tensor<T>>) -> Self {
        let mut it = tensors.into_iter();
        let mut conv = move || ConvParams {
            weight: it.next().expect("checkpoint tensor order"),
            bias: it.next().expect("checkpoint tensor order"),
        };
        let stem = conv();
        let stages = (0..cfg.num_stages())
            .map(|_| StageParams {
                down: conv(),
                blocks: (0..cfg.depth)
                    .map(|_| BlockParams {
                        conv1: conv(),
                        conv2: conv(),
                    })
                    .collect(),
            })
            .collect();
        EncoderParams {
            stem,
            stages,
            ctx_fuse: conv(),
            skip_proj: conv(),
            head: conv(),
        }
    }

    /// Named views over every tensor, checkpoint ordering.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.stem.collect("encoder.stem", &mut out);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.down.collect(&format!("encoder.stage{i}.down"), &mut out);
            for (j, blk) in stage.blocks.iter().enumerate() {
                blk.conv1
                    .collect(&format!("encoder.stage{i}.block{j}.conv1"), &mut out);
                blk.conv2
                    .collect(&format!("encoder.stage{i}.block{j}.conv2"), &mut out);
            }
        }
        self.ctx_fuse.collect("encoder.ctx_fuse", &mut out);
        self.skip_proj.collect("encoder.skip_proj", &mut out);
        self.head.collect("encoder.head", &mut out);
        out
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_tracked(&self) {
        for t in self.tensors() {
            let _ = t.requires_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn conv_relu<T: Element>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    Ok(relu(&conv2d(x, &p.weight, Some(&p.bias), stride, pad)?))
}

fn residual_block<T: Element>(x: &Tensor<T>, blk: &BlockParams<T>) -> Result<Tensor<T>> {
    let y = conv_relu(x, &blk.conv1, 1, 1)?;
    let y = conv2d(&y, &blk.conv2.weight, Some(&blk.conv2.bias), 1, 1)?;
    Ok(relu(&add(x, &y)?))
}

/// Map a 4 x H x W image+mask stack to a latent feature map.
///
/// Output is `latent_channels x ceil(H/s) x ceil(W/s)` for every H, W >= s,
/// including extents that are not multiples of the stride.
pub fn encode<T: Element>(
    i_coarse: &Tensor<T>,
    cfg: &EncoderConfig,
    params: &EncoderParams<T>,
) -> Result<LatentFeature<T>> {
    cfg.validate()?;
    let shape = i_coarse.shape();
    if shape.len() != 3 || shape[0] != 4 {
        return Err(CrmError::shape(format!(
            "encode: expected 4 x H x W input, got {:?}",
            shape
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let s = cfg.output_stride;
    if h < s || w < s {
        return Err(CrmError::shape(format!(
            "encode: input {h} x {w} smaller than output stride {s}"
        )));
    }

    let mut x = conv_relu(i_coarse, &params.stem, 1, 1)?;
    let mut half_stride_map = None;
    let n_stages = params.stages.len();
    for (i, stage) in params.stages.iter().enumerate() {
        x = conv_relu(&x, &stage.down, 2, 1)?;
        for blk in &stage.blocks {
            x = residual_block(&x, blk)?;
        }
        if i + 2 == n_stages {
            half_stride_map = Some(x.clone());
        }
    }

    if cfg.global_context {
        let pooled = global_avg_pool(&x)?;
        let xs = x.shape();
        let wide = broadcast_hw(&pooled, xs[1], xs[2])?;
        let stacked = concat(&[&x, &wide], 0)?;
        x = conv_relu(&stacked, &params.ctx_fuse, 1, 0)?;
    }

    if let Some(skip) = half_stride_map {
        // 1x1 stride-2 projection halves the skip map with the same
        // ceiling rule as the trunk.
        let proj = conv2d(
            &skip,
            &params.skip_proj.weight,
            Some(&params.skip_proj.bias),
            2,
            0,
        )?;
        x = relu(&add(&x, &proj)?);
    }

    let latent = conv2d(&x, &params.head.weight, Some(&params.head.bias), 1, 0)?;
    Ok(LatentFeature {
        tensor: latent,
        source_shape: (h, w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            base_channels: 4,
            latent_channels: 8,
            output_stride: 4,
            depth: 1,
            global_context: true,
        }
    }

    fn rand_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(vec![c, h, w], 1.0, &mut rng)
    }

    #[test]
    fn latent_shape_64_to_16() {
        let cfg = EncoderConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let out = encode(&rand_input(4, 64, 64, 1), &cfg, &params).unwrap();
        assert_eq!(out.tensor.shape(), vec![32, 16, 16]);
        assert_eq!(out.source_shape, (64, 64));
    }

    #[test]
    fn shape_law_on_non_multiples() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        for (h, w) in [(13, 21), (16, 17), (5, 4), (33, 64)] {
            let out = encode(&rand_input(4, h, w, 2), &cfg, &params).unwrap();
            assert_eq!(
                out.tensor.shape(),
                vec![8, h.div_ceil(4), w.div_ceil(4)],
                "input {h}x{w}"
            );
        }
    }

    #[test]
    fn stride_8_shape_law() {
        let cfg = EncoderConfig {
            output_stride: 8,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let out = encode(&rand_input(4, 40, 25, 3), &cfg, &params).unwrap();
        assert_eq!(out.tensor.shape(), vec![8, 5, 4]);
    }

    #[test]
    fn wrong_channel_count_is_error() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        assert!(encode(&rand_input(3, 16, 16, 4), &cfg, &params).is_err());
    }

    #[test]
    fn deterministic_for_fixed_params() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let input = rand_input(4, 24, 24, 5);
        let a = encode(&input, &cfg, &params).unwrap();
        let b = encode(&input, &cfg, &params).unwrap();
        assert_eq!(a.tensor.to_vec(), b.tensor.to_vec());
    }

    #[test]
    fn global_context_propagates_distant_information() {
        // Changing a far corner patch must move the latent vector at the
        // opposite corner through the pooled pathway.
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let base = rand_input(4, 32, 32, 6);
        let mut bumped = base.to_vec();
        // Perturb a 4x4 patch at the top-left of every channel.
        for c in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    bumped[c * 32 * 32 + y * 32 + x] += 3.0;
                }
            }
        }
        let bumped = Tensor::from_vec(vec![4, 32, 32], bumped);
        let a = encode(&base, &cfg, &params).unwrap();
        let b = encode(&bumped, &cfg, &params).unwrap();
        let (gh, gw) = a.grid_shape();
        // Compare latent vectors at the bottom-right grid cell.
        let cell = (gh - 1) * gw + (gw - 1);
        let (va, vb) = (a.tensor.to_vec(), b.tensor.to_vec());
        let delta: f32 = (0..a.channels())
            .map(|c| (va[c * gh * gw + cell] - vb[c * gh * gw + cell]).abs())
            .sum();
        assert!(delta > 1e-6, "distant-corner latent unchanged: {delta}");
    }

    #[test]
    fn ablating_global_context_changes_outputs() {
        let cfg = tiny_cfg();
        let ablated = EncoderConfig {
            global_context: false,
            ..cfg
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = EncoderParams::<f32>::init(&cfg, &mut rng);
        let input = rand_input(4, 16, 16, 7);
        let a = encode(&input, &cfg, &params).unwrap();
        let b = encode(&input, &ablated, &params).unwrap();
        let max_delta = a
            .tensor
            .to_vec()
            .iter()
            .zip(b.tensor.to_vec().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_delta > 0.0);
    }
}
