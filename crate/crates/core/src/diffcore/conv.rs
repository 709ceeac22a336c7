//! 2-D convolution via im2col plus GEMM, and replicate padding.

use rayon::prelude::*;

use super::matmul::{matmul_a_bt_into, matmul_at_b_accumulate, matmul_into};
use super::tensor::{Element, Tensor};
use crate::error::{CrmError, Result};

/// Output extent of a convolution along one axis.
pub(crate) fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unrolled patches: rows are (c, ki, kj), columns are output positions.
/// Out-of-bounds taps read zero.
fn im2col<T: Element>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let spatial = oh * ow;
    let mut cols = vec![T::ZERO; c_in * k * k * spatial];
    cols.par_chunks_mut(spatial)
        .enumerate()
        .for_each(|(row, dst)| {
            let c = row / (k * k);
            let ki = (row / k) % k;
            let kj = row % k;
            let plane = &input[c * h * w..(c + 1) * h * w];
            for oy in 0..oh {
                let y = (oy * stride + ki) as isize - pad as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                let src_row = &plane[y as usize * w..(y as usize + 1) * w];
                let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                for (ox, d) in dst_row.iter_mut().enumerate() {
                    let x = (ox * stride + kj) as isize - pad as isize;
                    if x >= 0 && x < w as isize {
                        *d = src_row[x as usize];
                    }
                }
            }
        });
    cols
}

/// Scatter column gradients back onto the input plane; inverse of [`im2col`].
fn col2im<T: Element>(
    dcols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let spatial = oh * ow;
    let mut dinput = vec![T::ZERO; c_in * h * w];
    dinput
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(c, plane)| {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &dcols[row * spatial..(row + 1) * spatial];
                    for oy in 0..oh {
                        let y = (oy * stride + ki) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let x = (ox * stride + kj) as isize - pad as isize;
                            if x >= 0 && x < w as isize {
                                plane[y as usize * w + x as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        });
    dinput
}

/// Convolution of a C_in x H x W input with an O x C_in x k x k kernel.
///
/// Zero padding, square odd kernel. Output is O x H' x W' with
/// `H' = (H + 2*pad - k) / stride + 1`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let si = input.shape();
    let sw = weight.shape();
    if si.len() != 3 || sw.len() != 4 {
        return Err(CrmError::shape(format!(
            "conv2d: expected C x H x W input and O x C x k x k weight, got {:?} and {:?}",
            si, sw
        )));
    }
    let (c_in, h, w) = (si[0], si[1], si[2]);
    let (c_out, wc, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    if wc != c_in {
        return Err(CrmError::shape(format!(
            "conv2d: input has {c_in} channels but weight expects {wc}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(CrmError::invalid(format!(
            "conv2d: kernel must be square and odd, got {kh} x {kw}"
        )));
    }
    if stride < 1 {
        return Err(CrmError::invalid("conv2d: stride must be >= 1"));
    }
    let k = kh;
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(CrmError::shape(format!(
            "conv2d: padded input {h} x {w} (+{pad}) smaller than kernel {k}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != vec![c_out] {
            return Err(CrmError::shape(format!(
                "conv2d: bias {:?} must be [{c_out}]",
                b.shape()
            )));
        }
    }
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);
    let spatial = oh * ow;
    let ck = c_in * k * k;

    let cols = im2col(&input.data(), c_in, h, w, k, stride, pad, oh, ow);
    let mut data = vec![T::ZERO; c_out * spatial];
    matmul_into(c_out, ck, spatial, &weight.data(), &cols, &mut data);
    if let Some(b) = bias {
        let bd_guard = b.data();
        let bd: &[T] = &bd_guard;
        data.par_chunks_mut(spatial)
            .zip(bd.par_iter())
            .for_each(|(plane, &bv)| {
                for v in plane.iter_mut() {
                    *v += bv;
                }
            });
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (pi, pw) = (input.clone(), weight.clone());
    let pb = bias.cloned();
    let w_saved = weight.to_vec();
    Ok(Tensor::make_result(
        vec![c_out, oh, ow],
        data,
        parents,
        Box::new(move |g| {
            // dW = g @ cols^T
            let mut dw = vec![T::ZERO; c_out * ck];
            matmul_a_bt_into(c_out, spatial, ck, g, &cols, &mut dw);
            pw.accumulate_grad(&dw);
            // dcols = W^T @ g, then fold back onto the input.
            let mut dcols = vec![T::ZERO; ck * spatial];
            matmul_at_b_accumulate(c_out, ck, spatial, &w_saved, g, &mut dcols);
            let dinput = col2im(&dcols, c_in, h, w, k, stride, pad, oh, ow);
            pi.accumulate_grad(&dinput);
            if let Some(b) = &pb {
                let db: Vec<T> = g
                    .chunks(spatial)
                    .map(|plane| plane.iter().fold(T::ZERO, |acc, &v| acc + v))
                    .collect();
                b.accumulate_grad(&db);
            }
        }),
    ))
}

/// Replicate-pad the spatial borders of a C x H x W tensor by `p` pixels.
pub fn pad_replicate<T: Element>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(CrmError::shape(format!(
            "pad_replicate: expected C x H x W, got {:?}",
            s
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut data = vec![T::ZERO; c * ph * pw];
    {
        let src_guard = x.data();
        let src: &[T] = &src_guard;
        data.par_chunks_mut(ph * pw)
            .enumerate()
            .for_each(|(ch, plane)| {
                let src_plane = &src[ch * h * w..(ch + 1) * h * w];
                for y in 0..ph {
                    let sy = (y as isize - p as isize).clamp(0, h as isize - 1) as usize;
                    for x_ in 0..pw {
                        let sx = (x_ as isize - p as isize).clamp(0, w as isize - 1) as usize;
                        plane[y * pw + x_] = src_plane[sy * w + sx];
                    }
                }
            });
    }
    let px = x.clone();
    Ok(Tensor::make_result(
        vec![c, ph, pw],
        data,
        vec![x.clone()],
        Box::new(move |g| {
            let mut temp = vec![T::ZERO; c * h * w];
            temp.par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(ch, plane)| {
                    let g_plane = &g[ch * ph * pw..(ch + 1) * ph * pw];
                    for y in 0..ph {
                        let sy = (y as isize - p as isize).clamp(0, h as isize - 1) as usize;
                        for x_ in 0..pw {
                            let sx = (x_ as isize - p as isize).clamp(0, w as isize - 1) as usize;
                            plane[sy * w + sx] += g_plane[y * pw + x_];
                        }
                    }
                });
            px.accumulate_grad(&temp);
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_input_through() {
        let input = Tensor::<f64>::from_vec(vec![1, 3, 3], (1..=9).map(f64::from).collect());
        let weight = Tensor::<f64>::from_vec(vec![1, 1, 1, 1], vec![1.0]);
        let out = conv2d(&input, &weight, None, 1, 0).unwrap();
        assert_eq!(out.shape(), vec![1, 3, 3]);
        assert_eq!(out.to_vec(), input.to_vec());
    }

    #[test]
    fn constant_input_ones_kernel_interior() {
        let c = 0.5;
        let input = Tensor::<f64>::full(vec![1, 5, 5], c);
        let weight = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
        let out = conv2d(&input, &weight, None, 1, 0).unwrap();
        assert_eq!(out.shape(), vec![1, 3, 3]);
        for &v in out.data().iter() {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn output_extent_law() {
        // H' = floor((H + 2*pad - k)/stride) + 1
        let input = Tensor::<f32>::zeros(vec![2, 11, 7]);
        let weight = Tensor::<f32>::zeros(vec![3, 2, 3, 3]);
        let out = conv2d(&input, &weight, None, 2, 1).unwrap();
        assert_eq!(out.shape(), vec![3, 6, 4]);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let input = Tensor::<f32>::zeros(vec![3, 8, 8]);
        let weight = Tensor::<f32>::zeros(vec![4, 2, 3, 3]);
        assert!(conv2d(&input, &weight, None, 1, 1).is_err());
    }

    #[test]
    fn pad_replicate_corners() {
        let x = Tensor::<f64>::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = pad_replicate(&x, 1).unwrap();
        assert_eq!(p.shape(), vec![1, 4, 4]);
        let d = p.to_vec();
        assert_eq!(d[0], 1.0); // top-left corner replicates
        assert_eq!(d[3], 2.0);
        assert_eq!(d[12], 3.0);
        assert_eq!(d[15], 4.0);
    }

    #[test]
    fn strided_conv_ceil_shape_chain() {
        // Two stride-2 convs with k=3, p=1 halve with ceiling each time.
        for h in [7usize, 8, 9, 13] {
            let input = Tensor::<f32>::zeros(vec![1, h, h]);
            let w1 = Tensor::<f32>::zeros(vec![1, 1, 3, 3]);
            let a = conv2d(&input, &w1, None, 2, 1).unwrap();
            assert_eq!(a.shape()[1], h.div_ceil(2));
            let b = conv2d(&a, &w1, None, 2, 1).unwrap();
            assert_eq!(b.shape()[1], h.div_ceil(4));
        }
    }
}
