//! Bilinear resize under the half-pixel-center convention.

use rayon::prelude::*;

use super::tensor::{Element, Tensor};
use crate::error::{CrmError, Result};

/// Source coordinate of output index `i` when resampling `n` -> `out`.
///
/// Half-pixel centers: output center `(i + 0.5) / out` maps to source
/// coordinate `(i + 0.5) * n / out - 0.5` in index units. A same-size call
/// yields exactly `i`.
fn src_coord(i: usize, n: usize, out: usize) -> f64 {
    (i as f64 + 0.5) * (n as f64 / out as f64) - 0.5
}

struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_taps(n: usize, out: usize) -> AxisTaps {
    let mut lo = Vec::with_capacity(out);
    let mut hi = Vec::with_capacity(out);
    let mut frac = Vec::with_capacity(out);
    for i in 0..out {
        let u = src_coord(i, n, out);
        let f = u.floor();
        let a = (f as isize).clamp(0, n as isize - 1) as usize;
        let b = (f as isize + 1).clamp(0, n as isize - 1) as usize;
        // Both taps clamp to the same pixel at the border; zeroing the
        // fraction there makes edge replication exact.
        let t = if a == b { 0.0 } else { u - f };
        lo.push(a);
        hi.push(b);
        frac.push(t);
    }
    AxisTaps { lo, hi, frac }
}

/// Resample a C x H x W tensor to C x out_h x out_w.
///
/// Border taps replicate the edge row/column. Differentiable; the backward
/// pass scatters each output gradient onto its four source taps.
pub fn resize_bilinear<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(CrmError::shape(format!(
            "resize_bilinear: expected C x H x W, got {:?}",
            s
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(CrmError::invalid("resize_bilinear: zero output extent"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);

    let mut data = vec![T::ZERO; c * out_h * out_w];
    {
        let src_guard = x.data();
        let src: &[T] = &src_guard;
        data.par_chunks_mut(out_h * out_w)
            .enumerate()
            .for_each(|(ch, plane)| {
                let sp = &src[ch * h * w..(ch + 1) * h * w];
                for oy in 0..out_h {
                    let (y0, y1, ty) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
                    let r0 = &sp[y0 * w..y0 * w + w];
                    let r1 = &sp[y1 * w..y1 * w + w];
                    let dst = &mut plane[oy * out_w..(oy + 1) * out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let (x0, x1, tx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                        let w00 = T::from_f64((1.0 - ty) * (1.0 - tx));
                        let w01 = T::from_f64((1.0 - ty) * tx);
                        let w10 = T::from_f64(ty * (1.0 - tx));
                        let w11 = T::from_f64(ty * tx);
                        *d = w00 * r0[x0] + w01 * r0[x1] + w10 * r1[x0] + w11 * r1[x1];
                    }
                }
            });
    }

    let px = x.clone();
    Ok(Tensor::make_result(
        vec![c, out_h, out_w],
        data,
        vec![x.clone()],
        Box::new(move |g| {
            let ys = axis_taps(h, out_h);
            let xs = axis_taps(w, out_w);
            let mut temp = vec![T::ZERO; c * h * w];
            temp.par_chunks_mut(h * w).enumerate().for_each(|(ch, dp)| {
                let gp = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                for oy in 0..out_h {
                    let (y0, y1, ty) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
                    for ox in 0..out_w {
                        let (x0, x1, tx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                        let gv = gp[oy * out_w + ox];
                        dp[y0 * w + x0] += T::from_f64((1.0 - ty) * (1.0 - tx)) * gv;
                        dp[y0 * w + x1] += T::from_f64((1.0 - ty) * tx) * gv;
                        dp[y1 * w + x0] += T::from_f64(ty * (1.0 - tx)) * gv;
                        dp[y1 * w + x1] += T::from_f64(ty * tx) * gv;
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
    fn same_size_is_exact_identity() {
        let x = Tensor::<f32>::from_vec(vec![2, 3, 4], (0..24).map(|v| v as f32 * 0.37).collect());
        let y = resize_bilinear(&x, 3, 4).unwrap();
        assert_eq!(x.to_vec(), y.to_vec());
    }

    #[test]
    fn one_pixel_input_broadcasts() {
        let x = Tensor::<f64>::from_vec(vec![1, 1, 1], vec![0.625]);
        let y = resize_bilinear(&x, 5, 7).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.625));
    }

    #[test]
    fn two_by_two_to_three_center_is_mean() {
        // [a, b; c, d] upsampled to 3x3: center sits midway between all four.
        let (a, b, c, d) = (1.0, 2.0, 3.0, 5.0);
        let x = Tensor::<f64>::from_vec(vec![1, 2, 2], vec![a, b, c, d]);
        let y = resize_bilinear(&x, 3, 3).unwrap();
        let v = y.to_vec();
        assert!((v[4] - (a + b + c + d) / 4.0).abs() < 1e-12);
        // Corners replicate the nearest source pixel.
        assert!((v[0] - a).abs() < 1e-12);
        assert!((v[2] - b).abs() < 1e-12);
        assert!((v[6] - c).abs() < 1e-12);
        assert!((v[8] - d).abs() < 1e-12);
    }

    #[test]
    fn zero_extent_is_error() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 2]);
        assert!(resize_bilinear(&x, 0, 2).is_err());
    }
}
