//! Elementwise, linear-algebra and gather/aggregate ops with exact
//! analytic gradients.
//!
//! Backward closures always materialize parent gradients into temporary
//! buffers before accumulating, so an op applied to the same tensor twice
//! (e.g. `mul(&x, &x)`) never aliases a mutable borrow.

use rayon::prelude::*;

use super::matmul::{matmul_a_bt_into, matmul_at_b_accumulate, matmul_into};
use super::tensor::{Element, Tensor};
use crate::error::{CrmError, Result};

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CrmError::shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn unary<T: Element>(
    x: &Tensor<T>,
    forward: impl Fn(T) -> T,
    // (input value, output value, upstream grad) -> input grad contribution
    vjp: impl Fn(T, T, T) -> T + 'static,
) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| forward(v)).collect();
    let px = x.clone();
    let saved_in = x.to_vec();
    let saved_out = data.clone();
    Tensor::make_result(
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(move |g| {
            let temp: Vec<T> = saved_in
                .iter()
                .zip(saved_out.iter())
                .zip(g.iter())
                .map(|((&xi, &yi), &gi)| vjp(xi, yi, gi))
                .collect();
            px.accumulate_grad(&temp);
        }),
    )
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(
        x,
        |v| v.max(T::ZERO),
        |xi, _, gi| if xi > T::ZERO { gi } else { T::ZERO },
    )
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(
        x,
        |v| {
            if v >= T::ZERO {
                T::ONE / (T::ONE + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::ONE + e)
            }
        },
        |_, yi, gi| gi * yi * (T::ONE - yi),
    )
}

pub fn abs<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(
        x,
        |v| v.abs(),
        |xi, _, gi| {
            if xi > T::ZERO {
                gi
            } else if xi < T::ZERO {
                -gi
            } else {
                T::ZERO
            }
        },
    )
}

pub fn square<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(x, |v| v * v, |xi, _, gi| {
        gi * (xi + xi)
    })
}

pub fn ln<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(x, |v| v.ln(), |xi, _, gi| gi / xi)
}

/// Clamp to `[lo, hi]`; gradient passes through inside the closed interval.
pub fn clamp<T: Element>(x: &Tensor<T>, lo: f64, hi: f64) -> Tensor<T> {
    let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
    unary(
        x,
        move |v| v.max(lo).min(hi),
        move |xi, _, gi| {
            if xi >= lo && xi <= hi {
                gi
            } else {
                T::ZERO
            }
        },
    )
}

pub fn scale<T: Element>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let f = T::from_f64(factor);
    unary(x, move |v| v * f, move |_, _, gi| gi * f)
}

fn binary<T: Element>(
    op: &str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    forward: impl Fn(T, T) -> T,
    vjp_a: impl Fn(T, T, T) -> T + 'static,
    vjp_b: impl Fn(T, T, T) -> T + 'static,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| forward(x, y))
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    let (sa, sb) = (a.to_vec(), b.to_vec());
    Ok(Tensor::make_result(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let da: Vec<T> = sa
                .iter()
                .zip(sb.iter())
                .zip(g.iter())
                .map(|((&x, &y), &gi)| vjp_a(x, y, gi))
                .collect();
            pa.accumulate_grad(&da);
            let db: Vec<T> = sa
                .iter()
                .zip(sb.iter())
                .zip(g.iter())
                .map(|((&x, &y), &gi)| vjp_b(x, y, gi))
                .collect();
            pb.accumulate_grad(&db);
        }),
    ))
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("add", a, b, |x, y| x + y, |_, _, g| g, |_, _, g| g)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("sub", a, b, |x, y| x - y, |_, _, g| g, |_, _, g| -g)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(
        "mul",
        a,
        b,
        |x, y| x * y,
        |_, y, g| g * y,
        |x, _, g| g * x,
    )
}

/// Concatenate along `axis`. All operands must agree on every other extent.
pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(CrmError::invalid("concat: no operands"));
    }
    let base = parts[0].shape();
    if axis >= base.len() {
        return Err(CrmError::shape(format!(
            "concat: axis {axis} out of range for rank {}",
            base.len()
        )));
    }
    let mut axis_total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(base.iter())
                .enumerate()
                .any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(CrmError::shape(format!(
                "concat: shape {:?} incompatible with {:?} along axis {axis}",
                s, base
            )));
        }
        axis_total += s[axis];
    }
    let mut out_shape = base.clone();
    out_shape[axis] = axis_total;

    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let out_len: usize = out_shape.iter().product();
    let mut data = vec![T::ZERO; out_len];
    let row_out = axis_total * inner;
    let mut offset = 0;
    let mut spans = Vec::with_capacity(parts.len());
    for p in parts {
        let extent = p.shape()[axis];
        let pdata = p.data();
        for o in 0..outer {
            let src = &pdata[o * extent * inner..(o + 1) * extent * inner];
            let dst_start = o * row_out + offset * inner;
            data[dst_start..dst_start + extent * inner].copy_from_slice(src);
        }
        spans.push((offset, extent));
        offset += extent;
    }

    let parents: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
    let bw_parents = parents.clone();
    Ok(Tensor::make_result(
        out_shape,
        data,
        parents,
        Box::new(move |g| {
            for (p, &(off, extent)) in bw_parents.iter().zip(spans.iter()) {
                let mut temp = vec![T::ZERO; outer * extent * inner];
                for o in 0..outer {
                    let src_start = o * row_out + off * inner;
                    temp[o * extent * inner..(o + 1) * extent * inner]
                        .copy_from_slice(&g[src_start..src_start + extent * inner]);
                }
                p.accumulate_grad(&temp);
            }
        }),
    ))
}

/// Copy into a new shape with the same element count.
pub fn reshape<T: Element>(x: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != x.len() {
        return Err(CrmError::shape(format!(
            "reshape: {:?} has {} elements, target {:?} has {n}",
            x.shape(),
            x.len(),
            shape
        )));
    }
    let px = x.clone();
    Ok(Tensor::make_result(
        shape,
        x.to_vec(),
        vec![x.clone()],
        Box::new(move |g| px.accumulate_grad(g)),
    ))
}

/// `a @ b` for `a` of shape N x K and `b` of shape K x M.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(CrmError::shape(format!(
            "matmul: incompatible shapes {:?} x {:?}",
            sa, sb
        )));
    }
    let (n, k, m) = (sa[0], sa[1], sb[1]);
    let mut data = vec![T::ZERO; n * m];
    matmul_into(n, k, m, &a.data(), &b.data(), &mut data);
    let (pa, pb) = (a.clone(), b.clone());
    let (va, vb) = (a.to_vec(), b.to_vec());
    Ok(Tensor::make_result(
        vec![n, m],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            // da = g @ b^T
            let mut da = vec![T::ZERO; n * k];
            matmul_a_bt_into(n, m, k, g, &vb, &mut da);
            pa.accumulate_grad(&da);
            // db = a^T @ g
            let mut db = vec![T::ZERO; k * m];
            matmul_at_b_accumulate(n, k, m, &va, g, &mut db);
            pb.accumulate_grad(&db);
        }),
    ))
}

/// Affine map of row vectors: `x @ w^T + bias` with `x` N x K, `w` M x K.
pub fn linear<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
        return Err(CrmError::shape(format!(
            "linear: input {:?} incompatible with weight {:?}",
            sx, sw
        )));
    }
    let (n, k, m) = (sx[0], sx[1], sw[0]);
    if let Some(b) = bias {
        if b.shape() != vec![m] {
            return Err(CrmError::shape(format!(
                "linear: bias {:?} must be [{m}]",
                b.shape()
            )));
        }
    }
    let mut data = vec![T::ZERO; n * m];
    matmul_a_bt_into(n, k, m, &x.data(), &w.data(), &mut data);
    if let Some(b) = bias {
        let bd_guard = b.data();
        let bd: &[T] = &bd_guard;
        data.par_chunks_mut(m).for_each(|row| {
            for (r, &bv) in row.iter_mut().zip(bd.iter()) {
                *r += bv;
            }
        });
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (px, pw) = (x.clone(), w.clone());
    let pb = bias.cloned();
    let (vx, vw) = (x.to_vec(), w.to_vec());
    Ok(Tensor::make_result(
        vec![n, m],
        data,
        parents,
        Box::new(move |g| {
            // dx = g @ w
            let mut dx = vec![T::ZERO; n * k];
            matmul_into(n, m, k, g, &vw, &mut dx);
            px.accumulate_grad(&dx);
            // dw = g^T @ x
            let mut dw = vec![T::ZERO; m * k];
            matmul_at_b_accumulate(n, m, k, g, &vx, &mut dw);
            pw.accumulate_grad(&dw);
            if let Some(b) = &pb {
                let mut db = vec![T::ZERO; m];
                for row in g.chunks(m) {
                    for (d, &gv) in db.iter_mut().zip(row.iter()) {
                        *d += gv;
                    }
                }
                b.accumulate_grad(&db);
            }
        }),
    ))
}

pub fn sum_all<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().fold(T::ZERO, |acc, &v| acc + v);
    let px = x.clone();
    let n = x.len();
    Tensor::make_result(
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |g| {
            px.accumulate_grad(&vec![g[0]; n]);
        }),
    )
}

pub fn mean_all<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.len();
    let inv = T::ONE / T::from_f64(n as f64);
    let total = x.data().iter().fold(T::ZERO, |acc, &v| acc + v) * inv;
    let px = x.clone();
    Tensor::make_result(
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |g| {
            px.accumulate_grad(&vec![g[0] * inv; n]);
        }),
    )
}

/// Rows of per-cell feature vectors from a C x h x w map.
///
/// `cells[i]` indexes the flattened h*w spatial grid; row `i` of the output
/// is the C-vector at that cell. Backward scatter-adds row gradients back
/// into the map.
pub fn gather_cells<T: Element>(latent: &Tensor<T>, cells: &[usize]) -> Result<Tensor<T>> {
    let shape = latent.shape();
    if shape.len() != 3 {
        return Err(CrmError::shape(format!(
            "gather_cells: expected C x h x w map, got {:?}",
            shape
        )));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    if let Some(&bad) = cells.iter().find(|&&i| i >= hw) {
        return Err(CrmError::invalid(format!(
            "gather_cells: cell {bad} out of bounds for {hw}"
        )));
    }
    let n = cells.len();
    let mut data = vec![T::ZERO; n * c];
    {
        let src_guard = latent.data();
        let src: &[T] = &src_guard;
        data.par_chunks_mut(c)
            .zip(cells.par_iter())
            .for_each(|(row, &cell)| {
                for (ch, r) in row.iter_mut().enumerate() {
                    *r = src[ch * hw + cell];
                }
            });
    }
    let platent = latent.clone();
    let cells_saved: Vec<usize> = cells.to_vec();
    Ok(Tensor::make_result(
        vec![n, c],
        data,
        vec![latent.clone()],
        Box::new(move |g| {
            let mut temp = vec![T::ZERO; c * hw];
            for (row, &cell) in g.chunks(c).zip(cells_saved.iter()) {
                for (ch, &gv) in row.iter().enumerate() {
                    temp[ch * hw + cell] += gv;
                }
            }
            platent.accumulate_grad(&temp);
        }),
    ))
}

/// Weighted mean over fixed-size groups of consecutive entries.
///
/// `values` has `n * group` entries; entry `i` carries constant weight
/// `weights[i]`. Output `o[j] = sum_k w[j*group+k] * v[j*group+k]`; callers
/// pass weights already normalized per group.
pub fn aggregate_corners<T: Element>(
    values: &Tensor<T>,
    weights: &[T],
    group: usize,
) -> Result<Tensor<T>> {
    let len = values.len();
    if group == 0 || len % group != 0 || weights.len() != len {
        return Err(CrmError::shape(format!(
            "aggregate_corners: {len} values, {} weights, group {group}",
            weights.len()
        )));
    }
    let n = len / group;
    let data: Vec<T> = {
        let v_guard = values.data();
        let v: &[T] = &v_guard;
        (0..n)
            .into_par_iter()
            .map(|j| {
                let mut acc = T::ZERO;
                for k in 0..group {
                    acc += weights[j * group + k] * v[j * group + k];
                }
                acc
            })
            .collect()
    };
    let pv = values.clone();
    let w_saved: Vec<T> = weights.to_vec();
    Ok(Tensor::make_result(
        vec![n],
        data,
        vec![values.clone()],
        Box::new(move |g| {
            let temp: Vec<T> = w_saved
                .iter()
                .enumerate()
                .map(|(i, &w)| w * g[i / group])
                .collect();
            pv.accumulate_grad(&temp);
        }),
    ))
}

/// Mean over the spatial extent of each channel: C x H x W -> C x 1 x 1.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(CrmError::shape(format!(
            "global_avg_pool: expected C x H x W, got {:?}",
            shape
        )));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let inv = T::ONE / T::from_f64(hw as f64);
    let data: Vec<T> = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().fold(T::ZERO, |acc, &v| acc + v) * inv)
        .collect();
    let px = x.clone();
    Ok(Tensor::make_result(
        vec![c, 1, 1],
        data,
        vec![x.clone()],
        Box::new(move |g| {
            let mut temp = vec![T::ZERO; c * hw];
            for (ch, plane) in temp.chunks_mut(hw).enumerate() {
                let gv = g[ch] * inv;
                plane.fill(gv);
            }
            px.accumulate_grad(&temp);
        }),
    ))
}

/// Broadcast a C x 1 x 1 tensor over a spatial extent: -> C x H x W.
pub fn broadcast_hw<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != 1 || shape[2] != 1 {
        return Err(CrmError::shape(format!(
            "broadcast_hw: expected C x 1 x 1, got {:?}",
            shape
        )));
    }
    let c = shape[0];
    let hw = h * w;
    let mut data = vec![T::ZERO; c * hw];
    {
        let src = x.data();
        for (ch, plane) in data.chunks_mut(hw).enumerate() {
            plane.fill(src[ch]);
        }
    }
    let px = x.clone();
    Ok(Tensor::make_result(
        vec![c, h, w],
        data,
        vec![x.clone()],
        Box::new(move |g| {
            let temp: Vec<T> = g
                .chunks(hw)
                .map(|plane| plane.iter().fold(T::ZERO, |acc, &v| acc + v))
                .collect();
            px.accumulate_grad(&temp);
        }),
    ))
}

pub use super::conv::{conv2d, pad_replicate};
pub use super::resize::resize_bilinear;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn relu_values() {
        let x = t(vec![2], vec![-2.0, 3.0]);
        assert_eq!(relu(&x).to_vec(), vec![0.0, 3.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = t(vec![1], vec![0.0]);
        assert_eq!(sigmoid(&x).item(), 0.5);
    }

    #[test]
    fn concat_channels() {
        let a = Tensor::<f32>::full(vec![2, 3, 4], 1.0);
        let b = Tensor::<f32>::full(vec![5, 3, 4], 2.0);
        let c = concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), vec![7, 3, 4]);
        assert_eq!(c.data()[2 * 12 - 1], 1.0);
        assert_eq!(c.data()[2 * 12], 2.0);
    }

    #[test]
    fn concat_shape_mismatch_errors() {
        let a = Tensor::<f32>::zeros(vec![2, 3, 4]);
        let b = Tensor::<f32>::zeros(vec![2, 3, 5]);
        assert!(concat(&[&a, &b], 0).is_err());
    }

    #[test]
    fn add_shape_mismatch_errors() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![3, 2]);
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn mul_same_tensor_backward() {
        // d(x*x)/dx = 2x even when both operands alias.
        let x = t(vec![3], vec![1.0, -2.0, 0.5]).requires_grad();
        let y = mul(&x, &x).unwrap();
        let loss = sum_all(&y);
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn linear_maps_rows() {
        // y = x @ w^T + b with w = [[1, 2], [3, 4]], b = [10, 20]
        let x = t(vec![1, 2], vec![1.0, 1.0]);
        let w = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![2], vec![10.0, 20.0]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.to_vec(), vec![13.0, 27.0]);
    }

    #[test]
    fn aggregate_corner_weighting() {
        let logits = t(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let w = vec![0.1, 0.2, 0.3, 0.4];
        let out = aggregate_corners(&logits, &w, 4).unwrap();
        assert!((out.item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_equal_logits_any_weights() {
        let logits = t(vec![4], vec![7.0; 4]);
        let w = vec![0.7, 0.1, 0.15, 0.05];
        assert!((aggregate_corners(&logits, &w, 4).unwrap().item() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn gather_then_scatter_roundtrip() {
        let latent = t(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).requires_grad();
        let rows = gather_cells(&latent, &[3, 0]).unwrap();
        assert_eq!(rows.to_vec(), vec![3.0, 7.0, 0.0, 4.0]);
        let loss = sum_all(&rows);
        loss.backward();
        let g = latent.grad().unwrap();
        assert_eq!(g, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_all_grad_is_uniform() {
        let x = t(vec![4], vec![1.0, 2.0, 3.0, 4.0]).requires_grad();
        let m = mean_all(&x);
        assert!((m.item() - 2.5).abs() < 1e-12);
        m.backward();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn global_pool_and_broadcast() {
        let x = t(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]);
        let pooled = global_avg_pool(&x).unwrap();
        assert_eq!(pooled.to_vec(), vec![3.0]);
        let wide = broadcast_hw(&pooled, 2, 2).unwrap();
        assert_eq!(wide.to_vec(), vec![3.0; 4]);
    }
}
