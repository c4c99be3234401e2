//! Eager tensor operations.
//!
//! Every op allocates a fresh output; inputs are never mutated. The same
//! shape rules live in [`crate::tensor::shape`] so the validator can check a
//! graph without touching data.

use crate::error::{Error, Result};
use crate::tensor::shape;
use crate::tensor::{IndexExpr, TensorValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnKind {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RedKind {
    Sum,
    Mean,
    Argmax,
}

/// Read an operand broadcast onto an output of `out_len` elements. Under the
/// trailing-dimension rule a row-major operand tiles with period `len()`, so
/// the mapping is a plain modulus.
#[inline]
fn bcast_at(v: &TensorValue, flat: usize) -> f32 {
    v.data()[flat % v.len()]
}

pub fn binary(kind: BinKind, a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    let out_shape = shape::broadcast(a.shape(), b.shape())?;
    let out_len: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let (x, y) = (bcast_at(a, i), bcast_at(b, i));
        data.push(match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        });
    }
    Ok(TensorValue::new(out_shape, data)?
        .with_requires_grad(a.requires_grad() || b.requires_grad()))
}

pub fn add(a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    binary(BinKind::Add, a, b)
}

pub fn sub(a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    binary(BinKind::Sub, a, b)
}

pub fn mul(a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    binary(BinKind::Mul, a, b)
}

pub fn div(a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    binary(BinKind::Div, a, b)
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[inline]
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn unary(kind: UnKind, a: &TensorValue) -> TensorValue {
    let data: Vec<f32> = a
        .data()
        .iter()
        .map(|&x| match kind {
            UnKind::Gelu => gelu_scalar(x),
            UnKind::Relu => x.max(0.0),
        })
        .collect();
    TensorValue::new(a.shape().to_vec(), data)
        .expect("same shape")
        .with_requires_grad(a.requires_grad())
}

pub fn gelu(a: &TensorValue) -> TensorValue {
    unary(UnKind::Gelu, a)
}

pub fn relu(a: &TensorValue) -> TensorValue {
    unary(UnKind::Relu, a)
}

/// Matrix product over the last two axes; `b` must be a plain matrix and the
/// leading axes of `a` are preserved.
pub fn matmul(a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    let out_shape = shape::matmul(a.shape(), b.shape())?;
    let k = b.shape()[0];
    let n = b.shape()[1];
    let rows: usize = a.len() / k;
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![0.0f32; rows * n];
    for r in 0..rows {
        let arow = &ad[r * k..(r + 1) * k];
        let orow = &mut data[r * n..(r + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(TensorValue::new(out_shape, data)?
        .with_requires_grad(a.requires_grad() || b.requires_grad()))
}

/// Batched matmul with equal leading axes on both operands.
pub fn bmm(a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    let out_shape = shape::bmm(a.shape(), b.shape())?;
    let lead = a.rank() - 2;
    let batches: usize = a.shape()[..lead].iter().product();
    let m = a.shape()[lead];
    let k = a.shape()[lead + 1];
    let n = b.shape()[lead + 1];
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![0.0f32; batches * m * n];
    for p in 0..batches {
        let abase = p * m * k;
        let bbase = p * k * n;
        let obase = p * m * n;
        for r in 0..m {
            for kk in 0..k {
                let av = ad[abase + r * k + kk];
                let brow = &bd[bbase + kk * n..bbase + (kk + 1) * n];
                let orow = &mut data[obase + r * n..obase + (r + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(TensorValue::new(out_shape, data)?
        .with_requires_grad(a.requires_grad() || b.requires_grad()))
}

pub fn transpose(a: &TensorValue, perm: &[usize]) -> Result<TensorValue> {
    let out_shape = shape::transpose(a.shape(), perm)?;
    let in_strides = a.strides();
    let out_strides = crate::tensor::strides_of(&out_shape);
    let mut data = vec![0.0f32; a.len()];
    let rank = perm.len();
    let mut coord = vec![0usize; rank];
    for out_off in 0..a.len() {
        let mut src = 0usize;
        for (axis, &c) in coord.iter().enumerate() {
            src += c * in_strides[perm[axis]];
        }
        data[out_off] = a.data()[src];
        for axis in (0..rank).rev() {
            coord[axis] += 1;
            if coord[axis] < out_shape[axis] {
                break;
            }
            coord[axis] = 0;
        }
        let _ = out_strides;
    }
    Ok(TensorValue::new(out_shape, data)?.with_requires_grad(a.requires_grad()))
}

/// Iterate lanes along `axis`: calls `f(lane_base, stride, n)` per lane where
/// element `j` of the lane lives at `lane_base + j * stride`.
fn for_each_lane(shp: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let n = shp[axis];
    let inner: usize = shp[axis + 1..].iter().product();
    let outer: usize = shp[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * n * inner + i, inner, n);
        }
    }
}

/// Max-subtraction stabilized softmax along `axis`.
pub fn softmax(a: &TensorValue, axis: i64) -> Result<TensorValue> {
    let ax = shape::softmax(a.shape(), axis)?;
    let mut data = a.data().to_vec();
    for_each_lane(a.shape(), ax, |base, stride, n| {
        let mut max = f32::NEG_INFINITY;
        for j in 0..n {
            max = max.max(data[base + j * stride]);
        }
        let mut sum = 0.0f32;
        for j in 0..n {
            let e = (data[base + j * stride] - max).exp();
            data[base + j * stride] = e;
            sum += e;
        }
        for j in 0..n {
            data[base + j * stride] /= sum;
        }
    });
    Ok(TensorValue::new(a.shape().to_vec(), data)?.with_requires_grad(a.requires_grad()))
}

/// Normalize the last axis to zero mean and unit variance, then scale and
/// shift: `gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layer_norm(
    a: &TensorValue,
    gain: &TensorValue,
    bias: &TensorValue,
    eps: f32,
) -> Result<TensorValue> {
    shape::layer_norm(a.shape(), gain.shape(), bias.shape())?;
    let n = *a.shape().last().unwrap();
    let mut data = vec![0.0f32; a.len()];
    let (ad, gd, bd) = (a.data(), gain.data(), bias.data());
    for lane in 0..a.len() / n {
        let base = lane * n;
        let row = &ad[base..base + n];
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f32>() / n as f32;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            data[base + j] = gd[j] * (row[j] - mean) * rstd + bd[j];
        }
    }
    Ok(TensorValue::new(a.shape().to_vec(), data)?.with_requires_grad(
        a.requires_grad() || gain.requires_grad() || bias.requires_grad(),
    ))
}

/// Per-lane normalization statistics, saved for the backward pass.
pub(crate) fn layer_norm_stats(a: &TensorValue, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let n = *a.shape().last().unwrap();
    let lanes = a.len() / n;
    let mut means = Vec::with_capacity(lanes);
    let mut rstds = Vec::with_capacity(lanes);
    for lane in 0..lanes {
        let row = &a.data()[lane * n..(lane + 1) * n];
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f32>() / n as f32;
        means.push(mean);
        rstds.push(1.0 / (var + eps).sqrt());
    }
    (means, rstds)
}

/// Reduce one axis. `argmax` breaks ties toward the lowest index and yields
/// integer-valued floats.
pub fn reduce(kind: RedKind, a: &TensorValue, axis: i64) -> Result<TensorValue> {
    let (ax, out_shape) = shape::reduce(a.shape(), axis)?;
    let out_len: usize = out_shape.iter().product();
    let mut data = vec![0.0f32; out_len];
    let mut lane_idx = 0usize;
    for_each_lane(a.shape(), ax, |base, stride, n| {
        let v = match kind {
            RedKind::Sum => {
                let mut s = 0.0f32;
                for j in 0..n {
                    s += a.data()[base + j * stride];
                }
                s
            }
            RedKind::Mean => {
                let mut s = 0.0f32;
                for j in 0..n {
                    s += a.data()[base + j * stride];
                }
                s / n as f32
            }
            RedKind::Argmax => {
                let mut best = f32::NEG_INFINITY;
                let mut best_j = 0usize;
                for j in 0..n {
                    let x = a.data()[base + j * stride];
                    if x > best {
                        best = x;
                        best_j = j;
                    }
                }
                best_j as f32
            }
        };
        data[lane_idx] = v;
        lane_idx += 1;
    });
    // for_each_lane iterates (outer, inner) row-major which matches the
    // reduced shape's layout.
    Ok(TensorValue::new(out_shape, data)?.with_requires_grad(a.requires_grad()))
}

pub fn reduce_sum(a: &TensorValue, axis: i64) -> Result<TensorValue> {
    reduce(RedKind::Sum, a, axis)
}

pub fn reduce_mean(a: &TensorValue, axis: i64) -> Result<TensorValue> {
    reduce(RedKind::Mean, a, axis)
}

pub fn argmax(a: &TensorValue, axis: i64) -> Result<TensorValue> {
    reduce(RedKind::Argmax, a, axis)
}

/// Copy the selected region out as a fresh tensor.
pub fn index_get(a: &TensorValue, index: &IndexExpr) -> Result<TensorValue> {
    let plan = index.plan(a.shape())?;
    let region_shape = plan.region_shape();
    let mut data = vec![0.0f32; plan.region_len()];
    let strides = a.strides();
    plan.for_each(&strides, |src, dst| data[dst] = a.data()[src]);
    Ok(TensorValue::new(region_shape, data)?.with_requires_grad(a.requires_grad()))
}

/// Return a copy of `a` with the selected region overwritten by `v`
/// (broadcast as needed). `a` itself is unchanged.
pub fn index_set(a: &TensorValue, index: &IndexExpr, v: &TensorValue) -> Result<TensorValue> {
    let plan = index.plan(a.shape())?;
    let region_shape = plan.region_shape();
    if !shape::broadcasts_to(v.shape(), &region_shape) {
        return Err(Error::shape(format!(
            "cannot broadcast value of shape {:?} onto selected region {:?}",
            v.shape(),
            region_shape
        )));
    }
    let mut data = a.data().to_vec();
    let strides = a.strides();
    plan.for_each(&strides, |dst, region_off| {
        data[dst] = bcast_at(v, region_off);
    });
    Ok(TensorValue::new(a.shape().to_vec(), data)?
        .with_requires_grad(a.requires_grad() || v.requires_grad()))
}

/// Row gather: `table` is `(vocab, d)`, `ids` holds integer-valued floats of
/// any shape; the result appends `d` to the id shape.
pub fn embedding(table: &TensorValue, ids: &TensorValue) -> Result<TensorValue> {
    if table.rank() != 2 {
        return Err(Error::shape(format!(
            "embedding table must be rank 2, got {:?}",
            table.shape()
        )));
    }
    let vocab = table.shape()[0];
    let d = table.shape()[1];
    let mut out_shape = ids.shape().to_vec();
    out_shape.push(d);
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids.data() {
        let i = id as usize;
        if id < 0.0 || id.fract() != 0.0 || i >= vocab {
            return Err(Error::Vocab(format!(
                "token id {id} out of range for vocab size {vocab}"
            )));
        }
        data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
    }
    Ok(TensorValue::new(out_shape, data)?.with_requires_grad(table.requires_grad()))
}

/// Sum a gradient back down to an operand shape that was broadcast up.
pub(crate) fn reduce_to_shape(grad: &TensorValue, target: &[usize]) -> TensorValue {
    if grad.shape() == target {
        return grad.clone();
    }
    let m: usize = target.iter().product();
    let mut data = vec![0.0f32; m];
    for (i, &g) in grad.data().iter().enumerate() {
        data[i % m] += g;
    }
    TensorValue::new(target.to_vec(), data).expect("reduced shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> TensorValue {
        TensorValue::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_is_componentwise() {
        let r = add(&t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let x = t(&[2, 2], &[1.5, -2.0, 0.0, 7.0]);
        let r = mul(&x, &TensorValue::ones(&[2, 2])).unwrap();
        assert!(r.bit_eq(&x));
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let r = gelu(&t(&[1], &[0.0]));
        assert_eq!(r.data(), &[0.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        assert!(add(&t(&[2], &[1.0, 2.0]), &t(&[3], &[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn matmul_identity_and_selector() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert!(matmul(&i2, &m).unwrap().bit_eq(&m));

        let sel = t(&[1, 2], &[1.0, 0.0]);
        let col = t(&[2, 1], &[5.0, 7.0]);
        let r = matmul(&sel, &col).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[5.0]);
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let r = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(r.data(), &[0.5, 0.5]);
        let big = softmax(&t(&[2], &[1000.0, 1000.0]), 0).unwrap();
        assert!(big.data().iter().all(|x| x.is_finite()));
        assert_eq!(big.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        assert!(softmax(&t(&[2], &[0.0, 0.0]), 1).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let x = t(&[4], &[3.0, 3.0, 3.0, 3.0]);
        let r = layer_norm(&x, &TensorValue::ones(&[4]), &TensorValue::zeros(&[4]), 1e-5).unwrap();
        assert!(r.data().iter().all(|v| v.abs() < 1e-6));

        let r2 = layer_norm(
            &x,
            &TensorValue::zeros(&[4]),
            &TensorValue::full(&[4], 2.5),
            1e-5,
        )
        .unwrap();
        assert!(r2.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let r = argmax(&t(&[3], &[0.1, 0.9, 0.9]), 0).unwrap();
        assert_eq!(r.shape(), &[] as &[usize]);
        assert_eq!(r.data(), &[1.0]);
    }

    #[test]
    fn sum_of_ones() {
        let r = reduce_sum(&TensorValue::ones(&[3]), 0).unwrap();
        assert_eq!(r.item().unwrap(), 3.0);
    }

    #[test]
    fn index_get_row() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = index_get(&m, &IndexExpr::new().int(1)).unwrap();
        assert_eq!(r.shape(), &[2]);
        assert_eq!(r.data(), &[3.0, 4.0]);
    }

    #[test]
    fn index_set_identity_overwrite() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = index_set(&m, &IndexExpr::new().all().all(), &m).unwrap();
        assert!(r.bit_eq(&m));
    }

    #[test]
    fn index_set_scalar_cell() {
        let r = index_set(
            &TensorValue::zeros(&[2, 2]),
            &IndexExpr::new().int(0).int(1),
            &TensorValue::scalar(5.0),
        )
        .unwrap();
        assert_eq!(r.data(), &[0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn index_set_rejects_bad_value_shape() {
        let base = TensorValue::zeros(&[2, 5, 16]);
        let ix = IndexExpr::new().all().all().list([3, 5, 8]);
        let bad = TensorValue::zeros(&[7]);
        assert!(index_set(&base, &ix, &bad).is_err());
        let ok = TensorValue::scalar(5.0);
        assert!(index_set(&base, &ix, &ok).is_ok());
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let ids = t(&[2], &[0.0, 2.0]);
        let e = embedding(&table, &ids).unwrap();
        assert_eq!(e.shape(), &[2, 2]);
        assert_eq!(e.data(), &[0.0, 1.0, 4.0, 5.0]);
        assert!(embedding(&table, &t(&[1], &[3.0])).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = transpose(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(transpose(&y, &[1, 0]).unwrap().bit_eq(&x));
    }
}
