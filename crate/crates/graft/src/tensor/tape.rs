//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Forward ops append entries in execution order; [`Tape::backward`] visits
//! them strictly in reverse, accumulating gradients per value id. A
//! non-recording tape runs the identical forward arithmetic but keeps no
//! entries, which is the cheap path when no gradients are requested.

use crate::error::{Error, Result};
use crate::tensor::ops::{self, BinKind, RedKind, UnKind};
use crate::tensor::{strides_of, IndexExpr, TensorValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(u32);

impl ValueId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Slot {
    Live(TensorValue),
    Freed,
}

#[derive(Debug)]
struct TapeEntry {
    op: TapeOp,
    output: ValueId,
}

#[derive(Debug)]
enum TapeOp {
    Bin {
        kind: BinKind,
        a: ValueId,
        b: ValueId,
    },
    Un {
        kind: UnKind,
        a: ValueId,
    },
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    Bmm {
        a: ValueId,
        b: ValueId,
    },
    Transpose {
        a: ValueId,
        perm: Vec<usize>,
    },
    Softmax {
        a: ValueId,
        axis: i64,
    },
    LayerNorm {
        a: ValueId,
        gain: ValueId,
        bias: ValueId,
        means: Vec<f32>,
        rstds: Vec<f32>,
    },
    IndexGet {
        a: ValueId,
        index: IndexExpr,
    },
    IndexSet {
        a: ValueId,
        v: ValueId,
        index: IndexExpr,
    },
    Reduce {
        kind: RedKind,
        a: ValueId,
        axis: i64,
    },
    Reshape {
        a: ValueId,
    },
    Embedding {
        table: ValueId,
        ids: ValueId,
    },
}

#[derive(Debug)]
pub struct Tape {
    values: Vec<Slot>,
    entries: Vec<TapeEntry>,
    recording: bool,
}

impl Tape {
    pub fn new(recording: bool) -> Self {
        Self {
            values: Vec::new(),
            entries: Vec::new(),
            recording,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Introduce a value with no producing operation (input, parameter,
    /// constant).
    pub fn leaf(&mut self, t: TensorValue) -> ValueId {
        self.push_value(t)
    }

    pub fn value(&self, id: ValueId) -> &TensorValue {
        match &self.values[id.index()] {
            Slot::Live(t) => t,
            Slot::Freed => panic!("value {} was released", id.0),
        }
    }

    /// Drop a value's buffer. Only legal on non-recording tapes, where no
    /// backward pass will need it again.
    pub fn release(&mut self, id: ValueId) {
        debug_assert!(!self.recording, "cannot release values on a recording tape");
        self.values[id.index()] = Slot::Freed;
    }

    fn push_value(&mut self, t: TensorValue) -> ValueId {
        let id = ValueId(self.values.len() as u32);
        self.values.push(Slot::Live(t));
        id
    }

    fn push(&mut self, op: TapeOp, out: TensorValue) -> ValueId {
        let output = self.push_value(out);
        if self.recording {
            self.entries.push(TapeEntry { op, output });
        }
        output
    }

    pub fn binary(&mut self, kind: BinKind, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::binary(kind, self.value(a), self.value(b))?;
        Ok(self.push(TapeOp::Bin { kind, a, b }, out))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnKind, a: ValueId) -> ValueId {
        let out = ops::unary(kind, self.value(a));
        self.push(TapeOp::Un { kind, a }, out)
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        self.unary(UnKind::Gelu, a)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        self.unary(UnKind::Relu, a)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(TapeOp::Matmul { a, b }, out))
    }

    pub fn bmm(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ops::bmm(self.value(a), self.value(b))?;
        Ok(self.push(TapeOp::Bmm { a, b }, out))
    }

    pub fn transpose(&mut self, a: ValueId, perm: &[usize]) -> Result<ValueId> {
        let out = ops::transpose(self.value(a), perm)?;
        Ok(self.push(
            TapeOp::Transpose {
                a,
                perm: perm.to_vec(),
            },
            out,
        ))
    }

    pub fn softmax(&mut self, a: ValueId, axis: i64) -> Result<ValueId> {
        let out = ops::softmax(self.value(a), axis)?;
        Ok(self.push(TapeOp::Softmax { a, axis }, out))
    }

    pub fn layer_norm(
        &mut self,
        a: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f32,
    ) -> Result<ValueId> {
        let out = ops::layer_norm(self.value(a), self.value(gain), self.value(bias), eps)?;
        let (means, rstds) = if self.recording {
            ops::layer_norm_stats(self.value(a), eps)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            TapeOp::LayerNorm {
                a,
                gain,
                bias,
                means,
                rstds,
            },
            out,
        ))
    }

    pub fn index_get(&mut self, a: ValueId, index: &IndexExpr) -> Result<ValueId> {
        let out = ops::index_get(self.value(a), index)?;
        Ok(self.push(
            TapeOp::IndexGet {
                a,
                index: index.clone(),
            },
            out,
        ))
    }

    pub fn index_set(&mut self, a: ValueId, index: &IndexExpr, v: ValueId) -> Result<ValueId> {
        let out = ops::index_set(self.value(a), index, self.value(v))?;
        Ok(self.push(
            TapeOp::IndexSet {
                a,
                v,
                index: index.clone(),
            },
            out,
        ))
    }

    pub fn reduce(&mut self, kind: RedKind, a: ValueId, axis: i64) -> Result<ValueId> {
        let out = ops::reduce(kind, self.value(a), axis)?;
        Ok(self.push(TapeOp::Reduce { kind, a, axis }, out))
    }

    pub fn sum(&mut self, a: ValueId, axis: i64) -> Result<ValueId> {
        self.reduce(RedKind::Sum, a, axis)
    }

    pub fn mean(&mut self, a: ValueId, axis: i64) -> Result<ValueId> {
        self.reduce(RedKind::Mean, a, axis)
    }

    pub fn argmax(&mut self, a: ValueId, axis: i64) -> Result<ValueId> {
        self.reduce(RedKind::Argmax, a, axis)
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(TapeOp::Reshape { a }, out))
    }

    pub fn embedding(&mut self, table: ValueId, ids: ValueId) -> Result<ValueId> {
        let out = ops::embedding(self.value(table), self.value(ids))?;
        Ok(self.push(TapeOp::Embedding { table, ids }, out))
    }

    /// Reverse sweep from a scalar loss. Returns a gradient per value id for
    /// everything backward-reachable from the loss; every `requires_grad`
    /// tensor reachable from the loss receives a gradient of its own shape.
    pub fn backward(&self, loss: ValueId) -> Result<GradMap> {
        if loss.index() >= self.values.len() {
            return Err(Error::graph(format!(
                "loss value {} is not on the tape",
                loss.0
            )));
        }
        let loss_t = self.value(loss);
        if loss_t.len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_t.shape()
            )));
        }
        let mut grads: Vec<Option<TensorValue>> = vec![None; self.values.len()];
        grads[loss.index()] = Some(TensorValue::ones(loss_t.shape()));

        for entry in self.entries.iter().rev() {
            let g = match &grads[entry.output.index()] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_entry(entry, &g, &mut grads)?;
        }
        Ok(GradMap { grads })
    }

    fn backprop_entry(
        &self,
        entry: &TapeEntry,
        g: &TensorValue,
        grads: &mut Vec<Option<TensorValue>>,
    ) -> Result<()> {
        match &entry.op {
            TapeOp::Bin { kind, a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                match kind {
                    BinKind::Add => {
                        accumulate(grads, *a, ops::reduce_to_shape(g, av.shape()))?;
                        accumulate(grads, *b, ops::reduce_to_shape(g, bv.shape()))?;
                    }
                    BinKind::Sub => {
                        accumulate(grads, *a, ops::reduce_to_shape(g, av.shape()))?;
                        let neg = scale(g, -1.0);
                        accumulate(grads, *b, ops::reduce_to_shape(&neg, bv.shape()))?;
                    }
                    BinKind::Mul => {
                        let da = broadcast_apply(g, bv, |gi, bi| gi * bi);
                        let db = broadcast_apply(g, av, |gi, ai| gi * ai);
                        accumulate(grads, *a, ops::reduce_to_shape(&da, av.shape()))?;
                        accumulate(grads, *b, ops::reduce_to_shape(&db, bv.shape()))?;
                    }
                    BinKind::Div => {
                        let da = broadcast_apply(g, bv, |gi, bi| gi / bi);
                        let out_len = g.len();
                        let mut db_full = vec![0.0f32; out_len];
                        for (i, db_i) in db_full.iter_mut().enumerate() {
                            let ai = av.data()[i % av.len()];
                            let bi = bv.data()[i % bv.len()];
                            *db_i = -g.data()[i] * ai / (bi * bi);
                        }
                        let db = TensorValue::new(g.shape().to_vec(), db_full)?;
                        accumulate(grads, *a, ops::reduce_to_shape(&da, av.shape()))?;
                        accumulate(grads, *b, ops::reduce_to_shape(&db, bv.shape()))?;
                    }
                }
            }
            TapeOp::Un { kind, a } => {
                let av = self.value(*a);
                let data: Vec<f32> = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &xi)| match kind {
                        UnKind::Gelu => gi * ops::gelu_grad_scalar(xi),
                        UnKind::Relu => {
                            if xi > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                accumulate(grads, *a, TensorValue::new(av.shape().to_vec(), data)?)?;
            }
            TapeOp::Matmul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let rows = av.len() / k;
                // da = g @ b^T, shaped like a
                let bt = ops::transpose(bv, &[1, 0])?;
                let g2 = g.reshape(&[rows, n])?;
                let da = ops::matmul(&g2, &bt)?.reshape(av.shape())?;
                accumulate(grads, *a, da)?;
                // db = a^T @ g, summed over leading rows
                let a2 = av.reshape(&[rows, k])?;
                let at = ops::transpose(&a2, &[1, 0])?;
                let db = ops::matmul(&at, &g2)?;
                accumulate(grads, *b, db)?;
            }
            TapeOp::Bmm { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let lead = av.rank() - 2;
                let perm: Vec<usize> = (0..lead).chain([lead + 1, lead]).collect();
                let bt = ops::transpose(bv, &perm)?;
                let da = ops::bmm(g, &bt)?;
                accumulate(grads, *a, da)?;
                let at = ops::transpose(av, &perm)?;
                let db = ops::bmm(&at, g)?;
                accumulate(grads, *b, db)?;
            }
            TapeOp::Transpose { a, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, *a, ops::transpose(g, &inv)?)?;
            }
            TapeOp::Softmax { a, axis } => {
                let y = self.value(entry.output);
                let ax = crate::tensor::shape::norm_axis(*axis, y.rank())?;
                let mut da = vec![0.0f32; y.len()];
                for_each_lane(y.shape(), ax, |base, stride, n| {
                    let mut dot = 0.0f32;
                    for j in 0..n {
                        let off = base + j * stride;
                        dot += g.data()[off] * y.data()[off];
                    }
                    for j in 0..n {
                        let off = base + j * stride;
                        da[off] = y.data()[off] * (g.data()[off] - dot);
                    }
                });
                accumulate(grads, *a, TensorValue::new(y.shape().to_vec(), da)?)?;
            }
            TapeOp::LayerNorm {
                a,
                gain,
                bias,
                means,
                rstds,
            } => {
                let av = self.value(*a);
                let gv = self.value(*gain);
                let n = *av.shape().last().unwrap();
                let lanes = av.len() / n;
                let mut da = vec![0.0f32; av.len()];
                let mut dgain = vec![0.0f32; n];
                let mut dbias = vec![0.0f32; n];
                for lane in 0..lanes {
                    let base = lane * n;
                    let (mean, rstd) = (means[lane], rstds[lane]);
                    let mut sum_gd = 0.0f32;
                    let mut sum_gd_xhat = 0.0f32;
                    for j in 0..n {
                        let xhat = (av.data()[base + j] - mean) * rstd;
                        let gj = g.data()[base + j];
                        let gd = gj * gv.data()[j];
                        sum_gd += gd;
                        sum_gd_xhat += gd * xhat;
                        dgain[j] += gj * xhat;
                        dbias[j] += gj;
                    }
                    let inv_n = 1.0 / n as f32;
                    for j in 0..n {
                        let xhat = (av.data()[base + j] - mean) * rstd;
                        let gd = g.data()[base + j] * gv.data()[j];
                        da[base + j] =
                            rstd * (gd - sum_gd * inv_n - xhat * sum_gd_xhat * inv_n);
                    }
                }
                accumulate(grads, *a, TensorValue::new(av.shape().to_vec(), da)?)?;
                accumulate(grads, *gain, TensorValue::new(vec![n], dgain)?)?;
                accumulate(grads, *bias, TensorValue::new(vec![n], dbias)?)?;
            }
            TapeOp::IndexGet { a, index } => {
                let av = self.value(*a);
                let plan = index.plan(av.shape())?;
                let mut da = vec![0.0f32; av.len()];
                plan.for_each(&strides_of(av.shape()), |src, region_off| {
                    da[src] += g.data()[region_off];
                });
                accumulate(grads, *a, TensorValue::new(av.shape().to_vec(), da)?)?;
            }
            TapeOp::IndexSet { a, v, index } => {
                let av = self.value(*a);
                let vv = self.value(*v);
                let plan = index.plan(av.shape())?;
                // Last write to each cell wins in the forward pass, so only
                // the final writer receives that cell's gradient.
                let mut final_writer: Vec<Option<u32>> = vec![None; av.len()];
                plan.for_each(&strides_of(av.shape()), |dst, region_off| {
                    final_writer[dst] = Some(region_off as u32);
                });
                let mut da = g.data().to_vec();
                let region_shape = plan.region_shape();
                let region_len: usize = region_shape.iter().product();
                let mut dregion = vec![0.0f32; region_len];
                for (cell, writer) in final_writer.iter().enumerate() {
                    if let Some(region_off) = writer {
                        dregion[*region_off as usize] += g.data()[cell];
                        da[cell] = 0.0;
                    }
                }
                let dregion_t = TensorValue::new(region_shape, dregion)?;
                accumulate(grads, *a, TensorValue::new(av.shape().to_vec(), da)?)?;
                accumulate(grads, *v, ops::reduce_to_shape(&dregion_t, vv.shape()))?;
            }
            TapeOp::Reduce { kind, a, axis } => {
                let av = self.value(*a);
                let ax = crate::tensor::shape::norm_axis(*axis, av.rank())?;
                match kind {
                    RedKind::Argmax => {} // not differentiable; contributes nothing
                    RedKind::Sum | RedKind::Mean => {
                        let n = av.shape()[ax];
                        let factor = match kind {
                            RedKind::Mean => 1.0 / n as f32,
                            _ => 1.0,
                        };
                        let mut da = vec![0.0f32; av.len()];
                        let mut lane_idx = 0usize;
                        for_each_lane(av.shape(), ax, |base, stride, n| {
                            let gl = g.data()[lane_idx] * factor;
                            for j in 0..n {
                                da[base + j * stride] = gl;
                            }
                            lane_idx += 1;
                        });
                        accumulate(grads, *a, TensorValue::new(av.shape().to_vec(), da)?)?;
                    }
                }
            }
            TapeOp::Reshape { a } => {
                let av = self.value(*a);
                accumulate(grads, *a, g.reshape(av.shape())?)?;
            }
            TapeOp::Embedding { table, ids } => {
                let tv = self.value(*table);
                let iv = self.value(*ids);
                let d = tv.shape()[1];
                let mut dt = vec![0.0f32; tv.len()];
                for (pos, &id) in iv.data().iter().enumerate() {
                    let row = id as usize;
                    for j in 0..d {
                        dt[row * d + j] += g.data()[pos * d + j];
                    }
                }
                accumulate(grads, *table, TensorValue::new(tv.shape().to_vec(), dt)?)?;
            }
        }
        Ok(())
    }
}

fn scale(t: &TensorValue, s: f32) -> TensorValue {
    TensorValue::new(t.shape().to_vec(), t.data().iter().map(|&x| x * s).collect())
        .expect("same shape")
}

/// Elementwise combine `g` (full output shape) with a possibly-broadcast
/// operand.
fn broadcast_apply(g: &TensorValue, v: &TensorValue, f: impl Fn(f32, f32) -> f32) -> TensorValue {
    let data: Vec<f32> = g
        .data()
        .iter()
        .enumerate()
        .map(|(i, &gi)| f(gi, v.data()[i % v.len()]))
        .collect();
    TensorValue::new(g.shape().to_vec(), data).expect("same shape")
}

fn accumulate(
    grads: &mut [Option<TensorValue>],
    id: ValueId,
    delta: TensorValue,
) -> Result<()> {
    let slot = &mut grads[id.index()];
    *slot = Some(match slot.take() {
        Some(old) => ops::add(&old, &delta)?,
        None => delta,
    });
    Ok(())
}

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

/// Gradients keyed by tape value id.
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<TensorValue>>,
}

impl GradMap {
    pub fn get(&self, id: ValueId) -> Option<&TensorValue> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new(true);
        let x = tape.leaf(
            TensorValue::new(vec![3], vec![1.0, 2.0, 3.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let loss = tape.sum(x, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new(true);
        let x = tape.leaf(
            TensorValue::new(vec![2], vec![1.0, 2.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new(true);
        let x = tape.leaf(TensorValue::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_rejects_unknown_id() {
        let mut tape = Tape::new(true);
        tape.leaf(TensorValue::scalar(1.0));
        assert!(tape.backward(ValueId(1000)).is_err());
    }

    #[test]
    fn non_recording_tape_keeps_values_but_no_entries() {
        let mut tape = Tape::new(false);
        let x = tape.leaf(TensorValue::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
        assert!(tape.entries.is_empty());
    }
}
