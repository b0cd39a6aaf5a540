//! Eager tape-based reverse-mode autodiff over dense n-d arrays.
//!
//! Every forward operation is evaluated immediately and recorded on a
//! [`Tape`]; [`Tape::backward`] replays the records in reverse to accumulate
//! gradients for every parameter leaf. Values are kept in standard (row-major)
//! layout so reshapes are cheap copies and the convolution/GEMM kernels can
//! work on contiguous slices.

mod conv;

pub use conv::conv_out_dim;

use crate::error::{RapError, Result};
use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, IxDyn, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, NumAssignOps};
use std::collections::HashMap;
use std::fmt::{Debug, Display};

/// Element type of a stored parameter array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(Dtype::F32),
            8 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point element type usable by the tape (f32 for training,
/// f64 for gradient verification).
pub trait Scalar:
    Float
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_le_bytes_vec(slice: &[Self]) -> Vec<u8>;
    fn from_le_bytes_vec(bytes: &[u8]) -> Vec<Self>;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(slice: &[Self]) -> Vec<u8> {
        let mut out = Vec::with_capacity(slice.len() * 4);
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
    fn from_le_bytes_vec(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(slice: &[Self]) -> Vec<u8> {
        let mut out = Vec::with_capacity(slice.len() * 8);
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
    fn from_le_bytes_vec(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op<F: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, F),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Abs(TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    },
    /// Batched matmul over the leading axis; operands are rank-3.
    BatMatMul {
        a: TensorId,
        b: TensorId,
        trans_a: bool,
        trans_b: bool,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    /// Softmax over the last axis of a rank-3 tensor with a per-batch key
    /// mask; masked keys get exactly zero weight. The mask is only needed at
    /// forward time (masked outputs are exactly zero, which the shared
    /// softmax backward already handles).
    MaskedSoftmax {
        x: TensorId,
    },
    Reshape(TensorId),
    Permute {
        x: TensorId,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<TensorId>,
        axis: usize,
    },
    Narrow {
        x: TensorId,
        axis: usize,
        start: usize,
    },
    SumAxis {
        x: TensorId,
        axis: usize,
    },
    MeanAll(TensorId),
    /// Per-sample normalization over all non-batch axes with per-channel
    /// (axis 1) scale and shift; (mean, rstd) are saved in `norm_aux`.
    SampleNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    /// Functional write of one slot along axis 1 of a buffer.
    WriteSlot {
        mem: TensorId,
        x: TensorId,
        slot: usize,
    },
    /// out[b,n,c,h,w] = p[b,c,h,w] * q[b,n,h,w]
    RegionSplit {
        p: TensorId,
        q: TensorId,
    },
    /// out[b,c,h,w] = sum_n p[b,n,c,h,w] * q[b,n,h,w]
    RegionIntegrate {
        p: TensorId,
        q: TensorId,
    },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
    /// Saved (mean, rstd) per sample for SampleNorm.
    norm_aux: Option<(Array1<F>, Array1<F>)>,
}

/// Gradients of a scalar loss with respect to grad-enabled leaves.
pub struct Gradients<F: Scalar> {
    map: HashMap<TensorId, ArrayD<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<F>> {
        self.map.get(&id)
    }

    pub fn take(&mut self, id: TensorId) -> Option<ArrayD<F>> {
        self.map.remove(&id)
    }
}

/// Records operations eagerly; replays them in reverse for gradients.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(context: &str, message: String) -> RapError {
    RapError::shape(context, message)
}

/// NumPy-style broadcast of two shapes (right-aligned).
fn broadcast_shape(a: &[usize], b: &[usize], context: &str) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(shape_err(
                context,
                format!("cannot broadcast {a:?} with {b:?}"),
            ));
        };
    }
    Ok(out)
}

/// Reduce a broadcast gradient back onto the original operand shape.
fn unbroadcast<F: Scalar>(mut g: ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn binary_forward<F: Scalar>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    context: &str,
    f: impl Fn(F, F) -> F,
) -> Result<ArrayD<F>> {
    let shape = broadcast_shape(a.shape(), b.shape(), context)?;
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            norm_aux: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn grad_of(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a constant input (no gradient tracked).
    pub fn leaf(&mut self, value: ArrayD<F>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Record a parameter leaf whose gradient is wanted.
    pub fn param(&mut self, value: ArrayD<F>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Errors if the value contains NaN or infinity.
    pub fn ensure_finite(&self, id: TensorId, context: &str) -> Result<()> {
        if self.nodes[id.0].value.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(RapError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = binary_forward(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = binary_forward(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = binary_forward(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> TensorId {
        let v = self.value(a).mapv(|x| x * c);
        let g = self.grad_of(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| {
            if x >= F::zero() {
                F::one() / (F::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (F::one() + e)
            }
        });
        let g = self.grad_of(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| x.tanh());
        let g = self.grad_of(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| x.abs());
        let g = self.grad_of(a);
        self.push(v, Op::Abs(a), g)
    }

    /// 2-d convolution over NCHW input with an OIHW kernel.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let v = conv::forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let g = self.grad_of(x)
            || self.grad_of(w)
            || bias.map(|b| self.grad_of(b)).unwrap_or(false);
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            g,
        ))
    }

    /// Batched matrix product of rank-3 tensors sharing the batch axis.
    pub fn matmul(
        &mut self,
        a: TensorId,
        b: TensorId,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<TensorId> {
        let v = conv::batmatmul(self.value(a), self.value(b), trans_a, trans_b)?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(
            v,
            Op::BatMatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            g,
        ))
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(shape_err(
                "softmax",
                format!("axis {axis} out of range for rank {}", xv.ndim()),
            ));
        }
        let mut out = xv.to_owned();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let mut mx = F::neg_infinity();
            for &v in lane.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = F::zero();
            for v in lane.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v = *v / sum;
            }
        }
        let g = self.grad_of(x);
        Ok(self.push(out, Op::Softmax { x, axis }, g))
    }

    /// Masked softmax over the last axis of `[B, Lq, Lk]`; `mask[b, k]` false
    /// removes key `k` from every query row of batch `b`.
    pub fn masked_softmax(&mut self, x: TensorId, mask: &Array2<bool>) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.ndim() != 3 {
            return Err(shape_err(
                "masked_softmax",
                format!("expected rank-3 scores, got {:?}", xv.shape()),
            ));
        }
        let (b, lq, lk) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if mask.shape() != [b, lk] {
            return Err(shape_err(
                "masked_softmax",
                format!("mask shape {:?} != [{b}, {lk}]", mask.shape()),
            ));
        }
        for bi in 0..b {
            if !mask.row(bi).iter().any(|&m| m) {
                return Err(RapError::InvalidMask(format!(
                    "every key masked out for batch {bi}"
                )));
            }
        }
        let mut out = xv.to_owned();
        {
            let mut o3 = out.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
            for bi in 0..b {
                let mrow = mask.row(bi);
                for qi in 0..lq {
                    let mut lane = o3.slice_mut(ndarray::s![bi, qi, ..]);
                    let mut mx = F::neg_infinity();
                    for (ki, &v) in lane.iter().enumerate() {
                        if mrow[ki] && v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = F::zero();
                    for (ki, v) in lane.iter_mut().enumerate() {
                        if mrow[ki] {
                            *v = (*v - mx).exp();
                            sum += *v;
                        } else {
                            *v = F::zero();
                        }
                    }
                    for v in lane.iter_mut() {
                        *v = *v / sum;
                    }
                }
            }
        }
        let g = self.grad_of(x);
        Ok(self.push(out, Op::MaskedSoftmax { x }, g))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if n != xv.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot reshape {:?} into {:?}", xv.shape(), shape),
            ));
        }
        let v = xv
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshape");
        let g = self.grad_of(x);
        Ok(self.push(v, Op::Reshape(x), g))
    }

    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let xv = self.value(x);
        if axes.len() != xv.ndim() {
            return Err(shape_err(
                "permute",
                format!("axes {:?} vs rank {}", axes, xv.ndim()),
            ));
        }
        let v = xv
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let g = self.grad_of(x);
        Ok(self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            g,
        ))
    }

    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let views: Vec<_> = xs.iter().map(|&id| self.value(id).view()).collect();
        let v = concatenate(Axis(axis), &views)
            .map_err(|e| shape_err("concat", e.to_string()))?;
        let g = xs.iter().any(|&id| self.grad_of(id));
        Ok(self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            g,
        ))
    }

    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let xv = self.value(x);
        if axis >= xv.ndim() || start + len > xv.shape()[axis] {
            return Err(shape_err(
                "narrow",
                format!(
                    "range {start}..{} out of bounds for axis {axis} of {:?}",
                    start + len,
                    xv.shape()
                ),
            ));
        }
        let v = xv
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let g = self.grad_of(x);
        Ok(self.push(v, Op::Narrow { x, axis, start }, g))
    }

    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(shape_err("sum_axis", format!("axis {axis} out of range")));
        }
        let v = xv.sum_axis(Axis(axis));
        let g = self.grad_of(x);
        Ok(self.push(v, Op::SumAxis { x, axis }, g))
    }

    /// Mean over every element, producing a `[1]`-shaped scalar.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let n = F::from_f64(xv.len() as f64);
        let mut sum = F::zero();
        for &v in xv.iter() {
            sum += v;
        }
        let v = ArrayD::from_elem(IxDyn(&[1]), sum / n);
        let g = self.grad_of(x);
        self.push(v, Op::MeanAll(x), g)
    }

    /// Normalize each sample over all non-batch axes, then apply per-channel
    /// affine parameters (`gamma`, `beta` of shape `[C]` on axis 1).
    pub fn sample_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: F,
    ) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(shape_err("sample_norm", "input must have rank >= 2".into()));
        }
        let b = xv.shape()[0];
        let c = xv.shape()[1];
        let feat: usize = xv.shape()[1..].iter().product();
        let spatial = feat / c;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(
                "sample_norm",
                format!("gamma/beta must be [{c}]"),
            ));
        }
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let mut out = xv.to_owned();
        let mut means = Array1::zeros(b);
        let mut rstds = Array1::zeros(b);
        {
            let flat = out.as_slice_mut().unwrap();
            let gs = gv.as_slice().unwrap();
            let bs = bv.as_slice().unwrap();
            let n = F::from_f64(feat as f64);
            for bi in 0..b {
                let row = &mut flat[bi * feat..(bi + 1) * feat];
                let mut mean = F::zero();
                for &v in row.iter() {
                    mean += v;
                }
                mean = mean / n;
                let mut var = F::zero();
                for &v in row.iter() {
                    let d = v - mean;
                    var += d * d;
                }
                var = var / n;
                let rstd = F::one() / (var + eps).sqrt();
                means[bi] = mean;
                rstds[bi] = rstd;
                for ci in 0..c {
                    let (g, beta_c) = (gs[ci], bs[ci]);
                    for v in row[ci * spatial..(ci + 1) * spatial].iter_mut() {
                        *v = (*v - mean) * rstd * g + beta_c;
                    }
                }
            }
        }
        let g = self.grad_of(x) || self.grad_of(gamma) || self.grad_of(beta);
        let id = self.push(out, Op::SampleNorm { x, gamma, beta }, g);
        self.nodes[id.0].norm_aux = Some((means, rstds));
        Ok(id)
    }

    /// Functional slot write: copy of `mem` with `x` stored at `slot` along
    /// axis 1.
    pub fn write_slot(&mut self, mem: TensorId, x: TensorId, slot: usize) -> Result<TensorId> {
        let mv = self.value(mem);
        let xv = self.value(x);
        if mv.ndim() < 2 || slot >= mv.shape()[1] {
            return Err(shape_err(
                "write_slot",
                format!("slot {slot} out of range for {:?}", mv.shape()),
            ));
        }
        let mut expect = mv.shape().to_vec();
        expect.remove(1);
        if xv.shape() != expect.as_slice() {
            return Err(shape_err(
                "write_slot",
                format!("frame shape {:?} != slot shape {:?}", xv.shape(), expect),
            ));
        }
        let mut v = mv.to_owned();
        v.index_axis_mut(Axis(1), slot).assign(xv);
        let g = self.grad_of(mem) || self.grad_of(x);
        Ok(self.push(v, Op::WriteSlot { mem, x, slot }, g))
    }

    /// Eq.-style split: one masked copy of the feature map per region.
    pub fn region_split(&mut self, p: TensorId, q: TensorId) -> Result<TensorId> {
        let pv = self.value(p);
        let qv = self.value(q);
        if pv.ndim() != 4 || qv.ndim() != 4 {
            return Err(shape_err("region_split", "expected rank-4 inputs".into()));
        }
        let (b, c, h, w) = dims4(pv.shape());
        let (qb, n, qh, qw) = dims4(qv.shape());
        if qb != b || qh != h || qw != w {
            return Err(shape_err(
                "region_split",
                format!("feature {:?} vs assignment {:?}", pv.shape(), qv.shape()),
            ));
        }
        let mut out = ArrayD::zeros(IxDyn(&[b, n, c, h, w]));
        {
            let os = out.as_slice_mut().unwrap();
            let ps = pv.as_slice().unwrap();
            let qs = qv.as_slice().unwrap();
            let hw = h * w;
            for bi in 0..b {
                for ni in 0..n {
                    let qrow = &qs[(bi * n + ni) * hw..(bi * n + ni + 1) * hw];
                    for ci in 0..c {
                        let prow = &ps[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        let orow = &mut os[((bi * n + ni) * c + ci) * hw
                            ..((bi * n + ni) * c + ci + 1) * hw];
                        for k in 0..hw {
                            orow[k] = prow[k] * qrow[k];
                        }
                    }
                }
            }
        }
        let g = self.grad_of(p) || self.grad_of(q);
        Ok(self.push(out, Op::RegionSplit { p, q }, g))
    }

    /// Region-weighted recombination of a region stack.
    pub fn region_integrate(&mut self, p: TensorId, q: TensorId) -> Result<TensorId> {
        let pv = self.value(p);
        let qv = self.value(q);
        if pv.ndim() != 5 || qv.ndim() != 4 {
            return Err(shape_err(
                "region_integrate",
                "expected rank-5 stack and rank-4 assignment".into(),
            ));
        }
        let (b, n, c, h, w) = (
            pv.shape()[0],
            pv.shape()[1],
            pv.shape()[2],
            pv.shape()[3],
            pv.shape()[4],
        );
        if qv.shape() != [b, n, h, w] {
            return Err(shape_err(
                "region_integrate",
                format!("stack {:?} vs assignment {:?}", pv.shape(), qv.shape()),
            ));
        }
        let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        {
            let os = out.as_slice_mut().unwrap();
            let ps = pv.as_slice().unwrap();
            let qs = qv.as_slice().unwrap();
            let hw = h * w;
            for bi in 0..b {
                for ni in 0..n {
                    let qrow = &qs[(bi * n + ni) * hw..(bi * n + ni + 1) * hw];
                    for ci in 0..c {
                        let prow = &ps[((bi * n + ni) * c + ci) * hw
                            ..((bi * n + ni) * c + ci + 1) * hw];
                        let orow = &mut os[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        for k in 0..hw {
                            orow[k] += prow[k] * qrow[k];
                        }
                    }
                }
            }
        }
        let g = self.grad_of(p) || self.grad_of(q);
        Ok(self.push(out, Op::RegionIntegrate { p, q }, g))
    }

    /// Reverse pass from a `[1]`-shaped loss. Intermediate values are freed
    /// as soon as they are no longer needed, so the tape cannot be extended
    /// afterwards.
    pub fn backward(mut self, loss: TensorId) -> Result<Gradients<F>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), F::one()));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let g = grads[i].take().unwrap();
            let contribs = self.backward_step(i, g)?;
            for (pid, pg) in contribs {
                match &mut grads[pid.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // The forward value is dead from here on.
            self.nodes[i].value = ArrayD::zeros(IxDyn(&[0]));
        }
        let mut map = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].needs_grad {
                    map.insert(TensorId(i), g);
                }
            }
        }
        Ok(Gradients { map })
    }

    fn backward_step(
        &self,
        i: usize,
        g: ArrayD<F>,
    ) -> Result<Vec<(TensorId, ArrayD<F>)>> {
        let node = &self.nodes[i];
        let mut out: Vec<(TensorId, ArrayD<F>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.grad_of(*a) {
                    out.push((*a, unbroadcast(g.clone(), self.shape(*a))));
                }
                if self.grad_of(*b) {
                    out.push((*b, unbroadcast(g, self.shape(*b))));
                }
            }
            Op::Sub(a, b) => {
                if self.grad_of(*a) {
                    out.push((*a, unbroadcast(g.clone(), self.shape(*a))));
                }
                if self.grad_of(*b) {
                    out.push((*b, unbroadcast(g.mapv(|v| -v), self.shape(*b))));
                }
            }
            Op::Mul(a, b) => {
                let shape = g.shape().to_vec();
                if self.grad_of(*a) {
                    let bv = self.value(*b).broadcast(IxDyn(&shape)).unwrap();
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&bv).for_each(|gv, &bvv| *gv = *gv * bvv);
                    out.push((*a, unbroadcast(ga, self.shape(*a))));
                }
                if self.grad_of(*b) {
                    let av = self.value(*a).broadcast(IxDyn(&shape)).unwrap();
                    let mut gb = g;
                    Zip::from(&mut gb).and(&av).for_each(|gv, &avv| *gv = *gv * avv);
                    out.push((*b, unbroadcast(gb, self.shape(*b))));
                }
            }
            Op::Scale(a, c) => {
                if self.grad_of(*a) {
                    let c = *c;
                    out.push((*a, g.mapv(|v| v * c)));
                }
            }
            Op::Sigmoid(a) => {
                if self.grad_of(*a) {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv = *gv * y * (F::one() - y));
                    out.push((*a, ga));
                }
            }
            Op::Tanh(a) => {
                if self.grad_of(*a) {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv = *gv * (F::one() - y * y));
                    out.push((*a, ga));
                }
            }
            Op::Abs(a) => {
                if self.grad_of(*a) {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        *gv = if x > F::zero() {
                            *gv
                        } else if x < F::zero() {
                            -*gv
                        } else {
                            F::zero()
                        }
                    });
                    out.push((*a, ga));
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv::backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    *stride,
                    *pad,
                    self.grad_of(*x),
                    self.grad_of(*w),
                    bias.map(|b| self.grad_of(b)).unwrap_or(false),
                )?;
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                if let (Some(bid), Some(db)) = (bias, db) {
                    out.push((*bid, db));
                }
            }
            Op::BatMatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                // out = A·B (with optional transposes baked into views)
                let (ta, tb) = (*trans_a, *trans_b);
                if self.grad_of(*a) {
                    // dA = g·Bᵀ, transposed back if A was transposed.
                    let da = if ta {
                        conv::batmatmul(self.value(*b), &g, tb, true)?
                    } else {
                        conv::batmatmul(&g, self.value(*b), false, !tb)?
                    };
                    out.push((*a, da));
                }
                if self.grad_of(*b) {
                    let db = if tb {
                        conv::batmatmul(&g, self.value(*a), true, ta)?
                    } else {
                        conv::batmatmul(self.value(*a), &g, !ta, false)?
                    };
                    out.push((*b, db));
                }
            }
            Op::Softmax { x, axis } => {
                if self.grad_of(*x) {
                    let mut dx = g;
                    let y = &node.value;
                    Zip::from(dx.lanes_mut(Axis(*axis)))
                        .and(y.lanes(Axis(*axis)))
                        .for_each(|mut dl, yl| {
                            let mut s = F::zero();
                            for (d, &yv) in dl.iter().zip(yl.iter()) {
                                s += *d * yv;
                            }
                            for (d, &yv) in dl.iter_mut().zip(yl.iter()) {
                                *d = yv * (*d - s);
                            }
                        });
                    out.push((*x, dx));
                }
            }
            Op::MaskedSoftmax { x, .. } => {
                if self.grad_of(*x) {
                    let mut dx = g;
                    let y = &node.value;
                    let last = y.ndim() - 1;
                    Zip::from(dx.lanes_mut(Axis(last)))
                        .and(y.lanes(Axis(last)))
                        .for_each(|mut dl, yl| {
                            let mut s = F::zero();
                            for (d, &yv) in dl.iter().zip(yl.iter()) {
                                s += *d * yv;
                            }
                            for (d, &yv) in dl.iter_mut().zip(yl.iter()) {
                                *d = yv * (*d - s);
                            }
                        });
                    out.push((*x, dx));
                }
            }
            Op::Reshape(x) => {
                if self.grad_of(*x) {
                    let shape = self.shape(*x).to_vec();
                    out.push((
                        *x,
                        g.into_shape_with_order(IxDyn(&shape))
                            .expect("reshape grad"),
                    ));
                }
            }
            Op::Permute { x, axes } => {
                if self.grad_of(*x) {
                    let mut inverse = vec![0usize; axes.len()];
                    for (to, &from) in axes.iter().enumerate() {
                        inverse[from] = to;
                    }
                    let dx = g
                        .view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned();
                    out.push((*x, dx));
                }
            }
            Op::Concat { xs, axis } => {
                let mut offset = 0usize;
                for &xid in xs {
                    let len = self.shape(xid)[*axis];
                    if self.grad_of(xid) {
                        let part = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                            .as_standard_layout()
                            .to_owned();
                        out.push((xid, part));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.grad_of(*x) {
                    let mut dx = ArrayD::zeros(IxDyn(self.shape(*x)));
                    let len = g.shape()[*axis];
                    dx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                        .assign(&g);
                    out.push((*x, dx));
                }
            }
            Op::SumAxis { x, axis } => {
                if self.grad_of(*x) {
                    let expanded = g.insert_axis(Axis(*axis));
                    let dx = expanded
                        .broadcast(IxDyn(self.shape(*x)))
                        .expect("sum_axis grad broadcast")
                        .to_owned();
                    out.push((*x, dx));
                }
            }
            Op::MeanAll(x) => {
                if self.grad_of(*x) {
                    let shape = self.shape(*x);
                    let n = F::from_f64(self.value(*x).len() as f64);
                    let gv = g[[0]] / n;
                    out.push((*x, ArrayD::from_elem(IxDyn(shape), gv)));
                }
            }
            Op::SampleNorm { x, gamma, beta, .. } => {
                let (means, rstds) = node.norm_aux.as_ref().expect("norm aux");
                let xv = self.value(*x);
                let b = xv.shape()[0];
                let c = xv.shape()[1];
                let feat: usize = xv.shape()[1..].iter().product();
                let spatial = feat / c;
                let gs = self.value(*gamma).as_slice().unwrap().to_vec();
                let xs = xv.as_slice().unwrap();
                let gout = g.as_slice().unwrap();
                let n = F::from_f64(feat as f64);
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut dx = vec![F::zero(); xv.len()];
                for bi in 0..b {
                    let mean = means[bi];
                    let rstd = rstds[bi];
                    let xrow = &xs[bi * feat..(bi + 1) * feat];
                    let grow = &gout[bi * feat..(bi + 1) * feat];
                    // dxhat, plus its two lane sums needed for dx.
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for ci in 0..c {
                        for k in ci * spatial..(ci + 1) * spatial {
                            let xhat = (xrow[k] - mean) * rstd;
                            let dxhat = grow[k] * gs[ci];
                            dgamma[ci] += grow[k] * xhat;
                            dbeta[ci] += grow[k];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                    }
                    let m_dxhat = sum_dxhat / n;
                    let m_dxhat_xhat = sum_dxhat_xhat / n;
                    let dxrow = &mut dx[bi * feat..(bi + 1) * feat];
                    for ci in 0..c {
                        for k in ci * spatial..(ci + 1) * spatial {
                            let xhat = (xrow[k] - mean) * rstd;
                            let dxhat = grow[k] * gs[ci];
                            dxrow[k] = rstd * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
                        }
                    }
                }
                if self.grad_of(*x) {
                    out.push((
                        *x,
                        ArrayD::from_shape_vec(IxDyn(xv.shape()), dx).unwrap(),
                    ));
                }
                if self.grad_of(*gamma) {
                    out.push((
                        *gamma,
                        ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                    ));
                }
                if self.grad_of(*beta) {
                    out.push((
                        *beta,
                        ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
                    ));
                }
            }
            Op::WriteSlot { mem, x, slot } => {
                if self.grad_of(*x) {
                    let dx = g
                        .index_axis(Axis(1), *slot)
                        .as_standard_layout()
                        .to_owned();
                    out.push((*x, dx));
                }
                if self.grad_of(*mem) {
                    let mut dmem = g;
                    dmem.index_axis_mut(Axis(1), *slot).fill(F::zero());
                    out.push((*mem, dmem));
                }
            }
            Op::RegionSplit { p, q } => {
                let pv = self.value(*p);
                let qv = self.value(*q);
                let (b, c, h, w) = dims4(pv.shape());
                let n = qv.shape()[1];
                let hw = h * w;
                let gsl = g.as_slice().unwrap();
                let ps = pv.as_slice().unwrap();
                let qs = qv.as_slice().unwrap();
                if self.grad_of(*p) {
                    let mut dp = vec![F::zero(); pv.len()];
                    for bi in 0..b {
                        for ni in 0..n {
                            let qrow = &qs[(bi * n + ni) * hw..(bi * n + ni + 1) * hw];
                            for ci in 0..c {
                                let grow = &gsl[((bi * n + ni) * c + ci) * hw
                                    ..((bi * n + ni) * c + ci + 1) * hw];
                                let drow = &mut dp[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                                for k in 0..hw {
                                    drow[k] += grow[k] * qrow[k];
                                }
                            }
                        }
                    }
                    out.push((
                        *p,
                        ArrayD::from_shape_vec(IxDyn(pv.shape()), dp).unwrap(),
                    ));
                }
                if self.grad_of(*q) {
                    let mut dq = vec![F::zero(); qv.len()];
                    for bi in 0..b {
                        for ni in 0..n {
                            let drow = &mut dq[(bi * n + ni) * hw..(bi * n + ni + 1) * hw];
                            for ci in 0..c {
                                let grow = &gsl[((bi * n + ni) * c + ci) * hw
                                    ..((bi * n + ni) * c + ci + 1) * hw];
                                let prow = &ps[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                                for k in 0..hw {
                                    drow[k] += grow[k] * prow[k];
                                }
                            }
                        }
                    }
                    out.push((
                        *q,
                        ArrayD::from_shape_vec(IxDyn(qv.shape()), dq).unwrap(),
                    ));
                }
            }
            Op::RegionIntegrate { p, q } => {
                let pv = self.value(*p);
                let qv = self.value(*q);
                let (b, n) = (pv.shape()[0], pv.shape()[1]);
                let (c, h, w) = (pv.shape()[2], pv.shape()[3], pv.shape()[4]);
                let hw = h * w;
                let gsl = g.as_slice().unwrap();
                let ps = pv.as_slice().unwrap();
                let qs = qv.as_slice().unwrap();
                if self.grad_of(*p) {
                    let mut dp = vec![F::zero(); pv.len()];
                    for bi in 0..b {
                        for ni in 0..n {
                            let qrow = &qs[(bi * n + ni) * hw..(bi * n + ni + 1) * hw];
                            for ci in 0..c {
                                let grow = &gsl[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                                let drow = &mut dp[((bi * n + ni) * c + ci) * hw
                                    ..((bi * n + ni) * c + ci + 1) * hw];
                                for k in 0..hw {
                                    drow[k] = grow[k] * qrow[k];
                                }
                            }
                        }
                    }
                    out.push((
                        *p,
                        ArrayD::from_shape_vec(IxDyn(pv.shape()), dp).unwrap(),
                    ));
                }
                if self.grad_of(*q) {
                    let mut dq = vec![F::zero(); qv.len()];
                    for bi in 0..b {
                        for ni in 0..n {
                            let drow = &mut dq[(bi * n + ni) * hw..(bi * n + ni + 1) * hw];
                            for ci in 0..c {
                                let grow = &gsl[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                                let prow = &ps[((bi * n + ni) * c + ci) * hw
                                    ..((bi * n + ni) * c + ci + 1) * hw];
                                for k in 0..hw {
                                    drow[k] += grow[k] * prow[k];
                                }
                            }
                        }
                    }
                    out.push((
                        *q,
                        ArrayD::from_shape_vec(IxDyn(qv.shape()), dq).unwrap(),
                    ));
                }
            }
        }
        Ok(out)
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn add_broadcasts_bias_over_channels() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3, 2, 2])));
        let b = tape.leaf(
            arr1(&[1.0, 2.0, 3.0])
                .into_dyn()
                .into_shape_with_order(IxDyn(&[1, 3, 1, 1]))
                .unwrap(),
        );
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 2, 2]);
        assert_eq!(tape.value(y)[[0, 2, 1, 1]], 3.0);
    }

    #[test]
    fn masked_softmax_rejects_fully_masked_batch() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 2, 3])));
        let mask = Array2::from_elem((1, 3), false);
        let err = tape.masked_softmax(x, &mask).unwrap_err();
        assert!(matches!(err, RapError::InvalidMask(_)));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(ArrayD::zeros(IxDyn(&[2, 2])));
        let y = tape.tanh(x);
        let _ = y;
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, RapError::Shape { .. }));
    }
}
