//! im2col/GEMM convolution kernels and the batched matmul used by attention.

use crate::error::{RapError, Result};
use crate::tensor::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, Ix3, Ix4, IxDyn};

/// Output spatial size of a padded, strided convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn shape_err(msg: String) -> RapError {
    RapError::shape("conv2d", msg)
}

struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, Geom)> {
        if x.len() != 4 || w.len() != 4 {
            return Err(shape_err(format!(
                "expected NCHW input and OIHW kernel, got {x:?} and {w:?}"
            )));
        }
        let (b, cin, h, hw) = (x[0], x[1], x[2], x[3]);
        let (cout, wcin, kh, kw) = (w[0], w[1], w[2], w[3]);
        if cin != wcin {
            return Err(shape_err(format!(
                "input channels {cin} != kernel channels {wcin}"
            )));
        }
        if stride == 0 {
            return Err(shape_err("stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || hw + 2 * pad < kw {
            return Err(shape_err(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{hw} (pad {pad})"
            )));
        }
        let ho = conv_out_dim(h, kh, stride, pad);
        let wo = conv_out_dim(hw, kw, stride, pad);
        Ok((
            b,
            cout,
            Geom {
                cin,
                h,
                w: hw,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            },
        ))
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Valid output-column window [lo, hi) for one kernel x-offset.
    fn ow_window(&self, dx: usize) -> (usize, usize) {
        let lo = if self.pad > dx {
            (self.pad - dx).div_ceil(self.stride)
        } else {
            0
        };
        if self.w + self.pad <= dx {
            return (0, 0);
        }
        let hi = ((self.w - 1 + self.pad - dx) / self.stride + 1).min(self.wo);
        (lo, hi.max(lo))
    }
}

fn im2col<F: Scalar>(x: &[F], g: &Geom, cols: &mut [F]) {
    let plane = g.h * g.w;
    let opl = g.ho * g.wo;
    for c in 0..g.cin {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let (lo, hi) = g.ow_window(dx);
                if lo >= hi {
                    continue;
                }
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + dy) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src_base = c * plane + ih as usize * g.w;
                    let dst_base = row * opl + oh * g.wo;
                    if g.stride == 1 {
                        let iw0 = lo + dx - g.pad;
                        cols[dst_base + lo..dst_base + hi]
                            .copy_from_slice(&x[src_base + iw0..src_base + iw0 + hi - lo]);
                    } else {
                        for ow in lo..hi {
                            let iw = ow * g.stride + dx - g.pad;
                            cols[dst_base + ow] = x[src_base + iw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Scalar>(dcols: &[F], g: &Geom, dx: &mut [F]) {
    let plane = g.h * g.w;
    let opl = g.ho * g.wo;
    for c in 0..g.cin {
        for dy in 0..g.kh {
            for dxk in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dxk;
                let (lo, hi) = g.ow_window(dxk);
                if lo >= hi {
                    continue;
                }
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + dy) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst_base = c * plane + ih as usize * g.w;
                    let src_base = row * opl + oh * g.wo;
                    for ow in lo..hi {
                        let iw = ow * g.stride + dxk - g.pad;
                        dx[dst_base + iw] += dcols[src_base + ow];
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    bias: Option<&ArrayD<F>>,
    stride: usize,
    pad: usize,
) -> Result<ArrayD<F>> {
    let (bsz, cout, g) = Geom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err(format!(
                "bias shape {:?} != [{cout}]",
                b.shape()
            )));
        }
    }
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w2 = w
        .view()
        .into_shape_with_order((cout, g.col_rows()))
        .expect("kernel reshape");
    let mut out = ArrayD::<F>::zeros(IxDyn(&[bsz, cout, g.ho, g.wo]));
    let mut cols = Array2::<F>::zeros((g.col_rows(), g.ho * g.wo));
    let xs = x4.as_slice().unwrap();
    let plane_in = g.cin * g.h * g.w;
    let opl = g.ho * g.wo;
    for b in 0..bsz {
        im2col(
            &xs[b * plane_in..(b + 1) * plane_in],
            &g,
            cols.as_slice_mut().unwrap(),
        );
        let mut out_mat = out
            .index_axis_mut(ndarray::Axis(0), b)
            .into_shape_with_order((cout, opl))
            .expect("output reshape");
        general_mat_mul(F::one(), &w2, &cols, F::zero(), &mut out_mat);
        if let Some(bias) = bias {
            let bs = bias.as_slice().unwrap();
            for (co, mut row) in out_mat.rows_mut().into_iter().enumerate() {
                let bv = bs[co];
                row.mapv_inplace(|v| v + bv);
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    gout: &ArrayD<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<(Option<ArrayD<F>>, Option<ArrayD<F>>, Option<ArrayD<F>>)> {
    let (bsz, cout, g) = Geom::new(x.shape(), w.shape(), stride, pad)?;
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w2 = w
        .view()
        .into_shape_with_order((cout, g.col_rows()))
        .expect("kernel reshape");
    let xs = x4.as_slice().unwrap();
    let plane_in = g.cin * g.h * g.w;
    let opl = g.ho * g.wo;

    let db = if need_db {
        let mut db = Array1::<F>::zeros(cout);
        let gs = gout.as_slice().unwrap();
        for b in 0..bsz {
            for co in 0..cout {
                let base = (b * cout + co) * opl;
                let mut s = F::zero();
                for &v in &gs[base..base + opl] {
                    s += v;
                }
                db[co] += s;
            }
        }
        Some(db.into_dyn())
    } else {
        None
    };

    let mut dw2 = if need_dw {
        Some(Array2::<F>::zeros((cout, g.col_rows())))
    } else {
        None
    };
    let mut dx = if need_dx {
        Some(ArrayD::<F>::zeros(IxDyn(x.shape())))
    } else {
        None
    };
    let mut cols = Array2::<F>::zeros((g.col_rows(), opl));
    let mut dcols = Array2::<F>::zeros((g.col_rows(), opl));
    for b in 0..bsz {
        let g_mat = gout
            .index_axis(ndarray::Axis(0), b)
            .into_shape_with_order((cout, opl))
            .expect("grad reshape");
        if let Some(dw2) = dw2.as_mut() {
            im2col(
                &xs[b * plane_in..(b + 1) * plane_in],
                &g,
                cols.as_slice_mut().unwrap(),
            );
            general_mat_mul(F::one(), &g_mat, &cols.t(), F::one(), dw2);
        }
        if let Some(dx) = dx.as_mut() {
            general_mat_mul(F::one(), &w2.t(), &g_mat, F::zero(), &mut dcols);
            let dxs = dx.as_slice_mut().unwrap();
            col2im_add(
                dcols.as_slice().unwrap(),
                &g,
                &mut dxs[b * plane_in..(b + 1) * plane_in],
            );
        }
    }
    let dw = dw2.map(|d| {
        d.into_shape_with_order(IxDyn(w.shape()))
            .expect("dw reshape")
    });
    Ok((dx, dw, db))
}

/// Batched matrix product `[B,·,·]x[B,·,·]`, with optional per-operand
/// transposes applied before multiplying.
pub(crate) fn batmatmul<F: Scalar>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    trans_a: bool,
    trans_b: bool,
) -> Result<ArrayD<F>> {
    if a.ndim() != 3 || b.ndim() != 3 {
        return Err(RapError::shape(
            "matmul",
            format!("expected rank-3 operands, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
    let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
    let bsz = a3.shape()[0];
    if b3.shape()[0] != bsz {
        return Err(RapError::shape(
            "matmul",
            format!("batch {} != {}", bsz, b3.shape()[0]),
        ));
    }
    let (m, ka) = if trans_a {
        (a3.shape()[2], a3.shape()[1])
    } else {
        (a3.shape()[1], a3.shape()[2])
    };
    let (kb, n) = if trans_b {
        (b3.shape()[2], b3.shape()[1])
    } else {
        (b3.shape()[1], b3.shape()[2])
    };
    if ka != kb {
        return Err(RapError::shape(
            "matmul",
            format!("inner dims {ka} != {kb}"),
        ));
    }
    let mut out = ArrayD::<F>::zeros(IxDyn(&[bsz, m, n]));
    for bi in 0..bsz {
        let av = a3.index_axis(ndarray::Axis(0), bi);
        let bv = b3.index_axis(ndarray::Axis(0), bi);
        let av = if trans_a { av.reversed_axes() } else { av };
        let bv = if trans_b { bv.reversed_axes() } else { bv };
        let mut ov = out
            .index_axis_mut(ndarray::Axis(0), bi)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        general_mat_mul(F::one(), &av, &bv, F::zero(), &mut ov);
    }
    Ok(out)
}
