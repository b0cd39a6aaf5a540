//! Independent brute-force reference implementations used only by tests.
//!
//! Nothing in here shares arithmetic helpers with the library: attention,
//! split/integration, contingency counting, SSIM and the PredRNN step are
//! all written as plain scalar loops so that an agreement between the two
//! paths actually means something. Inputs are expected to stay desk-scale
//! (frames up to ~16x16, token counts up to ~8); the finite-difference
//! engine re-evaluates its closure twice per coordinate.

#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3, Array4, Array5};

/// Central finite difference of a scalar function, one coordinate at a time.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let hi = f(&work);
        work[i] = orig - eps;
        let lo = f(&work);
        work[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    out
}

/// Relative error used by every gradient check.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Scaled dot-product attention evaluated with scalar loops.
/// `q`: [B,Lq,D], `k`: [B,Lk,D], `v`: [B,Lk,Dv], optional key mask [B,Lk].
pub fn oracle_attention(
    q: &Array3<f64>,
    k: &Array3<f64>,
    v: &Array3<f64>,
    mask: Option<&Array2<bool>>,
) -> Array3<f64> {
    let (b, lq, d) = q.dim();
    let (_, lk, dv) = v.dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array3::zeros((b, lq, dv));
    for bi in 0..b {
        for qi in 0..lq {
            let mut logits = vec![f64::NEG_INFINITY; lk];
            for ki in 0..lk {
                if mask.map(|m| m[[bi, ki]]).unwrap_or(true) {
                    let mut dot = 0.0;
                    for di in 0..d {
                        dot += q[[bi, qi, di]] * k[[bi, ki, di]];
                    }
                    logits[ki] = dot * scale;
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights = vec![0.0; lk];
            let mut sum = 0.0;
            for ki in 0..lk {
                if logits[ki].is_finite() {
                    weights[ki] = (logits[ki] - mx).exp();
                    sum += weights[ki];
                }
            }
            for w in weights.iter_mut() {
                *w /= sum;
            }
            for di in 0..dv {
                let mut acc = 0.0;
                for ki in 0..lk {
                    acc += weights[ki] * v[[bi, ki, di]];
                }
                out[[bi, qi, di]] = acc;
            }
        }
    }
    out
}

/// Eq.-style split as a quadruple loop.
pub fn oracle_split(p: &Array4<f64>, q: &Array4<f64>) -> Array5<f64> {
    let (b, c, h, w) = p.dim();
    let n = q.dim().1;
    let mut out = Array5::zeros((b, n, c, h, w));
    for bi in 0..b {
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out[[bi, ni, ci, hi, wi]] = p[[bi, ci, hi, wi]] * q[[bi, ni, hi, wi]];
                    }
                }
            }
        }
    }
    out
}

/// Region-weighted recombination as a quintuple loop.
pub fn oracle_integrate(p: &Array5<f64>, q: &Array4<f64>) -> Array4<f64> {
    let (b, n, c, h, w) = p.dim();
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        acc += p[[bi, ni, ci, hi, wi]] * q[[bi, ni, hi, wi]];
                    }
                    out[[bi, ci, hi, wi]] = acc;
                }
            }
        }
    }
    out
}

/// Per-pixel contingency counting at one dBZ threshold.
pub fn oracle_contingency(pred: &Array2<f64>, truth: &Array2<f64>, tau: f64) -> (u64, u64, u64, u64) {
    let (mut tp, mut fnn, mut fp, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let pe = p * 95.0 / 255.0 - 10.0 > tau;
        let te = t * 95.0 / 255.0 - 10.0 > tau;
        match (pe, te) {
            (true, true) => tp += 1,
            (false, true) => fnn += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fnn, fp, tn)
}

/// Reference SSIM: explicit 11x11 Gaussian-weighted windows at every valid
/// center, no separable-filter tricks.
pub fn oracle_ssim(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (h, w) = a.dim();
    let win = 11usize;
    let sigma = 1.5f64;
    let half = win / 2;
    assert!(h >= win && w >= win, "oracle_ssim needs frames >= 11x11");
    let mut kernel = vec![0.0; win * win];
    let mut ksum = 0.0;
    for i in 0..win {
        for j in 0..win {
            let di = i as f64 - half as f64;
            let dj = j as f64 - half as f64;
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            kernel[i * win + j] = v;
            ksum += v;
        }
    }
    for v in kernel.iter_mut() {
        *v /= ksum;
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ci in half..h - half {
        for cj in half..w - half {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let kf = kernel[i * win + j];
                    mx += kf * a[[ci + i - half, cj + j - half]];
                    my += kf * b[[ci + i - half, cj + j - half]];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let kf = kernel[i * win + j];
                    let da = a[[ci + i - half, cj + j - half]] - mx;
                    let db = b[[ci + i - half, cj + j - half]] - my;
                    vx += kf * da * da;
                    vy += kf * db * db;
                    cov += kf * da * db;
                }
            }
            let ssim = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += ssim;
            count += 1;
        }
    }
    total / count as f64
}

/// Direct convolution used by the PredRNN oracle (same padding).
fn conv_same(x: &Array3<f64>, w: &Array4<f64>, cin: usize, cout: usize) -> Array3<f64> {
    let (_, h, wd) = x.dim();
    let k = w.dim().2;
    let pad = (k - 1) / 2;
    let mut out = Array3::zeros((cout, h, wd));
    for co in 0..cout {
        for oh in 0..h {
            for ow in 0..wd {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for dy in 0..k {
                        for dx in 0..k {
                            let ih = oh as isize + dy as isize - pad as isize;
                            let iw = ow as isize + dx as isize - pad as isize;
                            if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                acc += x[[ci, ih as usize, iw as usize]]
                                    * w[[co, ci, dy, dx]];
                            }
                        }
                    }
                }
                out[[co, oh, ow]] = acc;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain spatiotemporal-LSTM weights for one step of the oracle cell,
/// all with the same layout the production cell uses.
pub struct PredRnnWeights {
    pub w_xi: Array4<f64>,
    pub w_hi: Array4<f64>,
    pub b_i: Array1<f64>,
    pub w_xg: Array4<f64>,
    pub w_hg: Array4<f64>,
    pub b_g: Array1<f64>,
    pub w_xf: Array4<f64>,
    pub w_hf: Array4<f64>,
    pub b_f: Array1<f64>,
    pub w_xi2: Array4<f64>,
    pub w_mi: Array4<f64>,
    pub b_i2: Array1<f64>,
    pub w_xg2: Array4<f64>,
    pub w_mg: Array4<f64>,
    pub b_g2: Array1<f64>,
    pub w_xf2: Array4<f64>,
    pub w_mf: Array4<f64>,
    pub b_f2: Array1<f64>,
    pub w_xo: Array4<f64>,
    pub w_ho: Array4<f64>,
    pub w_co: Array4<f64>,
    pub w_mo: Array4<f64>,
    pub b_o: Array1<f64>,
    pub w_fuse: Array4<f64>,
}

/// One spatiotemporal-LSTM step (dual temporal/spatial memory, fused 1x1
/// output), written directly from the standard cell equations with scalar
/// convolutions. Single sample: inputs are [C,H,W].
pub fn oracle_predrnn_step(
    x: &Array3<f64>,
    h_prev: &Array3<f64>,
    c_prev: &Array3<f64>,
    m_in: &Array3<f64>,
    w: &PredRnnWeights,
) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
    let cin = x.dim().0;
    let ch = h_prev.dim().0;
    let (_, h, wd) = h_prev.dim();
    let gate = |a: &Array3<f64>, wa: &Array4<f64>, b: &Array3<f64>, wb: &Array4<f64>, bias: &Array1<f64>| {
        let mut pre = conv_same(a, wa, cin, ch);
        let hb = conv_same(b, wb, ch, ch);
        for ci in 0..ch {
            for hi in 0..h {
                for wi in 0..wd {
                    pre[[ci, hi, wi]] += hb[[ci, hi, wi]] + bias[ci];
                }
            }
        }
        pre
    };
    let i = gate(x, &w.w_xi, h_prev, &w.w_hi, &w.b_i).mapv(sigmoid);
    let g = gate(x, &w.w_xg, h_prev, &w.w_hg, &w.b_g).mapv(f64::tanh);
    let f = gate(x, &w.w_xf, h_prev, &w.w_hf, &w.b_f).mapv(sigmoid);
    let c_out = &i * &g + &f * c_prev;
    let i2 = gate(x, &w.w_xi2, m_in, &w.w_mi, &w.b_i2).mapv(sigmoid);
    let g2 = gate(x, &w.w_xg2, m_in, &w.w_mg, &w.b_g2).mapv(f64::tanh);
    let f2 = gate(x, &w.w_xf2, m_in, &w.w_mf, &w.b_f2).mapv(sigmoid);
    let m_out = &i2 * &g2 + &f2 * m_in;
    let mut o_pre = conv_same(x, &w.w_xo, cin, ch);
    let o_h = conv_same(h_prev, &w.w_ho, ch, ch);
    let o_c = conv_same(&c_out, &w.w_co, ch, ch);
    let o_m = conv_same(&m_out, &w.w_mo, ch, ch);
    for ci in 0..ch {
        for hi in 0..h {
            for wi in 0..wd {
                o_pre[[ci, hi, wi]] +=
                    o_h[[ci, hi, wi]] + o_c[[ci, hi, wi]] + o_m[[ci, hi, wi]] + w.b_o[ci];
            }
        }
    }
    let o = o_pre.mapv(sigmoid);
    // 1x1 fusion over the concatenated memories.
    let mut cat = Array3::zeros((2 * ch, h, wd));
    for ci in 0..ch {
        for hi in 0..h {
            for wi in 0..wd {
                cat[[ci, hi, wi]] = c_out[[ci, hi, wi]];
                cat[[ch + ci, hi, wi]] = m_out[[ci, hi, wi]];
            }
        }
    }
    let fused = conv_same(&cat, &w.w_fuse, 2 * ch, ch).mapv(f64::tanh);
    let h_out = &o * &fused;
    (h_out, c_out, m_out)
}
