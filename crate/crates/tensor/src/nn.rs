//! Transformer building blocks with fused backward passes.

use crate::error::{Result, TensorError};
use crate::gemm::{self, View, ViewMut};
use crate::ops::column_sums;
use crate::tape::Var;
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's `tanh` dominates GELU otherwise.
fn tanh_fast(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        // avoid cancellation in 1 - 2/(e+1) near zero
        return u - u * u * u / 3.0;
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn matrix(op: &'static str, v: &Var) -> Result<(usize, usize)> {
    match v.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::invalid(op, s, "expected a matrix")),
    }
}

impl Var {
    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Var {
        let x = self.value_rc();
        let t: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| tanh_fast(SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)))
            .collect();
        let data = self.data().iter().zip(&t).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let value = Tensor::new(self.shape().to_vec(), data).expect("gelu shape");
        self.tape()
            .record(value, &[self], move |g, _| {
                let dx = g
                    .iter()
                    .zip(x.data())
                    .zip(&t)
                    .map(|((g, &x), &t)| {
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                vec![Some(dx)]
            })
            .expect("gelu on own tape")
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length
    /// `cols` and biased variance.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (m, n) = matrix("layer_norm", self)?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(TensorError::shape("layer_norm", self.shape(), gamma.shape()));
        }
        let x = self.data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gamma.data()[j] + beta.data()[j];
            }
        }
        let g_rc = gamma.value_rc();
        let value = Tensor::new(vec![m, n], out)?;
        self.tape().record(value, &[self, gamma, beta], move |g, needs| {
            let gamma = g_rc.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; m * n];
                let mut dxh = vec![0.0; n];
                for i in 0..m {
                    let (gr, hr) = (&g[i * n..(i + 1) * n], &xhat[i * n..(i + 1) * n]);
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        dxh[j] = gr[j] * gamma[j];
                        mean_d += dxh[j];
                        mean_dh += dxh[j] * hr[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        dx[i * n + j] = inv_std[i] * (dxh[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                dx
            });
            let dgamma = needs[1].then(|| {
                let mut dg = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dg[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
                dg
            });
            let dbeta = needs[2].then(|| column_sums(g, m, n));
            vec![dx, dgamma, dbeta]
        })
    }

    /// Weighted mean over consecutive row segments: a `(groups·seq) × d`
    /// input becomes `groups × d`. With `weights` (one per row), rows of
    /// weight zero are excluded; a segment with no weight yields zeros.
    pub fn segment_mean(&self, groups: usize, weights: Option<&[f64]>) -> Result<Var> {
        let (rows, d) = matrix("segment_mean", self)?;
        if groups == 0 || rows % groups != 0 {
            return Err(TensorError::invalid(
                "segment_mean",
                self.shape(),
                format!("{rows} rows do not split into {groups} groups"),
            ));
        }
        let seq = rows / groups;
        let w: Vec<f64> = match weights {
            Some(w) if w.len() != rows => {
                return Err(TensorError::shape("segment_mean", self.shape(), &[w.len()]))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; rows],
        };
        let totals: Vec<f64> = w.chunks(seq).map(|c| c.iter().sum()).collect();
        let x = self.data();
        let mut out = vec![0.0; groups * d];
        for gidx in 0..groups {
            if totals[gidx] == 0.0 {
                continue;
            }
            let o = &mut out[gidx * d..(gidx + 1) * d];
            for l in 0..seq {
                let r = gidx * seq + l;
                if w[r] == 0.0 {
                    continue;
                }
                for (ov, xv) in o.iter_mut().zip(&x[r * d..(r + 1) * d]) {
                    *ov += w[r] * xv;
                }
            }
            for v in o.iter_mut() {
                *v /= totals[gidx];
            }
        }
        let value = Tensor::new(vec![groups, d], out)?;
        self.tape().record(value, &[self], move |g, _| {
            let mut dx = vec![0.0; rows * d];
            for r in 0..rows {
                let gidx = r / seq;
                if w[r] == 0.0 || totals[gidx] == 0.0 {
                    continue;
                }
                let f = w[r] / totals[gidx];
                for (dv, gv) in dx[r * d..(r + 1) * d].iter_mut().zip(&g[gidx * d..(gidx + 1) * d]) {
                    *dv = f * gv;
                }
            }
            vec![Some(dx)]
        })
    }
}

/// Multi-head scaled dot-product self-attention over `groups` independent
/// sequences of length `seq`.
///
/// `qkv` is `(groups·seq) × 3d` holding the query, key and value
/// projections side by side; the result is `(groups·seq) × d`. Keys whose
/// `key_mask` entry is `false` receive zero attention; a query with no
/// admissible key outputs zeros.
pub fn attention(
    qkv: &Var,
    groups: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let (rows, width) = matrix("attention", qkv)?;
    if groups == 0 || rows % groups != 0 || width % 3 != 0 {
        return Err(TensorError::invalid(
            "attention",
            qkv.shape(),
            format!("expected (groups*seq) x 3d with {groups} groups"),
        ));
    }
    let d = width / 3;
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::invalid(
            "attention",
            qkv.shape(),
            format!("{d} channels do not split into {heads} heads"),
        ));
    }
    if let Some(mask) = key_mask {
        if mask.len() != rows {
            return Err(TensorError::shape("attention", qkv.shape(), &[mask.len()]));
        }
    }
    let seq = rows / groups;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask: Option<Vec<bool>> = key_mask.map(<[bool]>::to_vec);
    let src = qkv.data();

    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; groups * heads * seq * seq];
    for gi in 0..groups {
        for h in 0..heads {
            let base = gi * seq * width;
            let q = View {
                data: &src[base + h * dh..],
                rows: seq,
                cols: dh,
                rs: width,
                cs: 1,
            };
            let k = View {
                data: &src[base + d + h * dh..],
                rows: seq,
                cols: dh,
                rs: width,
                cs: 1,
            };
            let v = View {
                data: &src[base + 2 * d + h * dh..],
                rows: seq,
                cols: dh,
                rs: width,
                cs: 1,
            };
            let p_off = (gi * heads + h) * seq * seq;
            let p = &mut probs[p_off..p_off + seq * seq];
            gemm::gemm(
                scale,
                q,
                k.t(),
                0.0,
                ViewMut {
                    data: p,
                    rs: seq,
                    cs: 1,
                },
            );
            let valid = mask.as_ref().map(|m| &m[gi * seq..(gi + 1) * seq]);
            for i in 0..seq {
                let row = &mut p[i * seq..(i + 1) * seq];
                masked_softmax_in_place(row, valid);
            }
            gemm::gemm(
                1.0,
                View::row_major(p, seq, seq),
                v,
                0.0,
                ViewMut {
                    data: &mut out[gi * seq * d + h * dh..],
                    rs: d,
                    cs: 1,
                },
            );
        }
    }

    let saved_qkv = qkv.value_rc();
    let value = Tensor::new(vec![rows, d], out)?;
    qkv.tape().record(value, &[qkv], move |g, _| {
        let src = saved_qkv.data();
        let mut dqkv = vec![0.0; rows * width];
        let mut dp = vec![0.0; seq * seq];
        for gi in 0..groups {
            for h in 0..heads {
                let base = gi * seq * width;
                let p_off = (gi * heads + h) * seq * seq;
                let p = &probs[p_off..p_off + seq * seq];
                let dout = View {
                    data: &g[gi * seq * d + h * dh..],
                    rows: seq,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                let q = View {
                    data: &src[base + h * dh..],
                    rows: seq,
                    cols: dh,
                    rs: width,
                    cs: 1,
                };
                let k = View {
                    data: &src[base + d + h * dh..],
                    rows: seq,
                    cols: dh,
                    rs: width,
                    cs: 1,
                };
                let v = View {
                    data: &src[base + 2 * d + h * dh..],
                    rows: seq,
                    cols: dh,
                    rs: width,
                    cs: 1,
                };
                // dV = Pᵀ dO
                gemm::gemm(
                    1.0,
                    View::row_major(p, seq, seq).t(),
                    dout,
                    0.0,
                    ViewMut {
                        data: &mut dqkv[base + 2 * d + h * dh..],
                        rs: width,
                        cs: 1,
                    },
                );
                // dP = dO Vᵀ, then through the softmax.
                gemm::gemm(
                    1.0,
                    dout,
                    v.t(),
                    0.0,
                    ViewMut {
                        data: &mut dp,
                        rs: seq,
                        cs: 1,
                    },
                );
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (dv, pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot);
                    }
                }
                // dQ = scale dS K, dK = scale dSᵀ Q
                gemm::gemm(
                    scale,
                    View::row_major(&dp, seq, seq),
                    k,
                    0.0,
                    ViewMut {
                        data: &mut dqkv[base + h * dh..],
                        rs: width,
                        cs: 1,
                    },
                );
                gemm::gemm(
                    scale,
                    View::row_major(&dp, seq, seq).t(),
                    q,
                    0.0,
                    ViewMut {
                        data: &mut dqkv[base + d + h * dh..],
                        rs: width,
                        cs: 1,
                    },
                );
            }
        }
        vec![Some(dqkv)]
    })
}

fn masked_softmax_in_place(row: &mut [f64], valid: Option<&[bool]>) {
    let ok = |j: usize| valid.map_or(true, |v| v[j]);
    let mx = row
        .iter()
        .enumerate()
        .filter(|(j, _)| ok(*j))
        .fold(f64::NEG_INFINITY, |a, (_, &b)| a.max(b));
    if mx == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut z = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - mx).exp();
            z += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
