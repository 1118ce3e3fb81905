//! Thin singular value decomposition by one-sided (Hestenes) Jacobi
//! rotations, plus the spectral derivative `∂σ_k/∂S = u_k v_kᵀ`.
//!
//! Factors are made deterministic: singular values are sorted descending
//! (stable on ties), and every column of `U` is flipped so that its
//! largest-magnitude entry (lowest index on ties) is positive, with the
//! matching column of `V` flipped alongside.

use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 80;
/// Singular values closer than this are treated as degenerate, and values
/// at or below it are treated as zero when differentiating.
pub const DEGENERACY_TOL: f64 = 1e-8;


/// `S = U · diag(sigma) · Vᵀ` with `U: m×r`, `V: n×r`, `r = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    svd_with_sweeps(a, MAX_SWEEPS)
}

pub fn svd_with_sweeps(a: &Tensor, max_sweeps: usize) -> Result<Svd> {
    let (m, n) = a.dims2()?;
    if !a.all_finite() {
        return Err(TensorError::domain("svd", "non-finite entries"));
    }
    if m >= n {
        let (u, sigma, v) = jacobi_tall(a.data(), m, n, max_sweeps)?;
        Ok(finish(u, sigma, v, m, n))
    } else {
        let at = a.transpose()?;
        let (u, sigma, v) = jacobi_tall(at.data(), n, m, max_sweeps)?;
        // Aᵀ = U' Σ V'ᵀ  =>  A = V' Σ U'ᵀ
        Ok(finish(v, sigma, u, m, n))
    }
}

type Columns = Vec<Vec<f64>>;

/// One-sided Jacobi on an `m × n` row-major matrix with `m >= n`.
/// Returns column-major `U` (m×n), singular values and `V` (n×n).
fn jacobi_tall(data: &[f64], m: usize, n: usize, max_sweeps: usize) -> Result<(Columns, Vec<f64>, Columns)> {
    let mut cols: Columns = (0..n).map(|j| (0..m).map(|i| data[i * n + j]).collect()).collect();
    let mut v: Columns = (0..n)
        .map(|j| {
            let mut c = vec![0.0; n];
            c[j] = 1.0;
            c
        })
        .collect();

    // Columns count as orthogonal below roundoff level for length `m`;
    // columns negligible next to the largest are left alone.
    let ortho_tol = (m as f64) * f64::EPSILON;
    let scale = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>()).fold(0.0, f64::max);
    let negligible = scale * f64::EPSILON * f64::EPSILON;
    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == max_sweeps {
            return Err(TensorError::NoConvergence { iterations: sweeps });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if alpha <= negligible || beta <= negligible || gamma.abs() <= ortho_tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    let sigma: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let floor = 1e-14 * smax;
    let mut u: Columns = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (j, c) in cols.into_iter().enumerate() {
        if sigma[j] > floor && sigma[j] > f64::MIN_POSITIVE {
            u.push(c.into_iter().map(|x| x / sigma[j]).collect());
        } else {
            u.push(vec![0.0; m]);
            missing.push(j);
        }
    }
    complete_basis(&mut u, &missing, m);
    Ok((u, sigma, v))
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to
/// every other column (Gram–Schmidt over the standard basis).
fn complete_basis(u: &mut Columns, missing: &[usize], m: usize) {
    let mut candidate = 0;
    for &j in missing {
        while candidate < m {
            let mut w = vec![0.0; m];
            w[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, col) in u.iter().enumerate() {
                    if k == j || col.iter().all(|x| *x == 0.0) {
                        continue;
                    }
                    let dot: f64 = col.iter().zip(&w).map(|(a, b)| a * b).sum();
                    for (wi, ci) in w.iter_mut().zip(col) {
                        *wi -= dot * ci;
                    }
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                u[j] = w.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Sorts, applies the sign convention and converts to row-major tensors.
fn finish(u: Columns, sigma: Vec<f64>, v: Columns, m: usize, n: usize) -> Svd {
    let r = m.min(n);
    debug_assert_eq!(u.len(), r);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).expect("finite sigma"));

    let mut ut = vec![0.0; m * r];
    let mut vt = vec![0.0; n * r];
    let mut s = vec![0.0; r];
    for (dst, &src) in order.iter().enumerate() {
        let (ucol, vcol) = (&u[src], &v[src]);
        let mut lead = 0;
        for i in 1..m {
            if ucol[i].abs() > ucol[lead].abs() {
                lead = i;
            }
        }
        let sign = if ucol[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            ut[i * r + dst] = sign * ucol[i];
        }
        for i in 0..n {
            vt[i * r + dst] = sign * vcol[i];
        }
        s[dst] = sigma[src];
    }
    Svd {
        u: Tensor::new(vec![m, r], ut).expect("u shape"),
        sigma: s,
        v: Tensor::new(vec![n, r], vt).expect("v shape"),
    }
}

impl Svd {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    /// `U · diag(sigma) · Vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = (self.u.shape()[0], self.sigma.len());
        let n = self.v.shape()[0];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += self.u.at(i, k) * self.sigma[k] * self.v.at(j, k);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out).expect("reconstruction shape")
    }

    /// Whether `sigma[k]` is within [`DEGENERACY_TOL`] of a neighbour.
    pub fn is_degenerate(&self, k: usize) -> bool {
        let s = &self.sigma;
        (k > 0 && (s[k - 1] - s[k]).abs() <= DEGENERACY_TOL)
            || (k + 1 < s.len() && (s[k] - s[k + 1]).abs() <= DEGENERACY_TOL)
    }

    /// `∂σ_k/∂S = u_k v_kᵀ` for the zero-based index `k`. A degenerate
    /// `σ_k` emits a warning and uses the deterministic factors.
    pub fn grad_sigma(&self, k: usize) -> Result<Tensor> {
        let r = self.sigma.len();
        if k >= r {
            return Err(TensorError::Index {
                op: "grad_sigma",
                index: k,
                len: r,
            });
        }
        if self.is_degenerate(k) {
            log::warn!("sigma[{k}] = {} is degenerate; derivative uses the deterministic factors", self.sigma[k]);
        }
        let (m, n) = (self.u.shape()[0], self.v.shape()[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ui = self.u.at(i, k);
            for j in 0..n {
                out[i * n + j] = ui * self.v.at(j, k);
            }
        }
        Tensor::new(vec![m, n], out)
    }
}

impl Var {
    /// Singular values of a matrix as a differentiable vector, plus the
    /// factorisation. The adjoint is `Σ_k g_k u_k v_kᵀ` over the values
    /// above [`DEGENERACY_TOL`]; zero singular values contribute nothing.
    pub fn singular_values(&self) -> Result<(Var, Svd)> {
        let dec = svd(self.value())?;
        if dec.sigma.len() > 1 && dec.is_degenerate(0) && dec.sigma[0] > DEGENERACY_TOL {
            log::warn!(
                "leading singular values are degenerate ({} vs {}); proceeding with deterministic factors",
                dec.sigma[0],
                dec.sigma[1]
            );
        }
        let saved = dec.clone();
        let (m, n) = (dec.u.shape()[0], dec.v.shape()[0]);
        let r = dec.sigma.len();
        let value = Tensor::vector(dec.sigma.clone());
        let var = self.tape().record(value, &[self], move |g, _| {
            let mut out = vec![0.0; m * n];
            for k in 0..r {
                if saved.sigma[k] <= DEGENERACY_TOL || g[k] == 0.0 {
                    continue;
                }
                for i in 0..m {
                    let gu = g[k] * saved.u.at(i, k);
                    for j in 0..n {
                        out[i * n + j] += gu * saved.v.at(j, k);
                    }
                }
            }
            vec![Some(out)]
        })?;
        Ok((var, dec))
    }
}
