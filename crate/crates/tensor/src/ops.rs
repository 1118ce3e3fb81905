//! Differentiable primitives: elementwise arithmetic, reductions, shape
//! manipulation, matrix products and row-wise normalisations.

use crate::error::{Result, TensorError};
use crate::gemm;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Lower clamp applied by [`Var::log`].
pub const LOG_CLAMP: f64 = 1e-12;
/// Norm floor used by [`Var::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix(op: &'static str, v: &Var) -> Result<(usize, usize)> {
    match v.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::invalid(op, s, "expected a matrix")),
    }
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("op output shape")
}

impl Var {
    fn unary(
        &self,
        data: Vec<f64>,
        backward: impl Fn(&[f64]) -> Vec<f64> + 'static,
    ) -> Var {
        self.tape()
            .record(with_shape(self.shape(), data), &[self], move |g, _| {
                vec![Some(backward(g))]
            })
            .expect("unary op on own tape")
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        self.tape().record(with_shape(self.shape(), data), &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        })
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        self.tape().record(with_shape(self.shape(), data), &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())]
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.value_rc(), other.value_rc());
        self.tape().record(with_shape(self.shape(), data), &[self, other], move |g, needs| {
            let ga = needs[0].then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
            let gb = needs[1].then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
            vec![ga, gb]
        })
    }

    pub fn scale(&self, c: f64) -> Var {
        let data = self.data().iter().map(|x| x * c).collect();
        self.unary(data, move |g| g.iter().map(|g| g * c).collect())
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let data = self.data().iter().map(|x| x + c).collect();
        self.unary(data, |g| g.to_vec())
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Var {
        let out: Vec<f64> = self.data().iter().map(|x| x.exp()).collect();
        let saved = out.clone();
        self.unary(out, move |g| g.iter().zip(&saved).map(|(g, y)| g * y).collect())
    }

    /// Natural log with inputs clamped below at [`LOG_CLAMP`]; the clamped
    /// region has zero gradient.
    pub fn log(&self) -> Var {
        let x = self.value_rc();
        let data = self.data().iter().map(|v| v.max(LOG_CLAMP).ln()).collect();
        self.unary(data, move |g| {
            g.iter()
                .zip(x.data())
                .map(|(g, x)| if *x > LOG_CLAMP { g / x } else { 0.0 })
                .collect()
        })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Var {
        let s = self.data().iter().sum();
        let n = self.value().len();
        self.tape()
            .record(Tensor::scalar(s), &[self], move |g, _| vec![Some(vec![g[0]; n])])
            .expect("sum on own tape")
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().clone().reshape(shape)?;
        self.tape().record(value, &[self], |g, _| vec![Some(g.to_vec())])
    }

    pub fn transpose(&self) -> Result<Var> {
        let (r, c) = matrix("transpose", self)?;
        let value = self.value().transpose()?;
        self.tape().record(value, &[self], move |g, _| {
            let mut out = vec![0.0; r * c];
            for j in 0..c {
                for i in 0..r {
                    out[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(out)]
        })
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var> {
        let (r, c) = matrix("slice_rows", self)?;
        if start > end || end > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: end,
                len: r,
            });
        }
        let data = self.data()[start * c..end * c].to_vec();
        let value = with_shape(&[end - start, c], data);
        self.tape().record(value, &[self], move |g, _| {
            let mut out = vec![0.0; r * c];
            out[start * c..end * c].copy_from_slice(g);
            vec![Some(out)]
        })
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var> {
        let (r, c) = matrix("slice_cols", self)?;
        if start > end || end > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                len: c,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data()[i * c + start..i * c + end]);
        }
        self.tape().record(with_shape(&[r, w], data), &[self], move |g, _| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                out[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            vec![Some(out)]
        })
    }

    /// Gathers matrix rows by index; the adjoint scatter-adds, so repeated
    /// indices accumulate.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var> {
        let (r, c) = matrix("gather_rows", self)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        let idx = indices.to_vec();
        self.tape()
            .record(with_shape(&[indices.len(), c], data), &[self], move |g, _| {
                let mut out = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, gv) in out[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *o += gv;
                    }
                }
                vec![Some(out)]
            })
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        let (m, n) = matrix("add_row", self)?;
        if bias.shape() != [n] {
            return Err(TensorError::shape("add_row", self.shape(), bias.shape()));
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bias.data()) {
                *x += b;
            }
        }
        self.tape().record(with_shape(&[m, n], data), &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| column_sums(g, m, n));
            vec![needs[0].then(|| g.to_vec()), gb]
        })
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (m, k) = matrix("matmul", self)?;
        let (k2, n) = matrix("matmul", other)?;
        if k != k2 {
            return Err(TensorError::shape("matmul", self.shape(), other.shape()));
        }
        let data = gemm::matmul(self.data(), false, other.data(), false, m, k, n);
        let (a, b) = (self.value_rc(), other.value_rc());
        self.tape().record(with_shape(&[m, n], data), &[self, other], move |g, needs| {
            // dA = G Bᵀ, dB = Aᵀ G
            let ga = needs[0].then(|| gemm::matmul(g, false, b.data(), true, m, n, k));
            let gb = needs[1].then(|| gemm::matmul(a.data(), true, g, false, k, m, n));
            vec![ga, gb]
        })
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_nt(&self, other: &Var) -> Result<Var> {
        let (m, k) = matrix("matmul_nt", self)?;
        let (n, k2) = matrix("matmul_nt", other)?;
        if k != k2 {
            return Err(TensorError::shape("matmul_nt", self.shape(), other.shape()));
        }
        let data = gemm::matmul(self.data(), false, other.data(), true, m, k, n);
        let (a, b) = (self.value_rc(), other.value_rc());
        self.tape().record(with_shape(&[m, n], data), &[self, other], move |g, needs| {
            // dA = G B, dB = Gᵀ A
            let ga = needs[0].then(|| gemm::matmul(g, false, b.data(), false, m, n, k));
            let gb = needs[1].then(|| gemm::matmul(g, true, a.data(), false, n, m, k));
            vec![ga, gb]
        })
    }

    /// Affine map `self · weight + bias`.
    pub fn linear(&self, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    /// Row-wise softmax of `self / temperature`, max-subtracted.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Var> {
        check_temperature("softmax_rows", temperature)?;
        let (m, n) = matrix("softmax_rows", self)?;
        let out = softmax_rows_raw(self.data(), m, n, temperature);
        let y = out.clone();
        self.tape().record(with_shape(&[m, n], out), &[self], move |g, _| {
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dx[i * n + j] = yr[j] * (gr[j] - dot) / temperature;
                }
            }
            vec![Some(dx)]
        })
    }

    /// Row-wise `log softmax(self / temperature)`.
    pub fn log_softmax_rows(&self, temperature: f64) -> Result<Var> {
        check_temperature("log_softmax_rows", temperature)?;
        let (m, n) = matrix("log_softmax_rows", self)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data()[i * n..(i + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
            let lse = mx + row.iter().map(|x| (x / temperature - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] / temperature - lse;
            }
        }
        let logp = out.clone();
        self.tape().record(with_shape(&[m, n], out), &[self], move |g, _| {
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let gr = &g[i * n..(i + 1) * n];
                let gsum: f64 = gr.iter().sum();
                for j in 0..n {
                    let p = logp[i * n + j].exp();
                    dx[i * n + j] = (gr[j] - p * gsum) / temperature;
                }
            }
            vec![Some(dx)]
        })
    }

    /// Divides each row by its Euclidean norm. Rows with norm below
    /// [`NORM_EPS`] map to zero (with zero gradient).
    pub fn l2_normalize_rows(&self) -> Result<Var> {
        let (m, n) = matrix("l2_normalize_rows", self)?;
        let mut out = vec![0.0; m * n];
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &self.data()[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[i] = norm;
            if norm >= NORM_EPS {
                for j in 0..n {
                    out[i * n + j] = row[j] / norm;
                }
            }
        }
        let y = out.clone();
        self.tape().record(with_shape(&[m, n], out), &[self], move |g, _| {
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                if norms[i] < NORM_EPS {
                    continue;
                }
                let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dx[i * n + j] = (gr[j] - yr[j] * dot) / norms[i];
                }
            }
            vec![Some(dx)]
        })
    }
}

fn check_temperature(op: &'static str, t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(TensorError::domain(op, format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

pub(crate) fn column_sums(g: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in g.chunks(n).take(m) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub(crate) fn softmax_rows_raw(x: &[f64], m: usize, n: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
        let mut z = 0.0;
        for j in 0..n {
            let e = (row[j] / temperature - mx).exp();
            out[i * n + j] = e;
            z += e;
        }
        for v in &mut out[i * n..(i + 1) * n] {
            *v /= z;
        }
    }
    out
}

/// Untracked row softmax over a plain tensor.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature("softmax_rows", temperature)?;
    let (m, n) = x.dims2()?;
    Tensor::new(vec![m, n], softmax_rows_raw(x.data(), m, n, temperature))
}
