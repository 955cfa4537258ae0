//! Elementary differentiable operations.

use super::tensor::{log_softmax_slice, softmax_slice};
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `log(|x| + 1)`.
pub fn logc(x: f64) -> f64 {
    x.abs().ln_1p()
}

/// Derivative of [`logc`]; the subgradient at 0 is 0.
pub fn logc_grad(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() / (x.abs() + 1.0)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Applies `f` along rows of the last axis.
fn map_rows(x: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let cols = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.len());
    if cols > 0 {
        for row in x.data().chunks(cols) {
            out.extend(f(row));
        }
    }
    Tensor::from_vec(x.shape(), out)
}

impl Graph {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value = self.value(x).map(&f);
        self.custom(&[x], value, move |a| {
            let d = a.inputs[0]
                .data()
                .iter()
                .zip(a.output.data())
                .zip(a.grad.data())
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(a.grad.shape(), d))]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.custom(&[a, b], value, |a| vec![Some(a.grad.clone()), Some(a.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.custom(&[a, b], value, |a| vec![Some(a.grad.clone()), Some(a.grad.scale(-1.0))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.custom(&[a, b], value, |a| {
            vec![
                a.needs[0].then(|| a.grad.zip_map(a.inputs[1], |g, y| g * y)),
                a.needs[1].then(|| a.grad.zip_map(a.inputs[0], |g, x| g * x)),
            ]
        }))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        same_shape("mul_const", self.value(a), &c)?;
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        Ok(self.custom(&[a], value, move |a| vec![Some(a.grad.zip_map(&c, |g, y| g * y))]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.custom(&[a], value, move |a| vec![Some(a.grad.scale(s))])
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (mv, rv) = (self.value(m), self.value(row));
        if mv.ndim() != 2 || rv.shape() != [1, mv.shape()[1]] {
            return Err(Error::Dimension {
                op: "add_row",
                left: mv.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let n = mv.shape()[1];
        let mut value = mv.clone();
        for chunk in value.data_mut().chunks_mut(n) {
            for (v, r) in chunk.iter_mut().zip(rv.data()) {
                *v += r;
            }
        }
        Ok(self.custom(&[m, row], value, move |a| {
            let mut rg = vec![0.0; n];
            for chunk in a.grad.data().chunks(n) {
                for (r, g) in rg.iter_mut().zip(chunk) {
                    *r += g;
                }
            }
            vec![Some(a.grad.clone()), Some(Tensor::from_vec(&[1, n], rg))]
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.custom(&[a, b], value, |a| {
            let ga = a.needs[0].then(|| a.grad.matmul(&a.inputs[1].transpose()).expect("matmul grad"));
            let gb = a.needs[1].then(|| a.inputs[0].transpose().matmul(a.grad).expect("matmul grad"));
            vec![ga, gb]
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.custom(&[a], value, |a| vec![Some(a.grad.transpose())])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let original = self.value(a).shape().to_vec();
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.custom(&[a], value, move |a| {
            vec![Some(a.grad.clone().reshape(&original).expect("reshape grad"))]
        }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Log-compression `log(|x| + 1)`.
    pub fn logc(&mut self, x: Var) -> Var {
        self.unary(x, logc, |x, _| logc_grad(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = map_rows(self.value(x), softmax_slice);
        self.custom(&[x], value, |a| {
            let cols = *a.output.shape().last().unwrap_or(&1);
            let mut d = Vec::with_capacity(a.grad.len());
            for (y, g) in a.output.data().chunks(cols).zip(a.grad.data().chunks(cols)) {
                let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                d.extend(y.iter().zip(g).map(|(y, g)| y * (g - dot)));
            }
            vec![Some(Tensor::from_vec(a.output.shape(), d))]
        })
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let value = map_rows(self.value(x), log_softmax_slice);
        self.custom(&[x], value, |a| {
            let cols = *a.output.shape().last().unwrap_or(&1);
            let mut d = Vec::with_capacity(a.grad.len());
            for (y, g) in a.output.data().chunks(cols).zip(a.grad.data().chunks(cols)) {
                let total: f64 = g.iter().sum();
                d.extend(y.iter().zip(g).map(|(y, g)| g - y.exp() * total));
            }
            vec![Some(Tensor::from_vec(a.output.shape(), d))]
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let shape = self.value(x).shape().to_vec();
        self.custom(&[x], value, move |a| vec![Some(Tensor::full(&shape, a.grad.item()))])
    }

    /// `sum(x * w)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor) -> Result<Var> {
        same_shape("weighted_sum", self.value(x), &w)?;
        let value = Tensor::scalar(self.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum());
        Ok(self.custom(&[x], value, move |a| vec![Some(w.scale(a.grad.item()))]))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            if v.ndim() != 2 || v.shape()[0] != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let value = Tensor::from_vec(&[rows, total], data);
        Ok(self.custom(parts, value, move |a| {
            let mut out = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for &w in &widths {
                let mut d = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    d.extend_from_slice(&a.grad.row_slice(r)[offset..offset + w]);
                }
                out.push(Some(Tensor::from_vec(&[rows, w], d)));
                offset += w;
            }
            out
        }))
    }

    /// Columns `[lo, hi)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let (rows, cols) = self.value(x).dims2();
        assert!(lo <= hi && hi <= cols, "slice_cols {lo}..{hi} out of {cols}");
        let w = hi - lo;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&self.value(x).row_slice(r)[lo..hi]);
        }
        self.custom(&[x], Tensor::from_vec(&[rows, w], data), move |a| {
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                d[r * cols + lo..r * cols + hi].copy_from_slice(a.grad.row_slice(r));
            }
            vec![Some(Tensor::from_vec(&[rows, cols], d))]
        })
    }

    /// Row `i` of a 2-D tensor as a `[1, n]` tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let (rows, cols) = self.value(x).dims2();
        assert!(i < rows, "row {i} out of {rows}");
        let value = Tensor::row(self.value(x).row_slice(i).to_vec());
        self.custom(&[x], value, move |a| {
            let mut d = vec![0.0; rows * cols];
            d[i * cols..(i + 1) * cols].copy_from_slice(a.grad.data());
            vec![Some(Tensor::from_vec(&[rows, cols], d))]
        })
    }

    /// Stacks `[1, n]` rows into an `[m, n]` tensor.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let n = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            let v = self.value(*r);
            if v.len() != n {
                return Err(Error::Dimension {
                    op: "stack_rows",
                    left: self.value(rows[0]).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_vec(&[rows.len(), n], data);
        let shapes: Vec<Vec<usize>> = rows.iter().map(|r| self.value(*r).shape().to_vec()).collect();
        Ok(self.custom(rows, value, move |a| {
            shapes
                .iter()
                .enumerate()
                .map(|(i, s)| Some(Tensor::from_vec(s, a.grad.row_slice(i).to_vec())))
                .collect()
        }))
    }

    /// Negative log-likelihood `-sum_l logp[l, targets[l]]` over a `[L, V]`
    /// matrix of log-probabilities.
    pub fn nll(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(logp).dims2();
        if rows != targets.len() || targets.iter().any(|&t| t >= cols) {
            return Err(Error::Domain(format!(
                "nll: {} targets for {rows} rows of width {cols}",
                targets.len()
            )));
        }
        let v = self.value(logp);
        let total: f64 = targets.iter().enumerate().map(|(l, &t)| -v.at2(l, t)).sum();
        let targets = targets.to_vec();
        Ok(self.custom(&[logp], Tensor::scalar(total), move |a| {
            let mut d = vec![0.0; rows * cols];
            for (l, &t) in targets.iter().enumerate() {
                d[l * cols + t] = -a.grad.item();
            }
            vec![Some(Tensor::from_vec(&[rows, cols], d))]
        }))
    }
}
