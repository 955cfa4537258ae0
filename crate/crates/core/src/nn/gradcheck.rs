//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input or parameter label, flat coordinate)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            coords_checked: 0,
        }
    }

    fn record(&mut self, label: &str, coord: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coords_checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err.max(self.max_rel_error);
            self.worst = Some((label.to_string(), coord));
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Options for the parameter-space checker.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_coords_per_tensor: None,
        }
    }
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights so
/// that every output coordinate contributes to the checked gradient.
fn to_scalar(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let n = shape.iter().product();
    let w = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    g.weighted_sum(out, w)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let s = to_scalar(&mut g, out)?;
    Ok(g.value(s).item())
}

fn strided(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares the analytic gradient of `f` with respect to each input against
/// central differences `(f(x+e) - f(x-e)) / 2e`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let s = to_scalar(&mut g, out)?;
    let grads = g.backward(s)?;

    let mut report = GradCheckReport::empty();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + epsilon;
            let plus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig - epsilon;
            let minus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at input {i}, coordinate {j}"
                )));
            }
            report.record(&format!("input{i}"), j, a, numeric);
        }
    }
    Ok(report)
}

/// Like [`check_gradients`], but perturbs parameters of `store` instead of
/// free inputs. `names` selects the parameters to check (all when `None`).
pub fn check_param_gradients<F>(
    f: F,
    store: &ParamStore,
    names: Option<&[&str]>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        let s = to_scalar(&mut g, out)?;
        Ok(g.value(s).item())
    };
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let s = to_scalar(&mut g, out)?;
    let grads = g.backward(s)?;
    let mut analytic = ParamStore::new();
    for (name, value) in store.iter() {
        analytic.insert(name, Tensor::zeros(value.shape()))?;
    }
    grads.accumulate_into(&mut analytic)?;

    let selected: Vec<String> = match names {
        Some(n) => n.iter().map(|s| s.to_string()).collect(),
        None => store.names().map(String::from).collect(),
    };
    let mut report = GradCheckReport::empty();
    let mut work = store.clone();
    for name in &selected {
        let len = store.get(name)?.len();
        for j in strided(len, opts.max_coords_per_tensor) {
            let orig = store.get(name)?.data()[j];
            work.get_mut(name)?.data_mut()[j] = orig + opts.epsilon;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig - opts.epsilon;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic.grad(name)?.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{name}` at coordinate {j}"
                )));
            }
            report.record(name, j, a, numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let report = check_gradients(
            |g, x| {
                // Correct value, deliberately wrong backward.
                let v = g.value(x[0]).map(|a| a * a);
                Ok(g.custom(&[x[0]], v, |a| vec![Some(a.grad.clone())]))
            },
            &[Tensor::row(vec![0.5, 2.0])],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::from_vec(&[3, 2], vec![0.1, -0.4, 2.0, 0.3, -1.1, 0.7]);
        let report = check_gradients(
            |g, x| g.matmul(x[0], x[1]),
            &[Tensor::row(vec![0.3, -0.2, 1.5]), w],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn logc_at_half() {
        let report = check_gradients(|g, x| Ok(g.logc(x[0])), &[Tensor::scalar(0.5)], 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn non_finite_values_are_reported() {
        let err = check_gradients(
            |g, x| Ok(g.custom(&[x[0]], Tensor::scalar(f64::NAN), |_| vec![None])),
            &[Tensor::scalar(1.0)],
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
