//! Central finite-difference verification of tape gradients (float64 only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tol
    }
}

fn eval_scalar<G>(f: &G, tape: &mut Tape<f64>, vars: &[Var]) -> Result<Var>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let out = f(tape, vars)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::Usage(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok(out)
}

/// Compare reverse-mode gradients of `f` at `inputs` with central differences.
pub fn grad_check<G>(f: G, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = eval_scalar(&f, &mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_input: 0, worst_index: 0, coords_checked: 0 };
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.numel() => {
                let mut c = sample(&mut rng, input.numel(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.numel()).collect(),
        };
        for idx in coords {
            let probe = |delta: f64| -> Result<f64> {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        if j == which {
                            let mut d = x.to_vec();
                            d[idx] += delta;
                            t.constant(Tensor::new(x.shape().to_vec(), d).expect("same shape"))
                        } else {
                            t.constant(x.clone())
                        }
                    })
                    .collect();
                let o = eval_scalar(&f, &mut t, &vs)?;
                t.value(o).item()
            };
            let numeric = (probe(opts.eps)? - probe(-opts.eps)?) / (2.0 * opts.eps);
            let err = (analytic[idx] - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_input = which;
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let x = Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum_all(sq)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coords_checked, 2);
    }

    #[test]
    fn non_scalar_output_is_usage_error() {
        let x = Tensor::<f64>::ones(vec![3]);
        let err = grad_check(|t, v| Ok(t.scale(v[0], 2.0)), &[x], &GradCheckOptions::default());
        assert!(matches!(err, Err(TensorError::Usage(_))));
    }

    #[test]
    fn detects_wrong_gradient() {
        // straight-through claims d/dx = 1 where the forward is constant
        let x = Tensor::<f64>::from_f64(vec![2], &[0.3, 0.7]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.straight_through(Tensor::zeros(vec![2]), v[0])?;
                t.sum_all(y)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passes(1e-4));
    }
}
