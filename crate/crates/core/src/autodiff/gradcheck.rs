//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor: relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub abs_floor: f64,
    /// Check at most this many evenly strided entries per input.
    pub max_entries_per_input: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-4,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_entries_per_input: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::domain("gradcheck", "function output is not finite"));
    }
    Ok(v)
}

/// Compares the tape gradient of scalar `f` at `inputs` with central
/// differences, entry by entry, at 64-bit precision.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if let Some(bad) = inputs.iter().position(|t| !t.is_finite()) {
        return Err(Error::domain("gradcheck", format!("input {bad} is not finite")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck function must return a scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    if !tape.value(out).item()?.is_finite() {
        return Err(Error::domain("gradcheck", "function output is not finite"));
    }
    tape.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[ii].shape()));
        let n = inputs[ii].numel();
        let stride = match opts.max_entries_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut rep = InputReport {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        for idx in (0..n).step_by(stride) {
            let orig = inputs[ii].data()[idx];
            work[ii].data_mut()[idx] = orig + opts.eps;
            let fp = evaluate(&f, &work)?;
            work[ii].data_mut()[idx] = orig - opts.eps;
            let fm = evaluate(&f, &work)?;
            work[ii].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            rep.checked += 1;
            if rel > rep.max_rel_error || rep.checked == 1 {
                rep.max_rel_error = rel;
                rep.worst_index = idx;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
        reports.push(rep);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_rel_error < opts.tol,
        max_rel_error,
        tol: opts.tol,
        inputs: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sum_has_exact_gradient() {
        let x = rand_tensor(&[3, 4], 1);
        let rep = gradcheck(|t, v| t.sum(v[0]), &[x], &GradcheckOptions::default()).unwrap();
        assert!(rep.passed);
        assert!(rep.max_rel_error < 1e-9, "{}", rep.max_rel_error);
    }

    #[test]
    fn softmax_matmul_chain_passes() {
        let a = rand_tensor(&[3, 4], 2);
        let b = rand_tensor(&[4, 5], 3);
        let w = rand_tensor(&[3, 5], 4);
        let rep = gradcheck(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let s = t.softmax_lastdim(m)?;
                let p = t.mul(s, v[2])?;
                t.sum(p)
            },
            &[a, b, w],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = rand_tensor(&[5], 5);
        let rep = gradcheck(
            |t, v| {
                let value = t.value(v[0]).map(|x| x * x);
                let sq = t.custom(
                    &[v[0]],
                    value,
                    Box::new(|g: &Tensor<f64>, ins: &[&Tensor<f64>]| {
                        let d = g.data().iter().zip(ins[0].data()).map(|(g, x)| -2.0 * x * g).collect();
                        vec![Tensor::new(ins[0].shape().to_vec(), d).unwrap()]
                    }),
                )?;
                t.sum(sq)
            },
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!rep.passed);
        assert!(rep.max_rel_error > 1.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = rand_tensor(&[2], 6);
        let err = gradcheck(|t, v| t.exp(v[0]), &[x], &GradcheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
