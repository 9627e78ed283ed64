use super::{Tape, Tensor, Var};
use crate::error::{CpeError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|)` over all entries.
    pub max_rel_error: f64,
    /// `(param index, flat index)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar on the tape from the given parameter handles; it is
/// re-run once per perturbed entry, so it must be a pure function of the
/// parameter values.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(CpeError::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(CpeError::NotScalar(tape.value(out).shape().to_vec()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        t.item(o)
    };

    let mut work = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        let mut num = Tensor::zeros(p.shape());
        for j in 0..p.len() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let d = (plus - minus) / (2.0 * eps);
            num.data_mut()[j] = d;
            let a = analytic[pi].data()[j];
            let rel = (a - d).abs() / a.abs().max(1.0);
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(rel);
                worst = Some((pi, j));
            }
            checked += 1;
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::row(vec![1.0, 2.0]);
        let r = grad_check(&[x], 1e-5, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        })
        .unwrap();
        assert_eq!(r.analytic[0].data(), &[2.0, 4.0]);
        for (a, n) in r.analytic[0].data().iter().zip(r.numeric[0].data()) {
            assert!((a - n).abs() < 1e-8);
        }
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_grads() {
        let x = Tensor::row(vec![1.0, -3.0, 0.5]);
        let r = grad_check(&[x], 1e-5, |t, _| Ok(t.constant(Tensor::scalar(7.0)))).unwrap();
        assert!(r.analytic[0].data().iter().all(|&g| g == 0.0));
        assert!(r.numeric[0].data().iter().all(|&g| g == 0.0));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn single_weight_sigmoid() {
        // d/dw sigmoid(w·x) = x·s·(1 - s)
        let (w, x) = (0.7, 1.3);
        let r = grad_check(&[Tensor::scalar(w)], 1e-5, |t, v| {
            let s = t.scale(v[0], x)?;
            t.sigmoid(s)
        })
        .unwrap();
        let s = 1.0 / (1.0 + (-w * x).exp());
        let expected = x * s * (1.0 - s);
        assert!((r.analytic[0].data()[0] - expected).abs() < 1e-14);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::row(vec![1.0, 2.0]);
        let r = grad_check(&[x], 1e-5, |_, v| Ok(v[0]));
        assert!(matches!(r, Err(CpeError::NotScalar(_))));
    }
}
