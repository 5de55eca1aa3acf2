use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Maximum relative error between the reverse-mode gradient of a scalar map
/// and a central finite difference with step `h`, over every coordinate of
/// `x` (or only `coords`, when given).
///
/// `f` receives a fresh graph and the leaf holding `x`, and returns the
/// scalar output node.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g.grad(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(t);
        let out = f(&mut g, leaf)?;
        let v = g.value(out).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical("grad_check: non-finite evaluation".into()))
        }
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.01]);
        let err = grad_check(
            |g, x| {
                let s = g.square(x);
                Ok(g.sum(s))
            },
            &x,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_map() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad_check(
            |g, x| {
                let z = g.scale(x, 0.0);
                Ok(g.sum(z))
            },
            &x,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn non_finite_evaluation_errors() {
        let x = Tensor::from_vec(vec![0.0]);
        let r = grad_check(
            |g, x| {
                let l = g.log(x);
                Ok(g.sum(l))
            },
            &x,
            1e-5,
            None,
        );
        assert!(r.is_err());
    }
}
