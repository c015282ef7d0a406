use super::{ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - c| / max(1e-8, |a| + |c|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}


/// Rounding floor of a central difference: a few ulps of the loss over
/// the step width. Disagreements below it cannot be resolved numerically
/// and are not counted.
pub fn difference_noise(up: f64, down: f64, eps: f64) -> f64 {
    64.0 * f64::EPSILON * up.abs().max(down.abs()) / (2.0 * eps)
}

fn scalar_of(tape: &Tape<'_, f64>, v: Var) -> Result<f64> {
    let x = tape.scalar(v);
    if !x.is_finite() {
        return Err(Error::Numeric { op: "grad_check forward".into() });
    }
    Ok(x)
}

/// Max relative error between reverse-mode gradients and central
/// differences, over every element of every input.
///
/// `f` records a scalar function of the leaves it is handed.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let run = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(t)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .wrt(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + eps;
            let up = run(&xs)?;
            xs[i].data_mut()[j] = orig - eps;
            let down = run(&xs)?;
            xs[i].data_mut()[j] = orig;
            worst = worst.max(rel_error(analytic[j], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Per-parameter result of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Finite-difference check of a loss over the trainable parameters of a
/// store. At most `per_tensor` elements of each parameter are probed
/// (all of them when the tensor is that small), chosen with `rng`.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    per_tensor: usize,
    rng: &mut Rng,
) -> Result<Vec<ParamCheck>>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &'a ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        scalar_of(&tape, out)
    };
    let analytic: Vec<(usize, Vec<f64>)> = {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        scalar_of(&tape, out)?;
        let grads = tape.backward(out)?;
        grads.params().map(|(id, g)| (id, g.to_vec())).collect()
    };
    let mut probe = store.clone();
    let mut report = Vec::new();
    for id in 0..store.len() {
        let p = store.by_id(id);
        if !p.trainable() {
            continue;
        }
        let n = p.tensor.numel();
        let zeros;
        let grad = match analytic.iter().find(|(i, _)| *i == id) {
            Some((_, g)) => g,
            None => {
                zeros = vec![0.0; n];
                &zeros
            }
        };
        let picks = if n <= per_tensor {
            (0..n).collect()
        } else {
            rng.sample_indices(n, per_tensor)
        };
        let mut worst = 0.0f64;
        for &j in &picks {
            let orig = p.tensor.data()[j];
            probe.by_id_mut(id).tensor.data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe.by_id_mut(id).tensor.data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe.by_id_mut(id).tensor.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if (grad[j] - numeric).abs() > difference_noise(up, down, eps) {
                worst = worst.max(rel_error(grad[j], numeric));
            }
        }
        report.push(ParamCheck {
            name: p.name.clone(),
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 3.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_map_is_essentially_exact() {
        let mut rng = Rng::new(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                t.sum(y)
            },
            &[a, b],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
