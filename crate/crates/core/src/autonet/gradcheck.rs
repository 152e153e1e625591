use super::{Graph, NetError, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `build` maps a set of input tensors (placed on the graph as trainable
/// leaves, in order) to a scalar output. Every coordinate of every input is
/// perturbed by `±h`. Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheck, NetError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NetError>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NetError::InvalidStep(h));
    }
    let eval = |point: &[Tensor<f64>]| -> Result<f64, NetError> {
        let mut g = Graph::new();
        let vars = point
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(NetError::Shape("grad_check needs a scalar output".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut point = inputs.to_vec();
    let mut res = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for (t, grads) in analytic.iter().enumerate() {
        for i in 0..grads.len() {
            let x0 = point[t].data()[i];
            point[t].data_mut()[i] = x0 + h;
            let fp = eval(&point)?;
            point[t].data_mut()[i] = x0 - h;
            let fm = eval(&point)?;
            point[t].data_mut()[i] = x0;
            let num = (fp - fm) / (2.0 * h);
            if !num.is_finite() {
                return Err(NetError::NonFinite("grad_check"));
            }
            let a = grads[i];
            let abs = (a - num).abs();
            let rel = abs / a.abs().max(num.abs()).max(1e-8);
            res.max_rel_err = res.max_rel_err.max(rel);
            res.max_abs_err = res.max_abs_err.max(abs);
            res.checked += 1;
        }
    }
    Ok(res)
}
