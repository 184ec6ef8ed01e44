use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference gradient check.
///
/// `f` builds a scalar from the graph leaves it is handed and must be
/// deterministic in its inputs (reseed any RNG inside it). Returns the max
/// over all input entries of `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new().with_soft_surrogate(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let analytic: Vec<Vec<f64>> = if g.is_tracked(out) {
        g.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    } else {
        inputs.iter().map(|t| vec![0.0; t.len()]).collect()
    };

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new().with_soft_surrogate(true);
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let x0 = t.data()[j];
            xs[k].data_mut()[j] = x0 + eps;
            let fp = eval(&xs)?;
            xs[k].data_mut()[j] = x0 - eps;
            let fm = eval(&xs)?;
            xs[k].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (analytic[k][j] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
