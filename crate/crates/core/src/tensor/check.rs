use super::{Graph, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Compare analytic gradients against central differences.
///
/// `f` builds a scalar loss from the store's parameters on a fresh graph.
/// Returns `max |analytic − numeric| / max(|analytic|, |numeric|, 1e−12)`
/// over every non-frozen entry. `f` must be deterministic; this is checked
/// by evaluating the base point twice.
pub fn finite_diff_check<Fun>(f: Fun, params: &ParamStore<f64>, eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!(
            "finite-difference step {eps} must be positive"
        )));
    }
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let l = f(&mut g, p)?;
        Ok(g.value(l).item())
    };
    let base_a = eval(params)?;
    let base_b = eval(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic ({base_a} vs {base_b})"
        )));
    }
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let analytic = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        if params.is_frozen(&name) {
            continue;
        }
        let base: Tensor<f64> = (**params.get(&name)?).clone();
        let zeros = Tensor::zeros(base.dims());
        let a = analytic.get(&name).unwrap_or(&zeros);
        for i in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[i] += eps;
            work.set(&name, plus)?;
            let fp = eval(&work)?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= eps;
            work.set(&name, minus)?;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let an = a.data()[i];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
        work.set(&name, base)?;
    }
    Ok(worst)
}
