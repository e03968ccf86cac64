use super::Mlp;
use crate::error::{Error, Result};

/// Fixed, non-uniform output weighting so that softmax heads (whose outputs
/// always sum to one) still produce a non-trivial scalar objective.
pub fn probe_weights(out_dim: usize) -> Vec<f64> {
    (0..out_dim).map(|k| 1.0 + 0.5 * k as f64 - 0.1 * (k * k) as f64).collect()
}

/// Compares reverse-mode parameter gradients of `<net(input), w>` against
/// central finite differences and returns
/// `max |analytic - numeric| / max(1, |numeric|)` over all parameters.
pub fn gradient_check(net: &Mlp, input: &[f64], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("finite-difference step must lie in (0, 1e-3], got {eps}")));
    }
    let w = probe_weights(net.out_dim());
    let (_, tape) = net.forward(input)?;
    let analytic = net.backward(&tape, &w)?.params.to_flat();

    let objective = |n: &Mlp| -> Result<f64> { Ok(n.predict(input)?.iter().zip(&w).map(|(a, b)| a * b).sum()) };
    let base = net.params_flat();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let mut flat = base.clone();
    for (i, a) in analytic.iter().enumerate() {
        flat[i] = base[i] + eps;
        probe.set_params_flat(&flat)?;
        let up = objective(&probe)?;
        flat[i] = base[i] - eps;
        probe.set_params_flat(&flat)?;
        let down = objective(&probe)?;
        flat[i] = base[i];
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
