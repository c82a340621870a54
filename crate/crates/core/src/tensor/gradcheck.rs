//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DType, Tensor};
use crate::error::{contract_err, Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_coords_per_param: Some(24),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Worst relative error seen for each parameter, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub passed: bool,
    pub epsilon: f64,
    pub coords_checked: usize,
}

/// Denominator floor for [`relative_error`], per unit of objective
/// magnitude. Central differences carry rounding noise of some ulps of the
/// objective divided by `2 * epsilon`, so gradients that are exactly zero
/// (e.g. attention key biases, which cancel in the softmax) need a floor
/// above that noise.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// |a - f| / max(|a|, |f|, floor)
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Runs `f` once with backward to get analytic gradients for `params`,
/// then compares them with central differences.
///
/// `f` receives the parameter list to evaluate at and must rebuild its
/// graph from it; it is called `1 + 2 * coords` times.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    for p in params {
        if p.dtype() != DType::F64 {
            return contract_err("gradient checks require f64 parameters");
        }
        if !p.requires_grad() {
            return contract_err("gradient check parameter does not require grad");
        }
        p.zero_grad();
    }
    let loss = f(params)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    compare_gradients(f, params, &analytic, cfg)
}

/// Compares supplied analytic gradients with central differences of `f`.
pub fn compare_gradients<F>(
    f: F,
    params: &[Tensor],
    analytic: &[Vec<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if cfg.epsilon <= 0.0 {
        return contract_err("finite-difference epsilon must be positive");
    }
    if analytic.len() != params.len() {
        return contract_err("one analytic gradient per parameter required");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let v = f(ps)?.item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let floor = REL_ERROR_FLOOR * eval(params)?.abs().max(1.0);
    let mut per_param = Vec::with_capacity(params.len());
    let mut coords_checked = 0;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let mut shifted: Vec<Tensor> = params.iter().map(|t| t.detach()).collect();
            let mut plus = p.to_vec();
            plus[c] += cfg.epsilon;
            shifted[pi] = p.replaced(plus)?;
            let fp = eval(&shifted)?;
            let mut minus = p.to_vec();
            minus[c] -= cfg.epsilon;
            shifted[pi] = p.replaced(minus)?;
            let fm = eval(&shifted)?;
            let numeric = (fp - fm) / (2.0 * cfg.epsilon);
            worst = worst.max(relative_error(analytic[pi][c], numeric, floor));
            coords_checked += 1;
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        per_param,
        max_rel_error,
        passed: max_rel_error < cfg.tolerance,
        epsilon: cfg.epsilon,
        coords_checked,
    })
}
