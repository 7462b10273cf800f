//! Gaussian moments accounting for the subsampled Gaussian mechanism.
//!
//! Tracks Rényi divergence at a fixed grid of integer orders, composes
//! linearly across central iterations, converts to an (ε, δ) guarantee, and
//! calibrates the noise multiplier for a target budget. All sums are taken
//! in log space; orders whose values still overflow are dropped from the
//! conversion minimum with a warning instead of poisoning the result.

use thiserror::Error;

/// Integer Rényi orders tracked by the accountant: 2..=64 plus 128 and 256.
pub const RDP_ORDERS: [u32; 65] = {
    let mut a = [0u32; 65];
    let mut i = 0;
    while i < 63 {
        a[i] = (i + 2) as u32;
        i += 1;
    }
    a[63] = 128;
    a[64] = 256;
    a
};

#[derive(Debug, Error)]
pub enum DpError {
    #[error("invalid mechanism parameter: {0}")]
    InvalidParam(String),
    #[error("rdp overflow at order {order}")]
    Overflow { order: u32 },
    #[error("budget infeasible: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, DpError>;

/// Subsampled Gaussian mechanism parameters.
///
/// `sigma` is the noise multiplier: the aggregate noise has standard
/// deviation `sigma * clipping_bound` per coordinate. `q` is the fraction of
/// eligible devices sampled per central iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MechanismSpec {
    pub sigma: f64,
    pub q: f64,
    pub iterations: u64,
}

/// Per-step Rényi-DP values over the fixed order grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RdpCurve {
    values: [f64; RDP_ORDERS.len()],
}

impl RdpCurve {
    pub fn zero() -> Self {
        Self {
            values: [0.0; RDP_ORDERS.len()],
        }
    }

    pub fn from_values(values: [f64; RDP_ORDERS.len()]) -> Self {
        Self { values }
    }

    pub fn orders(&self) -> &'static [u32] {
        &RDP_ORDERS
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at(&self, order: u32) -> Option<f64> {
        RDP_ORDERS
            .iter()
            .position(|&a| a == order)
            .map(|i| self.values[i])
    }

    pub fn elementwise_sum(&self, other: &RdpCurve) -> RdpCurve {
        let mut values = self.values;
        for (v, o) in values.iter_mut().zip(other.values) {
            *v += o;
        }
        RdpCurve { values }
    }
}

/// Privacy budget; defaults are ε = 2.0, δ = 1e-6.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta_dp: f64,
}

impl Default for PrivacyBudget {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            delta_dp: 1e-6,
        }
    }
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta_dp: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(DpError::InvalidParam(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if !(delta_dp > 0.0 && delta_dp < 1.0) {
            return Err(DpError::InvalidParam(format!(
                "delta must lie in (0,1), got {delta_dp}"
            )));
        }
        Ok(Self { epsilon, delta_dp })
    }
}

/// Per-step RDP of the subsampled Gaussian mechanism at integer order `alpha`:
///
/// ε_α = 1/(α−1) · ln( Σ_{k=0..α} C(α,k) (1−q)^{α−k} q^k e^{k(k−1)/(2σ²)} )
///
/// evaluated via log-sum-exp.
pub fn rdp_step(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(DpError::InvalidParam(format!(
            "sampling ratio q must lie in (0,1], got {q}"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(DpError::InvalidParam(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    if alpha < 2 {
        return Err(DpError::InvalidParam(format!(
            "order must be an integer >= 2, got {alpha}"
        )));
    }
    let a = alpha as usize;
    // ln k! for k = 0..=alpha
    let mut ln_fact = vec![0.0f64; a + 1];
    for k in 1..=a {
        ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
    }
    let ln_q = q.ln();
    let ln_1mq = if q < 1.0 { (-q).ln_1p() } else { f64::NEG_INFINITY };
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);

    let mut terms = Vec::with_capacity(a + 1);
    for k in 0..=a {
        if q >= 1.0 && k < a {
            continue; // (1−q)^{α−k} = 0
        }
        let ln_binom = ln_fact[a] - ln_fact[k] - ln_fact[a - k];
        let tail = if k == a { 0.0 } else { (a - k) as f64 * ln_1mq };
        let t = ln_binom + tail + k as f64 * ln_q + (k * k.saturating_sub(1)) as f64 * inv_2s2;
        terms.push(t);
    }
    let lse = log_sum_exp(&terms);
    let value = lse / (alpha - 1) as f64;
    if !value.is_finite() {
        return Err(DpError::Overflow { order: alpha });
    }
    Ok(value)
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|&t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Per-step curve over the full order grid.
pub fn rdp_curve(q: f64, sigma: f64) -> Result<RdpCurve> {
    let mut values = [0.0; RDP_ORDERS.len()];
    for (i, &alpha) in RDP_ORDERS.iter().enumerate() {
        values[i] = match rdp_step(q, sigma, alpha) {
            Ok(v) => v,
            Err(DpError::Overflow { order }) => {
                log::warn!("rdp order {order} overflowed; dropping from the accountant");
                f64::INFINITY
            }
            Err(e) => return Err(e),
        };
    }
    Ok(RdpCurve { values })
}

/// Linear composition over `iterations` steps.
pub fn compose(curve: &RdpCurve, iterations: u64) -> RdpCurve {
    let mut values = curve.values;
    for v in &mut values {
        *v *= iterations as f64;
    }
    RdpCurve { values }
}

/// Convert a composed curve to (ε, best order) at the given δ:
/// ε = min_α [ value(α) + ln(1/δ)/(α−1) ]. Non-finite orders are skipped.
pub fn to_epsilon(curve: &RdpCurve, delta_dp: f64) -> (f64, u32) {
    let ln_inv_delta = (1.0 / delta_dp).ln();
    let mut best = f64::INFINITY;
    let mut best_order = RDP_ORDERS[0];
    for (i, &alpha) in RDP_ORDERS.iter().enumerate() {
        let v = curve.values[i];
        if !v.is_finite() {
            log::warn!("skipping non-finite rdp value at order {alpha}");
            continue;
        }
        let eps = v + ln_inv_delta / (alpha - 1) as f64;
        if eps < best {
            best = eps;
            best_order = alpha;
        }
    }
    (best, best_order)
}

/// Result of a noise calibration.
#[derive(Clone, Copy, Debug)]
pub struct Calibration {
    pub sigma: f64,
    pub accounted_epsilon: f64,
    pub best_order: u32,
}

/// Accounted ε for T iterations of the subsampled Gaussian with multiplier σ.
pub fn accounted_epsilon(q: f64, sigma: f64, iterations: u64, delta_dp: f64) -> Result<(f64, u32)> {
    let curve = rdp_curve(q, sigma)?;
    Ok(to_epsilon(&compose(&curve, iterations), delta_dp))
}

const SIGMA_MAX: f64 = 1e6;
const SIGMA_REL_TOL: f64 = 1e-4;

/// Smallest noise multiplier (on a binary-search grid with relative
/// tolerance 1e-4) whose accounted ε over `iterations` steps stays within
/// the budget.
pub fn calibrate_sigma(budget: &PrivacyBudget, q: f64, iterations: u64) -> Result<Calibration> {
    if iterations == 0 {
        return Err(DpError::InvalidParam(
            "calibration requires at least one iteration".into(),
        ));
    }
    let feasible = |sigma: f64| -> Result<bool> {
        let (eps, _) = accounted_epsilon(q, sigma, iterations, budget.delta_dp)?;
        Ok(eps <= budget.epsilon)
    };
    if !feasible(SIGMA_MAX)? {
        return Err(DpError::Infeasible(format!(
            "epsilon {} at delta {} unreachable even with sigma {SIGMA_MAX}",
            budget.epsilon, budget.delta_dp
        )));
    }
    // bracket: shrink lo until infeasible, grow hi until feasible
    let mut lo = 1e-3;
    let mut hi = 1.0;
    while feasible(lo)? {
        hi = lo;
        lo /= 2.0;
        if lo < 1e-12 {
            // any sigma works; report the bracket floor
            let (eps, order) = accounted_epsilon(q, lo, iterations, budget.delta_dp)?;
            return Ok(Calibration {
                sigma: lo,
                accounted_epsilon: eps,
                best_order: order,
            });
        }
    }
    while !feasible(hi)? {
        hi *= 2.0;
        if hi > SIGMA_MAX {
            return Err(DpError::Infeasible(format!(
                "no sigma below {SIGMA_MAX} satisfies epsilon {}",
                budget.epsilon
            )));
        }
    }
    while (hi - lo) / hi > SIGMA_REL_TOL {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (eps, order) = accounted_epsilon(q, hi, iterations, budget.delta_dp)?;
    Ok(Calibration {
        sigma: hi,
        accounted_epsilon: eps,
        best_order: order,
    })
}

#[cfg(test)]
mod tests;
