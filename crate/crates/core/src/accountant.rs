//! Rényi-DP accounting for the confident noisy-argmax aggregator.
//!
//! Every invocation of a Gaussian step of sensitivity `s` and noise `σ` costs
//! `α·s²/(2σ²)` at order `α`. Costs compose additively over the ledger and are
//! converted to `(ε, δ)` by minimising `rdp(α) + ln(1/δ)/(α−1)` over a grid of
//! orders augmented with the analytic minimiser.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default failure probability for `(ε, δ)` conversion.
pub const DEFAULT_DELTA: f64 = 1e-5;

/// Number of orders in [`default_orders`].
pub const DEFAULT_GRID_LEN: usize = 200;

/// Largest order in [`default_orders`].
pub const MAX_ORDER: f64 = 512.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountantError {
    #[error("noise scale must be positive and finite, got {0}")]
    NonPositiveSigma(f64),
    #[error("sensitivity must be positive and finite, got {0}")]
    NonPositiveSensitivity(f64),
    #[error("RDP order must be finite and > 1, got {0}")]
    OrderOutOfRange(f64),
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("order grid is empty")]
    EmptyOrderGrid,
    #[error("closed-form epsilon needs at least one query")]
    ZeroCount,
    #[error("ledger has {answered} answers but only {checks} threshold checks")]
    InconsistentLedger { answered: u64, checks: u64 },
}

pub type Result<T> = std::result::Result<T, AccountantError>;

/// A Rényi divergence order, strictly greater than one.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RdpOrder(f64);

impl RdpOrder {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha.is_finite() && alpha > 1.0 {
            Ok(Self(alpha))
        } else {
            Err(AccountantError::OrderOutOfRange(alpha))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for RdpOrder {
    type Error = AccountantError;

    fn try_from(alpha: f64) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<RdpOrder> for f64 {
    fn from(order: RdpOrder) -> f64 {
        order.0
    }
}

/// Additive Gaussian noise of standard deviation `sigma` on a query of the
/// given L2 sensitivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMechanism {
    sigma: f64,
    sensitivity: f64,
}

impl GaussianMechanism {
    pub fn new(sigma: f64) -> Result<Self> {
        Self::with_sensitivity(sigma, 1.0)
    }

    pub fn with_sensitivity(sigma: f64, sensitivity: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if !(sensitivity.is_finite() && sensitivity > 0.0) {
            return Err(AccountantError::NonPositiveSensitivity(sensitivity));
        }
        Ok(Self { sigma, sensitivity })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(AccountantError::NonPositiveSigma(sigma))
    }
}

/// Which aggregator steps are charged against the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerMode {
    /// Charge the noisy confidence gate on every query and the noisy argmax
    /// on every answered query.
    PerStep,
    /// Charge only answered queries at the answer noise scale.
    PaperSimple,
}

impl LedgerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LedgerMode::PerStep => "per_step",
            LedgerMode::PaperSimple => "paper_simple",
        }
    }
}

/// Counts of noisy-mechanism invocations; the only input to the ε computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub threshold_checks: u64,
    pub answered: u64,
    pub sigma1: f64,
    pub sigma2: f64,
    #[serde(default = "unit_sensitivity")]
    pub sensitivity: f64,
    pub mode: LedgerMode,
}

fn unit_sensitivity() -> f64 {
    1.0
}

impl PrivacyLedger {
    pub fn new(sigma1: f64, sigma2: f64, mode: LedgerMode) -> Self {
        Self {
            threshold_checks: 0,
            answered: 0,
            sigma1,
            sigma2,
            sensitivity: 1.0,
            mode,
        }
    }

    pub fn with_counts(mut self, threshold_checks: u64, answered: u64) -> Self {
        self.threshold_checks = threshold_checks;
        self.answered = answered;
        self
    }

    pub fn with_sensitivity(mut self, sensitivity: f64) -> Self {
        self.sensitivity = sensitivity;
        self
    }

    /// Records one pass through the confidence gate.
    pub fn record(&mut self, answered: bool) {
        self.threshold_checks += 1;
        if answered {
            self.answered += 1;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.threshold_checks == 0 && self.answered == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.answered > self.threshold_checks {
            return Err(AccountantError::InconsistentLedger {
                answered: self.answered,
                checks: self.threshold_checks,
            });
        }
        check_sigma(self.sigma2)?;
        if self.mode == LedgerMode::PerStep {
            check_sigma(self.sigma1)?;
        }
        if !(self.sensitivity.is_finite() && self.sensitivity > 0.0) {
            return Err(AccountantError::NonPositiveSensitivity(self.sensitivity));
        }
        Ok(())
    }

    /// RDP cost per unit of α: `compose_ledger(α) = α · rate`.
    fn rate(&self) -> f64 {
        let s2 = self.sensitivity * self.sensitivity;
        let answers = self.answered as f64 * s2 / (2.0 * self.sigma2 * self.sigma2);
        match self.mode {
            LedgerMode::PaperSimple => answers,
            LedgerMode::PerStep => {
                self.threshold_checks as f64 * s2 / (2.0 * self.sigma1 * self.sigma1) + answers
            }
        }
    }
}

/// `(ε, δ)` guarantee together with the order that achieved it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub alpha_star: RdpOrder,
}

/// RDP of a single Gaussian step: `α·s²/(2σ²)`.
pub fn gaussian_rdp(mech: GaussianMechanism, order: RdpOrder) -> f64 {
    order.get() * mech.sensitivity * mech.sensitivity / (2.0 * mech.sigma * mech.sigma)
}

/// Sequentially composed RDP of every step recorded in the ledger.
pub fn compose_ledger(ledger: &PrivacyLedger, order: RdpOrder) -> Result<f64> {
    ledger.validate()?;
    Ok(order.get() * ledger.rate())
}

/// `200` orders with `α − 1` log-spaced over `[1e-3, 511]`.
pub fn default_orders() -> Vec<RdpOrder> {
    log_spaced_orders(DEFAULT_GRID_LEN, 1e-3, MAX_ORDER)
}

/// `n` orders in `(1, max_order]` whose offsets `α − 1` are log-spaced from
/// `min_offset` up to `max_order − 1`.
pub fn log_spaced_orders(n: usize, min_offset: f64, max_order: f64) -> Vec<RdpOrder> {
    let lo = min_offset.ln();
    let hi = (max_order - 1.0).ln();
    (0..n)
        .map(|i| {
            let t = if n == 1 { 1.0 } else { i as f64 / (n - 1) as f64 };
            RdpOrder(1.0 + (lo + t * (hi - lo)).exp())
        })
        .collect()
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(AccountantError::InvalidDelta(delta))
    }
}

/// Converts the ledger's composed RDP curve to `(ε, δ)`-DP, picking the best
/// order from `orders` plus the analytic minimiser of the linear curve.
pub fn rdp_to_dp(ledger: &PrivacyLedger, delta: f64, orders: &[RdpOrder]) -> Result<DpBudget> {
    check_delta(delta)?;
    if orders.is_empty() {
        return Err(AccountantError::EmptyOrderGrid);
    }
    ledger.validate()?;
    rdp_to_dp_unchecked(ledger.rate(), delta, orders, true)
}

/// As [`rdp_to_dp`] but restricted to the supplied grid; used to measure how
/// close a plain grid search gets.
pub fn rdp_to_dp_grid_only(
    ledger: &PrivacyLedger,
    delta: f64,
    orders: &[RdpOrder],
) -> Result<DpBudget> {
    check_delta(delta)?;
    if orders.is_empty() {
        return Err(AccountantError::EmptyOrderGrid);
    }
    ledger.validate()?;
    rdp_to_dp_unchecked(ledger.rate(), delta, orders, false)
}

fn rdp_to_dp_unchecked(
    rate: f64,
    delta: f64,
    orders: &[RdpOrder],
    inject_analytic: bool,
) -> Result<DpBudget> {
    let log_inv_delta = (1.0 / delta).ln();
    if rate == 0.0 {
        let alpha_star = orders
            .iter()
            .copied()
            .fold(orders[0], |a, b| if b.0 > a.0 { b } else { a });
        return Ok(DpBudget {
            epsilon: 0.0,
            delta,
            alpha_star,
        });
    }
    let objective = |alpha: f64| alpha * rate + log_inv_delta / (alpha - 1.0);
    let analytic = RdpOrder(1.0 + (log_inv_delta / rate).sqrt());
    let candidates = orders
        .iter()
        .copied()
        .chain(inject_analytic.then_some(analytic));
    let (alpha_star, epsilon) = candidates
        .map(|order| (order, objective(order.0)))
        .fold(None, |best: Option<(RdpOrder, f64)>, cur| match best {
            Some(b) if b.1 <= cur.1 => Some(b),
            _ => Some(cur),
        })
        .expect("orders is non-empty");
    Ok(DpBudget {
        epsilon: epsilon.max(0.0),
        delta,
        alpha_star,
    })
}

/// Exact minimiser of `count·α/(2σ²) + ln(1/δ)/(α−1)` over `α > 1`.
///
/// Returns `(ε, α*)` with `α* = 1 + √(2σ² ln(1/δ)/count)` and
/// `ε = count/(2σ²) + √(2·count·ln(1/δ))/σ`.
pub fn closed_form_eps(count: u64, sigma: f64, delta: f64) -> Result<(f64, RdpOrder)> {
    check_delta(delta)?;
    if count == 0 {
        return Err(AccountantError::ZeroCount);
    }
    if !(sigma > 0.0) || sigma.is_nan() {
        return Err(AccountantError::NonPositiveSigma(sigma));
    }
    let n = count as f64;
    let log_inv_delta = (1.0 / delta).ln();
    let alpha = 1.0 + (2.0 * sigma * sigma * log_inv_delta / n).sqrt();
    let epsilon = n / (2.0 * sigma * sigma) + (2.0 * n * log_inv_delta).sqrt() / sigma;
    Ok((epsilon, RdpOrder(alpha)))
}
