//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Two ledgers are kept per run. The joint ledger charges every step at the
//! conservative whole-step ratio `σ_eff = 1 / (β·(Σ_g σ_g⁻²)^½)` and is the
//! privacy guarantee. The marginal ledger charges a single group at `σ/β`;
//! it exists for interpretation only and every output derived from it is
//! labelled [`MARGINAL_LABEL`].

use std::fmt;

use crate::error::{param, Error, Result};

pub const MARGINAL_LABEL: &str = "marginal-diagnostic";
pub const DEFAULT_DELTA: f64 = 1e-5;

/// Integer Rényi orders, all `>= 2`, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RdpOrderGrid {
    orders: Vec<u32>,
}

impl RdpOrderGrid {
    pub fn new(orders: Vec<u32>) -> Result<Self> {
        if orders.is_empty() {
            return Err(param("order grid must not be empty"));
        }
        if orders[0] < 2 {
            return Err(param(format!("Rényi orders must be >= 2, got {}", orders[0])));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(param("Rényi orders must be strictly increasing"));
        }
        Ok(Self { orders })
    }

    pub fn range(lo: u32, hi: u32) -> Result<Self> {
        Self::new((lo..=hi).collect())
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }
}

impl Default for RdpOrderGrid {
    fn default() -> Self {
        Self {
            orders: (2..=64).collect(),
        }
    }
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (1..=k)
        .map(|i| (f64::from(n - k + i) / f64::from(i)).ln())
        .sum()
}

/// `ln(eˣ − 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// RDP of the Poisson-subsampled Gaussian at an integer order:
///
/// `ε(α) = ln(Σ_k C(α,k)·(1−q)^(α−k)·q^k·exp(k(k−1)/(2σ²))) / (α − 1)`.
///
/// The `k = 0, 1` terms add up to the binomial mass they carry, so the sum
/// is evaluated as `1 + Σ_{k≥2} C(α,k)(1−q)^(α−k)q^k·(e^{k(k−1)/2σ²} − 1)`
/// in log space, which stays accurate when `q` is small.
pub fn rdp_subsampled_gaussian(order: u32, q: f64, sigma: f64) -> Result<f64> {
    if order < 2 {
        return Err(param(format!("Rényi order must be >= 2, got {order}")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(param(format!("sampling probability must lie in [0, 1], got {q}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(param(format!("noise ratio must be positive and finite, got {sigma}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let terms: Vec<f64> = (2..=order)
        .filter(|&k| k == order || q < 1.0)
        .map(|k| {
            let kf = f64::from(k);
            let rest = if k == order { 0.0 } else { f64::from(order - k) * ln_1mq };
            ln_binomial(order, k) + rest + kf * ln_q + ln_expm1(kf * (kf - 1.0) * inv_two_var)
        })
        .collect();
    let l = log_sum_exp(&terms);
    let ln_s = if l > 0.0 { l + (-l).exp().ln_1p() } else { l.exp().ln_1p() };
    let eps = ln_s / f64::from(order - 1);
    if !eps.is_finite() {
        return Err(Error::Accounting(format!(
            "RDP at order {order} overflowed for q={q}, sigma={sigma}; use a larger sigma or a smaller maximum order"
        )));
    }
    Ok(eps)
}

/// Conservative joint noise-to-sensitivity ratio `1 / (β·(Σ σ_g⁻²)^½)`.
pub fn sigma_eff_joint(beta: f64, sigmas: &[f64]) -> Result<f64> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(param(format!("beta must lie in (0, 1], got {beta}")));
    }
    if sigmas.is_empty() {
        return Err(param("need at least one noise multiplier"));
    }
    if let Some(bad) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(param(format!("noise multipliers must be positive, got {bad}")));
    }
    let precision: f64 = sigmas.iter().map(|s| 1.0 / (s * s)).sum();
    Ok(1.0 / (beta * precision.sqrt()))
}

/// Per-group marginal ratio `σ/β`.
pub fn sigma_marginal(beta: f64, sigma: f64) -> Result<f64> {
    sigma_eff_joint(beta, &[sigma])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerMode {
    Joint,
    Marginal,
}

impl fmt::Display for LedgerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LedgerMode::Joint => "joint",
            LedgerMode::Marginal => MARGINAL_LABEL,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub q: f64,
    pub sigma_eff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpEpsilon {
    pub epsilon: f64,
    pub best_order: u32,
}

/// Cumulative RDP over a fixed order grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    pub mode: LedgerMode,
    grid: RdpOrderGrid,
    records: Vec<StepRecord>,
    rdp: Vec<f64>,
}

impl PrivacyLedger {
    pub fn new(mode: LedgerMode, grid: RdpOrderGrid) -> Self {
        let rdp = vec![0.0; grid.len()];
        Self {
            mode,
            grid,
            records: Vec::new(),
            rdp,
        }
    }

    pub fn grid(&self) -> &RdpOrderGrid {
        &self.grid
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// Cumulative RDP, aligned with the grid's orders.
    pub fn rdp(&self) -> &[f64] {
        &self.rdp
    }

    /// Adds one step's RDP at every order. `grid` must be the ledger's own.
    pub fn compose(&mut self, record: StepRecord, grid: &RdpOrderGrid) -> Result<()> {
        if *grid != self.grid {
            return Err(Error::State("order grid differs from the ledger's grid".into()));
        }
        let per_step = self
            .grid
            .orders()
            .iter()
            .map(|&o| rdp_subsampled_gaussian(o, record.q, record.sigma_eff))
            .collect::<Result<Vec<_>>>()?;
        for (acc, e) in self.rdp.iter_mut().zip(per_step) {
            *acc += e;
        }
        self.records.push(record);
        Ok(())
    }

    /// `min_α ε_tot(α) + ln(1/δ)/(α − 1)`, ties going to the smaller order.
    pub fn rdp_to_dp(&self, delta: f64) -> Result<DpEpsilon> {
        rdp_to_dp(&self.grid, &self.rdp, delta)
    }
}

pub fn rdp_to_dp(grid: &RdpOrderGrid, rdp: &[f64], delta: f64) -> Result<DpEpsilon> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(param(format!("delta must lie in (0, 1), got {delta}")));
    }
    if rdp.len() != grid.len() {
        return Err(Error::State("RDP vector does not match the order grid".into()));
    }
    let penalty = (1.0 / delta).ln();
    let mut best: Option<DpEpsilon> = None;
    for (&order, &r) in grid.orders().iter().zip(rdp) {
        let eps = r + penalty / f64::from(order - 1);
        if best.is_none_or(|b| eps < b.epsilon) {
            best = Some(DpEpsilon {
                epsilon: eps,
                best_order: order,
            });
        }
    }
    best.ok_or_else(|| param("order grid must not be empty"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub epsilon: f64,
    pub best_order: u32,
}

/// Cumulative `(ε, δ)` of a `steps`-long run charged at ratio `sigma_ratio`.
/// The first point (step 0) is the empty composition.
pub fn epsilon_curve(
    sigma_ratio: f64,
    q: f64,
    steps: u64,
    delta: f64,
    grid: &RdpOrderGrid,
) -> Result<Vec<CurvePoint>> {
    let per_step = grid
        .orders()
        .iter()
        .map(|&o| rdp_subsampled_gaussian(o, q, sigma_ratio))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; grid.len()];
    let mut out = Vec::with_capacity(steps as usize + 1);
    for step in 0..=steps {
        if step > 0 {
            for (a, e) in acc.iter_mut().zip(&per_step) {
                *a += e;
            }
        }
        let dp = rdp_to_dp(grid, &acc, delta)?;
        out.push(CurvePoint {
            step,
            epsilon: dp.epsilon,
            best_order: dp.best_order,
        });
    }
    Ok(out)
}

/// Marginal diagnostic curve at ratio `σ/β`. Not a full-model guarantee.
pub fn marginal_epsilon_curve(
    beta: f64,
    sigma: f64,
    q: f64,
    steps: u64,
    delta: f64,
    grid: &RdpOrderGrid,
) -> Result<Vec<CurvePoint>> {
    epsilon_curve(sigma_marginal(beta, sigma)?, q, steps, delta, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Plain summation of the binomial expansion; only accurate for moderate
    /// arguments, which is all these tests use it for.
    fn direct(order: u32, q: f64, sigma: f64) -> f64 {
        let mut s = 0.0;
        let mut binom = 1.0;
        for k in 0..=order {
            if k > 0 {
                binom *= f64::from(order - k + 1) / f64::from(k);
            }
            let kf = f64::from(k);
            s += binom
                * (1.0 - q).powi((order - k) as i32)
                * q.powi(k as i32)
                * (kf * (kf - 1.0) / (2.0 * sigma * sigma)).exp();
        }
        s.ln() / f64::from(order - 1)
    }

    #[test]
    fn zero_sampling_costs_nothing() {
        for o in [2, 5, 64] {
            assert_eq!(rdp_subsampled_gaussian(o, 0.0, 0.7).unwrap(), 0.0);
        }
    }

    #[test]
    fn full_batch_is_plain_gaussian() {
        let e = rdp_subsampled_gaussian(8, 1.0, 2.0).unwrap();
        assert!((e - 1.0).abs() < 1e-12, "{e}");
    }

    #[test]
    fn matches_extended_precision_reference() {
        // 50-digit evaluation of the binomial sum.
        let e = rdp_subsampled_gaussian(16, 0.01, 1.0).unwrap();
        let reference = 3.087_850_783_696_244_6;
        assert!(((e - reference) / reference).abs() < 1e-9, "{e}");
        let e = rdp_subsampled_gaussian(2, 0.05, 1.0).unwrap();
        let reference = 0.004_286_504_370_418_977_5;
        assert!(((e - reference) / reference).abs() < 1e-9, "{e}");
    }

    #[test]
    fn agrees_with_direct_summation() {
        for &(o, q, s) in &[(3, 0.1, 1.5), (10, 0.02, 2.0), (20, 0.5, 3.0), (7, 0.9, 1.0)] {
            let a = rdp_subsampled_gaussian(o, q, s).unwrap();
            let b = direct(o, q, s);
            assert!(((a - b) / b).abs() < 1e-10, "order {o}: {a} vs {b}");
        }
    }

    #[test]
    fn overflow_is_reported() {
        let err = rdp_subsampled_gaussian(64, 0.5, 1e-200).unwrap_err();
        assert!(matches!(err, Error::Accounting(_)), "{err}");
        assert!(rdp_subsampled_gaussian(1, 0.5, 1.0).is_err());
        assert!(rdp_subsampled_gaussian(2, 1.5, 1.0).is_err());
    }

    #[test]
    fn sigma_eff_examples() {
        assert_eq!(sigma_eff_joint(0.5, &[1.0; 4]).unwrap(), 1.0);
        assert_eq!(sigma_eff_joint(1.0, &[1.7]).unwrap(), 1.7);
        let e = sigma_eff_joint(1.0, &[1.0, 2.0]).unwrap();
        assert!((e - 0.894_427_190_999_915_9).abs() < 1e-15);
        assert!(sigma_eff_joint(0.0, &[1.0]).is_err());
        assert!(sigma_eff_joint(1.0, &[0.0]).is_err());
        assert!(sigma_eff_joint(1.0, &[]).is_err());
    }

    #[test]
    fn compose_and_convert() {
        let grid = RdpOrderGrid::default();
        let mut ledger = PrivacyLedger::new(LedgerMode::Joint, grid.clone());
        let empty = ledger.rdp_to_dp(1e-5).unwrap();
        assert_eq!(empty.best_order, 64);
        assert!((empty.epsilon - (1e5f64).ln() / 63.0).abs() < 1e-12);

        ledger.compose(StepRecord { step: 0, q: 0.0, sigma_eff: 1.0 }, &grid).unwrap();
        assert!(ledger.rdp().iter().all(|r| *r == 0.0));

        let rec = StepRecord { step: 1, q: 0.05, sigma_eff: 1.1 };
        for _ in 0..10 {
            ledger.compose(rec, &grid).unwrap();
        }
        for (&o, &r) in grid.orders().iter().zip(ledger.rdp()) {
            let one = rdp_subsampled_gaussian(o, 0.05, 1.1).unwrap();
            assert!((r - 10.0 * one).abs() <= 1e-12 * r.max(1.0));
        }
        let other = RdpOrderGrid::range(2, 10).unwrap();
        assert!(matches!(ledger.compose(rec, &other), Err(Error::State(_))));
        assert!(ledger.rdp_to_dp(0.0).is_err());
        assert!(ledger.rdp_to_dp(1.0).is_err());
    }

    #[test]
    fn singleton_grid_conversion() {
        let grid = RdpOrderGrid::new(vec![2]).unwrap();
        let dp = rdp_to_dp(&grid, &[1.0], 1e-5).unwrap();
        assert!((dp.epsilon - 12.512_925_464_970_229).abs() < 1e-9);
        assert_eq!(dp.best_order, 2);
    }

    #[test]
    fn ties_go_to_smaller_order() {
        let grid = RdpOrderGrid::new(vec![2, 3]).unwrap();
        let pen = (1.0f64 / 0.5).ln();
        // eps(2) = a + pen, eps(3) = b + pen/2; make them equal.
        let dp = rdp_to_dp(&grid, &[0.0, pen / 2.0], 0.5).unwrap();
        assert_eq!(dp.best_order, 2);
    }

    #[test]
    fn grid_validation() {
        assert!(RdpOrderGrid::new(vec![]).is_err());
        assert!(RdpOrderGrid::new(vec![1, 2]).is_err());
        assert!(RdpOrderGrid::new(vec![3, 3]).is_err());
    }

    #[test]
    fn marginal_curve_reduces_to_dpsgd_at_beta_one() {
        let grid = RdpOrderGrid::default();
        let a = marginal_epsilon_curve(1.0, 1.3, 0.02, 50, 1e-5, &grid).unwrap();
        let b = epsilon_curve(1.3, 0.02, 50, 1e-5, &grid).unwrap();
        assert_eq!(a, b);
        let empty = marginal_epsilon_curve(0.5, 1.0, 0.1, 0, 1e-5, &grid).unwrap();
        assert_eq!(empty.len(), 1);
        assert_eq!(empty[0].best_order, 64);
    }

    proptest! {
        #[test]
        fn nonincreasing_in_sigma(order in 2u32..40, q in 0.0f64..1.0, s1 in 0.3f64..10.0, s2 in 0.3f64..10.0) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let a = rdp_subsampled_gaussian(order, q, lo).unwrap();
            let b = rdp_subsampled_gaussian(order, q, hi).unwrap();
            prop_assert!(b <= a * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn nondecreasing_in_q(order in 2u32..40, q1 in 0.0f64..1.0, q2 in 0.0f64..1.0, s in 0.5f64..10.0) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let a = rdp_subsampled_gaussian(order, lo, s).unwrap();
            let b = rdp_subsampled_gaussian(order, hi, s).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!(a <= b * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn joint_ratio_never_exceeds_marginal(beta in 0.01f64..=1.0, sigmas in proptest::collection::vec(0.1f64..10.0, 1..8)) {
            let joint = sigma_eff_joint(beta, &sigmas).unwrap();
            let min = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(joint <= min / beta * (1.0 + 1e-12));
        }

        #[test]
        fn composition_order_is_irrelevant(recs in proptest::collection::vec((0.0f64..0.5, 0.5f64..5.0), 1..12), seed in 0u64..1000) {
            let grid = RdpOrderGrid::range(2, 32).unwrap();
            let mut a = PrivacyLedger::new(LedgerMode::Joint, grid.clone());
            let mut b = PrivacyLedger::new(LedgerMode::Joint, grid.clone());
            let mut shuffled = recs.clone();
            let mut rng = crate::numerics::RandomStream::data(seed).generator();
            for i in (1..shuffled.len()).rev() {
                let j = rng.below(i as u64 + 1) as usize;
                shuffled.swap(i, j);
            }
            for (i, &(q, s)) in recs.iter().enumerate() {
                a.compose(StepRecord { step: i as u64, q, sigma_eff: s }, &grid).unwrap();
            }
            for (i, &(q, s)) in shuffled.iter().enumerate() {
                b.compose(StepRecord { step: i as u64, q, sigma_eff: s }, &grid).unwrap();
            }
            for (x, y) in a.rdp().iter().zip(b.rdp()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
            let e1 = a.rdp_to_dp(1e-5).unwrap().epsilon;
            let before = {
                let mut c = a.clone();
                c.compose(StepRecord { step: 99, q: 0.1, sigma_eff: 1.0 }, &grid).unwrap();
                c.rdp_to_dp(1e-5).unwrap().epsilon
            };
            prop_assert!(before >= e1);
        }
    }
}
