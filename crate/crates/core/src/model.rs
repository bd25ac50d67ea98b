//! Model constants, cost functions and the flat `(t, s, a, b)` indexing shared
//! by the kernel, LP, saddle-point and simulation code.
//!
//! A queue has buffer capacity `K`, so its state is an occupancy in `0..=K`.
//! At every batch arrival the controller picks an admission action `a` (send
//! one job to this queue or not) and a rate action `b` (low or high service
//! completion probability per slot).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerical tolerances used across the crate.
pub mod tol {
    /// Allowed deviation of `sum(m0)` from one.
    pub const M0_SUM: f64 = 1e-12;
    /// Allowed deviation of an admissible kernel row sum from one.
    pub const ROW_SUM: f64 = 1e-9;
    /// Default KKT certification threshold for `solve_exact`.
    pub const KKT: f64 = 1e-6;
    /// Below this state mass a policy row falls back to `(a=0, b=0)`.
    pub const MASS_FLOOR: f64 = 1e-12;
    /// GDA/SGDA abort once `||y||_inf` exceeds this.
    pub const DIVERGENCE: f64 = 1e6;
    /// `alpha*N` and `beta*N` must be this close to an integer.
    pub const INTEGER_BUDGET: f64 = 1e-9;
    /// Default geometric-tail truncation for the analytic kernel.
    pub const TAIL_EPS: f64 = 1e-12;
}

/// How jobs are served between two batch arrivals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Concurrent job service: every buffered job may complete in each slot.
    Cjs,
    /// Single job service: at most one head-of-line completion per slot.
    Sjs,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::Cjs, Scenario::Sjs];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Cjs => "cjs",
            Scenario::Sjs => "sjs",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cjs" => Ok(Scenario::Cjs),
            "sjs" => Ok(Scenario::Sjs),
            other => Err(Error::invalid("scenario", format!("expected `cjs` or `sjs`, got `{other}`"))),
        }
    }
}

/// All model constants for one homogeneous population of queues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Buffer capacity `K`; states are `0..=K`.
    pub buffer: usize,
    /// Number of decision epochs `T` (batch arrivals).
    pub horizon: usize,
    /// Geometric inter-arrival parameter.
    pub p: f64,
    /// Admission budget (fraction of queues that may receive a job).
    pub alpha: f64,
    /// High-rate budget (fraction of queues that may run at the high rate).
    pub beta: f64,
    /// Rejection-cost weight.
    pub gamma: f64,
    /// Per-slot completion probability at the low rate, `q(0)`.
    pub b_low: f64,
    /// Per-slot completion probability at the high rate, `q(1)`.
    pub b_high: f64,
    pub scenario: Scenario,
    /// Initial state distribution, length `K + 1`.
    pub m0: Vec<f64>,
}

impl SystemParams {
    /// Point mass on the empty state.
    pub fn empty_start(buffer: usize) -> Vec<f64> {
        let mut m0 = vec![0.0; buffer + 1];
        m0[0] = 1.0;
        m0
    }

    /// Reference setup used for the policy-behavior experiments.
    pub fn policy_behavior() -> Self {
        SystemParams {
            buffer: 10,
            horizon: 100,
            p: 0.14,
            alpha: 0.5,
            beta: 0.3,
            gamma: 10.0,
            b_low: 0.05,
            b_high: 0.1,
            scenario: Scenario::Cjs,
            m0: Self::empty_start(10),
        }
    }

    /// Reference setup used for the GDA/SGDA convergence experiments.
    pub fn convergence(buffer: usize, scenario: Scenario) -> Self {
        SystemParams {
            buffer,
            horizon: 10,
            p: 0.5,
            alpha: 0.5,
            beta: 0.5,
            gamma: 100.0,
            b_low: 0.4,
            b_high: 0.8,
            scenario,
            m0: Self::empty_start(buffer),
        }
    }

    pub fn num_states(&self) -> usize {
        self.buffer + 1
    }

    /// Per-slot completion probability `q(b)`.
    pub fn service_prob(&self, b: usize) -> f64 {
        if b == 0 {
            self.b_low
        } else {
            self.b_high
        }
    }

    pub fn index(&self) -> FlatIndex {
        FlatIndex::new(self.horizon, self.num_states())
    }

    /// `(s = K, a = 1)` is the only inadmissible state/admission pair.
    pub fn admissible(&self, s: usize, a: usize) -> bool {
        !(s == self.buffer && a == 1)
    }

    pub fn validate(self) -> Result<Self> {
        validate(&self)?;
        Ok(self)
    }
}

/// Checks every parameter invariant, naming the first violated field.
pub fn validate(params: &SystemParams) -> Result<()> {
    let unit = |field: &'static str, v: f64, lo_open: bool, hi_open: bool| -> Result<()> {
        let lo_ok = if lo_open { v > 0.0 } else { v >= 0.0 };
        let hi_ok = if hi_open { v < 1.0 } else { v <= 1.0 };
        if v.is_finite() && lo_ok && hi_ok {
            Ok(())
        } else {
            let (l, r) = (if lo_open { "(" } else { "[" }, if hi_open { ")" } else { "]" });
            Err(Error::invalid(field, format!("{v} not in {l}0, 1{r}")))
        }
    };
    if params.buffer == 0 {
        return Err(Error::invalid("K", "buffer capacity must be positive"));
    }
    if params.horizon == 0 {
        return Err(Error::invalid("T", "horizon must be positive"));
    }
    unit("p", params.p, true, false)?;
    unit("alpha", params.alpha, true, false)?;
    unit("beta", params.beta, true, false)?;
    if !(params.gamma.is_finite() && params.gamma >= 0.0) {
        return Err(Error::invalid("gamma", format!("{} must be a nonnegative real", params.gamma)));
    }
    unit("b_low", params.b_low, false, false)?;
    unit("b_high", params.b_high, false, false)?;
    if params.b_low > params.b_high {
        return Err(Error::invalid("b_low", format!("b_low = {} exceeds b_high = {}", params.b_low, params.b_high)));
    }
    if params.m0.len() != params.num_states() {
        return Err(Error::invalid("m0", format!("length {} but K + 1 = {}", params.m0.len(), params.num_states())));
    }
    if let Some(v) = params.m0.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid("m0", format!("entry {v} is negative or not finite")));
    }
    let total: f64 = params.m0.iter().sum();
    if (total - 1.0).abs() > tol::M0_SUM {
        return Err(Error::invalid("m0", format!("entries sum to {total}, not 1")));
    }
    Ok(())
}

/// Storage and processing cost tables.
///
/// The defaults are `C_s(s) = s / K` and `C_p(b) = 2 (1 + q(b))`; both tables
/// can be overridden from the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub storage: Vec<f64>,
    pub processing: [f64; 2],
}

impl CostModel {
    pub fn default_for(params: &SystemParams) -> Self {
        let k = params.buffer as f64;
        CostModel {
            storage: (0..=params.buffer).map(|s| s as f64 / k).collect(),
            processing: [2.0 * (1.0 + params.b_low), 2.0 * (1.0 + params.b_high)],
        }
    }

    /// All-zero costs; handy for isolating the regularization term.
    pub fn zero(params: &SystemParams) -> Self {
        CostModel { storage: vec![0.0; params.num_states()], processing: [0.0; 2] }
    }

    pub fn validate(&self, params: &SystemParams) -> Result<()> {
        if self.storage.len() != params.num_states() {
            return Err(Error::invalid(
                "storage_cost",
                format!("length {} but K + 1 = {}", self.storage.len(), params.num_states()),
            ));
        }
        let nonneg = |v: &f64| v.is_finite() && *v >= 0.0;
        if !self.storage.iter().all(nonneg) {
            return Err(Error::invalid("storage_cost", "entries must be nonnegative"));
        }
        if !self.processing.iter().all(nonneg) {
            return Err(Error::invalid("processing_cost", "entries must be nonnegative"));
        }
        if self.storage.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("storage_cost", "must be nondecreasing in the state"));
        }
        if self.processing[1] < self.processing[0] {
            return Err(Error::invalid("processing_cost", "must be nondecreasing in the rate"));
        }
        Ok(())
    }

    /// `C_s(s) + C_p(b)`, the part of the stage cost that does not depend on `a`.
    #[inline]
    pub fn holding(&self, s: usize, b: usize) -> f64 {
        self.storage[s] + self.processing[b]
    }
}

/// Hard per-epoch budgets `(alpha N, beta N)` as counts for `n` queues.
/// Both products must be integers.
pub fn integer_budgets(params: &SystemParams, n: usize) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::invalid("N", "need at least one queue"));
    }
    let count = |name: &'static str, frac: f64| {
        let value = frac * n as f64;
        let rounded = value.round();
        if (value - rounded).abs() > tol::INTEGER_BUDGET {
            return Err(Error::NonIntegerBudget { name, value });
        }
        Ok(rounded as usize)
    };
    Ok((count("alpha", params.alpha)?, count("beta", params.beta)?))
}

/// `C_s(s) + C_p(b) + gamma * 1[a = 0]`.
pub fn stage_cost(s: usize, a: usize, b: usize, costs: &CostModel, gamma: f64) -> Result<f64> {
    if s >= costs.storage.len() {
        return Err(Error::StateOutOfRange { state: s, max: costs.storage.len() - 1 });
    }
    if a > 1 || b > 1 {
        return Err(Error::Precondition(format!("actions must be 0/1, got a={a}, b={b}")));
    }
    let reject = if a == 0 { gamma } else { 0.0 };
    Ok(costs.holding(s, b) + reject)
}

/// Row-major bijection `(t, s, a, b) <-> 0..T*(K+1)*4`, `t` outermost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlatIndex {
    pub horizon: usize,
    pub states: usize,
}

impl FlatIndex {
    pub fn new(horizon: usize, states: usize) -> Self {
        FlatIndex { horizon, states }
    }

    pub fn len(&self) -> usize {
        self.horizon * self.states * 4
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of coordinates in one epoch.
    pub fn epoch_len(&self) -> usize {
        self.states * 4
    }

    #[inline]
    pub fn flatten(&self, t: usize, s: usize, a: usize, b: usize) -> usize {
        debug_assert!(t < self.horizon && s < self.states && a < 2 && b < 2);
        ((t * self.states + s) * 2 + a) * 2 + b
    }

    #[inline]
    pub fn unflatten(&self, i: usize) -> (usize, usize, usize, usize) {
        let b = i % 2;
        let a = (i / 2) % 2;
        let s = (i / 4) % self.states;
        let t = i / (4 * self.states);
        (t, s, a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_setups_validate() {
        SystemParams::policy_behavior().validate().unwrap();
        for k in [1, 2, 4, 8] {
            for sc in Scenario::ALL {
                SystemParams::convergence(k, sc).validate().unwrap();
            }
        }
    }

    #[test]
    fn zero_m0_rejected() {
        let mut p = SystemParams::policy_behavior();
        p.m0 = vec![0.0; 11];
        let err = validate(&p).unwrap_err();
        assert!(matches!(err, Error::InvalidParams { field: "m0", .. }), "{err}");
    }

    #[test]
    fn rate_order_rejected() {
        let mut p = SystemParams::policy_behavior();
        p.b_low = 0.6;
        p.b_high = 0.4;
        let err = validate(&p).unwrap_err();
        assert!(matches!(err, Error::InvalidParams { field: "b_low", .. }), "{err}");
    }

    #[test]
    fn other_field_errors() {
        let base = SystemParams::policy_behavior();
        type Tweak = Box<dyn Fn(&mut SystemParams)>;
        let cases: Vec<(&str, Tweak)> = vec![
            ("p", Box::new(|p| p.p = 0.0)),
            ("alpha", Box::new(|p| p.alpha = 0.0)),
            ("beta", Box::new(|p| p.beta = 1.5)),
            ("gamma", Box::new(|p| p.gamma = -1.0)),
            ("K", Box::new(|p| p.buffer = 0)),
            ("T", Box::new(|p| p.horizon = 0)),
            ("m0", Box::new(|p| p.m0 = vec![1.0])),
            ("b_high", Box::new(|p| p.b_high = 1.2)),
        ];
        for (field, mutate) in cases {
            let mut p = base.clone();
            mutate(&mut p);
            match validate(&p) {
                Err(Error::InvalidParams { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: expected error, got {other:?}"),
            }
        }
    }

    #[test]
    fn stage_cost_examples() {
        let p = SystemParams::policy_behavior();
        let c = CostModel::default_for(&p);
        assert!((stage_cost(0, 1, 0, &c, 10.0).unwrap() - 2.1).abs() < 1e-12);
        assert!((stage_cost(0, 0, 0, &c, 0.0).unwrap() - 2.0 * 1.05).abs() < 1e-12);
        assert!((stage_cost(10, 0, 1, &c, 10.0).unwrap() - 13.2).abs() < 1e-12);
        assert!(matches!(stage_cost(11, 0, 0, &c, 1.0), Err(Error::StateOutOfRange { .. })));
    }

    #[test]
    fn stage_cost_monotone_on_grid() {
        let p = SystemParams::policy_behavior();
        let c = CostModel::default_for(&p);
        c.validate(&p).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                for s in 1..=p.buffer {
                    let lo = stage_cost(s - 1, a, b, &c, p.gamma).unwrap();
                    assert!(stage_cost(s, a, b, &c, p.gamma).unwrap() >= lo);
                }
            }
            for s in 0..=p.buffer {
                assert!(stage_cost(s, a, 1, &c, p.gamma).unwrap() >= stage_cost(s, a, 0, &c, p.gamma).unwrap());
            }
        }
    }

    #[test]
    fn decreasing_costs_rejected() {
        let p = SystemParams::convergence(2, Scenario::Cjs);
        let mut c = CostModel::default_for(&p);
        c.storage = vec![1.0, 0.5, 2.0];
        assert!(c.validate(&p).is_err());
        let mut c = CostModel::default_for(&p);
        c.processing = [3.0, 1.0];
        assert!(c.validate(&p).is_err());
    }

    #[test]
    fn flat_index_round_trip() {
        let ix = FlatIndex::new(4, 3);
        assert_eq!(ix.len(), 48);
        let mut expected = 0;
        for t in 0..4 {
            for s in 0..3 {
                for a in 0..2 {
                    for b in 0..2 {
                        let i = ix.flatten(t, s, a, b);
                        assert_eq!(i, expected);
                        assert_eq!(ix.unflatten(i), (t, s, a, b));
                        expected += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn scenario_tokens() {
        assert_eq!(serde_json::to_string(&Scenario::Cjs).unwrap(), "\"cjs\"");
        assert_eq!("sjs".parse::<Scenario>().unwrap(), Scenario::Sjs);
        assert!("CJS".parse::<Scenario>().is_err());
    }

    #[test]
    fn integer_budget_counts() {
        let p = SystemParams::convergence(1, Scenario::Cjs);
        assert_eq!(integer_budgets(&p, 4).unwrap(), (2, 2));
        assert!(matches!(integer_budgets(&p, 3), Err(Error::NonIntegerBudget { name: "alpha", .. })));
        assert!(integer_budgets(&p, 0).is_err());
        let mut q = p.clone();
        q.alpha = 1.0 / 3.0;
        q.beta = 2.0 / 3.0;
        assert_eq!(integer_budgets(&q, 3).unwrap(), (1, 2));
    }
}
