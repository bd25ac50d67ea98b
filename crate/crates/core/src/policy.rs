//! Per-queue randomized decision rules obtained by conditioning an
//! occupation measure on the state, and the budget repair that makes sampled
//! actions feasible for a finite population.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::lp::OccupationMeasure;
use crate::model::{integer_budgets, tol, SystemParams};

/// Index of the pair `(a, b)` in a policy row.
#[inline]
pub fn pair(a: usize, b: usize) -> usize {
    a * 2 + b
}

/// `pi[t][s]`: distribution over `(a, b)` stored as `[p00, p01, p10, p11]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomizedPolicy {
    horizon: usize,
    states: usize,
    rows: Vec<[f64; 4]>,
}

impl RandomizedPolicy {
    /// Builds a policy from explicit rows laid out `t * (K + 1) + s`.
    /// Rows must be nonnegative, sum to one, and never admit at `s = K`.
    pub fn from_rows(horizon: usize, states: usize, rows: Vec<[f64; 4]>) -> Result<Self> {
        if states == 0 || rows.len() != horizon * states {
            return Err(Error::ShapeMismatch(format!(
                "expected {} rows for T={horizon}, K+1={states}, got {}",
                horizon * states,
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            let (t, s) = (i / states, i % states);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > tol::ROW_SUM {
                return Err(Error::Precondition(format!("row (t={t}, s={s}) is not a distribution: {row:?}")));
            }
            if s == states - 1 && row[pair(1, 0)] + row[pair(1, 1)] > 0.0 {
                return Err(Error::Precondition(format!("row (t={t}, s={s}) admits at a full buffer")));
            }
        }
        Ok(RandomizedPolicy { horizon, states, rows })
    }

    /// The same row at every `(t, s)`, with admission removed at `s = K`.
    pub fn constant(params: &SystemParams, row: [f64; 4]) -> Result<Self> {
        let states = params.num_states();
        let full = full_buffer_row(row);
        let rows = (0..params.horizon * states).map(|i| if i % states == states - 1 { full } else { row }).collect();
        Self::from_rows(params.horizon, states, rows)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn row(&self, t: usize, s: usize) -> &[f64; 4] {
        &self.rows[t * self.states + s]
    }

    pub fn prob(&self, t: usize, s: usize, a: usize, b: usize) -> f64 {
        self.row(t, s)[pair(a, b)]
    }

    /// Draws `(a, b)` at `(t, s)`.
    pub fn sample<R: Rng + ?Sized>(&self, t: usize, s: usize, rng: &mut R) -> (usize, usize) {
        let row = self.row(t, s);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return (k / 2, k % 2);
            }
        }
        // Rounding left `u` above the cumulative sum: take the last positive pair.
        let k = (0..4).rev().find(|&k| row[k] > 0.0).unwrap_or(0);
        (k / 2, k % 2)
    }

    /// CSV with header `t,s,a,b,prob`, every entry listed.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,s,a,b,prob")?;
        for t in 0..self.horizon {
            for s in 0..self.states {
                for a in 0..2 {
                    for b in 0..2 {
                        writeln!(w, "{t},{s},{a},{b},{}", self.prob(t, s, a, b))?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Moves any admitting mass onto the matching rejecting pair.
fn full_buffer_row(row: [f64; 4]) -> [f64; 4] {
    [row[pair(0, 0)] + row[pair(1, 0)], row[pair(0, 1)] + row[pair(1, 1)], 0.0, 0.0]
}

/// `pi[t][s](a, b) = y(t, s, a, b) / m_s(t)`, or `(0, 0)` with certainty where
/// `m_s(t) < 1e-12`.
///
/// Measures produced by gradient methods can carry small negative entries and
/// stray mass on `(K, 1, b)`; negatives are clamped to zero before
/// conditioning and full-buffer admissions are folded into rejection.
pub fn extract_policy(y: &OccupationMeasure, params: &SystemParams) -> Result<RandomizedPolicy> {
    y.ensure_shape(params)?;
    let states = params.num_states();
    let mut rows = Vec::with_capacity(params.horizon * states);
    for t in 0..params.horizon {
        for s in 0..states {
            let mut row = [0.0; 4];
            for a in 0..2 {
                for b in 0..2 {
                    row[pair(a, b)] = y.get(t, s, a, b).max(0.0);
                }
            }
            if s == params.buffer {
                row = full_buffer_row(row);
            }
            let mass: f64 = row.iter().sum();
            if mass < tol::MASS_FLOOR {
                row = [1.0, 0.0, 0.0, 0.0];
            } else {
                row.iter_mut().for_each(|p| *p /= mass);
            }
            rows.push(row);
        }
    }
    RandomizedPolicy::from_rows(params.horizon, states, rows)
}

/// Per-queue actions for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Actions {
    pub admits: Vec<u8>,
    pub rates: Vec<u8>,
}

/// Samples every queue's action independently, then demotes uniformly chosen
/// admits (and high rates) until the hard budgets `alpha N` and `beta N` hold.
pub fn apply_with_budgets<R: Rng + ?Sized>(
    policy: &RandomizedPolicy,
    occupancies: &[usize],
    t: usize,
    params: &SystemParams,
    rng: &mut R,
) -> Result<Actions> {
    let (admit_budget, rate_budget) = integer_budgets(params, occupancies.len())?;
    if policy.states() != params.num_states() {
        return Err(Error::ShapeMismatch(format!(
            "policy has {} states, params {}",
            policy.states(),
            params.num_states()
        )));
    }
    if t >= policy.horizon() {
        return Err(Error::Precondition(format!("epoch {t} outside horizon {}", policy.horizon())));
    }
    let mut admits = Vec::with_capacity(occupancies.len());
    let mut rates = Vec::with_capacity(occupancies.len());
    for &s in occupancies {
        if s > params.buffer {
            return Err(Error::StateOutOfRange { state: s, max: params.buffer });
        }
        let (a, b) = policy.sample(t, s, rng);
        admits.push(if s < params.buffer { a as u8 } else { 0 });
        rates.push(b as u8);
    }
    demote(&mut admits, admit_budget, rng);
    demote(&mut rates, rate_budget, rng);
    Ok(Actions { admits, rates })
}

/// Clears a uniformly random subset of the set flags so at most `budget` remain.
fn demote<R: Rng + ?Sized>(flags: &mut [u8], budget: usize, rng: &mut R) {
    let mut on: Vec<usize> = (0..flags.len()).filter(|&n| flags[n] == 1).collect();
    if on.len() <= budget {
        return;
    }
    let excess = on.len() - budget;
    let (chosen, _) = on.partial_shuffle(rng, excess);
    for &n in chosen.iter() {
        flags[n] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::compute_default_kernel;
    use crate::model::Scenario;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params4() -> SystemParams {
        SystemParams { horizon: 3, ..SystemParams::convergence(2, Scenario::Cjs) }
    }

    #[test]
    fn uniform_measure_gives_uniform_rows() {
        let p = params4();
        let mut y = OccupationMeasure::zeros(p.horizon, p.num_states());
        for a in 0..2 {
            for b in 0..2 {
                y.set(1, 0, a, b, 0.1);
            }
        }
        let pi = extract_policy(&y, &p).unwrap();
        assert_eq!(pi.row(1, 0), &[0.25; 4]);
        assert_eq!(pi.row(0, 0), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn never_admit_gives_point_mass() {
        let p = params4();
        let k = compute_default_kernel(&p).unwrap();
        let y = OccupationMeasure::never_admit(&p, &k);
        let pi = extract_policy(&y, &p).unwrap();
        for t in 0..p.horizon {
            for s in 0..p.num_states() {
                assert_eq!(pi.row(t, s), &[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn lp_policy_rows_normalized_and_condition_back() {
        let p = SystemParams::policy_behavior();
        let k = compute_default_kernel(&p).unwrap();
        let sol = crate::lp::solve_params(&p, &k, &crate::model::CostModel::default_for(&p), 0.0).unwrap();
        let pi = extract_policy(&sol.y, &p).unwrap();
        for t in 0..p.horizon {
            for s in 0..p.num_states() {
                assert!((pi.row(t, s).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                assert_eq!(pi.prob(t, p.buffer, 1, 0) + pi.prob(t, p.buffer, 1, 1), 0.0);
                let m = sol.y.state_mass(t, s);
                if m >= tol::MASS_FLOOR && s < p.buffer {
                    for a in 0..2 {
                        for b in 0..2 {
                            let back = pi.prob(t, s, a, b) * m;
                            assert!((back - sol.y.get(t, s, a, b).max(0.0)).abs() <= 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn forced_repair_hits_budgets_exactly() {
        let p = params4();
        let pi = RandomizedPolicy::constant(&p, [0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut first = [0usize; 4];
        for _ in 0..4000 {
            let act = apply_with_budgets(&pi, &[0, 1, 0, 1], 0, &p, &mut rng).unwrap();
            assert_eq!(act.admits.iter().filter(|&&a| a == 1).count(), 2);
            assert_eq!(act.rates.iter().filter(|&&b| b == 1).count(), 2);
            for (n, &a) in act.admits.iter().enumerate() {
                first[n] += a as usize;
            }
        }
        // Each queue keeps its admit with probability 1/2.
        for c in first {
            assert!((c as f64 - 2000.0).abs() < 4.0 * 1000f64.sqrt(), "{first:?}");
        }
    }

    #[test]
    fn idle_policy_needs_no_repair() {
        let p = params4();
        let pi = RandomizedPolicy::constant(&p, [1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let act = apply_with_budgets(&pi, &[0, 2, 1, 0], 2, &p, &mut rng).unwrap();
        assert_eq!(act, Actions { admits: vec![0; 4], rates: vec![0; 4] });
    }

    #[test]
    fn admit_frequency_matches_policy() {
        let p = params4();
        let row = [0.3, 0.2, 0.4, 0.1];
        let pi = RandomizedPolicy::constant(&p, row).unwrap();
        // alpha N = beta N = 2 with N = 4 binds often, so use N = 2 with
        // alpha = beta = 1: no repair.
        let free = SystemParams { alpha: 1.0, beta: 1.0, ..p.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let mut hits = 0usize;
        for _ in 0..draws {
            hits += apply_with_budgets(&pi, &[0], 1, &free, &mut rng).unwrap().admits[0] as usize;
        }
        let target = row[2] + row[3];
        let se = (target * (1.0 - target) / draws as f64).sqrt();
        assert!((hits as f64 / draws as f64 - target).abs() <= 3.0 * se);
    }

    #[test]
    fn bad_inputs_rejected() {
        let p = params4();
        let pi = RandomizedPolicy::constant(&p, [1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(apply_with_budgets(&pi, &[0, 9], 0, &p, &mut rng), Err(Error::StateOutOfRange { .. })));
        assert!(matches!(apply_with_budgets(&pi, &[0, 0, 0], 0, &p, &mut rng), Err(Error::NonIntegerBudget { .. })));
        assert!(apply_with_budgets(&pi, &[0, 0], 3, &p, &mut rng).is_err());
        assert!(RandomizedPolicy::from_rows(1, 2, vec![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]).is_err());
        assert!(RandomizedPolicy::from_rows(1, 2, vec![[0.5, 0.0, 0.0, 0.0]; 2]).is_err());
    }

    #[test]
    fn csv_has_every_entry() {
        let p = params4();
        let pi = RandomizedPolicy::constant(&p, [0.5, 0.0, 0.5, 0.0]).unwrap();
        let mut buf = Vec::new();
        pi.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("t,s,a,b,prob"));
        assert_eq!(text.lines().count(), 1 + p.horizon * p.num_states() * 4);
        assert!(text.contains("\n0,2,0,0,1\n"));
    }

    proptest! {
        #[test]
        fn repair_is_always_feasible(
            seed in any::<u64>(),
            occ in proptest::collection::vec(0usize..=2, 4),
            w in proptest::array::uniform4(0.0f64..1.0),
            t in 0usize..3,
        ) {
            let p = params4();
            let total: f64 = w.iter().sum::<f64>() + 1e-3;
            let row = [w[0] / total + 1e-3 / total, w[1] / total, w[2] / total, w[3] / total];
            let pi = RandomizedPolicy::constant(&p, row).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let act = apply_with_budgets(&pi, &occ, t, &p, &mut rng).unwrap();
            prop_assert!(act.admits.iter().map(|&a| a as usize).sum::<usize>() <= 2);
            prop_assert!(act.rates.iter().map(|&b| b as usize).sum::<usize>() <= 2);
            for (n, &s) in occ.iter().enumerate() {
                prop_assert!(s < p.buffer || act.admits[n] == 0);
            }
        }
    }
}
