//! Epoch-level simulation of `N` queues driven by a randomized policy with
//! hard per-epoch budgets. One inter-arrival time is drawn per epoch for the
//! whole system; departures are then sampled independently per queue.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{sample_tau, sample_transition, sample_transition_with_tau};
use crate::lp::{normalized_metrics, OccupationMeasure};
use crate::model::{integer_budgets, CostModel, FlatIndex, SystemParams};
use crate::policy::{apply_with_budgets, RandomizedPolicy};

/// Outcome of one simulated sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub seed: u64,
    /// Number of queues `N`.
    pub queues: usize,
    index: FlatIndex,
    /// Queue counts per `(t, s, a, b)` cell, recorded after budget repair and
    /// before the transition.
    pub counts: Vec<u64>,
    /// `R(t) = alpha N - sum_n a_n(t)`.
    pub rejections: Vec<usize>,
    pub admitted: Vec<usize>,
    pub high_rate: Vec<usize>,
    /// `sum_n [C_s(s_n) + C_p(b_n)] + gamma R(t)`.
    pub stage_costs: Vec<f64>,
}

impl SimReport {
    pub fn horizon(&self) -> usize {
        self.index.horizon
    }

    /// `Y_hat(t, s, a, b)`: fraction of queues in each cell.
    pub fn empirical_measure(&self) -> OccupationMeasure {
        let n = self.queues as f64;
        let values = self.counts.iter().map(|&c| c as f64 / n).collect();
        OccupationMeasure::from_vec(self.index.horizon, self.index.states, values).expect("shape fixed at construction")
    }

    /// `(pi_A_hat, pi_H_hat)` of the empirical measure.
    pub fn normalized_metrics(&self, params: &SystemParams) -> (f64, f64) {
        normalized_metrics(&self.empirical_measure(), params)
    }

    pub fn total_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }

    pub fn per_queue_cost(&self) -> f64 {
        self.total_cost() / self.queues as f64
    }

    /// CSV with header `t,s,a,b,y_hat`, every cell listed.
    pub fn write_measure_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        self.empirical_measure().write_csv(w, "y_hat")
    }

    /// CSV with header `t,rejections,stage_cost`.
    pub fn write_epochs_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,rejections,stage_cost")?;
        for (t, (r, c)) in self.rejections.iter().zip(&self.stage_costs).enumerate() {
            writeln!(w, "{t},{r},{c}")?;
        }
        Ok(())
    }
}

/// Who shares the inter-arrival time of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TauSharing {
    /// One draw per epoch for the whole system.
    #[default]
    System,
    /// An independent draw per queue. Not the modeled system; useful for
    /// separating common-noise effects from finite-`N` effects.
    PerQueue,
}

/// Runs one path per seed, in parallel, with a system-wide inter-arrival
/// time per epoch. Seed `k` always yields the same report.
pub fn simulate(
    policy: &RandomizedPolicy,
    params: &SystemParams,
    costs: &CostModel,
    queues: usize,
    seeds: &[u64],
) -> Result<Vec<SimReport>> {
    simulate_with(policy, params, costs, queues, seeds, TauSharing::System)
}

/// [`simulate`] with a choice of inter-arrival sharing.
pub fn simulate_with(
    policy: &RandomizedPolicy,
    params: &SystemParams,
    costs: &CostModel,
    queues: usize,
    seeds: &[u64],
    sharing: TauSharing,
) -> Result<Vec<SimReport>> {
    crate::model::validate(params)?;
    costs.validate(params)?;
    integer_budgets(params, queues)?;
    if policy.states() != params.num_states() || policy.horizon() != params.horizon {
        return Err(Error::ShapeMismatch(format!(
            "policy is T={} x {} states, params T={} x {}",
            policy.horizon(),
            policy.states(),
            params.horizon,
            params.num_states()
        )));
    }
    seeds.par_iter().map(|&seed| simulate_one(policy, params, costs, queues, seed, sharing)).collect()
}

fn simulate_one(
    policy: &RandomizedPolicy,
    params: &SystemParams,
    costs: &CostModel,
    queues: usize,
    seed: u64,
    sharing: TauSharing,
) -> Result<SimReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (admit_budget, _) = integer_budgets(params, queues)?;
    let index = params.index();
    let initial = WeightedIndex::new(&params.m0).map_err(|e| Error::invalid("m0", e.to_string()))?;
    let mut occ: Vec<usize> = (0..queues).map(|_| initial.sample(&mut rng)).collect();

    let mut report = SimReport {
        seed,
        queues,
        index,
        counts: vec![0; index.len()],
        rejections: Vec::with_capacity(params.horizon),
        admitted: Vec::with_capacity(params.horizon),
        high_rate: Vec::with_capacity(params.horizon),
        stage_costs: Vec::with_capacity(params.horizon),
    };
    for t in 0..params.horizon {
        let act = apply_with_budgets(policy, &occ, t, params, &mut rng)?;
        let mut cost = 0.0;
        for (n, &s) in occ.iter().enumerate() {
            let (a, b) = (act.admits[n] as usize, act.rates[n] as usize);
            report.counts[index.flatten(t, s, a, b)] += 1;
            cost += costs.holding(s, b);
        }
        let admitted: usize = act.admits.iter().map(|&a| a as usize).sum();
        let rejections = admit_budget - admitted;
        cost += params.gamma * rejections as f64;
        report.admitted.push(admitted);
        report.high_rate.push(act.rates.iter().map(|&b| b as usize).sum());
        report.rejections.push(rejections);
        report.stage_costs.push(cost);

        let shared = (sharing == TauSharing::System).then(|| sample_tau(params.p, &mut rng));
        for (n, s) in occ.iter_mut().enumerate() {
            let (a, b) = (act.admits[n] as usize, act.rates[n] as usize);
            *s = match shared {
                Some(tau) => sample_transition_with_tau(*s, a, b, tau, params, &mut rng)?,
                None => sample_transition(*s, a, b, params, &mut rng)?,
            };
        }
    }
    Ok(report)
}

/// Distance between a simulated path and a relaxed solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LpComparison {
    /// `max_t TV(Y_hat(t), y(t))`.
    pub max_tv: f64,
    /// `|pi_A_hat(sim) - pi_A_hat(y)|`.
    pub pa_gap: f64,
    /// `|pi_H_hat(sim) - pi_H_hat(y)|`.
    pub ph_gap: f64,
}

pub fn compare_to_lp(report: &SimReport, y: &OccupationMeasure, params: &SystemParams) -> Result<LpComparison> {
    y.ensure_shape(params)?;
    if report.index != y.index() {
        return Err(Error::ShapeMismatch("report and measure differ in (T, K)".into()));
    }
    let emp = report.empirical_measure();
    let epoch = y.index().epoch_len();
    let max_tv = emp
        .as_slice()
        .chunks(epoch)
        .zip(y.as_slice().chunks(epoch))
        .map(|(e, r)| 0.5 * e.iter().zip(r).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let (ea, eh) = normalized_metrics(&emp, params);
    let (ra, rh) = normalized_metrics(y, params);
    Ok(LpComparison { max_tv, pa_gap: (ea - ra).abs(), ph_gap: (eh - rh).abs() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::compute_default_kernel;
    use crate::model::Scenario;
    use crate::policy::extract_policy;
    use proptest::prelude::*;

    fn small() -> SystemParams {
        SystemParams { horizon: 6, ..SystemParams::convergence(3, Scenario::Sjs) }
    }

    #[test]
    fn never_admit_from_empty_stays_empty() {
        let p = small();
        let c = CostModel::default_for(&p);
        let pi = RandomizedPolicy::constant(&p, [1.0, 0.0, 0.0, 0.0]).unwrap();
        let reports = simulate(&pi, &p, &c, 10, &[1, 2]).unwrap();
        for r in reports {
            for t in 0..p.horizon {
                assert_eq!(r.counts[p.index().flatten(t, 0, 0, 0)], 10);
                assert_eq!(r.rejections[t], 5);
                assert!((r.stage_costs[t] - 10.0 * c.holding(0, 0) - 5.0 * p.gamma).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn no_service_counts_admissions() {
        let p = SystemParams {
            b_low: 0.0,
            b_high: 0.0,
            alpha: 1.0,
            beta: 1.0,
            horizon: 5,
            ..SystemParams::convergence(8, Scenario::Cjs)
        };
        let c = CostModel::default_for(&p);
        let pi = RandomizedPolicy::constant(&p, [0.0, 0.0, 1.0, 0.0]).unwrap();
        let r = &simulate(&pi, &p, &c, 3, &[7]).unwrap()[0];
        for t in 0..p.horizon {
            assert_eq!(r.counts[p.index().flatten(t, t, 1, 0)], 3);
        }
    }

    #[test]
    fn identity_and_never_admit_comparisons_are_zero() {
        let p = small();
        let k = compute_default_kernel(&p).unwrap();
        let c = CostModel::default_for(&p);
        let y = OccupationMeasure::never_admit(&p, &k);
        let pi = extract_policy(&y, &p).unwrap();
        let r = &simulate(&pi, &p, &c, 4, &[3]).unwrap()[0];
        let cmp = compare_to_lp(r, &y, &p).unwrap();
        assert!(cmp.max_tv <= 1e-9 && cmp.pa_gap <= 1e-9 && cmp.ph_gap <= 1e-9);
        let busy = RandomizedPolicy::constant(&p, [0.0, 0.0, 0.0, 1.0]).unwrap();
        let r = &simulate(&busy, &p, &c, 4, &[3]).unwrap()[0];
        let cmp = compare_to_lp(r, &r.empirical_measure(), &p).unwrap();
        assert_eq!((cmp.max_tv, cmp.pa_gap, cmp.ph_gap), (0.0, 0.0, 0.0));
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        let p = small();
        let c = CostModel::default_for(&p);
        let pi = RandomizedPolicy::constant(&p, [0.25; 4]).unwrap();
        let a = simulate(&pi, &p, &c, 20, &[1, 2]).unwrap();
        let b = simulate(&pi, &p, &c, 20, &[1, 2]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].counts, a[1].counts);
    }

    #[test]
    fn per_queue_tau_is_a_different_path() {
        let p = small();
        let c = CostModel::default_for(&p);
        let pi = RandomizedPolicy::constant(&p, [0.25; 4]).unwrap();
        let a = simulate(&pi, &p, &c, 20, &[4]).unwrap();
        let b = simulate_with(&pi, &p, &c, 20, &[4], TauSharing::PerQueue).unwrap();
        assert_ne!(a[0].counts, b[0].counts);
        assert_eq!(b[0].counts.iter().sum::<u64>(), 20 * p.horizon as u64);
    }

    #[test]
    fn csv_outputs() {
        let p = small();
        let c = CostModel::default_for(&p);
        let pi = RandomizedPolicy::constant(&p, [0.25; 4]).unwrap();
        let r = &simulate(&pi, &p, &c, 4, &[0]).unwrap()[0];
        let mut buf = Vec::new();
        r.write_epochs_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("t,rejections,stage_cost"));
        assert_eq!(text.lines().count(), 1 + p.horizon);
        let mut buf = Vec::new();
        r.write_measure_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,s,a,b,y_hat\n"));
    }

    #[test]
    fn precondition_errors() {
        let p = small();
        let c = CostModel::default_for(&p);
        let pi = RandomizedPolicy::constant(&p, [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(simulate(&pi, &p, &c, 3, &[0]), Err(Error::NonIntegerBudget { .. })));
        let other = SystemParams { horizon: 2, ..p.clone() };
        assert!(matches!(simulate(&pi, &other, &c, 4, &[0]), Err(Error::ShapeMismatch(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn sample_paths_respect_budgets(seed in any::<u64>(), w in proptest::array::uniform4(0.01f64..1.0), m in 0usize..4) {
            let mut p = small();
            p.m0 = vec![0.0; 4];
            p.m0[m] = 1.0;
            let c = CostModel::default_for(&p);
            let total: f64 = w.iter().sum();
            let pi = RandomizedPolicy::constant(&p, w.map(|v| v / total)).unwrap();
            let r = &simulate(&pi, &p, &c, 6, &[seed]).unwrap()[0];
            let emp = r.empirical_measure();
            for t in 0..p.horizon {
                prop_assert!(r.admitted[t] <= 3 && r.high_rate[t] <= 3);
                prop_assert_eq!(r.rejections[t] + r.admitted[t], 3);
                prop_assert_eq!(r.counts[p.index().flatten(t, 3, 1, 0)] + r.counts[p.index().flatten(t, 3, 1, 1)], 0);
                prop_assert_eq!(r.counts[t * 16..(t + 1) * 16].iter().sum::<u64>(), 6);
                prop_assert!((emp.epoch_mass(t) - 1.0).abs() < 1e-15);
            }
        }
    }
}
