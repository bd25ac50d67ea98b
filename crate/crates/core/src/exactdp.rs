//! Brute-force finite-horizon dynamic program over the joint state of `N`
//! distinguishable queues with hard per-epoch budgets. Only meant for tiny
//! instances, where it is the exact oracle the relaxed LP must lower-bound.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::TransitionKernel;
use crate::lp::{build_lp, solve_exact};
use crate::model::{integer_budgets, tol, CostModel, SystemParams};

/// Largest joint state space accepted, `(K + 1)^N`.
pub const MAX_JOINT_STATES: usize = 10_000;
/// Largest number of budget-feasible joint actions in any state.
pub const MAX_JOINT_ACTIONS: usize = 10_000;

/// Occupancy of every queue.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JointState {
    pub occupancies: Vec<usize>,
}

/// Admit and rate decisions as bitmasks, bit `n` for queue `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct JointAction {
    pub admits: u32,
    pub rates: u32,
}

impl JointAction {
    pub fn admit(&self, n: usize) -> usize {
        ((self.admits >> n) & 1) as usize
    }

    pub fn rate(&self, n: usize) -> usize {
        ((self.rates >> n) & 1) as usize
    }

    pub fn num_admits(&self) -> usize {
        self.admits.count_ones() as usize
    }

    pub fn num_high(&self) -> usize {
        self.rates.count_ones() as usize
    }
}

/// Mixed-radix indexing of joint states, queue 0 least significant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointSpace {
    pub queues: usize,
    pub states: usize,
}

impl JointSpace {
    pub fn len(&self) -> usize {
        self.states.pow(self.queues as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self, state: &JointState) -> Result<usize> {
        if state.occupancies.len() != self.queues {
            return Err(Error::ShapeMismatch(format!(
                "joint state has {} queues, expected {}",
                state.occupancies.len(),
                self.queues
            )));
        }
        let mut idx = 0;
        for &s in state.occupancies.iter().rev() {
            if s >= self.states {
                return Err(Error::StateOutOfRange { state: s, max: self.states - 1 });
            }
            idx = idx * self.states + s;
        }
        Ok(idx)
    }

    pub fn decode(&self, mut idx: usize) -> JointState {
        let mut occupancies = Vec::with_capacity(self.queues);
        for _ in 0..self.queues {
            occupancies.push(idx % self.states);
            idx /= self.states;
        }
        JointState { occupancies }
    }
}

/// Optimal value and deterministic Markov policy of the joint problem.
#[derive(Debug, Clone)]
pub struct DpSolution {
    pub space: JointSpace,
    /// Minimal expected total cost over all queues and epochs.
    pub value: f64,
    /// `values[t][x]`: optimal cost-to-go from joint state `x` at epoch `t`.
    pub values: Vec<Vec<f64>>,
    /// `policy[t][x]`: a minimizing action.
    pub policy: Vec<Vec<JointAction>>,
}

impl DpSolution {
    pub fn per_queue_value(&self) -> f64 {
        self.value / self.space.queues as f64
    }

    pub fn action(&self, t: usize, state: &JointState) -> Result<JointAction> {
        let row = self
            .policy
            .get(t)
            .ok_or_else(|| Error::Precondition(format!("epoch {t} outside horizon {}", self.policy.len())))?;
        Ok(row[self.space.encode(state)?])
    }
}

/// All budget-feasible actions at a joint state, in a fixed order.
pub fn feasible_actions(
    state: &JointState,
    params: &SystemParams,
    admit_budget: usize,
    rate_budget: usize,
) -> Vec<JointAction> {
    let n = state.occupancies.len();
    let admissible: u32 =
        state.occupancies.iter().enumerate().filter(|(_, &s)| s < params.buffer).fold(0, |m, (i, _)| m | (1 << i));
    let all = 1u32 << n;
    let admit_masks: Vec<u32> =
        (0..all).filter(|m| m & !admissible == 0 && m.count_ones() as usize <= admit_budget).collect();
    let rate_masks: Vec<u32> = (0..all).filter(|m| m.count_ones() as usize <= rate_budget).collect();
    admit_masks.iter().flat_map(|&admits| rate_masks.iter().map(move |&rates| JointAction { admits, rates })).collect()
}

/// Joint next-state distribution: the product of per-queue kernel rows.
pub fn joint_transition_row(
    kernel: &TransitionKernel,
    space: JointSpace,
    state: &JointState,
    action: JointAction,
) -> Vec<f64> {
    let mut row = vec![1.0];
    for (n, &s) in state.occupancies.iter().enumerate() {
        let r = kernel.row(s, action.admit(n), action.rate(n));
        let mut next = vec![0.0; row.len() * space.states];
        for (sp, p) in r.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                next[i + sp * row.len()] = v * p;
            }
        }
        row = next;
    }
    row
}

fn stage_cost(state: &JointState, action: JointAction, costs: &CostModel, gamma: f64) -> f64 {
    state
        .occupancies
        .iter()
        .enumerate()
        .map(|(n, &s)| costs.holding(s, action.rate(n)) + if action.admit(n) == 0 { gamma } else { 0.0 })
        .sum()
}

/// `E[V(x')]` under the product transition, contracting one queue axis at a
/// time. `scratch` must hold at least `V.len()` entries.
fn expected_next(
    kernel: &TransitionKernel,
    state: &JointState,
    action: JointAction,
    next: &[f64],
    scratch: &mut Vec<f64>,
) -> f64 {
    let states = kernel.states();
    scratch.clear();
    scratch.extend_from_slice(next);
    let mut len = next.len();
    for n in (0..state.occupancies.len()).rev() {
        let row = kernel.row(state.occupancies[n], action.admit(n), action.rate(n));
        let stride = len / states;
        for low in 0..stride {
            let mut acc = 0.0;
            for (sp, p) in row.iter().enumerate() {
                acc += p * scratch[low + stride * sp];
            }
            scratch[low] = acc;
        }
        len = stride;
    }
    scratch[0]
}

/// Exact backward induction for `n` queues with budgets `alpha N` and
/// `beta N` enforced at every epoch. Initial states are i.i.d. from `m0`.
pub fn dp_solve(params: &SystemParams, kernel: &TransitionKernel, costs: &CostModel, n: usize) -> Result<DpSolution> {
    crate::model::validate(params)?;
    costs.validate(params)?;
    if kernel.states() != params.num_states() {
        return Err(Error::ShapeMismatch(format!(
            "kernel has {} states, params need {}",
            kernel.states(),
            params.num_states()
        )));
    }
    let (admit_budget, rate_budget) = integer_budgets(params, n)?;
    let states = params.num_states();
    let joint = (states as f64).powi(n as i32);
    if n > 31 || joint > MAX_JOINT_STATES as f64 {
        return Err(Error::SizeLimit(format!("(K+1)^N = {states}^{n} exceeds {MAX_JOINT_STATES}")));
    }
    let space = JointSpace { queues: n, states };
    let widest = feasible_actions(&JointState { occupancies: vec![0; n] }, params, admit_budget, rate_budget).len();
    if widest > MAX_JOINT_ACTIONS {
        return Err(Error::SizeLimit(format!("{widest} joint actions exceed {MAX_JOINT_ACTIONS}")));
    }

    let mut values = vec![vec![0.0; space.len()]; params.horizon + 1];
    let mut policy = vec![vec![JointAction::default(); space.len()]; params.horizon];
    for t in (0..params.horizon).rev() {
        let (head, tail) = values.split_at_mut(t + 1);
        let next = &tail[0];
        let best: Vec<(f64, JointAction)> = (0..space.len())
            .into_par_iter()
            .map_init(Vec::new, |scratch, x| {
                let state = space.decode(x);
                let mut best = (f64::INFINITY, JointAction::default());
                for action in feasible_actions(&state, params, admit_budget, rate_budget) {
                    let q = stage_cost(&state, action, costs, params.gamma)
                        + expected_next(kernel, &state, action, next, scratch);
                    if q < best.0 {
                        best = (q, action);
                    }
                }
                best
            })
            .collect();
        for (x, (v, a)) in best.into_iter().enumerate() {
            head[t][x] = v;
            policy[t][x] = a;
        }
    }
    values.truncate(params.horizon);

    let value = if params.horizon == 0 {
        0.0
    } else {
        (0..space.len())
            .map(|x| {
                let w: f64 = space.decode(x).occupancies.iter().map(|&s| params.m0[s]).product();
                w * values[0][x]
            })
            .sum()
    };
    Ok(DpSolution { space, value, values, policy })
}

/// DP value per queue against the relaxed LP optimum.
#[derive(Debug, Clone, Serialize)]
pub struct RelaxationGap {
    #[serde(rename = "N")]
    pub n: usize,
    pub dp_value: f64,
    pub dp_per_queue: f64,
    pub lp_objective: f64,
    /// `dp_per_queue - lp_objective`; nonnegative up to solver tolerance.
    pub gap: f64,
}

/// Preferred KKT tolerance for the bound LP, so that the LP objective is
/// accurate to well below a `1e-8` comparison slack.
pub const BOUND_KKT: f64 = 1e-9;

/// Solves both problems. The LP is solved unregularized and KKT-certified
/// to [`BOUND_KKT`], or to `tol::KKT` when multipliers of order `gamma` put
/// the tighter absolute certificate out of reach.
pub fn relaxation_gap(
    params: &SystemParams,
    kernel: &TransitionKernel,
    costs: &CostModel,
    n: usize,
) -> Result<RelaxationGap> {
    let dp = dp_solve(params, kernel, costs, n)?;
    let instance = build_lp(params, kernel, costs);
    let lp = solve_exact(&instance, 0.0, BOUND_KKT).or_else(|_| solve_exact(&instance, 0.0, tol::KKT))?;
    let dp_per_queue = dp.per_queue_value();
    Ok(RelaxationGap {
        n,
        dp_value: dp.value,
        dp_per_queue,
        lp_objective: lp.objective,
        gap: dp_per_queue - lp.objective,
    })
}
