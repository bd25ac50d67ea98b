//! Relaxed occupation-measure LP (budgets enforced in expectation) and its
//! exact solution, optionally with an `l2` regularizer `Gamma * ||y||^2`.

mod ipm;

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::TransitionKernel;
use crate::model::{tol, CostModel, FlatIndex, SystemParams};
use crate::saddle::Multipliers;

use ipm::{BandedQp, IpmOptions};

/// `y[t][s][a][b]`: expected fraction of queues in state `s` taking `(a, b)`
/// at epoch `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationMeasure {
    index: FlatIndex,
    values: Vec<f64>,
}

impl OccupationMeasure {
    pub fn zeros(horizon: usize, states: usize) -> Self {
        let index = FlatIndex::new(horizon, states);
        OccupationMeasure { index, values: vec![0.0; index.len()] }
    }

    pub fn from_vec(horizon: usize, states: usize, values: Vec<f64>) -> Result<Self> {
        let index = FlatIndex::new(horizon, states);
        if values.len() != index.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} entries for T={horizon}, K+1={states}, got {}",
                index.len(),
                values.len()
            )));
        }
        Ok(OccupationMeasure { index, values })
    }

    /// Keeps every queue at `(a = 0, b = 0)` and propagates `m0` through the
    /// kernel. Feasible for every parameter set.
    pub fn never_admit(params: &SystemParams, kernel: &TransitionKernel) -> Self {
        let states = params.num_states();
        let mut y = Self::zeros(params.horizon, states);
        let mut mass = params.m0.clone();
        for t in 0..params.horizon {
            for (s, m) in mass.iter().enumerate() {
                y.set(t, s, 0, 0, *m);
            }
            let mut next = vec![0.0; states];
            for (s, m) in mass.iter().enumerate() {
                for (n, p) in next.iter_mut().zip(kernel.row(s, 0, 0)) {
                    *n += m * p;
                }
            }
            mass = next;
        }
        y
    }

    pub fn index(&self) -> FlatIndex {
        self.index
    }

    pub fn horizon(&self) -> usize {
        self.index.horizon
    }

    pub fn states(&self) -> usize {
        self.index.states
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize, a: usize, b: usize) -> f64 {
        self.values[self.index.flatten(t, s, a, b)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, s: usize, a: usize, b: usize, v: f64) {
        let i = self.index.flatten(t, s, a, b);
        self.values[i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `m_s(t) = sum_{a,b} y[t][s][a][b]`.
    pub fn state_mass(&self, t: usize, s: usize) -> f64 {
        let i = self.index.flatten(t, s, 0, 0);
        self.values[i..i + 4].iter().sum()
    }

    pub fn epoch_mass(&self, t: usize) -> f64 {
        let n = self.index.epoch_len();
        self.values[t * n..(t + 1) * n].iter().sum()
    }

    pub fn frobenius_distance(&self, other: &OccupationMeasure) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &OccupationMeasure) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn ensure_shape(&self, params: &SystemParams) -> Result<()> {
        if self.horizon() != params.horizon || self.states() != params.num_states() {
            return Err(Error::ShapeMismatch(format!(
                "measure is T={} x K+1={}, params are T={} x K+1={}",
                self.horizon(),
                self.states(),
                params.horizon,
                params.num_states()
            )));
        }
        Ok(())
    }

    /// Writes `t,s,a,b,<value_name>` rows in flat-index order.
    pub fn write_csv<W: Write>(&self, mut w: W, value_name: &str) -> std::io::Result<()> {
        writeln!(w, "t,s,a,b,{value_name}")?;
        for (i, v) in self.values.iter().enumerate() {
            let (t, s, a, b) = self.index.unflatten(i);
            writeln!(w, "{t},{s},{a},{b},{v}")?;
        }
        Ok(())
    }
}

/// `(pi_A(t), pi_H(t))`: admitting mass over non-full states and high-rate mass.
pub fn budget_probs(y: &OccupationMeasure, t: usize) -> (f64, f64) {
    let k = y.states() - 1;
    let mut pi_a = 0.0;
    let mut pi_h = 0.0;
    for s in 0..=k {
        for a in 0..2 {
            pi_h += y.get(t, s, a, 1);
        }
        if s < k {
            pi_a += y.get(t, s, 1, 0) + y.get(t, s, 1, 1);
        }
    }
    (pi_a, pi_h)
}

/// Time-averaged budget use normalized by the budgets, `(pi_A_hat, pi_H_hat)`.
pub fn normalized_metrics(y: &OccupationMeasure, params: &SystemParams) -> (f64, f64) {
    let (sa, sh) = (0..y.horizon()).fold((0.0, 0.0), |(sa, sh), t| {
        let (a, h) = budget_probs(y, t);
        (sa + a, sh + h)
    });
    let t = y.horizon() as f64;
    (sa / (params.alpha * t), sh / (params.beta * t))
}

pub type SparseRow = Vec<(usize, f64)>;

/// What an equality row of [`LpInstance`] encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqRow {
    /// `sum_{a,b} y(t+1, s) - sum_{s',a,b} y(t, s') P[s'][s][a][b] = 0`.
    Flow { t: usize, s: usize },
    /// `sum_{a,b} y(0, s) = m0_s`.
    Initial { s: usize },
    /// `y(t, K, 1, b) = 0`.
    FullBuffer { t: usize, b: usize },
}

/// What an inequality row of [`LpInstance`] encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InRow {
    /// `pi_A(t) <= alpha`.
    Admission { t: usize },
    /// `pi_H(t) <= beta`.
    HighRate { t: usize },
}

/// The relaxed LP over flat `(t, s, a, b)` coordinates.
///
/// The objective is `c'y + offset` with `c = C_s(s) + C_p(b) - gamma*1[a=1, s<K]`
/// and `offset = gamma * T`, i.e. `sum_t [sum (C_s + C_p) y + gamma (1 - pi_A(t))]`.
#[derive(Debug, Clone)]
pub struct LpInstance {
    pub index: FlatIndex,
    pub objective: Vec<f64>,
    pub objective_offset: f64,
    pub eq_rows: Vec<SparseRow>,
    pub eq_rhs: Vec<f64>,
    pub eq_kinds: Vec<EqRow>,
    pub in_rows: Vec<SparseRow>,
    pub in_rhs: Vec<f64>,
    pub in_kinds: Vec<InRow>,
    /// Never-admit measure, used as the interior-point starting point.
    pub warm_start: OccupationMeasure,
}

fn mul_rows(rows: &[SparseRow], x: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum()).collect()
}

impl LpInstance {
    pub fn num_vars(&self) -> usize {
        self.index.len()
    }

    /// `c'y + offset`.
    pub fn objective_value(&self, y: &OccupationMeasure) -> f64 {
        self.objective.iter().zip(y.as_slice()).map(|(c, v)| c * v).sum::<f64>() + self.objective_offset
    }

    /// `A_eq y - b_eq`.
    pub fn eq_residual(&self, y: &OccupationMeasure) -> Vec<f64> {
        mul_rows(&self.eq_rows, y.as_slice()).into_iter().zip(&self.eq_rhs).map(|(a, b)| a - b).collect()
    }

    /// `A_in y - b_in` (feasible where `<= 0`).
    pub fn in_residual(&self, y: &OccupationMeasure) -> Vec<f64> {
        mul_rows(&self.in_rows, y.as_slice()).into_iter().zip(&self.in_rhs).map(|(a, b)| a - b).collect()
    }

    /// Largest violation of any constraint, including `y >= 0`.
    pub fn primal_infeasibility(&self, y: &OccupationMeasure) -> f64 {
        let eq = self.eq_residual(y).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let ineq = self.in_residual(y).iter().fold(0.0f64, |m, v| m.max(*v));
        let neg = y.as_slice().iter().fold(0.0f64, |m, v| m.max(-v));
        eq.max(ineq).max(neg)
    }

    fn eq_multiplier_vec(&self, mult: &Multipliers) -> Vec<f64> {
        self.eq_kinds
            .iter()
            .map(|k| match *k {
                EqRow::Flow { t, s } => mult.mu3[t][s],
                EqRow::Initial { s } => mult.mu1[s],
                EqRow::FullBuffer { t, b } => mult.mu2[t][b],
            })
            .collect()
    }

    fn in_multiplier_vec(&self, mult: &Multipliers) -> Vec<f64> {
        self.in_kinds
            .iter()
            .map(|k| match *k {
                InRow::Admission { t } => mult.lambda1[t],
                InRow::HighRate { t } => mult.lambda2[t],
            })
            .collect()
    }

    /// `c + 2 Gamma y + A_eq' mu + A_in' lambda - lambda3`.
    pub fn stationarity(&self, y: &OccupationMeasure, mult: &Multipliers, gamma_reg: f64) -> Vec<f64> {
        let mut g: Vec<f64> = self
            .objective
            .iter()
            .zip(y.as_slice())
            .zip(&mult.lambda3)
            .map(|((c, v), l3)| c + 2.0 * gamma_reg * v - l3)
            .collect();
        for (row, m) in self.eq_rows.iter().zip(self.eq_multiplier_vec(mult)) {
            for &(j, v) in row {
                g[j] += v * m;
            }
        }
        for (row, l) in self.in_rows.iter().zip(self.in_multiplier_vec(mult)) {
            for &(j, v) in row {
                g[j] += v * l;
            }
        }
        g
    }

    /// KKT residuals of `(y, multipliers)` for the regularized problem.
    pub fn kkt_report(&self, y: &OccupationMeasure, mult: &Multipliers, gamma_reg: f64) -> KktReport {
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let stationarity_residual = inf(&self.stationarity(y, mult, gamma_reg));
        let primal_feasibility_residual = self.primal_infeasibility(y);
        let lambdas = mult.lambda1.iter().chain(&mult.lambda2).chain(&mult.lambda3);
        // Adding 0.0 turns a -0.0 from `max` into +0.0.
        let dual_feasibility_residual = lambdas.fold(0.0f64, |m, l| m.max(-l)) + 0.0;
        let slack = self.in_residual(y);
        let ineq_comp = self.in_multiplier_vec(mult).iter().zip(&slack).fold(0.0f64, |m, (l, r)| m.max((l * r).abs()));
        let nonneg_comp = mult.lambda3.iter().zip(y.as_slice()).fold(0.0f64, |m, (l, v)| m.max((l * v).abs()));
        KktReport {
            stationarity_residual,
            primal_feasibility_residual,
            dual_feasibility_residual,
            complementarity_residual: ineq_comp.max(nonneg_comp),
        }
    }
}

/// Assembles the relaxed LP for one queue population.
pub fn build_lp(params: &SystemParams, kernel: &TransitionKernel, costs: &CostModel) -> LpInstance {
    let (horizon, states, k) = (params.horizon, params.num_states(), params.buffer);
    let index = params.index();
    let mut objective = vec![0.0; index.len()];
    for (i, c) in objective.iter_mut().enumerate() {
        let (_, s, a, b) = index.unflatten(i);
        *c = costs.holding(s, b) - if a == 1 && s < k { params.gamma } else { 0.0 };
    }

    let mut eq_rows = Vec::new();
    let mut eq_rhs = Vec::new();
    let mut eq_kinds = Vec::new();
    for t in 0..horizon.saturating_sub(1) {
        for s in 0..states {
            let mut row: SparseRow = (0..4).map(|ab| (index.flatten(t + 1, s, ab / 2, ab % 2), 1.0)).collect();
            for sp in 0..states {
                for a in 0..2 {
                    for b in 0..2 {
                        let p = kernel.prob(sp, s, a, b);
                        if p != 0.0 {
                            row.push((index.flatten(t, sp, a, b), -p));
                        }
                    }
                }
            }
            eq_rows.push(row);
            eq_rhs.push(0.0);
            eq_kinds.push(EqRow::Flow { t, s });
        }
    }
    for s in 0..states {
        eq_rows.push((0..4).map(|ab| (index.flatten(0, s, ab / 2, ab % 2), 1.0)).collect());
        eq_rhs.push(params.m0[s]);
        eq_kinds.push(EqRow::Initial { s });
    }
    for t in 0..horizon {
        for b in 0..2 {
            eq_rows.push(vec![(index.flatten(t, k, 1, b), 1.0)]);
            eq_rhs.push(0.0);
            eq_kinds.push(EqRow::FullBuffer { t, b });
        }
    }

    let mut in_rows = Vec::new();
    let mut in_rhs = Vec::new();
    let mut in_kinds = Vec::new();
    for t in 0..horizon {
        let admit: SparseRow =
            (0..k).flat_map(|s| (0..2).map(move |b| (s, b))).map(|(s, b)| (index.flatten(t, s, 1, b), 1.0)).collect();
        in_rows.push(admit);
        in_rhs.push(params.alpha);
        in_kinds.push(InRow::Admission { t });
        let high: SparseRow = (0..states)
            .flat_map(|s| (0..2).map(move |a| (s, a)))
            .map(|(s, a)| (index.flatten(t, s, a, 1), 1.0))
            .collect();
        in_rows.push(high);
        in_rhs.push(params.beta);
        in_kinds.push(InRow::HighRate { t });
    }

    LpInstance {
        index,
        objective,
        objective_offset: params.gamma * horizon as f64,
        eq_rows,
        eq_rhs,
        eq_kinds,
        in_rows,
        in_rhs,
        in_kinds,
        warm_start: OccupationMeasure::never_admit(params, kernel),
    }
}

/// Four KKT residuals, each an ∞-norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktReport {
    pub stationarity_residual: f64,
    pub primal_feasibility_residual: f64,
    pub dual_feasibility_residual: f64,
    pub complementarity_residual: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity_residual
            .max(self.primal_feasibility_residual)
            .max(self.dual_feasibility_residual)
            .max(self.complementarity_residual)
    }

    pub fn certified(&self, tol: f64) -> bool {
        [
            self.stationarity_residual,
            self.primal_feasibility_residual,
            self.dual_feasibility_residual,
            self.complementarity_residual,
        ]
        .iter()
        .all(|r| r.is_finite() && *r <= tol)
    }
}

impl fmt::Display for KktReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stationarity={:.3e} primal={:.3e} dual={:.3e} complementarity={:.3e}",
            self.stationarity_residual,
            self.primal_feasibility_residual,
            self.dual_feasibility_residual,
            self.complementarity_residual
        )
    }
}

/// Output of [`solve_exact`].
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub y: OccupationMeasure,
    pub multipliers: Multipliers,
    pub kkt: KktReport,
    /// Unregularized cost `c'y + gamma*T`.
    pub objective: f64,
    /// `objective + Gamma ||y||^2`.
    pub regularized_objective: f64,
    pub iterations: usize,
}

const MAX_IPM_ITERS: usize = 200;

/// Solves the instance (plus `Gamma ||y||^2` when `gamma_reg > 0`) to KKT
/// residuals at most `tol`.
///
/// `y(t, K, 1, b) = 0` rows are handled by dropping those coordinates; their
/// multipliers are recovered afterwards from stationarity.
pub fn solve_exact(instance: &LpInstance, gamma_reg: f64, tol: f64) -> Result<LpSolution> {
    if !(gamma_reg.is_finite() && gamma_reg >= 0.0) {
        return Err(Error::invalid("Gamma", format!("{gamma_reg} must be nonnegative")));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::invalid("tol", "tolerance must be positive"));
    }
    let index = instance.index;
    let n = instance.num_vars();

    // Coordinates pinned to zero by single-entry homogeneous rows.
    let mut fixed = vec![false; n];
    for (row, rhs) in instance.eq_rows.iter().zip(&instance.eq_rhs) {
        if row.len() == 1 && *rhs == 0.0 && row[0].1 != 0.0 {
            fixed[row[0].0] = true;
        }
    }
    let kept_eq: Vec<usize> = (0..instance.eq_rows.len())
        .filter(|&i| !(instance.eq_rows[i].len() == 1 && instance.eq_rhs[i] == 0.0 && fixed[instance.eq_rows[i][0].0]))
        .collect();

    // Standard-form rows: kept equalities then inequalities (with slacks),
    // grouped by the latest epoch they touch.
    let row_epoch =
        |row: &SparseRow| row.iter().filter(|(j, _)| !fixed[*j]).map(|&(j, _)| index.unflatten(j).0).max().unwrap_or(0);
    let mut rows: Vec<(usize, RowRef)> =
        kept_eq.iter().map(|&i| (row_epoch(&instance.eq_rows[i]), RowRef::Eq(i))).collect();
    rows.extend((0..instance.in_rows.len()).map(|i| (row_epoch(&instance.in_rows[i]), RowRef::In(i))));
    rows.sort_by_key(|(e, _)| *e);
    let mut block_starts = vec![0];
    for (pos, (e, _)) in rows.iter().enumerate() {
        while block_starts.len() <= *e {
            block_starts.push(pos);
        }
    }
    block_starts.push(rows.len());
    // Epochs without rows would produce empty blocks; they are harmless.

    let var_map: Vec<Option<usize>> = {
        let mut next = 0;
        fixed
            .iter()
            .map(|f| {
                if *f {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect()
    };
    let n_kept = var_map.iter().flatten().count();
    let n_slack = instance.in_rows.len();
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_kept + n_slack];
    let mut b = vec![0.0; rows.len()];
    let mut std_of_in = vec![0; n_slack];
    let mut std_of_eq = vec![usize::MAX; instance.eq_rows.len()];
    for (r, (_, which)) in rows.iter().enumerate() {
        let (row, rhs) = match *which {
            RowRef::Eq(i) => {
                std_of_eq[i] = r;
                (&instance.eq_rows[i], instance.eq_rhs[i])
            }
            RowRef::In(i) => {
                std_of_in[i] = r;
                cols[n_kept + i].push((r, 1.0));
                (&instance.in_rows[i], instance.in_rhs[i])
            }
        };
        b[r] = rhs;
        for &(j, v) in row {
            if let Some(col) = var_map[j] {
                cols[col].push((r, v));
            }
        }
    }
    let mut c = vec![0.0; n_kept + n_slack];
    let mut q = vec![0.0; n_kept + n_slack];
    for (j, col) in kept(&var_map) {
        c[col] = instance.objective[j];
        q[col] = 2.0 * gamma_reg;
    }

    // Start from the never-admit measure, pushed into the interior.
    let warm = instance.warm_start.as_slice();
    let shift = 1.0 / index.epoch_len() as f64;
    let mut x0 = vec![0.0; n_kept + n_slack];
    let mut y0 = vec![0.0; n];
    for (j, col) in kept(&var_map) {
        x0[col] = warm[j].max(0.0) + shift;
        y0[j] = x0[col];
    }
    for (i, row) in instance.in_rows.iter().enumerate() {
        let used: f64 = row.iter().map(|&(j, v)| v * y0[j]).sum();
        x0[n_kept + i] = (instance.in_rhs[i] - used).max(0.0) + shift;
    }

    let qp = BandedQp { block_starts, cols, c, q, b };
    let pt = qp.solve(x0, &IpmOptions { max_iter: MAX_IPM_ITERS, tol: tol * 1e-3 })?;

    let mut y = OccupationMeasure::zeros(index.horizon, index.states);
    let mut mult = Multipliers::zeros(index.horizon, index.states);
    for (j, col) in kept(&var_map) {
        y.as_mut_slice()[j] = pt.x[col];
        mult.lambda3[j] = pt.z[col];
    }
    for (i, kind) in instance.in_kinds.iter().enumerate() {
        let lam = (-pt.w[std_of_in[i]]).max(0.0);
        match *kind {
            InRow::Admission { t } => mult.lambda1[t] = lam,
            InRow::HighRate { t } => mult.lambda2[t] = lam,
        }
    }
    for (i, kind) in instance.eq_kinds.iter().enumerate() {
        if std_of_eq[i] == usize::MAX {
            continue;
        }
        let mu = -pt.w[std_of_eq[i]];
        match *kind {
            EqRow::Flow { t, s } => mult.mu3[t][s] = mu,
            EqRow::Initial { s } => mult.mu1[s] = mu,
            EqRow::FullBuffer { t, b } => mult.mu2[t][b] = mu,
        }
    }
    // Multipliers of the eliminated rows: whatever makes their coordinate stationary.
    let g = instance.stationarity(&y, &mult, gamma_reg);
    for (i, kind) in instance.eq_kinds.iter().enumerate() {
        if let (EqRow::FullBuffer { t, b }, true) = (*kind, std_of_eq[i] == usize::MAX) {
            let j = instance.eq_rows[i][0].0;
            mult.mu2[t][b] = -g[j] / instance.eq_rows[i][0].1;
        }
    }

    let kkt = instance.kkt_report(&y, &mult, gamma_reg);
    if !kkt.certified(tol) {
        return Err(Error::IterationLimit { iterations: pt.iterations, report: kkt });
    }
    let objective = instance.objective_value(&y);
    Ok(LpSolution {
        regularized_objective: objective + gamma_reg * y.squared_norm(),
        objective,
        y,
        multipliers: mult,
        kkt,
        iterations: pt.iterations,
    })
}

#[derive(Debug, Clone, Copy)]
enum RowRef {
    Eq(usize),
    In(usize),
}

/// `(variable, column)` pairs for variables kept in the reduced problem.
fn kept(var_map: &[Option<usize>]) -> impl Iterator<Item = (usize, usize)> + '_ {
    var_map.iter().enumerate().filter_map(|(j, col)| col.map(|c| (j, c)))
}

/// Convenience: build and solve with the default kernel tolerance.
pub fn solve_params(
    params: &SystemParams,
    kernel: &TransitionKernel,
    costs: &CostModel,
    gamma_reg: f64,
) -> Result<LpSolution> {
    solve_exact(&build_lp(params, kernel, costs), gamma_reg, tol::KKT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::compute_default_kernel;
    use crate::model::Scenario;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(params: &SystemParams) -> (TransitionKernel, CostModel) {
        (compute_default_kernel(params).unwrap(), CostModel::default_for(params))
    }

    /// Propagates a random Markov policy through the kernel, scaling down
    /// admission and high-rate probabilities per epoch until both budgets hold.
    fn random_feasible<R: Rng>(params: &SystemParams, kernel: &TransitionKernel, rng: &mut R) -> OccupationMeasure {
        let (states, k) = (params.num_states(), params.buffer);
        let mut y = OccupationMeasure::zeros(params.horizon, states);
        let mut mass = params.m0.clone();
        for t in 0..params.horizon {
            let mut rows: Vec<[f64; 4]> = (0..states)
                .map(|s| {
                    let mut w: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>());
                    if s == k {
                        w[2] = 0.0;
                        w[3] = 0.0;
                    }
                    let total: f64 = w.iter().sum();
                    w.map(|v| v / total)
                })
                .collect();
            let pi_a: f64 = (0..states).map(|s| mass[s] * (rows[s][2] + rows[s][3])).sum();
            if pi_a > params.alpha {
                let f = params.alpha / pi_a;
                for r in rows.iter_mut() {
                    for b in 0..2 {
                        let moved = r[2 + b] * (1.0 - f);
                        r[2 + b] -= moved;
                        r[b] += moved;
                    }
                }
            }
            let pi_h: f64 = (0..states).map(|s| mass[s] * (rows[s][1] + rows[s][3])).sum();
            if pi_h > params.beta {
                let g = params.beta / pi_h;
                for r in rows.iter_mut() {
                    for a in 0..2 {
                        let moved = r[2 * a + 1] * (1.0 - g);
                        r[2 * a + 1] -= moved;
                        r[2 * a] += moved;
                    }
                }
            }
            let mut next = vec![0.0; states];
            for s in 0..states {
                for (ab, w) in rows[s].iter().enumerate() {
                    let v = mass[s] * w;
                    y.set(t, s, ab / 2, ab % 2, v);
                    for (n, p) in next.iter_mut().zip(kernel.row(s, ab / 2, ab % 2)) {
                        *n += v * p;
                    }
                }
            }
            mass = next;
        }
        y
    }

    #[test]
    fn tiny_instance_counts() {
        let p = SystemParams { horizon: 2, ..SystemParams::convergence(1, Scenario::Cjs) };
        let (k, c) = setup(&p);
        let lp = build_lp(&p, &k, &c);
        assert_eq!(lp.num_vars(), 16);
        let count = |f: fn(&EqRow) -> bool| lp.eq_kinds.iter().filter(|k| f(k)).count();
        assert_eq!(count(|k| matches!(k, EqRow::Flow { .. })), 2);
        assert_eq!(count(|k| matches!(k, EqRow::Initial { .. })), 2);
        assert_eq!(count(|k| matches!(k, EqRow::FullBuffer { .. })), 4);
        assert_eq!(lp.in_rows.len(), 4);
    }

    #[test]
    fn never_admit_is_feasible_and_mass_errors_show() {
        let p = SystemParams::policy_behavior();
        let (k, c) = setup(&p);
        let lp = build_lp(&p, &k, &c);
        let y = OccupationMeasure::never_admit(&p, &k);
        assert!(lp.primal_infeasibility(&y) < 1e-15);
        assert_eq!(y.as_slice().iter().filter(|v| **v != 0.0).count(), p.horizon);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bad = y.clone();
        bad.as_mut_slice().iter_mut().for_each(|v| *v = rng.random::<f64>() * 0.01);
        let res = lp.eq_residual(&bad);
        assert!(res.iter().any(|r| r.abs() > 1e-3));
    }

    #[test]
    fn budget_probs_examples() {
        let mut y = OccupationMeasure::zeros(1, 3);
        y.set(0, 0, 0, 0, 1.0);
        assert_eq!(budget_probs(&y, 0), (0.0, 0.0));
        let mut y = OccupationMeasure::zeros(1, 3);
        y.set(0, 0, 1, 1, 1.0);
        assert_eq!(budget_probs(&y, 0), (1.0, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut y = OccupationMeasure::zeros(2, 4);
        y.as_mut_slice().iter_mut().for_each(|v| *v = rng.random::<f64>());
        for t in 0..2 {
            let mass = y.epoch_mass(t);
            let epoch: Vec<f64> = (0..16).map(|i| y.as_slice()[t * 16 + i] / mass).collect();
            let z = OccupationMeasure::from_vec(1, 4, epoch.clone()).unwrap();
            let (pa, ph) = budget_probs(&z, 0);
            let mut oracle_a = 0.0;
            let mut oracle_h = 0.0;
            for (i, v) in epoch.iter().enumerate() {
                let (s, a, b) = (i / 4, (i / 2) % 2, i % 2);
                if a == 1 && s < 3 {
                    oracle_a += v;
                }
                if b == 1 {
                    oracle_h += v;
                }
            }
            assert!((pa - oracle_a).abs() < 1e-15 && (ph - oracle_h).abs() < 1e-15);
            assert!(pa <= 1.0 && pa + z.get(0, 3, 1, 0) + z.get(0, 3, 1, 1) <= 1.0 + 1e-15);
        }
    }

    #[test]
    fn normalized_metrics_examples() {
        let p = SystemParams::convergence(2, Scenario::Sjs);
        let (k, _) = setup(&p);
        assert_eq!(normalized_metrics(&OccupationMeasure::never_admit(&p, &k), &p), (0.0, 0.0));
        let mut y = OccupationMeasure::zeros(p.horizon, p.num_states());
        for t in 0..p.horizon {
            y.set(t, 0, 1, 1, 0.5);
            y.set(t, 1, 0, 0, 0.5);
        }
        assert_eq!(normalized_metrics(&y, &p), (1.0, 1.0));
    }

    #[test]
    fn zero_rejection_cost_admits_nothing_useful() {
        let p = SystemParams { gamma: 0.0, ..SystemParams::policy_behavior() };
        let (k, c) = setup(&p);
        let sol = solve_params(&p, &k, &c, 0.0).unwrap();
        assert!(sol.kkt.certified(tol::KKT));
        assert!((sol.objective - p.horizon as f64 * c.processing[0]).abs() < 1e-6);
        // Admitting in the last epoch is free, so only earlier epochs are pinned.
        for t in 0..p.horizon - 1 {
            assert!(budget_probs(&sol.y, t).0 < 1e-6, "t={t}");
        }
        assert!(normalized_metrics(&sol.y, &p).0 <= 1.0 / p.horizon as f64 + 1e-9);
    }

    #[test]
    fn policy_setup_saturates_admission() {
        let p = SystemParams::policy_behavior();
        let (k, c) = setup(&p);
        let sol = solve_params(&p, &k, &c, 0.0).unwrap();
        assert!((normalized_metrics(&sol.y, &p).0 - 1.0).abs() < 1e-6);
        let busy = SystemParams { p: 0.2, ..p };
        let (k, c) = setup(&busy);
        let sol = solve_params(&busy, &k, &c, 0.0).unwrap();
        assert!((normalized_metrics(&sol.y, &busy).1 - 1.0).abs() <= 0.05);
    }

    #[test]
    fn solution_mass_and_csv() {
        let p = SystemParams::convergence(4, Scenario::Cjs);
        let (k, c) = setup(&p);
        let sol = solve_params(&p, &k, &c, 0.5).unwrap();
        for t in 0..p.horizon {
            assert!((sol.y.epoch_mass(t) - 1.0).abs() <= 1e-5);
        }
        let mut buf = Vec::new();
        sol.y.write_csv(&mut buf, "y").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("t,s,a,b,y"));
        assert_eq!(text.lines().count(), 1 + sol.y.as_slice().len());
    }

    #[test]
    fn regularized_solution_approaches_lp_face() {
        let p = SystemParams::convergence(2, Scenario::Cjs);
        let (k, c) = setup(&p);
        let lp = build_lp(&p, &k, &c);
        let base = solve_exact(&lp, 0.0, tol::KKT).unwrap();
        let mut prev = f64::INFINITY;
        for gamma_reg in [1e-3, 1e-4] {
            let sol = solve_exact(&lp, gamma_reg, tol::KKT).unwrap();
            let gap = sol.objective - base.objective;
            assert!(gap >= -1e-6 && gap <= gamma_reg * base.y.squared_norm() + 1e-6, "Gamma={gamma_reg}: {gap}");
            assert!(gap <= prev + 1e-6, "{gap} after {prev}");
            prev = gap;
        }
    }

    #[test]
    fn beats_random_feasible_policies() {
        for scenario in Scenario::ALL {
            let p = SystemParams { horizon: 20, ..SystemParams::policy_behavior() };
            let p = SystemParams { scenario, ..p };
            let (k, c) = setup(&p);
            let lp = build_lp(&p, &k, &c);
            let sol = solve_exact(&lp, 0.0, tol::KKT).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for _ in 0..100 {
                let y = random_feasible(&p, &k, &mut rng);
                assert!(lp.primal_infeasibility(&y) < 1e-12);
                assert!(sol.objective <= lp.objective_value(&y) + 1e-9);
            }
        }
    }

    #[test]
    fn bad_solver_arguments() {
        let p = SystemParams::convergence(1, Scenario::Cjs);
        let (k, c) = setup(&p);
        let lp = build_lp(&p, &k, &c);
        assert!(solve_exact(&lp, -1.0, 1e-6).is_err());
        assert!(solve_exact(&lp, 0.0, 0.0).is_err());
        assert!(OccupationMeasure::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn random_instances_certify(
            buffer in 1usize..4,
            horizon in 1usize..6,
            p in 0.05f64..1.0,
            q in (0.01f64..0.9, 0.0f64..0.1),
            alpha in 0.05f64..1.0,
            beta in 0.05f64..1.0,
            gamma in 0.0f64..50.0,
            sjs in any::<bool>(),
            gamma_reg in prop_oneof![Just(0.0), 0.01f64..1.0],
            seed in any::<u64>(),
        ) {
            let params = SystemParams {
                buffer, horizon, p, alpha, beta, gamma,
                b_low: q.0, b_high: (q.0 + q.1).min(1.0),
                scenario: if sjs { Scenario::Sjs } else { Scenario::Cjs },
                m0: SystemParams::empty_start(buffer),
            }.validate().unwrap();
            let (k, c) = setup(&params);
            let lp = build_lp(&params, &k, &c);
            let sol = solve_exact(&lp, gamma_reg, tol::KKT).unwrap();
            prop_assert!(sol.kkt.certified(tol::KKT));
            for t in 0..horizon {
                prop_assert!((sol.y.epoch_mass(t) - 1.0).abs() <= 1e-5);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let other = random_feasible(&params, &k, &mut rng);
            let reg = |y: &OccupationMeasure| lp.objective_value(y) + gamma_reg * y.squared_norm();
            prop_assert!(reg(&sol.y) <= reg(&other) + 1e-6);
        }
    }
}
