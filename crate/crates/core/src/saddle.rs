//! Regularized Lagrangian of the relaxed LP and the primal-dual
//! gradient descent-ascent schemes that search for its saddle point.
//!
//! With multipliers `lambda >= 0` (budgets and `y >= 0`) and free `mu`
//! (initial condition, full buffer, flow), the Lagrangian is
//!
//! ```text
//! L~ = sum_t [ C(y,t) + D1(y,mu,t) + D2(y,lambda,t) ] + Gamma ||y||^2
//! C(y,t)  = sum (C_s + C_p) y(t) + gamma (1 - pi_A(t))
//! D1      = mu1 . (y(0) - m0)              (once, at t = 0)
//!         + mu2(t) . y(t, K, 1, .)
//!         + mu3(t) . (M(t+1) - y(t) P)     (t <= T - 2)
//! D2      = lambda1(t) (pi_A(t) - alpha) + lambda2(t) (pi_H(t) - beta) - lambda3(t) . y(t)
//! ```
//!
//! GDA descends in `y` with step `eta1` and ascends in the multipliers with
//! the slower step `eta2`, projecting `lambda` onto the nonnegative orthant.
//! SGDA does the same with a freshly sampled kernel estimate each iteration.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{estimate_kernel, EmpiricalKernel, TransitionKernel};
use crate::lp::{budget_probs, OccupationMeasure};
use crate::model::{tol, CostModel, SystemParams};

/// Lagrange multipliers, also used for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    /// Admission budget, one per epoch.
    pub lambda1: Vec<f64>,
    /// High-rate budget, one per epoch.
    pub lambda2: Vec<f64>,
    /// Nonnegativity, flat `(t, s, a, b)` layout like [`OccupationMeasure`].
    pub lambda3: Vec<f64>,
    /// Initial distribution, one per state.
    pub mu1: Vec<f64>,
    /// Full-buffer rows `y(t, K, 1, b) = 0`.
    pub mu2: Vec<[f64; 2]>,
    /// Flow rows linking epoch `t` to `t + 1`, `t = 0..T-1`.
    pub mu3: Vec<Vec<f64>>,
}

impl Multipliers {
    pub fn zeros(horizon: usize, states: usize) -> Self {
        Multipliers {
            lambda1: vec![0.0; horizon],
            lambda2: vec![0.0; horizon],
            lambda3: vec![0.0; horizon * states * 4],
            mu1: vec![0.0; states],
            mu2: vec![[0.0; 2]; horizon],
            mu3: vec![vec![0.0; states]; horizon.saturating_sub(1)],
        }
    }

    pub fn horizon(&self) -> usize {
        self.lambda1.len()
    }

    pub fn states(&self) -> usize {
        self.mu1.len()
    }

    fn check(&self, params: &SystemParams) -> Result<()> {
        let (t, n) = (params.horizon, params.num_states());
        let ok = self.lambda1.len() == t
            && self.lambda2.len() == t
            && self.lambda3.len() == t * n * 4
            && self.mu1.len() == n
            && self.mu2.len() == t
            && self.mu3.len() == t.saturating_sub(1)
            && self.mu3.iter().all(|r| r.len() == n);
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("multipliers do not match T={t}, K+1={n}")))
        }
    }

    /// Smallest entry over all `lambda` components.
    pub fn min_lambda(&self) -> f64 {
        self.lambda1.iter().chain(&self.lambda2).chain(&self.lambda3).fold(f64::INFINITY, |m, v| m.min(*v))
    }

    /// ∞-norm over the equality (`mu`) components.
    pub fn mu_inf_norm(&self) -> f64 {
        self.mu1
            .iter()
            .chain(self.mu2.iter().flatten())
            .chain(self.mu3.iter().flatten())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `lambda <- [lambda + step * g]_+`, `mu <- mu + step * g`.
    pub fn ascend(&mut self, grad: &Multipliers, step: f64) {
        let proj = |x: &mut f64, g: f64| *x = (*x + step * g).max(0.0);
        self.lambda1.iter_mut().zip(&grad.lambda1).for_each(|(x, g)| proj(x, *g));
        self.lambda2.iter_mut().zip(&grad.lambda2).for_each(|(x, g)| proj(x, *g));
        self.lambda3.iter_mut().zip(&grad.lambda3).for_each(|(x, g)| proj(x, *g));
        self.mu1.iter_mut().zip(&grad.mu1).for_each(|(x, g)| *x += step * g);
        for (x, g) in self.mu2.iter_mut().zip(&grad.mu2) {
            x[0] += step * g[0];
            x[1] += step * g[1];
        }
        for (xr, gr) in self.mu3.iter_mut().zip(&grad.mu3) {
            xr.iter_mut().zip(gr).for_each(|(x, g)| *x += step * g);
        }
    }
}

fn check_shapes(
    y: &OccupationMeasure,
    mult: &Multipliers,
    kernel: &TransitionKernel,
    params: &SystemParams,
) -> Result<()> {
    y.ensure_shape(params)?;
    mult.check(params)?;
    if kernel.states() != params.num_states() {
        return Err(Error::ShapeMismatch(format!(
            "kernel has {} states, params have {}",
            kernel.states(),
            params.num_states()
        )));
    }
    Ok(())
}

/// Evaluates `L~(y, lambda, mu; P, m0)` term by term.
pub fn lagrangian(
    y: &OccupationMeasure,
    mult: &Multipliers,
    kernel: &TransitionKernel,
    params: &SystemParams,
    costs: &CostModel,
    gamma_reg: f64,
) -> Result<f64> {
    check_shapes(y, mult, kernel, params)?;
    if costs.storage.len() != params.num_states() {
        return Err(Error::ShapeMismatch("cost table length".into()));
    }
    let (horizon, states, k) = (params.horizon, params.num_states(), params.buffer);
    let mut total = 0.0;
    for t in 0..horizon {
        let (pi_a, pi_h) = budget_probs(y, t);
        // C(y, t)
        for s in 0..states {
            for a in 0..2 {
                for b in 0..2 {
                    total += costs.holding(s, b) * y.get(t, s, a, b);
                }
            }
        }
        total += params.gamma * (1.0 - pi_a);
        // D1
        if t == 0 {
            for s in 0..states {
                total += mult.mu1[s] * (y.state_mass(0, s) - params.m0[s]);
            }
        }
        for b in 0..2 {
            total += mult.mu2[t][b] * y.get(t, k, 1, b);
        }
        if t + 1 < horizon {
            for s in 0..states {
                let mut inflow = 0.0;
                for sp in 0..states {
                    for a in 0..2 {
                        for b in 0..2 {
                            inflow += y.get(t, sp, a, b) * kernel.prob(sp, s, a, b);
                        }
                    }
                }
                total += mult.mu3[t][s] * (y.state_mass(t + 1, s) - inflow);
            }
        }
        // D2
        total += mult.lambda1[t] * (pi_a - params.alpha) + mult.lambda2[t] * (pi_h - params.beta);
    }
    total -= mult.lambda3.iter().zip(y.as_slice()).map(|(l, v)| l * v).sum::<f64>();
    Ok(total + gamma_reg * y.squared_norm())
}

/// `dL~/dy`, same shape as `y`.
pub fn grad_y(
    y: &OccupationMeasure,
    mult: &Multipliers,
    kernel: &TransitionKernel,
    params: &SystemParams,
    costs: &CostModel,
    gamma_reg: f64,
) -> Result<OccupationMeasure> {
    check_shapes(y, mult, kernel, params)?;
    let mut g = OccupationMeasure::zeros(params.horizon, params.num_states());
    fill_grad_y(&mut g, y, mult, kernel, params, costs, gamma_reg);
    Ok(g)
}

fn fill_grad_y(
    g: &mut OccupationMeasure,
    y: &OccupationMeasure,
    mult: &Multipliers,
    kernel: &TransitionKernel,
    params: &SystemParams,
    costs: &CostModel,
    gamma_reg: f64,
) {
    let (horizon, states, k) = (params.horizon, params.num_states(), params.buffer);
    let index = y.index();
    let out = g.as_mut_slice();
    for t in 0..horizon {
        for s in 0..states {
            for a in 0..2 {
                for b in 0..2 {
                    let j = index.flatten(t, s, a, b);
                    let mut v = costs.holding(s, b) + 2.0 * gamma_reg * y.as_slice()[j] - mult.lambda3[j];
                    if a == 1 && s < k {
                        v += mult.lambda1[t] - params.gamma;
                    }
                    if b == 1 {
                        v += mult.lambda2[t];
                    }
                    if t == 0 {
                        v += mult.mu1[s];
                    }
                    if s == k && a == 1 {
                        v += mult.mu2[t][b];
                    }
                    if t >= 1 {
                        v += mult.mu3[t - 1][s];
                    }
                    if t + 1 < horizon {
                        let row = kernel.row(s, a, b);
                        v -= row.iter().zip(&mult.mu3[t]).map(|(p, m)| p * m).sum::<f64>();
                    }
                    out[j] = v;
                }
            }
        }
    }
}

/// Gradients of `L~` with respect to every multiplier.
pub fn grad_multipliers(
    y: &OccupationMeasure,
    kernel: &TransitionKernel,
    params: &SystemParams,
) -> Result<Multipliers> {
    y.ensure_shape(params)?;
    if kernel.states() != params.num_states() {
        return Err(Error::ShapeMismatch("kernel size".into()));
    }
    let mut g = Multipliers::zeros(params.horizon, params.num_states());
    fill_grad_multipliers(&mut g, y, kernel, params);
    Ok(g)
}

fn fill_grad_multipliers(g: &mut Multipliers, y: &OccupationMeasure, kernel: &TransitionKernel, params: &SystemParams) {
    let (horizon, states, k) = (params.horizon, params.num_states(), params.buffer);
    for t in 0..horizon {
        let (pi_a, pi_h) = budget_probs(y, t);
        g.lambda1[t] = pi_a - params.alpha;
        g.lambda2[t] = pi_h - params.beta;
        g.mu2[t] = [y.get(t, k, 1, 0), y.get(t, k, 1, 1)];
    }
    g.lambda3.iter_mut().zip(y.as_slice()).for_each(|(l, v)| *l = -v);
    for s in 0..states {
        g.mu1[s] = y.state_mass(0, s) - params.m0[s];
    }
    for t in 0..horizon.saturating_sub(1) {
        let row = &mut g.mu3[t];
        for (s, r) in row.iter_mut().enumerate() {
            *r = y.state_mass(t + 1, s);
        }
        for sp in 0..states {
            for a in 0..2 {
                for b in 0..2 {
                    let w = y.get(t, sp, a, b);
                    if w != 0.0 {
                        for (r, p) in row.iter_mut().zip(kernel.row(sp, a, b)) {
                            *r -= w * p;
                        }
                    }
                }
            }
        }
    }
}

/// How SGDA forms the kernel estimate used at each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    /// A fresh estimate from `minibatch` new samples per row.
    #[default]
    Fresh,
    /// All samples drawn so far, pooled.
    Cumulative,
}

#[derive(Debug, Clone)]
pub struct SaddleConfig {
    /// Regularization weight `Gamma`.
    pub gamma_reg: f64,
    /// Fast (descent) step.
    pub eta1: f64,
    /// Slow (ascent) step.
    pub eta2: f64,
    pub iters: usize,
    /// Samples per kernel entry per SGDA iteration.
    pub minibatch: usize,
    pub seed: u64,
    /// Trace stride; the first and last iterations are always recorded.
    pub record_every: usize,
    /// Optional target for the distance trace.
    pub reference: Option<OccupationMeasure>,
    pub kernel_mode: KernelMode,
    /// Clamp `y` at zero after each descent step.
    pub clamp_nonnegative: bool,
}

impl Default for SaddleConfig {
    fn default() -> Self {
        SaddleConfig {
            gamma_reg: 0.5,
            eta1: 0.1,
            eta2: 0.01,
            iters: 50_000,
            minibatch: 10,
            seed: 0,
            record_every: 100,
            reference: None,
            kernel_mode: KernelMode::Fresh,
            clamp_nonnegative: false,
        }
    }
}

impl SaddleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_reg > 0.0 && self.gamma_reg.is_finite()) {
            return Err(Error::invalid("Gamma", "GDA/SGDA need Gamma > 0"));
        }
        if !(self.eta2 > 0.0 && self.eta1 > self.eta2 && self.eta1.is_finite()) {
            return Err(Error::invalid(
                "eta1",
                format!("need eta1 > eta2 > 0, got eta1={}, eta2={}", self.eta1, self.eta2),
            ));
        }
        if self.minibatch == 0 {
            return Err(Error::invalid("minibatch_I", "must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// One trace record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterTrace {
    pub iteration: usize,
    pub lagrangian: f64,
    /// Frobenius distance to the configured reference, if any.
    pub dist_to_ref: Option<f64>,
    /// ∞-norm of the equality-constraint residuals (flow, initial, full buffer).
    pub flow_residual_inf: f64,
    /// `max_t max(pi_A(t) - alpha, pi_H(t) - beta, 0)`.
    pub max_budget_violation: f64,
    pub mean_pi_a: f64,
    pub mean_pi_h: f64,
}

pub fn write_trace_csv<W: Write>(traces: &[IterTrace], mut w: W) -> std::io::Result<()> {
    writeln!(w, "iteration,lagrangian,dist_to_ref_frobenius,flow_residual_inf,max_budget_violation")?;
    for tr in traces {
        let dist = tr.dist_to_ref.map_or_else(|| "nan".to_string(), |d| d.to_string());
        writeln!(
            w,
            "{},{},{},{},{}",
            tr.iteration, tr.lagrangian, dist, tr.flow_residual_inf, tr.max_budget_violation
        )?;
    }
    Ok(())
}

/// Final iterate and trace of a GDA/SGDA run.
#[derive(Debug, Clone)]
pub struct SaddleRun {
    pub y: OccupationMeasure,
    pub multipliers: Multipliers,
    pub traces: Vec<IterTrace>,
}

/// Reusable gradient buffers for [`saddle_step`].
pub struct StepWorkspace {
    gy: OccupationMeasure,
    gm: Multipliers,
}

impl StepWorkspace {
    pub fn new(params: &SystemParams) -> Self {
        StepWorkspace {
            gy: OccupationMeasure::zeros(params.horizon, params.num_states()),
            gm: Multipliers::zeros(params.horizon, params.num_states()),
        }
    }
}

/// One simultaneous descent/ascent update, both gradients taken at the
/// current point. No validation of step sizes.
#[allow(clippy::too_many_arguments)]
pub fn saddle_step(
    y: &mut OccupationMeasure,
    mult: &mut Multipliers,
    kernel: &TransitionKernel,
    params: &SystemParams,
    costs: &CostModel,
    gamma_reg: f64,
    eta1: f64,
    eta2: f64,
    clamp_nonnegative: bool,
    ws: &mut StepWorkspace,
) {
    fill_grad_y(&mut ws.gy, y, mult, kernel, params, costs, gamma_reg);
    fill_grad_multipliers(&mut ws.gm, y, kernel, params);
    for (v, g) in y.as_mut_slice().iter_mut().zip(ws.gy.as_slice()) {
        *v -= eta1 * g;
        if clamp_nonnegative && *v < 0.0 {
            *v = 0.0;
        }
    }
    mult.ascend(&ws.gm, eta2);
}

fn record(
    iteration: usize,
    y: &OccupationMeasure,
    mult: &Multipliers,
    kernel: &TransitionKernel,
    params: &SystemParams,
    costs: &CostModel,
    cfg: &SaddleConfig,
) -> Result<IterTrace> {
    let lagrangian = lagrangian(y, mult, kernel, params, costs, cfg.gamma_reg)?;
    let g = grad_multipliers(y, kernel, params)?;
    let mut sum_a = 0.0;
    let mut sum_h = 0.0;
    let mut viol = 0.0f64;
    for t in 0..params.horizon {
        let (a, h) = budget_probs(y, t);
        sum_a += a;
        sum_h += h;
        viol = viol.max(a - params.alpha).max(h - params.beta);
    }
    let horizon = params.horizon as f64;
    Ok(IterTrace {
        iteration,
        lagrangian,
        dist_to_ref: cfg.reference.as_ref().map(|r| y.frobenius_distance(r)),
        flow_residual_inf: g.mu_inf_norm(),
        max_budget_violation: viol,
        mean_pi_a: sum_a / horizon,
        mean_pi_h: sum_h / horizon,
    })
}

fn guard(iteration: usize, y: &OccupationMeasure) -> Result<()> {
    let norm = y.sup_norm();
    if !norm.is_finite() || norm > tol::DIVERGENCE {
        return Err(Error::Diverged { iteration, norm });
    }
    Ok(())
}

fn should_record(k: usize, cfg: &SaddleConfig) -> bool {
    k.is_multiple_of(cfg.record_every) || k == cfg.iters
}

/// Deterministic GDA with the exact kernel, from the never-admit measure and
/// zero multipliers.
pub fn gda(
    params: &SystemParams,
    kernel: &TransitionKernel,
    costs: &CostModel,
    cfg: &SaddleConfig,
) -> Result<SaddleRun> {
    let y0 = OccupationMeasure::never_admit(params, kernel);
    let m0 = Multipliers::zeros(params.horizon, params.num_states());
    gda_from(params, kernel, costs, cfg, y0, m0)
}

/// GDA from a caller-supplied starting point.
pub fn gda_from(
    params: &SystemParams,
    kernel: &TransitionKernel,
    costs: &CostModel,
    cfg: &SaddleConfig,
    mut y: OccupationMeasure,
    mut mult: Multipliers,
) -> Result<SaddleRun> {
    cfg.validate()?;
    check_shapes(&y, &mult, kernel, params)?;
    let mut ws = StepWorkspace::new(params);
    let mut traces = vec![record(0, &y, &mult, kernel, params, costs, cfg)?];
    for k in 1..=cfg.iters {
        saddle_step(
            &mut y,
            &mut mult,
            kernel,
            params,
            costs,
            cfg.gamma_reg,
            cfg.eta1,
            cfg.eta2,
            cfg.clamp_nonnegative,
            &mut ws,
        );
        guard(k, &y)?;
        if should_record(k, cfg) {
            traces.push(record(k, &y, &mult, kernel, params, costs, cfg)?);
        }
    }
    Ok(SaddleRun { y, multipliers: mult, traces })
}

/// SGDA: like [`gda`] but every iteration uses a kernel estimated from
/// `cfg.minibatch` sampled transitions per admissible `(s, a, b)`.
///
/// The starting measure is the never-admit measure propagated through a
/// first estimate. Trace records evaluate the Lagrangian and residuals with
/// the estimate of that iteration.
pub fn sgda<R: Rng + ?Sized>(
    params: &SystemParams,
    costs: &CostModel,
    cfg: &SaddleConfig,
    rng: &mut R,
) -> Result<SaddleRun> {
    cfg.validate()?;
    let first = estimate_kernel(params, cfg.minibatch, rng)?;
    let y0 = OccupationMeasure::never_admit(params, first.kernel());
    let m0 = Multipliers::zeros(params.horizon, params.num_states());
    sgda_from(params, costs, cfg, rng, y0, m0, first)
}

/// SGDA from a caller-supplied starting point. `pool` seeds the cumulative
/// estimate and is ignored in fresh mode.
#[allow(clippy::too_many_arguments)]
pub fn sgda_from<R: Rng + ?Sized>(
    params: &SystemParams,
    costs: &CostModel,
    cfg: &SaddleConfig,
    rng: &mut R,
    mut y: OccupationMeasure,
    mut mult: Multipliers,
    mut pool: EmpiricalKernel,
) -> Result<SaddleRun> {
    cfg.validate()?;
    check_shapes(&y, &mult, pool.kernel(), params)?;
    let mut ws = StepWorkspace::new(params);
    let mut traces = vec![record(0, &y, &mult, pool.kernel(), params, costs, cfg)?];
    for k in 1..=cfg.iters {
        let fresh = estimate_kernel(params, cfg.minibatch, rng)?;
        let est = match cfg.kernel_mode {
            KernelMode::Fresh => {
                pool = fresh;
                &pool
            }
            KernelMode::Cumulative => {
                pool.absorb(&fresh)?;
                &pool
            }
        };
        saddle_step(
            &mut y,
            &mut mult,
            est.kernel(),
            params,
            costs,
            cfg.gamma_reg,
            cfg.eta1,
            cfg.eta2,
            cfg.clamp_nonnegative,
            &mut ws,
        );
        guard(k, &y)?;
        if should_record(k, cfg) {
            traces.push(record(k, &y, &mult, est.kernel(), params, costs, cfg)?);
        }
    }
    Ok(SaddleRun { y, multipliers: mult, traces })
}
