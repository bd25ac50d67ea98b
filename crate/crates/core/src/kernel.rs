//! Single-queue transition kernel between consecutive batch arrivals.
//!
//! Between two arrivals the queue is served for `tau ~ Geometric(p)` slots.
//! Under CJS every buffered job completes independently in each slot with
//! probability `q(b)`; under SJS only the head-of-line job can complete, so
//! the number of departures is a `Binomial(tau, q(b))` capped at the backlog.
//! Mixing the fixed-`tau` laws over the geometric distribution gives the
//! kernel `P[s][s'][a][b]`.

use std::io::Write;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Geometric};

use crate::error::{Error, Result};
use crate::model::{tol, Scenario, SystemParams};

/// `P(Binomial(m, prob) = l)`; zero outside `0..=m`.
///
/// Evaluated in log space with the binomial coefficient built from
/// `min(l, m - l)` factors, so it stays accurate for `m` in the tens of
/// thousands.
pub fn binom_pmf(m: u64, prob: f64, l: i64) -> f64 {
    if l < 0 || l as u64 > m {
        return 0.0;
    }
    let l = l as u64;
    if prob <= 0.0 {
        return if l == 0 { 1.0 } else { 0.0 };
    }
    if prob >= 1.0 {
        return if l == m { 1.0 } else { 0.0 };
    }
    let k = l.min(m - l);
    let mut ln_choose = 0.0;
    for i in 0..k {
        ln_choose += ((m - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    let ln = ln_choose + l as f64 * prob.ln() + (m - l) as f64 * (-prob).ln_1p();
    ln.exp()
}

fn check_pair(s: usize, a: usize, b: usize, params: &SystemParams) -> Result<()> {
    if s > params.buffer {
        return Err(Error::StateOutOfRange { state: s, max: params.buffer });
    }
    if a > 1 || b > 1 {
        return Err(Error::Precondition(format!("actions must be 0/1, got a={a}, b={b}")));
    }
    if !params.admissible(s, a) {
        return Err(Error::Precondition(format!("cannot admit into a full queue (s = K = {s})")));
    }
    Ok(())
}

/// Probability that one job completes within `tau` slots under CJS.
fn cjs_completion(q: f64, tau: u64) -> f64 {
    -(tau as f64 * (-q).ln_1p()).exp_m1()
}

/// Distribution of the next state given exactly `tau` service slots.
pub fn fixed_tau_kernel(s: usize, a: usize, b: usize, tau: u64, params: &SystemParams) -> Result<Vec<f64>> {
    check_pair(s, a, b, params)?;
    if tau == 0 {
        return Err(Error::Precondition("tau must be at least 1".into()));
    }
    let mut out = vec![0.0; params.num_states()];
    fill_fixed_tau(&mut out, s + a, params.service_prob(b), tau, params.scenario);
    Ok(out)
}

/// Writes the fixed-`tau` law for backlog `n = s + a` into `out[0..=n]`.
fn fill_fixed_tau(out: &mut [f64], n: usize, q: f64, tau: u64, scenario: Scenario) {
    match scenario {
        Scenario::Cjs => {
            let r = cjs_completion(q, tau);
            for (sp, v) in out.iter_mut().enumerate().take(n + 1) {
                *v = binom_pmf(n as u64, r, (n - sp) as i64);
            }
        }
        Scenario::Sjs => {
            let mut below = 0.0;
            for (sp, v) in out.iter_mut().enumerate().take(n + 1).skip(1) {
                *v = binom_pmf(tau, q, (n - sp) as i64);
                below += *v;
            }
            // P(at least n completions) = 1 - P(fewer than n).
            out[0] = (1.0 - below).max(0.0);
        }
    }
}

/// Smallest `tau` with `(1 - p)^tau <= tail_eps`.
pub fn truncation_point(p: f64, tail_eps: f64) -> Result<u64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid("p", format!("{p} not in (0, 1]")));
    }
    if p == 1.0 {
        return Ok(1);
    }
    let log_miss = (-p).ln_1p();
    let mut tau = (tail_eps.ln() / log_miss).ceil().max(1.0) as u64;
    while tau > 1 && ((tau - 1) as f64 * log_miss).exp() <= tail_eps {
        tau -= 1;
    }
    while (tau as f64 * log_miss).exp() > tail_eps {
        tau += 1;
    }
    Ok(tau)
}

/// Dense kernel table. Rows `(s, a, b)` are stored contiguously over `s'`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    states: usize,
    probs: Vec<f64>,
    pub tail_eps: f64,
}

impl TransitionKernel {
    pub(crate) fn zeros(states: usize, tail_eps: f64) -> Self {
        TransitionKernel { states, probs: vec![0.0; states * 4 * states], tail_eps }
    }

    #[inline]
    fn row_start(&self, s: usize, a: usize, b: usize) -> usize {
        ((s * 2 + a) * 2 + b) * self.states
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn buffer(&self) -> usize {
        self.states - 1
    }

    /// `P[s][s'][a][b]`.
    #[inline]
    pub fn prob(&self, s: usize, s_prime: usize, a: usize, b: usize) -> f64 {
        self.probs[self.row_start(s, a, b) + s_prime]
    }

    /// Next-state distribution for `(s, a, b)`; all zeros for `(K, 1, b)`.
    #[inline]
    pub fn row(&self, s: usize, a: usize, b: usize) -> &[f64] {
        let i = self.row_start(s, a, b);
        &self.probs[i..i + self.states]
    }

    pub(crate) fn row_mut(&mut self, s: usize, a: usize, b: usize) -> &mut [f64] {
        let i = self.row_start(s, a, b);
        &mut self.probs[i..i + self.states]
    }

    /// Sentinel flag: `false` exactly for the never-read `(K, 1, b)` rows.
    pub fn is_admissible(&self, s: usize, a: usize) -> bool {
        !(s == self.buffer() && a == 1)
    }

    /// Iterates over `(s, a, b)` for every admissible row.
    pub fn admissible_rows(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.states)
            .flat_map(move |s| (0..2).flat_map(move |a| (0..2).map(move |b| (s, a, b))))
            .filter(move |&(s, a, _)| self.is_admissible(s, a))
    }

    /// Largest `|sum(row) - 1|` over admissible rows.
    pub fn max_row_defect(&self) -> f64 {
        self.admissible_rows().map(|(s, a, b)| (self.row(s, a, b).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Writes `s,s_prime,a,b,prob` for every nonzero entry, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "s,s_prime,a,b,prob")?;
        for s in 0..self.states {
            for sp in 0..self.states {
                for a in 0..2 {
                    for b in 0..2 {
                        let v = self.prob(s, sp, a, b);
                        if v != 0.0 {
                            writeln!(w, "{s},{sp},{a},{b},{v:.16e}")?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Analytic kernel with the geometric mixture truncated at the first `tau`
/// whose tail mass is at most `tail_eps`, renormalized by the retained mass.
pub fn compute_kernel(params: &SystemParams, tail_eps: f64) -> Result<TransitionKernel> {
    if !(tail_eps > 0.0 && tail_eps <= 1e-6) {
        return Err(Error::invalid("tail_eps", format!("{tail_eps} not in (0, 1e-6]")));
    }
    let tau_max = truncation_point(params.p, tail_eps)?;
    let states = params.num_states();
    let mut kernel = TransitionKernel::zeros(states, tail_eps);
    let miss = 1.0 - params.p;
    let retained = -(tau_max as f64 * (-params.p).ln_1p()).exp_m1();
    let mut scratch = vec![0.0; states];
    for s in 0..states {
        for a in 0..2 {
            if !params.admissible(s, a) {
                continue;
            }
            for b in 0..2 {
                let q = params.service_prob(b);
                let row = kernel.row_mut(s, a, b);
                let mut weight = params.p;
                for tau in 1..=tau_max {
                    scratch.iter_mut().for_each(|v| *v = 0.0);
                    fill_fixed_tau(&mut scratch, s + a, q, tau, params.scenario);
                    for (r, v) in row.iter_mut().zip(&scratch) {
                        *r += weight * v;
                    }
                    weight *= miss;
                }
                row.iter_mut().for_each(|v| *v /= retained);
            }
        }
    }
    Ok(kernel)
}

/// Draws a geometric inter-arrival time on `1, 2, ...`.
pub fn sample_tau<R: Rng + ?Sized>(p: f64, rng: &mut R) -> u64 {
    if p >= 1.0 {
        return 1;
    }
    1 + Geometric::new(p).expect("p validated in (0, 1]").sample(rng)
}

/// Next state after exactly `tau` slots of service.
pub fn sample_transition_with_tau<R: Rng + ?Sized>(
    s: usize,
    a: usize,
    b: usize,
    tau: u64,
    params: &SystemParams,
    rng: &mut R,
) -> Result<usize> {
    check_pair(s, a, b, params)?;
    let n = s + a;
    let q = params.service_prob(b);
    let departures = match params.scenario {
        Scenario::Cjs => binomial(n as u64, cjs_completion(q, tau), rng) as usize,
        Scenario::Sjs => (binomial(tau, q, rng) as usize).min(n),
    };
    Ok(n - departures)
}

/// Next state with a freshly drawn inter-arrival time.
pub fn sample_transition<R: Rng + ?Sized>(
    s: usize,
    a: usize,
    b: usize,
    params: &SystemParams,
    rng: &mut R,
) -> Result<usize> {
    let tau = sample_tau(params.p, rng);
    sample_transition_with_tau(s, a, b, tau, params, rng)
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("probability in (0, 1)").sample(rng)
}

/// Frequency estimate of the kernel built from sampled transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalKernel {
    kernel: TransitionKernel,
    /// Observation counts, laid out like the kernel table.
    counts: Vec<u64>,
}

impl EmpiricalKernel {
    /// Builds the estimate from raw counts indexed `[s][a][b][s']`.
    pub fn from_counts(states: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != states * 4 * states {
            return Err(Error::ShapeMismatch(format!("expected {} counts, got {}", states * 4 * states, counts.len())));
        }
        let mut est = EmpiricalKernel { kernel: TransitionKernel::zeros(states, 0.0), counts };
        est.refresh();
        Ok(est)
    }

    fn refresh(&mut self) {
        let states = self.kernel.states;
        for (row, chunk) in self.counts.chunks(states).enumerate() {
            let total: u64 = chunk.iter().sum();
            let out = &mut self.kernel.probs[row * states..(row + 1) * states];
            if total == 0 {
                out.iter_mut().for_each(|v| *v = 0.0);
            } else {
                for (o, c) in out.iter_mut().zip(chunk) {
                    *o = *c as f64 / total as f64;
                }
            }
        }
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    pub fn count(&self, s: usize, s_prime: usize, a: usize, b: usize) -> u64 {
        self.counts[self.kernel.row_start(s, a, b) + s_prime]
    }

    pub fn row_count(&self, s: usize, a: usize, b: usize) -> u64 {
        let i = self.kernel.row_start(s, a, b);
        self.counts[i..i + self.kernel.states].iter().sum()
    }

    /// `true` for rows without a single observation.
    pub fn is_unobserved(&self, s: usize, a: usize, b: usize) -> bool {
        self.row_count(s, a, b) == 0
    }

    /// Pools the observations of `other` into `self` (running-average mode).
    pub fn absorb(&mut self, other: &EmpiricalKernel) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::ShapeMismatch("empirical kernels of different size".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(c, o)| *c += o);
        self.refresh();
        Ok(())
    }
}

/// Samples every admissible `(s, a, b)` exactly `samples` times.
pub fn estimate_kernel<R: Rng + ?Sized>(params: &SystemParams, samples: usize, rng: &mut R) -> Result<EmpiricalKernel> {
    if samples == 0 {
        return Err(Error::Precondition("mini-batch size must be at least 1".into()));
    }
    let states = params.num_states();
    let mut counts = vec![0u64; states * 4 * states];
    for s in 0..states {
        for a in 0..2 {
            if !params.admissible(s, a) {
                continue;
            }
            for b in 0..2 {
                let base = ((s * 2 + a) * 2 + b) * states;
                for _ in 0..samples {
                    let next = sample_transition(s, a, b, params, rng)?;
                    counts[base + next] += 1;
                }
            }
        }
    }
    EmpiricalKernel::from_counts(states, counts)
}

/// Default tail tolerance for callers that do not care.
pub fn compute_default_kernel(params: &SystemParams) -> Result<TransitionKernel> {
    compute_kernel(params, tol::TAIL_EPS)
}
