//! Mehrotra predictor-corrector interior-point method for
//!
//! ```text
//! minimize   c'x + 1/2 x'Qx      (Q diagonal, Q >= 0)
//! subject to Ax = b, x >= 0
//! ```
//!
//! where the rows of `A` are grouped into consecutive blocks and every column
//! touches at most two neighbouring blocks. The normal matrix `A D A'` is then
//! block tridiagonal and is factored blockwise, so a solve costs
//! `O(blocks * block_size^3)` instead of `O(rows^3)`.

use crate::error::{Error, Result};

/// Standard-form problem with block-banded rows.
#[derive(Debug, Clone)]
pub(crate) struct BandedQp {
    /// Row offsets of each block; `block_starts[i]..block_starts[i + 1]`.
    pub block_starts: Vec<usize>,
    /// Sparse columns as `(row, value)`.
    pub cols: Vec<Vec<(usize, f64)>>,
    pub c: Vec<f64>,
    pub q: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct IpmOptions {
    pub max_iter: usize,
    /// Stop once primal, dual and complementarity residuals (all ∞-norms)
    /// fall below this.
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct IpmPoint {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Residuals {
    primal: Vec<f64>,
    dual: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl BandedQp {
    fn n_rows(&self) -> usize {
        *self.block_starts.last().unwrap()
    }

    fn block_of(&self, row: usize) -> usize {
        self.block_starts.partition_point(|&s| s <= row) - 1
    }

    /// Checks that each column spans at most two adjacent blocks.
    pub fn check_banded(&self) -> Result<()> {
        for (j, col) in self.cols.iter().enumerate() {
            let blocks: Vec<usize> = col.iter().map(|&(r, _)| self.block_of(r)).collect();
            if let (Some(lo), Some(hi)) = (blocks.iter().min(), blocks.iter().max()) {
                if hi - lo > 1 {
                    return Err(Error::Numerical(format!("column {j} couples blocks {lo} and {hi}")));
                }
            }
        }
        Ok(())
    }

    fn mul_a(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows()];
        for (col, xj) in self.cols.iter().zip(x) {
            for &(r, v) in col {
                out[r] += v * xj;
            }
        }
        out
    }

    fn mul_at(&self, w: &[f64]) -> Vec<f64> {
        self.cols.iter().map(|col| col.iter().map(|&(r, v)| v * w[r]).sum()).collect()
    }

    fn residuals(&self, pt: &IpmPoint) -> Residuals {
        let ax = self.mul_a(&pt.x);
        let primal = self.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let atw = self.mul_at(&pt.w);
        let dual = (0..self.cols.len()).map(|j| self.c[j] + self.q[j] * pt.x[j] - atw[j] - pt.z[j]).collect();
        Residuals { primal, dual }
    }

    pub fn solve(&self, x0: Vec<f64>, opts: &IpmOptions) -> Result<IpmPoint> {
        self.check_banded()?;
        let n = self.cols.len();
        let m = self.n_rows();
        let scale = 1.0 + inf_norm(&self.c);
        let z0 = (0..n).map(|j| (self.c[j] + self.q[j] * x0[j]).abs().max(1.0).min(scale)).collect();
        let mut pt = IpmPoint { x: x0, w: vec![0.0; m], z: z0, iterations: 0, converged: false };
        let mut normal = BlockTridiag::new(&self.block_starts);

        // Near the target the scaling `x / z` can overflow the normal
        // equations. The iterate with the smallest residual is kept so that a
        // breakdown still hands back a point for the caller to certify.
        let mut best: Option<(f64, IpmPoint)> = None;
        for iter in 0..opts.max_iter {
            pt.iterations = iter;
            let res = self.residuals(&pt);
            let comp = pt.x.iter().zip(&pt.z).fold(0.0f64, |m, (x, z)| m.max(x * z));
            let merit = inf_norm(&res.primal).max(inf_norm(&res.dual)).max(comp);
            if merit <= opts.tol {
                pt.converged = true;
                return Ok(pt);
            }
            if best.as_ref().is_none_or(|(m, _)| merit < *m) {
                best = Some((merit, pt.clone()));
            }
            if let Err(e) = self.step(&mut pt, &res, &mut normal, iter) {
                return best.map(|(_, p)| p).ok_or(e);
            }
        }
        let mut out = best.map_or(pt, |(_, p)| p);
        out.iterations = opts.max_iter;
        Ok(out)
    }

    /// One predictor-corrector step from `pt` in place.
    fn step(&self, pt: &mut IpmPoint, res: &Residuals, normal: &mut BlockTridiag, iter: usize) -> Result<()> {
        let n = self.cols.len();
        let mu = pt.x.iter().zip(&pt.z).map(|(x, z)| x * z).sum::<f64>() / n as f64;

        let d: Vec<f64> = (0..n).map(|j| 1.0 / (self.q[j] + pt.z[j] / pt.x[j])).collect();
        normal.assemble(self, &d);
        normal.factor()?;

        // Affine-scaling predictor.
        let rc_aff: Vec<f64> = pt.x.iter().zip(&pt.z).map(|(x, z)| -x * z).collect();
        let (dx_a, _dw_a, dz_a) = self.newton(normal, pt, &d, res, &rc_aff);
        let ap = max_step(&pt.x, &dx_a);
        let ad = max_step(&pt.z, &dz_a);
        let mu_aff = (0..n).map(|j| (pt.x[j] + ap * dx_a[j]) * (pt.z[j] + ad * dz_a[j])).sum::<f64>() / n as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        // Centering corrector.
        let rc: Vec<f64> = (0..n).map(|j| sigma * mu - pt.x[j] * pt.z[j] - dx_a[j] * dz_a[j]).collect();
        let (dx, dw, dz) = self.newton(normal, pt, &d, res, &rc);
        let eta = 0.995f64.max(1.0 - mu);
        // Separate primal and dual lengths also for Q != 0. Tying them stalls
        // when a group of coordinates is pinned to zero and its multipliers
        // diverge along an unbounded dual face.
        let ap = (eta * max_step(&pt.x, &dx)).min(1.0);
        let ad = (eta * max_step(&pt.z, &dz)).min(1.0);
        if !(ap > 0.0 && ad > 0.0) || !ap.is_finite() || !ad.is_finite() {
            return Err(Error::Numerical(format!("zero step length at iteration {iter}")));
        }
        let mut next = pt.clone();
        for j in 0..n {
            next.x[j] += ap * dx[j];
            next.z[j] += ad * dz[j];
        }
        for (w, dwi) in next.w.iter_mut().zip(&dw) {
            *w += ad * dwi;
        }
        if next.x.iter().chain(&next.z).chain(&next.w).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite iterate at iteration {iter}")));
        }
        *pt = next;
        Ok(())
    }

    /// Solves the Newton system for complementarity target `rc`.
    fn newton(
        &self,
        normal: &BlockTridiag,
        pt: &IpmPoint,
        d: &[f64],
        res: &Residuals,
        rc: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.cols.len();
        let h: Vec<f64> = (0..n).map(|j| rc[j] / pt.x[j] - res.dual[j]).collect();
        let dh: Vec<f64> = (0..n).map(|j| d[j] * h[j]).collect();
        let adh = self.mul_a(&dh);
        let rhs: Vec<f64> = res.primal.iter().zip(&adh).map(|(r, a)| r - a).collect();
        let dw = normal.solve(&rhs);
        let atdw = self.mul_at(&dw);
        let dx: Vec<f64> = (0..n).map(|j| d[j] * (atdw[j] + h[j])).collect();
        let dz: Vec<f64> = (0..n).map(|j| (rc[j] - pt.z[j] * dx[j]) / pt.x[j]).collect();
        (dx, dw, dz)
    }
}

/// Largest step in `[0, inf)` keeping `v + step * dv >= 0`.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter().zip(dv).filter(|(_, d)| **d < 0.0).map(|(x, d)| -x / d).fold(f64::INFINITY, f64::min)
}

/// Symmetric block-tridiagonal matrix stored as dense diagonal blocks and
/// dense sub-diagonal blocks, factored in place as `L L'`.
struct BlockTridiag {
    starts: Vec<usize>,
    /// `diag[i]` is `n_i x n_i`, row-major.
    diag: Vec<Vec<f64>>,
    /// `sub[i]` couples block `i + 1` (rows) with block `i` (cols).
    sub: Vec<Vec<f64>>,
}

impl BlockTridiag {
    fn new(starts: &[usize]) -> Self {
        let sizes: Vec<usize> = starts.windows(2).map(|w| w[1] - w[0]).collect();
        let diag = sizes.iter().map(|n| vec![0.0; n * n]).collect();
        let sub = sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect();
        BlockTridiag { starts: starts.to_vec(), diag, sub }
    }

    fn size(&self, i: usize) -> usize {
        self.starts[i + 1] - self.starts[i]
    }

    fn assemble(&mut self, qp: &BandedQp, d: &[f64]) {
        self.diag.iter_mut().for_each(|m| m.iter_mut().for_each(|v| *v = 0.0));
        self.sub.iter_mut().for_each(|m| m.iter_mut().for_each(|v| *v = 0.0));
        let mut located: Vec<(usize, usize, f64)> = Vec::new();
        for (col, dj) in qp.cols.iter().zip(d) {
            located.clear();
            located.extend(col.iter().map(|&(r, v)| {
                let blk = qp.block_of(r);
                (blk, r - self.starts[blk], v)
            }));
            for &(b1, l1, v1) in &located {
                for &(b2, l2, v2) in &located {
                    let val = dj * v1 * v2;
                    if b1 == b2 {
                        let n = self.size(b1);
                        self.diag[b1][l1 * n + l2] += val;
                    } else if b1 == b2 + 1 {
                        let n = self.size(b2);
                        self.sub[b2][l1 * n + l2] += val;
                    }
                }
            }
        }
    }

    /// Blockwise Cholesky. Near-zero pivots are replaced by a huge value,
    /// which zeroes the corresponding component of the solution.
    fn factor(&mut self) -> Result<()> {
        let nb = self.diag.len();
        for i in 0..nb {
            let n = self.size(i);
            if i > 0 {
                // S = C_i L_{i-1}^{-T}; D_i -= S S'.
                let m = self.size(i - 1);
                let (prev, cur) = self.diag.split_at_mut(i);
                let l_prev = &prev[i - 1];
                let s = &mut self.sub[i - 1];
                for r in 0..n {
                    let row = &mut s[r * m..(r + 1) * m];
                    forward_sub_row(l_prev, m, row);
                }
                let di = &mut cur[0];
                for r in 0..n {
                    for c in 0..=r {
                        let dot: f64 = (0..m).map(|k| s[r * m + k] * s[c * m + k]).sum();
                        di[r * n + c] -= dot;
                    }
                }
            }
            dense_cholesky(&mut self.diag[i], n)?;
        }
        Ok(())
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let nb = self.diag.len();
        let mut x = rhs.to_vec();
        // Forward: L z = r.
        for i in 0..nb {
            let (s0, n) = (self.starts[i], self.size(i));
            if i > 0 {
                let (p0, m) = (self.starts[i - 1], self.size(i - 1));
                let s = &self.sub[i - 1];
                for r in 0..n {
                    let dot: f64 = (0..m).map(|k| s[r * m + k] * x[p0 + k]).sum();
                    x[s0 + r] -= dot;
                }
            }
            forward_sub_row(&self.diag[i], n, &mut x[s0..s0 + n]);
        }
        // Backward: L' x = z.
        for i in (0..nb).rev() {
            let (s0, n) = (self.starts[i], self.size(i));
            if i + 1 < nb {
                let (n0, m) = (self.starts[i + 1], self.size(i + 1));
                let s = &self.sub[i];
                for c in 0..n {
                    let dot: f64 = (0..m).map(|r| s[r * n + c] * x[n0 + r]).sum();
                    x[s0 + c] -= dot;
                }
            }
            backward_sub(&self.diag[i], n, &mut x[s0..s0 + n]);
        }
        x
    }
}

const HUGE_PIVOT: f64 = 1e64;

/// In-place lower Cholesky of a row-major `n x n` matrix (lower triangle used).
fn dense_cholesky(a: &mut [f64], n: usize) -> Result<()> {
    let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(1e-300);
    for j in 0..n {
        let mut pivot = a[j * n + j] - (0..j).map(|k| a[j * n + k] * a[j * n + k]).sum::<f64>();
        if !pivot.is_finite() {
            return Err(Error::Numerical("non-finite pivot in normal equations".into()));
        }
        if pivot <= 1e-30 * max_diag {
            pivot = HUGE_PIVOT;
        }
        let ljj = pivot.sqrt();
        a[j * n + j] = ljj;
        for i in j + 1..n {
            let dot: f64 = (0..j).map(|k| a[i * n + k] * a[j * n + k]).sum();
            a[i * n + j] = (a[i * n + j] - dot) / ljj;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L y = v` in place (`L` lower triangular, row-major).
fn forward_sub_row(l: &[f64], n: usize, v: &mut [f64]) {
    for i in 0..n {
        let dot: f64 = (0..i).map(|k| l[i * n + k] * v[k]).sum();
        v[i] = (v[i] - dot) / l[i * n + i];
    }
}

/// Solves `L' y = v` in place.
fn backward_sub(l: &[f64], n: usize, v: &mut [f64]) {
    for i in (0..n).rev() {
        let dot: f64 = (i + 1..n).map(|k| l[k * n + i] * v[k]).sum();
        v[i] = (v[i] - dot) / l[i * n + i];
    }
}
