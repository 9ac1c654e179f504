//! Transfer operators `P_s`, `P_s*` on a simplex grid and their Perron data.
//!
//! `P_s phi(v) = sum_g p_g ||g v||^s phi(g.v)`; the conjugate uses `g^T`.
//! The atom sum is exact, the only approximation is interpolating `phi` at
//! `g.v`.
//!
//! Normalization: `r_s` is the right Perron vector of the discretized
//! operator scaled so that its `s`-homogeneous extension has `r_s(1) = 1`,
//! i.e. `r_s(barycenter) = d^{-s}`. In the continuum this is the same
//! function as `v -> int <v,u>^s dnu_s*(u)`; the discrete gap between the two
//! is reported as `normalization_gap`. Likewise for `r_s*`.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::cone::SimplexPoint;
use crate::ensemble::FiniteEnsemble;
use crate::error::{Error, Result};
use crate::grid::{SimplexGrid, Stencil};

pub const S_GUARD: f64 = 4.0;

#[derive(Clone, Debug)]
pub struct SolverOptions {
    /// Relative tolerance on the Collatz-Wielandt gap and on the eigenmeasure.
    pub tol: f64,
    pub max_iter: usize,
    pub s_guard: f64,
    /// Optional cap on the comparability constant; negative tilts need the
    /// full constant below it, non-negative ones the columnwise constant.
    pub max_comparability: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-13,
            max_iter: 100_000,
            s_guard: S_GUARD,
            max_comparability: None,
        }
    }
}

/// Images of every node under every atom.
#[derive(Clone, Debug)]
struct GridAction {
    /// atom-major: entry `a * nodes + k`.
    stencils: Vec<Stencil>,
    log_norms: Vec<f64>,
}

impl GridAction {
    fn new(ens: &FiniteEnsemble, grid: &SimplexGrid) -> Self {
        let n = grid.len();
        let mut stencils = Vec::with_capacity(ens.len() * n);
        let mut log_norms = Vec::with_capacity(ens.len() * n);
        let mut buf = vec![0.0; grid.dim()];
        for g in ens.atoms() {
            for p in grid.nodes() {
                g.apply_into(p.coords(), &mut buf);
                let norm: f64 = buf.iter().sum();
                buf.iter_mut().for_each(|x| *x /= norm);
                stencils.push(grid.stencil(&buf));
                log_norms.push(norm.ln());
            }
        }
        Self { stencils, log_norms }
    }
}

/// An ensemble, its transpose and a grid, with the node images cached.
#[derive(Debug)]
pub struct SpectralContext {
    ens: FiniteEnsemble,
    conj: FiniteEnsemble,
    grid: SimplexGrid,
    fwd: GridAction,
    bwd: GridAction,
}

/// Which operator to act with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Forward,
    Conjugate,
}

impl SpectralContext {
    pub fn new(ens: FiniteEnsemble, grid: SimplexGrid) -> Result<Arc<Self>> {
        if ens.dim() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                found: ens.dim(),
            });
        }
        let conj = ens.transposed();
        let fwd = GridAction::new(&ens, &grid);
        let bwd = GridAction::new(&conj, &grid);
        Ok(Arc::new(Self {
            ens,
            conj,
            grid,
            fwd,
            bwd,
        }))
    }

    pub fn build(ens: &FiniteEnsemble, dim_resolution: usize) -> Result<Arc<Self>> {
        Self::new(ens.clone(), SimplexGrid::new(ens.dim(), dim_resolution)?)
    }

    pub fn ensemble(&self) -> &FiniteEnsemble {
        &self.ens
    }

    pub fn grid(&self) -> &SimplexGrid {
        &self.grid
    }

    fn parts(&self, side: Side) -> (&FiniteEnsemble, &GridAction) {
        match side {
            Side::Forward => (&self.ens, &self.fwd),
            Side::Conjugate => (&self.conj, &self.bwd),
        }
    }

    /// `p_g ||g v_k||^s` for every atom and node.
    fn tilt_weights(&self, side: Side, s: f64) -> Vec<f64> {
        let (ens, act) = self.parts(side);
        let n = self.grid.len();
        let mut w = Vec::with_capacity(act.log_norms.len());
        for (a, p) in ens.probs().iter().enumerate() {
            for k in 0..n {
                w.push(p * (s * act.log_norms[a * n + k]).exp());
            }
        }
        w
    }

    fn apply_with(&self, side: Side, w: &[f64], phi: &[f64], out: &mut [f64]) {
        let act = self.parts(side).1;
        let n = self.grid.len();
        out.iter_mut().for_each(|x| *x = 0.0);
        for (chunk_w, chunk_s) in w.chunks_exact(n).zip(act.stencils.chunks_exact(n)) {
            for k in 0..n {
                out[k] += chunk_w[k] * chunk_s[k].eval(phi);
            }
        }
    }

    fn apply_adjoint_with(&self, side: Side, w: &[f64], mu: &[f64], out: &mut [f64]) {
        let act = self.parts(side).1;
        let n = self.grid.len();
        out.iter_mut().for_each(|x| *x = 0.0);
        for (chunk_w, chunk_s) in w.chunks_exact(n).zip(act.stencils.chunks_exact(n)) {
            for k in 0..n {
                let m = mu[k] * chunk_w[k];
                if m != 0.0 {
                    for (j, wj) in chunk_s[k].iter() {
                        out[j] += m * wj;
                    }
                }
            }
        }
    }

    /// `P_s phi` (or `P_s* phi`) at every node.
    pub fn apply(&self, side: Side, s: f64, phi: &[f64]) -> Vec<f64> {
        let w = self.tilt_weights(side, s);
        let mut out = vec![0.0; self.grid.len()];
        self.apply_with(side, &w, phi, &mut out);
        out
    }

    /// `P_s phi` with `phi` given as a function on the simplex, evaluated
    /// exactly at the images instead of interpolated.
    pub fn apply_exact(&self, side: Side, s: f64, phi: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let ens = self.parts(side).0;
        let mut buf = vec![0.0; self.grid.dim()];
        self.grid
            .nodes()
            .iter()
            .map(|v| {
                ens.atoms()
                    .iter()
                    .zip(ens.probs())
                    .map(|(g, p)| {
                        g.apply_into(v.coords(), &mut buf);
                        let norm: f64 = buf.iter().sum();
                        buf.iter_mut().for_each(|x| *x /= norm);
                        p * norm.powf(s) * phi(&buf)
                    })
                    .sum()
            })
            .collect()
    }

    fn check_s(&self, s: f64, opts: &SolverOptions) -> Result<()> {
        if !s.is_finite() || s.abs() > opts.s_guard {
            return Err(Error::SOutOfRange {
                s,
                lo: -opts.s_guard,
                hi: opts.s_guard,
            });
        }
        if let Some(cap) = opts.max_comparability {
            let rep = self.ens.check_conditions();
            if rep.c_col > cap {
                return Err(Error::ConditionViolation(format!(
                    "columnwise comparability constant {} exceeds {cap}",
                    rep.c_col
                )));
            }
            if s < 0.0 && rep.c_full > cap {
                return Err(Error::ConditionViolation(format!(
                    "negative tilt s = {s} needs full comparability, constant {} exceeds {cap}",
                    rep.c_full
                )));
            }
        }
        Ok(())
    }

    fn right_perron(&self, side: Side, w: &[f64], opts: &SolverOptions) -> Result<(f64, Vec<f64>, usize)> {
        let n = self.grid.len();
        let mut x = vec![1.0; n];
        let mut y = vec![0.0; n];
        let mut gap = f64::INFINITY;
        for it in 1..=opts.max_iter {
            self.apply_with(side, w, &x, &mut y);
            let (mut lo, mut hi, mut top) = (f64::INFINITY, 0.0_f64, 0.0_f64);
            for k in 0..n {
                if !(y[k].is_finite() && y[k] > 0.0) {
                    return Err(Error::NegativeWeight("right power iteration"));
                }
                let q = y[k] / x[k];
                lo = lo.min(q);
                hi = hi.max(q);
                top = top.max(y[k]);
            }
            y.iter_mut().for_each(|v| *v /= top);
            std::mem::swap(&mut x, &mut y);
            gap = (hi - lo) / lo;
            if gap <= opts.tol {
                return Ok((0.5 * (lo + hi), x, it));
            }
        }
        Err(Error::NoConvergence {
            iterations: opts.max_iter,
            change: gap,
        })
    }

    fn left_perron(&self, side: Side, w: &[f64], opts: &SolverOptions) -> Result<(f64, Vec<f64>, usize)> {
        let n = self.grid.len();
        let mut mu = vec![1.0 / n as f64; n];
        let mut m = vec![0.0; n];
        let mut change = f64::INFINITY;
        for it in 1..=opts.max_iter {
            self.apply_adjoint_with(side, w, &mu, &mut m);
            let total: f64 = m.iter().sum();
            if !(total.is_finite() && total > 0.0) || m.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::NegativeWeight("left power iteration"));
            }
            m.iter_mut().for_each(|x| *x /= total);
            let top = m.iter().cloned().fold(0.0, f64::max);
            change = m.iter().zip(&mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / top;
            std::mem::swap(&mut mu, &mut m);
            if change <= opts.tol {
                return Ok((total, mu, it));
            }
        }
        Err(Error::NoConvergence {
            iterations: opts.max_iter,
            change,
        })
    }

    /// Eigendata of one operator: `(kappa, r, nu, iterations, residual)`.
    fn solve_side(&self, side: Side, s: f64, opts: &SolverOptions) -> Result<SideSolution> {
        let n = self.grid.len();
        let d = self.grid.dim() as f64;
        let w = self.tilt_weights(side, s);
        let (kappa, mut r, it_r) = if s == 0.0 {
            (1.0, vec![1.0; n], 0)
        } else {
            self.right_perron(side, &w, opts)?
        };
        let (kappa_left, nu, it_l) = self.left_perron(side, &w, opts)?;
        let scale = d.powf(-s) / self.grid.interpolate(&r, &vec![1.0 / d; self.grid.dim()]);
        r.iter_mut().for_each(|x| *x *= scale);

        let mut pr = vec![0.0; n];
        self.apply_with(side, &w, &r, &mut pr);
        let rmax = r.iter().cloned().fold(0.0, f64::max);
        let residual = pr
            .iter()
            .zip(&r)
            .map(|(a, b)| (a - kappa * b).abs())
            .fold(0.0, f64::max)
            / (kappa * rmax);
        let mut nup = vec![0.0; n];
        self.apply_adjoint_with(side, &w, &nu, &mut nup);
        let residual_left = nup
            .iter()
            .zip(&nu)
            .map(|(a, b)| (a - kappa * b).abs())
            .sum::<f64>()
            / kappa;
        Ok(SideSolution {
            kappa,
            kappa_left,
            r,
            nu,
            residual,
            residual_left,
            iterations: it_r.max(it_l),
        })
    }

    pub fn solve(self: &Arc<Self>, s: f64, opts: &SolverOptions) -> Result<SpectralSolution> {
        self.check_s(s, opts)?;
        let f = self.solve_side(Side::Forward, s, opts)?;
        let c = self.solve_side(Side::Conjugate, s, opts)?;
        let mut sol = SpectralSolution {
            ctx: Arc::clone(self),
            s,
            kappa: f.kappa,
            kappa_conjugate: c.kappa,
            kappa_left: f.kappa_left,
            r: f.r,
            nu: f.nu,
            r_star: c.r,
            nu_star: c.nu,
            residual: f.residual,
            residual_conjugate: c.residual,
            residual_left: f.residual_left.max(c.residual_left),
            normalization_gap: 0.0,
            normalization_gap_star: 0.0,
            iterations: f.iterations.max(c.iterations),
        };
        sol.normalization_gap = sol.integral_gap(Side::Forward);
        sol.normalization_gap_star = sol.integral_gap(Side::Conjugate);
        Ok(sol)
    }
}

struct SideSolution {
    kappa: f64,
    kappa_left: f64,
    r: Vec<f64>,
    nu: Vec<f64>,
    residual: f64,
    residual_left: f64,
    iterations: usize,
}

/// Perron data of `P_s` and `P_s*` at one `s`.
#[derive(Clone, Debug)]
pub struct SpectralSolution {
    ctx: Arc<SpectralContext>,
    pub s: f64,
    /// Certified Perron root of the discretized `P_s`.
    pub kappa: f64,
    /// The same from the conjugate operator; equal in the continuum.
    pub kappa_conjugate: f64,
    /// Growth rate seen by the eigenmeasure iteration.
    pub kappa_left: f64,
    pub r: Vec<f64>,
    /// Probability weights on nodes.
    pub nu: Vec<f64>,
    pub r_star: Vec<f64>,
    pub nu_star: Vec<f64>,
    /// `max |P_s r - kappa r| / (kappa max r)`.
    pub residual: f64,
    pub residual_conjugate: f64,
    /// Total-variation residual of both eigenmeasures.
    pub residual_left: f64,
    /// Max relative gap between `r_s` and `int <v,u>^s dnu_s*(u)` on nodes.
    pub normalization_gap: f64,
    pub normalization_gap_star: f64,
    pub iterations: usize,
}

/// Summary without the grid functions.
#[derive(Clone, Debug, Serialize)]
pub struct SpectralSummary {
    pub s: f64,
    pub kappa: f64,
    pub log_kappa: f64,
    pub kappa_conjugate: f64,
    pub nu_r: f64,
    pub residual: f64,
    pub residual_conjugate: f64,
    pub residual_left: f64,
    pub normalization_gap: f64,
    pub normalization_gap_star: f64,
    pub iterations: usize,
    pub nodes: usize,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x^s` with the conventions `0^0 = 1` and `0^s = +inf` for `s < 0`.
#[inline]
fn pow_s(x: f64, s: f64) -> f64 {
    if s == 0.0 {
        1.0
    } else {
        x.powf(s)
    }
}

impl SpectralSolution {
    pub fn context(&self) -> &Arc<SpectralContext> {
        &self.ctx
    }

    pub fn grid(&self) -> &SimplexGrid {
        &self.ctx.grid
    }

    pub fn log_kappa(&self) -> f64 {
        self.kappa.ln()
    }

    fn homogeneous(&self, values: &[f64], v: &[f64]) -> f64 {
        let norm: f64 = v.iter().sum();
        let u: Vec<f64> = v.iter().map(|x| x / norm).collect();
        pow_s(norm, self.s) * self.ctx.grid.interpolate(values, &u)
    }

    /// `r_s(v)` for any nonzero `v` in the cone, by homogeneity.
    pub fn r_at(&self, v: &[f64]) -> f64 {
        self.homogeneous(&self.r, v)
    }

    pub fn r_star_at(&self, v: &[f64]) -> f64 {
        self.homogeneous(&self.r_star, v)
    }

    /// `int <v,u>^s dnu_s*(u)`.
    pub fn r_integral(&self, v: &[f64]) -> f64 {
        self.integral_against(&self.nu_star, v)
    }

    /// `r_s*(f) = int <f,u>^s dnu_s(u)`.
    pub fn r_star_integral(&self, f: &[f64]) -> f64 {
        self.integral_against(&self.nu, f)
    }

    fn integral_against(&self, weights: &[f64], v: &[f64]) -> f64 {
        self.ctx
            .grid
            .nodes()
            .iter()
            .zip(weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(u, w)| w * pow_s(dot(u.coords(), v), self.s))
            .sum()
    }

    fn integral_gap(&self, side: Side) -> f64 {
        let (values, weights) = match side {
            Side::Forward => (&self.r, &self.nu_star),
            Side::Conjugate => (&self.r_star, &self.nu),
        };
        self.ctx
            .grid
            .nodes()
            .iter()
            .zip(values)
            .map(|(v, r)| {
                let i = self.integral_against(weights, v.coords());
                ((r - i) / i).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `nu_s(phi)` for a function on the simplex.
    pub fn nu_of(&self, phi: impl Fn(&[f64]) -> f64) -> f64 {
        self.ctx
            .grid
            .nodes()
            .iter()
            .zip(&self.nu)
            .map(|(v, w)| w * phi(v.coords()))
            .sum()
    }

    /// `nu_s(r_s)`.
    pub fn nu_r(&self) -> f64 {
        dot(&self.nu, &self.r)
    }

    /// `pi_s(phi) = nu_s(phi r_s) / nu_s(r_s)` for a grid function.
    pub fn stationary_pi(&self, phi: &[f64]) -> f64 {
        self.nu
            .iter()
            .zip(&self.r)
            .zip(phi)
            .map(|((n, r), p)| n * r * p)
            .sum::<f64>()
            / self.nu_r()
    }

    pub fn stationary_pi_fn(&self, phi: impl Fn(&[f64]) -> f64) -> f64 {
        self.stationary_pi(&self.ctx.grid.tabulate(phi))
    }

    /// `int phi(u) <f,u>^s dnu_s(u)`, the target-function factor of the
    /// sharp large-deviation prefactors.
    pub fn nu_weighted(&self, f: &[f64], phi: impl Fn(&[f64]) -> f64) -> f64 {
        self.ctx
            .grid
            .nodes()
            .iter()
            .zip(&self.nu)
            .filter(|(_, w)| **w > 0.0)
            .map(|(u, w)| w * phi(u.coords()) * pow_s(dot(u.coords(), f), self.s))
            .sum()
    }

    /// `r_{s,f}` on nodes and the functional `nu_{s,f}`.
    pub fn coefficient_eigendata(&self, f: &[f64]) -> Result<CoefficientEigendata> {
        if f.len() != self.ctx.grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ctx.grid.dim(),
                found: f.len(),
            });
        }
        if f.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || f.iter().all(|x| *x == 0.0) {
            return Err(Error::InvalidArgument("f must be a nonzero nonnegative vector".into()));
        }
        if self.s < 0.0 && f.iter().any(|x| *x == 0.0) {
            return Err(Error::InvalidArgument("negative tilts need f strictly positive".into()));
        }
        let nu_r = self.nu_r();
        let mut r_sf = Vec::with_capacity(self.r.len());
        let mut weights = Vec::with_capacity(self.r.len());
        for ((v, r), nu) in self.ctx.grid.nodes().iter().zip(&self.r).zip(&self.nu) {
            let fv = pow_s(dot(v.coords(), f), self.s);
            r_sf.push(r / fv);
            weights.push(if *nu > 0.0 { nu * fv / nu_r } else { 0.0 });
        }
        Ok(CoefficientEigendata {
            f: f.to_vec(),
            r_sf,
            nu_sf: weights,
        })
    }

    /// One step of `Q_s` from `v`: tilted atom probabilities, exactly
    /// normalized, and `Z(v) / (kappa r_s(v))`.
    pub fn markov_kernel(&self, v: &SimplexPoint) -> Vec<KernelEntry> {
        let ens = &self.ctx.ens;
        let mut buf = vec![0.0; v.dim()];
        let raw: Vec<f64> = ens
            .atoms()
            .iter()
            .zip(ens.probs())
            .map(|(g, p)| {
                g.apply_into(v.coords(), &mut buf);
                let norm: f64 = buf.iter().sum();
                buf.iter_mut().for_each(|x| *x /= norm);
                p * pow_s(norm, self.s) * self.ctx.grid.interpolate(&self.r, &buf)
            })
            .collect();
        let z: f64 = raw.iter().sum();
        let correction = z / (self.kappa * self.ctx.grid.interpolate(&self.r, v.coords()));
        raw.iter()
            .enumerate()
            .map(|(atom, w)| KernelEntry {
                atom,
                prob: w / z,
                weight_correction: correction,
            })
            .collect()
    }

    /// `|| kappa^{-n} P_s^n phi - r_s nu_s(phi) / nu_s(r_s) ||_inf` for
    /// `n = 1..=n_max`.
    pub fn spectral_gap_profile(&self, phi: &[f64], n_max: usize) -> Vec<f64> {
        let ctx = &self.ctx;
        let w = ctx.tilt_weights(Side::Forward, self.s);
        let limit: Vec<f64> = {
            let c = dot(&self.nu, phi) / self.nu_r();
            self.r.iter().map(|r| c * r).collect()
        };
        let mut x = phi.to_vec();
        let mut y = vec![0.0; x.len()];
        let mut out = Vec::with_capacity(n_max);
        for _ in 0..n_max {
            ctx.apply_with(Side::Forward, &w, &x, &mut y);
            y.iter_mut().for_each(|v| *v /= self.kappa);
            std::mem::swap(&mut x, &mut y);
            out.push(x.iter().zip(&limit).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        out
    }

    pub fn summary(&self) -> SpectralSummary {
        SpectralSummary {
            s: self.s,
            kappa: self.kappa,
            log_kappa: self.log_kappa(),
            kappa_conjugate: self.kappa_conjugate,
            nu_r: self.nu_r(),
            residual: self.residual,
            residual_conjugate: self.residual_conjugate,
            residual_left: self.residual_left,
            normalization_gap: self.normalization_gap,
            normalization_gap_star: self.normalization_gap_star,
            iterations: self.iterations,
            nodes: self.r.len(),
        }
    }

    /// Columns: `v_1..v_d, r_s, nu_s, r_s_star, nu_s_star`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.ctx.grid.dim();
        let mut header: Vec<String> = (1..=d).map(|i| format!("v_{i}")).collect();
        header.extend(["r_s", "nu_s", "r_s_star", "nu_s_star"].map(String::from));
        writeln!(w, "# s={:e} kappa={:e} residual={:e}", self.s, self.kappa, self.residual)?;
        writeln!(w, "{}", header.join(","))?;
        for (k, v) in self.ctx.grid.nodes().iter().enumerate() {
            let coords: Vec<String> = v.coords().iter().map(|x| format!("{x:e}")).collect();
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e}",
                coords.join(","),
                self.r[k],
                self.nu[k],
                self.r_star[k],
                self.nu_star[k]
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CoefficientEigendata {
    pub f: Vec<f64>,
    /// `r_s(v) / <f,v>^s` on nodes.
    pub r_sf: Vec<f64>,
    /// Node weights of `nu_{s,f}`: `nu_s(<f,.>^s phi) / nu_s(r_s)`.
    pub nu_sf: Vec<f64>,
}

impl CoefficientEigendata {
    pub fn nu_sf_of(&self, phi: &[f64]) -> f64 {
        self.nu_sf
            .iter()
            .zip(phi)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, p)| w * p)
            .sum()
    }

    /// `nu_{s,f}(r_{s,f})`, equal to one.
    pub fn pairing(&self) -> f64 {
        self.nu_sf_of(&self.r_sf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelEntry {
    pub atom: usize,
    pub prob: f64,
    pub weight_correction: f64,
}

/// Convenience wrapper: builds the context and solves at one `s`.
pub fn solve_spectral(ens: &FiniteEnsemble, s: f64, grid: SimplexGrid, tol: f64) -> Result<SpectralSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let ctx = SpectralContext::new(ens.clone(), grid)?;
    ctx.solve(
        s,
        &SolverOptions {
            tol,
            ..SolverOptions::default()
        },
    )
}

/// Dominant eigenvalue of the discretized `R_{s,z}` compared with
/// `e^{-qz} kappa(s+z) / kappa(s)` from independent solves.
#[derive(Clone, Debug, Serialize)]
pub struct PerturbedCheck {
    pub s: f64,
    pub z: f64,
    pub q: f64,
    pub lambda_sz: f64,
    pub predicted: f64,
    pub discrepancy: f64,
}

pub fn perturbed_eigenvalue_check(
    ctx: &Arc<SpectralContext>,
    s: f64,
    z: f64,
    q: f64,
    opts: &SolverOptions,
) -> Result<PerturbedCheck> {
    let sol_s = ctx.solve(s, opts)?;
    let sol_sz = ctx.solve(s + z, opts)?;
    let grid = &ctx.grid;
    let n = grid.len();
    let ens = &ctx.ens;
    let act = &ctx.fwd;
    // normalized tilted kernel, then the extra factor e^{z(log||gv|| - q)}
    let mut w = vec![0.0; ens.len() * n];
    for k in 0..n {
        let mut z_norm = 0.0;
        for (a, p) in ens.probs().iter().enumerate() {
            let i = a * n + k;
            let t = p * (s * act.log_norms[i]).exp() * act.stencils[i].eval(&sol_s.r);
            w[i] = t;
            z_norm += t;
        }
        for a in 0..ens.len() {
            let i = a * n + k;
            w[i] *= (z * (act.log_norms[i] - q)).exp() / z_norm;
        }
    }
    let (lambda_sz, _, _) = ctx.right_perron(Side::Forward, &w, opts)?;
    let predicted = (-q * z).exp() * sol_sz.kappa / sol_s.kappa;
    Ok(PerturbedCheck {
        s,
        z,
        q,
        lambda_sz,
        predicted,
        discrepancy: (lambda_sz - predicted).abs(),
    })
}

/// `E ||G_n||^s` by enumerating all `|atoms|^n` products.
pub fn exact_norm_moment(ens: &FiniteEnsemble, n: usize, s: f64) -> f64 {
    fn rec(ens: &FiniteEnsemble, acc: &crate::cone::PositiveMatrix, p: f64, left: usize, s: f64) -> f64 {
        if left == 0 {
            return p * acc.norm().powf(s);
        }
        ens.atoms()
            .iter()
            .zip(ens.probs())
            .map(|(g, q)| rec(ens, &g.mul(acc), p * q, left - 1, s))
            .sum()
    }
    let mut total = 0.0;
    for (g, p) in ens.atoms().iter().zip(ens.probs()) {
        total += rec(ens, g, *p, n - 1, s);
    }
    total
}
