//! `Lambda(s) = log kappa(s)`, its derivatives, the Legendre transform and
//! the Cramer series.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::ensemble::ScalarReference;
use crate::error::{Error, Result};
use crate::spectral::{SolverOptions, SpectralContext};
use crate::spline::CubicSpline;

/// Anything that can evaluate `Lambda(s)`.
pub trait CgfSource: Send + Sync {
    fn lambda(&self, s: f64) -> Result<f64>;

    /// Exact derivative when the source knows it.
    fn exact_derivative(&self, _k: usize, _s: f64) -> Option<f64> {
        None
    }
}

/// `Lambda` from spectral solves on a grid.
pub struct SpectralCgf {
    pub ctx: Arc<SpectralContext>,
    pub opts: SolverOptions,
}

impl CgfSource for SpectralCgf {
    fn lambda(&self, s: f64) -> Result<f64> {
        Ok(self.ctx.solve(s, &self.opts)?.log_kappa())
    }
}

impl CgfSource for ScalarReference {
    fn lambda(&self, s: f64) -> Result<f64> {
        Ok(ScalarReference::lambda(self, s))
    }

    fn exact_derivative(&self, k: usize, s: f64) -> Option<f64> {
        (k <= 5).then(|| self.derivative(k, s))
    }
}

/// Step for central differences of order `k`.
fn fd_step(k: usize) -> f64 {
    match k {
        1 => 1e-3,
        2 | 3 => 1e-2,
        _ => 5e-2,
    }
}

fn central(f: &dyn Fn(f64) -> Result<f64>, k: usize, s: f64, h: f64) -> Result<f64> {
    let v = |j: f64| f(s + j * h);
    Ok(match k {
        1 => (v(1.0)? - v(-1.0)?) / (2.0 * h),
        2 => (v(1.0)? - 2.0 * v(0.0)? + v(-1.0)?) / (h * h),
        3 => (v(2.0)? - 2.0 * v(1.0)? + 2.0 * v(-1.0)? - v(-2.0)?) / (2.0 * h.powi(3)),
        4 => (v(2.0)? - 4.0 * v(1.0)? + 6.0 * v(0.0)? - 4.0 * v(-1.0)? + v(-2.0)?) / h.powi(4),
        5 => {
            (v(3.0)? - 4.0 * v(2.0)? + 5.0 * v(1.0)? - 5.0 * v(-1.0)? + 4.0 * v(-2.0)? - v(-3.0)?)
                / (2.0 * h.powi(5))
        }
        _ => return Err(Error::InvalidArgument(format!("no difference stencil of order {k}"))),
    })
}

/// Central difference with one Richardson halving.
pub fn richardson_derivative(f: &dyn Fn(f64) -> Result<f64>, k: usize, s: f64, h: f64) -> Result<f64> {
    let coarse = central(f, k, s, h)?;
    let fine = central(f, k, s, 0.5 * h)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Sampled `Lambda` with spline and difference derivatives.
pub struct CumulantTable {
    source: Arc<dyn CgfSource>,
    pub s_samples: Vec<f64>,
    pub lambda: Vec<f64>,
    spline: CubicSpline,
    pub lambda1: f64,
    pub sigma2: f64,
    pub m3: f64,
    /// Max |spline - difference| over the samples for orders 1, 2, 3.
    pub spline_fd_discrepancy: [f64; 3],
    /// Smallest discrete second difference of the samples (convexity check).
    pub min_second_difference: f64,
}

impl std::fmt::Debug for CumulantTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CumulantTable")
            .field("s_samples", &self.s_samples.len())
            .field("lambda1", &self.lambda1)
            .field("sigma2", &self.sigma2)
            .field("m3", &self.m3)
            .field("spline_fd_discrepancy", &self.spline_fd_discrepancy)
            .finish()
    }
}

/// `n` evenly spaced samples on `[lo, hi]`.
pub fn default_samples(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn lambda_curve(source: Arc<dyn CgfSource>, s_samples: &[f64]) -> Result<CumulantTable> {
    if s_samples.len() < 5 || s_samples.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("need at least five increasing s samples".into()));
    }
    if !s_samples.iter().any(|s| *s == 0.0) || s_samples[0] >= 0.0 || *s_samples.last().unwrap() <= 0.0 {
        return Err(Error::InvalidArgument("s samples must contain 0 as an interior point".into()));
    }
    let lambda: Vec<f64> = s_samples
        .par_iter()
        .map(|&s| source.lambda(s))
        .collect::<Result<_>>()?;

    let src = Arc::clone(&source);
    let f = move |s: f64| src.lambda(s);
    let d = |k: usize, s: f64| richardson_derivative(&f, k, s, fd_step(k));
    let lo = s_samples[0];
    let hi = *s_samples.last().unwrap();
    let spline = CubicSpline::clamped(s_samples, &lambda, d(1, lo)?, d(1, hi)?)?;

    let mut disc = [0.0_f64; 3];
    for (k, slot) in disc.iter_mut().enumerate() {
        let diffs: Vec<f64> = s_samples
            .par_iter()
            .map(|&s| Ok((spline.eval(k + 1, s) - d(k + 1, s)?).abs()))
            .collect::<Result<_>>()?;
        *slot = diffs.into_iter().fold(0.0, f64::max);
    }
    let min_second_difference = lambda
        .windows(3)
        .map(|w| w[0] - 2.0 * w[1] + w[2])
        .fold(f64::INFINITY, f64::min);
    if min_second_difference < -1e-8 {
        log::warn!("Lambda samples are not convex: second difference {min_second_difference:e}");
    }

    Ok(CumulantTable {
        lambda1: d(1, 0.0)?,
        sigma2: d(2, 0.0)?,
        m3: d(3, 0.0)?,
        source,
        s_samples: s_samples.to_vec(),
        lambda,
        spline,
        spline_fd_discrepancy: disc,
        min_second_difference,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LegendrePoint {
    pub q: f64,
    pub s_star: f64,
    pub rate: f64,
}

impl CumulantTable {
    pub fn source(&self) -> &Arc<dyn CgfSource> {
        &self.source
    }

    /// `(lambda, sigma^2, m_3)`.
    pub fn cumulants(&self) -> (f64, f64, f64) {
        (self.lambda1, self.sigma2, self.m3)
    }

    pub fn lambda_at(&self, s: f64) -> Result<f64> {
        self.source.lambda(s)
    }

    /// `gamma_k(s) = Lambda^{(k)}(s)` for `k` in `0..=5`, by Richardson
    /// central differences on direct evaluations.
    pub fn gamma(&self, k: usize, s: f64) -> Result<f64> {
        if k == 0 {
            return self.source.lambda(s);
        }
        let src = &self.source;
        let f = |t: f64| src.lambda(t);
        richardson_derivative(&f, k, s, fd_step(k))
    }

    pub fn spline_derivative(&self, k: usize, s: f64) -> f64 {
        self.spline.eval(k, s)
    }

    /// `sigma_s = sqrt(Lambda''(s))`.
    pub fn sigma_s(&self, s: f64) -> Result<f64> {
        let g2 = self.gamma(2, s)?;
        if g2 < 1e-10 {
            return Err(Error::DerivativeUnstable { gamma2: g2 });
        }
        Ok(g2.sqrt())
    }

    /// Range of `Lambda'` over the sampled interval.
    pub fn q_range(&self) -> (f64, f64) {
        let (lo, hi) = self.spline.range();
        (self.spline.eval(1, lo), self.spline.eval(1, hi))
    }

    /// Solves `Lambda'(s) = q` and returns `Lambda*(q) = s q - Lambda(s)`.
    pub fn legendre(&self, q: f64) -> Result<LegendrePoint> {
        let (qlo, qhi) = self.q_range();
        if !(q >= qlo && q <= qhi) {
            return Err(Error::QOutOfRange { q, lo: qlo, hi: qhi });
        }
        let (mut a, mut b) = self.spline.range();
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if self.spline.eval(1, m) < q {
                a = m;
            } else {
                b = m;
            }
            if b - a < 1e-9 {
                break;
            }
        }
        let mut s = 0.5 * (a + b);
        for _ in 0..20 {
            let g1 = self.gamma(1, s)?;
            let g2 = self.gamma(2, s)?;
            if g2 < 1e-10 {
                return Err(Error::DerivativeUnstable { gamma2: g2 });
            }
            let step = (g1 - q) / g2;
            s -= step;
            if step.abs() < 1e-13 {
                break;
            }
        }
        let rate = s * q - self.source.lambda(s)?;
        Ok(LegendrePoint { q, s_star: s, rate })
    }

    /// `Lambda*` at `q = Lambda'(s)`, together with that `q`.
    pub fn legendre_at_s(&self, s: f64) -> Result<LegendrePoint> {
        let q = self.gamma(1, s)?;
        Ok(LegendrePoint {
            q,
            s_star: s,
            rate: s * q - self.source.lambda(s)?,
        })
    }

    /// Truncated Cramer series `zeta_s(t)` from `gamma_2..gamma_5` at `s`.
    pub fn cramer_series(&self, s: f64, t: f64) -> Result<f64> {
        let g = [
            self.gamma(2, s)?,
            self.gamma(3, s)?,
            self.gamma(4, s)?,
            self.gamma(5, s)?,
        ];
        cramer_series_from(g, t)
    }

    /// CSV: `s,Lambda,Lambda',Lambda'',Lambda'''` (spline derivatives).
    pub fn write_lambda_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "s,Lambda,Lambda',Lambda'',Lambda'''")?;
        for (s, l) in self.s_samples.iter().zip(&self.lambda) {
            writeln!(
                w,
                "{s:e},{l:e},{:e},{:e},{:e}",
                self.spline.eval(1, *s),
                self.spline.eval(2, *s),
                self.spline.eval(3, *s)
            )?;
        }
        Ok(())
    }

    /// CSV: `q,s_star,rate`.
    pub fn write_rate_csv<W: Write>(&self, mut w: W, points: &[LegendrePoint]) -> std::io::Result<()> {
        writeln!(w, "q,s_star,rate")?;
        for p in points {
            writeln!(w, "{:e},{:e},{:e}", p.q, p.s_star, p.rate)?;
        }
        Ok(())
    }
}

/// `zeta(t)` from `[gamma_2, gamma_3, gamma_4, gamma_5]`.
pub fn cramer_series_from(g: [f64; 4], t: f64) -> Result<f64> {
    let [g2, g3, g4, g5] = g;
    if g2 < 1e-10 {
        return Err(Error::DerivativeUnstable { gamma2: g2 });
    }
    Ok(g3 / (6.0 * g2.powf(1.5))
        + (g4 * g2 - 3.0 * g3 * g3) / (24.0 * g2.powi(3)) * t
        + (g5 * g2 * g2 - 10.0 * g4 * g3 * g2 + 15.0 * g3.powi(3)) / (120.0 * g2.powf(4.5)) * t * t)
}
