//! Positive matrices acting on the L1 simplex.
//!
//! Everything here is exact and deterministic: the matrix norm is the sum of
//! all entries, vectors live on `S = {v >= 0, sum v = 1}`, and the projective
//! action is `g.v = gv / ||gv||`. The Hilbert cross-ratio metric on `S` is
//! the distance under which every positive matrix is a strict contraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the coordinate sum of a [`SimplexPoint`].
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Default relative tolerance for the Perron root.
pub const SPECTRAL_RADIUS_TOL: f64 = 1e-10;

const CW_ITERATION_CAP: usize = 10_000;

/// A `d x d` matrix with strictly positive entries, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositiveMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl PositiveMatrix {
    /// Builds a matrix from row-major entries. Rejects zero, negative and
    /// non-finite entries.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimension must be at least 2, got {dim}"
            )));
        }
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: entries.len(),
            });
        }
        for (k, &x) in entries.iter().enumerate() {
            if !(x.is_finite() && x > 0.0) {
                return Err(Error::NonPositiveEntry {
                    atom: 0,
                    row: k / dim,
                    col: k % dim,
                    value: x,
                });
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Self::new(dim, entries)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    /// `||g|| = sum_{i,j} g^{i,j}`.
    pub fn norm(&self) -> f64 {
        self.entries.iter().sum()
    }

    /// `log N(g) = log max(||g||, 1/||g||) = |log ||g|| |`.
    pub fn log_n(&self) -> f64 {
        self.norm().ln().abs()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.dim, self.entries.iter().map(|x| x * c).collect())
    }

    pub fn transpose(&self) -> Self {
        let d = self.dim;
        let mut entries = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                entries[j * d + i] = self.entries[i * d + j];
            }
        }
        Self { dim: d, entries }
    }

    /// Matrix product `self * rhs`.
    pub fn mul(&self, rhs: &Self) -> Self {
        let d = self.dim;
        assert_eq!(d, rhs.dim, "dimension mismatch in matrix product");
        let mut entries = vec![0.0; d * d];
        mat_mul_into(d, &self.entries, &rhs.entries, &mut entries);
        Self { dim: d, entries }
    }

    /// Writes `g x` into `out` for an arbitrary vector `x`.
    #[inline]
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        mat_vec_into(self.dim, &self.entries, x, out);
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply_into(x, &mut out);
        out
    }

    /// Projective action `g.v = gv / ||gv||`.
    pub fn act(&self, v: &SimplexPoint) -> SimplexPoint {
        let mut gv = self.apply(v.coords());
        let norm: f64 = gv.iter().sum();
        gv.iter_mut().for_each(|x| *x /= norm);
        SimplexPoint { coords: gv }
    }

    /// `log ||g v||` with the L1 vector norm.
    pub fn log_norm_on(&self, v: &SimplexPoint) -> f64 {
        self.apply(v.coords()).iter().sum::<f64>().ln()
    }

    /// Comparability constant. With `columnwise == false` this is
    /// `max_{i,j} g / min_{i,j} g`; otherwise the worst column ratio
    /// `max_j (max_i g^{i,j} / min_i g^{i,j})`.
    pub fn kesten_ratio(&self, columnwise: bool) -> f64 {
        let d = self.dim;
        if columnwise {
            (0..d)
                .map(|j| {
                    let col = (0..d).map(|i| self.get(i, j));
                    let (lo, hi) = col.fold((f64::INFINITY, 0.0_f64), |(lo, hi), x| {
                        (lo.min(x), hi.max(x))
                    });
                    hi / lo
                })
                .fold(1.0, f64::max)
        } else {
            let lo = self.entries.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = self.entries.iter().cloned().fold(0.0, f64::max);
            hi / lo
        }
    }

    /// Perron root by power iteration, stopped on the Collatz-Wielandt gap.
    pub fn spectral_radius(&self, tol: f64) -> Result<f64> {
        Ok(self.collatz_wielandt(tol)?.rho)
    }

    pub fn collatz_wielandt(&self, tol: f64) -> Result<CollatzWielandt> {
        collatz_wielandt_raw(self.dim, &self.entries, tol, CW_ITERATION_CAP)
    }
}

/// Two-sided certificate for the Perron root of a positive matrix.
#[derive(Clone, Debug)]
pub struct CollatzWielandt {
    pub rho: f64,
    /// `min_i (gv)_i / v_i` at the returned direction.
    pub lower: f64,
    /// `max_i (gv)_i / v_i` at the returned direction.
    pub upper: f64,
    pub direction: SimplexPoint,
    pub iterations: usize,
}

/// Power iteration from the barycenter on a raw row-major positive matrix.
pub(crate) fn collatz_wielandt_raw(
    d: usize,
    m: &[f64],
    tol: f64,
    cap: usize,
) -> Result<CollatzWielandt> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let mut v = vec![1.0 / d as f64; d];
    let mut mv = vec![0.0; d];
    let mut gap = f64::INFINITY;
    for it in 0..cap {
        mat_vec_into(d, m, &v, &mut mv);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for i in 0..d {
            let r = mv[i] / v[i];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        gap = hi - lo;
        if gap <= tol * lo {
            return Ok(CollatzWielandt {
                rho: 0.5 * (lo + hi),
                lower: lo,
                upper: hi,
                direction: SimplexPoint { coords: v },
                iterations: it + 1,
            });
        }
        let s: f64 = mv.iter().sum();
        for i in 0..d {
            v[i] = mv[i] / s;
        }
    }
    Err(Error::IterationBudgetExceeded {
        what: "Collatz-Wielandt power iteration",
        budget: cap,
        gap,
    })
}

#[inline]
pub(crate) fn mat_vec_into(d: usize, m: &[f64], x: &[f64], out: &mut [f64]) {
    for i in 0..d {
        let row = &m[i * d..(i + 1) * d];
        out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

#[inline]
pub(crate) fn mat_mul_into(d: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = acc;
        }
    }
}

/// A point of the L1 simplex `S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexPoint {
    coords: Vec<f64>,
}

impl SimplexPoint {
    /// Validates nonnegativity and `|sum - 1| <= 1e-12`.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidSimplexPoint(format!(
                "dimension must be at least 2, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidSimplexPoint(format!(
                "coordinates must be finite and nonnegative: {coords:?}"
            )));
        }
        let sum: f64 = coords.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidSimplexPoint(format!(
                "coordinates sum to {sum}, not 1"
            )));
        }
        Ok(Self { coords })
    }

    /// Normalizes a nonzero nonnegative vector onto `S`.
    pub fn normalize(x: &[f64]) -> Result<Self> {
        if x.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidSimplexPoint(format!(
                "cannot normalize {x:?}: entries must be finite and nonnegative"
            )));
        }
        let sum: f64 = x.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidSimplexPoint("cannot normalize the zero vector".into()));
        }
        Self::new(x.iter().map(|c| c / sum).collect())
    }

    pub fn barycenter(dim: usize) -> Self {
        Self {
            coords: vec![1.0 / dim as f64; dim],
        }
    }

    /// Basis vector `e_i`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut coords = vec![0.0; dim];
        coords[i] = 1.0;
        Self { coords }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn min_coord(&self) -> f64 {
        self.coords.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Membership in `S_eps`.
    pub fn is_interior(&self, eps: f64) -> bool {
        self.min_coord() >= eps
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.coords.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub(crate) fn from_raw(coords: Vec<f64>) -> Self {
        Self { coords }
    }
}

/// `m(u, v) = sup{t > 0 : t v_i <= u_i for all i}`.
fn max_scaling(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .filter(|(_, &vi)| vi > 0.0)
        .map(|(&ui, &vi)| ui / vi)
        .fold(f64::INFINITY, f64::min)
}

/// Hilbert cross-ratio metric on `S`, with values in `[0, 1]`.
pub fn hilbert_distance(u: &SimplexPoint, v: &SimplexPoint) -> f64 {
    assert_eq!(u.dim(), v.dim(), "dimension mismatch in hilbert_distance");
    let p = max_scaling(u.coords(), v.coords()) * max_scaling(v.coords(), u.coords());
    ((1.0 - p) / (1.0 + p)).clamp(0.0, 1.0)
}
