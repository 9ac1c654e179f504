//! Discretization of the simplex for d = 2 and d = 3.
//!
//! d = 2 uses nodes `(k/r, 1 - k/r)`; d = 3 uses the barycentric lattice
//! `(i/r, j/r, 1 - (i+j)/r)`. Interpolation is piecewise linear in
//! barycentric coordinates, so it is exact on linear functions and maps
//! nonnegative data to nonnegative values.

use crate::cone::SimplexPoint;
use crate::error::{Error, Result};

pub const MIN_RESOLUTION: usize = 8;

/// At most three nodes with convex weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stencil {
    pub idx: [u32; 3],
    pub w: [f64; 3],
    pub len: u8,
}

impl Stencil {
    #[inline]
    pub fn eval(&self, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.len as usize {
            acc += self.w[k] * values[self.idx[k] as usize];
        }
        acc
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len as usize).map(move |k| (self.idx[k] as usize, self.w[k]))
    }
}

#[derive(Clone, Debug)]
pub struct SimplexGrid {
    dim: usize,
    resolution: usize,
    nodes: Vec<SimplexPoint>,
    weights: Vec<f64>,
}

impl SimplexGrid {
    pub fn new(dim: usize, resolution: usize) -> Result<Self> {
        if resolution < MIN_RESOLUTION {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be at least {MIN_RESOLUTION}, got {resolution}"
            )));
        }
        let r = resolution as f64;
        match dim {
            2 => {
                let nodes = (0..=resolution)
                    .map(|k| {
                        let t = k as f64 / r;
                        SimplexPoint::from_raw(vec![t, 1.0 - t])
                    })
                    .collect();
                // trapezoid rule, total mass 1 (length of the parameter interval)
                let mut weights = vec![1.0 / r; resolution + 1];
                weights[0] *= 0.5;
                weights[resolution] *= 0.5;
                Ok(Self {
                    dim,
                    resolution,
                    nodes,
                    weights,
                })
            }
            3 => {
                let mut nodes = Vec::with_capacity((resolution + 1) * (resolution + 2) / 2);
                for i in 0..=resolution {
                    for j in 0..=resolution - i {
                        let a = i as f64 / r;
                        let b = j as f64 / r;
                        nodes.push(SimplexPoint::from_raw(vec![a, b, (1.0 - a - b).max(0.0)]));
                    }
                }
                // hat-function integrals in the (v1, v2) chart: total mass 1/2
                let mut weights = vec![0.0; nodes.len()];
                let third = 1.0 / (6.0 * r * r);
                let mut g = Self {
                    dim,
                    resolution,
                    nodes,
                    weights: Vec::new(),
                };
                for i in 0..resolution {
                    for j in 0..resolution - i {
                        for n in [g.index3(i, j), g.index3(i + 1, j), g.index3(i, j + 1)] {
                            weights[n] += third;
                        }
                        if i + j + 2 <= resolution {
                            for n in [g.index3(i + 1, j + 1), g.index3(i + 1, j), g.index3(i, j + 1)] {
                                weights[n] += third;
                            }
                        }
                    }
                }
                g.weights = weights;
                Ok(g)
            }
            d => Err(Error::UnsupportedDimension(d)),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[SimplexPoint] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> &SimplexPoint {
        &self.nodes[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    fn index3(&self, i: usize, j: usize) -> usize {
        // rows i' < i hold r + 1 - i' nodes each
        i * (self.resolution + 1) - i * i.saturating_sub(1) / 2 + j
    }

    /// Interpolation stencil for an arbitrary point of the simplex.
    pub fn stencil(&self, v: &[f64]) -> Stencil {
        debug_assert_eq!(v.len(), self.dim);
        let r = self.resolution;
        let rf = r as f64;
        match self.dim {
            2 => {
                let t = (v[0] * rf).clamp(0.0, rf);
                let k = (t.floor() as usize).min(r - 1);
                let a = t - k as f64;
                Stencil {
                    idx: [k as u32, (k + 1) as u32, 0],
                    w: [1.0 - a, a, 0.0],
                    len: 2,
                }
            }
            _ => {
                let mut x = v[0].max(0.0) * rf;
                let mut y = v[1].max(0.0) * rf;
                if x + y > rf {
                    let s = rf / (x + y);
                    x *= s;
                    y *= s;
                }
                let i0 = (x.floor() as usize).min(r - 1);
                let j0 = (y.floor() as usize).min(r - 1 - i0);
                let a = x - i0 as f64;
                let b = y - j0 as f64;
                if a + b <= 1.0 || i0 + j0 + 2 > r {
                    let c = (1.0 - a - b).max(0.0);
                    let tot = c + a + b;
                    Stencil {
                        idx: [
                            self.index3(i0, j0) as u32,
                            self.index3(i0 + 1, j0) as u32,
                            self.index3(i0, j0 + 1) as u32,
                        ],
                        w: [c / tot, a / tot, b / tot],
                        len: 3,
                    }
                } else {
                    Stencil {
                        idx: [
                            self.index3(i0 + 1, j0 + 1) as u32,
                            self.index3(i0 + 1, j0) as u32,
                            self.index3(i0, j0 + 1) as u32,
                        ],
                        w: [a + b - 1.0, 1.0 - b, 1.0 - a],
                        len: 3,
                    }
                }
            }
        }
    }

    pub fn interpolate(&self, values: &[f64], v: &[f64]) -> f64 {
        self.stencil(v).eval(values)
    }

    /// Evaluates `f` at every node.
    pub fn tabulate(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|p| f(p.coords())).collect()
    }

    /// Quadrature of a grid function against the (unnormalized) uniform
    /// measure on the simplex chart.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, x)| w * x).sum()
    }
}
