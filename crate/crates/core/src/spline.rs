//! Clamped cubic spline with derivatives up to order three.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    /// `slope_lo`/`slope_hi` are the end derivatives.
    pub fn clamped(x: &[f64], y: &[f64], slope_lo: f64, slope_hi: f64) -> Result<Self> {
        let n = x.len();
        if n < 3 || y.len() != n {
            return Err(Error::InvalidArgument("spline needs at least three matching samples".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("spline knots must be strictly increasing".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        // tridiagonal system for the second derivatives (Thomas algorithm)
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        b[0] = 2.0 * h[0];
        c[0] = h[0];
        d[0] = 6.0 * ((y[1] - y[0]) / h[0] - slope_lo);
        for i in 1..n - 1 {
            a[i] = h[i - 1];
            b[i] = 2.0 * (h[i - 1] + h[i]);
            c[i] = h[i];
            d[i] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        }
        a[n - 1] = h[n - 2];
        b[n - 1] = 2.0 * h[n - 2];
        d[n - 1] = 6.0 * (slope_hi - (y[n - 1] - y[n - 2]) / h[n - 2]);
        for i in 1..n {
            let w = a[i] / b[i - 1];
            b[i] -= w * c[i - 1];
            d[i] -= w * d[i - 1];
        }
        let mut m = vec![0.0; n];
        m[n - 1] = d[n - 1] / b[n - 1];
        for i in (0..n - 1).rev() {
            m[i] = (d[i] - c[i] * m[i + 1]) / b[i];
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.x[0], *self.x.last().expect("non-empty"))
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.x.len();
        match self.x.binary_search_by(|k| k.partial_cmp(&t).expect("finite knots")) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 2),
        }
    }

    fn third_on(&self, i: usize) -> f64 {
        (self.m[i + 1] - self.m[i]) / (self.x[i + 1] - self.x[i])
    }

    /// Derivative of order `k <= 3` at `t` (extrapolates cubically outside).
    ///
    /// The third derivative is piecewise constant; at knots and between them
    /// it is replaced by the linear interpolant of the knot averages, which is
    /// second-order accurate instead of first.
    pub fn eval(&self, k: usize, t: f64) -> f64 {
        let i = self.segment(t);
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let h = x1 - x0;
        let (a, b) = ((x1 - t) / h, (t - x0) / h);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        match k {
            0 => a * self.y[i] + b * self.y[i + 1] + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0,
            1 => (self.y[i + 1] - self.y[i]) / h - (3.0 * a * a - 1.0) / 6.0 * h * m0 + (3.0 * b * b - 1.0) / 6.0 * h * m1,
            2 => a * m0 + b * m1,
            3 => {
                let n = self.x.len();
                let knot = |j: usize| -> f64 {
                    if j == 0 {
                        self.third_on(0)
                    } else if j == n - 1 {
                        self.third_on(n - 2)
                    } else {
                        0.5 * (self.third_on(j - 1) + self.third_on(j))
                    }
                };
                a * knot(i) + b * knot(i + 1)
            }
            _ => panic!("cubic splines carry derivatives up to order 3"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn reproduces_cubics() {
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x + 0.25 * x * x * x;
        let df = |x: f64| -2.0 + x + 0.75 * x * x;
        let xs: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let s = CubicSpline::clamped(&xs, &ys, df(-1.0), df(1.0)).unwrap();
        for t in [-0.95, -0.3, 0.0, 0.41, 0.99] {
            assert_relative_eq!(s.eval(0, t), f(t), epsilon = 1e-12);
            assert_relative_eq!(s.eval(1, t), df(t), epsilon = 1e-12);
            assert_relative_eq!(s.eval(2, t), 1.0 + 1.5 * t, epsilon = 1e-11);
            assert_relative_eq!(s.eval(3, t), 1.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn smooth_function_accuracy() {
        let xs: Vec<f64> = (0..41).map(|i| -2.0 + 0.1 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let s = CubicSpline::clamped(&xs, &ys, (-2f64).exp(), 2f64.exp()).unwrap();
        assert_relative_eq!(s.eval(1, 0.0), 1.0, epsilon = 1e-5);
        assert_relative_eq!(s.eval(3, 0.0), 1.0, epsilon = 1e-2);
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(CubicSpline::clamped(&[0.0, 1.0], &[0.0, 1.0], 0.0, 0.0).is_err());
        assert!(CubicSpline::clamped(&[0.0, 1.0, 1.0], &[0.0, 1.0, 2.0], 0.0, 0.0).is_err());
    }
}
