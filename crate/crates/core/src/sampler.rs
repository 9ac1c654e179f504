//! Path simulation under `mu` and under the tilted laws, with importance
//! weights, drift estimates and rare-event estimators.
//!
//! Every path `i` of a batch draws from its own stream `(seed, i)`, so a batch
//! is reproducible regardless of how rayon splits it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone::{collatz_wielandt_raw, mat_mul_into, mat_vec_into, SPECTRAL_RADIUS_TOL};
use crate::ensemble::FiniteEnsemble;
use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::spectral::SpectralSolution;

/// Steps between log flushes of the accumulated norm product.
pub const RENORM_INTERVAL: usize = 32;

/// Which optional columns to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tracking {
    /// Keep the full product: `log ||G_n||`, `log G_n^{11}`, `log rho(G_n)`.
    pub product: bool,
    pub endpoint: bool,
}

impl Tracking {
    pub const MINIMAL: Self = Self {
        product: false,
        endpoint: false,
    };
    pub const FULL: Self = Self {
        product: true,
        endpoint: true,
    };
}

/// Observable selector for tail probabilities and CDFs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Coefficient,
    VectorNorm,
    MatrixNorm,
    Entry11,
    SpectralRadius,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tail {
    Upper,
    Lower,
}

/// Columnar per-path observables.
#[derive(Clone, Debug, Default)]
pub struct PathObservables {
    pub n: usize,
    pub seed: u64,
    pub f: Vec<f64>,
    pub v: Vec<f64>,
    pub log_coeff: Vec<f64>,
    pub log_vecnorm: Vec<f64>,
    /// Empty unless the product was tracked.
    pub log_matnorm: Vec<f64>,
    pub log_entry11: Vec<f64>,
    pub log_specrad: Vec<f64>,
    /// Flattened `count x d`, empty unless tracked.
    pub endpoints: Vec<f64>,
    /// `log W_n`; empty for untilted batches.
    pub log_weight: Vec<f64>,
    /// Weight built from `kappa(s)` and `r_s` instead of realized normalizers.
    pub log_weight_theory: Vec<f64>,
}

impl PathObservables {
    pub fn count(&self) -> usize {
        self.log_coeff.len()
    }

    pub fn column(&self, obs: Observable) -> &[f64] {
        match obs {
            Observable::Coefficient => &self.log_coeff,
            Observable::VectorNorm => &self.log_vecnorm,
            Observable::MatrixNorm => &self.log_matnorm,
            Observable::Entry11 => &self.log_entry11,
            Observable::SpectralRadius => &self.log_specrad,
        }
    }

    pub fn endpoint(&self, i: usize) -> &[f64] {
        let d = self.v.len();
        &self.endpoints[i * d..(i + 1) * d]
    }

    /// Batch CSV: `n,log_coeff,log_vecnorm,log_matnorm,log_entry11,log_specrad,u_1..u_d,log_weight`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.v.len();
        let mut header = vec!["n", "log_coeff", "log_vecnorm", "log_matnorm", "log_entry11", "log_specrad"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend((1..=d).map(|i| format!("u_{i}")));
        header.push("log_weight".into());
        writeln!(w, "{}", header.join(","))?;
        let opt = |c: &[f64], i: usize| c.get(i).map(|x| format!("{x:e}")).unwrap_or_default();
        for i in 0..self.count() {
            let mut row = vec![
                self.n.to_string(),
                opt(&self.log_coeff, i),
                opt(&self.log_vecnorm, i),
                opt(&self.log_matnorm, i),
                opt(&self.log_entry11, i),
                opt(&self.log_specrad, i),
            ];
            for j in 0..d {
                row.push(opt(&self.endpoints, i * d + j));
            }
            row.push(if self.log_weight.is_empty() {
                "0".into()
            } else {
                opt(&self.log_weight, i)
            });
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Sampling request shared by the untilted and tilted simulators.
#[derive(Clone, Debug)]
pub struct PathSpec {
    /// Starting vector, any nonzero nonnegative vector.
    pub v: Vec<f64>,
    /// Coefficient functional, any nonzero nonnegative vector.
    pub f: Vec<f64>,
    pub n: usize,
    pub count: usize,
    pub tracking: Tracking,
}

fn check_vec(name: &str, x: &[f64], d: usize) -> Result<f64> {
    if x.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: x.len() });
    }
    if x.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{name} must be finite and nonnegative")));
    }
    let norm: f64 = x.iter().sum();
    if norm <= 0.0 {
        return Err(Error::InvalidArgument(format!("{name} must be nonzero")));
    }
    Ok(norm)
}

impl PathSpec {
    fn validate(&self, d: usize) -> Result<f64> {
        if self.n == 0 || self.count == 0 {
            return Err(Error::InvalidArgument("n and count must be at least 1".into()));
        }
        check_vec("f", &self.f, d)?;
        check_vec("v", &self.v, d)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scratch state of one path.
struct Chain {
    d: usize,
    u: Vec<f64>,
    tmp: Vec<f64>,
    prod: Vec<f64>,
    prod_tmp: Vec<f64>,
    log_scale: f64,
    acc: f64,
    log_sum: f64,
    since_flush: usize,
    prod_steps: usize,
}

impl Chain {
    fn new(d: usize, track_product: bool) -> Self {
        Self {
            d,
            u: vec![0.0; d],
            tmp: vec![0.0; d],
            prod: if track_product { vec![0.0; d * d] } else { Vec::new() },
            prod_tmp: if track_product { vec![0.0; d * d] } else { Vec::new() },
            log_scale: 0.0,
            acc: 1.0,
            log_sum: 0.0,
            since_flush: 0,
            prod_steps: 0,
        }
    }

    fn reset(&mut self, v_dir: &[f64]) {
        self.u.copy_from_slice(v_dir);
        if !self.prod.is_empty() {
            self.prod.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..self.d {
                self.prod[i * self.d + i] = 1.0;
            }
        }
        self.log_scale = 0.0;
        self.acc = 1.0;
        self.log_sum = 0.0;
        self.since_flush = 0;
        self.prod_steps = 0;
    }

    /// `u <- g.u`; returns `||g u||`.
    #[inline]
    fn step(&mut self, g: &[f64]) -> f64 {
        mat_vec_into(self.d, g, &self.u, &mut self.tmp);
        let norm: f64 = self.tmp.iter().sum();
        let inv = 1.0 / norm;
        for (u, t) in self.u.iter_mut().zip(&self.tmp) {
            *u = t * inv;
        }
        self.acc *= norm;
        self.since_flush += 1;
        if self.since_flush == RENORM_INTERVAL || !(1e-150..=1e150).contains(&self.acc) {
            self.flush();
        }
        if !self.prod.is_empty() {
            mat_mul_into(self.d, g, &self.prod, &mut self.prod_tmp);
            std::mem::swap(&mut self.prod, &mut self.prod_tmp);
            self.prod_steps += 1;
            if self.prod_steps == RENORM_INTERVAL {
                self.renormalize_product();
            }
        }
        norm
    }

    fn flush(&mut self) {
        self.log_sum += self.acc.ln();
        self.acc = 1.0;
        self.since_flush = 0;
    }

    fn renormalize_product(&mut self) {
        let s: f64 = self.prod.iter().sum();
        self.prod.iter_mut().for_each(|x| *x /= s);
        self.log_scale += s.ln();
        self.prod_steps = 0;
    }

    fn log_cocycle(&mut self) -> f64 {
        self.flush();
        self.log_sum
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct PathRecord {
    log_coeff: f64,
    log_vecnorm: f64,
    log_matnorm: f64,
    log_entry11: f64,
    log_specrad: f64,
    log_weight: f64,
    log_weight_theory: f64,
}

fn finish_path(chain: &mut Chain, spec: &PathSpec, log_v_norm: f64) -> Result<PathRecord> {
    let log_vecnorm = log_v_norm + chain.log_cocycle();
    let log_coeff = log_vecnorm + dot(&spec.f, &chain.u).ln();
    let mut rec = PathRecord {
        log_coeff,
        log_vecnorm,
        ..Default::default()
    };
    if !chain.prod.is_empty() {
        chain.renormalize_product();
        let d = chain.d;
        if chain.prod.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::OverflowGuard("renormalized product left the positive range".into()));
        }
        rec.log_matnorm = chain.log_scale;
        rec.log_entry11 = chain.log_scale + chain.prod[0].ln();
        let cw = collatz_wielandt_raw(d, &chain.prod, SPECTRAL_RADIUS_TOL, 10_000)?;
        rec.log_specrad = chain.log_scale + cw.rho.ln();
    }
    Ok(rec)
}

fn collect(
    spec: &PathSpec,
    seed: u64,
    records: Vec<(PathRecord, Vec<f64>)>,
    tilted: bool,
) -> PathObservables {
    let mut out = PathObservables {
        n: spec.n,
        seed,
        f: spec.f.clone(),
        v: spec.v.clone(),
        ..Default::default()
    };
    let count = records.len();
    out.log_coeff.reserve(count);
    out.log_vecnorm.reserve(count);
    for (r, end) in records {
        out.log_coeff.push(r.log_coeff);
        out.log_vecnorm.push(r.log_vecnorm);
        if spec.tracking.product {
            out.log_matnorm.push(r.log_matnorm);
            out.log_entry11.push(r.log_entry11);
            out.log_specrad.push(r.log_specrad);
        }
        if spec.tracking.endpoint {
            out.endpoints.extend_from_slice(&end);
        }
        if tilted {
            out.log_weight.push(r.log_weight);
            out.log_weight_theory.push(r.log_weight_theory);
        }
    }
    out
}

/// Paths of length `n` under `mu`.
pub fn simulate_paths(ens: &FiniteEnsemble, spec: &PathSpec, seed: u64) -> Result<PathObservables> {
    let d = ens.dim();
    let v_norm = spec.validate(d)?;
    let v_dir: Vec<f64> = spec.v.iter().map(|x| x / v_norm).collect();
    let log_v_norm = v_norm.ln();
    let records = (0..spec.count)
        .into_par_iter()
        .map_init(
            || Chain::new(d, spec.tracking.product),
            |chain, i| {
                let mut stream = RandomStream::new(seed, i as u64);
                chain.reset(&v_dir);
                for _ in 0..spec.n {
                    let g = ens.atoms()[ens.sample_index(&mut stream)].entries();
                    chain.step(g);
                }
                let end = if spec.tracking.endpoint { chain.u.clone() } else { Vec::new() };
                finish_path(chain, spec, log_v_norm).map(|r| (r, end))
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(collect(spec, seed, records, false))
}

/// Tilt descriptor.
#[derive(Clone, Debug, PartialEq)]
pub enum TiltMode {
    Norm,
    Coefficient(Vec<f64>),
}

/// One tilted step from direction `u`: per-atom raw weights
/// `p_g ||g u||^s r_s(g.u)` and their sum.
struct TiltedStep {
    raw: Vec<f64>,
    log_norms: Vec<f64>,
    r_img: Vec<f64>,
    images: Vec<f64>,
}

impl TiltedStep {
    fn new(k: usize, d: usize) -> Self {
        Self {
            raw: vec![0.0; k],
            log_norms: vec![0.0; k],
            r_img: vec![0.0; k],
            images: vec![0.0; k * d],
        }
    }

    fn fill(&mut self, sol: &SpectralSolution, u: &[f64]) -> f64 {
        let ens = sol.context().ensemble();
        let grid = sol.grid();
        let d = u.len();
        let mut z = 0.0;
        for (a, (g, p)) in ens.atoms().iter().zip(ens.probs()).enumerate() {
            let img = &mut self.images[a * d..(a + 1) * d];
            mat_vec_into(d, g.entries(), u, img);
            let norm: f64 = img.iter().sum();
            img.iter_mut().for_each(|x| *x /= norm);
            let ln = norm.ln();
            let r = grid.interpolate(&sol.r, img);
            let w = p * (sol.s * ln).exp() * r;
            self.raw[a] = w;
            self.log_norms[a] = ln;
            self.r_img[a] = r;
            z += w;
        }
        z
    }
}

/// Paths under `Q_s^v` (or `Q_{s,f}^v`, the same law on the simplex) with
/// `log W_n = log d(mu^n)/dQ` from the realized per-step normalizers.
pub fn tilted_simulate(
    sol: &SpectralSolution,
    mode: &TiltMode,
    spec: &PathSpec,
    seed: u64,
) -> Result<PathObservables> {
    let ens = sol.context().ensemble();
    let d = ens.dim();
    let v_norm = spec.validate(d)?;
    if let TiltMode::Coefficient(f) = mode {
        check_vec("tilt f", f, d)?;
        if sol.s < 0.0 && f.iter().any(|x| *x <= 0.0) {
            return Err(Error::InvalidArgument("negative tilts need f strictly positive".into()));
        }
    }
    let v_dir: Vec<f64> = spec.v.iter().map(|x| x / v_norm).collect();
    let log_v_norm = v_norm.ln();
    let log_probs: Vec<f64> = ens.probs().iter().map(|p| p.ln()).collect();
    let log_kappa = sol.log_kappa();
    let s = sol.s;
    let r_start = sol.grid().interpolate(&sol.r, &v_dir);

    let records = (0..spec.count)
        .into_par_iter()
        .map_init(
            || (Chain::new(d, spec.tracking.product), TiltedStep::new(ens.len(), d)),
            |(chain, step), i| {
                let mut stream = RandomStream::new(seed, i as u64);
                chain.reset(&v_dir);
                let mut log_w = 0.0;
                let mut log_w_th = 0.0;
                let mut r_cur = r_start;
                for _ in 0..spec.n {
                    let z = step.fill(sol, &chain.u);
                    if !(z.is_finite() && z > 0.0) {
                        return Err(Error::NegativeWeight("tilted step"));
                    }
                    let mut target = stream.uniform() * z;
                    let mut a = ens.len() - 1;
                    for (j, w) in step.raw.iter().enumerate() {
                        if target < *w {
                            a = j;
                            break;
                        }
                        target -= w;
                    }
                    // p_a / q_a with q_a = raw_a / z
                    log_w += log_probs[a] + z.ln() - step.raw[a].ln();
                    log_w_th += log_kappa + r_cur.ln() - s * step.log_norms[a] - step.r_img[a].ln();
                    r_cur = step.r_img[a];
                    chain.step(ens.atoms()[a].entries());
                }
                let end = if spec.tracking.endpoint { chain.u.clone() } else { Vec::new() };
                let mut rec = finish_path(chain, spec, log_v_norm)?;
                rec.log_weight = log_w;
                rec.log_weight_theory = match mode {
                    TiltMode::Norm => log_w_th,
                    TiltMode::Coefficient(f) => {
                        // kappa^n r_{s,f}(v) <f,v>^s / (r_{s,f}(G_n.v) <f,G_n v>^s)
                        let rsf = |r: f64, x: &[f64]| r.ln() - s * dot(f, x).ln();
                        let log_fgv = rec.log_vecnorm - log_v_norm + dot(f, &chain.u).ln();
                        spec.n as f64 * log_kappa + rsf(r_start, &v_dir) + s * dot(f, &v_dir).ln()
                            - rsf(r_cur, &chain.u)
                            - s * log_fgv
                    }
                };
                Ok((rec, end))
            },
        )
        .collect::<Result<Vec<_>>>()?;
    let out = collect(spec, seed, records, true);
    let ess = effective_sample_size(&out.log_weight);
    if ess < 0.01 * out.count() as f64 {
        log::warn!("weight degeneracy: effective sample size {ess:.1} of {}", out.count());
    }
    Ok(out)
}

/// Tilted probability, realized weight and kappa-form weight of one atom
/// sequence from `v`, all in log form.
#[derive(Clone, Copy, Debug)]
pub struct SequenceWeights {
    pub log_q: f64,
    pub log_weight: f64,
    pub log_weight_theory: f64,
    pub log_mu: f64,
}

/// Exact tilted-chain bookkeeping along a prescribed atom sequence.
pub fn sequence_weights(sol: &SpectralSolution, mode: &TiltMode, v: &[f64], seq: &[usize]) -> Result<SequenceWeights> {
    let ens = sol.context().ensemble();
    let d = ens.dim();
    let v_norm = check_vec("v", v, d)?;
    let mut u: Vec<f64> = v.iter().map(|x| x / v_norm).collect();
    let v_dir = u.clone();
    let mut step = TiltedStep::new(ens.len(), d);
    let s = sol.s;
    let log_kappa = sol.log_kappa();
    let r_start = sol.grid().interpolate(&sol.r, &u);
    let mut r_cur = r_start;
    let (mut log_q, mut log_w, mut log_w_th, mut log_mu, mut log_norm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &a in seq {
        if a >= ens.len() {
            return Err(Error::InvalidArgument(format!("atom index {a} out of range")));
        }
        let z = step.fill(sol, &u);
        let p = ens.probs()[a];
        log_q += step.raw[a].ln() - z.ln();
        log_w += p.ln() + z.ln() - step.raw[a].ln();
        log_w_th += log_kappa + r_cur.ln() - s * step.log_norms[a] - step.r_img[a].ln();
        log_mu += p.ln();
        log_norm += step.log_norms[a];
        r_cur = step.r_img[a];
        u.copy_from_slice(&step.images[a * d..(a + 1) * d]);
    }
    if let TiltMode::Coefficient(f) = mode {
        let rsf = |r: f64, x: &[f64]| r.ln() - s * dot(f, x).ln();
        let log_fgv = log_norm + dot(f, &u).ln();
        log_w_th = seq.len() as f64 * log_kappa + rsf(r_start, &v_dir) + s * dot(f, &v_dir).ln()
            - rsf(r_cur, &u)
            - s * log_fgv;
    }
    Ok(SequenceWeights {
        log_q,
        log_weight: log_w,
        log_weight_theory: log_w_th,
        log_mu,
    })
}

/// `(sum w)^2 / sum w^2` from log weights.
pub fn effective_sample_size(log_w: &[f64]) -> f64 {
    if log_w.is_empty() {
        return 0.0;
    }
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (s1, s2) = log_w.iter().fold((0.0, 0.0), |(a, b), l| {
        let w = (l - m).exp();
        (a + w, b + w * w)
    });
    s1 * s1 / s2
}

/// Mean and standard error.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Estimate {
    pub fn from_samples(xs: impl IntoIterator<Item = f64>) -> Self {
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for x in xs {
            n += 1;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
        }
        let var = if n > 1 { m2 / (n - 1) as f64 } else { f64::NAN };
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            count: n,
        }
    }
}

/// Importance-sampling tail estimate with diagnostics.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TailEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Fraction of tilted paths on which the indicator fired.
    pub hit_fraction: f64,
    pub ess: f64,
}

/// `P(observable >= threshold)` (or `<=`) as `mean(W 1{...})`.
pub fn is_probability(batch: &PathObservables, obs: Observable, threshold: f64, tail: Tail) -> Result<TailEstimate> {
    let col = batch.column(obs);
    if col.is_empty() {
        return Err(Error::InvalidArgument(format!("{obs:?} was not tracked in this batch")));
    }
    let hit = |x: f64| match tail {
        Tail::Upper => x >= threshold,
        Tail::Lower => x <= threshold,
    };
    let weights = |i: usize| {
        if batch.log_weight.is_empty() {
            1.0
        } else {
            batch.log_weight[i].exp()
        }
    };
    let mut hits = 0usize;
    let est = Estimate::from_samples(col.iter().enumerate().map(|(i, &x)| {
        if hit(x) {
            hits += 1;
            weights(i)
        } else {
            0.0
        }
    }));
    let hit_fraction = hits as f64 / col.len() as f64;
    if !batch.log_weight.is_empty() && !(0.05..=0.95).contains(&hit_fraction) {
        log::warn!("wrong tilt: indicator fired on {:.1}% of tilted paths", 100.0 * hit_fraction);
    }
    Ok(TailEstimate {
        estimate: est.mean,
        stderr: est.stderr,
        hit_fraction,
        ess: if batch.log_weight.is_empty() {
            col.len() as f64
        } else {
            effective_sample_size(&batch.log_weight)
        },
    })
}

/// `|mean exp(i t (log ||G_n v|| - n q))|` over the (unweighted) batch.
pub fn characteristic_modulus(batch: &PathObservables, q: f64, t: f64) -> f64 {
    let n = batch.n as f64;
    let (c, s) = batch.log_vecnorm.iter().fold((0.0, 0.0), |(c, s), x| {
        let a = t * (x - n * q);
        (c + a.cos(), s + a.sin())
    });
    let k = batch.count() as f64;
    ((c / k).powi(2) + (s / k).powi(2)).sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayRow {
    pub n: usize,
    pub t: f64,
    pub modulus: f64,
}

/// Characteristic-function moduli for several batches and frequencies.
pub fn characteristic_decay_diagnostic(batches: &[PathObservables], q: f64, t_values: &[f64]) -> Vec<DecayRow> {
    let mut rows = Vec::new();
    for b in batches {
        for &t in t_values {
            rows.push(DecayRow {
                n: b.n,
                t,
                modulus: characteristic_modulus(b, q, t),
            });
        }
    }
    rows
}

/// Drift functionals with standard errors.
#[derive(Clone, Debug, Serialize)]
pub struct DriftEstimates {
    pub n: usize,
    pub b_v: Estimate,
    pub d_f: Estimate,
    pub b_fv: Estimate,
    /// Exact atom sum.
    pub a_fv: f64,
    pub big_b_fv: Estimate,
    /// Centered third moment of `log <f,G_n v> - n lambda` over `n`, `v ~ nu`.
    pub m3_empirical: Estimate,
    /// The raw (uncentered) third moment over `n`; differs from the centered
    /// one by about `3 sigma^2 d(f)`.
    pub m3_raw: Estimate,
}

impl DriftEstimates {
    /// `(B - (b(v) - A + d(f)), combined stderr)`.
    pub fn identity_residual(&self) -> (f64, f64) {
        let r = self.big_b_fv.mean - (self.b_v.mean - self.a_fv + self.d_f.mean);
        let se = (self.big_b_fv.stderr.powi(2) + self.b_v.stderr.powi(2) + self.d_f.stderr.powi(2)).sqrt();
        (r, se)
    }
}

pub const NU_BURN_IN: usize = 100;
pub const NU_THINNING: usize = 10;
const NU_CHAINS: usize = 64;

/// Directions approximately distributed as `nu`: independent chains from the
/// barycenter, burn-in then thinning.
pub fn sample_nu(ens: &FiniteEnsemble, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = ens.dim();
    let chains = NU_CHAINS.min(count.max(1));
    let per = count.div_ceil(chains);
    let start = vec![1.0 / d as f64; d];
    let mut out: Vec<Vec<f64>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut stream = RandomStream::new(seed, c as u64);
            let mut chain = Chain::new(d, false);
            chain.reset(&start);
            let mut run = |k: usize, chain: &mut Chain| {
                for _ in 0..k {
                    let g = ens.atoms()[ens.sample_index(&mut stream)].entries();
                    chain.step(g);
                }
            };
            run(NU_BURN_IN, &mut chain);
            let mut pts = Vec::with_capacity(per);
            for _ in 0..per {
                run(NU_THINNING, &mut chain);
                pts.push(chain.u.clone());
            }
            pts
        })
        .flatten()
        .collect();
    out.truncate(count);
    out
}

/// Independent-stream estimates of `b(v)`, `d(f)`, `b(f,v)`, `A(f,v)`,
/// `B(f,v)` and `m_3` with paths of length `n_tail`.
pub fn estimate_drifts(
    ens: &FiniteEnsemble,
    lambda: f64,
    f: &[f64],
    v: &[f64],
    n_tail: usize,
    count: usize,
    seed: u64,
) -> Result<DriftEstimates> {
    let d = ens.dim();
    check_vec("f", f, d)?;
    check_vec("v", v, d)?;
    let base = RandomStream::new(seed, 0);
    let sub = |label: &str| base.derive(label).seed();
    let n = n_tail as f64;
    let spec = PathSpec {
        v: v.to_vec(),
        f: f.to_vec(),
        n: n_tail,
        count,
        tracking: Tracking::MINIMAL,
    };

    let paths = simulate_paths(ens, &spec, sub("b"))?;
    let b_v = Estimate::from_samples(paths.log_vecnorm.iter().map(|x| x - n * lambda));
    let log_fv = dot(f, v).ln();
    let b_fv = Estimate::from_samples(paths.log_coeff.iter().map(|x| x - log_fv - n * lambda));

    let nu = sample_nu(ens, count, sub("nu"));
    let d_f = Estimate::from_samples(nu.iter().map(|u| dot(f, u).ln()));

    let a_fv = ens
        .atoms()
        .iter()
        .zip(ens.probs())
        .map(|(g, p)| p * dot(f, &g.apply(v)).ln())
        .sum::<f64>()
        - lambda;

    // B(f,v) = E b(f, g.v): first step, then an independent tail from g.v
    let seed_big_b = sub("B");
    let big_b_samples = (0..count)
        .into_par_iter()
        .map_init(
            || Chain::new(d, false),
            |chain, i| {
                let mut stream = RandomStream::new(seed_big_b, i as u64);
                let g1 = ens.sample_matrix(&mut stream);
                let w = g1.apply(v);
                let wn: f64 = w.iter().sum();
                let w_dir: Vec<f64> = w.iter().map(|x| x / wn).collect();
                chain.reset(&w_dir);
                for _ in 0..n_tail {
                    let g = ens.atoms()[ens.sample_index(&mut stream)].entries();
                    chain.step(g);
                }
                let log_fgw = chain.log_cocycle() + dot(f, &chain.u).ln();
                log_fgw - dot(f, &w_dir).ln() - n * lambda
            },
        )
        .collect::<Vec<f64>>();
    let big_b_fv = Estimate::from_samples(big_b_samples);

    // m_3 from nu-distributed starts
    let starts = sample_nu(ens, count, sub("m3-start"));
    let seed_m3 = sub("m3");
    let xs: Vec<f64> = starts
        .par_iter()
        .enumerate()
        .map_init(
            || Chain::new(d, false),
            |chain, (i, u0)| {
                let mut stream = RandomStream::new(seed_m3, i as u64);
                chain.reset(u0);
                for _ in 0..n_tail {
                    let g = ens.atoms()[ens.sample_index(&mut stream)].entries();
                    chain.step(g);
                }
                chain.log_cocycle() + dot(f, &chain.u).ln() - n * lambda
            },
        )
        .collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let m3_empirical = Estimate::from_samples(xs.iter().map(|x| (x - mean).powi(3) / n));
    let m3_raw = Estimate::from_samples(xs.iter().map(|x| x.powi(3) / n));

    Ok(DriftEstimates {
        n: n_tail,
        b_v,
        d_f,
        b_fv,
        a_fv,
        big_b_fv,
        m3_empirical,
        m3_raw,
    })
}
