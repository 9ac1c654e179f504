//! Finite-support laws on positive matrices.

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cone::{PositiveMatrix, SPECTRAL_RADIUS_TOL};
use crate::error::{Error, Result};
use crate::rng::RandomStream;

const PROB_TOL: f64 = 1e-12;

/// The law `mu`: finitely many atoms with probabilities.
#[derive(Clone, Debug)]
pub struct FiniteEnsemble {
    dim: usize,
    atoms: Vec<PositiveMatrix>,
    probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl FiniteEnsemble {
    pub fn new(dim: usize, atoms: Vec<PositiveMatrix>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::BadProbabilityVector("ensemble needs at least one atom".into()));
        }
        if atoms.len() != probs.len() {
            return Err(Error::BadProbabilityVector(format!(
                "{} atoms but {} probabilities",
                atoms.len(),
                probs.len()
            )));
        }
        for a in &atoms {
            if a.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: a.dim(),
                });
            }
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::BadProbabilityVector(format!(
                "probabilities must be finite and positive, found {p}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::BadProbabilityVector(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        let sampler = WeightedIndex::new(&probs)
            .map_err(|e| Error::BadProbabilityVector(e.to_string()))?;
        Ok(Self {
            dim,
            atoms,
            probs,
            sampler,
        })
    }

    /// Builds from row-major atom entries, reporting the offending atom on a
    /// non-positive entry.
    pub fn from_raw(dim: usize, atoms: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        let atoms = atoms
            .into_iter()
            .enumerate()
            .map(|(k, e)| {
                PositiveMatrix::new(dim, e).map_err(|err| match err {
                    Error::NonPositiveEntry { row, col, value, .. } => Error::NonPositiveEntry {
                        atom: k,
                        row,
                        col,
                        value,
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dim, atoms, probs)
    }

    pub fn point_mass(g: PositiveMatrix) -> Self {
        let d = g.dim();
        Self::new(d, vec![g], vec![1.0]).expect("a single positive atom is a valid ensemble")
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn atoms(&self) -> &[PositiveMatrix] {
        &self.atoms
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// The law of `g^T`.
    pub fn transposed(&self) -> Self {
        Self::new(
            self.dim,
            self.atoms.iter().map(PositiveMatrix::transpose).collect(),
            self.probs.clone(),
        )
        .expect("transposes of a valid ensemble form a valid ensemble")
    }

    #[inline]
    pub fn sample_index(&self, stream: &mut RandomStream) -> usize {
        self.sampler.sample(stream)
    }

    pub fn sample_matrix(&self, stream: &mut RandomStream) -> &PositiveMatrix {
        &self.atoms[self.sample_index(stream)]
    }

    pub fn to_doc(&self) -> EnsembleDoc {
        EnsembleDoc {
            dim: self.dim,
            atoms: self.atoms.iter().map(|a| a.entries().to_vec()).collect(),
            probs: self.probs.clone(),
            scalar_reference: None,
        }
    }

    /// Short content hash used to tag reports.
    pub fn content_hash(&self) -> String {
        let doc = self.to_doc();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&doc).expect("ensemble documents serialize"));
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn check_conditions(&self) -> ConditionReport {
        check_conditions(self)
    }
}

/// What can be decided about the standing conditions from the atoms.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionReport {
    /// Full comparability constant: max over atoms of `max g / min g`.
    pub c_full: f64,
    /// Column comparability constant.
    pub c_col: f64,
    /// `1 / (c_col d)`: every `g.v` lies in `S_epsilon`.
    pub epsilon: f64,
    /// Kesten-type rational-approximation heuristic on `log rho` ratios of
    /// atom pairs. A heuristic only: it cannot certify non-arithmeticity.
    pub nonarithmetic_heuristic: bool,
    pub heuristic_witness: Option<RatioWitness>,
    /// Stricter heuristic on differences of `log rho` over products of equal
    /// length. `false` flags a suspected lattice even when the ratio test
    /// passes (e.g. scalar multiples of a single matrix).
    pub balanced_differences_nonlattice: bool,
    pub moment_flags: MomentFlags,
}

impl ConditionReport {
    /// Always true for strictly positive atoms; kept explicit for callers
    /// that gate negative tilts on it.
    pub fn a1_holds(&self) -> bool {
        self.c_full.is_finite() && self.c_full >= 1.0
    }

    pub fn a2_holds(&self) -> bool {
        self.c_col.is_finite() && self.c_col >= 1.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RatioWitness {
    pub atoms: (usize, usize),
    pub ratio: f64,
    /// Distance to the closest `p/q` with `q <= 64`.
    pub rational_distance: f64,
}

/// Finite support makes every moment of `log N(g)` finite.
#[derive(Clone, Debug, Serialize)]
pub struct MomentFlags {
    pub log_cubed_finite: bool,
    pub exponential_finite: bool,
}

const RATIONAL_DENOM_MAX: u32 = 64;
const RATIONAL_GAP: f64 = 1e-9;

fn distance_to_rationals(x: f64) -> f64 {
    (1..=RATIONAL_DENOM_MAX)
        .map(|q| {
            let q = q as f64;
            (x - (x * q).round() / q).abs()
        })
        .fold(f64::INFINITY, f64::min)
}

fn log_rho(g: &PositiveMatrix) -> f64 {
    g.spectral_radius(SPECTRAL_RADIUS_TOL)
        .expect("power iteration converges for positive matrices")
        .ln()
}

pub fn check_conditions(ens: &FiniteEnsemble) -> ConditionReport {
    let c_full = ens.atoms.iter().map(|g| g.kesten_ratio(false)).fold(1.0, f64::max);
    let c_col = ens.atoms.iter().map(|g| g.kesten_ratio(true)).fold(1.0, f64::max);
    let epsilon = 1.0 / (c_col * ens.dim as f64);

    let logs: Vec<f64> = ens.atoms.iter().map(log_rho).collect();
    let mut witness: Option<RatioWitness> = None;
    'outer: for i in 0..logs.len() {
        for j in 0..logs.len() {
            if i == j || logs[j].abs() < 1e-12 {
                continue;
            }
            let ratio = logs[i] / logs[j];
            let dist = distance_to_rationals(ratio);
            if dist > RATIONAL_GAP {
                witness = Some(RatioWitness {
                    atoms: (i, j),
                    ratio,
                    rational_distance: dist,
                });
                break 'outer;
            }
        }
    }

    ConditionReport {
        c_full,
        c_col,
        epsilon,
        nonarithmetic_heuristic: witness.is_some(),
        heuristic_witness: witness,
        balanced_differences_nonlattice: balanced_differences_nonlattice(ens, &logs),
        moment_flags: MomentFlags {
            log_cubed_finite: true,
            exponential_finite: true,
        },
    }
}

/// Under a lattice `t log rho(g) - n theta` is a multiple of `2 pi` for every
/// product of length `n`, so differences of `log rho` between products of the
/// same length all lie in one lattice. Two such differences with an
/// irrational ratio rule that out.
fn balanced_differences_nonlattice(ens: &FiniteEnsemble, logs: &[f64]) -> bool {
    let k = ens.len();
    let mut diffs = Vec::new();
    for i in 0..k {
        for j in 0..k {
            diffs.push(logs[i] - logs[j]);
            let prod = ens.atoms[i].mul(&ens.atoms[j]);
            diffs.push(log_rho(&prod) - logs[i] - logs[j]);
            for l in 0..k {
                let triple = prod.mul(&ens.atoms[l]);
                diffs.push(log_rho(&triple) - logs[i] - logs[j] - logs[l]);
            }
        }
    }
    diffs.retain(|x| x.abs() > 1e-9);
    for a in &diffs {
        for b in &diffs {
            if distance_to_rationals(a / b) > RATIONAL_GAP {
                return true;
            }
        }
    }
    false
}

/// An ensemble `{c_i M}` whose cumulant generating function is explicit:
/// `Lambda(s) = log sum_i p_i c_i^s + s log rho(M)`.
#[derive(Clone, Debug)]
pub struct ScalarReference {
    base: PositiveMatrix,
    scalars: Vec<(f64, f64)>,
    log_rho_base: f64,
    ensemble: FiniteEnsemble,
}

impl ScalarReference {
    pub fn new(base: PositiveMatrix, scalars: Vec<(f64, f64)>) -> Result<Self> {
        if let Some((c, _)) = scalars.iter().find(|(c, _)| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidArgument(format!("scalars must be positive, got {c}")));
        }
        let atoms = scalars
            .iter()
            .map(|(c, _)| base.scaled(*c))
            .collect::<Result<Vec<_>>>()?;
        let probs = scalars.iter().map(|(_, p)| *p).collect();
        let ensemble = FiniteEnsemble::new(base.dim(), atoms, probs)?;
        let log_rho_base = log_rho(&base);
        Ok(Self {
            base,
            scalars,
            log_rho_base,
            ensemble,
        })
    }

    /// `M = [[2,1],[1,2]]` with `c` in `{1, 2}` equiprobable.
    pub fn standard() -> Self {
        Self::two_point(0.5)
    }

    /// `M = [[2,1],[1,2]]` with `P(c = 2) = p`, `P(c = 1) = 1 - p`.
    pub fn two_point(p: f64) -> Self {
        let m = PositiveMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).expect("positive");
        Self::new(m, vec![(1.0, 1.0 - p), (2.0, p)]).expect("valid two-point reference")
    }

    pub fn base(&self) -> &PositiveMatrix {
        &self.base
    }

    pub fn scalars(&self) -> &[(f64, f64)] {
        &self.scalars
    }

    pub fn ensemble(&self) -> &FiniteEnsemble {
        &self.ensemble
    }

    pub fn log_rho_base(&self) -> f64 {
        self.log_rho_base
    }

    pub fn lambda(&self, s: f64) -> f64 {
        self.scalars
            .iter()
            .map(|(c, p)| p * c.powf(s))
            .sum::<f64>()
            .ln()
            + s * self.log_rho_base
    }

    /// `Lambda^{(k)}(s)` for `k` in `0..=5`: cumulants of `log c` under the
    /// law tilted by `c^s`, plus `log rho(M)` in the first derivative.
    pub fn derivative(&self, k: usize, s: f64) -> f64 {
        if k == 0 {
            return self.lambda(s);
        }
        let w: Vec<f64> = self.scalars.iter().map(|(c, p)| p * c.powf(s)).collect();
        let z: f64 = w.iter().sum();
        let x: Vec<f64> = self.scalars.iter().map(|(c, _)| c.ln()).collect();
        let mean: f64 = w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() / z;
        let mu = |j: i32| -> f64 {
            w.iter().zip(&x).map(|(w, x)| w * (x - mean).powi(j)).sum::<f64>() / z
        };
        match k {
            1 => mean + self.log_rho_base,
            2 => mu(2),
            3 => mu(3),
            4 => mu(4) - 3.0 * mu(2).powi(2),
            5 => mu(5) - 10.0 * mu(3) * mu(2),
            _ => panic!("closed-form derivatives are provided up to order 5"),
        }
    }

    pub fn lyapunov(&self) -> f64 {
        self.derivative(1, 0.0)
    }

    pub fn sigma2(&self) -> f64 {
        self.derivative(2, 0.0)
    }

    pub fn m3(&self) -> f64 {
        self.derivative(3, 0.0)
    }

    pub fn to_doc(&self) -> EnsembleDoc {
        let mut doc = self.ensemble.to_doc();
        doc.scalar_reference = Some(ScalarReferenceDoc {
            base: self.base.entries().to_vec(),
            scalars: self.scalars.iter().map(|&(c, p)| [c, p]).collect(),
        });
        doc
    }
}

/// JSON form of an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDoc {
    pub dim: usize,
    /// Each atom as row-major entries.
    pub atoms: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scalar_reference: Option<ScalarReferenceDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarReferenceDoc {
    pub base: Vec<f64>,
    pub scalars: Vec<[f64; 2]>,
}

/// An ensemble together with its closed-form description, when supplied.
#[derive(Clone, Debug)]
pub struct LoadedEnsemble {
    pub ensemble: FiniteEnsemble,
    pub scalar_reference: Option<ScalarReference>,
}

impl EnsembleDoc {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::SchemaViolation {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(&self) -> Result<LoadedEnsemble> {
        for (k, atom) in self.atoms.iter().enumerate() {
            if let Some(x) = atom.iter().find(|x| !x.is_finite()) {
                return Err(Error::SchemaViolation {
                    path: format!("atoms[{k}]"),
                    message: format!("non-finite entry {x}"),
                });
            }
        }
        let ensemble = FiniteEnsemble::from_raw(self.dim, self.atoms.clone(), self.probs.clone())?;
        let scalar_reference = match &self.scalar_reference {
            None => None,
            Some(sr) => {
                let base = PositiveMatrix::new(self.dim, sr.base.clone())?;
                let r = ScalarReference::new(
                    base,
                    sr.scalars.iter().map(|&[c, p]| (c, p)).collect(),
                )?;
                let consistent = r.ensemble.len() == ensemble.len()
                    && r.ensemble.atoms.iter().zip(&ensemble.atoms).all(|(a, b)| {
                        a.entries()
                            .iter()
                            .zip(b.entries())
                            .all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0))
                    })
                    && r.ensemble.probs.iter().zip(&ensemble.probs).all(|(p, q)| (p - q).abs() <= PROB_TOL);
                if !consistent {
                    return Err(Error::SchemaViolation {
                        path: "scalar_reference".into(),
                        message: "atoms and probs do not match c_i * base".into(),
                    });
                }
                Some(r)
            }
        };
        Ok(LoadedEnsemble {
            ensemble,
            scalar_reference,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sym() -> PositiveMatrix {
        PositiveMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap()
    }

    #[test]
    fn builds_valid_ensembles() {
        let e = FiniteEnsemble::new(2, vec![sym()], vec![1.0]).unwrap();
        assert_eq!(e.len(), 1);
        let e = FiniteEnsemble::new(2, vec![sym(), sym().scaled(2.0).unwrap()], vec![0.5, 0.5]);
        assert!(e.is_ok());
    }

    #[test]
    fn rejects_bad_inputs() {
        let err = FiniteEnsemble::from_raw(2, vec![vec![1.0, 1.0, 1.0, 1.0], vec![1.0, 0.0, 1.0, 1.0]], vec![0.5, 0.5]);
        assert!(matches!(err, Err(Error::NonPositiveEntry { atom: 1, row: 0, col: 1, .. })));
        assert!(matches!(
            FiniteEnsemble::new(2, vec![sym()], vec![0.9]),
            Err(Error::BadProbabilityVector(_))
        ));
        assert!(matches!(
            FiniteEnsemble::new(2, vec![sym(), sym()], vec![1.0, 0.0]),
            Err(Error::BadProbabilityVector(_))
        ));
        let m3 = PositiveMatrix::new(3, vec![1.0; 9]).unwrap();
        assert!(matches!(
            FiniteEnsemble::new(2, vec![sym(), m3], vec![0.5, 0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(FiniteEnsemble::new(2, vec![], vec![]).is_err());
    }

    #[test]
    fn point_mass_conditions() {
        let r = FiniteEnsemble::point_mass(sym()).check_conditions();
        assert_eq!(r.c_full, 2.0);
        assert_eq!(r.c_col, 2.0);
        assert_eq!(r.epsilon, 0.25);
        assert!(!r.nonarithmetic_heuristic);
        assert!(!r.balanced_differences_nonlattice);
        assert!(r.a1_holds() && r.a2_holds());
    }

    #[test]
    fn ratio_heuristic_fires_on_irrational_log_ratio() {
        let b = PositiveMatrix::new(2, vec![std::f64::consts::E; 4]).unwrap();
        let e = FiniteEnsemble::new(2, vec![sym(), b], vec![0.5, 0.5]).unwrap();
        let r = e.check_conditions();
        assert!(r.nonarithmetic_heuristic);
        let w = r.heuristic_witness.unwrap();
        assert!(w.rational_distance > 1e-9);
        // both atoms fix the direction (1/2, 1/2): log||gv|| is i.i.d. two-point
        assert!(!r.balanced_differences_nonlattice);
    }

    #[test]
    fn scalar_reference_is_flagged_by_the_stricter_check_only() {
        let r = ScalarReference::standard().ensemble().check_conditions();
        assert!(r.nonarithmetic_heuristic);
        assert!(!r.balanced_differences_nonlattice);
    }

    #[test]
    fn generic_pair_passes_both_checks() {
        let a = PositiveMatrix::from_rows(&[[2.0, 0.5], [1.0, 1.5]]).unwrap();
        let b = PositiveMatrix::from_rows(&[[0.6, 1.1], [0.9, 0.4]]).unwrap();
        let r = FiniteEnsemble::new(2, vec![a, b], vec![0.5, 0.5]).unwrap().check_conditions();
        assert!(r.nonarithmetic_heuristic);
        assert!(r.balanced_differences_nonlattice);
        assert!(r.epsilon > 0.0 && r.epsilon < 1.0);
        assert!(r.c_full >= r.c_col);
    }

    #[test]
    fn sampling_frequencies_and_replay() {
        let e = FiniteEnsemble::new(2, vec![sym(), sym().scaled(2.0).unwrap()], vec![0.5, 0.5]).unwrap();
        let mut s = RandomStream::new(11, 0);
        let n = 100_000;
        let zeros = (0..n).filter(|_| e.sample_index(&mut s) == 0).count();
        let sd = (0.25 / n as f64).sqrt();
        assert!((zeros as f64 / n as f64 - 0.5).abs() < 3.0 * sd);

        let draw = |seed| {
            let mut s = RandomStream::new(seed, 4);
            (0..50).map(|_| e.sample_index(&mut s)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));

        let pm = FiniteEnsemble::point_mass(sym());
        let mut s = RandomStream::new(1, 0);
        assert!((0..100).all(|_| pm.sample_matrix(&mut s) == &sym()));
    }

    #[test]
    fn scalar_reference_closed_forms() {
        let r = ScalarReference::standard();
        assert_relative_eq!(r.lambda(1.0), 4.5f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(r.lyapunov(), 3f64.ln() + 0.5 * 2f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(r.lyapunov(), 1.44518, epsilon = 1e-5);
        assert_relative_eq!(r.sigma2(), 2f64.ln().powi(2) / 4.0, max_relative = 1e-12);
        assert_relative_eq!(r.sigma2(), 0.12011, epsilon = 1e-5);
        assert!(r.m3().abs() < 1e-15);
        assert_eq!(r.lambda(0.0), 0.0);

        let det = ScalarReference::new(sym(), vec![(1.0, 1.0)]).unwrap();
        assert_relative_eq!(det.lambda(1.7), 1.7 * 3f64.ln(), max_relative = 1e-12);
        assert_eq!(det.sigma2(), 0.0);
    }

    #[test]
    fn closed_form_derivatives_match_finite_differences() {
        let r = ScalarReference::two_point(0.25);
        for &s in &[-1.0, 0.0, 0.7] {
            let h = 1e-3;
            for k in 1..=3 {
                let fd = (r.derivative(k - 1, s + h) - r.derivative(k - 1, s - h)) / (2.0 * h);
                assert_relative_eq!(fd, r.derivative(k, s), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn json_round_trip_and_rejections() {
        let r = ScalarReference::standard();
        let text = serde_json::to_string(&r.to_doc()).unwrap();
        let loaded = EnsembleDoc::from_json(&text).unwrap().load().unwrap();
        assert_eq!(loaded.ensemble.probs(), r.ensemble().probs());
        assert!(loaded.scalar_reference.is_some());

        let missing = r#"{"dim": 2, "atoms": [[1,1,1,1]]}"#;
        match EnsembleDoc::from_json(missing) {
            Err(Error::SchemaViolation { message, .. }) => assert!(message.contains("probs")),
            other => panic!("unexpected {other:?}"),
        }
        let zero = r#"{"dim": 2, "atoms": [[1,0,1,1]], "probs": [1.0]}"#;
        assert!(matches!(
            EnsembleDoc::from_json(zero).unwrap().load(),
            Err(Error::NonPositiveEntry { .. })
        ));
        let huge = r#"{"dim": 2, "atoms": [[1e400,1,1,1]], "probs": [1.0]}"#;
        assert!(EnsembleDoc::from_json(huge).and_then(|d| d.load()).is_err());
        let nan = r#"{"dim": 2, "atoms": [[NaN,1,1,1]], "probs": [1.0]}"#;
        assert!(EnsembleDoc::from_json(nan).is_err());
    }

    #[test]
    fn content_hash_is_stable() {
        let e = ScalarReference::standard();
        assert_eq!(e.ensemble().content_hash(), e.ensemble().clone().content_hash());
        assert_eq!(e.ensemble().content_hash().len(), 16);
    }
}
