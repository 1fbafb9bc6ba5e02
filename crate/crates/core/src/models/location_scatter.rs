use std::collections::HashSet;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::spd::SpdMatrix;

/// Number of draws used to certify a central law at model construction.
pub const MOMENT_CHECK_SAMPLES: usize = 4000;

/// Law of the standardized factor `Z₀` (zero mean, identity covariance).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum CentralLaw {
    #[default]
    Normal,
    /// Multivariate Student-t with `df > 4`, rescaled to unit covariance.
    StudentT { df: f64 },
}

impl CentralLaw {
    pub fn student_t(df: f64) -> Result<Self> {
        let law = CentralLaw::StudentT { df };
        law.check_parameters()?;
        Ok(law)
    }

    pub fn check_parameters(&self) -> Result<()> {
        match *self {
            CentralLaw::Normal => Ok(()),
            CentralLaw::StudentT { df } if df > 4.0 && df.is_finite() => Ok(()),
            CentralLaw::StudentT { df } => Err(Error::Invalid(format!(
                "student-t central law needs df > 4, got {df}"
            ))),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, CentralLaw::Normal)
    }

    /// Quantile of one coordinate of `Z₀`.
    pub fn quantile(&self, s: f64) -> f64 {
        match *self {
            CentralLaw::Normal => Normal::standard().inverse_cdf(s),
            CentralLaw::StudentT { df } => {
                let t = StudentsT::new(0.0, 1.0, df).expect("df checked at construction");
                t.inverse_cdf(s) * ((df - 2.0) / df).sqrt()
            }
        }
    }

    /// `E[(Z₀ₖ)⁴]` for one coordinate.
    pub fn fourth_moment(&self) -> f64 {
        match *self {
            CentralLaw::Normal => 3.0,
            CentralLaw::StudentT { df } => 3.0 * (df - 2.0) / (df - 4.0),
        }
    }

    /// Fills `out` with one draw of `Z₀`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        if let CentralLaw::StudentT { df } = *self {
            let chi = ChiSquared::new(df).expect("df checked at construction");
            let w: f64 = chi.sample(rng);
            let scale = ((df - 2.0) / w).sqrt();
            out.iter_mut().for_each(|x| *x *= scale);
        }
    }

    /// `n` seeded draws of the `d`-dimensional factor, one per column.
    pub fn sample_matrix(&self, d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = DMatrix::zeros(d, n);
        let mut buf = vec![0.0; d];
        for j in 0..n {
            self.sample_into(&mut rng, &mut buf);
            out.column_mut(j).copy_from_slice(&buf);
        }
        out
    }

    /// Antithetic draws: columns `2k` and `2k+1` are `z` and `−z`. Holds
    /// `n` rounded up to an even count.
    pub fn antithetic_matrix(&self, d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let pairs = n.div_ceil(2);
        let half = self.sample_matrix(d, pairs, seed);
        let mut out = DMatrix::zeros(d, 2 * pairs);
        for k in 0..pairs {
            out.column_mut(2 * k).copy_from(&half.column(k));
            out.column_mut(2 * k + 1).copy_from(&(-half.column(k)));
        }
        out
    }

    /// Checks zero mean and identity covariance by sample moments.
    ///
    /// Means must lie within `5/√N`; second moments within `5·sd/√N` where
    /// `sd` is the exact standard deviation of the product `Z₀ₖZ₀ₗ`.
    pub fn moment_violation(&self, d: usize, n: usize, seed: u64) -> Option<String> {
        let z = self.sample_matrix(d, n, seed);
        let nf = n as f64;
        let tol_mean = 5.0 / nf.sqrt();
        let mean = z.column_mean();
        if let Some(k) = mean.iter().position(|m| m.abs() > tol_mean) {
            return Some(format!("central law sample mean {:.4} at coordinate {k}", mean[k]));
        }
        let cov = &z * z.transpose() / nf;
        let kurt = self.fourth_moment();
        for k in 0..d {
            for l in 0..d {
                // Var(Z_k²) = κ − 1 on the diagonal; off-diagonal Var(Z_k Z_l) = E[Z_k²Z_l²].
                let var = if k == l { kurt - 1.0 } else { kurt / 3.0 };
                let tol = 5.0 * var.sqrt() / nf.sqrt();
                let target = if k == l { 1.0 } else { 0.0 };
                if (cov[(k, l)] - target).abs() > tol {
                    return Some(format!(
                        "central law sample covariance {:.4} at ({k},{l})",
                        cov[(k, l)]
                    ));
                }
            }
        }
        None
    }

    fn key(&self) -> u64 {
        match *self {
            CentralLaw::Normal => 0,
            CentralLaw::StudentT { df } => df.to_bits(),
        }
    }
}

static CERTIFIED: Mutex<Option<HashSet<(u64, usize)>>> = Mutex::new(None);

fn certify(law: &CentralLaw, d: usize) -> Result<()> {
    law.check_parameters()?;
    let key = (law.key(), d);
    {
        let guard = CERTIFIED.lock().unwrap();
        if guard.as_ref().is_some_and(|s| s.contains(&key)) {
            return Ok(());
        }
    }
    if let Some(v) = law.moment_violation(d, MOMENT_CHECK_SAMPLES, 0x005e_ed0f_1a75) {
        return Err(Error::Invalid(v));
    }
    CERTIFIED.lock().unwrap().get_or_insert_with(HashSet::new).insert(key);
    Ok(())
}

/// The law of `m + S^{1/2} Z₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "LocationScatterRepr", try_from = "LocationScatterRepr")]
pub struct LocationScatterModel {
    m: DVector<f64>,
    s: SpdMatrix,
    central: CentralLaw,
}

/// Plain-array form, as in model files.
#[derive(Serialize, Deserialize)]
struct LocationScatterRepr {
    m: Vec<f64>,
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
    central: CentralLaw,
}

impl From<LocationScatterModel> for LocationScatterRepr {
    fn from(model: LocationScatterModel) -> Self {
        let s = model.s.as_matrix();
        LocationScatterRepr {
            m: model.m.iter().copied().collect(),
            s: s.row_iter().map(|r| r.iter().copied().collect()).collect(),
            central: model.central,
        }
    }
}

impl TryFrom<LocationScatterRepr> for LocationScatterModel {
    type Error = Error;
    fn try_from(r: LocationScatterRepr) -> Result<Self> {
        let d = r.s.len();
        if r.s.iter().any(|row| row.len() != d) {
            return Err(Error::Dimension("scatter matrix is not square".into()));
        }
        let s = SpdMatrix::new(DMatrix::from_fn(d, d, |i, j| r.s[i][j]))?;
        LocationScatterModel::new(DVector::from_vec(r.m), s, r.central)
    }
}

impl LocationScatterModel {
    pub fn new(m: DVector<f64>, s: SpdMatrix, central: CentralLaw) -> Result<Self> {
        if m.len() != s.dim() {
            return Err(Error::Dimension(format!(
                "location has dimension {} but scatter is {}x{}",
                m.len(),
                s.dim(),
                s.dim()
            )));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("non-finite location".into()));
        }
        certify(&central, m.len())?;
        Ok(LocationScatterModel { m, s, central })
    }

    pub fn gaussian(m: DVector<f64>, s: SpdMatrix) -> Result<Self> {
        Self::new(m, s, CentralLaw::Normal)
    }

    /// One-dimensional model with location `m` and scatter (variance) `scatter`.
    pub fn scalar(m: f64, scatter: f64, central: CentralLaw) -> Result<Self> {
        let s = SpdMatrix::from_diagonal(&[scatter])?;
        Self::new(DVector::from_element(1, m), s, central)
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn location(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn scatter(&self) -> &SpdMatrix {
        &self.s
    }

    pub fn central(&self) -> CentralLaw {
        self.central
    }
}
