//! Parameter types, admissibility checks and the reduced-form transition.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SigmarError};
use crate::kronlin::{self, Mat, Vector};

/// Spectral radius at or above `1 - STATIONARITY_MARGIN` counts as explosive.
pub const STATIONARITY_MARGIN: f64 = 1e-6;

/// An ordered sequence of `k x n` observation matrices (variables by countries).
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSeries {
    k: usize,
    n: usize,
    frames: Vec<Mat>,
    pub variable_labels: Option<Vec<String>>,
    pub country_labels: Option<Vec<String>>,
}

impl PanelSeries {
    pub fn new(frames: Vec<Mat>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| SigmarError::Validation("panel has no frames".into()))?;
        let (k, n) = first.shape();
        if k == 0 || n == 0 {
            return Err(SigmarError::Dimension("empty frame".into()));
        }
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != (k, n) {
                return Err(SigmarError::Dimension(format!(
                    "frame {t} is {}x{}, expected {k}x{n}",
                    f.nrows(),
                    f.ncols()
                )));
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(SigmarError::Validation(format!("frame {t} has non-finite entries")));
            }
        }
        Ok(Self {
            k,
            n,
            frames,
            variable_labels: None,
            country_labels: None,
        })
    }

    pub fn with_labels(mut self, variables: Vec<String>, countries: Vec<String>) -> Result<Self> {
        if variables.len() != self.k || countries.len() != self.n {
            return Err(SigmarError::Dimension("label counts do not match panel".into()));
        }
        self.variable_labels = Some(variables);
        self.country_labels = Some(countries);
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Mat] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Mat {
        &self.frames[t]
    }

    /// Frames `start..end` as a new panel (labels carried over).
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames.len() {
            return Err(SigmarError::Dimension(format!(
                "invalid slice {start}..{end} of {} frames",
                self.frames.len()
            )));
        }
        Ok(Self {
            k: self.k,
            n: self.n,
            frames: self.frames[start..end].to_vec(),
            variable_labels: self.variable_labels.clone(),
            country_labels: self.country_labels.clone(),
        })
    }

    /// Stacked `vec(X_t)` for every frame.
    pub fn vectors(&self) -> Vec<Vector> {
        self.frames.iter().map(kronlin::vec).collect()
    }

    pub(crate) fn require_len(&self, min: usize, what: &str) -> Result<()> {
        if self.frames.len() < min {
            return Err(SigmarError::Validation(format!(
                "{what} needs at least {min} frames, got {}",
                self.frames.len()
            )));
        }
        Ok(())
    }
}

/// Diagnostics for the weight-matrix conditions needed for identification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightChecks {
    pub zero_diagonal: bool,
    pub wtw_diagonal_not_constant: bool,
    pub symmetric_part_nonzero: bool,
}

impl WeightChecks {
    pub fn all(&self) -> bool {
        self.zero_diagonal && self.wtw_diagonal_not_constant && self.symmetric_part_nonzero
    }
}

/// A fixed `n x n` network matrix with its eigenvalues cached.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    w: Mat,
    eigvals: Vec<Complex<f64>>,
}

impl WeightMatrix {
    pub fn new(w: Mat) -> Result<Self> {
        if !w.is_square() || w.is_empty() {
            return Err(SigmarError::Dimension(format!(
                "weight matrix must be square and non-empty, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(SigmarError::Validation("weight matrix has non-finite entries".into()));
        }
        let eigvals = kronlin::eigenvalues(&w)?;
        Ok(Self { w, eigvals })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.w
    }

    pub fn eigenvalues(&self) -> &[Complex<f64>] {
        &self.eigvals
    }

    pub fn checks(&self) -> WeightChecks {
        let w = &self.w;
        let zero_diagonal = w.diagonal().iter().all(|&d| d == 0.0);
        let wtw = w.transpose() * w;
        let d0 = wtw[(0, 0)];
        let scale = wtw.diagonal().amax().max(1.0);
        let wtw_diagonal_not_constant = wtw
            .diagonal()
            .iter()
            .any(|&d| (d - d0).abs() > 1e-12 * scale);
        let symmetric_part_nonzero = (w + w.transpose()).amax() > 0.0;
        WeightChecks {
            zero_diagonal,
            wtw_diagonal_not_constant,
            symmetric_part_nonzero,
        }
    }
}

/// Structural parameters: `Φ = B ⊗ A + S`, `G = I - W ⊗ C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmarParams {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub s: Mat,
    pub sigma2: f64,
}

impl SigmarParams {
    pub fn zeros(k: usize, n: usize) -> Self {
        Self {
            a: Mat::zeros(k, k),
            b: Mat::zeros(n, n),
            c: Mat::zeros(k, k),
            s: Mat::zeros(k * n, k * n),
            sigma2: 1.0,
        }
    }

    pub fn k(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, n) = (self.k(), self.n());
        if !self.a.is_square()
            || !self.b.is_square()
            || self.c.shape() != (k, k)
            || self.s.shape() != (k * n, k * n)
        {
            return Err(SigmarError::Dimension(format!(
                "inconsistent parameter shapes for k={k}, n={n}"
            )));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(SigmarError::Domain(format!("sigma2 = {} must be nonnegative", self.sigma2)));
        }
        let finite = [&self.a, &self.b, &self.c, &self.s]
            .iter()
            .all(|m| m.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(SigmarError::Validation("non-finite parameter entries".into()));
        }
        Ok(())
    }

    /// Number of nonzero entries of `S` above `tol` in absolute value.
    pub fn support_size(&self, tol: f64) -> usize {
        self.s.iter().filter(|x| x.abs() > tol).count()
    }
}

/// `θ = (vec C, vec Φ, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaFlat {
    pub k: usize,
    pub n: usize,
    pub vec_c: Vec<f64>,
    pub vec_phi: Vec<f64>,
    pub sigma2: f64,
}

impl ThetaFlat {
    pub fn new(c: &Mat, phi: &Mat, sigma2: f64) -> Result<Self> {
        let k = c.nrows();
        if !c.is_square() || !phi.is_square() || phi.nrows() % k.max(1) != 0 || k == 0 {
            return Err(SigmarError::Dimension("inconsistent C/Φ shapes".into()));
        }
        if !(sigma2 > 0.0) {
            return Err(SigmarError::Domain(format!("sigma2 = {sigma2} must be positive")));
        }
        Ok(Self {
            k,
            n: phi.nrows() / k,
            vec_c: c.as_slice().to_vec(),
            vec_phi: phi.as_slice().to_vec(),
            sigma2,
        })
    }

    pub fn from_params(p: &SigmarParams) -> Result<Self> {
        Self::new(&p.c, &phi_of(p)?, p.sigma2)
    }

    pub fn c(&self) -> Mat {
        Mat::from_column_slice(self.k, self.k, &self.vec_c)
    }

    pub fn phi(&self) -> Mat {
        let kn = self.k * self.n;
        Mat::from_column_slice(kn, kn, &self.vec_phi)
    }

    pub fn dim(&self) -> usize {
        self.vec_c.len() + self.vec_phi.len() + 1
    }

    /// Flat layout `[vec C; vec Φ; σ²]`.
    pub fn to_vector(&self) -> Vector {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.vec_c);
        v.extend_from_slice(&self.vec_phi);
        v.push(self.sigma2);
        Vector::from_vec(v)
    }

    pub fn from_vector(v: &Vector, k: usize, n: usize) -> Result<Self> {
        let kk = k * k;
        let pp = kk * n * n;
        if v.len() != kk + pp + 1 {
            return Err(SigmarError::Dimension(format!(
                "theta vector has length {}, expected {}",
                v.len(),
                kk + pp + 1
            )));
        }
        let s = v.as_slice();
        Ok(Self {
            k,
            n,
            vec_c: s[..kk].to_vec(),
            vec_phi: s[kk..kk + pp].to_vec(),
            sigma2: s[kk + pp],
        })
    }
}

/// `Π = G⁻¹ Φ` together with `G⁻¹`.
#[derive(Debug, Clone)]
pub struct ReducedForm {
    pub pi: Mat,
    pub ginv: Mat,
    pub spectral_radius: f64,
}

pub fn phi_of(p: &SigmarParams) -> Result<Mat> {
    p.validate()?;
    Ok(kronlin::kron(&p.b, &p.a) + &p.s)
}

/// `G = I - W ⊗ C`.
pub fn g_matrix(w: &WeightMatrix, c: &Mat) -> Mat {
    let kn = w.n() * c.nrows();
    Mat::identity(kn, kn) - kronlin::kron(w.matrix(), c)
}

pub(crate) fn check_dims(p: &SigmarParams, w: &WeightMatrix) -> Result<()> {
    if p.n() != w.n() {
        return Err(SigmarError::Dimension(format!(
            "parameters have n={}, weight matrix has n={}",
            p.n(),
            w.n()
        )));
    }
    Ok(())
}

/// Reduced-form transition from a structural `(C, Φ)` pair.
pub fn reduced_form_from(c: &Mat, phi: &Mat, w: &WeightMatrix) -> Result<ReducedForm> {
    kronlin::logdet_i_minus_kron(w.eigenvalues(), c)?;
    let g = g_matrix(w, c);
    let kn = g.nrows();
    let lu = g.lu();
    let ginv = lu
        .solve(&Mat::identity(kn, kn))
        .ok_or_else(|| SigmarError::Domain("I - W⊗C is singular".into()))?;
    let pi = &ginv * phi;
    let spectral_radius = kronlin::spectral_radius(&pi)?;
    Ok(ReducedForm {
        pi,
        ginv,
        spectral_radius,
    })
}

pub fn reduced_form(p: &SigmarParams, w: &WeightMatrix) -> Result<ReducedForm> {
    check_dims(p, w)?;
    reduced_form_from(&p.c, &phi_of(p)?, w)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub det_positive: bool,
    pub spectral_radius: Option<f64>,
    pub stationary: bool,
    pub weight: WeightChecks,
    pub admissible: bool,
}

/// Stationarity and determinant checks plus the weight-matrix conditions.
///
/// `admissible` covers the determinant and stationarity; the weight checks
/// are reported separately because some valid small networks (two
/// countries) cannot satisfy all of them.
pub fn check_admissible(p: &SigmarParams, w: &WeightMatrix) -> AdmissibilityReport {
    let weight = w.checks();
    let rf = check_dims(p, w).and_then(|_| reduced_form(p, w));
    match rf {
        Ok(rf) => {
            let stationary = rf.spectral_radius < 1.0 - STATIONARITY_MARGIN;
            AdmissibilityReport {
                det_positive: true,
                spectral_radius: Some(rf.spectral_radius),
                stationary,
                weight,
                admissible: stationary,
            }
        }
        Err(_) => AdmissibilityReport {
            det_positive: false,
            spectral_radius: None,
            stationary: false,
            weight,
            admissible: false,
        },
    }
}

/// Fix the `(A, B)` gauge: `‖A‖_F = 1` and a majority of nonnegative
/// diagonal entries in `A` (ties keep the sign). `B ⊗ A` is unchanged.
pub fn normalize_ab(a: &Mat, b: &Mat) -> Result<(Mat, Mat)> {
    let norm = a.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(SigmarError::Degenerate("cannot normalize a zero A".into()));
    }
    let pos = a.diagonal().iter().filter(|&&d| d > 0.0).count();
    let neg = a.diagonal().iter().filter(|&&d| d < 0.0).count();
    let sign = if neg > pos { -1.0 } else { 1.0 };
    Ok((a * (sign / norm), b * (sign * norm)))
}

/// Conditional mean `unvec(Π vec(X_t))`.
pub fn one_step_forecast(p: &SigmarParams, w: &WeightMatrix, x_t: &Mat) -> Result<Mat> {
    let rf = reduced_form(p, w)?;
    if rf.spectral_radius >= 1.0 - STATIONARITY_MARGIN {
        return Err(SigmarError::Domain(format!(
            "transition is not stationary (spectral radius {:.4})",
            rf.spectral_radius
        )));
    }
    if x_t.shape() != (p.k(), p.n()) {
        return Err(SigmarError::Dimension("frame shape does not match parameters".into()));
    }
    kronlin::unvec(&(&rf.pi * kronlin::vec(x_t)), p.k(), p.n())
}

/// JSON document layout for [`SigmarParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsDoc {
    k: usize,
    n: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    s: Vec<(usize, usize, f64)>,
    sigma2: f64,
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn rows_to_mat(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Mat> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(SigmarError::Dimension(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl Serialize for SigmarParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let kn = self.s.nrows();
        let mut triplets = Vec::new();
        for col in 0..kn {
            for row in 0..kn {
                let v = self.s[(row, col)];
                if v != 0.0 {
                    triplets.push((row, col, v));
                }
            }
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        ParamsDoc {
            k: self.k(),
            n: self.n(),
            a: mat_to_rows(&self.a),
            b: mat_to_rows(&self.b),
            c: mat_to_rows(&self.c),
            s: triplets,
            sigma2: self.sigma2,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SigmarParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let doc = ParamsDoc::deserialize(deserializer)?;
        let (k, n) = (doc.k, doc.n);
        let a = rows_to_mat(&doc.a, k, k, "A").map_err(D::Error::custom)?;
        let b = rows_to_mat(&doc.b, n, n, "B").map_err(D::Error::custom)?;
        let c = rows_to_mat(&doc.c, k, k, "C").map_err(D::Error::custom)?;
        let mut s = Mat::zeros(k * n, k * n);
        for (r, col, v) in doc.s {
            if r >= k * n || col >= k * n {
                return Err(D::Error::custom(format!("S entry ({r},{col}) out of range")));
            }
            s[(r, col)] = v;
        }
        let p = SigmarParams {
            a,
            b,
            c,
            s,
            sigma2: doc.sigma2,
        };
        p.validate().map_err(D::Error::custom)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
    }

    fn ring_weight(n: usize) -> WeightMatrix {
        let mut w = Mat::zeros(n, n);
        for i in 0..n {
            w[(i, (i + 1) % n)] = 0.7;
            w[(i, (i + n - 1) % n)] = 0.3;
        }
        w[(0, 1)] = 1.0;
        w[(0, n - 1)] = 0.0;
        WeightMatrix::new(w).unwrap()
    }

    fn small_params(rng: &mut ChaCha8Rng, k: usize, n: usize) -> SigmarParams {
        SigmarParams {
            a: random_mat(rng, k, k, 0.4),
            b: random_mat(rng, n, n, 0.4),
            c: random_mat(rng, k, k, 0.3),
            s: Mat::from_fn(k * n, k * n, |i, j| if (i + 2 * j) % 7 == 0 { 0.1 } else { 0.0 }),
            sigma2: 1.0,
        }
    }

    #[test]
    fn phi_is_kron_plus_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = small_params(&mut rng, 2, 3);
        let phi = phi_of(&p).unwrap();
        let mut brute = Mat::zeros(6, 6);
        for i in 0..3 {
            for j in 0..3 {
                for r in 0..2 {
                    for s in 0..2 {
                        brute[(i * 2 + r, j * 2 + s)] = p.b[(i, j)] * p.a[(r, s)] + p.s[(i * 2 + r, j * 2 + s)];
                    }
                }
            }
        }
        assert_eq!(phi, brute);

        p.s.fill(0.0);
        assert_eq!(phi_of(&p).unwrap(), kronlin::kron(&p.b, &p.a));

        let k = 3;
        let q = SigmarParams {
            a: Mat::identity(k, k) / (k as f64).sqrt(),
            b: Mat::identity(2, 2),
            c: Mat::zeros(k, k),
            s: Mat::zeros(6, 6),
            sigma2: 1.0,
        };
        assert_relative_eq!(phi_of(&q).unwrap(), Mat::identity(6, 6) / 3f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn reduced_form_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = ring_weight(3);
        let mut p = small_params(&mut rng, 2, 3);
        let c = p.c.clone();
        p.c.fill(0.0);
        let rf = reduced_form(&p, &w).unwrap();
        assert_eq!(rf.pi, phi_of(&p).unwrap());

        p.c = c;
        let rf = reduced_form(&p, &w).unwrap();
        let g = g_matrix(&w, &p.c);
        assert_relative_eq!(&rf.ginv * &g, Mat::identity(6, 6), epsilon = 1e-10);
        let x = random_mat(&mut rng, 2, 3, 1.0);
        let direct = kronlin::lu_solve(&g, &kronlin::col(&(phi_of(&p).unwrap() * kronlin::vec(&x)))).unwrap();
        assert_relative_eq!(kronlin::col(&(&rf.pi * kronlin::vec(&x))), direct, epsilon = 1e-12);

        let scalar = SigmarParams {
            a: dmatrix![0.5],
            b: dmatrix![0.8],
            c: dmatrix![0.3],
            s: dmatrix![0.1],
            sigma2: 1.0,
        };
        let w1 = WeightMatrix::new(dmatrix![0.0]).unwrap();
        assert_relative_eq!(reduced_form(&scalar, &w1).unwrap().pi[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn admissibility_checks() {
        let w = ring_weight(4);
        let zero = SigmarParams::zeros(2, 4);
        let rep = check_admissible(&zero, &w);
        assert!(rep.admissible);
        assert_eq!(rep.spectral_radius, Some(0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = small_params(&mut rng, 2, 4);
        let rho = reduced_form(&p, &w).unwrap().spectral_radius;
        // Π is linear in Φ for fixed C, so scaling (B, S) rescales the radius.
        let factor = 1.2 / rho;
        p.b *= factor;
        p.s *= factor;
        let rep = check_admissible(&p, &w);
        assert_relative_eq!(rep.spectral_radius.unwrap(), 1.2, epsilon = 1e-8);
        assert!(!rep.admissible);

        // Gauge invariance: rescaling A against B changes nothing.
        p.b /= factor;
        p.s /= factor;
        let before = check_admissible(&p, &w).spectral_radius.unwrap();
        p.a *= 3.0;
        p.b /= 3.0;
        assert_relative_eq!(check_admissible(&p, &w).spectral_radius.unwrap(), before, epsilon = 1e-12);
    }

    #[test]
    fn normalize_ab_rules() {
        let a = dmatrix![2.0, 0.0; 0.0, 0.0];
        let b = dmatrix![1.0, 2.0; 3.0, 4.0];
        let (a2, b2) = normalize_ab(&a, &b).unwrap();
        assert_eq!(a2, a.clone() / 2.0);
        assert_eq!(b2, b.clone() * 2.0);

        let k = 3;
        let a = -Mat::identity(k, k) / (k as f64).sqrt();
        let (a2, b2) = normalize_ab(&a, &b).unwrap();
        assert_relative_eq!(a2, Mat::identity(k, k) / (k as f64).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(b2, -b.clone(), epsilon = 1e-15);

        assert!(matches!(normalize_ab(&Mat::zeros(2, 2), &b), Err(SigmarError::Degenerate(_))));
    }

    #[test]
    fn normalize_ab_preserves_kron_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a = random_mat(&mut rng, 3, 3, 2.0);
            let b = random_mat(&mut rng, 4, 4, 2.0);
            let (a2, b2) = normalize_ab(&a, &b).unwrap();
            assert_relative_eq!(kronlin::kron(&b2, &a2), kronlin::kron(&b, &a), epsilon = 1e-12, max_relative = 1e-12);
            let (a3, b3) = normalize_ab(&a2, &b2).unwrap();
            assert_relative_eq!(a3, a2, epsilon = 1e-15);
            assert_relative_eq!(b3, b2, epsilon = 1e-12);
        }
    }

    #[test]
    fn forecast_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = ring_weight(3);
        let mut p = small_params(&mut rng, 2, 3);
        let x = random_mat(&mut rng, 2, 3, 1.0);
        assert_eq!(one_step_forecast(&p, &w, &Mat::zeros(2, 3)).unwrap(), Mat::zeros(2, 3));

        let fc = one_step_forecast(&p, &w, &x).unwrap();
        let g = g_matrix(&w, &p.c);
        let y = kronlin::lu_solve(&g, &kronlin::col(&(phi_of(&p).unwrap() * kronlin::vec(&x)))).unwrap();
        assert_relative_eq!(fc, Mat::from_column_slice(2, 3, y.as_slice()), epsilon = 1e-12);

        p.c.fill(0.0);
        p.s.fill(0.0);
        let mar = &p.a * &x * p.b.transpose();
        assert_relative_eq!(one_step_forecast(&p, &w, &x).unwrap(), mar, epsilon = 1e-14);
    }

    #[test]
    fn noiseless_iteration_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = ring_weight(3);
        let p = small_params(&mut rng, 2, 3);
        let rf = reduced_form(&p, &w).unwrap();
        assert!(rf.spectral_radius < 1.0);
        let mut x = random_mat(&mut rng, 2, 3, 1.0);
        let start = x.norm();
        for _ in 0..50 {
            x = one_step_forecast(&p, &w, &x).unwrap();
        }
        assert!(x.norm() < start * 1e-3);
    }

    #[test]
    fn weight_checks() {
        let w = WeightMatrix::new(dmatrix![0.0, 1.0; 1.0, 0.0]).unwrap();
        let c = w.checks();
        assert!(c.zero_diagonal && c.symmetric_part_nonzero);
        assert!(!c.wtw_diagonal_not_constant);
        assert!(ring_weight(4).checks().all());
        assert!(WeightMatrix::new(Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn params_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = small_params(&mut rng, 2, 3);
        let text = serde_json::to_string(&p).unwrap();
        let back: SigmarParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["k"], 2);
        assert!(value["S"].as_array().unwrap().len() == p.support_size(0.0));
    }

    #[test]
    fn theta_flat_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = small_params(&mut rng, 2, 3);
        let th = ThetaFlat::from_params(&p).unwrap();
        assert_eq!(th.dim(), 4 + 36 + 1);
        let back = ThetaFlat::from_vector(&th.to_vector(), 2, 3).unwrap();
        assert_eq!(back, th);
        assert_eq!(th.c(), p.c);
        assert!(ThetaFlat::new(&p.c, &phi_of(&p).unwrap(), 0.0).is_err());
    }
}
