//! Random coefficient, network and series generation.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SigmarError};
use crate::kronlin::{self, Mat, Vector};
use crate::model::{self, PanelSeries, SigmarParams, WeightMatrix};

pub const DEFAULT_BURN_IN: usize = 200;

const STREAM_COEFFICIENTS: u64 = 1;
const STREAM_WEIGHT: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Seeded generator on its own stream. Distinct streams of one seed never
/// overlap, so replication `r` can use `stream(seed, r)` regardless of the
/// order in which replications run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub k: usize,
    pub n: usize,
    pub s: usize,
    pub rho_ar: f64,
    pub rho_sp: f64,
    pub s_mag: f64,
    pub sigma: f64,
    pub t: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(k: usize, n: usize, s: usize, t: usize, seed: u64) -> Self {
        Self {
            k,
            n,
            s,
            rho_ar: 0.6,
            rho_sp: 0.6,
            s_mag: 0.15,
            sigma: 1.0,
            t,
            burn_in: DEFAULT_BURN_IN,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return Err(SigmarError::Validation("k and n must be positive".into()));
        }
        let kn = self.k * self.n;
        if self.s > kn * kn {
            return Err(SigmarError::Validation(format!(
                "s = {} exceeds the {} entries of S",
                self.s,
                kn * kn
            )));
        }
        for (name, v) in [("rho_ar", self.rho_ar), ("rho_sp", self.rho_sp)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(SigmarError::Validation(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(self.s_mag >= 0.0) {
            return Err(SigmarError::Validation("sigma and s_mag must be nonnegative".into()));
        }
        if self.t == 0 || self.burn_in == 0 {
            return Err(SigmarError::Validation("T and burn_in must be at least 1".into()));
        }
        Ok(())
    }
}

fn normal_mat<R: Rng>(rng: &mut R, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn rescale_to(m: &Mat, target: f64) -> Result<Mat> {
    let rho = kronlin::spectral_radius(m)?;
    if !(rho > 0.0) {
        return Err(SigmarError::Generation("drew a nilpotent coefficient matrix".into()));
    }
    Ok(m * (target / rho))
}

/// Draw `(A, B, C, S)` for a design. Stationarity of `Π` depends on the
/// network, so `w` is required; the `S` sign pattern is redrawn and then its
/// magnitude halved until the transition is stationary.
pub fn gen_coefficients(spec: &DgpSpec, w: &WeightMatrix) -> Result<SigmarParams> {
    spec.validate()?;
    if w.n() != spec.n {
        return Err(SigmarError::Dimension(format!(
            "design has n={}, weight matrix has n={}",
            spec.n,
            w.n()
        )));
    }
    let (k, n) = (spec.k, spec.n);
    let kn = k * n;
    let mut rng = stream_rng(spec.seed, STREAM_COEFFICIENTS);

    let a = normal_mat(&mut rng, k, k);
    let b = normal_mat(&mut rng, n, n);
    let c = normal_mat(&mut rng, k, k);
    let rho_ab = kronlin::spectral_radius(&a)? * kronlin::spectral_radius(&b)?;
    if !(rho_ab > 0.0) {
        return Err(SigmarError::Generation("drew a nilpotent A or B".into()));
    }
    let f = (spec.rho_ar / rho_ab).sqrt();
    let a = a * f;
    let b = b * f;
    let c = rescale_to(&c, spec.rho_sp)?;

    let positions: Vec<usize> = sample(&mut rng, kn * kn, spec.s).into_iter().collect();
    let mut mag = spec.s_mag;
    for _halving in 0..20 {
        for _attempt in 0..100 {
            let mut s = Mat::zeros(kn, kn);
            for &p in &positions {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                s[(p % kn, p / kn)] = sign * mag;
            }
            let params = SigmarParams {
                a: a.clone(),
                b: b.clone(),
                c: c.clone(),
                s,
                sigma2: spec.sigma * spec.sigma,
            };
            if model::check_admissible(&params, w).admissible {
                return Ok(params);
            }
            if spec.s == 0 || mag == 0.0 {
                break;
            }
        }
        if spec.s == 0 || mag == 0.0 {
            break;
        }
        mag /= 2.0;
        log::warn!("halving S magnitude to {mag} to reach stationarity");
    }
    Err(SigmarError::Generation(
        "could not draw a stationary parameter set".into(),
    ))
}

/// Network and coefficients for a design. If no stationary draw exists for
/// `spec.seed`, the following seeds are tried in turn; the seed actually
/// used is returned.
pub fn gen_design(spec: &DgpSpec) -> Result<(WeightMatrix, SigmarParams, u64)> {
    let mut last = None;
    for offset in 0..50u64 {
        let seed = spec.seed.wrapping_add(offset);
        let w = gen_weight(spec.n, seed)?;
        let attempt = DgpSpec { seed, ..spec.clone() };
        match gen_coefficients(&attempt, &w) {
            Ok(p) => {
                if offset > 0 {
                    log::info!("design seed {} had no stationary draw; using {seed}", spec.seed);
                }
                return Ok((w, p, seed));
            }
            Err(e @ SigmarError::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| SigmarError::Generation("no stationary design found".into())))
}

/// Uniform entries, zero diagonal, rows normalized to one.
pub fn gen_weight(n: usize, seed: u64) -> Result<WeightMatrix> {
    if n < 2 {
        return Err(SigmarError::Validation(format!("network needs n >= 2, got {n}")));
    }
    let unif = Uniform::new(0.0, 1.0).map_err(|e| SigmarError::Generation(e.to_string()))?;
    for attempt in 0..10u64 {
        let mut rng = stream_rng(seed.wrapping_add(attempt), STREAM_WEIGHT);
        let mut w = Mat::from_fn(n, n, |i, j| if i == j { 0.0 } else { unif.sample(&mut rng) });
        let mut ok = true;
        for i in 0..n {
            let sum: f64 = w.row(i).sum();
            if !(sum > 0.0) {
                ok = false;
                break;
            }
            w.row_mut(i).scale_mut(1.0 / sum);
        }
        if !ok {
            continue;
        }
        let wm = WeightMatrix::new(w)?;
        let checks = wm.checks();
        if n == 2 || checks.all() {
            return Ok(wm);
        }
    }
    Err(SigmarError::Generation("could not draw a valid weight matrix".into()))
}

/// Simulate `t` frames after `burn_in` steps from a zero start.
pub fn simulate_series(
    params: &SigmarParams,
    w: &WeightMatrix,
    t: usize,
    burn_in: usize,
    seed: u64,
) -> Result<PanelSeries> {
    simulate_series_stream(params, w, t, burn_in, seed, 0)
}

/// [`simulate_series`] on replication stream `stream` of `seed`.
pub fn simulate_series_stream(
    params: &SigmarParams,
    w: &WeightMatrix,
    t: usize,
    burn_in: usize,
    seed: u64,
    stream: u64,
) -> Result<PanelSeries> {
    if t == 0 {
        return Err(SigmarError::Validation("T must be at least 1".into()));
    }
    let report = model::check_admissible(params, w);
    if !report.admissible {
        return Err(SigmarError::Domain(format!(
            "parameters are not admissible (spectral radius {:?})",
            report.spectral_radius
        )));
    }
    let rf = model::reduced_form(params, w)?;
    let (k, n) = (params.k(), params.n());
    let kn = k * n;
    let sd = params.sigma2.sqrt();
    let mut rng = stream_rng(seed, (STREAM_NOISE << 32) ^ stream);
    let mut x = Vector::zeros(kn);
    let mut frames = Vec::with_capacity(t);
    for step in 0..burn_in + t {
        let e = Vector::from_fn(kn, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        });
        x = &rf.pi * &x + &rf.ginv * e;
        if step >= burn_in {
            frames.push(kronlin::unvec(&x, k, n)?);
        }
    }
    PanelSeries::new(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn coefficients_hit_targets() {
        let w = gen_weight(4, 3).unwrap();
        let spec = DgpSpec::new(3, 4, 10, 100, 42);
        let p = gen_coefficients(&spec, &w).unwrap();
        let rho_ab = kronlin::spectral_radius(&p.a).unwrap() * kronlin::spectral_radius(&p.b).unwrap();
        assert_relative_eq!(rho_ab, 0.6, epsilon = 1e-10);
        assert_relative_eq!(kronlin::spectral_radius(&p.c).unwrap(), 0.6, epsilon = 1e-10);
        assert_eq!(p.support_size(0.0), 10);
        assert!(p.s.iter().all(|&v| v == 0.0 || v.abs() == 0.15));
        assert!(model::check_admissible(&p, &w).admissible);

        let again = gen_coefficients(&spec, &w).unwrap();
        assert_eq!(p, again);

        let zero = gen_coefficients(&DgpSpec::new(3, 4, 0, 100, 42), &w).unwrap();
        assert_eq!(zero.support_size(0.0), 0);
    }

    #[test]
    fn spec_validation() {
        let mut spec = DgpSpec::new(2, 2, 17, 10, 0);
        assert!(spec.validate().is_err());
        spec.s = 16;
        assert!(spec.validate().is_ok());
        spec.rho_ar = 1.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn weight_generation() {
        let w2 = gen_weight(2, 9).unwrap();
        assert_eq!(w2.matrix(), &nalgebra::dmatrix![0.0, 1.0; 1.0, 0.0]);

        for n in [3, 5, 10] {
            let w = gen_weight(n, 7).unwrap();
            let m = w.matrix();
            assert!(m.iter().all(|&x| x >= 0.0));
            for i in 0..n {
                assert_eq!(m[(i, i)], 0.0);
                assert_relative_eq!(m.row(i).sum(), 1.0, epsilon = 1e-12);
            }
            assert!(w.checks().all());
            assert_eq!(gen_weight(n, 7).unwrap().matrix(), m);
        }
        assert!(gen_weight(1, 0).is_err());
    }

    #[test]
    fn zero_noise_stays_at_zero() {
        let w = gen_weight(3, 1).unwrap();
        let mut p = SigmarParams::zeros(2, 3);
        p.a = nalgebra::dmatrix![0.5, 0.1; 0.0, 0.4];
        p.b = Mat::identity(3, 3);
        p.c = nalgebra::dmatrix![0.2, 0.0; 0.1, 0.2];
        p.sigma2 = 0.0;
        let xs = simulate_series(&p, &w, 20, 5, 0).unwrap();
        assert!(xs.frames().iter().all(|f| f.amax() == 0.0));
    }

    #[test]
    fn null_params_give_network_noise_covariance() {
        let (k, n) = (2, 3);
        let w = gen_weight(n, 5).unwrap();
        let mut p = SigmarParams::zeros(k, n);
        p.c = nalgebra::dmatrix![0.4, 0.1; -0.2, 0.3];
        let t = 20000;
        let xs = simulate_series(&p, &w, t, 1, 11).unwrap();
        let g = model::g_matrix(&w, &p.c);
        let ginv = g.clone().try_inverse().unwrap();
        let target = &ginv * ginv.transpose();
        let mut cov = Mat::zeros(k * n, k * n);
        for v in xs.vectors() {
            cov += &v * v.transpose();
        }
        cov /= t as f64;
        // Entry-wise standard error of a sample second moment is at most
        // sqrt(2) * max variance / sqrt(T).
        let se = 2f64.sqrt() * target.diagonal().max() / (t as f64).sqrt();
        assert!((cov - target).amax() < 5.0 * se);
    }

    #[test]
    fn series_is_reproducible_and_streams_differ() {
        let w = gen_weight(3, 2).unwrap();
        let p = gen_coefficients(&DgpSpec::new(2, 3, 3, 50, 2), &w).unwrap();
        let a = simulate_series(&p, &w, 50, 200, 8).unwrap();
        let b = simulate_series(&p, &w, 50, 200, 8).unwrap();
        assert_eq!(a, b);
        let c = simulate_series_stream(&p, &w, 50, 200, 8, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn residuals_recover_noise_variance() {
        let w = gen_weight(4, 4).unwrap();
        let mut p = gen_coefficients(&DgpSpec::new(3, 4, 10, 2000, 4), &w).unwrap();
        p.sigma2 = 2.25;
        let xs = simulate_series(&p, &w, 2000, 200, 4).unwrap();
        let g = model::g_matrix(&w, &p.c);
        let phi = model::phi_of(&p).unwrap();
        let v = xs.vectors();
        let mut ss = 0.0;
        let mut ss4 = 0.0;
        let mut count = 0.0;
        for t in 1..v.len() {
            let e = &g * &v[t] - &phi * &v[t - 1];
            for x in e.iter() {
                ss += x * x;
                ss4 += x.powi(4);
                count += 1.0;
            }
        }
        let var = ss / count;
        let se = ((ss4 / count - var * var) / count).sqrt();
        assert!((var - 2.25).abs() < 3.0 * se, "var {var} se {se}");
    }

    #[test]
    fn inadmissible_params_are_rejected() {
        let w = gen_weight(2, 0).unwrap();
        let mut p = SigmarParams::zeros(1, 2);
        p.a[(0, 0)] = 1.0;
        p.b = Mat::identity(2, 2) * 1.5;
        assert!(matches!(simulate_series(&p, &w, 10, 10, 0), Err(SigmarError::Domain(_))));
    }
}
