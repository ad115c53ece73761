//! von Mises-Fisher distribution on the unit hypersphere.
//!
//! Provides the log normalization constant, log density, closed-form KL
//! divergence between two vMF distributions sharing a concentration, exact
//! rejection sampling, and a reparameterized sampler whose output is
//! differentiable with respect to the mean direction.
//!
//! All Bessel-function numerics run in log space: the ratio
//! `I_{nu+1}(x) / I_nu(x)` uses the Perron/Gautschi continued fraction
//! evaluated with the modified Lentz algorithm, and `log I_nu(x)` uses the
//! ascending power series with log-gamma terms. Both stay finite for
//! dimensions and concentrations far beyond what the models here need.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use thiserror::Error;

/// Tolerance for accepting a vector as unit-norm.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Hard cap on rejection-sampling rounds before giving up.
const REJECTION_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum VmfError {
    #[error("unit vectors must have dimension >= 2, got {0}")]
    DimTooSmall(usize),
    #[error("vector norm {0} is not within {UNIT_NORM_TOL} of 1")]
    NotUnit(f64),
    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,
    #[error("concentration must be finite and >= 0, got {0}")]
    BadKappa(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("rejection sampler exceeded {REJECTION_CAP} rounds (kappa={kappa}, d={d})")]
    RejectionCap { kappa: f64, d: usize },
}

/// A vector on the unit sphere, validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wraps a vector that is already unit-norm (within [`UNIT_NORM_TOL`]).
    pub fn new(data: Vec<f64>) -> Result<Self, VmfError> {
        if data.len() < 2 {
            return Err(VmfError::DimTooSmall(data.len()));
        }
        let norm = l2_norm(&data);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(VmfError::NotUnit(norm));
        }
        Ok(UnitVector(data))
    }

    /// Normalizes an arbitrary vector onto the sphere.
    pub fn from_unnormalized(mut data: Vec<f64>) -> Result<Self, VmfError> {
        if data.len() < 2 {
            return Err(VmfError::DimTooSmall(data.len()));
        }
        let norm = l2_norm(&data);
        if norm == 0.0 || !norm.is_finite() {
            return Err(VmfError::ZeroNorm);
        }
        for x in &mut data {
            *x /= norm;
        }
        Ok(UnitVector(data))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// vMF distribution with mean direction `mu` and concentration `kappa`.
#[derive(Debug, Clone)]
pub struct Vmf {
    mu: UnitVector,
    kappa: f64,
}

impl Vmf {
    pub fn new(mu: UnitVector, kappa: f64) -> Result<Self, VmfError> {
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(VmfError::BadKappa(kappa));
        }
        Ok(Vmf { mu, kappa })
    }

    pub fn mu(&self) -> &UnitVector {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `log(I_{nu+1}(x) / I_nu(x))` for `x > 0`, `nu >= 0`.
///
/// Perron/Gautschi continued fraction for the Bessel ratio,
/// `r = 1 / (b_1 + 1 / (b_2 + ...))` with `b_k = 2(nu + k) / x`,
/// evaluated by the modified Lentz algorithm. The ratio lies in (0, 1)
/// for all valid arguments, so taking the log is always safe.
pub fn log_bessel_ratio(nu: f64, x: f64) -> f64 {
    bessel_ratio(nu, x).ln()
}

/// `I_{nu+1}(x) / I_nu(x)` for `x > 0`, `nu >= 0`.
pub fn bessel_ratio(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite(), "bessel_ratio requires x > 0");
    assert!(nu >= 0.0, "bessel_ratio requires nu >= 0");
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0_f64;
    for k in 1..100_000 {
        let b = 2.0 * (nu + k as f64) / x;
        d = b + d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + 1.0 / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    f
}

/// `log I_nu(x)` via the ascending series with log-gamma terms.
///
/// Terms `t_m = (2m + nu) ln(x/2) - lgamma(m+1) - lgamma(m+nu+1)` rise to a
/// single peak and then decay; summation stops once a term falls 46 nats
/// below the peak.
fn log_bessel_i(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0 && nu >= 0.0);
    let lh = (x / 2.0).ln();
    let mut terms: Vec<f64> = Vec::with_capacity(64);
    let mut peak = f64::NEG_INFINITY;
    let mut m = 0.0_f64;
    loop {
        let t = (2.0 * m + nu) * lh - libm::lgamma(m + 1.0) - libm::lgamma(m + nu + 1.0);
        terms.push(t);
        peak = peak.max(t);
        if t < peak - 46.0 && m > (x / 2.0).max(nu) {
            break;
        }
        m += 1.0;
        assert!(m < 1e7, "log_bessel_i series failed to converge");
    }
    let sum: f64 = terms.iter().map(|t| (t - peak).exp()).sum();
    peak + sum.ln()
}

/// Log normalization constant `log C_d(kappa)` of the vMF density on the
/// `(d-1)`-sphere. At `kappa = 0` this is minus the log surface area.
pub fn log_norm_const(d: usize, kappa: f64) -> f64 {
    assert!(d >= 2, "vMF requires dimension >= 2");
    assert!(kappa.is_finite() && kappa >= 0.0);
    let half_d = d as f64 / 2.0;
    if kappa == 0.0 {
        // Surface area of S^{d-1} is 2 pi^{d/2} / Gamma(d/2).
        return -(std::f64::consts::LN_2 + half_d * std::f64::consts::PI.ln()
            - libm::lgamma(half_d));
    }
    (half_d - 1.0) * kappa.ln()
        - half_d * (2.0 * std::f64::consts::PI).ln()
        - log_bessel_i(half_d - 1.0, kappa)
}

/// Log density of `dist` at `v`.
pub fn log_density(dist: &Vmf, v: &UnitVector) -> Result<f64, VmfError> {
    if dist.dim() != v.dim() {
        return Err(VmfError::DimMismatch(dist.dim(), v.dim()));
    }
    Ok(log_norm_const(dist.dim(), dist.kappa) + dist.kappa * dist.mu.dot(v))
}

/// The KL prefactor `C_kappa = kappa I_{d/2}(kappa) / (2 I_{d/2-1}(kappa))`.
pub fn c_kappa(d: usize, kappa: f64) -> f64 {
    assert!(d >= 2);
    if kappa == 0.0 {
        return 0.0;
    }
    kappa * bessel_ratio(d as f64 / 2.0 - 1.0, kappa) / 2.0
}

/// Closed-form KL divergence between two vMF distributions with the same
/// concentration: `C_kappa * ||mu1 - mu2||^2`.
pub fn kl(mu1: &UnitVector, mu2: &UnitVector, kappa: f64) -> Result<f64, VmfError> {
    if mu1.dim() != mu2.dim() {
        return Err(VmfError::DimMismatch(mu1.dim(), mu2.dim()));
    }
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(VmfError::BadKappa(kappa));
    }
    let sq: f64 = mu1
        .as_slice()
        .iter()
        .zip(mu2.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(c_kappa(mu1.dim(), kappa) * sq)
}

/// Mean resultant length `E[mu . v] = I_{d/2}(kappa) / I_{d/2-1}(kappa)`.
pub fn mean_resultant_length(d: usize, kappa: f64) -> f64 {
    assert!(d >= 2);
    if kappa == 0.0 {
        return 0.0;
    }
    bessel_ratio(d as f64 / 2.0 - 1.0, kappa)
}

/// Draws the cosine `w = mu . v` of a vMF sample via Wood's rejection scheme.
fn sample_w<R: Rng + ?Sized>(d: usize, kappa: f64, rng: &mut R) -> Result<f64, VmfError> {
    let dm1 = (d - 1) as f64;
    // Conjugate form of (-2k + sqrt(4k^2 + (d-1)^2)) / (d-1); exact at any
    // kappa, where the direct form cancels catastrophically for large kappa.
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid Beta parameters");
    for _ in 0..REJECTION_CAP {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            return Ok(w.clamp(-1.0, 1.0));
        }
    }
    Err(VmfError::RejectionCap { kappa, d })
}

/// Uniform direction on the unit sphere in `R^n` (`n >= 1`).
fn sample_sphere<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = l2_norm(&g);
        if norm > 1e-12 {
            return g.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Exact vMF sample via Wood's scheme plus a tangent direction.
pub fn sample<R: Rng + ?Sized>(dist: &Vmf, rng: &mut R) -> Result<UnitVector, VmfError> {
    let d = dist.dim();
    let mu = dist.mu.as_slice();
    let w = sample_w(d, dist.kappa, rng)?;
    // Tangent direction: project a Gaussian onto the orthogonal complement
    // of mu and renormalize, retrying in the measure-zero degenerate case.
    let t = loop {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let gm = dot(&g, mu);
        let resid: Vec<f64> = g.iter().zip(mu).map(|(gi, mi)| gi - gm * mi).collect();
        let norm = l2_norm(&resid);
        if norm > 1e-12 {
            break resid.into_iter().map(|x| x / norm).collect::<Vec<f64>>();
        }
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    let v: Vec<f64> = mu.iter().zip(&t).map(|(mi, ti)| w * mi + s * ti).collect();
    UnitVector::from_unnormalized(v)
}

/// A reparameterized draw: the sample `v` together with the underlying
/// noise `z`, such that `v = reparam_apply(mu, z)` exactly.
#[derive(Debug, Clone)]
pub struct ReparamSample {
    pub v: UnitVector,
    pub z: Vec<f64>,
}

/// Draws the mu-independent noise vector `z = [w, sqrt(1-w^2) u]` with
/// `w` from Wood's scheme and `u` uniform on the sphere in `R^{d-1}`.
pub fn reparam_noise<R: Rng + ?Sized>(
    d: usize,
    kappa: f64,
    rng: &mut R,
) -> Result<Vec<f64>, VmfError> {
    if d < 2 {
        return Err(VmfError::DimTooSmall(d));
    }
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(VmfError::BadKappa(kappa));
    }
    let w = sample_w(d, kappa, rng)?;
    let u = sample_sphere(d - 1, rng);
    let s = (1.0 - w * w).max(0.0).sqrt();
    let mut z = Vec::with_capacity(d);
    z.push(w);
    z.extend(u.into_iter().map(|x| s * x));
    Ok(z)
}

/// Maps noise `z` (concentrated around `e1`) to a sample around `mu` with
/// the Householder reflection `H = I - 2 h h^T`, `h = normalize(e1 - mu)`.
/// When `mu` coincides with `e1` the reflection degenerates to the identity.
pub fn reparam_apply(mu: &[f64], z: &[f64]) -> Vec<f64> {
    assert_eq!(mu.len(), z.len());
    let mut a: Vec<f64> = mu.iter().map(|x| -x).collect();
    a[0] += 1.0;
    let norm = l2_norm(&a);
    if norm < 1e-12 {
        return z.to_vec();
    }
    let h: Vec<f64> = a.iter().map(|x| x / norm).collect();
    let s = dot(&h, z);
    z.iter().zip(&h).map(|(zi, hi)| zi - 2.0 * s * hi).collect()
}

/// Vector-Jacobian product of [`reparam_apply`] with respect to `mu`:
/// given `upstream = dL/dv`, returns `dL/dmu`.
pub fn reparam_vjp(mu: &[f64], z: &[f64], upstream: &[f64]) -> Vec<f64> {
    assert_eq!(mu.len(), z.len());
    assert_eq!(mu.len(), upstream.len());
    let d = mu.len();
    let mut a: Vec<f64> = mu.iter().map(|x| -x).collect();
    a[0] += 1.0;
    let norm = l2_norm(&a);
    if norm < 1e-12 {
        return vec![0.0; d];
    }
    let h: Vec<f64> = a.iter().map(|x| x / norm).collect();
    let s = dot(&h, z);
    let gh = dot(upstream, &h);
    // dL/dh = -2 (s * upstream + (upstream . h) * z)
    let dh: Vec<f64> = upstream
        .iter()
        .zip(z)
        .map(|(gi, zi)| -2.0 * (s * gi + gh * zi))
        .collect();
    // dL/da = (I - h h^T) / ||a|| . dL/dh, then dL/dmu = -dL/da.
    let hd = dot(&h, &dh);
    (0..d).map(|i| -(dh[i] - h[i] * hd) / norm).collect()
}

/// Reparameterized vMF sample. The returned noise makes the draw
/// differentiable: `v = reparam_apply(mu, z)` and [`reparam_vjp`] gives the
/// exact gradient of `v` with respect to `mu` holding `z` fixed.
pub fn sample_reparam<R: Rng + ?Sized>(
    dist: &Vmf,
    rng: &mut R,
) -> Result<ReparamSample, VmfError> {
    let z = reparam_noise(dist.dim(), dist.kappa, rng)?;
    let v = reparam_apply(dist.mu.as_slice(), &z);
    Ok(ReparamSample {
        v: UnitVector::from_unnormalized(v)?,
        z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rel_err(got: f64, want: f64) -> f64 {
        (got - want).abs() / want.abs().max(1e-300)
    }

    fn unit(v: Vec<f64>) -> UnitVector {
        UnitVector::from_unnormalized(v).unwrap()
    }

    #[test]
    fn ratio_matches_half_integer_identity() {
        // I_{3/2}(x) / I_{1/2}(x) = coth(x) - 1/x.
        for &x in &[0.1_f64, 1.0, 2.0, 10.0, 500.0] {
            let want = 1.0 / x.tanh() - 1.0 / x;
            assert!(
                rel_err(bessel_ratio(0.5, x), want) < 1e-12,
                "x={x}: {} vs {want}",
                bessel_ratio(0.5, x)
            );
        }
    }

    #[test]
    fn ratio_matches_series_quotient() {
        for &nu in &[0.0_f64, 0.5, 3.0, 31.0] {
            for &x in &[0.5_f64, 1.0, 10.0, 500.0] {
                let want = (log_bessel_i(nu + 1.0, x) - log_bessel_i(nu, x)).exp();
                assert!(
                    rel_err(bessel_ratio(nu, x), want) < 1e-10,
                    "nu={nu} x={x}: {} vs {want}",
                    bessel_ratio(nu, x)
                );
            }
        }
    }

    #[test]
    fn ratio_spot_values() {
        assert!(rel_err(bessel_ratio(0.0, 1.0), 0.446389965896534507) < 1e-12);
        assert!(rel_err(bessel_ratio(0.0, 10.0), 0.948599825954845959) < 1e-12);
        assert!(rel_err(bessel_ratio(31.0, 500.0), 0.938923497217398252) < 1e-12);
        assert!(rel_err(bessel_ratio(31.0, 1.0), 0.0156213025986216344) < 1e-12);
        assert!(rel_err(bessel_ratio(511.0, 500.0), 0.407365683237230252) < 1e-12);
    }

    #[test]
    fn log_norm_const_spot_values() {
        assert!(rel_err(log_norm_const(3, 1.0), -2.69246360854048643) < 1e-10);
        assert!(rel_err(log_norm_const(2, 1.0), -2.07379142491652413) < 1e-10);
        assert!(rel_err(log_norm_const(8, 10.0), -7.91590160380387238) < 1e-10);
        assert!(rel_err(log_norm_const(64, 500.0), -361.171568992095890) < 1e-10);
        assert!(rel_err(log_norm_const(64, 1.0), 40.7599084500664480) < 1e-10);
        // kappa = 0 is the uniform density: minus log surface area.
        assert!(rel_err(log_norm_const(2, 0.0), -1.83787706640934548) < 1e-12);
        let sphere_area_3d = 4.0 * std::f64::consts::PI;
        assert!(rel_err(log_norm_const(3, 0.0), -sphere_area_3d.ln()) < 1e-12);
    }

    #[test]
    fn log_density_at_mode() {
        let mu = unit(vec![1.0, 0.0, 0.0]);
        let dist = Vmf::new(mu.clone(), 10.0).unwrap();
        let got = log_density(&dist, &mu).unwrap();
        assert!(rel_err(got, 0.464708028645853825) < 1e-10);
    }

    #[test]
    fn kl_spot_values() {
        // Antipodal means, d=3, kappa=2.
        let mu1 = unit(vec![0.0, 0.0, 1.0]);
        let mu2 = unit(vec![0.0, 0.0, -1.0]);
        let got = kl(&mu1, &mu2, 2.0).unwrap();
        assert!(rel_err(got, 2.14925888291019238) < 1e-12, "got {got}");
        // Orthogonal means, d=2, kappa=1.
        let mu1 = unit(vec![1.0, 0.0]);
        let mu2 = unit(vec![0.0, 1.0]);
        let got = kl(&mu1, &mu2, 1.0).unwrap();
        assert!(rel_err(got, 0.446389965896534507) < 1e-12, "got {got}");
    }

    #[test]
    fn kl_monte_carlo_smoke() {
        // KL(P||Q) = kappa E_{v~P}[(mu1 - mu2) . v]; check one pair at 4 SE.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mu1 = unit(vec![0.6, -0.8, 0.0, 0.0]);
        let mu2 = unit(vec![0.1, 0.3, -0.5, 1.1]);
        let kappa = 10.0;
        let dist = Vmf::new(mu1.clone(), kappa).unwrap();
        let diff: Vec<f64> = mu1
            .as_slice()
            .iter()
            .zip(mu2.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let n = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = sample(&dist, &mut rng).unwrap();
            let x = kappa * dot(&diff, v.as_slice());
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        let closed = kl(&mu1, &mu2, kappa).unwrap();
        assert!(
            (mean - closed).abs() < 4.0 * se,
            "mc {mean} vs closed {closed} (se {se})"
        );
    }

    #[test]
    fn sampler_mean_resultant_length() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for &(d, kappa) in &[(2usize, 1.0), (3, 10.0), (8, 10.0)] {
            let mut mu = vec![0.0; d];
            mu[d - 1] = 1.0;
            let mu = unit(mu);
            let dist = Vmf::new(mu.clone(), kappa).unwrap();
            let n = 20_000;
            let mean: f64 = (0..n)
                .map(|_| mu.dot(&sample(&dist, &mut rng).unwrap()))
                .sum::<f64>()
                / n as f64;
            let want = mean_resultant_length(d, kappa);
            assert!(
                (mean - want).abs() < 0.02,
                "d={d} kappa={kappa}: {mean} vs {want}"
            );
        }
    }

    #[test]
    fn uniform_sampler_has_zero_resultant() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mu = unit(vec![1.0, 0.0, 0.0]);
        let dist = Vmf::new(mu.clone(), 0.0).unwrap();
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| mu.dot(&sample(&dist, &mut rng).unwrap()))
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.02, "resultant {mean}");
    }

    #[test]
    fn sample_is_deterministic_per_seed() {
        let mu = unit(vec![0.3, -0.4, 0.5, 0.1]);
        let dist = Vmf::new(mu, 25.0).unwrap();
        let a: Vec<_> = {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            (0..16).map(|_| sample(&dist, &mut rng).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            (0..16).map(|_| sample(&dist, &mut rng).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    /// Two-sample Kolmogorov-Smirnov statistic between sorted samples.
    fn ks_stat(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (n, m) = (a.len(), b.len());
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < n && j < m {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
        }
        d
    }

    #[test]
    fn reparam_matches_exact_sampler_distribution() {
        // The two samplers use independent code paths (tangent-Gaussian vs
        // Householder-reflected noise), so a KS test on mu . v is a real
        // distributional check. alpha = 0.01 critical value c = 1.6276.
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for &(d, kappa) in &[(2usize, 1.0), (8, 50.0)] {
            let mu = unit((0..d).map(|i| (i as f64 + 0.5).sin()).collect());
            let dist = Vmf::new(mu.clone(), kappa).unwrap();
            let n = 5_000;
            let a: Vec<f64> = (0..n)
                .map(|_| mu.dot(&sample(&dist, &mut rng).unwrap()))
                .collect();
            let b: Vec<f64> = (0..n)
                .map(|_| mu.dot(&sample_reparam(&dist, &mut rng).unwrap().v))
                .collect();
            let stat = ks_stat(a, b);
            let crit = 1.6276 * ((2 * n) as f64 / (n * n) as f64).sqrt();
            assert!(stat < crit, "d={d} kappa={kappa}: KS {stat} >= {crit}");
        }
    }

    #[test]
    fn reparam_apply_reaches_mu_neighborhood() {
        // H maps e1 to mu exactly.
        let mu = unit(vec![0.2, -0.7, 0.4, 0.5]);
        let mut e1 = vec![0.0; 4];
        e1[0] = 1.0;
        let v = reparam_apply(mu.as_slice(), &e1);
        for (a, b) in v.iter().zip(mu.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reparam_identity_when_mu_is_e1() {
        let z = vec![0.6, 0.8, 0.0];
        let v = reparam_apply(&[1.0, 0.0, 0.0], &z);
        assert_eq!(v, z);
        let g = reparam_vjp(&[1.0, 0.0, 0.0], &z, &[1.0, 2.0, 3.0]);
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn reparam_vjp_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for d in [2usize, 3, 8] {
            let mu = sample_sphere(d, &mut rng);
            let dist = Vmf::new(UnitVector::new(mu.clone()).unwrap(), 20.0).unwrap();
            let z = reparam_noise(d, dist.kappa(), &mut rng).unwrap();
            let upstream: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let grad = reparam_vjp(&mu, &z, &upstream);
            let eps = 1e-6;
            for j in 0..d {
                let mut lo = mu.clone();
                let mut hi = mu.clone();
                lo[j] -= eps;
                hi[j] += eps;
                let f = |m: &[f64]| dot(&upstream, &reparam_apply(m, &z));
                let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
                assert!(
                    (fd - grad[j]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "d={d} j={j}: fd {fd} vs vjp {}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn unit_vector_validation() {
        assert!(matches!(
            UnitVector::new(vec![1.0]),
            Err(VmfError::DimTooSmall(1))
        ));
        assert!(matches!(
            UnitVector::new(vec![0.5, 0.5]),
            Err(VmfError::NotUnit(_))
        ));
        assert!(matches!(
            UnitVector::from_unnormalized(vec![0.0, 0.0]),
            Err(VmfError::ZeroNorm)
        ));
        assert!(Vmf::new(unit(vec![1.0, 0.0]), -1.0).is_err());
        assert!(Vmf::new(unit(vec![1.0, 0.0]), f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn prop_ratio_within_unit_interval(
            nu in 0.0_f64..200.0,
            x in 1e-3_f64..2000.0,
        ) {
            let r = bessel_ratio(nu, x);
            prop_assert!(r > 0.0 && r < 1.0, "ratio {r}");
        }

        #[test]
        fn prop_ratio_monotone(
            nu in 0.0_f64..50.0,
            x in 0.1_f64..500.0,
        ) {
            // Increasing in x, decreasing in nu.
            prop_assert!(bessel_ratio(nu, x * 1.1) > bessel_ratio(nu, x));
            prop_assert!(bessel_ratio(nu + 0.5, x) < bessel_ratio(nu, x));
        }

        #[test]
        fn prop_kl_nonneg_symmetric_zero_on_equal(
            raw1 in proptest::collection::vec(-1.0_f64..1.0, 3),
            raw2 in proptest::collection::vec(-1.0_f64..1.0, 3),
            kappa in 0.0_f64..300.0,
        ) {
            prop_assume!(l2_norm(&raw1) > 1e-3 && l2_norm(&raw2) > 1e-3);
            let mu1 = UnitVector::from_unnormalized(raw1).unwrap();
            let mu2 = UnitVector::from_unnormalized(raw2).unwrap();
            let ab = kl(&mu1, &mu2, kappa).unwrap();
            let ba = kl(&mu2, &mu1, kappa).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
            prop_assert!(kl(&mu1, &mu1, kappa).unwrap() == 0.0);
        }

        #[test]
        fn prop_density_maximal_at_mode(
            raw in proptest::collection::vec(-1.0_f64..1.0, 4),
            other in proptest::collection::vec(-1.0_f64..1.0, 4),
            kappa in 0.01_f64..300.0,
        ) {
            prop_assume!(l2_norm(&raw) > 1e-3 && l2_norm(&other) > 1e-3);
            let mu = UnitVector::from_unnormalized(raw).unwrap();
            let v = UnitVector::from_unnormalized(other).unwrap();
            let dist = Vmf::new(mu.clone(), kappa).unwrap();
            let at_mode = log_density(&dist, &mu).unwrap();
            let at_v = log_density(&dist, &v).unwrap();
            prop_assert!(at_v <= at_mode + 1e-12);
        }

        #[test]
        fn prop_samples_are_unit_norm(seed in 0u64..1000, kappa in 0.0_f64..500.0) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mu = UnitVector::from_unnormalized(vec![0.5, -1.0, 2.0]).unwrap();
            let dist = Vmf::new(mu, kappa).unwrap();
            let v = sample(&dist, &mut rng).unwrap();
            prop_assert!((l2_norm(v.as_slice()) - 1.0).abs() <= UNIT_NORM_TOL);
            let r = sample_reparam(&dist, &mut rng).unwrap();
            prop_assert!((l2_norm(r.v.as_slice()) - 1.0).abs() <= UNIT_NORM_TOL);
            prop_assert!(r.z[0] >= -1.0 && r.z[0] <= 1.0);
        }
    }
}
