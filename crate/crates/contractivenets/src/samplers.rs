//! Random generation of certified subnetworks.
//!
//! Two routes: rejection sampling of sparse matrices against the
//! absolute-value condition (subnetwork weights stay frozen during training),
//! and the direct SVD parameterization Φ⁻¹UΣVᵀΦ whose singular values are
//! squashed below 1/g so the singular-value condition holds for any parameter
//! setting (weights remain trainable).

use crate::certificates::{
    certify_abs, certify_svd_condition, orthogonal_from_skew_params, Certificate, CertifyError,
};
use crate::numerics::{Diagonal, Matrix, Vector};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

/// Keeps Σ_ii strictly inside [0, g⁻¹).
pub const EPS_SIGMA: f64 = 1e-3;
/// Keeps Φ invertible when the raw parameters vanish.
pub const EPS_PHI: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error(
        "max_tries exhausted: {accepted}/{tries} candidates accepted ({:.3}%); relax density/pre_scalar or raise max_tries",
        100.0 * *accepted as f64 / *tries as f64
    )]
    MaxTriesExhausted { tries: usize, accepted: usize },
    #[error("invalid config: {0}")]
    Input(String),
    #[error(transparent)]
    Certify(#[from] CertifyError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

/// Sparse rejection-sampling settings.
///
/// `density` is the fraction of entries made nonzero (an exact count of
/// round(density·n²) positions, drawn without replacement); values are
/// uniform in [−pre_scalar, pre_scalar]. Candidates are checked against the
/// absolute-value condition at g = 1 and, once accepted, scaled by
/// `post_scalar` (≤ 1, so acceptance is preserved).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseInitConfig {
    pub n: usize,
    pub density: f64,
    pub pre_scalar: f64,
    #[serde(default = "default_post_scalar")]
    pub post_scalar: f64,
    #[serde(default = "default_max_tries")]
    pub max_tries: usize,
    pub seed: u64,
}

fn default_post_scalar() -> f64 {
    1.0
}

fn default_max_tries() -> usize {
    100_000
}

impl SparseInitConfig {
    /// Best configuration from the sparsity sweeps: 3.3% density,
    /// pre-scalar 30, post-scalar 0.2.
    pub fn best_preset(n: usize, seed: u64) -> Self {
        Self {
            n,
            density: 0.033,
            pre_scalar: 30.0,
            post_scalar: 0.2,
            max_tries: default_max_tries(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(SamplerError::Input("n must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(SamplerError::Input(format!(
                "density must be in [0,1], got {}",
                self.density
            )));
        }
        if !(self.pre_scalar >= 0.0 && self.pre_scalar.is_finite()) {
            return Err(SamplerError::Input("pre_scalar must be ≥ 0".into()));
        }
        if !(self.post_scalar > 0.0 && self.post_scalar <= 1.0) {
            return Err(SamplerError::Input(format!(
                "post_scalar must be in (0,1] to preserve stability, got {}",
                self.post_scalar
            )));
        }
        if self.max_tries == 0 {
            return Err(SamplerError::Input("max_tries must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One candidate draw. The exact procedure (stable across versions, so test
/// oracles can replay it):
/// 1. nnz = round(density·n²)
/// 2. positions = first nnz entries of a partial Fisher–Yates shuffle of
///    0..n² ([`StreamRng::sample_distinct`])
/// 3. for each position in draw order: value = uniform(−pre_scalar, pre_scalar)
/// 4. position k maps to (row, col) = (k / n, k % n)
/// 5. the diagonal is zeroed afterwards
pub fn draw_sparse_candidate(n: usize, density: f64, scalar: f64, rng: &mut StreamRng) -> Matrix {
    let total = n * n;
    let nnz = (density * total as f64).round() as usize;
    let positions = rng.sample_distinct(total, nnz.min(total));
    let mut w = Matrix::zeros(n, n);
    for pos in positions {
        let (i, j) = (pos / n, pos % n);
        w[(i, j)] = rng.uniform(-scalar, scalar);
    }
    for i in 0..n {
        w[(i, i)] = 0.0;
    }
    w
}

/// Rejection-sample one subnetwork on stream `stream` of the config seed.
/// Returns the post-scaled weights with a freshly derived certificate.
pub fn sample_sparse_subnet_stream(
    cfg: &SparseInitConfig,
    stream: u64,
) -> Result<(Matrix, Certificate)> {
    cfg.validate()?;
    let mut rng = StreamRng::substream(cfg.seed, stream);
    for _ in 0..cfg.max_tries {
        let w = draw_sparse_candidate(cfg.n, cfg.density, cfg.pre_scalar, &mut rng);
        match certify_abs(&w, 1.0) {
            Ok(_) => {
                let scaled = &w * cfg.post_scalar;
                let cert = certify_abs(&scaled, 1.0)?;
                return Ok((scaled, cert));
            }
            Err(CertifyError::Rejected(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(SamplerError::MaxTriesExhausted {
        tries: cfg.max_tries,
        accepted: 0,
    })
}

/// Rejection-sample on stream 0.
pub fn sample_sparse_subnet(cfg: &SparseInitConfig) -> Result<(Matrix, Certificate)> {
    sample_sparse_subnet_stream(cfg, 0)
}

/// p subnetworks, one per stream index, so initialization is
/// order-independent and parallelizable without losing determinism.
pub fn sample_sparse_subnets(
    cfg: &SparseInitConfig,
    p: usize,
) -> Result<Vec<(Matrix, Certificate)>> {
    (0..p)
        .map(|i| sample_sparse_subnet_stream(cfg, i as u64))
        .collect()
}

/// Fraction of i.i.d. candidates passing the absolute-value condition.
/// Candidates are drawn sequentially on stream 0 of the seed.
pub fn estimate_acceptance_rate(
    n: usize,
    density: f64,
    scalar: f64,
    trials: usize,
    rng_seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(SamplerError::Input("trials must be ≥ 1".into()));
    }
    let mut rng = StreamRng::substream(rng_seed, 0);
    let mut accepted = 0usize;
    for _ in 0..trials {
        let w = draw_sparse_candidate(n, density, scalar, &mut rng);
        match certify_abs(&w, 1.0) {
            Ok(_) => accepted += 1,
            Err(CertifyError::Rejected(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(accepted as f64 / trials as f64)
}

/// Raw parameters of one SVD-parameterized subnetwork.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdSubnetParams {
    pub phi_raw: Vec<f64>,
    pub skew_u: Vec<f64>,
    pub skew_v: Vec<f64>,
    pub sigma_raw: Vec<f64>,
    pub g: f64,
}

impl SvdSubnetParams {
    pub fn zeros(n: usize, g: f64) -> Self {
        Self {
            phi_raw: vec![0.0; n],
            skew_u: vec![0.0; n * (n - 1) / 2],
            skew_v: vec![0.0; n * (n - 1) / 2],
            sigma_raw: vec![0.0; n],
            g,
        }
    }

    pub fn random(n: usize, g: f64, rng: &mut StreamRng) -> Self {
        Self {
            phi_raw: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            skew_u: (0..n * (n - 1) / 2).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            skew_v: (0..n * (n - 1) / 2).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            sigma_raw: (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            g,
        }
    }

    pub fn n(&self) -> usize {
        self.phi_raw.len()
    }

    pub fn len(&self) -> usize {
        2 * self.n() + self.n() * (self.n() - 1)
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Σ_ii from one raw parameter: g⁻¹(1−ε_σ)·logistic(raw) ∈ (0, g⁻¹).
pub fn squash_sigma(raw: f64, g: f64) -> f64 {
    (1.0 - EPS_SIGMA) / g * logistic(raw)
}

/// Φ_ii from one raw parameter: raw² + ε_φ > 0.
pub fn squash_phi(raw: f64) -> f64 {
    raw * raw + EPS_PHI
}

#[derive(Debug, Clone)]
pub struct SvdSubnet {
    pub w: Matrix,
    /// Φ² — the contraction metric of this subnetwork.
    pub metric: Diagonal,
    pub cert: Certificate,
}

/// W = Φ⁻¹UΣVᵀΦ from raw parameters. Total: every parameter setting yields a
/// certified subnetwork (ΦWΦ⁻¹ = UΣVᵀ has all singular values < g⁻¹, which is
/// the singular-value condition in metric Φ²).
pub fn build_svd_subnet(params: &SvdSubnetParams) -> Result<SvdSubnet> {
    let n = params.n();
    if n == 0 {
        return Err(SamplerError::Input("empty parameter vector".into()));
    }
    let pairs = n * (n - 1) / 2;
    if params.skew_u.len() != pairs || params.skew_v.len() != pairs {
        return Err(SamplerError::Input(format!(
            "skew parameter lengths {}/{} do not match n={n} (expected {pairs})",
            params.skew_u.len(),
            params.skew_v.len()
        )));
    }
    if params.sigma_raw.len() != n {
        return Err(SamplerError::Input("sigma_raw length mismatch".into()));
    }
    if !(params.g.is_finite() && params.g > 0.0) {
        return Err(SamplerError::Input(format!("g must be > 0, got {}", params.g)));
    }
    let all_finite = params
        .phi_raw
        .iter()
        .chain(&params.skew_u)
        .chain(&params.skew_v)
        .chain(&params.sigma_raw)
        .all(|v| v.is_finite());
    if !all_finite {
        return Err(SamplerError::Input("non-finite parameters".into()));
    }

    let u = orthogonal_from_skew_params(n, &params.skew_u)?;
    let v = orthogonal_from_skew_params(n, &params.skew_v)?;
    let sigma = Vector::from_iterator(n, params.sigma_raw.iter().map(|&s| squash_sigma(s, params.g)));
    let phi = Vector::from_iterator(n, params.phi_raw.iter().map(|&p| squash_phi(p)));
    let k = &u * Matrix::from_diagonal(&sigma) * v.transpose();
    // W = Φ⁻¹KΦ entrywise: W_ab = K_ab·φ_b/φ_a
    let w = Matrix::from_fn(n, n, |a, b| k[(a, b)] * phi[b] / phi[a]);
    let metric = Diagonal::positive(phi.component_mul(&phi)).expect("squash keeps Φ² positive");
    let cert = certify_svd_condition(&w, params.g, &metric)?;
    Ok(SvdSubnet { w, metric, cert })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::validate_certificate;
    use crate::numerics::fro_norm;
    use rand_chacha::rand_core::{RngCore, SeedableRng};

    #[test]
    fn zero_density_accepts_immediately() {
        let cfg = SparseInitConfig {
            n: 8,
            density: 0.0,
            pre_scalar: 5.0,
            post_scalar: 1.0,
            max_tries: 1,
            seed: 0,
        };
        let (w, cert) = sample_sparse_subnet(&cfg).unwrap();
        assert_eq!(w, Matrix::zeros(8, 8));
        validate_certificate(&cert, 200, 0).unwrap();
    }

    #[test]
    fn sampling_is_bit_reproducible() {
        let cfg = SparseInitConfig {
            n: 12,
            density: 0.2,
            pre_scalar: 0.5,
            post_scalar: 0.7,
            max_tries: 10_000,
            seed: 99,
        };
        let (w1, _) = sample_sparse_subnet(&cfg).unwrap();
        let (w2, _) = sample_sparse_subnet(&cfg).unwrap();
        assert!(w1
            .iter()
            .zip(w2.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // a different stream gives a different matrix
        let (w3, _) = sample_sparse_subnet_stream(&cfg, 1).unwrap();
        assert!(w1.iter().zip(w3.iter()).any(|(a, b)| a != b));
    }

    #[test]
    fn candidate_diagonal_is_zero_and_count_exact() {
        let mut rng = StreamRng::new(5);
        let w = draw_sparse_candidate(10, 0.4, 1.0, &mut rng);
        for i in 0..10 {
            assert_eq!(w[(i, i)], 0.0);
        }
        // nnz before diagonal zeroing is exactly round(0.4·100) = 40;
        // at most 10 of those may have landed on the diagonal
        let nnz = w.iter().filter(|&&v| v != 0.0).count();
        assert!((30..=40).contains(&nnz), "nnz = {nnz}");
    }

    /// Independent oracle sharing the RNG stream: re-implements the documented
    /// draw + acceptance decision directly on ChaCha12 and must agree exactly.
    #[test]
    fn acceptance_rate_matches_shared_stream_oracle() {
        let n = 4usize;
        let (density, scalar, trials, seed) = (1.0f64, 1.0f64, 1000usize, 7u64);

        let lib_rate = estimate_acceptance_rate(n, density, scalar, trials, seed).unwrap();

        let mut raw = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        raw.set_stream(0);
        let mut uniform01 = |r: &mut rand_chacha::ChaCha12Rng| {
            (r.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
        };
        let total = n * n;
        let nnz = (density * total as f64).round() as usize;
        let mut accepted = 0usize;
        for _ in 0..trials {
            // partial Fisher–Yates, as documented in rng.rs
            let mut pool: Vec<usize> = (0..total).collect();
            for t in 0..nnz {
                let j = t + (((total - t) as f64) * uniform01(&mut raw)) as usize;
                pool.swap(t, j);
            }
            let mut w = Matrix::zeros(n, n);
            for &pos in &pool[..nnz] {
                let val = -scalar + 2.0 * scalar * uniform01(&mut raw);
                w[(pos / n, pos % n)] = val;
            }
            for i in 0..n {
                w[(i, i)] = 0.0;
            }
            // decision: max real part of eig(|W| − I) < 0, diagonal rule moot here
            let a = crate::certificates::abs_weights(&w) - Matrix::identity(n, n);
            if crate::numerics::max_real_eig(&a).unwrap() < 0.0 {
                accepted += 1;
            }
        }
        let oracle_rate = accepted as f64 / trials as f64;
        assert_eq!(lib_rate, oracle_rate, "decisions diverged from the oracle");
    }

    #[test]
    fn zero_scalar_always_accepts() {
        let rate = estimate_acceptance_rate(6, 0.5, 0.0, 50, 3).unwrap();
        assert_eq!(rate, 1.0);
    }

    /// If a draw is accepted at pre-scalar s, the same draw is accepted at
    /// any smaller scalar (spectral radius of |W| scales linearly).
    #[test]
    fn acceptance_is_monotone_in_scalar() {
        let mut checked = 0;
        for seed in 0..100u64 {
            let mut rng_hi = StreamRng::substream(seed, 0);
            let mut rng_lo = StreamRng::substream(seed, 0);
            let hi = draw_sparse_candidate(8, 0.3, 0.8, &mut rng_hi);
            let lo = draw_sparse_candidate(8, 0.3, 0.4, &mut rng_lo);
            // shared stream: lo is exactly hi scaled by 0.5
            assert!(fro_norm(&(&lo - &hi * 0.5)) <= 1e-15 * fro_norm(&hi).max(1.0));
            if certify_abs(&hi, 1.0).is_ok() {
                checked += 1;
                assert!(
                    certify_abs(&lo, 1.0).is_ok(),
                    "seed {seed}: accepted at 0.8 but rejected at 0.4"
                );
            }
        }
        assert!(checked > 5, "too few accepted fixtures ({checked}) to be meaningful");
    }

    #[test]
    fn max_tries_reports_statistics() {
        let cfg = SparseInitConfig {
            n: 8,
            density: 1.0,
            pre_scalar: 10.0,
            post_scalar: 1.0,
            max_tries: 20,
            seed: 1,
        };
        match sample_sparse_subnet(&cfg) {
            Err(SamplerError::MaxTriesExhausted { tries, accepted }) => {
                assert_eq!(tries, 20);
                assert_eq!(accepted, 0);
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    // ---- SVD subnets ----

    #[test]
    fn svd_zero_params_certify() {
        let params = SvdSubnetParams::zeros(5, 1.0);
        let sub = build_svd_subnet(&params).unwrap();
        // U = V = I, Σ = (1−ε)/2·I, Φ = ε_φ·I: W is that scaled identity
        let expect = (1.0 - EPS_SIGMA) * 0.5;
        assert!(fro_norm(&(&sub.w - Matrix::identity(5, 5) * expect)) <= 1e-12);
        validate_certificate(&sub.cert, 300, 0).unwrap();
    }

    #[test]
    fn svd_random_params_certify_with_margin() {
        let mut rng = StreamRng::new(42);
        for g in [1.0, 0.5, 2.0] {
            for _ in 0..20 {
                let params = SvdSubnetParams::random(8, g, &mut rng);
                let sub = build_svd_subnet(&params).unwrap();
                assert!(sub.cert.margin > 0.0);
                // singular values of ΦWΦ⁻¹ stay strictly below 1/g
                let phi = Matrix::from_diagonal(
                    &Vector::from_iterator(8, params.phi_raw.iter().map(|&p| squash_phi(p))),
                );
                let phi_inv = phi.clone().try_inverse().unwrap();
                let k = &phi * &sub.w * &phi_inv;
                let smax = k.svd(false, false).singular_values[0];
                assert!(smax < 1.0 / g - 1e-9, "σmax = {smax} at g = {g}");
            }
        }
    }

    #[test]
    fn svd_zero_phi_guarded_by_epsilon() {
        let mut params = SvdSubnetParams::zeros(4, 1.0);
        params.skew_u[0] = 0.7;
        params.skew_v[2] = -0.3;
        params.phi_raw = vec![0.0; 4];
        let sub = build_svd_subnet(&params).unwrap();
        assert!(sub.metric.entries().iter().all(|&v| v == EPS_PHI * EPS_PHI));
        validate_certificate(&sub.cert, 300, 1).unwrap();
    }

    #[test]
    fn sampled_subnets_validate() {
        // both sampler routes produce certificates that survive validation
        let cfg = SparseInitConfig {
            n: 10,
            density: 0.15,
            pre_scalar: 0.6,
            post_scalar: 0.9,
            max_tries: 50_000,
            seed: 123,
        };
        let (_, cert) = sample_sparse_subnet(&cfg).unwrap();
        validate_certificate(&cert, 1000, 0).unwrap();

        let mut rng = StreamRng::new(7);
        let sub = build_svd_subnet(&SvdSubnetParams::random(6, 1.0, &mut rng)).unwrap();
        validate_certificate(&sub.cert, 1000, 0).unwrap();
    }
}
