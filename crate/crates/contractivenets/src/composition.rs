//! Assembling certified subnetworks into one coupled system.
//!
//! The interconnection matrix `L` is never trained directly: it is derived
//! from a free matrix `B` as `L_ij = B_ij − M_i⁻¹B_jiᵀM_j`, which makes `L`
//! skew-symmetric in the block network metric `M̃ = BlockDiag(k_i·M_i)` and
//! therefore invisible to the symmetric part of the composed Jacobian. Any
//! `B` yields a stable composition; training moves freely in `B`.

use crate::certificates::Certificate;
use crate::numerics::{fro_norm, min_eig_sym, sym_part, Matrix, Vector};
use crate::rng::StreamRng;
use std::collections::{BTreeMap, BTreeSet};

/// Relative tolerance for the exact skew identity M̃L + LᵀM̃ = 0.
pub const SKEW_TOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum CompositionError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("metric is singular or not positive definite: {0}")]
    SingularMetric(String),
    #[error(
        "interconnection violates the metric-skew certificate: ‖Q‖ = {q_norm:.3e} > {bound:.3e} and sym(Q) min eigenvalue {q_min_eig:+.3e} < 0"
    )]
    InterconnectionViolated {
        q_norm: f64,
        bound: f64,
        q_min_eig: f64,
    },
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, CompositionError>;

/// One certified module: weights, metric, slope bound, and its certificate.
#[derive(Debug, Clone)]
pub struct SubnetworkSpec {
    pub w: Matrix,
    pub metric: Matrix,
    pub g: f64,
    pub cert: Certificate,
}

impl SubnetworkSpec {
    pub fn from_certificate(cert: Certificate) -> Self {
        Self {
            w: cert.w.clone(),
            metric: cert.metric.clone(),
            g: cert.g,
            cert,
        }
    }

    pub fn units(&self) -> usize {
        self.w.nrows()
    }
}

/// Which off-diagonal blocks of `B` are trainable.
///
/// Pairs are stored as (i, j) with i > j (the lower-block-triangular half).
/// In the default skew mode each pair contributes `L_ij = B_ij` and the
/// reflected `L_ji = −M_j⁻¹B_ijᵀM_i`. In `all_blocks` mode both `B_ij` and
/// `B_ji` are free and combined per the full parameterization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterconnectionMask {
    p: usize,
    pairs: BTreeSet<(usize, usize)>,
    pub all_blocks: bool,
}

impl InterconnectionMask {
    /// All p(p−1)/2 pairs trainable (full feedback density).
    pub fn full(p: usize) -> Self {
        let mut pairs = BTreeSet::new();
        for i in 0..p {
            for j in 0..i {
                pairs.insert((i, j));
            }
        }
        Self {
            p,
            pairs,
            all_blocks: false,
        }
    }

    pub fn empty(p: usize) -> Self {
        Self {
            p,
            pairs: BTreeSet::new(),
            all_blocks: false,
        }
    }

    pub fn from_pairs(p: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, j) in pairs {
            if i == j {
                return Err(CompositionError::Input(format!(
                    "mask cannot contain the diagonal pair ({i},{i})"
                )));
            }
            if i >= p || j >= p {
                return Err(CompositionError::Input(format!(
                    "pair ({i},{j}) out of range for p={p}"
                )));
            }
            set.insert(if i > j { (i, j) } else { (j, i) });
        }
        Ok(Self {
            p,
            pairs: set,
            all_blocks: false,
        })
    }

    pub fn with_all_blocks(mut self, all: bool) -> Self {
        self.all_blocks = all;
        self
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let key = if i > j { (i, j) } else { (j, i) };
        self.pairs.contains(&key)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Keep ⌈density·p(p−1)/2⌉ pairs of the given mask, sampled uniformly without
/// replacement; deterministic under the seed.
pub fn apply_feedback_density(
    mask: &InterconnectionMask,
    density: f64,
    rng_seed: u64,
) -> Result<InterconnectionMask> {
    if !(0.0..=1.0).contains(&density) {
        return Err(CompositionError::Input(format!(
            "feedback density must be in [0,1], got {density}"
        )));
    }
    let all: Vec<(usize, usize)> = mask.pairs.iter().copied().collect();
    let keep = (density * all.len() as f64).ceil() as usize;
    let mut rng = StreamRng::new(rng_seed);
    let chosen = rng.sample_distinct(all.len(), keep.min(all.len()));
    let pairs: BTreeSet<(usize, usize)> = chosen.into_iter().map(|k| all[k]).collect();
    Ok(InterconnectionMask {
        p: mask.p,
        pairs,
        all_blocks: mask.all_blocks,
    })
}

/// Offsets of each subnetwork's block within the stacked state vector.
pub fn block_offsets(subnets: &[SubnetworkSpec]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(subnets.len() + 1);
    let mut acc = 0;
    for s in subnets {
        offsets.push(acc);
        acc += s.units();
    }
    offsets.push(acc);
    offsets
}

fn metric_inverse(m: &Matrix, label: &str) -> Result<Matrix> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| CompositionError::SingularMetric(label.to_string()))
}

/// Interconnection from the trainable blocks of `B`:
/// for each masked pair the blocks `L_ij = B_ij − M_i⁻¹B_jiᵀM_j` (and the
/// mirrored formula for `L_ji`); unmasked pairs and diagonal blocks are zero.
///
/// In the default lower-triangular mode `B_ji` (i > j) is treated as zero,
/// so `L_ij = B_ij` and `L_ji = −M_j⁻¹B_ijᵀM_i`.
pub fn build_l(
    b: &Matrix,
    subnets: &[SubnetworkSpec],
    mask: &InterconnectionMask,
) -> Result<Matrix> {
    let offsets = block_offsets(subnets);
    let n = *offsets.last().unwrap();
    if b.shape() != (n, n) {
        return Err(CompositionError::Dimension(format!(
            "B is {:?}, expected {n}x{n}",
            b.shape()
        )));
    }
    if mask.p() != subnets.len() {
        return Err(CompositionError::Dimension(format!(
            "mask is for p={}, got {} subnetworks",
            mask.p(),
            subnets.len()
        )));
    }
    let mut l = Matrix::zeros(n, n);
    for (i, j) in mask.pairs() {
        let (oi, ni) = (offsets[i], subnets[i].units());
        let (oj, nj) = (offsets[j], subnets[j].units());
        let b_ij = b.view((oi, oj), (ni, nj)).into_owned();
        let m_i_inv = metric_inverse(&subnets[i].metric, "M_i")?;
        let m_j_inv = metric_inverse(&subnets[j].metric, "M_j")?;
        let (l_ij, l_ji) = if mask.all_blocks {
            let b_ji = b.view((oj, oi), (nj, ni)).into_owned();
            (
                &b_ij - m_i_inv * b_ji.transpose() * &subnets[j].metric,
                &b_ji - m_j_inv * b_ij.transpose() * &subnets[i].metric,
            )
        } else {
            (
                b_ij.clone(),
                -(m_j_inv * b_ij.transpose() * &subnets[i].metric),
            )
        };
        l.view_mut((oi, oj), (ni, nj)).copy_from(&l_ij);
        l.view_mut((oj, oi), (nj, ni)).copy_from(&l_ji);
    }
    Ok(l)
}

/// Block-lower-triangular interconnection: blocks flow strictly from earlier
/// subnetworks to later ones, which preserves contraction with no skew
/// constraint (hierarchy of contracting systems).
pub fn build_hierarchical_l(
    blocks: &BTreeMap<(usize, usize), Matrix>,
    subnets: &[SubnetworkSpec],
) -> Result<Matrix> {
    let offsets = block_offsets(subnets);
    let n = *offsets.last().unwrap();
    let mut l = Matrix::zeros(n, n);
    for (&(i, j), block) in blocks {
        if i <= j {
            return Err(CompositionError::Input(format!(
                "hierarchical blocks must be strictly lower (i > j), got ({i},{j})"
            )));
        }
        if i >= subnets.len() {
            return Err(CompositionError::Input(format!(
                "block ({i},{j}) out of range for p={}",
                subnets.len()
            )));
        }
        let (ni, nj) = (subnets[i].units(), subnets[j].units());
        if block.shape() != (ni, nj) {
            return Err(CompositionError::Dimension(format!(
                "block ({i},{j}) is {:?}, expected {ni}x{nj}",
                block.shape()
            )));
        }
        l.view_mut((offsets[i], offsets[j]), (ni, nj))
            .copy_from(block);
    }
    Ok(l)
}

/// M̃ = BlockDiag(k₁M₁, …, k_pM_p) with every k_i > 0.
pub fn block_metric(subnets: &[SubnetworkSpec], k: &[f64]) -> Result<Matrix> {
    if k.len() != subnets.len() {
        return Err(CompositionError::Dimension(format!(
            "k has {} entries for {} subnetworks",
            k.len(),
            subnets.len()
        )));
    }
    if let Some(bad) = k.iter().find(|&&v| !(v.is_finite() && v > 0.0)) {
        return Err(CompositionError::Input(format!(
            "block metric weights must be positive, got {bad}"
        )));
    }
    let offsets = block_offsets(subnets);
    let n = *offsets.last().unwrap();
    let mut m = Matrix::zeros(n, n);
    for (idx, s) in subnets.iter().enumerate() {
        let ni = s.units();
        m.view_mut((offsets[idx], offsets[idx]), (ni, ni))
            .copy_from(&(&s.metric * k[idx]));
    }
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct InterconnectionReport {
    /// ‖Q‖ = ‖M̃L + LᵀM̃‖ (Frobenius).
    pub q_norm: f64,
    /// Pass bound for the pure-skew construction: SKEW_TOL·(1 + ‖M̃L‖).
    pub bound: f64,
    /// Min eigenvalue of sym(Q); ≥ −SKEW_TOL·scale passes the general-C path.
    pub q_min_eig: f64,
    pub pure_skew: bool,
}

/// Check the composed stability identity: Q = −(M̃L + LᵀM̃) must vanish
/// (pure-skew construction) or at least be positive semidefinite (general C).
/// A violation voids the composed certificate and is a hard failure.
pub fn verify_interconnection(l: &Matrix, mtilde: &Matrix) -> Result<InterconnectionReport> {
    if l.shape() != mtilde.shape() || l.nrows() != l.ncols() {
        return Err(CompositionError::Dimension(format!(
            "L is {:?}, M̃ is {:?}",
            l.shape(),
            mtilde.shape()
        )));
    }
    let ml = mtilde * l;
    let q = -(&ml + ml.transpose());
    let q_norm = fro_norm(&q);
    let scale = 1.0 + fro_norm(&ml);
    let bound = SKEW_TOL * scale;
    let q_min_eig = min_eig_sym(&sym_part(&q)?)?;
    let pure_skew = q_norm <= bound;
    if !pure_skew && q_min_eig < -SKEW_TOL * scale {
        return Err(CompositionError::InterconnectionViolated {
            q_norm,
            bound,
            q_min_eig,
        });
    }
    Ok(InterconnectionReport {
        q_norm,
        bound,
        q_min_eig,
        pure_skew,
    })
}

/// Trainable-parameter count for a p×n_sub composition with full feedback
/// density: (n² − p·n_sub²)/2 + in·n + n·out + n + out, where n = p·n_sub.
pub fn param_count(p: usize, n_sub: usize, in_dim: usize, out_dim: usize) -> u64 {
    let n = (p * n_sub) as u64;
    let block_diag = (p as u64) * (n_sub as u64) * (n_sub as u64);
    (n * n - block_diag) / 2 + (in_dim as u64) * n + n * (out_dim as u64) + n + out_dim as u64
}

/// p certified subnetworks + derived interconnection + I/O layers: one
/// executable network-of-networks.
#[derive(Debug, Clone)]
pub struct ComposedNetwork {
    pub subnets: Vec<SubnetworkSpec>,
    pub mask: InterconnectionMask,
    pub b: Matrix,
    pub l: Matrix,
    pub block_metric: Matrix,
    pub tau: f64,
    pub input_w: Matrix,
    pub input_b: Vector,
    pub output_w: Matrix,
    pub output_b: Vector,
    /// When set, L = B verbatim (no skew constraint, no stability guarantee).
    pub control_mode: bool,
}

impl ComposedNetwork {
    /// Assemble and verify. `b` is the free interconnection parameter matrix;
    /// diagonal blocks and unmasked pairs are ignored (control mode: used
    /// verbatim except diagonal blocks, which stay zero).
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        subnets: Vec<SubnetworkSpec>,
        mask: InterconnectionMask,
        b: Matrix,
        tau: f64,
        input_w: Matrix,
        input_b: Vector,
        output_w: Matrix,
        output_b: Vector,
        control_mode: bool,
    ) -> Result<Self> {
        if subnets.is_empty() {
            return Err(CompositionError::Input(
                "need at least one subnetwork".into(),
            ));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(CompositionError::Input(format!(
                "tau must be > 0, got {tau}"
            )));
        }
        let offsets = block_offsets(&subnets);
        let n = *offsets.last().unwrap();
        if input_w.nrows() != n || output_w.ncols() != n {
            return Err(CompositionError::Dimension(format!(
                "I/O layers do not match n={n}: input {:?}, output {:?}",
                input_w.shape(),
                output_w.shape()
            )));
        }
        if input_b.len() != n || output_b.len() != output_w.nrows() {
            return Err(CompositionError::Dimension("bias lengths".into()));
        }
        let l = if control_mode {
            control_l(&b, &subnets, &mask)?
        } else {
            build_l(&b, &subnets, &mask)?
        };
        let block_metric = block_metric(&subnets, &vec![1.0; subnets.len()])?;
        let net = Self {
            subnets,
            mask,
            b,
            l,
            block_metric,
            tau,
            input_w,
            input_b,
            output_w,
            output_b,
            control_mode,
        };
        if !control_mode {
            verify_interconnection(&net.l, &net.block_metric)?;
        }
        Ok(net)
    }

    /// Single-subnetwork network with identity I/O plumbing sized to the
    /// subnetwork; convenient for simulating one certified module.
    pub fn single(subnet: SubnetworkSpec, tau: f64) -> Result<Self> {
        let n = subnet.units();
        Self::assemble(
            vec![subnet],
            InterconnectionMask::empty(1),
            Matrix::zeros(n, n),
            tau,
            Matrix::identity(n, n),
            Vector::zeros(n),
            Matrix::identity(n, n),
            Vector::zeros(n),
            false,
        )
    }

    /// Same network with a new `B` (and re-derived, re-verified `L`).
    pub fn with_b(&self, b: Matrix) -> Result<Self> {
        Self::assemble(
            self.subnets.clone(),
            self.mask.clone(),
            b,
            self.tau,
            self.input_w.clone(),
            self.input_b.clone(),
            self.output_w.clone(),
            self.output_b.clone(),
            self.control_mode,
        )
    }

    pub fn n_total(&self) -> usize {
        self.block_metric.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.input_w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.output_w.nrows()
    }

    pub fn offsets(&self) -> Vec<usize> {
        block_offsets(&self.subnets)
    }

    /// Block-diagonal weight matrix W̃ as a dense matrix.
    pub fn w_tilde(&self) -> Matrix {
        let offsets = self.offsets();
        let n = self.n_total();
        let mut w = Matrix::zeros(n, n);
        for (idx, s) in self.subnets.iter().enumerate() {
            w.view_mut((offsets[idx], offsets[idx]), (s.units(), s.units()))
                .copy_from(&s.w);
        }
        w
    }

    /// Slope bound shared by the composition (max over subnetworks).
    pub fn slope_bound(&self) -> f64 {
        self.subnets
            .iter()
            .map(|s| if s.g.is_finite() { s.g } else { 1.0 })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Control-study interconnection: L = B with zero diagonal blocks, both
/// triangles of off-diagonal blocks taken verbatim from the masked pairs.
fn control_l(
    b: &Matrix,
    subnets: &[SubnetworkSpec],
    mask: &InterconnectionMask,
) -> Result<Matrix> {
    let offsets = block_offsets(subnets);
    let n = *offsets.last().unwrap();
    if b.shape() != (n, n) {
        return Err(CompositionError::Dimension(format!(
            "B is {:?}, expected {n}x{n}",
            b.shape()
        )));
    }
    let mut l = Matrix::zeros(n, n);
    for (i, j) in mask.pairs() {
        let (oi, ni) = (offsets[i], subnets[i].units());
        let (oj, nj) = (offsets[j], subnets[j].units());
        l.view_mut((oi, oj), (ni, nj))
            .copy_from(&b.view((oi, oj), (ni, nj)).into_owned());
        l.view_mut((oj, oi), (nj, ni))
            .copy_from(&b.view((oj, oi), (nj, ni)).into_owned());
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::{certify_abs, TheoremId};
    use crate::numerics::{from_row_major, max_eig_sym};

    fn toy_subnet(n: usize) -> SubnetworkSpec {
        let w = Matrix::zeros(n, n);
        SubnetworkSpec::from_certificate(certify_abs(&w, 1.0).unwrap())
    }

    fn subnet_with_metric(metric_diag: &[f64]) -> SubnetworkSpec {
        let n = metric_diag.len();
        let w = Matrix::zeros(n, n);
        let mut cert = certify_abs(&w, 1.0).unwrap();
        cert.metric = Matrix::from_diagonal(&Vector::from_column_slice(metric_diag));
        SubnetworkSpec {
            w,
            metric: cert.metric.clone(),
            g: 1.0,
            cert,
        }
    }

    #[test]
    fn zero_b_gives_zero_l() {
        let subnets = vec![toy_subnet(2), toy_subnet(3)];
        let mask = InterconnectionMask::full(2);
        let l = build_l(&Matrix::zeros(5, 5), &subnets, &mask).unwrap();
        assert_eq!(l, Matrix::zeros(5, 5));
    }

    #[test]
    fn identity_metrics_give_pure_skew() {
        let subnets = vec![subnet_with_metric(&[1.0]), subnet_with_metric(&[1.0])];
        let mask = InterconnectionMask::full(2);
        let mut b = Matrix::zeros(2, 2);
        b[(1, 0)] = 1.0; // B_21 = [[1]]
        let l = build_l(&b, &subnets, &mask).unwrap();
        assert_eq!(l[(1, 0)], 1.0);
        assert_eq!(l[(0, 1)], -1.0);
        assert_eq!(l[(0, 0)], 0.0);
        assert_eq!(l[(1, 1)], 0.0);
    }

    #[test]
    fn skew_identity_blockwise() {
        // two 2-unit subnets with different diagonal metrics; fixed B_21
        let subnets = vec![
            subnet_with_metric(&[2.0, 1.0]),
            subnet_with_metric(&[1.0, 3.0]),
        ];
        let mask = InterconnectionMask::full(2);
        let mut b = Matrix::zeros(4, 4);
        let vals = [[0.7, -1.2], [0.4, 2.5]];
        for i in 0..2 {
            for j in 0..2 {
                b[(2 + i, j)] = vals[i][j];
            }
        }
        let l = build_l(&b, &subnets, &mask).unwrap();
        // M_1 L_12 = −L_21ᵀ M_2 entrywise
        let m1 = &subnets[0].metric;
        let m2 = &subnets[1].metric;
        let l12 = l.view((0, 2), (2, 2)).into_owned();
        let l21 = l.view((2, 0), (2, 2)).into_owned();
        let lhs = m1 * l12;
        let rhs = -(l21.transpose() * m2);
        assert!(fro_norm(&(lhs - rhs)) <= 1e-12);
    }

    #[test]
    fn skew_identity_fuzz() {
        let mut rng = StreamRng::new(21);
        for trial in 0..200 {
            let p = 2 + (trial % 3);
            let subnets: Vec<SubnetworkSpec> = (0..p)
                .map(|_| {
                    let n = 1 + rng.below(3);
                    let diag: Vec<f64> = (0..n).map(|_| rng.uniform(0.1, 4.0)).collect();
                    subnet_with_metric(&diag)
                })
                .collect();
            let n = subnets.iter().map(|s| s.units()).sum::<usize>();
            let all_blocks = trial % 4 == 0;
            let mask = InterconnectionMask::full(p).with_all_blocks(all_blocks);
            let b = Matrix::from_fn(n, n, |_, _| rng.uniform(-2.0, 2.0));
            let l = build_l(&b, &subnets, &mask).unwrap();
            let mtilde = block_metric(&subnets, &vec![1.0; p]).unwrap();
            let ml = &mtilde * &l;
            let q = &ml + ml.transpose();
            assert!(
                fro_norm(&q) <= 1e-12 * (1.0 + fro_norm(&ml)),
                "skew identity violated at trial {trial}"
            );
            verify_interconnection(&l, &mtilde).unwrap();
        }
    }

    #[test]
    fn hierarchical_structure() {
        let subnets = vec![toy_subnet(1), toy_subnet(1), toy_subnet(1)];
        let empty = BTreeMap::new();
        assert_eq!(
            build_hierarchical_l(&empty, &subnets).unwrap(),
            Matrix::zeros(3, 3)
        );
        let mut chain = BTreeMap::new();
        chain.insert((1usize, 0usize), Matrix::identity(1, 1));
        chain.insert((2usize, 1usize), Matrix::identity(1, 1));
        let l = build_hierarchical_l(&chain, &subnets).unwrap();
        assert_eq!(l[(1, 0)], 1.0);
        assert_eq!(l[(2, 1)], 1.0);
        assert_eq!(l[(0, 1)], 0.0);
        let mut bad = BTreeMap::new();
        bad.insert((0usize, 1usize), Matrix::identity(1, 1));
        assert!(build_hierarchical_l(&bad, &subnets).is_err());
    }

    #[test]
    fn block_metric_examples() {
        let s = subnet_with_metric(&[0.5, 2.0]);
        let m = block_metric(&[s.clone()], &[1.0]).unwrap();
        assert!(fro_norm(&(&m - &s.metric)) == 0.0);

        let two = vec![subnet_with_metric(&[1.0, 1.0]), subnet_with_metric(&[1.0])];
        let m = block_metric(&two, &[2.0, 3.0]).unwrap();
        let expect = Matrix::from_diagonal(&Vector::from_column_slice(&[2.0, 2.0, 3.0]));
        assert!(fro_norm(&(&m - &expect)) == 0.0);
        assert!(min_eig_sym(&m).unwrap() > 0.0);

        assert!(block_metric(&two, &[1.0, -1.0]).is_err());
    }

    #[test]
    fn verify_interconnection_flags_illegal_l() {
        let l = Matrix::identity(2, 2);
        let err = verify_interconnection(&l, &Matrix::identity(2, 2)).unwrap_err();
        assert!(matches!(
            err,
            CompositionError::InterconnectionViolated { .. }
        ));
    }

    #[test]
    fn verify_interconnection_accepts_general_c() {
        // L = −M̃⁻¹C with sym(C) ⪰ 0 gives Q = C + Cᵀ ⪰ 0
        let c = from_row_major(2, 2, &[1.0, 0.5, -0.5, 1.0]).unwrap();
        let l = -c.clone();
        let report = verify_interconnection(&l, &Matrix::identity(2, 2)).unwrap();
        assert!(!report.pure_skew);
        assert!(report.q_min_eig >= 0.0);
    }

    #[test]
    fn param_count_paper_configurations() {
        assert_eq!(param_count(16, 32, 1, 10), 129_034);
        assert_eq!(param_count(16, 32, 3, 10), 130_058);
        assert_eq!(param_count(1, 1, 1, 1), 4);
    }

    #[test]
    fn feedback_density_examples() {
        let full = InterconnectionMask::full(24);
        assert_eq!(full.len(), 276);
        let none = apply_feedback_density(&full, 0.0, 7).unwrap();
        assert!(none.is_empty());
        let half = apply_feedback_density(&full, 0.5, 7).unwrap();
        assert_eq!(half.len(), 138);
        let again = apply_feedback_density(&full, 0.5, 7).unwrap();
        assert_eq!(half, again);
        let all = apply_feedback_density(&full, 1.0, 1).unwrap();
        assert_eq!(all.len(), 276);
    }

    #[test]
    fn composed_jacobian_negative_under_random_slopes() {
        // certified subnets + any B: (M̃(−I + W̃D + L))_sym ≺ 0 for D in [0,g]
        let mut rng = StreamRng::new(33);
        for fixture in 0..5 {
            let p = 2 + fixture % 2;
            let subnets: Vec<SubnetworkSpec> = (0..p)
                .map(|_| {
                    let n = 3;
                    loop {
                        let mut w = Matrix::zeros(n, n);
                        for i in 0..n {
                            for j in 0..n {
                                if i != j && rng.uniform01() < 0.5 {
                                    w[(i, j)] = rng.uniform(-0.4, 0.4);
                                }
                            }
                        }
                        if let Ok(cert) = certify_abs(&w, 1.0) {
                            assert_eq!(cert.theorem_id, TheoremId::Abs);
                            break SubnetworkSpec::from_certificate(cert);
                        }
                    }
                })
                .collect();
            let n: usize = subnets.iter().map(|s| s.units()).sum();
            let mask = InterconnectionMask::full(p);
            let b = Matrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0));
            let l = build_l(&b, &subnets, &mask).unwrap();
            let mtilde = block_metric(&subnets, &vec![1.0; p]).unwrap();
            let wt = {
                let offsets = block_offsets(&subnets);
                let mut w = Matrix::zeros(n, n);
                for (idx, s) in subnets.iter().enumerate() {
                    w.view_mut((offsets[idx], offsets[idx]), (s.units(), s.units()))
                        .copy_from(&s.w);
                }
                w
            };
            for _ in 0..100 {
                let mut j = -Matrix::identity(n, n) + &l;
                for col in 0..n {
                    let d = rng.uniform01();
                    for row in 0..n {
                        j[(row, col)] += wt[(row, col)] * d;
                    }
                }
                let s = (&mtilde * &j + (&mtilde * &j).transpose()) * 0.5;
                assert!(
                    max_eig_sym(&s).unwrap() < 0.0,
                    "composed Jacobian not negative definite"
                );
            }
        }
    }

    #[test]
    fn assemble_validates_and_control_mode_skips_skew() {
        let subnets = vec![subnet_with_metric(&[1.0, 2.0]), subnet_with_metric(&[3.0])];
        let mask = InterconnectionMask::full(2);
        let b = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let net = ComposedNetwork::assemble(
            subnets.clone(),
            mask.clone(),
            b.clone(),
            1.0,
            Matrix::identity(3, 3),
            Vector::zeros(3),
            Matrix::identity(3, 3),
            Vector::zeros(3),
            false,
        )
        .unwrap();
        verify_interconnection(&net.l, &net.block_metric).unwrap();

        let control = ComposedNetwork::assemble(
            subnets,
            mask,
            b.clone(),
            1.0,
            Matrix::identity(3, 3),
            Vector::zeros(3),
            Matrix::identity(3, 3),
            Vector::zeros(3),
            true,
        )
        .unwrap();
        // L = B on the masked off-diagonal blocks, zero diagonal blocks
        assert_eq!(control.l[(2, 0)], b[(2, 0)]);
        assert_eq!(control.l[(0, 2)], b[(0, 2)]);
        assert_eq!(control.l[(0, 0)], 0.0);
        assert_eq!(control.l[(1, 0)], 0.0); // inside subnet 0's diagonal block
    }
}
