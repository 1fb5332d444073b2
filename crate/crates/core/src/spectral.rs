//! Feature design matrices and the spectral decomposition of the lifted
//! operator `[I_p ⊗ Φ]`.
//!
//! Weight vectors live in `R^{dp}` as `vec[Wᵀ]`: block `k` (entries
//! `k*d..(k+1)*d`) is the `k`-th row of the `p×d` weight matrix. Output and
//! label vectors live in `R^{np}` as `vec[[y_1, …, y_n]ᵀ]`: block `k`
//! (entries `k*n..(k+1)*n`) holds output coordinate `k` for every sample.
//!
//! Only the thin SVD of `Φ` is ever computed. The singular triples of
//! `[I_p ⊗ Φ]` are `p` copies of each triple of `Φ`, one per output block,
//! and are produced on demand by index arithmetic: lifted index `i < np`
//! maps to singular index `i / p` of `Φ` placed in output block `i % p`.
//! Indices `i >= np` enumerate the null space of `[I_p ⊗ Φ]ᵀ` the same way.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative threshold for numerical rank: `σ_min > RANK_TOL · σ_max`.
pub const RANK_TOL: f64 = 1e-9;

/// A regression dataset for the linear theory.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub inputs: Vec<DVector<f64>>,
    /// `n×p`, row `i` is `y_i`.
    pub labels: DMatrix<f64>,
    /// Inputs of the general-domain pool used to build a pre-trained weight.
    pub pretrain_inputs: Vec<DVector<f64>>,
}

impl SyntheticTask {
    pub fn new(
        inputs: Vec<DVector<f64>>,
        labels: DMatrix<f64>,
        pretrain_inputs: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Domain("task needs at least one sample".into()));
        }
        if labels.ncols() == 0 {
            return Err(Error::Domain("output dimension p must be >= 1".into()));
        }
        if labels.nrows() != inputs.len() {
            return Err(Error::DimensionMismatch {
                what: "label rows",
                expected: inputs.len(),
                found: labels.nrows(),
            });
        }
        if labels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("labels must be finite".into()));
        }
        Ok(Self {
            inputs,
            labels,
            pretrain_inputs,
        })
    }

    /// Standard-normal inputs and labels, plus a general-domain pool of
    /// `n_pretrain` inputs whose mean is shifted by `shift` in every coordinate.
    pub fn random(
        n: usize,
        p: usize,
        input_dim: usize,
        n_pretrain: usize,
        shift: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let inputs = (0..n)
            .map(|_| DVector::from_fn(input_dim, |_, _| normal()))
            .collect();
        let labels = DMatrix::from_fn(n, p, |_, _| normal());
        let pretrain_inputs = (0..n_pretrain)
            .map(|_| DVector::from_fn(input_dim, |_, _| normal() + shift))
            .collect();
        Self::new(inputs, labels, pretrain_inputs)
    }

    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    pub fn p(&self) -> usize {
        self.labels.ncols()
    }

    /// `Y = vec[[y_1, …, y_n]ᵀ] ∈ R^{np}`.
    pub fn label_vector(&self) -> DVector<f64> {
        stack_columns(&self.labels)
    }
}

/// Column-stacks an `n×p` matrix into `R^{np}` (the `vec` operator).
pub fn stack_columns(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Identity,
    RandomTanh,
    RandomFourier,
}

/// A frozen map `φ: R^{input_dim} → R^d`.
///
/// The random maps draw `G` (d×input_dim) and `b` (d) once from
/// `N(0, 1/input_dim)` and return `act(Gx + b) / √d`, so feature vectors
/// have norm `O(1)` and the singular values of `Φ` are `O(1)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    kind: FeatureKind,
    d: usize,
    seed: u64,
    projection: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl FeatureMap {
    pub fn identity(d: usize) -> Self {
        Self {
            kind: FeatureKind::Identity,
            d,
            seed: 0,
            projection: None,
        }
    }

    pub fn random_tanh(input_dim: usize, d: usize, seed: u64) -> Self {
        Self::random(FeatureKind::RandomTanh, input_dim, d, seed)
    }

    pub fn random_fourier(input_dim: usize, d: usize, seed: u64) -> Self {
        Self::random(FeatureKind::RandomFourier, input_dim, d, seed)
    }

    fn random(kind: FeatureKind, input_dim: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_dim.max(1) as f64).sqrt();
        let mut draw = || -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        };
        let g = DMatrix::from_fn(d, input_dim, |_, _| draw());
        let b = DVector::from_fn(d, |_, _| draw());
        Self {
            kind,
            d,
            seed,
            projection: Some((g, b)),
        }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match (&self.kind, &self.projection) {
            (FeatureKind::Identity, _) => {
                if x.len() != self.d {
                    return Err(Error::DimensionMismatch {
                        what: "identity feature input",
                        expected: self.d,
                        found: x.len(),
                    });
                }
                Ok(x.clone())
            }
            (kind, Some((g, b))) => {
                if x.len() != g.ncols() {
                    return Err(Error::DimensionMismatch {
                        what: "feature input",
                        expected: g.ncols(),
                        found: x.len(),
                    });
                }
                let scale = 1.0 / (self.d as f64).sqrt();
                let pre = g * x + b;
                Ok(match kind {
                    FeatureKind::RandomTanh => pre.map(|v| v.tanh() * scale),
                    _ => pre.map(|v| v.cos() * scale),
                })
            }
            (_, None) => unreachable!("random feature maps always carry a projection"),
        }
    }

    /// Feature matrix with one column per input, without rank checks.
    pub fn features(&self, inputs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let cols = inputs
            .iter()
            .map(|x| self.apply(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_columns(&cols))
    }
}

/// `Φ ∈ R^{d×n}` with `Φ_{ij} = φ(x_j)_i`, known to have full column rank.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    phi: DMatrix<f64>,
    rank: usize,
}

impl DesignMatrix {
    /// Wraps a raw matrix, checking `d >= n` and full column rank.
    pub fn from_matrix(phi: DMatrix<f64>) -> Result<Self> {
        let (d, n) = phi.shape();
        if n == 0 {
            return Err(Error::Domain(
                "design matrix needs at least one column".into(),
            ));
        }
        if d < n {
            return Err(Error::DimensionMismatch {
                what: "feature dimension d (must be >= n)",
                expected: n,
                found: d,
            });
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("design matrix has non-finite entries".into()));
        }
        let rank = numerical_rank(&phi);
        if rank < n {
            return Err(Error::RankDeficient { rank, expected: n });
        }
        Ok(Self { phi, rank })
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn d(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n(&self) -> usize {
        self.phi.ncols()
    }

    /// Model outputs `vec[f] = [I_p ⊗ Φ]ᵀ w` for `w ∈ R^{dp}`.
    pub fn outputs(&self, w: &DVector<f64>, p: usize) -> Result<DVector<f64>> {
        let (d, n) = self.phi.shape();
        check_len("weight vector", d * p, w.len())?;
        let mut out = DVector::zeros(n * p);
        for k in 0..p {
            let block = self.phi.tr_mul(&w.rows(k * d, d));
            out.rows_mut(k * n, n).copy_from(&block);
        }
        Ok(out)
    }

    /// `[I_p ⊗ Φ] f` for `f ∈ R^{np}`.
    pub fn lift(&self, f: &DVector<f64>, p: usize) -> Result<DVector<f64>> {
        let (d, n) = self.phi.shape();
        check_len("output vector", n * p, f.len())?;
        let mut out = DVector::zeros(d * p);
        for k in 0..p {
            let block = &self.phi * f.rows(k * n, n);
            out.rows_mut(k * d, d).copy_from(&block);
        }
        Ok(out)
    }
}

pub fn build_design_matrix(task: &SyntheticTask, fmap: &FeatureMap) -> Result<DesignMatrix> {
    if fmap.dim() < task.n() {
        return Err(Error::DimensionMismatch {
            what: "feature dimension d (must be >= n)",
            expected: task.n(),
            found: fmap.dim(),
        });
    }
    DesignMatrix::from_matrix(fmap.features(&task.inputs)?)
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// General Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            out.view_mut((i * br, j * bc), (br, bc))
                .copy_from(&(b * a[(i, j)]));
        }
    }
    out
}

/// Spectral data of `[I_p ⊗ Φ] = U Σ Vᵀ`, stored as the SVD of `Φ`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    p: usize,
    d: usize,
    n: usize,
    /// `d×n`, left singular vectors of `Φ`, columns sorted by `phi_sigma`.
    phi_left: DMatrix<f64>,
    phi_sigma: DVector<f64>,
    /// `n×n`, right singular vectors of `Φ`.
    phi_right: DMatrix<f64>,
    /// `d×(d-n)`, orthonormal basis of the left null space of `Φ`.
    phi_null: DMatrix<f64>,
    sigma: DVector<f64>,
    rank: usize,
}

pub fn decompose(design: &DesignMatrix, p: usize) -> Result<SpectralDecomposition> {
    if p == 0 {
        return Err(Error::Domain("output dimension p must be >= 1".into()));
    }
    let phi = design.phi();
    let (d, n) = phi.shape();
    let svd = phi.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let phi_sigma = DVector::from_fn(n, |j, _| svd.singular_values[order[j]]);
    let phi_left = DMatrix::from_fn(d, n, |r, j| u[(r, order[j])]);
    let phi_right = DMatrix::from_fn(n, n, |r, j| vt[(order[j], r)]);

    let max = phi_sigma[0];
    let rank_phi = phi_sigma.iter().filter(|&&s| s > RANK_TOL * max).count();
    if rank_phi < n {
        return Err(Error::RankDeficient {
            rank: rank_phi,
            expected: n,
        });
    }

    let phi_null = null_complement(&phi_left);
    let sigma = DVector::from_fn(n * p, |i, _| phi_sigma[i / p]);
    Ok(SpectralDecomposition {
        p,
        d,
        n,
        phi_left,
        phi_sigma,
        phi_right,
        phi_null,
        sigma,
        rank: rank_phi * p,
    })
}

/// Orthonormal basis of the complement of `range(q)` for orthonormal `q`.
fn null_complement(q: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, n) = q.shape();
    if d == n {
        return DMatrix::zeros(d, 0);
    }
    let projector = DMatrix::identity(d, d) - q * q.transpose();
    let eig = SymmetricEigen::new(projector);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let cols: Vec<_> = idx[..d - n]
        .iter()
        .map(|&j| eig.eigenvectors.column(j).into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

impl SpectralDecomposition {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `np`, the number of (possibly zero) singular values.
    pub fn span_dim(&self) -> usize {
        self.n * self.p
    }

    /// `dp`, the dimension of weight space.
    pub fn weight_dim(&self) -> usize {
        self.d * self.p
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// The `np` singular values, non-increasing.
    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn phi_sigma(&self) -> &DVector<f64> {
        &self.phi_sigma
    }

    fn lifted(&self, i: usize) -> (usize, usize) {
        (i / self.p, i % self.p)
    }

    /// Left singular vector `u_i ∈ R^{dp}` for `i < dp` (0-based).
    pub fn left_vector(&self, i: usize) -> DVector<f64> {
        let mut u = DVector::zeros(self.weight_dim());
        let (col, k) = if i < self.span_dim() {
            let (j, k) = self.lifted(i);
            (self.phi_left.column(j), k)
        } else {
            let (j, k) = self.lifted(i - self.span_dim());
            (self.phi_null.column(j), k)
        };
        u.rows_mut(k * self.d, self.d).copy_from(&col);
        u
    }

    /// Right singular vector `v_i ∈ R^{np}` for `i < np`.
    pub fn right_vector(&self, i: usize) -> DVector<f64> {
        let (j, k) = self.lifted(i);
        let mut v = DVector::zeros(self.span_dim());
        v.rows_mut(k * self.n, self.n)
            .copy_from(&self.phi_right.column(j));
        v
    }

    /// `Ũ = [u_1, …, u_np]` as a dense `dp×np` matrix.
    pub fn top_left_matrix(&self) -> DMatrix<f64> {
        let cols: Vec<_> = (0..self.span_dim()).map(|i| self.left_vector(i)).collect();
        DMatrix::from_columns(&cols)
    }

    /// `V` as a dense `np×np` matrix.
    pub fn right_matrix(&self) -> DMatrix<f64> {
        let cols: Vec<_> = (0..self.span_dim()).map(|i| self.right_vector(i)).collect();
        DMatrix::from_columns(&cols)
    }

    /// `(u_iᵀ w)_{i < np}`.
    pub fn span_coefficients(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("weight vector", self.weight_dim(), w.len())?;
        Ok(self.blockwise_project(&self.phi_left, w, self.d))
    }

    /// `(u_iᵀ w)_{np <= i < dp}`.
    pub fn null_coefficients(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("weight vector", self.weight_dim(), w.len())?;
        Ok(self.blockwise_project(&self.phi_null, w, self.d))
    }

    /// All `dp` coefficients `Uᵀ w`, span part first.
    pub fn left_coefficients(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let span = self.span_coefficients(w)?;
        let null = self.null_coefficients(w)?;
        Ok(DVector::from_iterator(
            self.weight_dim(),
            span.iter().chain(null.iter()).cloned(),
        ))
    }

    /// `Vᵀ f` for `f ∈ R^{np}`.
    pub fn right_coefficients(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("output vector", self.span_dim(), f.len())?;
        Ok(self.blockwise_project(&self.phi_right, f, self.n))
    }

    /// `Σ_{i<np} c_i u_i`.
    pub fn from_span_coefficients(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("span coefficients", self.span_dim(), c.len())?;
        Ok(self.blockwise_combine(&self.phi_left, c, self.d))
    }

    /// `Σ_{i<dp} c_i u_i` with `c` ordered as in [`Self::left_coefficients`].
    pub fn from_left_coefficients(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("weight coefficients", self.weight_dim(), c.len())?;
        let np = self.span_dim();
        let span = self.blockwise_combine(&self.phi_left, &c.rows(0, np).into_owned(), self.d);
        let null = self.blockwise_combine(
            &self.phi_null,
            &c.rows(np, self.weight_dim() - np).into_owned(),
            self.d,
        );
        Ok(span + null)
    }

    /// `Σ_{i<np} c_i v_i`.
    pub fn from_right_coefficients(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("right coefficients", self.span_dim(), c.len())?;
        Ok(self.blockwise_combine(&self.phi_right, c, self.n))
    }

    fn blockwise_project(
        &self,
        basis: &DMatrix<f64>,
        x: &DVector<f64>,
        block: usize,
    ) -> DVector<f64> {
        let m = basis.ncols();
        let mut out = DVector::zeros(m * self.p);
        for k in 0..self.p {
            let proj = basis.tr_mul(&x.rows(k * block, block));
            for j in 0..m {
                out[j * self.p + k] = proj[j];
            }
        }
        out
    }

    fn blockwise_combine(
        &self,
        basis: &DMatrix<f64>,
        c: &DVector<f64>,
        block: usize,
    ) -> DVector<f64> {
        let m = basis.ncols();
        let mut out = DVector::zeros(block * self.p);
        for k in 0..self.p {
            let coeffs = DVector::from_fn(m, |j, _| c[j * self.p + k]);
            out.rows_mut(k * block, block).copy_from(&(basis * coeffs));
        }
        out
    }

    /// `P_r w = (I − ŨŨᵀ) w`.
    pub fn null_projection(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.span_coefficients(w)?;
        Ok(w - self.blockwise_combine(&self.phi_left, &c, self.d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_design(d: usize, n: usize, seed: u64) -> DesignMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = DMatrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
        DesignMatrix::from_matrix(phi).unwrap()
    }

    #[test]
    fn identity_map_on_unit_basis() {
        let inputs = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        ];
        let task = SyntheticTask::new(inputs, DMatrix::zeros(2, 1), vec![]).unwrap();
        let design = build_design_matrix(&task, &FeatureMap::identity(2)).unwrap();
        assert_eq!(design.phi(), &DMatrix::<f64>::identity(2, 2));
        assert_eq!(design.rank(), 2);
    }

    #[test]
    fn random_tanh_features_are_full_rank() {
        let task = SyntheticTask::random(4, 1, 3, 0, 0.0, 11).unwrap();
        let design = build_design_matrix(&task, &FeatureMap::random_tanh(3, 16, 5)).unwrap();
        let sv = design.phi().clone().svd(false, false).singular_values;
        let max = sv.max();
        assert_eq!(sv.iter().filter(|&&s| s > 1e-9 * max).count(), 4);
        assert_eq!(design.rank(), 4);
    }

    #[test]
    fn too_few_features_is_dimension_mismatch() {
        let task = SyntheticTask::random(3, 1, 2, 0, 0.0, 1).unwrap();
        let err = build_design_matrix(&task, &FeatureMap::identity(2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn duplicate_columns_are_rank_deficient() {
        let phi = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert_eq!(
            DesignMatrix::from_matrix(phi).unwrap_err(),
            Error::RankDeficient {
                rank: 1,
                expected: 2
            }
        );
    }

    #[test]
    fn diagonal_phi_replicates_singular_values() {
        let phi = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let design = DesignMatrix::from_matrix(phi).unwrap();
        let spec = decompose(&design, 2).unwrap();
        assert_eq!(spec.sigma().as_slice(), &[3.0, 3.0, 1.0, 1.0]);
        assert_eq!(spec.rank(), 4);

        let spec1 = decompose(&design, 1).unwrap();
        assert_eq!(spec1.sigma().as_slice(), &[3.0, 1.0]);
        let u = spec1.top_left_matrix();
        for i in 0..2 {
            for j in 0..2 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(u[(i, j)].abs(), expected, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn factors_reconstruct_dense_kronecker() {
        let design = random_design(8, 3, 3);
        let spec = decompose(&design, 2).unwrap();
        let dense = kron(&DMatrix::identity(2, 2), design.phi());
        let u = spec.top_left_matrix();
        let v = spec.right_matrix();
        let rebuilt = &u * DMatrix::from_diagonal(spec.sigma()) * v.transpose();
        assert!((rebuilt - &dense).amax() < 1e-10);

        let mut dense_sv: Vec<f64> = dense
            .svd(false, false)
            .singular_values
            .iter()
            .cloned()
            .collect();
        dense_sv.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in dense_sv.iter().zip(spec.sigma().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn stored_factors_are_orthonormal() {
        let design = random_design(6, 2, 9);
        let spec = decompose(&design, 3).unwrap();
        let full: Vec<_> = (0..spec.weight_dim())
            .map(|i| spec.left_vector(i))
            .collect();
        let u = DMatrix::from_columns(&full);
        assert!((u.tr_mul(&u) - DMatrix::identity(18, 18)).amax() < 1e-10);
        let v = spec.right_matrix();
        assert!((v.tr_mul(&v) - DMatrix::identity(6, 6)).amax() < 1e-10);
    }

    #[test]
    fn null_projection_removes_span() {
        let design = random_design(4, 2, 21);
        let spec = decompose(&design, 1).unwrap();
        let u1 = spec.left_vector(0);
        assert!(spec.null_projection(&u1).unwrap().amax() < 1e-12);

        let null_vec = spec.left_vector(3);
        let projected = spec.null_projection(&null_vec).unwrap();
        assert!((projected - &null_vec).amax() < 1e-12);
    }

    #[test]
    fn null_projection_matches_dense_projector() {
        let design = random_design(4, 2, 8);
        let spec = decompose(&design, 1).unwrap();
        let w = DVector::from_vec(vec![0.3, -1.2, 2.0, 0.7]);
        // Dense projector from an independent SVD of Φ.
        let svd = design.phi().clone().svd(true, false);
        let u = svd.u.unwrap();
        let projector = DMatrix::identity(4, 4) - &u * u.transpose();
        let expected = projector * &w;
        assert!((spec.null_projection(&w).unwrap() - expected).amax() < 1e-10);
    }

    #[test]
    fn null_projection_rejects_wrong_length() {
        let spec = decompose(&random_design(4, 2, 1), 1).unwrap();
        assert!(matches!(
            spec.null_projection(&DVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn coefficient_round_trip() {
        let design = random_design(5, 3, 4);
        let spec = decompose(&design, 2).unwrap();
        let w = DVector::from_fn(10, |i, _| (i as f64).sin());
        let c = spec.left_coefficients(&w).unwrap();
        let back = spec.from_left_coefficients(&c).unwrap();
        assert!((back - w).amax() < 1e-12);
    }

    #[test]
    fn outputs_match_dense_transpose() {
        let design = random_design(5, 3, 7);
        let dense = kron(&DMatrix::identity(2, 2), design.phi());
        let w = DVector::from_fn(10, |i, _| 0.1 * i as f64 - 0.3);
        let f = design.outputs(&w, 2).unwrap();
        assert!((f - dense.tr_mul(&w)).amax() < 1e-12);
    }

    #[test]
    fn label_vector_stacks_output_blocks() {
        let labels = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let task =
            SyntheticTask::new(vec![DVector::zeros(1), DVector::zeros(1)], labels, vec![]).unwrap();
        // y_1 = (1, 2), y_2 = (3, 4): output-0 block first.
        assert_eq!(task.label_vector().as_slice(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
