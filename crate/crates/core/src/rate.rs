//! Coding-rate functionals and their derivatives.
//!
//! Tokens are the columns of a `d x N` matrix `Z`. The coding rate is
//! `R(Z) = ½ log det(I + α ZᵀZ)` with `α = d / (N ε²)`, and the compression
//! term sums the same quantity over the projections `U_kᵀ Z` with
//! `γ = p / (N ε²)`. All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ssa;
use crate::linalg::{logdet_gram, random_orthonormal, Cholesky, Matrix};
use crate::rng::Rng;

/// Entries with magnitude at or below this count as zero in the relaxed
/// sparsity report.
pub const DEFAULT_SPARSITY_TAU: f64 = 1e-8;

fn default_eps() -> f64 {
    0.5
}
fn default_lambda() -> f64 {
    0.1
}
fn default_kappa() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    /// Token dimension.
    pub d: usize,
    /// Tokens per sample.
    pub n: usize,
    /// Subspace dimension.
    pub p: usize,
    /// Number of subspaces (heads).
    pub k: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

impl RateConfig {
    pub fn new(d: usize, n: usize, p: usize, k: usize) -> Self {
        Self {
            d,
            n,
            p,
            k,
            eps: default_eps(),
            lambda: default_lambda(),
            kappa: default_kappa(),
            eta: default_eta(),
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    /// Same configuration with a different token count (e.g. a CLS token added).
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    /// `d / (N ε²)`.
    pub fn alpha(&self) -> f64 {
        self.d as f64 / (self.n as f64 * self.eps * self.eps)
    }

    /// `p / (N ε²)`.
    pub fn gamma(&self) -> f64 {
        self.p as f64 / (self.n as f64 * self.eps * self.eps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.p == 0 || self.k == 0 {
            return Err(Error::Invalid(format!(
                "rate config dimensions must be positive: d={} n={} p={} k={}",
                self.d, self.n, self.p, self.k
            )));
        }
        if self.p > self.d {
            return Err(Error::Invalid(format!("p={} exceeds d={}", self.p, self.d)));
        }
        if !(self.eps > 0.0) || !(self.kappa > 0.0) || !(self.eta > 0.0) {
            return Err(Error::Invalid(format!(
                "eps, kappa, eta must be positive (eps={}, kappa={}, eta={})",
                self.eps, self.kappa, self.eta
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.p * self.k > self.d {
            log::warn!(
                "p*K = {} exceeds d = {}; the subspaces cannot be mutually incoherent",
                self.p * self.k,
                self.d
            );
        }
        Ok(())
    }

    fn check_tokens(&self, z: &Matrix, op: &'static str) -> Result<()> {
        if z.rows() != self.d || z.cols() != self.n {
            return Err(Error::shape(
                op,
                format!("tokens are {:?}, config expects {}x{}", z.shape(), self.d, self.n),
            ));
        }
        Ok(())
    }
}

/// `K` projection bases `U_k ∈ R^{d x p}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceBank {
    bases: Vec<Matrix>,
}

impl SubspaceBank {
    pub fn new(bases: Vec<Matrix>) -> Result<Self> {
        let shape = bases
            .first()
            .ok_or_else(|| Error::Invalid("subspace bank needs at least one basis".into()))?
            .shape();
        if let Some(bad) = bases.iter().find(|b| b.shape() != shape) {
            return Err(Error::shape(
                "SubspaceBank::new",
                format!("basis {:?} differs from {:?}", bad.shape(), shape),
            ));
        }
        Ok(Self { bases })
    }

    /// Random orthonormal bases. When `p·K ≤ d` the bases are drawn jointly,
    /// so distinct subspaces are mutually orthogonal.
    pub fn random(d: usize, p: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if p * k <= d {
            let joint = random_orthonormal(d, p * k, rng)?;
            Self::from_concatenated(&joint, k)
        } else {
            (0..k)
                .map(|_| random_orthonormal(d, p, rng))
                .collect::<Result<Vec<_>>>()
                .and_then(Self::new)
        }
    }

    /// Splits `[U_1, ..., U_K]` into its `K` column blocks.
    pub fn from_concatenated(joint: &Matrix, k: usize) -> Result<Self> {
        if k == 0 || !joint.cols().is_multiple_of(k) {
            return Err(Error::shape(
                "SubspaceBank::from_concatenated",
                format!("{} columns do not split into {k} heads", joint.cols()),
            ));
        }
        let p = joint.cols() / k;
        let bases = (0..k)
            .map(|h| joint.select_columns(&(h * p..(h + 1) * p).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(bases)
    }

    pub fn bases(&self) -> &[Matrix] {
        &self.bases
    }

    pub fn bases_mut(&mut self) -> &mut [Matrix] {
        &mut self.bases
    }

    pub fn heads(&self) -> usize {
        self.bases.len()
    }

    pub fn dim(&self) -> usize {
        self.bases[0].rows()
    }

    pub fn subspace_dim(&self) -> usize {
        self.bases[0].cols()
    }

    /// `[U_1, ..., U_K] ∈ R^{d x pK}`.
    pub fn concatenated(&self) -> Matrix {
        let refs: Vec<&Matrix> = self.bases.iter().collect();
        Matrix::hcat(&refs).expect("bank bases share a shape")
    }

    fn check(&self, cfg: &RateConfig, op: &'static str) -> Result<()> {
        if self.dim() != cfg.d || self.subspace_dim() != cfg.p || self.heads() != cfg.k {
            return Err(Error::shape(
                op,
                format!(
                    "bank is K={} of {}x{}, config expects K={} of {}x{}",
                    self.heads(),
                    self.dim(),
                    self.subspace_dim(),
                    cfg.k,
                    cfg.d,
                    cfg.p
                ),
            ));
        }
        Ok(())
    }
}

/// `R(Z) = ½ log det(I + α ZᵀZ)`.
pub fn coding_rate(z: &Matrix, cfg: &RateConfig) -> Result<f64> {
    cfg.check_tokens(z, "coding_rate")?;
    Ok(0.5 * logdet_gram(z, cfg.alpha())?)
}

/// `R^c(Z; U) = Σ_k ½ log det(I + γ (U_kᵀZ)ᵀ(U_kᵀZ))`.
pub fn coding_rate_projected(z: &Matrix, u: &SubspaceBank, cfg: &RateConfig) -> Result<f64> {
    cfg.check_tokens(z, "coding_rate_projected")?;
    u.check(cfg, "coding_rate_projected")?;
    let gamma = cfg.gamma();
    let mut total = 0.0;
    for basis in u.bases() {
        let proj = basis.t_matmul(z)?;
        total += 0.5 * logdet_gram(&proj, gamma)?;
    }
    Ok(total)
}

/// `R(Z) − R^c(Z; U) − λ‖Z‖₀`, counting only entries that are exactly zero
/// as zero.
pub fn sparse_rate_reduction(z: &Matrix, u: &SubspaceBank, cfg: &RateConfig) -> Result<f64> {
    sparse_rate_reduction_relaxed(z, u, cfg, 0.0)
}

/// As [`sparse_rate_reduction`] but entries with `|z| ≤ tau` count as zero.
pub fn sparse_rate_reduction_relaxed(
    z: &Matrix,
    u: &SubspaceBank,
    cfg: &RateConfig,
    tau: f64,
) -> Result<f64> {
    let nnz = z.count_nonzero(tau) as f64;
    Ok(coding_rate(z, cfg)? - coding_rate_projected(z, u, cfg)? - cfg.lambda * nnz)
}

/// `∇R(Z) = α Z (I + α ZᵀZ)⁻¹`.
pub fn grad_coding_rate(z: &Matrix, cfg: &RateConfig) -> Result<Matrix> {
    cfg.check_tokens(z, "grad_coding_rate")?;
    gram_resolvent_grad(z, cfg.alpha())
}

/// `a Z (I + a ZᵀZ)⁻¹` via a Cholesky solve.
fn gram_resolvent_grad(z: &Matrix, a: f64) -> Result<Matrix> {
    let resolvent = gram_factor(z, a)?;
    Ok(resolvent.solve_right(z)?.scale(a))
}

fn gram_factor(z: &Matrix, a: f64) -> Result<Cholesky> {
    let mut m = z.t_matmul(z)?.scale(a);
    for i in 0..m.rows() {
        m[(i, i)] += 1.0;
    }
    Cholesky::new(&m)
}

/// `∇R^c(Z; U) = γ Σ_k U_k U_kᵀ Z (I + γ (U_kᵀZ)ᵀ(U_kᵀZ))⁻¹`.
pub fn grad_coding_rate_projected(
    z: &Matrix,
    u: &SubspaceBank,
    cfg: &RateConfig,
) -> Result<Matrix> {
    cfg.check_tokens(z, "grad_coding_rate_projected")?;
    u.check(cfg, "grad_coding_rate_projected")?;
    let gamma = cfg.gamma();
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for basis in u.bases() {
        let proj = basis.t_matmul(z)?;
        let inner = gram_resolvent_grad(&proj, gamma)?;
        out.axpy(1.0, &basis.matmul(&inner)?)?;
    }
    Ok(out)
}

/// The Hessian of `R` applied to a direction:
/// `αΔA⁻¹ − α² Z A⁻¹ (ZᵀΔ + ΔᵀZ) A⁻¹` with `A = I + α ZᵀZ`.
pub fn hessian_vec_coding_rate(z: &Matrix, delta: &Matrix, cfg: &RateConfig) -> Result<Matrix> {
    cfg.check_tokens(z, "hessian_vec_coding_rate")?;
    if delta.shape() != z.shape() {
        return Err(Error::shape(
            "hessian_vec_coding_rate",
            format!("direction {:?} vs tokens {:?}", delta.shape(), z.shape()),
        ));
    }
    let alpha = cfg.alpha();
    let factor = gram_factor(z, alpha)?;
    hessian_apply(z, delta, alpha, &factor)
}

fn hessian_apply(z: &Matrix, delta: &Matrix, alpha: f64, factor: &Cholesky) -> Result<Matrix> {
    let first = factor.solve_right(delta)?.scale(alpha);
    let sym = z.t_matmul(delta)?;
    let sym = sym.add(&sym.transpose())?;
    let left = factor.solve_right(z)?;
    let right = factor.solve_right(&sym)?;
    let second = left.matmul(&right)?.scale(alpha * alpha);
    first.sub(&second)
}

/// Whether [`hessian_norm_bound_check`] enforces unit-norm token columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnNormCheck {
    Enforce,
    /// Skip the precondition (used to probe degenerate inputs such as `Z = 0`).
    Diagnostic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HessianBoundReport {
    /// Largest `‖H(Δ)‖_F / (α ‖Δ‖_F)` seen over all probes.
    pub max_ratio: f64,
    /// Best ratio from random unit directions alone.
    pub sampled_ratio: f64,
    /// Ratio reached by power iteration on the Hessian operator.
    pub power_ratio: f64,
}

const UNIT_COLUMN_TOL: f64 = 1e-8;
const POWER_ITERATIONS: usize = 200;

/// Estimates the operator norm of the Hessian of `R` at `Z`, relative to `α`,
/// from `trials` random unit-Frobenius directions plus power iteration. The
/// contract for unit-column `Z` is `max_ratio ≤ 9/4`.
pub fn hessian_norm_bound_check(
    z: &Matrix,
    cfg: &RateConfig,
    trials: usize,
    rng: &mut Rng,
    mode: ColumnNormCheck,
) -> Result<HessianBoundReport> {
    cfg.check_tokens(z, "hessian_norm_bound_check")?;
    if trials == 0 {
        return Err(Error::Invalid("hessian_norm_bound_check needs at least one trial".into()));
    }
    if mode == ColumnNormCheck::Enforce {
        for c in 0..z.cols() {
            let norm = z.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_COLUMN_TOL {
                return Err(Error::Precondition(format!(
                    "column {c} has norm {norm}, expected unit-norm tokens"
                )));
            }
        }
    }
    let alpha = cfg.alpha();
    let factor = gram_factor(z, alpha)?;
    let ratio = |dir: &Matrix| -> Result<f64> {
        let image = hessian_apply(z, dir, alpha, &factor)?;
        Ok(image.frobenius_norm() / (alpha * dir.frobenius_norm()))
    };

    let mut sampled = 0.0f64;
    for _ in 0..trials {
        let dir = rng.normal_matrix(z.rows(), z.cols());
        let dir = dir.scale(1.0 / dir.frobenius_norm());
        sampled = sampled.max(ratio(&dir)?);
    }

    let mut dir = rng.normal_matrix(z.rows(), z.cols());
    dir = dir.scale(1.0 / dir.frobenius_norm());
    let mut power = 0.0f64;
    for _ in 0..POWER_ITERATIONS {
        let image = hessian_apply(z, &dir, alpha, &factor)?;
        let norm = image.frobenius_norm();
        power = power.max(norm / alpha);
        if norm == 0.0 {
            break;
        }
        dir = image.scale(1.0 / norm);
    }

    Ok(HessianBoundReport {
        max_ratio: sampled.max(power),
        sampled_ratio: sampled,
        power_ratio: power,
    })
}

/// First-order softmax surrogate of `∇R^c`:
/// `γ Σ_k U_k U_kᵀ Z − γ² [U_1, …, U_K] stack_k(SSA(Z | U_k))`.
pub fn approx_grad_coding_rate_projected(
    z: &Matrix,
    u: &SubspaceBank,
    cfg: &RateConfig,
) -> Result<Matrix> {
    cfg.check_tokens(z, "approx_grad_coding_rate_projected")?;
    u.check(cfg, "approx_grad_coding_rate_projected")?;
    let gamma = cfg.gamma();
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for basis in u.bases() {
        let proj = basis.t_matmul(z)?;
        let attended = ssa(z, basis, 1.0)?;
        let head = proj.scale(gamma).sub(&attended.scale(gamma * gamma))?;
        out.axpy(1.0, &basis.matmul(&head)?)?;
    }
    Ok(out)
}
