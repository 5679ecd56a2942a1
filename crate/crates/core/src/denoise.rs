//! Denoisers for a noisy mixture of low-rank Gaussians.
//!
//! Clean tokens come from `z ~ Σ_k π_k N(0, U_k Λ_k U_kᵀ)` and are observed
//! as `x = z + σ w`. Every quantity here uses the `U_k`/`Λ_k` factorization:
//! `(Σ_k + σ² I)⁻¹ = σ⁻² (I − U_k U_kᵀ) + U_k diag(1/(λ_i + σ²)) U_kᵀ`, so
//! no `d x d` covariance is ever formed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, softmax, Matrix};
use crate::rng::Rng;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pi: Vec<f64>,
    bases: Vec<Matrix>,
    lambdas: Vec<Vec<f64>>,
    sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub x: Vec<f64>,
    pub z_true: Option<Vec<f64>>,
    pub component: Option<usize>,
}

/// How the per-component responsibilities inside the score are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentWeighting {
    /// Exact posterior responsibilities, including `log π_k` and the
    /// `log det M_k` normalization.
    #[default]
    Exact,
    /// Assume `π_k det M_k` is the same for every component and drop it.
    EqualNormalization,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl MixtureModel {
    pub fn new(pi: Vec<f64>, bases: Vec<Matrix>, lambdas: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        let k = pi.len();
        if k == 0 || bases.len() != k || lambdas.len() != k {
            return Err(Error::Invalid(format!(
                "mixture needs matching non-empty weights/bases/lambdas, got {}/{}/{}",
                k,
                bases.len(),
                lambdas.len()
            )));
        }
        if pi.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Invalid("mixture weights must be positive".into()));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Invalid(format!("noise level must be >= 0, got {sigma}")));
        }
        let d = bases[0].rows();
        for (i, (u, lam)) in bases.iter().zip(&lambdas).enumerate() {
            if u.rows() != d || u.cols() != lam.len() || u.cols() == 0 {
                return Err(Error::shape(
                    "MixtureModel::new",
                    format!("component {i}: basis {:?} with {} eigenvalues", u.shape(), lam.len()),
                ));
            }
            if lam.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
                return Err(Error::Invalid(format!(
                    "component {i}: eigenvalues must be strictly positive"
                )));
            }
            let gram = u.t_matmul(u)?;
            let err = gram.max_abs_diff(&Matrix::identity(u.cols()))?;
            if err > ORTHONORMAL_TOL {
                return Err(Error::Invalid(format!(
                    "component {i}: basis is not orthonormal (error {err:e})"
                )));
            }
        }
        Ok(Self {
            pi,
            bases,
            lambdas,
            sigma,
        })
    }

    pub fn components(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.bases[0].rows()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.pi
    }

    pub fn bases(&self) -> &[Matrix] {
        &self.bases
    }

    pub fn lambdas(&self) -> &[Vec<f64>] {
        &self.lambdas
    }

    /// Same components with a different noise level.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(self.pi.clone(), self.bases.clone(), self.lambdas.clone(), sigma)
    }

    /// `Σ_k` materialized densely; only for tests and small `d`.
    pub fn covariance(&self, k: usize) -> Matrix {
        let u = &self.bases[k];
        let scaled = Matrix::from_fn(u.rows(), u.cols(), |r, c| u[(r, c)] * self.lambdas[k][c]);
        scaled.matmul_t(u).expect("basis shapes agree")
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape(
                "mixture",
                format!("point has {} entries, model dimension is {}", x.len(), self.dim()),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture input"));
        }
        Ok(())
    }

    fn project(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let u = &self.bases[k];
        (0..u.cols())
            .map(|c| (0..u.rows()).map(|r| u[(r, c)] * x[r]).sum())
            .collect()
    }

    fn lift(&self, k: usize, coeffs: &[f64]) -> Vec<f64> {
        let u = &self.bases[k];
        (0..u.rows())
            .map(|r| (0..u.cols()).map(|c| u[(r, c)] * coeffs[c]).sum())
            .collect()
    }

    fn noise_var(&self) -> Result<f64> {
        let s2 = self.sigma * self.sigma;
        if s2 > 0.0 {
            Ok(s2)
        } else {
            Err(Error::Invalid("noisy density requires sigma > 0".into()))
        }
    }

    /// `log N(x; 0, Σ_k + σ²I)` and, optionally, `log det M_k` where
    /// `M_k = (Σ_k + σ²I)^{-1/2}`.
    fn component_terms(&self, k: usize, x: &[f64], coeffs: &[f64]) -> Result<(f64, f64)> {
        let s2 = self.noise_var()?;
        let d = self.dim() as f64;
        let p = coeffs.len() as f64;
        let norm2 = dot(x, x);
        let on_span = dot(coeffs, coeffs);
        let mut quad = (norm2 - on_span).max(0.0) / s2;
        let mut logdet = (d - p) * s2.ln();
        for (c, lam) in coeffs.iter().zip(&self.lambdas[k]) {
            quad += c * c / (lam + s2);
            logdet += (lam + s2).ln();
        }
        let log_density = -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        Ok((log_density, quad))
    }

    /// Natural log of the noisy mixture density `q(x)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        let terms = (0..self.components())
            .map(|k| {
                let coeffs = self.project(k, x);
                self.component_terms(k, x, &coeffs)
                    .map(|(lp, _)| self.pi[k].ln() + lp)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(&terms))
    }

    /// Posterior component probabilities `P(k | x)`.
    pub fn responsibilities(&self, x: &[f64], weighting: ComponentWeighting) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let logits = (0..self.components())
            .map(|k| {
                let coeffs = self.project(k, x);
                self.component_terms(k, x, &coeffs).map(|(lp, quad)| match weighting {
                    ComponentWeighting::Exact => self.pi[k].ln() + lp,
                    ComponentWeighting::EqualNormalization => -0.5 * quad,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(softmax(&logits))
    }

    /// `(Σ_k + σ²I)⁻¹ x`.
    fn resolvent(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        let s2 = self.noise_var()?;
        let coeffs = self.project(k, x);
        let correction: Vec<f64> = coeffs
            .iter()
            .zip(&self.lambdas[k])
            .map(|(c, lam)| c * (1.0 / (lam + s2) - 1.0 / s2))
            .collect();
        let lifted = self.lift(k, &correction);
        Ok(x.iter().zip(&lifted).map(|(xi, li)| xi / s2 + li).collect())
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<NoisySample>> {
        if n == 0 {
            return Err(Error::Invalid("sample count must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.draw(rng));
        }
        Ok(out)
    }

    fn draw(&self, rng: &mut Rng) -> NoisySample {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.pi.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let coeffs: Vec<f64> = self.lambdas[k].iter().map(|l| l.sqrt() * rng.normal()).collect();
        let z = self.lift(k, &coeffs);
        let x = z.iter().map(|zi| zi + self.sigma * rng.normal()).collect();
        NoisySample {
            x,
            z_true: Some(z),
            component: Some(k),
        }
    }

    /// Draws `n` samples split into `chunks` independent jump streams of
    /// `seed`, concatenated in chunk order. The result does not depend on
    /// the number of worker threads.
    pub fn sample_parallel(&self, n: usize, seed: u64, chunks: usize) -> Result<Vec<NoisySample>> {
        if n == 0 || chunks == 0 {
            return Err(Error::Invalid("sample count and chunk count must be positive".into()));
        }
        let per = n.div_ceil(chunks);
        let parts: Vec<Vec<NoisySample>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let start = c * per;
                let count = per.min(n.saturating_sub(start));
                let mut rng = Rng::stream(seed, c);
                (0..count).map(|_| self.draw(&mut rng)).collect()
            })
            .collect();
        Ok(parts.into_iter().flatten().collect())
    }
}

/// `∇_x log q(x)` with exact responsibilities.
pub fn mog_score(model: &MixtureModel, x: &[f64]) -> Result<Vec<f64>> {
    mog_score_weighted(model, x, ComponentWeighting::Exact)
}

/// `−Σ_k w_k(x) (Σ_k + σ²I)⁻¹ x` under the chosen weighting.
pub fn mog_score_weighted(
    model: &MixtureModel,
    x: &[f64],
    weighting: ComponentWeighting,
) -> Result<Vec<f64>> {
    let weights = model.responsibilities(x, weighting)?;
    let mut score = vec![0.0; x.len()];
    for (k, w) in weights.iter().enumerate() {
        let r = model.resolvent(k, x)?;
        for (s, ri) in score.iter_mut().zip(&r) {
            *s -= w * ri;
        }
    }
    Ok(score)
}

/// `x + σ² ∇ log q(x)`.
pub fn tweedie_denoise(model: &MixtureModel, x: &[f64]) -> Result<Vec<f64>> {
    let score = mog_score(model, x)?;
    let s2 = model.sigma() * model.sigma();
    Ok(x.iter().zip(&score).map(|(xi, si)| xi + s2 * si).collect())
}

/// `E[z | x] = Σ_k w_k(x) Σ_k (Σ_k + σ²I)⁻¹ x`, computed from the shrinkage
/// factors `λ/(λ+σ²)` on each component subspace.
pub fn posterior_mean(model: &MixtureModel, x: &[f64]) -> Result<Vec<f64>> {
    let weights = model.responsibilities(x, ComponentWeighting::Exact)?;
    let s2 = model.sigma() * model.sigma();
    let mut out = vec![0.0; x.len()];
    for (k, w) in weights.iter().enumerate() {
        let shrunk: Vec<f64> = model
            .project(k, x)
            .iter()
            .zip(&model.lambdas()[k])
            .map(|(c, lam)| c * lam / (lam + s2))
            .collect();
        for (o, v) in out.iter_mut().zip(model.lift(k, &shrunk)) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// The attention-form denoiser
/// `Σ_k softmax_k(‖U_kᵀx‖² / 2σ²) U_k U_kᵀ x`, using only the bases and σ.
pub fn attention_denoise(model: &MixtureModel, x: &[f64]) -> Result<Vec<f64>> {
    model.check_point(x)?;
    let s2 = model.noise_var()?;
    let projections: Vec<Vec<f64>> = (0..model.components()).map(|k| model.project(k, x)).collect();
    let logits: Vec<f64> = projections.iter().map(|c| dot(c, c) / (2.0 * s2)).collect();
    let weights = softmax(&logits);
    let mut out = vec![0.0; x.len()];
    for (k, (w, c)) in weights.iter().zip(&projections).enumerate() {
        for (o, v) in out.iter_mut().zip(model.lift(k, c)) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Euclidean `‖a − b‖ / ‖b‖`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

pub fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthonormal;

    fn isotropic(d: usize, sigma: f64) -> MixtureModel {
        MixtureModel::new(vec![1.0], vec![Matrix::identity(d)], vec![vec![1.0; d]], sigma).unwrap()
    }

    #[test]
    fn construction_errors() {
        let u = Matrix::identity(3);
        assert!(MixtureModel::new(vec![1.0], vec![u.clone()], vec![vec![0.0; 3]], 0.1).is_err());
        assert!(MixtureModel::new(vec![0.5], vec![u.clone()], vec![vec![1.0; 3]], 0.1).is_err());
        let skew = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        assert!(MixtureModel::new(vec![1.0], vec![skew], vec![vec![1.0; 2]], 0.1).is_err());
        assert!(MixtureModel::new(vec![1.0], vec![u], vec![vec![1.0; 3]], -1.0).is_err());
    }

    #[test]
    fn isotropic_score_and_denoisers() {
        let m = isotropic(4, 1.0);
        let x = [1.0, -2.0, 0.5, 3.0];
        let s = mog_score(&m, &x).unwrap();
        for (si, xi) in s.iter().zip(&x) {
            assert!((si + xi / 2.0).abs() < 1e-14);
        }
        let t = tweedie_denoise(&m, &x).unwrap();
        for (ti, xi) in t.iter().zip(&x) {
            assert!((ti - xi / 2.0).abs() < 1e-14);
        }
        let a = attention_denoise(&m, &x).unwrap();
        for (ai, xi) in a.iter().zip(&x) {
            assert!((ai - xi).abs() < 1e-14);
        }
        assert_eq!(attention_denoise(&m, &[0.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn single_gaussian_score_matches_dense_inverse() {
        let mut rng = Rng::new(8);
        let u = random_orthonormal(5, 2, &mut rng).unwrap();
        let m = MixtureModel::new(vec![1.0], vec![u], vec![vec![2.0, 0.5]], 0.3).unwrap();
        let mut cov = m.covariance(0);
        for i in 0..5 {
            cov[(i, i)] += 0.09;
        }
        let x = [0.3, -0.1, 1.2, 0.7, -0.4];
        let xm = Matrix::column_vector(&x);
        let expected = crate::linalg::Cholesky::new(&cov).unwrap().solve(&xm).unwrap();
        let s = mog_score(&m, &x).unwrap();
        for (i, si) in s.iter().enumerate() {
            assert!((si + expected[(i, 0)]).abs() < 1e-12);
        }
        let pm = posterior_mean(&m, &x).unwrap();
        let dense = m.covariance(0).matmul(&expected).unwrap();
        for (i, v) in pm.iter().enumerate() {
            assert!((v - dense[(i, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_samples_are_clean() {
        let mut rng = Rng::new(1);
        let u = random_orthonormal(6, 2, &mut rng).unwrap();
        let m = MixtureModel::new(vec![1.0], vec![u], vec![vec![1.0, 1.0]], 0.0).unwrap();
        for s in m.sample(20, &mut rng).unwrap() {
            assert_eq!(Some(s.x.clone()), s.z_true);
        }
        assert!(m.sample(0, &mut rng).is_err());
    }

    #[test]
    fn parallel_sampling_is_chunk_deterministic() {
        let m = isotropic(3, 0.5);
        let a = m.sample_parallel(101, 9, 4).unwrap();
        let b = m.sample_parallel(101, 9, 4).unwrap();
        assert_eq!(a.len(), 101);
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_mixture_keeps_symmetry_axis() {
        let e1 = Matrix::column_vector(&[1.0, 0.0]);
        let e2 = Matrix::column_vector(&[0.0, 1.0]);
        let m = MixtureModel::new(vec![0.5, 0.5], vec![e1, e2], vec![vec![1.0], vec![1.0]], 0.4).unwrap();
        let pm = posterior_mean(&m, &[0.7, 0.7]).unwrap();
        assert!((pm[0] - pm[1]).abs() < 1e-14);
    }

    #[test]
    fn equal_normalization_matches_exact_when_assumption_holds() {
        let e1 = Matrix::column_vector(&[1.0, 0.0, 0.0]);
        let e2 = Matrix::column_vector(&[0.0, 1.0, 0.0]);
        let m = MixtureModel::new(vec![0.5, 0.5], vec![e1, e2], vec![vec![2.0], vec![2.0]], 0.5).unwrap();
        let x = [0.4, -1.1, 0.2];
        let a = mog_score_weighted(&m, &x, ComponentWeighting::Exact).unwrap();
        let b = mog_score_weighted(&m, &x, ComponentWeighting::EqualNormalization).unwrap();
        assert!(relative_error(&a, &b) < 1e-12);
    }
}
