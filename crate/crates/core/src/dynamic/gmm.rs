//! Full-covariance Gaussian mixture fitted by expectation-maximization, with the
//! AIC sign rule choosing between one and two components.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub seed: u64,
    pub max_iterations: usize,
    /// Convergence threshold on the change of mean per-sample log-likelihood.
    pub tolerance: f64,
    /// Added to every covariance diagonal.
    pub regularization: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            max_iterations: 100,
            tolerance: 1e-6,
            regularization: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Raw EM result on already-prepared data.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFit {
    pub components: Vec<Component>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl MixtureFit {
    /// Free parameters of a full-covariance mixture.
    pub fn parameter_count(&self) -> usize {
        let k = self.components.len();
        let d = self.components.first().map_or(0, |c| c.mean.len());
        (k - 1) + k * d + k * d * (d + 1) / 2
    }

    pub fn aic(&self) -> f64 {
        2.0 * self.parameter_count() as f64 - 2.0 * self.log_likelihood
    }
}

struct Gaussian {
    mean: DVector<f64>,
    inv: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(c: &Component) -> Result<Self> {
        let d = c.mean.len() as f64;
        let chol = c
            .covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Gmm("covariance is not positive definite".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(Self {
            mean: c.mean.clone(),
            inv: chol.inverse(),
            log_norm: -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        self.log_norm - 0.5 * (d.transpose() * &self.inv * &d)[(0, 0)]
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-sample log densities `log π_k + log N(x | μ_k, Σ_k)`.
fn weighted_log_densities(comps: &[Component], data: &[DVector<f64>]) -> Result<Vec<Vec<f64>>> {
    let gs = comps.iter().map(Gaussian::new).collect::<Result<Vec<_>>>()?;
    Ok(data
        .iter()
        .map(|x| {
            comps
                .iter()
                .zip(&gs)
                .map(|(c, g)| c.weight.ln() + g.log_pdf(x))
                .collect()
        })
        .collect())
}

pub fn log_likelihood(comps: &[Component], data: &[DVector<f64>]) -> Result<f64> {
    Ok(weighted_log_densities(comps, data)?
        .iter()
        .map(|row| log_sum_exp(row))
        .sum())
}

fn m_step(data: &[DVector<f64>], resp: &[Vec<f64>], k: usize, reg: f64) -> Vec<Component> {
    let d = data[0].len();
    let n = data.len() as f64;
    (0..k)
        .map(|j| {
            let nk: f64 = resp.iter().map(|r| r[j]).sum::<f64>() + 10.0 * f64::EPSILON;
            let mut mean = DVector::zeros(d);
            for (x, r) in data.iter().zip(resp) {
                mean += x * r[j];
            }
            mean /= nk;
            let mut cov = DMatrix::zeros(d, d);
            for (x, r) in data.iter().zip(resp) {
                let diff = x - &mean;
                cov += &diff * diff.transpose() * r[j];
            }
            cov /= nk;
            for i in 0..d {
                cov[(i, i)] += reg;
            }
            Component {
                weight: nk / n,
                mean,
                covariance: cov,
            }
        })
        .collect()
}

/// Seeded k-means++ seeding followed by one hard-assignment M-step.
fn initialize(data: &[DVector<f64>], k: usize, opts: &EmOptions) -> Vec<Component> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = data
            .iter()
            .map(|x| {
                centers
                    .iter()
                    .map(|c| (x - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.push(data[next].clone());
    }
    let resp: Vec<Vec<f64>> = data
        .iter()
        .map(|x| {
            let best = (0..k)
                .min_by(|&a, &b| {
                    (x - &centers[a])
                        .norm_squared()
                        .total_cmp(&(x - &centers[b]).norm_squared())
                })
                .unwrap_or(0);
            (0..k).map(|j| if j == best { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    m_step(data, &resp, k, opts.regularization)
}

/// EM for a `k`-component full-covariance mixture.
pub fn fit_mixture(data: &[DVector<f64>], k: usize, opts: &EmOptions) -> Result<MixtureFit> {
    if k == 0 || data.len() < k.max(1) {
        return Err(Error::Gmm(format!(
            "cannot fit {k} components to {} samples",
            data.len()
        )));
    }
    let n = data.len() as f64;
    let mut comps = initialize(data, k, opts);
    let mut prev = f64::NEG_INFINITY;
    let mut best: Option<(Vec<Component>, f64)> = None;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iterations {
        iterations = it + 1;
        let logd = weighted_log_densities(&comps, data)?;
        let mut ll = 0.0;
        let resp: Vec<Vec<f64>> = logd
            .iter()
            .map(|row| {
                let lse = log_sum_exp(row);
                ll += lse;
                row.iter().map(|x| (x - lse).exp()).collect()
            })
            .collect();
        if !ll.is_finite() {
            break;
        }
        if best.as_ref().is_none_or(|(_, b)| ll > *b) {
            best = Some((comps.clone(), ll));
        }
        if (ll - prev).abs() / n < opts.tolerance {
            converged = true;
            break;
        }
        prev = ll;
        comps = m_step(data, &resp, k, opts.regularization);
    }
    let (components, _) = match best {
        Some(b) => b,
        None => return Err(Error::Gmm("EM produced no finite likelihood".into())),
    };
    let log_likelihood = log_likelihood(&components, data)?;
    Ok(MixtureFit {
        components,
        log_likelihood,
        iterations,
        converged,
    })
}

/// Per-dimension affine map to zero mean and unit variance across samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn fit(samples: &[Vec<f64>]) -> Self {
        let d = samples[0].len();
        let n = samples.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n)
            .collect();
        let scale = (0..d)
            .map(|j| {
                let var = samples.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                // rounding noise on constant columns must not be blown up to unit variance
                if sd > 1e-12 * (1.0 + mean[j].abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .map(|((v, m), s)| (v - m) / s),
        )
    }
}

/// Mixture over loss-flow features, with one component designated static.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub components: Vec<Component>,
    pub static_component: usize,
    pub standardization: Standardization,
    pub log_likelihood: f64,
    /// AIC of the two-component fit that drove the component-count decision.
    pub two_component_aic: f64,
    pub converged: bool,
    /// Describes the feature axes the model was fitted on.
    pub feature_names: [&'static str; 2],
}

pub const FEATURE_NAMES: [&str; 2] = ["mean_delta_loss", "std_delta_loss"];

impl GmmModel {
    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    /// Posterior probability that `feature` belongs to a non-static component.
    pub fn dynamic_posterior(&self, feature: &[f64; 2]) -> f64 {
        if self.components.len() < 2 {
            return 0.0;
        }
        let x = self.standardization.apply(feature);
        let row = match weighted_log_densities(&self.components, std::slice::from_ref(&x)) {
            Ok(mut r) => r.remove(0),
            Err(_) => return 0.0,
        };
        let lse = log_sum_exp(&row);
        1.0 - (row[self.static_component] - lse).exp()
    }
}

/// Fits 2 components to standardized features; falls back to 1 when the
/// two-component AIC is positive or the split is degenerate.
pub fn fit_gmm(features: &[[f64; 2]], opts: &EmOptions) -> Result<GmmModel> {
    if features.len() < 2 {
        return Err(Error::Gmm(format!(
            "need at least 2 feature vectors, got {}",
            features.len()
        )));
    }
    if features.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numerics("non-finite GMM feature".into()));
    }
    let raw: Vec<Vec<f64>> = features.iter().map(|f| f.to_vec()).collect();
    let standardization = Standardization::fit(&raw);
    let data: Vec<DVector<f64>> = raw.iter().map(|f| standardization.apply(f)).collect();

    let two = fit_mixture(&data, 2, opts)?;
    let aic = two.aic();
    let separated = (&two.components[0].mean - &two.components[1].mean).norm() > 1e-9;
    let fit = if aic > 0.0 || !separated {
        fit_mixture(&data, 1, opts)?
    } else {
        two
    };
    let static_component = (0..fit.components.len())
        .min_by(|&a, &b| fit.components[a].mean[1].total_cmp(&fit.components[b].mean[1]))
        .unwrap_or(0);
    Ok(GmmModel {
        components: fit.components,
        static_component,
        standardization,
        log_likelihood: fit.log_likelihood,
        two_component_aic: aic,
        converged: fit.converged,
        feature_names: FEATURE_NAMES,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Motion {
    Static,
    Dynamic,
}

/// Dynamic iff the non-static posterior exceeds `theta`; a one-component model is always static.
pub fn classify(model: &GmmModel, feature: &[f64; 2], theta: f64) -> Motion {
    if model.dynamic_posterior(feature) > theta {
        Motion::Dynamic
    } else {
        Motion::Static
    }
}
