//! Causal impact of source outlets on their followers.
//!
//! Outcomes follow a Poisson GLMM whose log-rate for outlet `j`, when outlet
//! `i` is the quote source, is
//!
//! ```text
//! tau * z_j + sum_n s_j^(n) * tau * prod_{k<=n} gamma_k + beta' x_j + mu + eps_j
//! ```
//!
//! with `s^(n) = ln(A'^n z + 1)`. The network `A` is latent with a Poisson
//! prior per edge and is sampled jointly with the regression parameters.

mod analytics;
mod diagnostics;
mod impact;
mod sampler;

pub use analytics::{
    group_report, normalized_summary, slant_and_totals, write_group_csv, GroupRow, Grouping, ImpactAnalytics,
    ImpactMatrix, NormalizedSummary,
};
pub use diagnostics::{effective_sample_size, quantile, split_rhat, ParamDiagnostic, Summary};
pub use impact::{
    estimate_all, estimate_impact, impute_counterfactual, read_impacts_csv, write_impacts_csv,
    ImpactEstimate, NormalizedImpact,
};
pub use sampler::{fit, FittedModel, McmcConfig, Posterior, PosteriorDraw};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netbuild::{InfluenceNetwork, NodeCovariates};
use crate::salience::SalienceMatrix;

/// Saliency-weighted outcomes are multiplied by this before rounding to counts.
pub const OUTCOME_SCALE: f64 = 10.0;
/// Variance of the per-outlet random effect.
pub const EPS_VARIANCE: f64 = 0.1;

/// Binary source indicator over outlets.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentVector {
    z: Vec<f64>,
}

impl TreatmentVector {
    pub fn zeros(n: usize) -> Self {
        Self { z: vec![0.0; n] }
    }

    /// `z_{i+}`: outlet `i` is the source.
    pub fn source(n: usize, i: usize) -> Result<Self> {
        if i >= n {
            return Err(Error::InvalidArgument(format!("source {i} out of range for {n} outlets")));
        }
        let mut z = vec![0.0; n];
        z[i] = 1.0;
        Ok(Self { z })
    }

    /// The same vector with entry `i` zeroed (`z_{i-}`).
    pub fn without(&self, i: usize) -> Self {
        let mut z = self.z.clone();
        if let Some(v) = z.get_mut(i) {
            *v = 0.0;
        }
        Self { z }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.z.iter().all(|&v| v == 0.0)
    }
}

/// Log-damped n-hop exposures; `hops[n - 1][j]` is `s_j^(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureTensor {
    pub hops: Vec<Vec<f64>>,
}

impl ExposureTensor {
    pub fn zeros(n: usize, n_hop: usize) -> Self {
        Self {
            hops: vec![vec![0.0; n]; n_hop],
        }
    }

    pub fn n_hop(&self) -> usize {
        self.hops.len()
    }

    /// `s^(n)` for `n` in `1..=n_hop`.
    pub fn hop(&self, n: usize) -> &[f64] {
        &self.hops[n - 1]
    }
}

pub fn compute_exposures(a: &DMatrix<f64>, z: &[f64], n_hop: usize) -> Result<ExposureTensor> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!("adjacency is {}x{}", n, a.ncols())));
    }
    if z.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "treatment has {} entries for {n} outlets",
            z.len()
        )));
    }
    if n_hop == 0 {
        return Err(Error::InvalidArgument("n_hop must be at least 1".into()));
    }
    let mut reach = z.to_vec();
    let mut hops = Vec::with_capacity(n_hop);
    for _ in 0..n_hop {
        let mut next = vec![0.0; n];
        for (i, &r) in reach.iter().enumerate() {
            if r != 0.0 {
                for (j, t) in next.iter_mut().enumerate() {
                    *t += a[(i, j)] * r;
                }
            }
        }
        hops.push(next.iter().map(|v| v.ln_1p()).collect());
        reach = next;
    }
    Ok(ExposureTensor { hops })
}

/// Regression parameters of the outcome model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmParams {
    pub tau: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: f64,
    pub eps: Vec<f64>,
}

impl GlmmParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.gamma.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(Error::InvalidArgument(format!("gamma {g} outside (0, 1)")));
        }
        let finite = self.tau.is_finite()
            && self.mu.is_finite()
            && self.beta.iter().all(|b| b.is_finite())
            && self.eps.iter().all(|e| e.is_finite());
        if !finite {
            return Err(Error::NonFinite("GLMM parameters".into()));
        }
        Ok(())
    }

    /// `tau * prod_{k<=n} gamma_k` for each hop `n`.
    pub fn hop_coefficients(&self) -> Vec<f64> {
        let mut c = self.tau;
        self.gamma
            .iter()
            .map(|g| {
                c *= g;
                c
            })
            .collect()
    }
}

/// Per-outlet log-rate; the Poisson rate is its exponential.
pub fn linear_predictor(
    z: &TreatmentVector,
    exposures: &ExposureTensor,
    params: &GlmmParams,
    design: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    params.validate()?;
    let n = z.len();
    if exposures.n_hop() != params.gamma.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} exposure hops for {} decay parameters",
            exposures.n_hop(),
            params.gamma.len()
        )));
    }
    if exposures.hops.iter().any(|h| h.len() != n) || params.eps.len() != n || design.nrows() != n {
        return Err(Error::DimensionMismatch(format!("inputs not aligned to {n} outlets")));
    }
    if design.ncols() != params.beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} covariates for {} coefficients",
            design.ncols(),
            params.beta.len()
        )));
    }
    let coef = params.hop_coefficients();
    Ok((0..n)
        .map(|j| {
            let spill: f64 = coef.iter().zip(&exposures.hops).map(|(c, s)| c * s[j]).sum();
            let xb: f64 = (0..design.ncols()).map(|k| design[(j, k)] * params.beta[k]).sum();
            params.tau * z.as_slice()[j] + spill + xb + params.mu + params.eps[j]
        })
        .collect())
}

/// Rounds a saliency-weighted volume to an outcome count.
pub fn scale_outcome(x: f64) -> Result<u64> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::InvalidArgument(format!("outcome {x} is not a nonnegative number")));
    }
    Ok((x * OUTCOME_SCALE).round() as u64)
}

/// Everything the sampler and the impact estimator consume.
///
/// Row `i` of an outcome matrix holds every outlet's outcome in the analysis
/// with `i` as source; the diagonal is the source's own outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalData {
    pub outlets: Vec<String>,
    pub channel: String,
    /// Sum of outcome counts over replicates.
    pub outcome_sum: DMatrix<f64>,
    pub replicates: usize,
    pub prior_rate: DMatrix<f64>,
    pub design: DMatrix<f64>,
    pub design_names: Vec<String>,
    /// Maximum potential impact `kappa_ij` used to normalize impacts.
    pub kappa: DMatrix<f64>,
}

impl CausalData {
    pub fn new(
        channel: &str,
        outcomes: &[DMatrix<f64>],
        network: &InfluenceNetwork,
        covariates: &NodeCovariates,
        kappa: DMatrix<f64>,
    ) -> Result<Self> {
        let n = network.n();
        if outcomes.is_empty() {
            return Err(Error::InvalidArgument("no outcome replicates".into()));
        }
        if n < 2 {
            return Err(Error::InvalidArgument(format!("{n} outlets; at least 2 required")));
        }
        if covariates.outlets != network.outlets {
            return Err(Error::DimensionMismatch("covariates and network list different outlets".into()));
        }
        if kappa.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!("kappa is {:?} for {n} outlets", kappa.shape())));
        }
        let mut sum = DMatrix::zeros(n, n);
        for y in outcomes {
            if y.shape() != (n, n) {
                return Err(Error::DimensionMismatch(format!("outcomes are {:?} for {n} outlets", y.shape())));
            }
            if let Some(v) = y.iter().find(|v| !(v.is_finite() && **v >= 0.0 && v.fract() == 0.0)) {
                return Err(Error::InvalidArgument(format!("outcome {v} is not a nonnegative integer")));
            }
            sum += y;
        }
        let (design, design_names) = covariates.design_matrix();
        Ok(Self {
            outlets: network.outlets.clone(),
            channel: channel.to_string(),
            outcome_sum: sum,
            replicates: outcomes.len(),
            prior_rate: network.prior_rate.clone(),
            design,
            design_names,
            kappa,
        })
    }

    /// Outcomes from one channel's salience: `round(10 kappa_ij)` off the
    /// diagonal and `round(10 self_salience_i)` on it.
    pub fn from_salience(
        outcome: &SalienceMatrix,
        network: &InfluenceNetwork,
        covariates: &NodeCovariates,
    ) -> Result<Self> {
        if outcome.outlets != network.outlets {
            return Err(Error::DimensionMismatch("salience and network list different outlets".into()));
        }
        let n = outcome.n();
        let mut y = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v = if i == j { outcome.self_salience[i] } else { outcome.kappa[(i, j)] };
                y[(i, j)] = scale_outcome(v)? as f64;
            }
        }
        Self::new(outcome.channel.as_str(), &[y], network, covariates, outcome.kappa.clone())
    }

    pub fn n(&self) -> usize {
        self.outlets.len()
    }

    /// Per-replicate mean outcome, the observed arm of the contrast.
    pub fn observed(&self, i: usize, j: usize) -> f64 {
        self.outcome_sum[(i, j)] / self.replicates as f64
    }
}
