//! Diagonal-Gaussian factors, their products, and the few-shot overlap
//! objective built on them.
//!
//! A product of univariate Gaussians is itself a Gaussian up to a
//! normalization constant S:
//!
//!   prod_i N(mu_i, 1/tau_i) = S * N(mu, 1/tau)
//!   tau = sum_i tau_i
//!   mu  = (1/tau) * sum_i tau_i mu_i
//!   S   = (2 pi)^((1-n)/2) * (prod_i tau_i^(1/2) / tau^(1/2))
//!         * exp(1/2 tau mu^2 - 1/2 sum_i tau_i mu_i^2)
//!
//! Applied per embedding dimension this yields the fused representation of a
//! support set, and log S is the overlap currency of the whole objective:
//! a query is scored against item m by the log-normalizer of the product of
//! the query factor with m's normalized support product, optionally
//! contrasted against the same overlap with a proper Gaussian prior. All
//! normalizer arithmetic stays in the log domain; S itself is only ever
//! exponentiated inside the quadrature oracle.

use crate::error::{Error, Result};

/// Precision clamp range. Encoders map into this range by construction;
/// hand-built factors are clamped on entry.
pub const PRECISION_MIN: f64 = 1e-6;
pub const PRECISION_MAX: f64 = 1e6;

const LN_2PI: f64 = 1.8378770664093453; // ln(2 pi)

/// One factor phi(z|x): per-dimension mean and precision (inverse variance).
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    precision: Vec<f64>,
}

impl DiagGaussian {
    /// Build a factor, clamping precisions into [PRECISION_MIN, PRECISION_MAX].
    pub fn new(mean: Vec<f64>, precision: Vec<f64>) -> Result<Self> {
        if mean.len() != precision.len() {
            return Err(Error::Gaussian(format!(
                "mean dim {} != precision dim {}",
                mean.len(),
                precision.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Gaussian("non-finite mean".into()));
        }
        if precision.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Gaussian("precision must be finite and positive".into()));
        }
        let precision = precision
            .into_iter()
            .map(|t| t.clamp(PRECISION_MIN, PRECISION_MAX))
            .collect();
        Ok(DiagGaussian { mean, precision })
    }

    pub fn scalar(mean: f64, precision: f64) -> Result<Self> {
        Self::new(vec![mean], vec![precision])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }
}

/// Normalized product of a factor set: the product Gaussian plus the
/// per-dimension log normalizer log S. When a prior was folded in, its own
/// contribution to log S is kept separately so the prior-overlap term of the
/// predictive ratio can be reconstructed.
#[derive(Clone, Debug)]
pub struct FusedRepresentation {
    pub product: DiagGaussian,
    pub log_norm_per_dim: Vec<f64>,
    /// log S' per dimension: the prior's normalizer contribution, present
    /// only when the fusion included a Gaussian prior.
    pub prior_log_norm_per_dim: Option<Vec<f64>>,
}

impl FusedRepresentation {
    pub fn log_norm_total(&self) -> f64 {
        self.log_norm_per_dim.iter().sum()
    }
}

/// Prior handling for the predictive ratio. `Neglect` treats the prior as
/// locally flat (its overlap term drops out entirely); `Gaussian` keeps a
/// proper low-precision Gaussian in the denominator.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorSpec {
    Neglect,
    Gaussian { mean: Vec<f64>, precision: Vec<f64> },
}

impl PriorSpec {
    pub fn neglect() -> Self {
        PriorSpec::Neglect
    }

    /// Zero-mean isotropic Gaussian prior with the default precision 1e-3.
    pub fn gaussian(dim: usize) -> Self {
        PriorSpec::Gaussian { mean: vec![0.0; dim], precision: vec![1e-3; dim] }
    }

    pub fn gaussian_with(mean: Vec<f64>, precision: Vec<f64>) -> Result<Self> {
        if mean.len() != precision.len() {
            return Err(Error::Gaussian("prior mean/precision dim mismatch".into()));
        }
        if precision.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::Gaussian("prior precision must be positive".into()));
        }
        Ok(PriorSpec::Gaussian { mean, precision })
    }

    pub fn is_neglect(&self) -> bool {
        matches!(self, PriorSpec::Neglect)
    }

    fn as_factor(&self, dim: usize) -> Result<Option<DiagGaussian>> {
        match self {
            PriorSpec::Neglect => Ok(None),
            PriorSpec::Gaussian { mean, precision } => {
                if mean.len() != dim {
                    return Err(Error::Gaussian(format!(
                        "prior dim {} != factor dim {}",
                        mean.len(),
                        dim
                    )));
                }
                Ok(Some(DiagGaussian::new(mean.clone(), precision.clone())?))
            }
        }
    }
}

/// Per-query-per-item log scores plus the true item index of each query.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    n_queries: usize,
    n_items: usize,
    values: Vec<f64>,
    targets: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(
        n_queries: usize,
        n_items: usize,
        values: Vec<f64>,
        targets: Vec<usize>,
    ) -> Result<Self> {
        if values.len() != n_queries * n_items {
            return Err(Error::Gaussian("score matrix size mismatch".into()));
        }
        if targets.len() != n_queries {
            return Err(Error::Gaussian("score matrix target count mismatch".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Gaussian("non-finite score".into()));
        }
        if targets.iter().any(|&t| t >= n_items) {
            return Err(Error::Gaussian("target out of range".into()));
        }
        Ok(ScoreMatrix { n_queries, n_items, values, targets })
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn get(&self, query: usize, item: usize) -> f64 {
        self.values[query * self.n_items + item]
    }

    pub fn row(&self, query: usize) -> &[f64] {
        &self.values[query * self.n_items..(query + 1) * self.n_items]
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Softmax of one row, max-shifted.
    pub fn softmax_row(&self, query: usize) -> Vec<f64> {
        let row = self.row(query);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn argmax_row(&self, query: usize) -> usize {
        let row = self.row(query);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    /// Fraction of queries whose argmax matches the target.
    pub fn accuracy(&self) -> f64 {
        let hits = (0..self.n_queries)
            .filter(|&n| self.argmax_row(n) == self.targets[n])
            .count();
        hits as f64 / self.n_queries as f64
    }
}

/// Per-dimension product of `n` univariate factors: (mu, tau, log S).
fn product_1d(factors: impl Iterator<Item = (f64, f64)>) -> (f64, f64, f64) {
    let mut tau = 0.0;
    let mut tau_mu = 0.0;
    let mut sum_ln_tau = 0.0;
    let mut sum_tau_mu2 = 0.0;
    let mut n = 0usize;
    for (m, t) in factors {
        tau += t;
        tau_mu += t * m;
        sum_ln_tau += t.ln();
        sum_tau_mu2 += t * m * m;
        n += 1;
    }
    let mu = tau_mu / tau;
    let log_s = 0.5 * (1.0 - n as f64) * LN_2PI + 0.5 * (sum_ln_tau - tau.ln())
        + 0.5 * (tau * mu * mu - sum_tau_mu2);
    (mu, tau, log_s)
}

/// Exact analytic product of diagonal-Gaussian factors.
///
/// The product precision is the plain floating-point sum of the input
/// precisions (not re-clamped), and log S of a single factor is exactly 0.
pub fn gaussian_product(factors: &[DiagGaussian]) -> Result<FusedRepresentation> {
    if factors.is_empty() {
        return Err(Error::Gaussian("product of zero factors".into()));
    }
    let dim = factors[0].dim();
    if factors.iter().any(|f| f.dim() != dim) {
        return Err(Error::Gaussian("factor dimension mismatch".into()));
    }
    let mut mean = vec![0.0; dim];
    let mut precision = vec![0.0; dim];
    let mut log_norm = vec![0.0; dim];
    for d in 0..dim {
        let (mu, tau, log_s) =
            product_1d(factors.iter().map(move |f| (f.mean[d], f.precision[d])));
        mean[d] = mu;
        precision[d] = tau;
        log_norm[d] = if factors.len() == 1 { 0.0 } else { log_s };
    }
    Ok(FusedRepresentation {
        product: DiagGaussian { mean, precision },
        log_norm_per_dim: log_norm,
        prior_log_norm_per_dim: None,
    })
}

/// Fuse the views of one support item into its unified representation.
///
/// With a Gaussian prior the prior joins the product (so the fused precision
/// includes the prior precision) and its own normalizer contribution
/// log S' = log S(views+prior) - log S(views) is recorded for the
/// predictive-ratio denominator.
pub fn fuse_support(views: &[DiagGaussian], prior: &PriorSpec) -> Result<FusedRepresentation> {
    if views.is_empty() {
        return Err(Error::Gaussian("support set with zero views".into()));
    }
    match prior.as_factor(views[0].dim())? {
        None => gaussian_product(views),
        Some(prior_factor) => {
            let views_only = gaussian_product(views)?;
            let mut all: Vec<DiagGaussian> = views.to_vec();
            all.push(prior_factor);
            let with_prior = gaussian_product(&all)?;
            let prior_contrib: Vec<f64> = with_prior
                .log_norm_per_dim
                .iter()
                .zip(views_only.log_norm_per_dim.iter())
                .map(|(a, b)| a - b)
                .collect();
            Ok(FusedRepresentation {
                product: with_prior.product,
                log_norm_per_dim: with_prior.log_norm_per_dim,
                prior_log_norm_per_dim: Some(prior_contrib),
            })
        }
    }
}

/// Two-factor log-normalizer for one dimension.
fn pair_log_norm(a_mean: f64, a_tau: f64, b_mean: f64, b_tau: f64) -> f64 {
    let (_, _, log_s) = product_1d([(a_mean, a_tau), (b_mean, b_tau)].into_iter());
    log_s
}

/// Log predictive score of one query against one fused support item:
/// sum over dimensions of log S* - log S', where S* normalizes the product
/// of the query factor with the item's normalized view product and S' does
/// the same for the prior. Neglect mode sets log S' = 0.
pub fn query_log_score(
    query: &DiagGaussian,
    support: &FusedRepresentation,
    prior: &PriorSpec,
) -> Result<f64> {
    let dim = query.dim();
    if support.product.dim() != dim {
        return Err(Error::Gaussian(format!(
            "query dim {} != support dim {}",
            dim,
            support.product.dim()
        )));
    }
    match prior {
        PriorSpec::Neglect => {
            if support.prior_log_norm_per_dim.is_some() {
                return Err(Error::Gaussian(
                    "support was fused with a prior but scoring is prior-neglecting".into(),
                ));
            }
            let mut score = 0.0;
            for d in 0..dim {
                score += pair_log_norm(
                    query.mean[d],
                    query.precision[d],
                    support.product.mean[d],
                    support.product.precision[d],
                );
            }
            Ok(score)
        }
        PriorSpec::Gaussian { mean: pm, precision: pt } => {
            let prior_log_norm = support.prior_log_norm_per_dim.as_ref().ok_or_else(|| {
                Error::Gaussian("support was fused without the prior the scorer expects".into())
            })?;
            if pm.len() != dim {
                return Err(Error::Gaussian("prior dim mismatch".into()));
            }
            // The stored product includes the prior; peel it off to recover
            // the views-only product the overlap integral is defined on.
            let mut score = 0.0;
            for d in 0..dim {
                let tau_views = support.product.precision[d] - pt[d];
                if tau_views <= 0.0 {
                    return Err(Error::Gaussian(
                        "fused precision not larger than prior precision".into(),
                    ));
                }
                let mu_views = (support.product.precision[d] * support.product.mean[d]
                    - pt[d] * pm[d])
                    / tau_views;
                let log_s_star =
                    pair_log_norm(query.mean[d], query.precision[d], mu_views, tau_views);
                score += log_s_star - prior_log_norm[d];
            }
            Ok(score)
        }
    }
}

/// Score every query against every support item. Support fusion is computed
/// once per item and reused across queries.
pub fn episode_scores(
    support_sets: &[Vec<DiagGaussian>],
    queries: &[DiagGaussian],
    targets: &[usize],
    prior: &PriorSpec,
) -> Result<ScoreMatrix> {
    if support_sets.is_empty() || queries.is_empty() {
        return Err(Error::Gaussian("episode needs at least one item and one query".into()));
    }
    let fused: Vec<FusedRepresentation> = support_sets
        .iter()
        .map(|views| fuse_support(views, prior))
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(queries.len() * fused.len());
    for q in queries {
        for f in &fused {
            values.push(query_log_score(q, f, prior)?);
        }
    }
    ScoreMatrix::new(queries.len(), fused.len(), values, targets.to_vec())
}

/// Mean negative log likelihood of the correct item under the row softmax,
/// computed with log-sum-exp stabilization.
pub fn poem_nll(scores: &ScoreMatrix) -> f64 {
    let mut total = 0.0;
    for n in 0..scores.n_queries() {
        let row = scores.row(n);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[scores.targets()[n]];
    }
    total / scores.n_queries() as f64
}

// ---------------------------------------------------------------------------
// Quadrature oracle
// ---------------------------------------------------------------------------

/// Trapezoid grid for the 1-D quadrature oracle.
#[derive(Clone, Copy, Debug)]
pub struct QuadratureSpec {
    /// Number of grid points. Default 20_001.
    pub points: usize,
    /// Half-width of the grid in standard deviations of each factor. The
    /// grid covers [min_i(mu_i - span*sigma_i), max_i(mu_i + span*sigma_i)].
    pub sigma_span: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { points: 20_001, sigma_span: 10.0 }
    }
}

fn log_normal_density(z: f64, mean: f64, tau: f64) -> f64 {
    0.5 * (tau.ln() - LN_2PI) - 0.5 * tau * (z - mean) * (z - mean)
}

/// log integral of a product of 1-D Gaussian densities by trapezoid rule,
/// evaluated in the log domain (log-sum-exp over grid points), with a
/// half-resolution Richardson estimate guarding against a too-coarse grid.
pub fn log_integral_product_1d(factors: &[(f64, f64)], spec: &QuadratureSpec) -> Result<f64> {
    if factors.is_empty() {
        return Err(Error::Gaussian("quadrature over zero factors".into()));
    }
    if spec.points < 5 {
        return Err(Error::Gaussian("quadrature grid needs at least 5 points".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(m, t) in factors {
        let sigma = 1.0 / t.sqrt();
        lo = lo.min(m - spec.sigma_span * sigma);
        hi = hi.max(m + spec.sigma_span * sigma);
    }
    let n = spec.points;
    let h = (hi - lo) / (n - 1) as f64;

    // log of trapezoid sum over points with stride `step`.
    let log_trapz = |step: usize| -> f64 {
        let idx: Vec<usize> = (0..n).step_by(step).collect();
        let last = *idx.last().unwrap();
        let mut terms: Vec<f64> = Vec::with_capacity(idx.len());
        for &i in &idx {
            let z = lo + h * i as f64;
            let mut lf: f64 = factors.iter().map(|&(m, t)| log_normal_density(z, m, t)).sum();
            if i == 0 || i == last {
                lf += (0.5f64).ln();
            }
            terms.push(lf);
        }
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|v| (v - mx).exp()).sum();
        mx + sum.ln() + (h * step as f64).ln()
    };

    let full = log_trapz(1);
    let half = log_trapz(2);
    // For trapezoid, |I_h - I| ~ |I_h - I_2h| / 3; in the log domain the
    // difference of logs is the relative error.
    let est = (full - half).abs() / 3.0;
    if est > 1e-8 {
        return Err(Error::QuadratureTooCoarse { est });
    }
    Ok(full)
}

/// Numeric-integration reference for the predictive score on 1-D episodes:
/// log lambda - log lambda' per (query, item), where
/// lambda  = integral of phi(z|query) * prod_v phi(z|x_v) dz and
/// lambda' = integral of p(z) * prod_v phi(z|x_v) dz. A neglected prior is
/// a flat density of one, so lambda' reduces to the integral of the bare
/// view product.
pub fn brute_force_predictive(
    support_sets: &[Vec<DiagGaussian>],
    queries: &[DiagGaussian],
    targets: &[usize],
    prior: &PriorSpec,
    spec: &QuadratureSpec,
) -> Result<ScoreMatrix> {
    for s in support_sets.iter().flat_map(|s| s.iter()).chain(queries.iter()) {
        if s.dim() != 1 {
            return Err(Error::Gaussian("brute_force_predictive handles D=1 only".into()));
        }
    }
    let prior_factor = prior.as_factor(1)?;

    // lambda' per item (independent of the query).
    let mut log_lambda_prime = vec![0.0; support_sets.len()];
    for (m, views) in support_sets.iter().enumerate() {
        let mut factors: Vec<(f64, f64)> =
            views.iter().map(|v| (v.mean[0], v.precision[0])).collect();
        if let Some(pf) = &prior_factor {
            factors.push((pf.mean[0], pf.precision[0]));
        }
        if factors.len() == 1 {
            // A single normalized density integrates to exactly one.
            log_lambda_prime[m] = 0.0;
        } else {
            log_lambda_prime[m] = log_integral_product_1d(&factors, spec)?;
        }
    }

    let mut values = Vec::with_capacity(queries.len() * support_sets.len());
    for q in queries {
        for (m, views) in support_sets.iter().enumerate() {
            let mut factors: Vec<(f64, f64)> =
                views.iter().map(|v| (v.mean[0], v.precision[0])).collect();
            factors.push((q.mean[0], q.precision[0]));
            let log_lambda = log_integral_product_1d(&factors, spec)?;
            values.push(log_lambda - log_lambda_prime[m]);
        }
    }
    ScoreMatrix::new(queries.len(), support_sets.len(), values, targets.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from, uniform};
    use rand::Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn single_factor_product_is_itself() {
        let f = DiagGaussian::scalar(0.3, 2.0).unwrap();
        let fused = gaussian_product(&[f.clone()]).unwrap();
        assert_eq!(fused.product, f);
        assert_eq!(fused.log_norm_per_dim, vec![0.0]);
    }

    #[test]
    fn standard_normal_squared_matches_quadrature() {
        let f = DiagGaussian::scalar(0.0, 1.0).unwrap();
        let fused = gaussian_product(&[f.clone(), f.clone()]).unwrap();
        assert_eq!(fused.product.precision(), &[2.0]);
        assert_eq!(fused.product.mean(), &[0.0]);
        // S = 1 / (2 sqrt(pi))
        let expect = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
        assert!(rel_err(fused.log_norm_total().exp(), expect) < 1e-12);
        let quad = log_integral_product_1d(&[(0.0, 1.0), (0.0, 1.0)], &QuadratureSpec::default())
            .unwrap();
        assert!(rel_err(fused.log_norm_total(), quad) < 1e-9);
    }

    #[test]
    fn two_factor_product_against_quadrature() {
        let a = DiagGaussian::scalar(1.0, 4.0).unwrap();
        let b = DiagGaussian::scalar(-1.0, 1.0).unwrap();
        let fused = gaussian_product(&[a, b]).unwrap();
        assert!((fused.product.precision()[0] - 5.0).abs() < 1e-15);
        assert!((fused.product.mean()[0] - 0.6).abs() < 1e-15);
        let quad = log_integral_product_1d(&[(1.0, 4.0), (-1.0, 1.0)], &QuadratureSpec::default())
            .unwrap();
        assert!(rel_err(fused.log_norm_total(), quad) < 1e-9);
        // Cross-check against the convolution identity: the integral of the
        // density product equals N(mu_a - mu_b; 0, 1/tau_a + 1/tau_b).
        let s = fused.log_norm_total().exp();
        assert!(rel_err(s, 0.07204168934430732) < 1e-9, "S = {s}");
    }

    #[test]
    fn fuse_identical_views_doubles_precision() {
        let v = DiagGaussian::new(vec![0.5, -1.0], vec![2.0, 3.0]).unwrap();
        let fused = fuse_support(&[v.clone(), v.clone()], &PriorSpec::neglect()).unwrap();
        assert_eq!(fused.product.precision(), &[4.0, 6.0]);
        assert_eq!(fused.product.mean(), v.mean());
    }

    #[test]
    fn fuse_equal_precision_views_averages_means() {
        let a = DiagGaussian::scalar(0.0, 1.0).unwrap();
        let b = DiagGaussian::scalar(2.0, 1.0).unwrap();
        let fused = fuse_support(&[a, b], &PriorSpec::neglect()).unwrap();
        assert!((fused.product.mean()[0] - 1.0).abs() < 1e-15);
        assert!((fused.product.precision()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn fuse_with_gaussian_prior_shifts_toward_prior_mean() {
        let a = DiagGaussian::scalar(0.0, 1.0).unwrap();
        let b = DiagGaussian::scalar(2.0, 1.0).unwrap();
        let prior = PriorSpec::gaussian_with(vec![0.0], vec![1e-3]).unwrap();
        let fused = fuse_support(&[a, b], &prior).unwrap();
        // Hand-applied product rules: tau = 2.001, mu = 2/2.001.
        assert!((fused.product.precision()[0] - 2.001).abs() < 1e-12);
        assert!((fused.product.mean()[0] - 2.0 / 2.001).abs() < 1e-12);
        assert!(fused.prior_log_norm_per_dim.is_some());
    }

    #[test]
    fn query_score_standard_normal_pair() {
        let v = DiagGaussian::scalar(0.0, 1.0).unwrap();
        let fused = fuse_support(&[v.clone()], &PriorSpec::neglect()).unwrap();
        let score = query_log_score(&v, &fused, &PriorSpec::neglect()).unwrap();
        let expect = (1.0 / (2.0 * std::f64::consts::PI.sqrt())).ln();
        assert!((score - expect).abs() < 1e-12, "score {score} expect {expect}");
    }

    #[test]
    fn query_score_increases_with_aligned_precision() {
        // Raising the query precision on a dimension where the means agree
        // raises the overlap score, monotonically over a [0.1, 10] grid.
        let support =
            fuse_support(&[DiagGaussian::scalar(0.7, 1.0).unwrap()], &PriorSpec::neglect())
                .unwrap();
        let mut last = f64::NEG_INFINITY;
        for i in 0..20 {
            let tau = 0.1 * (10.0f64 / 0.1).powf(i as f64 / 19.0);
            let q = DiagGaussian::scalar(0.7, tau).unwrap();
            let score = query_log_score(&q, &support, &PriorSpec::neglect()).unwrap();
            assert!(score > last, "not strictly increasing at tau={tau}");
            last = score;
        }
    }

    #[test]
    fn query_score_decays_with_distance() {
        let support =
            fuse_support(&[DiagGaussian::scalar(0.0, 1.0).unwrap()], &PriorSpec::neglect())
                .unwrap();
        let near = query_log_score(
            &DiagGaussian::scalar(0.0, 1.0).unwrap(),
            &support,
            &PriorSpec::neglect(),
        )
        .unwrap();
        let far = query_log_score(
            &DiagGaussian::scalar(50.0, 1.0).unwrap(),
            &support,
            &PriorSpec::neglect(),
        )
        .unwrap();
        let farther = query_log_score(
            &DiagGaussian::scalar(500.0, 1.0).unwrap(),
            &support,
            &PriorSpec::neglect(),
        )
        .unwrap();
        assert!(far < near - 100.0);
        assert!(farther < far);
    }

    #[test]
    fn single_item_episode_softmax_is_one() {
        let views = vec![vec![DiagGaussian::scalar(0.1, 1.0).unwrap()]];
        let queries = vec![
            DiagGaussian::scalar(0.0, 1.0).unwrap(),
            DiagGaussian::scalar(3.0, 2.0).unwrap(),
        ];
        let scores = episode_scores(&views, &queries, &[0, 0], &PriorSpec::neglect()).unwrap();
        for n in 0..2 {
            assert_eq!(scores.softmax_row(n), vec![1.0]);
        }
        assert_eq!(poem_nll(&scores), 0.0);
    }

    fn random_episode_1d(
        seed: u64,
        n_items: usize,
        max_views: usize,
    ) -> (Vec<Vec<DiagGaussian>>, Vec<DiagGaussian>, Vec<usize>) {
        let mut rng = rng_from(seed);
        let mut supports = Vec::new();
        for _ in 0..n_items {
            let v = rng.gen_range(1..=max_views);
            supports.push(
                (0..v)
                    .map(|_| {
                        DiagGaussian::scalar(
                            uniform(&mut rng, -3.0, 3.0),
                            uniform(&mut rng, 0.1, 10.0),
                        )
                        .unwrap()
                    })
                    .collect(),
            );
        }
        let mut queries = Vec::new();
        let mut targets = Vec::new();
        for m in 0..n_items {
            queries.push(
                DiagGaussian::scalar(uniform(&mut rng, -3.0, 3.0), uniform(&mut rng, 0.1, 10.0))
                    .unwrap(),
            );
            targets.push(m);
        }
        (supports, queries, targets)
    }

    #[test]
    fn episode_scores_match_quadrature_both_modes() {
        let spec = QuadratureSpec::default();
        for seed in 0..20u64 {
            let (supports, queries, targets) = random_episode_1d(seed, 3, 3);
            for prior in [PriorSpec::neglect(), PriorSpec::gaussian(1)] {
                let analytic = episode_scores(&supports, &queries, &targets, &prior).unwrap();
                let brute =
                    brute_force_predictive(&supports, &queries, &targets, &prior, &spec).unwrap();
                for n in 0..analytic.n_queries() {
                    for m in 0..analytic.n_items() {
                        let a = analytic.get(n, m);
                        let b = brute.get(n, m);
                        assert!(
                            rel_err(a, b) < 1e-5,
                            "seed {seed} prior {prior:?} ({n},{m}): {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn view_permutation_leaves_scores_unchanged() {
        let (mut supports, queries, targets) = random_episode_1d(99, 3, 3);
        let before = episode_scores(&supports, &queries, &targets, &PriorSpec::neglect()).unwrap();
        for s in supports.iter_mut() {
            s.reverse();
        }
        let after = episode_scores(&supports, &queries, &targets, &PriorSpec::neglect()).unwrap();
        for n in 0..before.n_queries() {
            for m in 0..before.n_items() {
                assert!((before.get(n, m) - after.get(n, m)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn widening_grid_changes_little() {
        let factors = [(0.3, 2.0), (-0.5, 1.5), (1.0, 0.4)];
        let a =
            log_integral_product_1d(&factors, &QuadratureSpec { points: 40_001, sigma_span: 10.0 })
                .unwrap();
        let b =
            log_integral_product_1d(&factors, &QuadratureSpec { points: 40_001, sigma_span: 14.0 })
                .unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let err = log_integral_product_1d(
            &[(0.0, 1000.0), (0.01, 900.0)],
            &QuadratureSpec { points: 41, sigma_span: 10.0 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::QuadratureTooCoarse { .. }));
    }

    #[test]
    fn nll_of_uniform_scores_is_ln_m() {
        let scores = ScoreMatrix::new(2, 4, vec![0.7; 8], vec![1, 3]).unwrap();
        assert!((poem_nll(&scores) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_vanishes_when_correct_score_dominates() {
        let scores = ScoreMatrix::new(1, 3, vec![200.0, 0.0, -3.0], vec![0]).unwrap();
        assert!(poem_nll(&scores) < 1e-12);
        assert!(poem_nll(&scores) >= 0.0);
    }

    #[test]
    fn nll_matches_independent_cross_entropy() {
        // Second implementation: plain softmax cross entropy in linear space.
        let mut rng = rng_from(5);
        let values: Vec<f64> = (0..6).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let targets = vec![2usize, 0];
        let scores = ScoreMatrix::new(2, 3, values.clone(), targets.clone()).unwrap();

        let mut expect = 0.0;
        for n in 0..2 {
            let row = &values[n * 3..(n + 1) * 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[targets[n]].exp() / z).ln();
        }
        expect /= 2.0;
        assert!((poem_nll(&scores) - expect).abs() < 1e-12);
    }

    #[test]
    fn precision_is_clamped_on_construction() {
        let g = DiagGaussian::scalar(0.0, 1e9).unwrap();
        assert_eq!(g.precision(), &[PRECISION_MAX]);
        let g = DiagGaussian::scalar(0.0, 1e-9).unwrap();
        assert_eq!(g.precision(), &[PRECISION_MIN]);
        assert!(DiagGaussian::scalar(f64::NAN, 1.0).is_err());
        assert!(DiagGaussian::scalar(0.0, -1.0).is_err());
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        assert!(gaussian_product(&[]).is_err());
        let a = DiagGaussian::scalar(0.0, 1.0).unwrap();
        let b = DiagGaussian::new(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert!(gaussian_product(&[a.clone(), b.clone()]).is_err());
        let fused = fuse_support(&[b.clone()], &PriorSpec::neglect()).unwrap();
        assert!(query_log_score(&a, &fused, &PriorSpec::neglect()).is_err());
    }
}
