use serde::{Deserialize, Serialize};

/// Convergence diagnostics for one scalar parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostic {
    pub parameter: String,
    pub rhat: f64,
    pub ess: f64,
}

/// Posterior summary of a scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean,
            sd: var.sqrt(),
            median: quantile(&sorted, 0.5),
            lo95: quantile(&sorted, 0.025),
            hi95: quantile(&sorted, 0.975),
        }
    }

    pub fn covers(&self, x: f64) -> bool {
        self.lo95 <= x && x <= self.hi95
    }
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn split(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let len = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    chains
        .iter()
        .flat_map(|c| [c[..len].to_vec(), c[c.len() - len..].to_vec()])
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Returns `(W, var_plus)` over split chains.
fn variance_components(parts: &[Vec<f64>]) -> (f64, f64) {
    let n = parts[0].len() as f64;
    let w = parts.iter().map(|p| variance(p)).sum::<f64>() / parts.len() as f64;
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let b_over_n = if means.len() > 1 { variance(&means) } else { 0.0 };
    (w, (n - 1.0) / n * w + b_over_n)
}

/// Split potential scale reduction factor. Constant traces give 1 when all
/// chains agree and infinity otherwise.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    let parts = split(chains);
    if parts.is_empty() || parts[0].len() < 2 {
        return f64::NAN;
    }
    let (w, var_plus) = variance_components(&parts);
    if w <= 0.0 {
        return if var_plus <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var_plus / w).sqrt()
}

/// Effective sample size over split chains with Geyer's initial monotone
/// positive sequence truncation.
pub fn effective_sample_size(chains: &[&[f64]]) -> f64 {
    let parts = split(chains);
    if parts.is_empty() || parts[0].len() < 4 {
        return f64::NAN;
    }
    let m = parts.len() as f64;
    let n = parts[0].len();
    let (w, var_plus) = variance_components(&parts);
    if var_plus <= 0.0 || w <= 0.0 {
        return m * n as f64;
    }
    let centered: Vec<Vec<f64>> = parts
        .iter()
        .map(|p| {
            let mu = mean(p);
            p.iter().map(|v| v - mu).collect()
        })
        .collect();
    let autocov = |lag: usize| -> f64 {
        centered
            .iter()
            .map(|c| (0..n - lag).map(|t| c[t] * c[t + lag]).sum::<f64>() / n as f64)
            .sum::<f64>()
            / m
    };
    let c0 = autocov(0);
    let rho = |lag: usize| 1.0 - (w - w * autocov(lag) / c0) / var_plus;
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = if t == 0 { 1.0 + rho(1) } else { rho(t) + rho(t + 1) };
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        tau += 2.0 * pair;
        prev = pair;
        t += 2;
    }
    let ess = m * n as f64 / tau.max(1.0 / (m * n as f64).log10().max(1.0));
    ess.min(m * n as f64 * (m * n as f64).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn iid(seed: u64, n: usize, shift: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x + shift
            })
            .collect()
    }

    fn ar1(seed: u64, n: usize, phi: f64) -> Vec<f64> {
        let e = iid(seed, n, 0.0);
        let mut x = vec![0.0; n];
        for t in 1..n {
            x[t] = phi * x[t - 1] + e[t];
        }
        x
    }

    #[test]
    fn rhat_near_one_for_iid_chains() {
        let a = iid(1, 2000, 0.0);
        let b = iid(2, 2000, 0.0);
        let r = split_rhat(&[&a, &b]);
        assert!((r - 1.0).abs() < 0.01, "{r}");
    }

    #[test]
    fn rhat_flags_disagreeing_chains() {
        let a = iid(1, 1000, 0.0);
        let b = iid(2, 1000, 3.0);
        assert!(split_rhat(&[&a, &b]) > 1.5);
    }

    #[test]
    fn rhat_constant_traces() {
        let a = vec![1.0; 10];
        let b = vec![2.0; 10];
        assert_eq!(split_rhat(&[&a, &a]), 1.0);
        assert_eq!(split_rhat(&[&a, &b]), f64::INFINITY);
    }

    #[test]
    fn ess_iid_close_to_length() {
        let a = iid(3, 4000, 0.0);
        let b = iid(4, 4000, 0.0);
        let ess = effective_sample_size(&[&a, &b]);
        assert!(ess > 6000.0 && ess < 10000.0, "{ess}");
    }

    #[test]
    fn ess_matches_ar1_theory() {
        let phi = 0.9;
        let chains: Vec<Vec<f64>> = (0..4).map(|s| ar1(10 + s, 20000, phi)).collect();
        let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
        let ess = effective_sample_size(&refs);
        let theory = 80000.0 * (1.0 - phi) / (1.0 + phi);
        assert!((ess / theory - 1.0).abs() < 0.25, "{ess} vs {theory}");
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert!((quantile(&v, 0.1) - 1.4).abs() < 1e-12);
        let s = Summary::of(&v);
        assert_eq!(s.mean, 3.0);
        assert!(s.lo95 <= s.median && s.median <= s.hi95);
    }
}
