//! Exact and rank-based tests used by the analysis suites.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::error::{CdtError, Result};

/// 2×2 contingency table. Rows: high attention yes/no; columns: peak yes/no.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl Table2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Table2x2 { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Odds ratio for Fisher, `None` where no single effect applies.
    pub effect: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(CdtError::shape("correlation", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(CdtError::Contract(format!(
            "correlation needs at least 2 points, got {}",
            x.len()
        )));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CdtError::Undefined("correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn hypergeom_ln_pmf(k: u64, m: u64, big_k: u64, n: u64) -> f64 {
    ln_choose(big_k, k) + ln_choose(m - big_k, n - k) - ln_choose(m, n)
}

/// `P(X = k)` for `X ~ Hypergeometric(M, K, n)`; zero outside the support.
pub fn hypergeom_pmf(k: u64, m: u64, big_k: u64, n: u64) -> f64 {
    if big_k > m || n > m || k > big_k.min(n) || n - k > m - big_k {
        return 0.0;
    }
    hypergeom_ln_pmf(k, m, big_k, n).exp()
}

/// Upper tail `P(X >= k)` of `Hypergeometric(M, K, n)`: draws `n` from `M`
/// items of which `K` are successes.
pub fn hypergeom_sf(k: u64, m: u64, big_k: u64, n: u64) -> Result<f64> {
    if big_k > m || n > m || k > big_k.min(n) {
        return Err(CdtError::Contract(format!(
            "hypergeom_sf needs k <= min(K, n) and K, n <= M; got k={k} M={m} K={big_k} n={n}"
        )));
    }
    let lo = (n + big_k).saturating_sub(m);
    if k <= lo {
        return Ok(1.0);
    }
    let hi = big_k.min(n);
    // Sum small terms first.
    let total: f64 = (k..=hi)
        .rev()
        .map(|i| hypergeom_ln_pmf(i, m, big_k, n).exp())
        .sum();
    Ok(total.min(1.0))
}

/// Two-sided Fisher exact test with Haldane-corrected odds ratio and 95% CI.
///
/// The p-value sums every table with the observed margins whose probability
/// does not exceed the observed one; the +0.5 correction touches only the
/// odds ratio and its interval.
pub fn fisher_exact_haldane(t: Table2x2) -> Result<TestResult> {
    let n = t.total();
    if n == 0 {
        return Err(CdtError::Contract("Fisher test on an all-zero table".into()));
    }
    let row1 = t.a + t.b;
    let col1 = t.a + t.c;
    let lo = (row1 + col1).saturating_sub(n);
    let hi = row1.min(col1);
    let observed = hypergeom_ln_pmf(t.a, n, col1, row1);
    let cutoff = observed + 1e-9;
    let p: f64 = (lo..=hi)
        .map(|x| hypergeom_ln_pmf(x, n, col1, row1))
        .filter(|&lp| lp <= cutoff)
        .map(f64::exp)
        .sum();

    let (a, b, c, d) = (t.a as f64 + 0.5, t.b as f64 + 0.5, t.c as f64 + 0.5, t.d as f64 + 0.5);
    let log_or = (a * d / (b * c)).ln();
    let se = (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt();
    Ok(TestResult {
        statistic: log_or.exp(),
        p_value: p.min(1.0),
        effect: Some(log_or.exp()),
        ci_low: Some((log_or - 1.96 * se).exp()),
        ci_high: Some((log_or + 1.96 * se).exp()),
    })
}

/// Benjamini–Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(pvals: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CdtError::Contract(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvals[i].total_cmp(&pvals[j]));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(pvals[i] * (m as f64 / (rank + 1) as f64));
        out[i] = running.min(1.0);
    }
    Ok(out)
}

/// Kruskal–Wallis H with tie correction; p from the chi-square tail.
pub fn kruskal_wallis(groups: &[&[f64]]) -> Result<TestResult> {
    let groups: Vec<&[f64]> = groups.iter().copied().filter(|g| !g.is_empty()).collect();
    if groups.len() < 2 {
        return Err(CdtError::Contract(
            "Kruskal-Wallis needs at least 2 nonempty groups".into(),
        ));
    }
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let n = pooled.len() as f64;
    let ranks = average_ranks(&pooled);

    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let correction = 1.0 - tie_sum / (n * n * n - n);
    if correction <= 0.0 {
        return Err(CdtError::Contract(
            "Kruskal-Wallis on all-identical values".into(),
        ));
    }

    let mut off = 0;
    let mut h = 0.0;
    for g in &groups {
        let r: f64 = ranks[off..off + g.len()].iter().sum();
        h += r * r / g.len() as f64;
        off += g.len();
    }
    h = (12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0)) / correction;
    let h = h.max(0.0);
    let df = (groups.len() - 1) as f64;
    let chi = ChiSquared::new(df).map_err(|e| CdtError::Contract(e.to_string()))?;
    Ok(TestResult {
        statistic: h,
        p_value: chi.sf(h).clamp(0.0, 1.0),
        effect: None,
        ci_low: None,
        ci_high: None,
    })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Cohen's d, `(mean(x) - mean(y)) / pooled_sd`.
pub fn cohens_d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(CdtError::Contract(format!(
            "Cohen's d needs 2+ values per group, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let pooled = (((nx - 1.0) * vx + (ny - 1.0) * vy) / (nx + ny - 2.0)).sqrt();
    if pooled == 0.0 {
        return Err(CdtError::Contract("Cohen's d with zero pooled SD".into()));
    }
    Ok((mx - my) / pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn choose_u128(n: u64, k: u64) -> u128 {
        let k = k.min(n - k);
        let mut r: u128 = 1;
        for i in 0..k {
            r = r * (n - i) as u128 / (i + 1) as u128;
        }
        r
    }

    /// Enumerates every table with the observed margins in exact integers.
    fn fisher_enumerated(t: Table2x2) -> f64 {
        let n = t.total();
        let (r1, c1) = (t.a + t.b, t.a + t.c);
        let weight = |x: u64| choose_u128(c1, x) * choose_u128(n - c1, r1 - x);
        let lo = (r1 + c1).saturating_sub(n);
        let hi = r1.min(c1);
        let obs = weight(t.a);
        let num: u128 = (lo..=hi).map(weight).filter(|&w| w <= obs).sum();
        num as f64 / choose_u128(n, r1) as f64
    }

    #[test]
    fn pearson_cases() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[1.0; 10]), Err(CdtError::Undefined(_))));
    }

    #[test]
    fn pearson_matches_textbook_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random::<f64>()).collect();
        let n = 100.0;
        let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        assert!((pearson(&x, &y).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn spearman_cases() {
        let x: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v.powi(3)).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        assert!(spearman(&[2.0; 5], &x[..5]).is_err());
    }

    #[test]
    fn spearman_with_ties_matches_sorting_ranks() {
        let x = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0];
        let y = [2.0, 7.0, 1.0, 8.0, 2.0, 8.0, 1.0, 8.0, 2.0, 8.0];
        // Rank by counting: rank = #less + (#equal + 1) / 2.
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let less = v.iter().filter(|&&b| b < a).count() as f64;
                    let eq = v.iter().filter(|&&b| b == a).count() as f64;
                    less + (eq + 1.0) / 2.0
                })
                .collect()
        };
        let expect = pearson(&rank(&x), &rank(&y)).unwrap();
        assert!((spearman(&x, &y).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn fisher_symmetric_table() {
        let r = fisher_exact_haldane(Table2x2::new(10, 10, 10, 10)).unwrap();
        assert!((r.effect.unwrap() - 1.0).abs() < 1e-15);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fisher_perfect_split() {
        let r = fisher_exact_haldane(Table2x2::new(5, 0, 0, 5)).unwrap();
        assert!((r.effect.unwrap() - 121.0).abs() < 1e-9);
        // Margins (5,5,5,5): only the two extreme tables have mass <= observed,
        // each 1/C(10,5).
        assert!((r.p_value - 2.0 / 252.0).abs() < 1e-14);
        assert!(r.ci_low.unwrap() > 1.0 && r.ci_high.unwrap().is_finite());
    }

    #[test]
    fn fisher_rejects_empty_table() {
        assert!(fisher_exact_haldane(Table2x2::new(0, 0, 0, 0)).is_err());
    }

    proptest! {
        #[test]
        fn fisher_matches_enumeration(a in 0u64..16, b in 0u64..16, c in 0u64..16, d in 0u64..16) {
            prop_assume!(a + b + c + d >= 1);
            let t = Table2x2::new(a, b, c, d);
            let got = fisher_exact_haldane(t).unwrap().p_value;
            prop_assert!((got - fisher_enumerated(t)).abs() < 1e-10);
        }

        #[test]
        fn hypergeom_tails_sum_to_one(m in 1u64..400, kf in 0.0f64..1.0, nf in 0.0f64..1.0, xf in 0.0f64..1.0) {
            let big_k = (kf * m as f64) as u64;
            let n = (nf * m as f64) as u64;
            let k = (xf * big_k.min(n) as f64) as u64;
            let sf = hypergeom_sf(k, m, big_k, n).unwrap();
            let cdf: f64 = (0..k).map(|i| hypergeom_pmf(i, m, big_k, n)).sum();
            prop_assert!((sf + cdf - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pearson_affine_invariant(seed in any::<u64>(), s in 0.1f64..10.0, o in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = x.iter().map(|v| v * 0.5 + rng.random::<f64>()).collect();
            let z: Vec<f64> = y.iter().map(|v| v * s + o).collect();
            prop_assert!((pearson(&x, &y).unwrap() - pearson(&x, &z).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn bh_is_conservative_and_monotone(p in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
            let q = bh_adjust(&p).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!(b >= a);
            }
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&i, &j| p[i].total_cmp(&p[j]));
            for w in order.windows(2) {
                prop_assert!(q[w[0]] <= q[w[1]]);
            }
            let mut sorted_q: Vec<f64> = q.clone();
            sorted_q.sort_by(f64::total_cmp);
            let again = bh_adjust(&q).unwrap();
            let mut sorted_again = again.clone();
            sorted_again.sort_by(f64::total_cmp);
            for (a, b) in sorted_q.iter().zip(&sorted_again) {
                prop_assert!(b >= a);
            }
        }
    }

    #[test]
    fn hypergeom_cases() {
        assert_eq!(hypergeom_sf(0, 50, 10, 10).unwrap(), 1.0);
        let p = hypergeom_sf(5, 20, 5, 5).unwrap();
        assert!((p - 1.0 / 15504.0).abs() < 1e-15);
        assert!(hypergeom_sf(6, 20, 5, 5).is_err());
    }

    #[test]
    fn hypergeom_matches_direct_sum() {
        // Direct products in f64, no log-gamma.
        let direct = |k: u64, m: u64, big_k: u64, n: u64| -> f64 {
            let pmf = |x: u64| -> f64 {
                let mut v = 1.0f64;
                for i in 0..x {
                    v *= (big_k - i) as f64 / (x - i) as f64;
                }
                for i in 0..(n - x) {
                    v *= (m - big_k - i) as f64 / (n - x - i) as f64;
                }
                for i in 0..n {
                    v *= (n - i) as f64 / (m - i) as f64;
                }
                v
            };
            (k..=big_k.min(n)).map(pmf).sum()
        };
        let got = hypergeom_sf(28, 2361, 100, 100).unwrap();
        assert!((got - direct(28, 2361, 100, 100)).abs() < 1e-10);
        assert!(got < 1e-9);
        let fold: f64 = 28.0 / (100.0 * 100.0 / 2361.0);
        assert!((fold - 6.61).abs() < 0.005);
    }

    #[test]
    fn bh_cases() {
        assert_eq!(bh_adjust(&[0.2]).unwrap(), vec![0.2]);
        let q = bh_adjust(&[0.01, 0.02, 0.03]).unwrap();
        for v in q {
            assert!((v - 0.03).abs() < 1e-15);
        }
        assert!(bh_adjust(&[1.5]).is_err());
    }

    #[test]
    fn kruskal_wallis_cases() {
        let r = kruskal_wallis(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        assert!((r.statistic - 27.0 / 7.0).abs() < 1e-12);
        let r = kruskal_wallis(&[&[1.0, 2.0], &[1.0, 2.0]]).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!(kruskal_wallis(&[&[1.0, 1.0], &[1.0]]).is_err());
        assert!(kruskal_wallis(&[&[1.0, 2.0]]).is_err());
    }

    #[test]
    fn kruskal_wallis_agrees_with_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g1: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let g2: Vec<f64> = (0..9).map(|_| rng.random::<f64>() + 0.3).collect();
        let g3: Vec<f64> = (0..7).map(|_| rng.random::<f64>() + 0.1).collect();
        let obs = kruskal_wallis(&[&g1, &g2, &g3]).unwrap();
        let mut pool: Vec<f64> = [g1.clone(), g2.clone(), g3.clone()].concat();
        let n_perm = 20_000;
        let mut hits = 0;
        for _ in 0..n_perm {
            for i in (1..pool.len()).rev() {
                let j = rng.random_range(0..=i);
                pool.swap(i, j);
            }
            let h = kruskal_wallis(&[&pool[..8], &pool[8..17], &pool[17..]]).unwrap();
            if h.statistic >= obs.statistic - 1e-12 {
                hits += 1;
            }
        }
        let est = hits as f64 / n_perm as f64;
        let se = (est * (1.0 - est) / n_perm as f64).sqrt();
        // The chi-square tail is an approximation at these sizes.
        assert!((est - obs.p_value).abs() < 4.0 * se + 0.02, "{est} vs {}", obs.p_value);
    }

    #[test]
    fn cohens_d_cases() {
        assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(cohens_d(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..10_000).map(|_| nrm.sample(&mut rng) + 1.0).collect();
        let y: Vec<f64> = (0..10_000).map(|_| nrm.sample(&mut rng)).collect();
        assert!((cohens_d(&x, &y).unwrap() - 1.0).abs() < 0.05);
    }
}
