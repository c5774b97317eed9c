//! Pearson and Spearman correlation, Shapiro–Wilk normality test.

use mlgl_core::metrics::average_ranks;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::Result;

fn undefined<T>(msg: impl Into<String>) -> Result<T> {
    Err(mlgl_core::Error::Undefined(msg.into()).into())
}

fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(mlgl_core::Error::Input(msg.into()).into())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return input(format!("pearson: {} vs {} samples", x.len(), y.len()));
    }
    if x.len() < 2 {
        return input("pearson needs at least two samples");
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return undefined("correlation with a constant input");
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Significance level used for the `significant` flag.
pub const ALPHA: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
    pub significant: bool,
}

impl SpearmanResult {
    fn new(rho: f64, p_value: f64) -> Self {
        SpearmanResult {
            rho,
            p_value,
            significant: p_value < ALPHA,
        }
    }
}

/// Rank correlation with a two-sided t-approximation p-value,
/// `t = ρ·√((n−2)/(1−ρ²))` on `n − 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult> {
    if x.len() < 4 {
        return input("spearman needs at least four samples");
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))?;
    let df = (x.len() - 2) as f64;
    let p = if rho.abs() >= 1.0 - 1e-12 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(SpearmanResult::new(rho, p))
}

/// Largest sample accepted by [`spearman_exact`].
pub const EXACT_MAX_N: usize = 12;

/// Spearman's rho with an exact two-sided permutation p-value: the share of
/// all `n!` pairings whose |ρ| reaches the observed |ρ|.
pub fn spearman_exact(x: &[f64], y: &[f64]) -> Result<SpearmanResult> {
    let n = x.len();
    if !(4..=EXACT_MAX_N).contains(&n) {
        return input(format!("exact spearman supports 4..={EXACT_MAX_N} samples, got {n}"));
    }
    let rx = average_ranks(x);
    let mut ry = average_ranks(y);
    let rho = pearson(&rx, &ry)?;
    let mean = (n as f64 + 1.0) / 2.0;
    let cx: Vec<f64> = rx.iter().map(|r| r - mean).collect();
    for r in ry.iter_mut() {
        *r -= mean;
    }
    // ρ is proportional to Σ cx_i·cy_i; permutations keep both norms.
    let observed: f64 = cx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let tol = 1e-9 * (1.0 + observed.abs());
    let mut dot = observed;
    let mut hits: u64 = 1;
    let mut total: u64 = 1;
    // Heap's algorithm, updating the dot product per swap.
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            let j = if i % 2 == 0 { 0 } else { c[i] };
            dot += (cx[j] - cx[i]) * (ry[i] - ry[j]);
            ry.swap(i, j);
            total += 1;
            if dot.abs() >= observed.abs() - tol {
                hits += 1;
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(SpearmanResult::new(rho, hits as f64 / total as f64))
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p_value: f64,
}

/// Shapiro–Wilk W and p-value by Royston's AS R94 approximation, for
/// `3 ≤ n ≤ 5000`.
pub fn shapiro_wilk(sample: &[f64]) -> Result<ShapiroWilk> {
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return input(format!("Shapiro-Wilk needs 3..=5000 samples, got {n}"));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return input("Shapiro-Wilk sample contains non-finite values");
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    if x[n - 1] - x[0] < 1e-19 * x[0].abs().max(1.0) {
        return undefined("Shapiro-Wilk of an all-equal sample");
    }
    let nf = n as f64;
    let half = n / 2;
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let m: Vec<f64> = (1..=half)
            .map(|i| normal.inverse_cdf((i as f64 - 0.375) / (nf + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / nf.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            (2, fac)
        } else {
            (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
        };
        a[0] = a1;
        for i in first..half {
            a[i] = -m[i] / fac;
        }
    }

    let mean = x.iter().sum::<f64>() / nf;
    let ssq: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let b: f64 = (0..half).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (b * b / ssq).min(1.0);

    if n == 3 {
        let p = 6.0 / std::f64::consts::PI * (w.sqrt().asin() - std::f64::consts::FRAC_PI_3);
        return Ok(ShapiroWilk { w, p_value: p.max(0.0) });
    }
    let w1 = (1.0 - w).ln();
    let (y, m, s) = if n <= 11 {
        let gamma = poly(&G, nf);
        if w1 >= gamma {
            return Ok(ShapiroWilk { w, p_value: 1e-99 });
        }
        (-(gamma - w1).ln(), poly(&C3, nf), poly(&C4, nf).exp())
    } else {
        let ln_n = nf.ln();
        (w1, poly(&C5, ln_n), poly(&C6, ln_n).exp())
    };
    let normal = Normal::new(m, s).expect("positive scale");
    Ok(ShapiroWilk { w, p_value: normal.sf(y) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlgl_core::SeededRng;

    fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for i in 0..x.len() {
            sx += x[i];
            sy += y[i];
        }
        let (mx, my) = (sx / n, sy / n);
        let (mut c, mut vx, mut vy) = (0.0, 0.0, 0.0);
        for i in 0..x.len() {
            c += (x[i] - mx) * (y[i] - my);
            vx += (x[i] - mx) * (x[i] - mx);
            vy += (y[i] - my) * (y[i] - my);
        }
        c / (vx * vy).sqrt()
    }

    /// Ranks by counting: 1 + #smaller + (#equal − 1)/2.
    fn oracle_ranks(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let less = x.iter().filter(|&&u| u < v).count() as f64;
                let eq = x.iter().filter(|&&u| u == v).count() as f64;
                1.0 + less + (eq - 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn pearson_basics() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[3.0; 4]).is_err());
        let mut rng = SeededRng::new(3);
        for _ in 0..50 {
            let a: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
            assert!((pearson(&a, &b).unwrap() - oracle_pearson(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn spearman_monotone_and_ties() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = [2.0, 4.0, 8.0, 16.0, 32.0];
        let down = [5.0, 3.0, 0.0, -1.0, -9.0];
        assert!((spearman(&x, &up).unwrap().rho - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &down).unwrap().rho + 1.0).abs() < 1e-12);
        let mut rng = SeededRng::new(9);
        for _ in 0..50 {
            let a: Vec<f64> = (0..25).map(|_| rng.below(5) as f64).collect();
            let b: Vec<f64> = (0..25).map(|_| rng.below(7) as f64).collect();
            let expected = oracle_pearson(&oracle_ranks(&a), &oracle_ranks(&b));
            assert!((spearman(&a, &b).unwrap().rho - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn spearman_p_matches_reference() {
        let x: Vec<f64> = (1..=12).map(f64::from).collect();
        let cases: [([f64; 12], f64, f64); 2] = [
            ([2., 1., 4., 3., 7., 5., 6., 12., 8., 11., 9., 10.], 0.8741258741258742, 0.00020071307332423193),
            ([5., 9., 1., 12., 3., 7., 2., 11., 4., 10., 6., 8.], 0.16783216783216784, 0.602099427786538),
        ];
        for (y, rho, p) in cases {
            let r = spearman(&x, &y).unwrap();
            assert!((r.rho - rho).abs() < 1e-12);
            assert!((r.p_value - p).abs() < 1e-8 * (1.0 + p), "{} vs {p}", r.p_value);
        }
    }

    #[test]
    fn exact_permutation_p() {
        // Perfect ranking of 5: only the identity and its reverse reach |ρ| = 1.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = spearman_exact(&x, &x).unwrap();
        assert!((r.p_value - 2.0 / 120.0).abs() < 1e-15);
        // Brute-force check on a random pair of size 7.
        let mut rng = SeededRng::new(1);
        let a: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
        let got = spearman_exact(&a, &b).unwrap();
        let obs = got.rho.abs();
        let mut perm: Vec<usize> = (0..7).collect();
        let (mut hits, mut total) = (0, 0);
        loop {
            let bp: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
            total += 1;
            if spearman(&a, &bp).unwrap().rho.abs() >= obs - 1e-12 {
                hits += 1;
            }
            // next lexicographic permutation
            let Some(i) = (0..6).rev().find(|&i| perm[i] < perm[i + 1]) else { break };
            let j = (i + 1..7).rev().find(|&j| perm[j] > perm[i]).unwrap();
            perm.swap(i, j);
            perm[i + 1..].reverse();
        }
        assert_eq!(total, 5040);
        assert!((got.p_value - hits as f64 / 5040.0).abs() < 1e-15);
    }

    #[test]
    fn shapiro_matches_reference_values() {
        // Reference (W, p) from an independent AS R94 implementation.
        let cases: [(&[f64], f64, f64); 4] = [
            (&[1.0, 2.0, 4.0], 0.9642857142857142, 0.6368868450289689),
            (&[148.0, 154.0, 158.0, 160.0, 161.0, 162.0, 166.0, 170.0, 182.0, 195.0, 236.0], 0.7888146948631716, 0.006703814061898823),
            (&[2.1, 3.4, 1.9, 5.6, 4.4, 3.3, 2.8, 3.9, 4.1, 3.0, 2.5, 3.6, 4.8, 2.2, 3.1, 3.7, 4.0, 2.9, 3.5, 3.2], 0.9778087920178968, 0.9027758989883802),
            (&[-1.0, -0.5, 0.0, 0.5, 1.0], 0.986762155211559, 0.9671739349728582),
        ];
        for (x, w, p) in cases {
            let r = shapiro_wilk(x).unwrap();
            assert!((r.w - w).abs() < 1e-3, "W {} vs {w}", r.w);
            assert!((r.p_value - p).abs() < 1e-3, "p {} vs {p}", r.p_value);
        }
    }

    #[test]
    fn shapiro_outlier_and_invariance() {
        let mut rng = SeededRng::new(4);
        let base: Vec<f64> = (0..60).map(|_| rng.normal()).collect();
        let ps: Vec<f64> = [3.0, 6.0, 12.0]
            .iter()
            .map(|&mag| {
                let mut x = base.clone();
                x[0] = mag;
                shapiro_wilk(&x).unwrap().p_value
            })
            .collect();
        assert!(ps[0] > ps[1] && ps[1] > ps[2], "{ps:?}");
        assert!(ps[2] < 1e-3);
        let w = shapiro_wilk(&base).unwrap().w;
        let moved: Vec<f64> = base.iter().map(|v| 3.5 * v - 2.0).collect();
        assert!((shapiro_wilk(&moved).unwrap().w - w).abs() < 1e-12);
        assert!(shapiro_wilk(&[1.0, 1.0, 1.0]).is_err());
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (4usize..30).prop_flat_map(|n| {
                (
                    proptest::collection::vec(-50i32..50, n),
                    proptest::collection::vec(-1e3f64..1e3, n),
                )
                    .prop_map(|(x, y)| (x.into_iter().map(f64::from).collect(), y))
            })
        }

        proptest! {
            #[test]
            fn spearman_ignores_increasing_transforms((x, y) in pairs()) {
                prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
                let base = spearman(&x, &y).unwrap();
                let tx: Vec<f64> = x.iter().map(|v| (v / 10.0).exp()).collect();
                let ty: Vec<f64> = y.iter().map(|v| v * v * v + 3.0 * v).collect();
                let moved = spearman(&tx, &ty).unwrap();
                prop_assert!((base.rho - moved.rho).abs() < 1e-12);
            }

            #[test]
            fn correlations_are_bounded_and_symmetric((x, y) in pairs()) {
                prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
                let r = pearson(&x, &y).unwrap();
                prop_assert!(r.abs() <= 1.0 + 1e-12);
                prop_assert!((r - pearson(&y, &x).unwrap()).abs() < 1e-12);
                let s = spearman(&x, &y).unwrap();
                prop_assert!((0.0..=1.0).contains(&s.p_value));
                prop_assert!((s.rho - spearman(&y, &x).unwrap().rho).abs() < 1e-12);
            }
        }
    }
}
