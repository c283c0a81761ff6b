use margfit::marginal::fit_exponential;
use margfit::resample::{bootstrap, resample_distribution};
use margfit::{freireich, TieMethod, WeightScheme};
use statrs::distribution::{ContinuousCDF, Normal};

// Kolmogorov distribution upper tail
fn ks_pvalue(d: f64, n: usize) -> f64 {
    let x = d * (n as f64).sqrt();
    (1..100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * x * x).exp()
        })
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

fn ks_statistic(mut xs: Vec<f64>, dist: &Normal) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = dist.cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

#[test]
fn random_weight_draws_look_normal() {
    let data = freireich();
    let scheme = WeightScheme::Parametric(fit_exponential(&data).unwrap());
    let r = resample_distribution(&data, &scheme, TieMethod::Breslow, 1000, 2024, None).unwrap();
    assert_eq!(r.failures, 0);
    let normal = Normal::new(r.point.beta[0], r.point.std_errors[0]).unwrap();
    let xs: Vec<f64> = r.draws.iter().map(|d| d[0]).collect();
    let p = ks_pvalue(ks_statistic(xs, &normal), r.draws.len());
    assert!(p > 0.01, "KS p-value {p}");
}

#[test]
fn random_weight_sd_tracks_the_sandwich() {
    let data = freireich();
    let scheme = WeightScheme::Parametric(fit_exponential(&data).unwrap());
    let r = resample_distribution(&data, &scheme, TieMethod::Breslow, 1000, 99, None).unwrap();
    assert!((r.se[0] - 0.36).abs() < 0.08, "{}", r.se[0]);
}

#[test]
fn bootstrap_agrees_with_andersen_gill() {
    let r = bootstrap(&freireich(), &WeightScheme::Constant, TieMethod::Breslow, 500, 7, None).unwrap();
    assert!((r.se[0] - 0.42).abs() < 0.1, "{}", r.se[0]);
}

#[test]
fn bootstrap_refits_the_parametric_marginal() {
    let data = freireich();
    let scheme = WeightScheme::Parametric(fit_exponential(&data).unwrap());
    let r = bootstrap(&data, &scheme, TieMethod::Breslow, 200, 8, None).unwrap();
    assert!(r.se[0] > 0.2 && r.se[0] < 0.7, "{}", r.se[0]);
}

#[test]
fn neighbouring_substreams_are_uncorrelated() {
    let data = freireich();
    let r = resample_distribution(&data, &WeightScheme::Constant, TieMethod::Breslow, 1000, 1, None).unwrap();
    let xs: Vec<f64> = r.draws.iter().map(|d| d[0]).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    let lag1 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / var;
    // under independence lag-1 autocorrelation is approximately N(0, 1/n)
    assert!(lag1.abs() < 3.0 / n.sqrt(), "{lag1}");
}

