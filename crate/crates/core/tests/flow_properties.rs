//! Distributional properties of the log-normal flow, checked against
//! independent oracles: statrs for density values and CDFs, adaptive Simpson
//! quadrature for normalization, grid search for the mode.

use flowtpp::flows::{log_pdf, sample, FlowParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, LogNormal};

fn random_params(rng: &mut ChaCha8Rng) -> FlowParams {
    FlowParams {
        mu: rng.gen_range(-2.0..2.0),
        sigma2: rng.gen_range(0.01..4.0),
    }
}

/// Adaptive Simpson on [a, b] with tolerance `tol`.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb) = (f(a), f(b));
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 48)
}

#[test]
fn log_pdf_matches_statrs_to_1e10() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..100 {
        let p = random_params(&mut rng);
        let reference = LogNormal::new(p.mu, p.sigma2.sqrt()).unwrap();
        let x: f64 = rng.gen_range(0.01..20.0f64);
        let ours = log_pdf(p, x).unwrap();
        let theirs = reference.ln_pdf(x);
        assert!(
            (ours - theirs).abs() < 1e-10,
            "log_pdf({x}; {p:?}) = {ours} vs statrs {theirs}"
        );
    }
}

#[test]
fn density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..20 {
        let p = random_params(&mut rng);
        let sigma = p.sigma2.sqrt();
        let pdf = |x: f64| log_pdf(p, x).unwrap().exp();
        // Panels bounded by log-space σ-quantiles so no panel hides the peak;
        // the bracket [exp(μ − 9σ), exp(μ + 9σ)] misses < 1e-18 mass.
        let mut mass = 0.0;
        for k in -9..9 {
            let lo = (p.mu + k as f64 * sigma).exp();
            let hi = (p.mu + (k + 1) as f64 * sigma).exp();
            mass += adaptive_simpson(&pdf, lo, hi, 1e-10);
        }
        assert!((mass - 1.0).abs() < 1e-6, "∫pdf = {mass} for {p:?}");
    }
}

#[test]
fn empirical_cdf_passes_ks_test() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..3 {
        let p = random_params(&mut rng);
        let reference = LogNormal::new(p.mu, p.sigma2.sqrt()).unwrap();
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| sample(p, &mut rng)).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks = 0.0f64;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = reference.cdf(x);
            let hi = (i + 1) as f64 / n as f64 - cdf;
            let lo = cdf - i as f64 / n as f64;
            ks = ks.max(hi.abs()).max(lo.abs());
        }
        assert!(ks < 0.01, "KS statistic {ks} for {p:?}");
    }
}

#[test]
fn log_pdf_peaks_at_the_analytic_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..10 {
        let p = random_params(&mut rng);
        let mode = (p.mu - p.sigma2).exp();
        let at_mode = log_pdf(p, mode).unwrap();
        // Grid over two octaves around the mode.
        for k in 0..=2000 {
            let x = mode * (0.5 + 1.5 * k as f64 / 2000.0);
            if x > 0.0 {
                assert!(
                    log_pdf(p, x).unwrap() <= at_mode + 1e-12,
                    "density above the mode at x = {x} for {p:?}"
                );
            }
        }
    }
}
