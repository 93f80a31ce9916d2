use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Column, ColumnKind, Dataset, RawColumn, RawValue, Schema};
use crate::serialize::derive_seed;
use crate::{Error, Result};

/// Typed description of a synthetic dataset. Every generator is a pure
/// function of `(spec, seed)` with its own RNG stream keyed by name.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// Gaussian outcome with covariate-driven mean and standard deviation:
    /// x ~ N(cos(2πz₁)+sin(πz₂), (0.2√((1−2z₁)(1−2z₂)))²), z uniform on
    /// [−½, ½]².
    Gauss2z { n: usize },
    /// 1D two-component Gaussian mixture with covariate-driven means and
    /// variances, z uniform on [−2.5, 2.5].
    Gmm1d { n: usize },
    /// 2D two-component Gaussian mixture, z uniform on [−2.5, 2.5].
    Gmm2d { n: usize },
    /// x ~ N(z²−2, 0.25), z uniform on [−2, 2].
    BayesParabola { n: usize },
    /// Time-discretized Ornstein–Uhlenbeck step:
    /// X⁺ = (1−α)X + 0.5 + 0.5·W. Without `alpha`, emits independent
    /// training triples with α ~ Beta(2,2) and X ~ U(x_min, x_max); with
    /// `alpha`, emits a sequential test series started at `x0`.
    OuProcess {
        n: usize,
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default = "default_ou_x0")]
        x0: f64,
        #[serde(default = "default_ou_xmin")]
        x_min: f64,
        #[serde(default = "default_ou_xmax")]
        x_max: f64,
    },
    /// Lotka–Volterra predator–prey transitions observed at irregular
    /// intervals Δt ~ U[0.5, 1.5], integrated by an explicit trapezoidal
    /// scheme with a fine internal step, plus observational noise.
    LotkaVolterra {
        n: usize,
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default = "default_lv_beta")]
        beta: f64,
        #[serde(default = "default_lv_gamma")]
        gamma: f64,
        #[serde(default = "default_lv_delta")]
        delta: f64,
        #[serde(default = "default_lv_noise")]
        noise: f64,
    },
    /// Hourly 1D series combining a seasonal cycle, a diurnal cycle, and
    /// AR(1) signals at synoptic and multi-year scales; covariates are the
    /// day-of-year and hour-of-day (periodic) plus raw time (real).
    MultiscaleSeries { n: usize },
}

fn default_ou_x0() -> f64 {
    2.0
}
fn default_ou_xmin() -> f64 {
    -1.0
}
fn default_ou_xmax() -> f64 {
    5.0
}
fn default_lv_beta() -> f64 {
    0.9
}
fn default_lv_gamma() -> f64 {
    0.5
}
fn default_lv_delta() -> f64 {
    0.4
}
fn default_lv_noise() -> f64 {
    0.1
}

impl GeneratorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            GeneratorSpec::Gauss2z { .. } => "gauss2z",
            GeneratorSpec::Gmm1d { .. } => "gmm1d",
            GeneratorSpec::Gmm2d { .. } => "gmm2d",
            GeneratorSpec::BayesParabola { .. } => "bayes_parabola",
            GeneratorSpec::OuProcess { .. } => "ou_process",
            GeneratorSpec::LotkaVolterra { .. } => "lotka_volterra",
            GeneratorSpec::MultiscaleSeries { .. } => "multiscale_series",
        }
    }

    fn n(&self) -> usize {
        match self {
            GeneratorSpec::Gauss2z { n }
            | GeneratorSpec::Gmm1d { n }
            | GeneratorSpec::Gmm2d { n }
            | GeneratorSpec::BayesParabola { n }
            | GeneratorSpec::OuProcess { n, .. }
            | GeneratorSpec::LotkaVolterra { n, .. }
            | GeneratorSpec::MultiscaleSeries { n } => *n,
        }
    }
}

/// Name + JSON params front end for [`generate_spec`]. `params` must contain
/// the generator's fields except `name` (e.g. `{"n": 1500}`).
pub fn generate(name: &str, params: &serde_json::Value, seed: u64) -> Result<Dataset> {
    let mut obj = params
        .as_object()
        .cloned()
        .ok_or_else(|| Error::InvalidInput("generator params must be a JSON object".into()))?;
    obj.insert("name".into(), serde_json::Value::String(name.into()));
    let spec: GeneratorSpec = serde_json::from_value(serde_json::Value::Object(obj))
        .map_err(|e| Error::InvalidInput(format!("unknown generator or bad params: {e}")))?;
    generate_spec(&spec, seed)
}

/// Draw a deterministic synthetic dataset.
pub fn generate_spec(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    if spec.n() < 2 {
        return Err(Error::InvalidInput("n >= 2 required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.name(), seed));
    match spec {
        GeneratorSpec::Gauss2z { n } => gauss2z(*n, &mut rng),
        GeneratorSpec::Gmm1d { n } => gmm1d(*n, &mut rng),
        GeneratorSpec::Gmm2d { n } => gmm2d(*n, &mut rng),
        GeneratorSpec::BayesParabola { n } => bayes_parabola(*n, &mut rng),
        GeneratorSpec::OuProcess { n, alpha, x0, x_min, x_max } => {
            if let Some(a) = alpha {
                if !(0.0..=1.0).contains(a) {
                    return Err(Error::InvalidInput("ou_process: alpha must be in [0, 1]".into()));
                }
                ou_series(*n, *a, *x0, &mut rng)
            } else {
                if !(x_min < x_max) {
                    return Err(Error::InvalidInput("ou_process: x_min < x_max required".into()));
                }
                ou_train(*n, *x_min, *x_max, &mut rng)
            }
        }
        GeneratorSpec::LotkaVolterra { n, alpha, beta, gamma, delta, noise } => {
            lotka_volterra(*n, *alpha, *beta, *gamma, *delta, *noise, &mut rng)
        }
        GeneratorSpec::MultiscaleSeries { n } => multiscale_series(*n, &mut rng),
    }
}

fn real_col(values: Vec<f64>) -> RawColumn {
    values.into_iter().map(RawValue::Real).collect()
}

fn gauss2z(n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut x = Array2::zeros((n, 1));
    let mut z1 = Vec::with_capacity(n);
    let mut z2 = Vec::with_capacity(n);
    for i in 0..n {
        let a: f64 = rng.random_range(-0.5..0.5);
        let b: f64 = rng.random_range(-0.5..0.5);
        let mu = (2.0 * std::f64::consts::PI * a).cos() + (std::f64::consts::PI * b).sin();
        let sigma = 0.2 * ((1.0 - 2.0 * a) * (1.0 - 2.0 * b)).sqrt();
        let w: f64 = StandardNormal.sample(rng);
        x[(i, 0)] = mu + sigma * w;
        z1.push(a);
        z2.push(b);
    }
    Dataset::new(x, vec![real_col(z1), real_col(z2)], Schema::all_real(2), vec!["x1".into()])
}

fn gmm1d(n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut x = Array2::zeros((n, 1));
    let mut zs = Vec::with_capacity(n);
    for i in 0..n {
        let z: f64 = rng.random_range(-2.5..2.5);
        let pick_first = rng.random_range(0.0..1.0) < 0.5;
        let w: f64 = StandardNormal.sample(rng);
        let (mu, var) = if pick_first {
            (3.0 + 2.0 * z, 0.5 * z.exp())
        } else {
            (0.5 * z - z * z, 0.25 - 0.1 * z)
        };
        x[(i, 0)] = mu + var.sqrt() * w;
        zs.push(z);
    }
    Dataset::new(x, vec![real_col(zs)], Schema::all_real(1), vec!["x1".into()])
}

fn gmm2d(n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut x = Array2::zeros((n, 2));
    let mut zs = Vec::with_capacity(n);
    for i in 0..n {
        let z: f64 = rng.random_range(-2.5..2.5);
        let pick_first = rng.random_range(0.0..1.0) < 0.5;
        let w1: f64 = StandardNormal.sample(rng);
        let w2: f64 = StandardNormal.sample(rng);
        if pick_first {
            x[(i, 0)] = 3.0 + 2.0 * z + (0.5 * z.exp()).sqrt() * w1;
            x[(i, 1)] = 2.0 + z + 0.5_f64.sqrt() * w2;
        } else {
            x[(i, 0)] = 0.5 * z - z * z + (0.25 - 0.1 * z).sqrt() * w1;
            x[(i, 1)] = -3.0 + (0.25 + 0.1 * z).sqrt() * w2;
        }
        zs.push(z);
    }
    Dataset::new(x, vec![real_col(zs)], Schema::all_real(1), vec!["x1".into(), "x2".into()])
}

fn bayes_parabola(n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let sigma = 0.5;
    let mut x = Array2::zeros((n, 1));
    let mut zs = Vec::with_capacity(n);
    for i in 0..n {
        let z: f64 = rng.random_range(-2.0..2.0);
        let w: f64 = StandardNormal.sample(rng);
        x[(i, 0)] = z * z - 2.0 + sigma * w;
        zs.push(z);
    }
    Dataset::new(x, vec![real_col(zs)], Schema::all_real(1), vec!["x1".into()])
}

const OU_BETA: f64 = 0.5;
const OU_SIGMA: f64 = 0.5;

fn ou_step(x: f64, alpha: f64, w: f64) -> f64 {
    (1.0 - alpha) * x + OU_BETA + OU_SIGMA * w
}

fn ou_schema() -> Schema {
    Schema::new(vec![
        Column { name: "x_prev".into(), kind: ColumnKind::Real },
        Column { name: "alpha".into(), kind: ColumnKind::Real },
    ])
    .unwrap()
}

fn ou_train(n: usize, x_min: f64, x_max: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let beta_dist = Beta::new(2.0, 2.0).unwrap();
    let mut x = Array2::zeros((n, 1));
    let mut prev = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    for i in 0..n {
        let a = beta_dist.sample(rng);
        let xp: f64 = rng.random_range(x_min..x_max);
        let w: f64 = StandardNormal.sample(rng);
        x[(i, 0)] = ou_step(xp, a, w);
        prev.push(xp);
        alphas.push(a);
    }
    Dataset::new(x, vec![real_col(prev), real_col(alphas)], ou_schema(), vec!["x1".into()])
}

fn ou_series(n: usize, alpha: f64, x0: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut x = Array2::zeros((n, 1));
    let mut prev = Vec::with_capacity(n);
    let mut cur = x0;
    for i in 0..n {
        let w: f64 = StandardNormal.sample(rng);
        let next = ou_step(cur, alpha, w);
        prev.push(cur);
        x[(i, 0)] = next;
        cur = next;
    }
    let alphas = vec![alpha; n];
    Dataset::new(x, vec![real_col(prev), real_col(alphas)], ou_schema(), vec!["x1".into()])
}

/// One observation interval of the Lotka–Volterra ODE, integrated with the
/// explicit trapezoidal (Heun) scheme at a fine internal step.
fn lv_integrate(mut u: f64, mut v: f64, alpha: f64, beta: f64, gamma: f64, delta: f64, dt: f64) -> (f64, f64) {
    let steps = (dt / 0.01).ceil().max(1.0) as usize;
    let h = dt / steps as f64;
    let f = |u: f64, v: f64| (alpha * u - beta * u * v, -gamma * v + delta * u * v);
    for _ in 0..steps {
        let (k1u, k1v) = f(u, v);
        let (k2u, k2v) = f(u + h * k1u, v + h * k1v);
        u += 0.5 * h * (k1u + k2u);
        v += 0.5 * h * (k1v + k2v);
    }
    (u, v)
}

fn lotka_volterra(
    n: usize,
    alpha: Option<f64>,
    beta: f64,
    gamma: f64,
    delta: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let schema = Schema::new(vec![
        Column { name: "x1_prev".into(), kind: ColumnKind::Real },
        Column { name: "x2_prev".into(), kind: ColumnKind::Real },
        Column { name: "alpha".into(), kind: ColumnKind::Real },
        Column { name: "dt".into(), kind: ColumnKind::Real },
    ])
    .unwrap();
    let beta_dist = Beta::new(2.0, 2.0).unwrap();
    let mut x = Array2::zeros((n, 2));
    let mut c1 = Vec::with_capacity(n);
    let mut c2 = Vec::with_capacity(n);
    let mut ca = Vec::with_capacity(n);
    let mut cdt = Vec::with_capacity(n);
    // Series mode keeps a running state; training mode redraws it per row.
    let mut state = (1.0, 1.0);
    for i in 0..n {
        let a = match alpha {
            Some(a) => a,
            None => beta_dist.sample(rng),
        };
        let (u0, v0) = if alpha.is_some() && i > 0 {
            state
        } else {
            (rng.random_range(0.2..2.5), rng.random_range(0.1..1.5))
        };
        let dt: f64 = rng.random_range(0.5..1.5);
        let (u1, v1) = lv_integrate(u0, v0, a, beta, gamma, delta, dt);
        let w1: f64 = StandardNormal.sample(rng);
        let w2: f64 = StandardNormal.sample(rng);
        let obs = (u1 + noise * w1, v1 + noise * w2);
        x[(i, 0)] = obs.0;
        x[(i, 1)] = obs.1;
        c1.push(u0);
        c2.push(v0);
        ca.push(a);
        cdt.push(dt);
        state = (u1, v1);
    }
    Dataset::new(
        x,
        vec![real_col(c1), real_col(c2), real_col(ca), real_col(cdt)],
        schema,
        vec!["x1".into(), "x2".into()],
    )
}

fn multiscale_series(n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    const HOURS_PER_DAY: f64 = 24.0;
    const HOURS_PER_YEAR: f64 = 24.0 * 365.25;
    let schema = Schema::new(vec![
        Column { name: "doy".into(), kind: ColumnKind::Periodic { period: HOURS_PER_YEAR } },
        Column { name: "hour".into(), kind: ColumnKind::Periodic { period: HOURS_PER_DAY } },
        Column { name: "t".into(), kind: ColumnKind::Real },
    ])
    .unwrap();
    let mut x = Array2::zeros((n, 1));
    let mut tcol = Vec::with_capacity(n);
    // AR(1) signals: synoptic (~15 day correlation) and multi-year (~2.5 y).
    let rho_syn = (-1.0_f64 / (15.0 * 24.0)).exp();
    let rho_my = (-1.0_f64 / (2.5 * HOURS_PER_YEAR)).exp();
    let (mut syn, mut my) = (0.0, 0.0);
    for i in 0..n {
        let t = i as f64;
        let w1: f64 = StandardNormal.sample(rng);
        let w2: f64 = StandardNormal.sample(rng);
        let w3: f64 = StandardNormal.sample(rng);
        syn = rho_syn * syn + (1.0 - rho_syn * rho_syn).sqrt() * 4.0 * w1;
        my = rho_my * my + (1.0 - rho_my * rho_my).sqrt() * 3.0 * w2;
        let seasonal = 10.0 * (2.0 * std::f64::consts::PI * t / HOURS_PER_YEAR).sin();
        let diurnal = 4.0 * (2.0 * std::f64::consts::PI * t / HOURS_PER_DAY).sin();
        x[(i, 0)] = seasonal + diurnal + syn + my + 0.5 * w3;
        tcol.push(t);
    }
    let doy = tcol.clone();
    let hour = tcol.clone();
    Dataset::new(
        x,
        vec![real_col(doy), real_col(hour), real_col(tcol)],
        schema,
        vec!["x1".into()],
    )
}

/// Scaling-benchmark law: each factor z^l ~ N(0, 0.25); x is an isotropic
/// Gaussian with mean cos(2πΣz^l)·1 and variance
/// 0.05/(sin(0.1(Σz^l+0.2)²)+0.25) per coordinate.
pub fn bench_gauss(n: usize, d_x: usize, d_z: usize, seed: u64) -> Result<Dataset> {
    if n < 2 || d_x == 0 || d_z == 0 {
        return Err(Error::InvalidInput("bench_gauss: n >= 2, d_x >= 1, d_z >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed("bench_gauss", seed));
    let mut x = Array2::zeros((n, d_x));
    let mut zcols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); d_z];
    for i in 0..n {
        let mut s = 0.0;
        for col in zcols.iter_mut() {
            let v: f64 = 0.5 * <f64 as From<f64>>::from(StandardNormal.sample(&mut rng));
            col.push(v);
            s += v;
        }
        let mu = (2.0 * std::f64::consts::PI * s).cos();
        let denom = ((0.1 * (s + 0.2).powi(2)).sin() + 0.25).max(0.05);
        let sd = (0.05 / denom).sqrt();
        for k in 0..d_x {
            let w: f64 = StandardNormal.sample(&mut rng);
            x[(i, k)] = mu + sd * w;
        }
    }
    Dataset::new(
        x,
        zcols.into_iter().map(real_col).collect(),
        Schema::all_real(d_z),
        (1..=d_x).map(|k| format!("x{k}")).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn same_seed_is_bit_identical() {
        for spec in [
            GeneratorSpec::Gauss2z { n: 50 },
            GeneratorSpec::Gmm1d { n: 50 },
            GeneratorSpec::Gmm2d { n: 50 },
            GeneratorSpec::BayesParabola { n: 50 },
            GeneratorSpec::MultiscaleSeries { n: 50 },
        ] {
            let a = generate_spec(&spec, 9).unwrap();
            let b = generate_spec(&spec, 9).unwrap();
            assert_eq!(a.x, b.x, "{}", spec.name());
            assert_eq!(a.z, b.z, "{}", spec.name());
        }
    }

    #[test]
    fn ou_degenerate_alpha_zero_is_pure_drift_plus_noise() {
        // With α = 0 the update is X⁺ = X + 0.5 + 0.5·W exactly, so the
        // standardized increments must be standard normal draws.
        let ds = generate_spec(
            &GeneratorSpec::OuProcess { n: 100, alpha: Some(0.0), x0: 2.0, x_min: -1.0, x_max: 5.0 },
            3,
        )
        .unwrap();
        let mut prev = 2.0;
        for i in 0..ds.n() {
            let xp = match ds.z_raw[0][i] {
                RawValue::Real(v) => v,
                _ => unreachable!(),
            };
            assert_abs_diff_eq!(xp, prev, epsilon = 1e-12);
            let w = (ds.x[(i, 0)] - xp - 0.5) / 0.5;
            assert!(w.is_finite() && w.abs() < 8.0);
            prev = ds.x[(i, 0)];
        }
    }

    #[test]
    fn gauss2z_sigma_mean_matches_analytic() {
        // Monte-Carlo oracle (10^6 draws) for E[0.2·√((1−2z₁)(1−2z₂))] gives
        // 0.17778 = 0.2·(2√2/3)², frozen here; the dataset's empirical mean
        // must sit within 3 standard errors (SE ≈ 0.0917/√n).
        let expect = 0.2 * (8.0 / 9.0);
        let ds = generate_spec(&GeneratorSpec::Gauss2z { n: 1500 }, 11).unwrap();
        let sigmas: Vec<f64> = (0..ds.n())
            .map(|i| {
                let a = ds.z[(i, 0)];
                let b = ds.z[(i, 1)];
                0.2 * ((1.0 - 2.0 * a) * (1.0 - 2.0 * b)).sqrt()
            })
            .collect();
        let mean = crate::stats::mean(&sigmas);
        let se = 0.0917 / (1500.0_f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "mean {mean} vs {expect}");
    }

    #[test]
    fn unknown_generator_name_errors() {
        let err = generate("nope", &serde_json::json!({"n": 10}), 0).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn json_front_end_matches_spec_path() {
        let a = generate("gauss2z", &serde_json::json!({"n": 40}), 5).unwrap();
        let b = generate_spec(&GeneratorSpec::Gauss2z { n: 40 }, 5).unwrap();
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn generators_have_separated_streams() {
        // Identical n and seed, different names → different draws.
        let a = generate_spec(&GeneratorSpec::Gmm1d { n: 20 }, 5).unwrap();
        let b = generate_spec(&GeneratorSpec::BayesParabola { n: 20 }, 5).unwrap();
        assert_ne!(a.x, b.x);
    }

    #[test]
    fn bench_law_shapes_and_determinism() {
        let a = bench_gauss(100, 2, 3, 7).unwrap();
        assert_eq!(a.d_x(), 2);
        assert_eq!(a.d_z(), 3);
        let b = bench_gauss(100, 2, 3, 7).unwrap();
        assert_eq!(a.x, b.x);
    }
}
