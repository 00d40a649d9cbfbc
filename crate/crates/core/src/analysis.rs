//! Bias and variance of the plain Gaussian KDE: leading-order predictions
//! against Monte-Carlo measurements on densities with known Laplacians.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal as Normal01};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{KernelConstants, KernelSpec};
use crate::rng::{derive_seed, seeded, Rng};

/// A density with closed-form value and Laplacian, and a sampler.
pub trait TestDensity: Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn pdf(&self, z: &[f64]) -> f64;
    /// Trace of the Hessian at `z`.
    fn laplacian(&self, z: &[f64]) -> f64;
    fn sample(&self, rng: &mut Rng) -> Vec<f64>;
}

fn normal_pdf(x: f64, mean: f64) -> f64 {
    (-0.5 * (x - mean).powi(2)).exp() / (2.0 * PI).sqrt()
}

/// The standard normal `N(0, I_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StandardNormal {
    dim: usize,
    name: &'static str,
}

impl StandardNormal {
    pub fn new(dim: usize) -> Result<Self> {
        let name = match dim {
            1 => "normal1d",
            2 => "normal2d",
            _ => return Err(Error::config("density", format!("standard normal ships for d = 1 or 2, not {dim}"))),
        };
        Ok(Self { dim, name })
    }
}

impl TestDensity for StandardNormal {
    fn name(&self) -> &str {
        self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn pdf(&self, z: &[f64]) -> f64 {
        z.iter().map(|&x| normal_pdf(x, 0.0)).product()
    }

    fn laplacian(&self, z: &[f64]) -> f64 {
        let sq: f64 = z.iter().map(|x| x * x).sum();
        self.pdf(z) * (sq - self.dim as f64)
    }

    fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.dim).map(|_| Normal01.sample(rng)).collect()
    }
}

/// Equal-weight 1-D mixture of `N(-2, 1)` and `N(2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BimodalMixture;

impl BimodalMixture {
    const MEANS: [f64; 2] = [-2.0, 2.0];
}

impl TestDensity for BimodalMixture {
    fn name(&self) -> &str {
        "mixture1d"
    }

    fn dim(&self) -> usize {
        1
    }

    fn pdf(&self, z: &[f64]) -> f64 {
        Self::MEANS.iter().map(|&m| 0.5 * normal_pdf(z[0], m)).sum()
    }

    fn laplacian(&self, z: &[f64]) -> f64 {
        Self::MEANS
            .iter()
            .map(|&m| 0.5 * normal_pdf(z[0], m) * ((z[0] - m).powi(2) - 1.0))
            .sum()
    }

    fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let mean = if rng.random_bool(0.5) { Self::MEANS[1] } else { Self::MEANS[0] };
        let e: f64 = Normal01.sample(rng);
        vec![mean + e]
    }
}

/// Looks up a shipped density by name.
pub fn density_by_name(name: &str) -> Result<Box<dyn TestDensity>> {
    match name {
        "normal1d" => Ok(Box::new(StandardNormal::new(1)?)),
        "normal2d" => Ok(Box::new(StandardNormal::new(2)?)),
        "mixture1d" => Ok(Box::new(BimodalMixture)),
        other => Err(Error::config(
            "density",
            format!("unknown density `{other}` (expected normal1d, normal2d or mixture1d)"),
        )),
    }
}

/// Leading bias term `½ μ₂(K) h² Δk(z)`.
pub fn predicted_bias(density: &dyn TestDensity, z: &[f64], h: f64) -> f64 {
    let mu2 = KernelConstants::gaussian(density.dim()).second_moment;
    0.5 * mu2 * h * h * density.laplacian(z)
}

/// Leading variance term `R(K) k(z) / (n h^d)`.
pub fn predicted_variance(density: &dyn TestDensity, z: &[f64], h: f64, n: usize) -> f64 {
    let d = density.dim();
    KernelConstants::gaussian(d).roughness * density.pdf(z) / (n as f64 * h.powi(d as i32))
}

/// Outside this range the leading terms are not expected to describe the
/// estimator.
pub fn asymptotic_regime(h: f64, n: usize) -> bool {
    !(h > 1.0 || n as f64 * h < 50.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub z: Vec<f64>,
    pub h: f64,
    pub n: usize,
    pub replications: usize,
    pub true_density: f64,
    pub predicted_bias: f64,
    pub predicted_variance: f64,
    pub measured_bias: f64,
    pub se_bias: f64,
    pub measured_variance: f64,
    pub se_variance: f64,
    pub regime_ok: bool,
}

pub const MIN_REPLICATIONS: usize = 100;

/// Plain KDE at `z` from `n` fresh draws, repeated `replications` times.
/// Replication `r` uses seed `derive_seed(seed, r)`, so results do not
/// depend on thread scheduling.
pub fn monte_carlo_bias_variance(
    density: &dyn TestDensity,
    z: &[f64],
    h: f64,
    n: usize,
    replications: usize,
    seed: u64,
) -> Result<BiasVarianceReport> {
    if replications < MIN_REPLICATIONS {
        return Err(Error::config("replications", format!("need at least {MIN_REPLICATIONS}, got {replications}")));
    }
    if n == 0 {
        return Err(Error::config("n", "sample size must be at least 1"));
    }
    if z.len() != density.dim() {
        return Err(Error::shape("monte_carlo", format!("point has {} coords, density has {}", z.len(), density.dim())));
    }
    let kernel = KernelSpec::new(density.dim(), h)?;
    let estimates: Vec<f64> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeded(derive_seed(seed, r as u64));
            let total: f64 = (0..n)
                .map(|_| {
                    let x = density.sample(&mut rng);
                    let sq: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                    kernel.log_kernel_sq(sq).exp()
                })
                .sum();
            total / n as f64
        })
        .collect();

    let r = replications as f64;
    let mean = estimates.iter().sum::<f64>() / r;
    let m2 = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>();
    let m4 = estimates.iter().map(|e| (e - mean).powi(4)).sum::<f64>() / r;
    let variance = m2 / (r - 1.0);
    let truth = density.pdf(z);
    Ok(BiasVarianceReport {
        z: z.to_vec(),
        h,
        n,
        replications,
        true_density: truth,
        predicted_bias: predicted_bias(density, z, h),
        predicted_variance: predicted_variance(density, z, h, n),
        measured_bias: mean - truth,
        se_bias: (variance / r).sqrt(),
        measured_variance: variance,
        se_variance: ((m4 - variance * variance).max(0.0) / r).sqrt(),
        regime_ok: asymptotic_regime(h, n),
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::contract("slope needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("log-log slope needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("slope needs at least two distinct x values"));
    }
    Ok(sxy / sxx)
}

/// A grid of Monte-Carlo runs at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub density: String,
    pub z: Vec<f64>,
    pub bandwidths: Vec<f64>,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            density: "normal1d".into(),
            z: vec![0.0],
            bandwidths: vec![0.1, 0.2, 0.4, 5.0],
            sample_sizes: vec![500, 1000, 2000, 4000],
            replications: 2000,
            seed: 0,
        }
    }
}

/// One report per `(h, n)` pair, bandwidth-major. Each cell draws from
/// its own derived seed.
pub fn sweep(config: &SweepConfig) -> Result<Vec<BiasVarianceReport>> {
    let density = density_by_name(&config.density)?;
    if config.bandwidths.is_empty() || config.sample_sizes.is_empty() {
        return Err(Error::config("sweep", "needs at least one bandwidth and one sample size"));
    }
    let mut out = Vec::new();
    for (i, &h) in config.bandwidths.iter().enumerate() {
        for (j, &n) in config.sample_sizes.iter().enumerate() {
            let cell_seed = derive_seed(config.seed, (i * config.sample_sizes.len() + j) as u64);
            out.push(monte_carlo_bias_variance(density.as_ref(), &config.z, h, n, config.replications, cell_seed)?);
        }
    }
    Ok(out)
}

pub const REPORT_HEADER: &str = "z,h,n,predicted_bias,measured_bias,se_bias,predicted_var,measured_var,regime_ok";

/// Report rows as CSV; multi-dimensional points are written `z1;z2`.
pub fn report_csv(reports: &[BiasVarianceReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        let z: Vec<String> = r.z.iter().map(|v| format!("{v}")).collect();
        writeln!(
            out,
            "{},{},{},{:e},{:e},{:e},{:e},{:e},{}",
            z.join(";"),
            r.h,
            r.n,
            r.predicted_bias,
            r.measured_bias,
            r.se_bias,
            r.predicted_variance,
            r.measured_variance,
            r.regime_ok
        )
        .unwrap();
    }
    out
}
