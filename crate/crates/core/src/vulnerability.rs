//! Numerical model of ensemble vulnerability.
//!
//! The ensemble loss is the weighted mean of member losses, so its input
//! gradient is the mean `R` of the member gradients `r_i`. Under a first-order
//! expansion the worst loss change inside an `ε`-ball of the `p`-norm is
//! `ε·‖R‖_q` with `q` the dual exponent. For zero-mean member gradients with
//! `E‖r_i‖² = σ²` and pairwise correlations `Corr(i, j)`,
//!
//! ```text
//! E‖R‖₂² = σ²/N · (1 + 2/N · Σ_{i>j} Corr(i, j))
//! ```
//!
//! which this module evaluates in closed form and checks by Monte Carlo.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Perturbation norm; the gradient is measured in the dual norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PNorm {
    #[serde(rename = "1")]
    One,
    #[default]
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Inf,
}

impl PNorm {
    pub fn dual(self) -> PNorm {
        match self {
            PNorm::One => PNorm::Inf,
            PNorm::Two => PNorm::Two,
            PNorm::Inf => PNorm::One,
        }
    }
}

pub fn norm(v: &[f64], p: PNorm) -> f64 {
    match p {
        PNorm::One => v.iter().map(|x| x.abs()).sum(),
        PNorm::Two => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        PNorm::Inf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Vec<f64>,
    /// `ε·‖g‖_q`, equal to `g·δ`.
    pub bound: f64,
}

/// Maximiser of `g·δ` over `‖δ‖_p = ε`, together with the attained value.
/// A zero gradient returns `ε·e₁`.
pub fn worst_case_linear_perturbation(gradient: &[f64], p: PNorm, epsilon: f64) -> Result<Perturbation> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::Config(format!("perturbation budget must be positive, got {epsilon}")));
    }
    if gradient.is_empty() {
        return Err(Error::Empty("gradient has no components"));
    }
    let bound = epsilon * norm(gradient, p.dual());
    let mut delta = vec![0.0; gradient.len()];
    if bound == 0.0 {
        delta[0] = epsilon;
        return Ok(Perturbation { delta, bound: 0.0 });
    }
    match p {
        PNorm::Two => {
            let n = norm(gradient, PNorm::Two);
            for (d, g) in delta.iter_mut().zip(gradient) {
                *d = epsilon * g / n;
            }
        }
        PNorm::Inf => {
            for (d, g) in delta.iter_mut().zip(gradient) {
                *d = if *g > 0.0 {
                    epsilon
                } else if *g < 0.0 {
                    -epsilon
                } else {
                    0.0
                };
            }
        }
        PNorm::One => {
            let k = (0..gradient.len()).fold(0, |k, i| if gradient[i].abs() > gradient[k].abs() { i } else { k });
            delta[k] = epsilon * gradient[k].signum();
        }
    }
    Ok(Perturbation { delta, bound })
}

/// Member-gradient correlation structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    /// Every pair shares the same coefficient.
    Uniform(f64),
    /// Full matrix: symmetric, unit diagonal, positive semidefinite.
    Matrix(Vec<Vec<f64>>),
}

impl Correlation {
    fn matrix(&self, n: usize) -> DMatrix<f64> {
        match self {
            Correlation::Uniform(rho) => DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { *rho }),
            Correlation::Matrix(rows) => DMatrix::from_fn(n, n, |i, j| rows[i][j]),
        }
    }

    /// Checks shape, symmetry, unit diagonal and positive semidefiniteness.
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            Correlation::Uniform(rho) => {
                let lower = if n > 1 { -1.0 / (n as f64 - 1.0) } else { -1.0 };
                if !(rho.is_finite() && *rho >= lower && *rho <= 1.0) {
                    return Err(Error::Config(format!("correlation {rho} outside [{lower}, 1] for N={n}")));
                }
                Ok(())
            }
            Correlation::Matrix(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Config(format!("correlation matrix must be {n}x{n}")));
                }
                for i in 0..n {
                    if (rows[i][i] - 1.0).abs() > 1e-9 {
                        return Err(Error::Config(format!("correlation diagonal entry {i} is {}", rows[i][i])));
                    }
                    for j in 0..i {
                        if (rows[i][j] - rows[j][i]).abs() > 1e-9 || !rows[i][j].is_finite() {
                            return Err(Error::Config(format!("correlation matrix not symmetric at ({i}, {j})")));
                        }
                    }
                }
                let eig = SymmetricEigen::new(self.matrix(n));
                let min = eig.eigenvalues.min();
                if min < -1e-9 {
                    return Err(Error::NotPsd(min));
                }
                Ok(())
            }
        }
    }

    /// `Σ_{i>j} Corr(i, j)`.
    pub fn lower_sum(&self, n: usize) -> f64 {
        match self {
            Correlation::Uniform(rho) => rho * (n * n.saturating_sub(1)) as f64 / 2.0,
            Correlation::Matrix(rows) => (0..n).flat_map(|i| (0..i).map(move |j| rows[i][j])).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityConfig {
    pub team_size: usize,
    pub dim: usize,
    pub sigma2: f64,
    pub correlation: Correlation,
    #[serde(default)]
    pub norm: PNorm,
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
}

impl VulnerabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.team_size == 0 || self.dim == 0 {
            return Err(Error::Config("team size and dimension must be positive".into()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Config(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.trials == 0 {
            return Err(Error::Config("at least one trial is required".into()));
        }
        self.correlation.validate(self.team_size)
    }
}

/// Member gradients of one trial and their equal-weight mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEnsemble {
    pub members: Vec<Vec<f64>>,
    pub joint: Vec<f64>,
}

impl GradientEnsemble {
    pub fn from_members(members: Vec<Vec<f64>>) -> Result<Self> {
        let first = members.first().ok_or(Error::Empty("ensemble has no members"))?;
        let dim = first.len();
        if members.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("member gradients differ in dimension".into()));
        }
        let n = members.len() as f64;
        let joint = (0..dim).map(|k| members.iter().map(|m| m[k]).sum::<f64>() / n).collect();
        Ok(GradientEnsemble { members, joint })
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![1.0 / self.members.len() as f64; self.members.len()]
    }
}

enum Mixing {
    /// `r_i = √ρ·z + √(1-ρ)·z_i`.
    SharedFactor { shared: f64, own: f64 },
    /// `r_i = Σ_j S_ij z_j` with `S` the symmetric square root of the matrix.
    SquareRoot(DMatrix<f64>),
}

/// Draws zero-mean gradients with `E‖r_i‖² = σ²` and
/// `E(r_i·r_j) = Corr(i, j)·σ²`. Each trial draws from its own ChaCha stream
/// keyed by the trial index, so trials can run in any order.
pub struct GradientSampler {
    team_size: usize,
    dim: usize,
    seed: u64,
    normal: Normal<f64>,
    mixing: Mixing,
}

impl GradientSampler {
    pub fn new(config: &VulnerabilityConfig) -> Result<Self> {
        config.validate()?;
        let n = config.team_size;
        let mixing = match &config.correlation {
            Correlation::Uniform(rho) if *rho >= 0.0 => Mixing::SharedFactor {
                shared: rho.sqrt(),
                own: (1.0 - rho).sqrt(),
            },
            corr => {
                let eig = SymmetricEigen::new(corr.matrix(n));
                let root_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                let v = &eig.eigenvectors;
                Mixing::SquareRoot(v * DMatrix::from_diagonal(&root_vals) * v.transpose())
            }
        };
        let sd = (config.sigma2 / config.dim as f64).sqrt();
        Ok(GradientSampler {
            team_size: n,
            dim: config.dim,
            seed: config.seed,
            normal: Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?,
            mixing,
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim).map(|_| self.normal.sample(rng)).collect()
    }

    pub fn sample(&self, trial: u64) -> GradientEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(trial);
        let members = match &self.mixing {
            Mixing::SharedFactor { shared, own } => {
                let z = self.draw(&mut rng);
                (0..self.team_size)
                    .map(|_| {
                        let zi = self.draw(&mut rng);
                        z.iter().zip(zi).map(|(a, b)| shared * a + own * b).collect()
                    })
                    .collect()
            }
            Mixing::SquareRoot(root) => {
                let z: Vec<Vec<f64>> = (0..self.team_size).map(|_| self.draw(&mut rng)).collect();
                (0..self.team_size)
                    .map(|i| {
                        (0..self.dim)
                            .map(|k| (0..self.team_size).map(|j| root[(i, j)] * z[j][k]).sum())
                            .collect()
                    })
                    .collect()
            }
        };
        GradientEnsemble::from_members(members).expect("sampler emits equal-length members")
    }
}

/// Gradients of a single trial; see [`GradientSampler`].
pub fn sample_correlated_gradients(config: &VulnerabilityConfig, trial: u64) -> Result<GradientEnsemble> {
    Ok(GradientSampler::new(config)?.sample(trial))
}

/// `√(σ²/N · (1 + 2/N · Σ_{i>j} Corr(i, j)))`.
pub fn theoretical_vulnerability(team_size: usize, sigma2: f64, correlation: &Correlation) -> Result<f64> {
    if team_size == 0 {
        return Err(Error::Config("team size must be positive".into()));
    }
    correlation.validate(team_size)?;
    let n = team_size as f64;
    let radicand = sigma2 / n * (1.0 + 2.0 / n * correlation.lower_sum(team_size));
    assert!(radicand >= -1e-12, "negative radicand {radicand} for a PSD correlation");
    Ok(radicand.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityReport {
    pub team_size: usize,
    pub trials: usize,
    pub mean_sq_norm: f64,
    pub mean_norm: f64,
    /// Mean worst-case first-order loss change `ε·‖R‖_q`.
    pub mean_loss_change: f64,
    pub theoretical: f64,
    /// `|√mean_sq_norm − theoretical| / theoretical`.
    pub relative_error: f64,
    /// `|mean_sq_norm − theoretical²| / theoretical²`.
    pub relative_error_sq: f64,
}

/// Averages `‖R‖₂²`, `‖R‖₂` and the worst-case linear loss change over the
/// configured number of trials and compares with the closed form.
pub fn monte_carlo_vulnerability(config: &VulnerabilityConfig) -> Result<VulnerabilityReport> {
    let sampler = GradientSampler::new(config)?;
    let dual = config.norm.dual();
    let per_trial: Vec<(f64, f64, f64)> = (0..config.trials as u64)
        .into_par_iter()
        .map(|t| {
            let joint = sampler.sample(t).joint;
            let sq: f64 = joint.iter().map(|x| x * x).sum();
            (sq, sq.sqrt(), config.epsilon * norm(&joint, dual))
        })
        .collect();
    let trials = per_trial.len() as f64;
    let (mut sq, mut abs, mut change) = (0.0, 0.0, 0.0);
    for (a, b, c) in &per_trial {
        sq += a;
        abs += b;
        change += c;
    }
    let (mean_sq_norm, mean_norm, mean_loss_change) = (sq / trials, abs / trials, change / trials);
    let theoretical = theoretical_vulnerability(config.team_size, config.sigma2, &config.correlation)?;
    let theoretical_sq = theoretical * theoretical;
    Ok(VulnerabilityReport {
        team_size: config.team_size,
        trials: config.trials,
        mean_sq_norm,
        mean_norm,
        mean_loss_change,
        theoretical,
        relative_error: (mean_sq_norm.sqrt() - theoretical).abs() / theoretical,
        relative_error_sq: (mean_sq_norm - theoretical_sq).abs() / theoretical_sq,
    })
}

/// `Σ w_i·L_i`; uniform weights when none are given.
pub fn ensemble_loss(losses: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Empty("ensemble loss needs at least one member"));
    }
    match weights {
        None => Ok(losses.iter().sum::<f64>() / losses.len() as f64),
        Some(w) => {
            if w.len() != losses.len() {
                return Err(Error::Config(format!("{} weights for {} losses", w.len(), losses.len())));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::WeightSum(total));
            }
            Ok(w.iter().zip(losses).map(|(a, b)| a * b).sum())
        }
    }
}

/// Grid of team sizes and uniform correlations checked against the closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryGrid {
    pub team_sizes: Vec<usize>,
    pub correlations: Vec<f64>,
    pub sigma2: f64,
    pub dim: usize,
    pub trials: usize,
    pub seed: u64,
    /// Allowed relative error on `E‖R‖₂²`.
    pub tolerance: f64,
    #[serde(default)]
    pub norm: PNorm,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1.0
}

impl Default for TheoryGrid {
    fn default() -> Self {
        TheoryGrid {
            team_sizes: vec![1, 2, 4, 8],
            correlations: vec![0.0, 0.25, 0.5, 1.0],
            sigma2: 1.0,
            dim: 1000,
            trials: 10_000,
            seed: 2024,
            tolerance: 0.02,
            norm: PNorm::Two,
            epsilon: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub team_size: usize,
    pub correlation: f64,
    pub report: VulnerabilityReport,
    pub theoretical_sq: f64,
    pub pass: bool,
}

/// Runs one Monte Carlo estimate per grid cell; rows are ordered by team size
/// then correlation, and cell `k` uses seed `seed + k`.
pub fn verify_theory(grid: &TheoryGrid) -> Result<Vec<TheoryRow>> {
    let mut rows = Vec::new();
    for &n in &grid.team_sizes {
        for &rho in &grid.correlations {
            let config = VulnerabilityConfig {
                team_size: n,
                dim: grid.dim,
                sigma2: grid.sigma2,
                correlation: Correlation::Uniform(rho),
                norm: grid.norm,
                epsilon: grid.epsilon,
                trials: grid.trials,
                seed: grid.seed.wrapping_add(rows.len() as u64),
            };
            let report = monte_carlo_vulnerability(&config)?;
            rows.push(TheoryRow {
                team_size: n,
                correlation: rho,
                theoretical_sq: report.theoretical * report.theoretical,
                pass: report.relative_error_sq <= grid.tolerance,
                report,
            });
        }
    }
    Ok(rows)
}
