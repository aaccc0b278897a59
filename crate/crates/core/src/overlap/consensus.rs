//! Robust match verification by fitting a smooth displacement field.
//!
//! Each candidate match `i` contributes a point `x_i` (its position in the
//! first image) and a displacement `y_i` (second position minus first). The
//! displacements are modelled as a two-component mixture: inliers follow a
//! smooth field `f` in a Gaussian-kernel RKHS plus isotropic Gaussian noise,
//! outliers are uniform over the image area. EM alternates posterior
//! computation with a weighted kernel ridge fit of `f` and closed-form noise
//! and mixing updates. The objective
//!
//! ```text
//! J = sum_i log( g * N(y_i - f(x_i); s2) + (1 - g) / area ) - (ridge / 2) * ||f||^2
//! ```
//!
//! is non-decreasing over iterations, and is recorded for every iterate.
//! Coordinates are divided by the image diagonal before fitting so the ridge
//! weight does not depend on image resolution; `J` is reported in those units.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

use super::keypoints::KeypointSet;
use super::matching::MatchSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsensusParams {
    /// Gaussian kernel width in pixels; `None` uses a quarter of the image diagonal.
    pub kernel_bandwidth: Option<f64>,
    pub outlier_rate_init: f64,
    /// Initial noise variance in px^2; `None` derives it from the raw displacements.
    pub noise_var_init: Option<f64>,
    pub max_iters: usize,
    /// Convergence threshold on the change of the objective.
    pub tol: f64,
    /// RKHS norm penalty.
    pub ridge: f64,
    /// Lower bound on the noise variance, px^2.
    pub min_noise_var: f64,
    /// Matches beyond this count are fitted with a subset of kernel centers.
    pub max_basis: usize,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        Self {
            kernel_bandwidth: None,
            outlier_rate_init: 0.5,
            noise_var_init: None,
            max_iters: 50,
            tol: 1e-6,
            ridge: 3.0,
            min_noise_var: 1e-4,
            max_basis: 300,
        }
    }
}

const MIN_INLIER_RATE: f64 = 0.01;
const MAX_INLIER_RATE: f64 = 0.99;

#[derive(Clone, Debug)]
pub struct ConsensusResult {
    /// The input matches with final posteriors.
    pub matches: MatchSet,
    pub converged: bool,
    pub iterations: usize,
    /// Objective value of every iterate, starting with the initial parameters.
    pub objective: Vec<f64>,
    pub noise_var: f64,
    pub inlier_rate: f64,
}

impl ConsensusResult {
    pub fn inlier_count(&self) -> usize {
        self.matches.inlier_count()
    }
}

struct Field {
    /// Kernel centers, as indices into the match list.
    basis: Vec<usize>,
    /// Full path: `n x n` kernel. Sparse path: `n x r` whitened features
    /// `K_nm V L^-1/2` over the retained eigenpairs of `K_mm`.
    design: DMatrix<f64>,
    /// Full path: kernel coefficients `C`. Sparse path: feature weights, whose
    /// squared norm equals the RKHS norm of the field.
    coef: DMatrix<f64>,
}

impl Field {
    fn new(points: &[[f64; 2]], bandwidth: f64, max_basis: usize) -> Self {
        let n = points.len();
        let basis: Vec<usize> = if n <= max_basis {
            (0..n).collect()
        } else {
            (0..max_basis).map(|i| i * n / max_basis).collect()
        };
        let inv = 1.0 / (2.0 * bandwidth * bandwidth);
        let kern = |p: [f64; 2], q: [f64; 2]| {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            (-(dx * dx + dy * dy) * inv).exp()
        };
        let m = basis.len();
        let k_nm = DMatrix::from_fn(n, m, |i, j| kern(points[i], points[basis[j]]));
        if m == n {
            return Self {
                basis,
                design: k_nm,
                coef: DMatrix::zeros(n, 2),
            };
        }
        // Restricting the field to the span of the retained eigenvectors keeps
        // every M-step an exact maximizer over one fixed function space.
        let k_mm = DMatrix::from_fn(m, m, |i, j| kern(points[basis[i]], points[basis[j]]));
        let eig = k_mm.symmetric_eigen();
        let top = eig.eigenvalues.max();
        let keep: Vec<usize> = (0..m).filter(|&j| eig.eigenvalues[j] > 1e-10 * top).collect();
        let proj = DMatrix::from_fn(m, keep.len(), |i, c| {
            eig.eigenvectors[(i, keep[c])] / eig.eigenvalues[keep[c]].sqrt()
        });
        Self {
            basis,
            design: k_nm * proj,
            coef: DMatrix::zeros(keep.len(), 2),
        }
    }

    fn is_full(&self) -> bool {
        self.basis.len() == self.design.nrows()
    }

    fn predict(&self) -> DMatrix<f64> {
        &self.design * &self.coef
    }

    fn norm_sq(&self) -> f64 {
        if self.is_full() {
            (self.coef.transpose() * &self.design * &self.coef).trace()
        } else {
            self.coef.norm_squared()
        }
    }

    /// Weighted kernel ridge fit maximizing the expected complete-data
    /// objective for posteriors `w` and noise variance `noise_var`.
    fn fit(&mut self, w: &[f64], targets: &DMatrix<f64>, ridge: f64, noise_var: f64) {
        let mu = ridge * noise_var;
        if self.is_full() {
            // (W K + mu I) C = W Y, solved in the symmetric form
            // (W^1/2 K W^1/2 + mu I) Z = W^1/2 Y with C = W^1/2 Z.
            let n = w.len();
            let sw: Vec<f64> = w.iter().map(|v| v.max(0.0).sqrt()).collect();
            let mut a = DMatrix::from_fn(n, n, |i, j| sw[i] * self.design[(i, j)] * sw[j]);
            for i in 0..n {
                a[(i, i)] += mu;
            }
            let rhs = DMatrix::from_fn(n, 2, |i, c| sw[i] * targets[(i, c)]);
            if let Some(z) = solve_spd(a, &rhs) {
                self.coef = DMatrix::from_fn(n, 2, |i, c| sw[i] * z[(i, c)]);
            }
        } else {
            // (P^T W P + mu I) B = P^T W Y
            let wp = DMatrix::from_fn(self.design.nrows(), self.design.ncols(), |i, j| {
                w[i] * self.design[(i, j)]
            });
            let mut a = self.design.transpose() * &wp;
            for i in 0..a.nrows() {
                a[(i, i)] += mu;
            }
            let rhs = wp.transpose() * targets;
            if let Some(c) = solve_spd(a, &rhs) {
                self.coef = c;
            }
        }
    }
}

fn solve_spd(a: DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    match a.clone().cholesky() {
        Some(ch) => Some(ch.solve(rhs)),
        None => a.lu().solve(rhs),
    }
}

fn log_gauss_2d(r2: f64, var: f64) -> f64 {
    -r2 / (2.0 * var) - (2.0 * std::f64::consts::PI * var).ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct State {
    noise_var: f64,
    inlier_rate: f64,
}

/// Evaluates the objective and the posteriors at the current parameters.
fn e_step(
    residual_sq: &[f64],
    state: &State,
    log_outlier_density: f64,
    penalty: f64,
) -> (f64, Vec<f64>) {
    let log_in = state.inlier_rate.ln();
    let log_out = (1.0 - state.inlier_rate).ln() + log_outlier_density;
    let mut total = 0.0;
    let post = residual_sq
        .iter()
        .map(|&r2| {
            let li = log_in + log_gauss_2d(r2, state.noise_var);
            let lo = log_out;
            let lse = log_add_exp(li, lo);
            total += lse;
            (li - lse).exp().clamp(0.0, 1.0)
        })
        .collect();
    (total - penalty, post)
}

/// Runs the EM consensus filter over `matches` between `a` and `b`.
///
/// Never fails on non-convergence: the last iterate is returned with
/// `converged = false`.
pub fn consensus_filter(
    matches: &MatchSet,
    a: &KeypointSet,
    b: &KeypointSet,
    params: &ConsensusParams,
) -> Result<ConsensusResult> {
    matches.validate(a, b)?;
    if !(0.0..1.0).contains(&params.outlier_rate_init) {
        return Err(Error::Validation(format!(
            "outlier rate {} outside [0, 1)",
            params.outlier_rate_init
        )));
    }
    let n = matches.len();
    if n == 0 {
        return Ok(ConsensusResult {
            matches: MatchSet::default(),
            converged: true,
            iterations: 0,
            objective: Vec::new(),
            noise_var: params.noise_var_init.unwrap_or(params.min_noise_var),
            inlier_rate: 1.0 - params.outlier_rate_init,
        });
    }

    let scale = a.extent.diagonal().max(1.0);
    let scale2 = scale * scale;
    let points: Vec<[f64; 2]> = matches
        .pairs
        .iter()
        .map(|m| {
            let p = a.keypoints[m.a].position;
            [f64::from(p[0]) / scale, f64::from(p[1]) / scale]
        })
        .collect();
    let targets = DMatrix::from_fn(n, 2, |i, c| {
        let m = &matches.pairs[i];
        (f64::from(b.keypoints[m.b].position[c]) - f64::from(a.keypoints[m.a].position[c])) / scale
    });
    let area = b.extent.area().max(1.0) / scale2;
    let log_outlier_density = -area.ln();
    let bandwidth = params
        .kernel_bandwidth
        .map_or(0.25, |h| h / scale)
        .max(1e-9);
    let min_noise_var = params.min_noise_var / scale2;

    let mut field = Field::new(&points, bandwidth, params.max_basis.max(1));
    let residuals = |field: &Field| -> Vec<f64> {
        let pred = field.predict();
        (0..n)
            .map(|i| {
                let dx = targets[(i, 0)] - pred[(i, 0)];
                let dy = targets[(i, 1)] - pred[(i, 1)];
                dx * dx + dy * dy
            })
            .collect()
    };

    let mut r2 = residuals(&field);
    let init_var = params
        .noise_var_init
        .map(|v| v / scale2)
        .unwrap_or_else(|| r2.iter().sum::<f64>() / (2.0 * n as f64));
    let mut state = State {
        noise_var: init_var.max(min_noise_var),
        inlier_rate: (1.0 - params.outlier_rate_init).clamp(MIN_INLIER_RATE, MAX_INLIER_RATE),
    };

    let mut objective = Vec::with_capacity(params.max_iters + 1);
    let mut converged = false;
    let mut iterations = 0;
    let (j0, mut post) = e_step(&r2, &state, log_outlier_density, 0.0);
    objective.push(j0);
    while iterations < params.max_iters {
        iterations += 1;
        field.fit(&post, &targets, params.ridge, state.noise_var);
        r2 = residuals(&field);
        let wsum: f64 = post.iter().sum();
        if wsum > 0.0 {
            let wr: f64 = post.iter().zip(&r2).map(|(p, r)| p * r).sum();
            state.noise_var = (wr / (2.0 * wsum)).max(min_noise_var);
        }
        state.inlier_rate = (wsum / n as f64).clamp(MIN_INLIER_RATE, MAX_INLIER_RATE);
        let penalty = 0.5 * params.ridge * field.norm_sq();
        let (j, p) = e_step(&r2, &state, log_outlier_density, penalty);
        post = p;
        let prev = *objective.last().unwrap();
        objective.push(j);
        if (j - prev).abs() < params.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!(
            "consensus filter did not converge in {} iterations (images {} -> {})",
            params.max_iters,
            a.image_id,
            b.image_id
        );
    }

    let mut out = matches.clone();
    for (m, p) in out.pairs.iter_mut().zip(&post) {
        m.posterior = *p;
    }
    Ok(ConsensusResult {
        matches: out,
        converged,
        iterations,
        objective,
        noise_var: state.noise_var * scale2,
        inlier_rate: state.inlier_rate,
    })
}
