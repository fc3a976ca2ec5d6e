//! L1-wavelet regularized SENSE reconstruction solved with FISTA.
//!
//! Minimizes `1/2 sum_q ||P F S_q x - y_q||^2 + lambda ||Psi x||_1` over the
//! whole contrast stack at once. Contrasts share the operator and `Psi` acts
//! per contrast, so there is no temporal coupling.

use std::io::Write;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{
    max_eigenvalue, ContrastStack, EigenStatus, EncodingError, MultiCoilKSpace, SamplingMask,
    SenseOperator, SensitivityMaps, POWER_ITERATIONS,
};
use crate::sparsity::{self, WaveletError};
use crate::{c64, par};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub lambda: f64,
    pub iterations: usize,
    /// Function-value restart of the momentum sequence.
    pub restart: bool,
    pub power_iterations: usize,
    /// Step is `step_safety / lambda_max`.
    pub step_safety: f64,
    pub wavelet_levels: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            iterations: 100,
            restart: true,
            power_iterations: POWER_ITERATIONS,
            step_safety: 0.95,
            wavelet_levels: sparsity::DEFAULT_LEVELS,
        }
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("objective became non-finite at iteration {iteration} (data fidelity {fidelity}, l1 {l1})")]
    NonFinite {
        iteration: usize,
        fidelity: f64,
        l1: f64,
    },
}

/// Convergence record of one solve. Objective values refer to the
/// normalized problem (data scaled so that `max |E^H y| = 1`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveReport {
    /// Objective of the initial iterate followed by one value per iteration.
    pub objective: Vec<f64>,
    /// `||E x - y|| / ||y||` alongside each objective value.
    pub residual: Vec<f64>,
    pub iterations: usize,
    pub restarts: usize,
    pub lambda_max: f64,
    /// Factor the data were divided by before solving.
    pub scale: f64,
    pub warnings: Vec<String>,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        self.residual.last().copied().unwrap_or(0.0)
    }

    pub fn final_objective(&self) -> f64 {
        self.objective.last().copied().unwrap_or(0.0)
    }

    /// `iteration,objective,residual` rows; iteration 0 is the initial iterate.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "objective", "residual"])?;
        for (i, (o, r)) in self.objective.iter().zip(&self.residual).enumerate() {
            wr.write_record([i.to_string(), format!("{o:.12e}"), format!("{r:.12e}")])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Proximal map of `t ||Psi x||_1` applied contrast by contrast.
pub fn stack_prox(x: &ContrastStack, levels: usize, t: f64) -> Result<ContrastStack, WaveletError> {
    let (nt, ny, nx) = x.dim();
    let planes = par::map_indices(nt, |i| sparsity::wavelet_prox(x.index_axis(Axis(0), i), levels, t));
    let mut out = ContrastStack::zeros((nt, ny, nx));
    for (i, p) in planes.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&p?);
    }
    Ok(out)
}

/// `sum_t ||Psi x_t||_1` over detail coefficients.
pub fn stack_l1(x: &ContrastStack, levels: usize) -> Result<f64, WaveletError> {
    let nt = x.len_of(Axis(0));
    let parts = par::map_indices(nt, |i| {
        sparsity::dwt2(x.index_axis(Axis(0), i), levels).map(|w| w.detail_l1())
    });
    parts.into_iter().sum()
}

fn sq_dist(a: &Array4<c64>, b: &Array4<c64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum()
}

struct Problem<'a> {
    op: SenseOperator<'a>,
    y: Array4<c64>,
    y_norm: f64,
    lambda: f64,
    levels: usize,
}

impl Problem<'_> {
    fn objective(&self, x: &ContrastStack, ex: &Array4<c64>) -> Result<(f64, f64, f64), SolverError> {
        let r2 = sq_dist(ex, &self.y);
        let l1 = if self.lambda > 0.0 {
            stack_l1(x, self.levels)?
        } else {
            0.0
        };
        let residual = if self.y_norm > 0.0 {
            r2.sqrt() / self.y_norm
        } else {
            0.0
        };
        Ok((0.5 * r2 + self.lambda * l1, residual, l1))
    }

    /// `prox(x - alpha E^H (E x - y))` given `E x`.
    fn step(&self, x: &ContrastStack, ex: &Array4<c64>, alpha: f64) -> Result<ContrastStack, SolverError> {
        let r = ex - &self.y;
        let grad = self.op.adjoint(r.view())?;
        let moved = x - &grad.mapv(|g| g * alpha);
        Ok(if self.lambda > 0.0 {
            stack_prox(&moved, self.levels, alpha * self.lambda)?
        } else {
            moved
        })
    }
}

/// Solve the regularized SENSE problem and return the image and a report.
pub fn solve_espirit(
    y: &MultiCoilKSpace,
    maps: &SensitivityMaps,
    mask: &SamplingMask,
    cfg: &SolverConfig,
) -> Result<(ContrastStack, SolveReport), SolverError> {
    if cfg.lambda < 0.0 || !cfg.lambda.is_finite() {
        return Err(SolverError::InvalidConfig(format!("lambda = {}", cfg.lambda)));
    }
    if cfg.iterations == 0 {
        return Err(SolverError::InvalidConfig("iterations must be >= 1".into()));
    }
    let op = SenseOperator::new(maps, mask)?;
    let (nt, _, ny, nx) = y.data.dim();
    let levels = sparsity::max_levels(ny, nx, cfg.wavelet_levels);
    let mut report = SolveReport::default();

    let aty = op.adjoint(y.data.view())?;
    let scale = aty.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        let msg = "zero data: returning the zero image".to_string();
        log::warn!("{msg}");
        report.warnings.push(msg);
        report.objective.push(0.0);
        report.residual.push(0.0);
        return Ok((ContrastStack::zeros((nt, ny, nx)), report));
    }
    report.scale = scale;

    let eig = max_eigenvalue(maps, mask, cfg.power_iterations.max(1))?;
    report.lambda_max = eig.value;
    if eig.status == EigenStatus::ZeroOperator || eig.value <= 0.0 {
        return Err(SolverError::InvalidConfig(
            "encoding operator has no positive eigenvalue".into(),
        ));
    }
    let alpha = cfg.step_safety / eig.value;

    let yn = y.data.mapv(|v| v / scale);
    let y_norm = yn.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let prob = Problem {
        op,
        y: yn,
        y_norm,
        lambda: cfg.lambda,
        levels,
    };

    // start from the zero-filled adjoint image
    let mut x = aty.mapv(|v| v / scale);
    let mut ex = prob.op.forward(x.view())?;
    let (mut f, res, _) = prob.objective(&x, &ex)?;
    report.objective.push(f);
    report.residual.push(res);

    let mut x_prev = x.clone();
    let mut ex_prev = ex.clone();
    let mut t = 1.0f64;

    for it in 1..=cfg.iterations {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        let (z, ez) = if beta > 0.0 {
            (
                &x + &(&x - &x_prev).mapv(|v| v * beta),
                &ex + &(&ex - &ex_prev).mapv(|v| v * beta),
            )
        } else {
            (x.clone(), ex.clone())
        };
        let mut cand = prob.step(&z, &ez, alpha)?;
        let mut e_cand = prob.op.forward(cand.view())?;
        let (mut f_cand, mut r_cand, mut l1) = prob.objective(&cand, &e_cand)?;
        let mut t_new = t_next;

        if cfg.restart && f_cand > f && beta > 0.0 {
            // momentum overshoot: restart with a plain proximal-gradient step
            report.restarts += 1;
            cand = prob.step(&x, &ex, alpha)?;
            e_cand = prob.op.forward(cand.view())?;
            (f_cand, r_cand, l1) = prob.objective(&cand, &e_cand)?;
            t_new = 1.0;
        }
        if !f_cand.is_finite() {
            return Err(SolverError::NonFinite {
                iteration: it,
                fidelity: f_cand - cfg.lambda * l1,
                l1,
            });
        }

        if cfg.restart && f_cand > f {
            // step size exceeded 1/L (eigenvalue underestimate); keep x
            report
                .warnings
                .push(format!("iteration {it}: no descent, iterate kept"));
            x_prev = x.clone();
            ex_prev = ex.clone();
            t = 1.0;
            report.objective.push(f);
            report.residual.push(*report.residual.last().expect("initial residual"));
        } else {
            x_prev = std::mem::replace(&mut x, cand);
            ex_prev = std::mem::replace(&mut ex, e_cand);
            f = f_cand;
            t = t_new;
            report.objective.push(f_cand);
            report.residual.push(r_cand);
        }
        report.iterations = it;
    }

    x.mapv_inplace(|v| v * scale);
    Ok((x, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{ifft2c, sense_forward};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_maps(n: usize) -> SensitivityMaps {
        SensitivityMaps::from_maps(Array3::from_elem((1, n, n), c64::new(1.0, 0.0)))
    }

    fn random_stack(nt: usize, n: usize, seed: u64) -> ContrastStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ContrastStack::from_shape_fn((nt, n, n), |_| {
            c64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    #[test]
    fn zero_data_gives_zero() {
        let maps = unit_maps(16);
        let mask = SamplingMask::full(16, 16);
        let y = MultiCoilKSpace {
            data: Array4::zeros((2, 1, 16, 16)),
            mask: mask.clone(),
        };
        let (x, rep) = solve_espirit(&y, &maps, &mask, &SolverConfig::default()).unwrap();
        assert!(x.iter().all(|v| v.norm() == 0.0));
        assert_eq!(rep.warnings.len(), 1);
    }

    #[test]
    fn unregularized_unitary_case_is_inverse_fft() {
        let maps = unit_maps(16);
        let mask = SamplingMask::full(16, 16);
        let x = random_stack(2, 16, 4);
        let y = sense_forward(&x, &maps, &mask).unwrap();
        let cfg = SolverConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let (xe, rep) = solve_espirit(&y, &maps, &mask, &cfg).unwrap();
        for t in 0..2 {
            let direct = ifft2c(y.data.slice(ndarray::s![t, 0, .., ..]));
            let d = &direct - &xe.index_axis(Axis(0), t);
            assert!(d.iter().all(|v| v.norm() < 1e-6));
        }
        assert!(rep.final_residual() <= 1e-6);
    }

    #[test]
    fn rejects_bad_config() {
        let maps = unit_maps(8);
        let mask = SamplingMask::full(8, 8);
        let y = MultiCoilKSpace {
            data: Array4::zeros((1, 1, 8, 8)),
            mask: mask.clone(),
        };
        let cfg = SolverConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            solve_espirit(&y, &maps, &mask, &cfg),
            Err(SolverError::InvalidConfig(_))
        ));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rep = SolveReport {
            objective: vec![2.0, 1.0],
            residual: vec![0.5, 0.25],
            iterations: 1,
            ..Default::default()
        };
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("iteration,objective,residual"));
    }
}
