//! Feynman–Kac semigroup estimators on the total and reduced spaces,
//! group averaging, and the two-sided reduction-identity experiment.
//!
//! Paths fan out over a rayon pool in fixed-size blocks; per-block sums
//! accumulate in path order and blocks fold in block order, so estimates
//! are byte-reproducible for any worker count. Common random numbers
//! couple the two sides of the identity through the shared channel-slot
//! streams.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filtering::{self, RepChannel};
use crate::group::{GroupElement, HaarQuadrature};
use crate::model::Model;
use crate::reduction;
use crate::sde::{self, ProcessKind, ReducedCoordSystem, SdeSystem, SimState};

const BLOCK: u64 = 1024;

/// A scalar Monte Carlo estimate with its sampling metadata.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub t_a: f64,
    pub t_b: f64,
    pub seed: u64,
}

/// A matrix-valued estimate (channel semigroups).
#[derive(Debug, Clone)]
pub struct MatrixEstimate {
    pub value: DMatrix<Complex64>,
    pub stderr: DMatrix<f64>,
    pub n_paths: usize,
    pub dt: f64,
    pub t_a: f64,
    pub t_b: f64,
    pub seed: u64,
}

/// Run configuration shared by the estimators.
#[derive(Debug, Clone)]
pub struct McRun {
    pub t_a: f64,
    pub t_b: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub workers: usize,
    pub antithetic: bool,
}

impl McRun {
    pub fn new(t_b: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        McRun {
            t_a: 0.0,
            t_b,
            dt,
            n_paths,
            seed,
            workers: 2,
            antithetic: false,
        }
    }
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

/// Deterministic block-parallel mean/stderr of a per-path functional.
pub fn monte_carlo_scalar<F>(run: &McRun, per_path: F) -> Result<Estimate>
where
    F: Fn(u64, bool) -> Result<f64> + Sync,
{
    if run.n_paths == 0 {
        return Err(Error::Ensemble("n_paths = 0".into()));
    }
    let n = run.n_paths as u64;
    let n_blocks = n.div_ceil(BLOCK);
    let results: Result<Vec<(f64, f64)>> = pool(run.workers).install(|| {
        (0..n_blocks)
            .into_par_iter()
            .map(|b| {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for pid in b * BLOCK..((b + 1) * BLOCK).min(n) {
                    // antithetic pairing: second half of the ensemble
                    // replays the first half's streams with flipped signs
                    let (path, negate) = if run.antithetic && pid >= n / 2 {
                        (pid - n / 2, true)
                    } else {
                        (pid, false)
                    };
                    let v = per_path(path, negate)?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("path {pid} functional")));
                    }
                    sum += v;
                    sum_sq += v * v;
                }
                Ok((sum, sum_sq))
            })
            .collect()
    });
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for (s, q) in results? {
        sum += s;
        sum_sq += q;
    }
    let nf = run.n_paths as f64;
    let mean = sum / nf;
    let var = (sum_sq / nf - mean * mean).max(0.0);
    Ok(Estimate {
        value: mean,
        stderr: (var / nf).sqrt(),
        n_paths: run.n_paths,
        dt: run.dt,
        t_a: run.t_a,
        t_b: run.t_b,
        seed: run.seed,
    })
}

/// E[φ₀(η(t_b)) exp{(1/μ²κm)∫V du}] over original-process paths.
pub fn semigroup_total(
    model: &dyn Model,
    run: &McRun,
    start: &SimState,
    phi0: &(dyn Fn(&SimState) -> f64 + Sync),
) -> Result<Estimate> {
    let sys = sde::OriginalSystem::new(model);
    let fk = model.params().fk_weight();
    monte_carlo_scalar(run, |pid, negate| {
        let (end, pot) = sde::simulate_with(
            &sys,
            start,
            run.t_a,
            run.t_b,
            run.dt,
            run.seed,
            pid,
            negate,
            |_, _, _| Ok(()),
        )?;
        Ok(phi0(&end) * (fk * pot).exp())
    })
}

/// E over ξ̃-paths of
/// φ(end) · exp{(1/μ²κm)∫Ṽ du} · (d_b/d_a)^{1/4} · exp{−⅛μ²κ∫(Δσ+¼⟨∂σ,∂σ⟩)du}.
pub fn semigroup_reduced_zero(
    model: &dyn Model,
    run: &McRun,
    x0: &DVector<f64>,
    f0: &DVector<f64>,
    phi: &(dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Sync),
) -> Result<Estimate> {
    let sys = ReducedCoordSystem::reduced(model);
    let fk = model.params().fk_weight();
    let mu2k = model.params().mu2k();
    let dims = model.dims();
    let start = SimState::from_reduced(x0, f0, 0, model.group());
    monte_carlo_scalar(run, |pid, negate| {
        let mut acc = reduction::FunctionalAccumulator::new(model);
        let (end, pot) = sde::simulate_with(
            &sys,
            &start,
            run.t_a,
            run.t_b,
            run.dt,
            run.seed,
            pid,
            negate,
            |state, dw, dt| acc.on_step(state, dw, dt),
        )?;
        let fs = acc.finish(&end, pot)?;
        let xe = end.z.rows(0, dims.base).into_owned();
        let fe = end.z.rows(dims.base, dims.fiber).into_owned();
        Ok(phi(&xe, &fe)
            * (fk * fs.potential_integral).exp()
            * fs.boundary_factor
            * (-0.125 * mu2k * fs.jacobian_integral).exp())
    })
}

/// E[φ(ξ(t_b)) exp{(1/μ²κm)∫Ṽ du}] over ξ-paths (drift b, no Jacobian):
/// the trivial-channel form of the channel semigroup.
pub fn semigroup_reduced_xi(
    model: &dyn Model,
    run: &McRun,
    x0: &DVector<f64>,
    f0: &DVector<f64>,
    phi: &(dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Sync),
) -> Result<Estimate> {
    let sys = ReducedCoordSystem::filtered(model);
    let fk = model.params().fk_weight();
    let dims = model.dims();
    let start = SimState::from_reduced(x0, f0, 0, model.group());
    monte_carlo_scalar(run, |pid, negate| {
        let (end, pot) = sde::simulate_with(
            &sys,
            &start,
            run.t_a,
            run.t_b,
            run.dt,
            run.seed,
            pid,
            negate,
            |_, _, _| Ok(()),
        )?;
        let xe = end.z.rows(0, dims.base).into_owned();
        let fe = end.z.rows(dims.base, dims.fiber).into_owned();
        Ok(phi(&xe, &fe) * (fk * pot).exp())
    })
}

/// Matrix channel semigroup E[c(ξ(t_b))ᵀ (⃖exp)^λ] with the Feynman–Kac
/// weight; multiplying by D^λ(θ₀) and tracing gives the channel's
/// contribution to the total semigroup.
pub fn semigroup_channel(
    model: &dyn Model,
    run: &McRun,
    x0: &DVector<f64>,
    f0: &DVector<f64>,
    ch: &RepChannel,
    c_fn: &(dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<Complex64> + Sync),
) -> Result<MatrixEstimate> {
    let sys = ReducedCoordSystem::filtered(model);
    let fk = model.params().fk_weight();
    let dims = model.dims();
    let d = ch.dim;
    let start = SimState::from_reduced(x0, f0, 0, model.group());
    let n = run.n_paths as u64;
    let n_blocks = n.div_ceil(BLOCK);
    let results: Result<Vec<(DMatrix<Complex64>, DMatrix<f64>)>> = pool(run.workers).install(|| {
        (0..n_blocks)
            .into_par_iter()
            .map(|b| {
                let mut sum = DMatrix::<Complex64>::zeros(d, d);
                let mut sum_sq = DMatrix::<f64>::zeros(d, d);
                for pid in b * BLOCK..((b + 1) * BLOCK).min(n) {
                    let path =
                        sde::simulate(&sys, &start, run.t_a, run.t_b, run.dt, run.seed, pid, false)?;
                    let mi = filtering::multiplicative_integral(model, &path, ch)?;
                    let end = path.end();
                    let xe = end.z.rows(0, dims.base).into_owned();
                    let fe = end.z.rows(dims.base, dims.fiber).into_owned();
                    let weight = (fk * path.potential_integral).exp();
                    let v = c_fn(&xe, &fe).transpose() * &mi.value * Complex64::new(weight, 0.0);
                    for i in 0..d {
                        for j in 0..d {
                            sum[(i, j)] += v[(i, j)];
                            sum_sq[(i, j)] += v[(i, j)].norm_sqr();
                        }
                    }
                }
                Ok((sum, sum_sq))
            })
            .collect()
    });
    let mut sum = DMatrix::<Complex64>::zeros(d, d);
    let mut sum_sq = DMatrix::<f64>::zeros(d, d);
    for (s, q) in results? {
        sum += s;
        sum_sq += q;
    }
    let nf = run.n_paths as f64;
    let mean = sum / Complex64::new(nf, 0.0);
    let mut stderr = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let var = (sum_sq[(i, j)] / nf - mean[(i, j)].norm_sqr()).max(0.0);
            stderr[(i, j)] = (var / nf).sqrt();
        }
    }
    Ok(MatrixEstimate {
        value: mean,
        stderr,
        n_paths: run.n_paths,
        dt: run.dt,
        t_a: run.t_a,
        t_b: run.t_b,
        seed: run.seed,
    })
}

/// Haar-quadrature average of per-node kernel samples.
pub fn group_average(quad: &HaarQuadrature, samples: &[Complex64]) -> Result<Complex64> {
    if samples.len() != quad.nodes.len() {
        return Err(Error::Ensemble(format!(
            "sample count {} does not match quadrature nodes {}",
            samples.len(),
            quad.nodes.len()
        )));
    }
    Ok(samples
        .iter()
        .zip(&quad.weights)
        .map(|(s, w)| s * Complex64::new(*w, 0.0))
        .sum())
}

/// Outcome of the two-sided reduction-identity experiment.
#[derive(Debug, Clone)]
pub struct IdentityReport {
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub difference: f64,
    pub combined_sigma: f64,
    pub relative: f64,
    pub pass_3sigma: bool,
}

/// Weak-form zero-momentum reduction identity: the reduced-side estimate
/// (ξ̃ with Jacobian and boundary factors) against the total-space
/// estimate of the lifted invariant observable, from matching start
/// points (x_a, f̃_a) ↔ (Q*(x_a), f̃_a, a = e).
pub fn reduction_identity_experiment(
    model: &dyn Model,
    run: &McRun,
    x0: &DVector<f64>,
    f0: &DVector<f64>,
    phi: &(dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Sync),
) -> Result<IdentityReport> {
    let lhs = semigroup_reduced_zero(model, run, x0, f0, phi)?;

    let q0 = model.action(
        &model.section(x0, 0),
        &GroupElement::identity(model.group()),
        0,
    );
    let dims = model.dims();
    let start_total = SimState {
        z: {
            let mut z = DVector::zeros(dims.p + dims.fiber);
            z.rows_mut(0, dims.p).copy_from(&q0);
            z.rows_mut(dims.p, dims.fiber).copy_from(f0);
            z
        },
        chart: 0,
        frame: GroupElement::identity(model.group()),
    };
    let phi0 = |state: &SimState| -> f64 {
        let tot = crate::model::TotalState {
            q: state.z.rows(0, dims.p).into_owned(),
            f: state.z.rows(dims.p, dims.fiber).into_owned(),
            chart: state.chart,
            frame: state.frame,
        };
        match model.project(&tot) {
            Ok(p) => phi(&p.x, &p.f),
            Err(_) => f64::NAN,
        }
    };
    let rhs = semigroup_total(model, run, &start_total, &phi0)?;

    let difference = lhs.value - rhs.value;
    let combined_sigma = (lhs.stderr * lhs.stderr + rhs.stderr * rhs.stderr).sqrt();
    let scale = rhs.value.abs().max(1e-12);
    Ok(IdentityReport {
        difference,
        combined_sigma,
        relative: difference.abs() / scale,
        pass_3sigma: difference.abs() < 3.0 * combined_sigma,
        lhs,
        rhs,
    })
}

/// Start-point lift helper shared by experiments: reduced (x, f̃) and the
/// corresponding total-space state on the section.
pub fn section_lift(model: &dyn Model, x0: &DVector<f64>, f0: &DVector<f64>) -> SimState {
    let dims = model.dims();
    let q0 = model.action(
        &model.section(x0, 0),
        &GroupElement::identity(model.group()),
        0,
    );
    SimState {
        z: {
            let mut z = DVector::zeros(dims.p + dims.fiber);
            z.rows_mut(0, dims.p).copy_from(&q0);
            z.rows_mut(dims.p, dims.fiber).copy_from(f0);
            z
        },
        chart: 0,
        frame: GroupElement::identity(model.group()),
    }
}

/// Simulate an ensemble of reduced-coordinate paths and return them
/// (used by the law-equivalence and channel tests).
pub fn reduced_ensemble(
    model: &dyn Model,
    kind: ProcessKind,
    run: &McRun,
    x0: &DVector<f64>,
    f0: &DVector<f64>,
) -> Result<Vec<sde::PathSample>> {
    let start = SimState::from_reduced(x0, f0, 0, model.group());
    let sys_a;
    let sys_f;
    let sys_r;
    let sys: &dyn SdeSystem = match kind {
        ProcessKind::Adapted => {
            sys_a = ReducedCoordSystem::adapted(model);
            &sys_a
        }
        ProcessKind::Filtered => {
            sys_f = ReducedCoordSystem::filtered(model);
            &sys_f
        }
        ProcessKind::Reduced => {
            sys_r = ReducedCoordSystem::reduced(model);
            &sys_r
        }
        ProcessKind::Original => {
            return Err(Error::Ensemble(
                "reduced_ensemble needs a reduced-coordinate kind".into(),
            ))
        }
    };
    pool(run.workers).install(|| {
        (0..run.n_paths as u64)
            .into_par_iter()
            .map(|pid| sde::simulate(sys, &start, run.t_a, run.t_b, run.dt, run.seed, pid, false))
            .collect()
    })
}
