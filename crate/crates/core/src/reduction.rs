//! Girsanov change of measure between the reduced-drift process ξ̃ and
//! the full reduced process ξ, and the closed-form zero-momentum
//! reduction Jacobian.
//!
//! σ = ln d (the log orbit-metric determinant) drives everything: the
//! drift difference is b − b̃ = g⁻¹·½∇σ, the Radon–Nikodym density along
//! ξ̃-paths is exp{¼μ√κ ∫ (X̃ᵀ∇σ)·dw̃ − (μ²κ/32) ∫ ⟨∂σ,∂σ⟩ du} (Itô
//! form), and its pathwise closed form is
//! (d_b/d_a)^{1/4} exp{−⅛μ²κ ∫ (Δ_M̃σ + ¼⟨∂σ,∂σ⟩) du}.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry;
use crate::model::Model;
use crate::sde::{self, PathSample, ProcessKind};

/// σ = ln d with gradient and Hessian blocks over (x, f̃).
#[derive(Debug, Clone)]
pub struct SigmaDerivatives {
    pub sigma: f64,
    pub grad_x: DVector<f64>,
    pub grad_f: DVector<f64>,
    pub hess_xx: DMatrix<f64>,
    pub hess_xf: DMatrix<f64>,
    pub hess_ff: DMatrix<f64>,
}

const SIGMA_FD_STEP: f64 = 1e-4;

/// σ-derivatives: analytic for models that register them, otherwise
/// central differences of ln det d (step 1e-4).
pub fn sigma_derivatives(
    model: &dyn Model,
    x: &DVector<f64>,
    f: &DVector<f64>,
    chart: usize,
) -> Result<SigmaDerivatives> {
    if let Some(s) = model.sigma_analytic(x, f, chart) {
        return Ok(SigmaDerivatives {
            sigma: s.sigma,
            grad_x: s.grad_x,
            grad_f: s.grad_f,
            hess_xx: s.hess_xx,
            hess_xf: s.hess_xf,
            hess_ff: s.hess_ff,
        });
    }
    let dims = model.dims();
    let h = SIGMA_FD_STEP;
    let ln_d = |x: &DVector<f64>, f: &DVector<f64>| -> Result<f64> {
        Ok(geometry::evaluate(model, x, f, chart)?.d_det.ln())
    };
    let s0 = ln_d(x, f)?;
    let n = dims.base + dims.fiber;
    let shift = |i: usize, d: f64, x: &DVector<f64>, f: &DVector<f64>| {
        let mut xs = x.clone();
        let mut fs = f.clone();
        if i < dims.base {
            xs[i] += d;
        } else {
            fs[i - dims.base] += d;
        }
        (xs, fs)
    };
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let (xp, fp) = shift(i, h, x, f);
        let sp = ln_d(&xp, &fp)?;
        let (xm, fm) = shift(i, -h, x, f);
        let sm = ln_d(&xm, &fm)?;
        grad[i] = (sp - sm) / (2.0 * h);
        hess[(i, i)] = (sp - 2.0 * s0 + sm) / (h * h);
        for j in (i + 1)..n {
            let (xa, fa) = shift(i, h, x, f);
            let (xa, fa) = shift(j, h, &xa, &fa);
            let pp = ln_d(&xa, &fa)?;
            let (xb, fb) = shift(i, h, x, f);
            let (xb, fb) = shift(j, -h, &xb, &fb);
            let pm = ln_d(&xb, &fb)?;
            let (xc, fc) = shift(i, -h, x, f);
            let (xc, fc) = shift(j, h, &xc, &fc);
            let mp = ln_d(&xc, &fc)?;
            let (xd, fd) = shift(i, -h, x, f);
            let (xd, fd) = shift(j, -h, &xd, &fd);
            let mm = ln_d(&xd, &fd)?;
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(SigmaDerivatives {
        sigma: s0,
        grad_x: grad.rows(0, dims.base).into_owned(),
        grad_f: grad.rows(dims.base, dims.fiber).into_owned(),
        hess_xx: hess.view((0, 0), (dims.base, dims.base)).into_owned(),
        hess_xf: hess
            .view((0, dims.base), (dims.base, dims.fiber))
            .into_owned(),
        hess_ff: hess
            .view((dims.base, dims.base), (dims.fiber, dims.fiber))
            .into_owned(),
    })
}

/// Everything the per-step reduction functionals need at one point,
/// assembled from the model's analytic hooks when present.
pub struct PointCache {
    pub sigma: SigmaDerivatives,
    /// Reduced inverse-metric blocks.
    pub h_inv: DMatrix<f64>,
    pub mix: DMatrix<f64>,
    pub ghat: DMatrix<f64>,
    /// b̃ drifts, bare.
    pub bt_x: DVector<f64>,
    pub bt_f: DVector<f64>,
    /// Filtered diffusion blocks, bare.
    pub xt_xm: DMatrix<f64>,
    pub xt_fm: DMatrix<f64>,
    pub xt_fb: DMatrix<f64>,
}

pub fn point_cache(
    model: &dyn Model,
    x: &DVector<f64>,
    f: &DVector<f64>,
    chart: usize,
) -> Result<PointCache> {
    let sigma = sigma_derivatives(model, x, f, chart)?;
    if let Some(c) = model.reduced_coefficients_analytic(x, f, chart) {
        let h_inv = &c.xt_xm * c.xt_xm.transpose();
        let mix = &c.xt_xm * c.xt_fm.transpose();
        let ghat = &c.xt_fm * c.xt_fm.transpose() + &c.xt_fb * c.xt_fb.transpose();
        return Ok(PointCache {
            sigma,
            h_inv,
            mix,
            ghat,
            bt_x: c.bt_x,
            bt_f: c.bt_f,
            xt_xm: c.xt_xm,
            xt_fm: c.xt_fm,
            xt_fb: c.xt_fb,
        });
    }
    let blocks = geometry::evaluate(model, x, f, chart)?;
    let dd = sde::drift_data(model, x, f, chart)?;
    let fb = sde::solve_filtered_diffusion(
        model,
        &blocks,
        &crate::group::GroupElement::identity(model.group()),
    )?;
    Ok(PointCache {
        sigma,
        h_inv: blocks.h_inv.clone(),
        mix: blocks.mix.clone(),
        ghat: blocks.ghat.clone(),
        bt_x: dd.bt_x,
        bt_f: dd.bt_f,
        xt_xm: fb.xt_xm,
        xt_fm: fb.xt_fm,
        xt_fb: fb.xt_fb,
    })
}

impl PointCache {
    /// Δ_M̃σ + ¼⟨∂σ,∂σ⟩_M̃ at this point.
    pub fn jacobian_integrand(&self) -> f64 {
        let laplace = (&self.h_inv * &self.sigma.hess_xx).trace()
            + 2.0 * (&self.mix * self.sigma.hess_xf.transpose()).trace()
            + (&self.ghat * &self.sigma.hess_ff).trace()
            + self.bt_x.dot(&self.sigma.grad_x)
            + self.bt_f.dot(&self.sigma.grad_f);
        laplace + 0.25 * self.grad_quadratic_form()
    }

    /// ⟨∂σ,∂σ⟩ = ∇σᵀ g_red⁻¹ ∇σ.
    pub fn grad_quadratic_form(&self) -> f64 {
        let gx = &self.sigma.grad_x;
        let gf = &self.sigma.grad_f;
        (gx.transpose() * &self.h_inv * gx)[(0, 0)]
            + 2.0 * (gx.transpose() * &self.mix * gf)[(0, 0)]
            + (gf.transpose() * &self.ghat * gf)[(0, 0)]
    }

    /// X̃ᵀ∇σ per channel: (m̄-block, b̄-block).
    pub fn diffusion_transpose_grad(&self) -> (DVector<f64>, DVector<f64>) {
        let m = self.xt_xm.transpose() * &self.sigma.grad_x
            + self.xt_fm.transpose() * &self.sigma.grad_f;
        let b = self.xt_fb.transpose() * &self.sigma.grad_f;
        (m, b)
    }
}

/// Δ_M̃σ + ¼⟨∂σ,∂σ⟩ at a point.
pub fn jacobian_integrand(
    model: &dyn Model,
    x: &DVector<f64>,
    f: &DVector<f64>,
    chart: usize,
) -> Result<f64> {
    Ok(point_cache(model, x, f, chart)?.jacobian_integrand())
}

/// The reduced drifts b̃ (bare, no ½μ²κ).
pub fn reduced_drifts(
    model: &dyn Model,
    x: &DVector<f64>,
    f: &DVector<f64>,
    chart: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if let Some(c) = model.reduced_coefficients_analytic(x, f, chart) {
        return Ok((c.bt_x, c.bt_f));
    }
    let dd = sde::drift_data(model, x, f, chart)?;
    Ok((dd.bt_x, dd.bt_f))
}

/// All accumulated reduction functionals along one ξ̃ path.
#[derive(Debug, Clone)]
pub struct PathFunctionals {
    /// ∫ Ṽ du (copied from the sample).
    pub potential_integral: f64,
    /// ∫ (Δ_M̃σ + ¼⟨∂σ,∂σ⟩) du, left-point.
    pub jacobian_integral: f64,
    /// (d_b/d_a)^{1/4}.
    pub boundary_factor: f64,
    /// Itô-accumulated log of the Radon–Nikodym derivative dμ^ξ/dμ^ξ̃.
    pub girsanov_log_weight: f64,
    /// Log of the closed-form route: ¼(σ_b − σ_a) − ⅛μ²κ·jacobian_integral.
    pub pathwise_log_weight: f64,
}

/// Streaming accumulator for the reduction functionals: feed it every
/// step of a ξ̃ path as it is generated, then close with the endpoint.
pub struct FunctionalAccumulator<'m> {
    model: &'m dyn Model,
    amp: f64,
    jac_integral: f64,
    log_w: f64,
    sigma_start: Option<f64>,
}

impl<'m> FunctionalAccumulator<'m> {
    pub fn new(model: &'m dyn Model) -> Self {
        let params = model.params();
        FunctionalAccumulator {
            model,
            amp: 0.25 * params.mu * params.kappa.sqrt(),
            jac_integral: 0.0,
            log_w: 0.0,
            sigma_start: None,
        }
    }

    pub fn on_step(
        &mut self,
        state: &crate::sde::SimState,
        dw: &DVector<f64>,
        dt: f64,
    ) -> Result<()> {
        let dims = self.model.dims();
        let x = state.z.rows(0, dims.base).into_owned();
        let f = state.z.rows(dims.base, dims.fiber).into_owned();
        let cache = point_cache(self.model, &x, &f, state.chart)?;
        if self.sigma_start.is_none() {
            self.sigma_start = Some(cache.sigma.sigma);
        }
        self.jac_integral += cache.jacobian_integrand() * dt;
        let (um, ub) = cache.diffusion_transpose_grad();
        // u·dw − ½|u|² dt with u = ¼μ√κ X̃ᵀ∇σ
        let mut udw = 0.0;
        let mut usq = 0.0;
        for i in 0..dims.base {
            udw += self.amp * um[i] * dw[i];
            usq += (self.amp * um[i]).powi(2);
        }
        for a in 0..dims.fiber {
            udw += self.amp * ub[a] * dw[dims.base + a];
            usq += (self.amp * ub[a]).powi(2);
        }
        self.log_w += udw - 0.5 * usq * dt;
        Ok(())
    }

    pub fn finish(
        self,
        end: &crate::sde::SimState,
        potential_integral: f64,
    ) -> Result<PathFunctionals> {
        let dims = self.model.dims();
        let xe = end.z.rows(0, dims.base).into_owned();
        let fe = end.z.rows(dims.base, dims.fiber).into_owned();
        let sigma_end = sigma_derivatives(self.model, &xe, &fe, end.chart)?.sigma;
        let sigma_start = self
            .sigma_start
            .ok_or_else(|| Error::PathContract("no steps accumulated".into()))?;
        let mu2k = self.model.params().mu2k();
        Ok(PathFunctionals {
            potential_integral,
            jacobian_integral: self.jac_integral,
            boundary_factor: (0.25 * (sigma_end - sigma_start)).exp(),
            girsanov_log_weight: self.log_w,
            pathwise_log_weight: 0.25 * (sigma_end - sigma_start)
                - 0.125 * mu2k * self.jac_integral,
        })
    }
}

/// Single pass over a stored reduced-drift path computing the Girsanov
/// weight in both its Itô form and its pathwise closed form.
pub fn path_functionals(model: &dyn Model, path: &PathSample) -> Result<PathFunctionals> {
    if path.kind != ProcessKind::Reduced {
        return Err(Error::PathContract(format!(
            "Girsanov functionals need a reduced-drift (ξ̃) path, got {:?}",
            path.kind
        )));
    }
    if path.increments.len() + 1 != path.states.len() {
        return Err(Error::PathContract("missing increments".into()));
    }
    let mut acc = FunctionalAccumulator::new(model);
    for (k, dw) in path.increments.iter().enumerate() {
        acc.on_step(&path.states[k], dw, path.dt)?;
    }
    acc.finish(path.end(), path.potential_integral)
}

/// The Itô-route Girsanov log-weight alone.
pub fn girsanov_log_weight(model: &dyn Model, path: &PathSample) -> Result<f64> {
    Ok(path_functionals(model, path)?.girsanov_log_weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::GroupElement;
    use crate::model::{builtin, ModelA, ModelId};
    use crate::oracle::ModelAReduced;
    use crate::sde::{simulate, ReducedCoordSystem, SimState};
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    #[test]
    fn sigma_frozen_values_via_generic_route() {
        // Force the finite-difference route by using a Model A clone with
        // the analytic hook bypassed through the geometry path.
        let m = builtin(ModelId::A);
        let s = sigma_derivatives(m.as_ref(), &dvector![0.0], &dvector![1.0, 0.0], 0).unwrap();
        assert_relative_eq!(s.sigma, 2.0_f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(s.grad_f[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(s.grad_f[1], 0.0, epsilon = 1e-9);
        assert!(s.grad_x.norm() < 1e-12);
        // symmetric Hessian
        assert_relative_eq!(s.hess_ff[(0, 1)], s.hess_ff[(1, 0)], epsilon = 1e-10);
        // f̃ = 0 is a critical point of |f̃|²
        let s0 = sigma_derivatives(m.as_ref(), &dvector![0.0], &dvector![0.0, 0.0], 0).unwrap();
        assert!(s0.grad_f.norm() < 1e-9);
    }

    #[test]
    fn sigma_generic_matches_analytic_hook() {
        let m = ModelA {
            charge: 1.6,
            r2: 0.9,
            ..Default::default()
        };
        let x = dvector![0.3];
        let f = dvector![0.7, -1.1];
        let a = m.sigma_analytic(&x, &f, 0).unwrap();
        // generic via geometry of a hook-less stand-in: evaluate d along
        // the finite-difference route directly
        let generic = {
            let ln_d = |xx: &DVector<f64>, ff: &DVector<f64>| {
                geometry::evaluate(&m, xx, ff, 0).unwrap().d_det.ln()
            };
            let h = 1e-5;
            let mut fp = f.clone();
            fp[0] += h;
            let up = ln_d(&x, &fp);
            fp[0] -= 2.0 * h;
            let um = ln_d(&x, &fp);
            (up - um) / (2.0 * h)
        };
        assert_relative_eq!(a.grad_f[0], generic, epsilon = 1e-8);
    }

    #[test]
    fn jacobian_integrand_vanishes_for_charge_zero() {
        let m = ModelA {
            charge: 0.0,
            ..Default::default()
        };
        let v = jacobian_integrand(&m, &dvector![0.5], &dvector![0.8, -0.2], 0).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn jacobian_integrand_matches_independent_stencil_oracle() {
        let m = builtin(ModelId::A);
        let oracle = ModelAReduced {
            r1: 1.0,
            r2: 1.0,
            charge: 1.0,
            mu2k: 1.0,
        };
        for &(f1, f2) in &[(0.0, 0.0), (0.7, -0.3), (1.5, 0.9), (10.0, 0.0)] {
            let got = jacobian_integrand(m.as_ref(), &dvector![0.1], &dvector![f1, f2], 0).unwrap();
            let want = oracle.jacobian_integrand(f1, f2);
            assert!(
                (got - want).abs() < 1e-4,
                "integrand at ({f1},{f2}): {got} vs {want}"
            );
        }
    }

    #[test]
    fn jacobian_integrand_rotation_invariant() {
        let m = builtin(ModelId::A);
        let r = 1.3_f64;
        let a = jacobian_integrand(m.as_ref(), &dvector![0.0], &dvector![r, 0.0], 0).unwrap();
        let c = 0.6_f64;
        let b = jacobian_integrand(
            m.as_ref(),
            &dvector![0.0],
            &dvector![r * c.cos(), r * c.sin()],
            0,
        )
        .unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-10);
    }

    #[test]
    fn reduced_drifts_match_independent_stencil() {
        // generic/analytic b̃ vs the oracle-module stencil (step 2e-5)
        let m = builtin(ModelId::A);
        let x = dvector![0.2];
        let f = dvector![1.0, 0.0];
        let (_, bt_f) = reduced_drifts(m.as_ref(), &x, &f, 0).unwrap();
        let (_, oracle_bt) =
            crate::oracle::reduced_drift_from_blocks(m.as_ref(), &x, &f, 0, false).unwrap();
        assert!((bt_f.clone() - oracle_bt).norm() < 1e-5, "b̃ dev");
        // frozen value: b̃ = −q²(1/R₂² + 1/d)f̃ at q=R₂=1, d=2
        assert_relative_eq!(bt_f[0], -1.5, epsilon = 1e-9);
    }

    #[test]
    fn girsanov_zero_for_charge_zero() {
        let m = ModelA {
            charge: 0.0,
            ..Default::default()
        };
        let sys = ReducedCoordSystem::reduced(&m);
        let init = SimState {
            z: dvector![0.0, 0.7, -0.2],
            chart: 0,
            frame: GroupElement::U1(0.0),
        };
        let path = simulate(&sys, &init, 0.0, 0.1, 1e-3, 5, 0, false).unwrap();
        let f = path_functionals(&m, &path).unwrap();
        assert_eq!(f.girsanov_log_weight, 0.0);
        assert_eq!(f.jacobian_integral, 0.0);
        assert_eq!(f.boundary_factor, 1.0);
    }

    #[test]
    fn girsanov_martingale_and_pathwise_identity_small_ensemble() {
        let m = builtin(ModelId::A);
        let sys = ReducedCoordSystem::reduced(m.as_ref());
        let init = SimState {
            z: dvector![0.0, 0.8, 0.0],
            chart: 0,
            frame: GroupElement::U1(0.0),
        };
        let n = 4000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut rel_dev = 0.0;
        for pid in 0..n {
            let path = simulate(&sys, &init, 0.0, 0.2, 2e-3, 11, pid, false).unwrap();
            let fs = path_functionals(m.as_ref(), &path).unwrap();
            let w = fs.girsanov_log_weight.exp();
            sum += w;
            sum_sq += w * w;
            rel_dev += ((fs.girsanov_log_weight - fs.pathwise_log_weight).exp() - 1.0).abs();
        }
        let mean = sum / n as f64;
        let std_err = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - 1.0).abs() < 3.0 * std_err,
            "martingale: {mean} ± {std_err}"
        );
        // pathwise (38)↔(39) identity up to discretization
        rel_dev /= n as f64;
        assert!(rel_dev < 0.02, "pathwise identity mean rel dev {rel_dev}");
    }
}
