//! Drift and diffusion coefficients for the original process η on P × V,
//! the adapted-coordinate process ζ, the filtered process ζ̃ and the
//! reduced-drift process ξ̃, plus the Stratonovich predictor–corrector
//! integrator and path simulation.
//!
//! Drift convention: the printed drifts of the transformed equations are
//! the generator (Itô) drifts — that is what makes path expectations
//! solve the backward equation. Coefficient providers return those, and
//! the stepper converts internally to the equivalent Stratonovich drift
//! b_strat = b − ½(∂Σ)Σ before applying the Euler–Heun midpoint
//! correction to the diffusion, so the integrated law carries the
//! printed generator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{self, GeometryBlocks};
use crate::group::GroupElement;
use crate::linalg;
use crate::model::{Model, TotalState};
use crate::rng::PathStreams;

/// Which stochastic system is being integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessKind {
    /// η on P × V in P-chart coordinates.
    Original,
    /// ζ = (x, f̃) in adapted coordinates, noise shared across the full
    /// P-sector channel block.
    Adapted,
    /// ζ̃ = (x, f̃) with the filtered triangular diffusion.
    Filtered,
    /// ξ̃ = (x, f̃) with the reduced drifts b̃ (no √d terms).
    Reduced,
}

/// Drift and diffusion at a state, in full units: drift is the complete
/// dt-coefficient (½μ²κ b), diffusion the complete dW-coefficient
/// (μ√κ X), with one column per independent Wiener channel.
#[derive(Debug, Clone)]
pub struct SdeCoefficients {
    pub drift: DVector<f64>,
    pub diffusion: DMatrix<f64>,
    /// RNG slot per channel column (fixed global layout: P-sector
    /// channels take slots 0..n_P, fiber channels n_P..n_P+n_V).
    pub channel_slots: Vec<usize>,
}

/// Integrator state: flat coordinates plus chart/frame bookkeeping.
#[derive(Debug, Clone)]
pub struct SimState {
    pub z: DVector<f64>,
    pub chart: usize,
    pub frame: GroupElement,
}

impl SimState {
    pub fn from_total(t: &TotalState) -> Self {
        let mut z = DVector::zeros(t.q.len() + t.f.len());
        z.rows_mut(0, t.q.len()).copy_from(&t.q);
        z.rows_mut(t.q.len(), t.f.len()).copy_from(&t.f);
        SimState {
            z,
            chart: t.chart,
            frame: t.frame,
        }
    }

    pub fn from_reduced(x: &DVector<f64>, f: &DVector<f64>, chart: usize, kind_group: crate::group::GroupKind) -> Self {
        let mut z = DVector::zeros(x.len() + f.len());
        z.rows_mut(0, x.len()).copy_from(x);
        z.rows_mut(x.len(), f.len()).copy_from(f);
        SimState {
            z,
            chart,
            frame: GroupElement::identity(kind_group),
        }
    }
}

/// One realized trajectory with its Wiener increments and accumulated
/// path functionals.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub kind: ProcessKind,
    pub times: Vec<f64>,
    /// states[k] is the state at times[k]; len = steps + 1.
    pub states: Vec<SimState>,
    /// increments[k] drove the step from times[k] to times[k+1].
    pub increments: Vec<DVector<f64>>,
    pub dt: f64,
    pub seed: u64,
    pub path_id: u64,
    /// Left-point ∫ V du along the path.
    pub potential_integral: f64,
    /// Filled by the reduction layer.
    pub girsanov_log_weight: Option<f64>,
}

impl PathSample {
    pub fn end(&self) -> &SimState {
        self.states.last().expect("path has at least one state")
    }

    /// Versioned little-endian dump: magic, version, shape, times, flat
    /// state and increment arrays.
    pub fn write_binary<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"FMCPATH1")?;
        w.write_all(&1u32.to_le_bytes())?;
        let dim = self.states[0].z.len() as u64;
        let nch = self.increments.first().map(|v| v.len()).unwrap_or(0) as u64;
        for v in [self.states.len() as u64, dim, nch, self.seed, self.path_id] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.dt.to_le_bytes())?;
        for s in &self.states {
            for v in s.z.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(s.chart as u64).to_le_bytes())?;
        }
        for inc in &self.increments {
            for v in inc.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Generic drift data from geometry blocks
// ---------------------------------------------------------------------

/// Drifts and filtering divergences at a reduced point, computed from one
/// shared set of shifted geometry-block evaluations (central step 1e-5).
#[derive(Debug, Clone)]
pub struct DriftData {
    /// b drifts of ζ/ζ̃ (√(dH)-weighted divergences), bare (no ½μ²κ).
    pub b_x: DVector<f64>,
    pub b_f: DVector<f64>,
    /// b̃ drifts of ξ̃ (√H-weighted), bare.
    pub bt_x: DVector<f64>,
    pub bt_f: DVector<f64>,
    /// The two √(dH)-divergence terms of the filtering generator, bare:
    /// Γ₁^ν = −½μ²κ · div[ν].
    pub div: DVector<f64>,
}

const DRIFT_FD_STEP: f64 = 1e-5;

pub fn drift_data(
    model: &dyn Model,
    x: &DVector<f64>,
    f: &DVector<f64>,
    chart: usize,
) -> Result<DriftData> {
    let dims = model.dims();
    let h = DRIFT_FD_STEP;
    let center = geometry::evaluate(model, x, f, chart)?;
    let w_dh0 = (center.d_det * center.cap_h).sqrt();
    let w_h0 = center.cap_h.sqrt();
    let hag = &center.h_inv * center.a_gamma.transpose(); // h^{ni}𝒜γ^μ_n (n_M × n_G)

    let mut b_x = DVector::zeros(dims.base);
    let mut b_f = DVector::zeros(dims.fiber);
    let mut bt_x = DVector::zeros(dims.base);
    let mut bt_f = DVector::zeros(dims.fiber);
    let mut div = DVector::zeros(dims.group);

    for j in 0..dims.base {
        let mut xs = x.clone();
        xs[j] += h;
        let bp = geometry::evaluate(model, &xs, f, chart)?;
        xs[j] -= 2.0 * h;
        let bm = geometry::evaluate(model, &xs, f, chart)?;
        let (dh_p, dh_m) = ((bp.d_det * bp.cap_h).sqrt(), (bm.d_det * bm.cap_h).sqrt());
        let (h_p, h_m) = (bp.cap_h.sqrt(), bm.cap_h.sqrt());
        let hag_p = bp.h_inv.row(j) * bp.a_gamma.transpose(); // (1 × n_G)
        let hag_m = bm.h_inv.row(j) * bm.a_gamma.transpose();
        for i in 0..dims.base {
            b_x[i] += (dh_p * bp.h_inv[(i, j)] - dh_m * bm.h_inv[(i, j)]) / (2.0 * h) / w_dh0;
            bt_x[i] += (h_p * bp.h_inv[(i, j)] - h_m * bm.h_inv[(i, j)]) / (2.0 * h) / w_h0;
        }
        for mu in 0..dims.group {
            let d_dh = (dh_p * hag_p[(0, mu)] - dh_m * hag_m[(0, mu)]) / (2.0 * h) / w_dh0;
            let d_h = (h_p * hag_p[(0, mu)] - h_m * hag_m[(0, mu)]) / (2.0 * h) / w_h0;
            for a in 0..dims.fiber {
                b_f[a] += center.k_v[(a, mu)] * d_dh;
                bt_f[a] += center.k_v[(a, mu)] * d_h;
            }
            div[mu] += d_dh;
        }
    }

    for b in 0..dims.fiber {
        let mut fs = f.clone();
        fs[b] += h;
        let bp = geometry::evaluate(model, x, &fs, chart)?;
        fs[b] -= 2.0 * h;
        let bm = geometry::evaluate(model, x, &fs, chart)?;
        let (dh_p, dh_m) = ((bp.d_det * bp.cap_h).sqrt(), (bm.d_det * bm.cap_h).sqrt());
        let (h_p, h_m) = (bp.cap_h.sqrt(), bm.cap_h.sqrt());
        for mu in 0..dims.group {
            let dk_dh =
                (dh_p * bp.k_v[(b, mu)] - dh_m * bm.k_v[(b, mu)]) / (2.0 * h) / w_dh0;
            let dk_h = (h_p * bp.k_v[(b, mu)] - h_m * bm.k_v[(b, mu)]) / (2.0 * h) / w_h0;
            for i in 0..dims.base {
                b_x[i] += hag[(i, mu)] * dk_dh;
                bt_x[i] += hag[(i, mu)] * dk_h;
            }
            for nu in 0..dims.group {
                div[nu] += center.lambda_gram[(nu, mu)] * dk_dh;
            }
        }
        for a in 0..dims.fiber {
            b_f[a] += (dh_p * bp.ghat[(a, b)] - dh_m * bm.ghat[(a, b)]) / (2.0 * h) / w_dh0;
            bt_f[a] += (h_p * bp.ghat[(a, b)] - h_m * bm.ghat[(a, b)]) / (2.0 * h) / w_h0;
        }
    }

    Ok(DriftData {
        b_x,
        b_f,
        bt_x,
        bt_f,
        div,
    })
}

// ---------------------------------------------------------------------
// Filtered diffusion blocks (the six-equation system)
// ---------------------------------------------------------------------

/// Solution of the six defining equations for the filtered diffusion
/// coefficients, including the group-sector blocks.
#[derive(Debug, Clone)]
pub struct FilteredBlocks {
    /// X̃^i_m̄ = (h^{ij})^{1/2} (n_M × n_M).
    pub xt_xm: DMatrix<f64>,
    /// X̃^a_m̄ = X̃^k_m̄ 𝒜γ^μ_k K^a_μ (n_V × n_M).
    pub xt_fm: DMatrix<f64>,
    /// X̃^a_b̄ = (γ^{αβ}K^a_αK^b_β + G^{ab})^{1/2} (n_V × n_V).
    pub xt_fb: DMatrix<f64>,
    /// X̃^α_m̄ = −X̃^k_m̄ 𝒜γ^β_k v̄^α_β (n_G × n_M).
    pub xt_am: DMatrix<f64>,
    /// X̃^α_b̄ = X̃^c_b̄ Z^α_c with R^{ac}Z^α_c = −γ^{μβ}K^a_μ v̄^α_β (n_G × n_V).
    pub xt_ab: DMatrix<f64>,
    /// X̃^α_β̄ = v̄^α_{α′} Ỹ^{α′}_β̄,
    /// Ỹ = (γ^{α′β′} − γ^{α′μ}K^a_μ(R⁻¹)_{ab}K^b_νγ^{νβ′})^{1/2} (n_G × n_G).
    pub xt_abeta: DMatrix<f64>,
}

/// Solve the six-equation system at a point (the v̄ factors are taken at
/// the point's group coordinate).
pub fn solve_filtered_diffusion(
    model: &dyn Model,
    blocks: &GeometryBlocks,
    a: &GroupElement,
) -> Result<FilteredBlocks> {
    let _ = model;
    let vbar = crate::group::vbar(a)?;
    let xt_xm = linalg::spd_sqrt(&blocks.h_inv)?;
    let xt_fm = &blocks.k_v * &blocks.a_gamma * &xt_xm;
    let xt_fb = linalg::spd_sqrt(&blocks.r_mat)?;
    let xt_am = -(&vbar * &blocks.a_gamma * &xt_xm);
    // Z = R⁻¹ · (−K γ⁻¹ v̄ᵀ) (n_V × n_G)
    let r_inv = linalg::spd_inverse(&blocks.r_mat, "R = γ⁻¹KK + G⁻¹")?;
    let rhs = -(&blocks.k_v * &blocks.gamma_inv * vbar.transpose());
    let z = &r_inv * rhs;
    let xt_ab = z.transpose() * &xt_fb;
    let y2 = &blocks.gamma_inv
        - &blocks.gamma_inv * blocks.k_v.transpose() * &r_inv * &blocks.k_v * &blocks.gamma_inv;
    let y = linalg::spd_sqrt(&y2)?;
    let xt_abeta = &vbar * y;
    Ok(FilteredBlocks {
        xt_xm,
        xt_fm,
        xt_fb,
        xt_am,
        xt_ab,
        xt_abeta,
    })
}

/// Residuals of all six defining equations (max abs entry per equation).
pub fn filtered_diffusion_residuals(
    blocks: &GeometryBlocks,
    fb: &FilteredBlocks,
    a: &GroupElement,
) -> Result<[f64; 6]> {
    let vbar = crate::group::vbar(a)?;
    let gplus = &blocks.gamma_inv + &blocks.a_gamma * &blocks.h_inv * blocks.a_gamma.transpose();
    let r1 = linalg::max_abs_diff(&(&fb.xt_xm * fb.xt_xm.transpose()), &blocks.h_inv);
    let r2 = linalg::max_abs_diff(&(&fb.xt_xm * fb.xt_fm.transpose()), &blocks.mix);
    let r3 = linalg::max_abs_diff(
        &(&fb.xt_fm * fb.xt_fm.transpose() + &fb.xt_fb * fb.xt_fb.transpose()),
        &blocks.ghat,
    );
    let r4 = linalg::max_abs_diff(
        &(&fb.xt_xm * fb.xt_am.transpose()),
        &(-(&blocks.h_inv * blocks.a_gamma.transpose() * vbar.transpose())),
    );
    let r5 = linalg::max_abs_diff(
        &(&fb.xt_fm * fb.xt_am.transpose() + &fb.xt_fb * fb.xt_ab.transpose()),
        &(-(&blocks.k_v * &gplus * vbar.transpose())),
    );
    let r6 = linalg::max_abs_diff(
        &(&fb.xt_am * fb.xt_am.transpose()
            + &fb.xt_ab * fb.xt_ab.transpose()
            + &fb.xt_abeta * fb.xt_abeta.transpose()),
        &(&vbar * &gplus * vbar.transpose()),
    );
    Ok([r1, r2, r3, r4, r5, r6])
}

// ---------------------------------------------------------------------
// SDE systems
// ---------------------------------------------------------------------

/// A stochastic system the integrator can drive.
pub trait SdeSystem: Sync {
    fn model(&self) -> &dyn Model;
    fn kind(&self) -> ProcessKind;
    fn dim(&self) -> usize;
    fn n_channels(&self) -> usize;
    fn channel_slots(&self) -> Vec<usize>;
    /// Itô drift and diffusion in full units.
    fn coefficients(&self, state: &SimState) -> Result<SdeCoefficients>;
    /// Diffusion matrix alone (drift divergences are the expensive part
    /// of the generic route; the stepper's midpoint correction and the
    /// finite-difference Stratonovich shift only need Σ).
    fn diffusion_at(&self, state: &SimState) -> Result<DMatrix<f64>> {
        Ok(self.coefficients(state)?.diffusion)
    }
    /// μ²κ · ½(∂Σ)Σ in full units (the Itô − Stratonovich drift shift).
    fn strat_correction(&self, state: &SimState) -> Result<DVector<f64>>;
    /// Coordinates the diffusion actually depends on (for the default
    /// finite-difference correction).
    fn diffusion_dependencies(&self) -> Vec<usize> {
        (0..self.dim()).collect()
    }
    fn normalize(&self, state: &mut SimState);
    /// Potential V at a state (already in the reduced/total form this
    /// system evolves).
    fn potential(&self, state: &SimState) -> f64;
}

/// Generic finite-difference Stratonovich correction ½Σ_j (∂_j Σ)_{·c} Σ_{jc}.
fn fd_strat_correction<S: SdeSystem + ?Sized>(
    system: &S,
    state: &SimState,
    deps: &[usize],
) -> Result<DVector<f64>> {
    let h = 1e-5;
    let ncols = system.n_channels();
    let dim = system.dim();
    let sigma0 = system.diffusion_at(state)?;
    let mut corr = DVector::zeros(dim);
    for &j in deps {
        let mut sp = state.clone();
        sp.z[j] += h;
        let cp = system.diffusion_at(&sp)?;
        sp.z[j] = state.z[j] - h;
        let cm = system.diffusion_at(&sp)?;
        for i in 0..dim {
            for c in 0..ncols {
                corr[i] += 0.5 * (cp[(i, c)] - cm[(i, c)]) / (2.0 * h) * sigma0[(j, c)];
            }
        }
    }
    Ok(corr)
}

/// The original process η on P × V.
pub struct OriginalSystem<'m> {
    pub model: &'m dyn Model,
    /// Use the model's registered closed forms when available.
    pub use_analytic: bool,
}

impl<'m> OriginalSystem<'m> {
    pub fn new(model: &'m dyn Model) -> Self {
        OriginalSystem {
            model,
            use_analytic: true,
        }
    }
}

impl SdeSystem for OriginalSystem<'_> {
    fn model(&self) -> &dyn Model {
        self.model
    }
    fn kind(&self) -> ProcessKind {
        ProcessKind::Original
    }
    fn dim(&self) -> usize {
        let d = self.model.dims();
        d.p + d.fiber
    }
    fn n_channels(&self) -> usize {
        self.dim()
    }
    fn channel_slots(&self) -> Vec<usize> {
        (0..self.dim()).collect()
    }

    fn coefficients(&self, state: &SimState) -> Result<SdeCoefficients> {
        let dims = self.model.dims();
        let params = self.model.params();
        let q = state.z.rows(0, dims.p).into_owned();
        let mut drift = DVector::zeros(dims.p + dims.fiber);
        let mut diffusion = DMatrix::zeros(dims.p + dims.fiber, dims.p + dims.fiber);

        let closed = if self.use_analytic {
            self.model.original_coefficients_analytic(&q, state.chart)
        } else {
            None
        };
        let (bare_drift, bare_diff) = match closed {
            Some(c) => (c.drift_q, c.diff_q),
            None => {
                let g = self.model.metric_p(&q, state.chart);
                let g_inv = linalg::spd_inverse(&g, "G_AB")?;
                let grads = self.model.metric_p_grad(&q, state.chart);
                // G^{-1/2}∂_B(G^{1/2}G^{AB}) = ∂_B G^{AB} + ½G^{AB}tr(G⁻¹∂_B G)
                let mut b = DVector::zeros(dims.p);
                for bidx in 0..dims.p {
                    let dg_inv = -(&g_inv * &grads[bidx] * &g_inv);
                    let tr = (&g_inv * &grads[bidx]).trace();
                    for a in 0..dims.p {
                        b[a] += dg_inv[(a, bidx)] + 0.5 * g_inv[(a, bidx)] * tr;
                    }
                }
                (b, linalg::spd_sqrt(&g_inv)?)
            }
        };
        drift
            .rows_mut(0, dims.p)
            .copy_from(&(bare_drift * (0.5 * params.mu2k())));
        let amp = params.mu * params.kappa.sqrt();
        diffusion
            .view_mut((0, 0), (dims.p, dims.p))
            .copy_from(&(bare_diff * amp));
        let xv = linalg::spd_sqrt(&linalg::spd_inverse(&self.model.metric_v(), "G_ab")?)?;
        diffusion
            .view_mut((dims.p, dims.p), (dims.fiber, dims.fiber))
            .copy_from(&(xv * amp));
        Ok(SdeCoefficients {
            drift,
            diffusion,
            channel_slots: self.channel_slots(),
        })
    }

    fn diffusion_at(&self, state: &SimState) -> Result<DMatrix<f64>> {
        let dims = self.model.dims();
        let amp = self.model.params().mu * self.model.params().kappa.sqrt();
        let q = state.z.rows(0, dims.p).into_owned();
        let mut diffusion = DMatrix::zeros(self.dim(), self.dim());
        let bare = if self.use_analytic {
            self.model
                .original_coefficients_analytic(&q, state.chart)
                .map(|c| c.diff_q)
        } else {
            None
        };
        let bare = match bare {
            Some(b) => b,
            None => {
                let g_inv =
                    linalg::spd_inverse(&self.model.metric_p(&q, state.chart), "G_AB")?;
                linalg::spd_sqrt(&g_inv)?
            }
        };
        diffusion
            .view_mut((0, 0), (dims.p, dims.p))
            .copy_from(&(bare * amp));
        let xv = linalg::spd_sqrt(&linalg::spd_inverse(&self.model.metric_v(), "G_ab")?)?;
        diffusion
            .view_mut((dims.p, dims.p), (dims.fiber, dims.fiber))
            .copy_from(&(xv * amp));
        Ok(diffusion)
    }

    fn strat_correction(&self, state: &SimState) -> Result<DVector<f64>> {
        let dims = self.model.dims();
        if self.use_analytic {
            if let Some(c) = self.model.original_coefficients_analytic(
                &state.z.rows(0, dims.p).into_owned(),
                state.chart,
            ) {
                let mut corr = DVector::zeros(self.dim());
                corr.rows_mut(0, dims.p)
                    .copy_from(&(c.strat_correction_q * self.model.params().mu2k()));
                return Ok(corr);
            }
        }
        fd_strat_correction(self, state, &(0..dims.p).collect::<Vec<_>>())
    }

    fn diffusion_dependencies(&self) -> Vec<usize> {
        (0..self.model.dims().p).collect()
    }

    fn normalize(&self, state: &mut SimState) {
        let dims = self.model.dims();
        let mut total = TotalState {
            q: state.z.rows(0, dims.p).into_owned(),
            f: state.z.rows(dims.p, dims.fiber).into_owned(),
            chart: state.chart,
            frame: state.frame,
        };
        self.model.normalize_total(&mut total);
        state.z.rows_mut(0, dims.p).copy_from(&total.q);
        state.z.rows_mut(dims.p, dims.fiber).copy_from(&total.f);
        state.chart = total.chart;
        state.frame = total.frame;
    }

    fn potential(&self, state: &SimState) -> f64 {
        let dims = self.model.dims();
        self.model.potential_total(
            &state.z.rows(0, dims.p).into_owned(),
            &state.z.rows(dims.p, dims.fiber).into_owned(),
            state.chart,
        )
    }
}

/// Common storage for the three reduced-coordinate systems.
pub struct ReducedCoordSystem<'m> {
    pub model: &'m dyn Model,
    pub kind: ProcessKind,
    pub use_analytic: bool,
}

impl<'m> ReducedCoordSystem<'m> {
    pub fn adapted(model: &'m dyn Model) -> Self {
        Self {
            model,
            kind: ProcessKind::Adapted,
            use_analytic: true,
        }
    }
    pub fn filtered(model: &'m dyn Model) -> Self {
        Self {
            model,
            kind: ProcessKind::Filtered,
            use_analytic: true,
        }
    }
    pub fn reduced(model: &'m dyn Model) -> Self {
        Self {
            model,
            kind: ProcessKind::Reduced,
            use_analytic: true,
        }
    }

    fn split(&self, state: &SimState) -> (DVector<f64>, DVector<f64>) {
        let dims = self.model.dims();
        (
            state.z.rows(0, dims.base).into_owned(),
            state.z.rows(dims.base, dims.fiber).into_owned(),
        )
    }
}

impl SdeSystem for ReducedCoordSystem<'_> {
    fn model(&self) -> &dyn Model {
        self.model
    }
    fn kind(&self) -> ProcessKind {
        self.kind
    }
    fn dim(&self) -> usize {
        let d = self.model.dims();
        d.base + d.fiber
    }
    fn n_channels(&self) -> usize {
        let d = self.model.dims();
        match self.kind {
            ProcessKind::Adapted => d.p + d.fiber,
            _ => d.base + d.fiber,
        }
    }
    fn channel_slots(&self) -> Vec<usize> {
        let d = self.model.dims();
        match self.kind {
            // P-sector channels share slots 0..n_P with the original
            // process; fiber channels live at n_P..n_P+n_V.
            ProcessKind::Adapted => (0..d.p).chain(d.p..d.p + d.fiber).collect(),
            // w̃^m̄ share the base-direction slots 0..n_M, w̃^b̄ the fiber
            // slots (common random numbers across estimators).
            _ => (0..d.base).chain(d.p..d.p + d.fiber).collect(),
        }
    }

    fn coefficients(&self, state: &SimState) -> Result<SdeCoefficients> {
        let dims = self.model.dims();
        let params = self.model.params();
        let (x, f) = self.split(state);
        let amp = params.mu * params.kappa.sqrt();
        let half = 0.5 * params.mu2k();

        if self.use_analytic {
            if self.kind == ProcessKind::Adapted {
                if let Some(c) = self.model.adapted_coefficients_analytic(&x, &f, state.chart) {
                    let mut drift = DVector::zeros(self.dim());
                    drift.rows_mut(0, dims.base).copy_from(&(&c.b_x * half));
                    drift
                        .rows_mut(dims.base, dims.fiber)
                        .copy_from(&(&c.b_f * half));
                    let mut diffusion = DMatrix::zeros(self.dim(), self.n_channels());
                    diffusion
                        .view_mut((0, 0), (dims.base, dims.p))
                        .copy_from(&(&c.x_xm * amp));
                    diffusion
                        .view_mut((dims.base, 0), (dims.fiber, dims.p))
                        .copy_from(&(&c.x_fm * amp));
                    diffusion
                        .view_mut((dims.base, dims.p), (dims.fiber, dims.fiber))
                        .copy_from(&(&c.x_fb * amp));
                    return Ok(SdeCoefficients {
                        drift,
                        diffusion,
                        channel_slots: self.channel_slots(),
                    });
                }
            } else if let Some(c) = self.model.reduced_coefficients_analytic(&x, &f, state.chart)
            {
                let (bx, bf) = match self.kind {
                    ProcessKind::Reduced => (&c.bt_x, &c.bt_f),
                    _ => (&c.b_x, &c.b_f),
                };
                let mut drift = DVector::zeros(self.dim());
                drift.rows_mut(0, dims.base).copy_from(&(bx * half));
                drift.rows_mut(dims.base, dims.fiber).copy_from(&(bf * half));
                let mut diffusion = DMatrix::zeros(self.dim(), self.n_channels());
                diffusion
                    .view_mut((0, 0), (dims.base, dims.base))
                    .copy_from(&(&c.xt_xm * amp));
                diffusion
                    .view_mut((dims.base, 0), (dims.fiber, dims.base))
                    .copy_from(&(&c.xt_fm * amp));
                diffusion
                    .view_mut((dims.base, dims.base), (dims.fiber, dims.fiber))
                    .copy_from(&(&c.xt_fb * amp));
                return Ok(SdeCoefficients {
                    drift,
                    diffusion,
                    channel_slots: self.channel_slots(),
                });
            }
        }

        let blocks = geometry::evaluate(self.model, &x, &f, state.chart)?;
        let dd = drift_data(self.model, &x, &f, state.chart)?;
        let (bx, bf) = match self.kind {
            ProcessKind::Reduced => (&dd.bt_x, &dd.bt_f),
            _ => (&dd.b_x, &dd.b_f),
        };
        let mut drift = DVector::zeros(self.dim());
        drift.rows_mut(0, dims.base).copy_from(&(bx * half));
        drift.rows_mut(dims.base, dims.fiber).copy_from(&(bf * half));

        let mut diffusion = DMatrix::zeros(self.dim(), self.n_channels());
        match self.kind {
            ProcessKind::Adapted => {
                // X^i_M̄ = T N 𝒳, X^a_M̄ = N_V 𝒳, X^a_b̄ = 𝒳_V.
                let xp = linalg::spd_sqrt(&blocks.g_p_inv)?;
                let xim = &blocks.t * &blocks.n_p * &xp;
                let xam = &blocks.n_v * &xp;
                let xab = linalg::spd_sqrt(&blocks.g_v_inv)?;
                diffusion
                    .view_mut((0, 0), (dims.base, dims.p))
                    .copy_from(&(xim * amp));
                diffusion
                    .view_mut((dims.base, 0), (dims.fiber, dims.p))
                    .copy_from(&(xam * amp));
                diffusion
                    .view_mut((dims.base, dims.p), (dims.fiber, dims.fiber))
                    .copy_from(&(xab * amp));
            }
            _ => {
                let fb = solve_filtered_diffusion(
                    self.model,
                    &blocks,
                    &GroupElement::identity(self.model.group()),
                )?;
                diffusion
                    .view_mut((0, 0), (dims.base, dims.base))
                    .copy_from(&(&fb.xt_xm * amp));
                diffusion
                    .view_mut((dims.base, 0), (dims.fiber, dims.base))
                    .copy_from(&(&fb.xt_fm * amp));
                diffusion
                    .view_mut((dims.base, dims.base), (dims.fiber, dims.fiber))
                    .copy_from(&(&fb.xt_fb * amp));
            }
        }
        Ok(SdeCoefficients {
            drift,
            diffusion,
            channel_slots: self.channel_slots(),
        })
    }

    fn diffusion_at(&self, state: &SimState) -> Result<DMatrix<f64>> {
        let dims = self.model.dims();
        let amp = self.model.params().mu * self.model.params().kappa.sqrt();
        let (x, f) = self.split(state);
        let mut diffusion = DMatrix::zeros(self.dim(), self.n_channels());
        if self.use_analytic {
            if self.kind == ProcessKind::Adapted {
                if let Some(c) = self.model.adapted_coefficients_analytic(&x, &f, state.chart) {
                    diffusion
                        .view_mut((0, 0), (dims.base, dims.p))
                        .copy_from(&(&c.x_xm * amp));
                    diffusion
                        .view_mut((dims.base, 0), (dims.fiber, dims.p))
                        .copy_from(&(&c.x_fm * amp));
                    diffusion
                        .view_mut((dims.base, dims.p), (dims.fiber, dims.fiber))
                        .copy_from(&(&c.x_fb * amp));
                    return Ok(diffusion);
                }
            } else if let Some(c) = self.model.reduced_coefficients_analytic(&x, &f, state.chart)
            {
                diffusion
                    .view_mut((0, 0), (dims.base, dims.base))
                    .copy_from(&(&c.xt_xm * amp));
                diffusion
                    .view_mut((dims.base, 0), (dims.fiber, dims.base))
                    .copy_from(&(&c.xt_fm * amp));
                diffusion
                    .view_mut((dims.base, dims.base), (dims.fiber, dims.fiber))
                    .copy_from(&(&c.xt_fb * amp));
                return Ok(diffusion);
            }
        }
        let blocks = geometry::evaluate(self.model, &x, &f, state.chart)?;
        match self.kind {
            ProcessKind::Adapted => {
                let xp = linalg::spd_sqrt(&blocks.g_p_inv)?;
                diffusion
                    .view_mut((0, 0), (dims.base, dims.p))
                    .copy_from(&(&blocks.t * &blocks.n_p * &xp * amp));
                diffusion
                    .view_mut((dims.base, 0), (dims.fiber, dims.p))
                    .copy_from(&(&blocks.n_v * &xp * amp));
                diffusion
                    .view_mut((dims.base, dims.p), (dims.fiber, dims.fiber))
                    .copy_from(&(linalg::spd_sqrt(&blocks.g_v_inv)? * amp));
            }
            _ => {
                let fb = solve_filtered_diffusion(
                    self.model,
                    &blocks,
                    &GroupElement::identity(self.model.group()),
                )?;
                diffusion
                    .view_mut((0, 0), (dims.base, dims.base))
                    .copy_from(&(&fb.xt_xm * amp));
                diffusion
                    .view_mut((dims.base, 0), (dims.fiber, dims.base))
                    .copy_from(&(&fb.xt_fm * amp));
                diffusion
                    .view_mut((dims.base, dims.base), (dims.fiber, dims.fiber))
                    .copy_from(&(&fb.xt_fb * amp));
            }
        }
        Ok(diffusion)
    }

    fn strat_correction(&self, state: &SimState) -> Result<DVector<f64>> {
        if self.use_analytic {
            let (x, f) = self.split(state);
            if self.kind == ProcessKind::Adapted {
                if let Some(c) = self.model.adapted_coefficients_analytic(&x, &f, state.chart) {
                    return Ok(c.strat_correction * self.model.params().mu2k());
                }
            } else if let Some(c) = self.model.reduced_coefficients_analytic(&x, &f, state.chart)
            {
                return Ok(c.strat_correction * self.model.params().mu2k());
            }
        }
        fd_strat_correction(self, state, &self.diffusion_dependencies())
    }

    fn normalize(&self, state: &mut SimState) {
        let dims = self.model.dims();
        let mut x = state.z.rows(0, dims.base).into_owned();
        let mut f = state.z.rows(dims.base, dims.fiber).into_owned();
        let mut chart = state.chart;
        self.model.normalize_reduced(&mut x, &mut f, &mut chart);
        state.z.rows_mut(0, dims.base).copy_from(&x);
        state.z.rows_mut(dims.base, dims.fiber).copy_from(&f);
        state.chart = chart;
    }

    fn potential(&self, state: &SimState) -> f64 {
        let (x, f) = self.split(state);
        self.model.potential(&x, &f)
    }
}

// ---------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------

/// One Euler–Heun (midpoint-corrected Stratonovich) step with the given
/// per-channel increments (already scaled to variance dt).
pub fn step<S: SdeSystem + ?Sized>(
    system: &S,
    state: &mut SimState,
    dt: f64,
    dw: &DVector<f64>,
) -> Result<()> {
    let c0 = system.coefficients(state)?;
    let corr = system.strat_correction(state)?;
    let b_strat = &c0.drift - &corr;
    let drift_term = &b_strat * dt;
    let noise0 = &c0.diffusion * dw;

    let mut predictor = state.clone();
    predictor.z += &drift_term + &noise0;
    // Midpoint-correct the diffusion; if the predictor left the chart,
    // fall back to the start-point diffusion for this step (the chart
    // transition happens in normalize below).
    let diff_mid = match system.diffusion_at(&predictor) {
        Ok(d1) => (&c0.diffusion + &d1) * 0.5,
        Err(_) => c0.diffusion.clone(),
    };
    state.z += drift_term + diff_mid * dw;
    if state.z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state after step".into()));
    }
    system.normalize(state);
    Ok(())
}

/// Streaming simulation: integrate one path on the uniform grid
/// [t_a, t_b], invoking `on_step(pre_state, dw, dt)` before every step,
/// and return the final state with the left-point potential integral.
/// Deterministic in (seed, path_id); `negate` flips all increments
/// (antithetic variates).
#[allow(clippy::too_many_arguments)]
pub fn simulate_with<S, F>(
    system: &S,
    initial: &SimState,
    t_a: f64,
    t_b: f64,
    dt: f64,
    seed: u64,
    path_id: u64,
    negate: bool,
    mut on_step: F,
) -> Result<(SimState, f64)>
where
    S: SdeSystem + ?Sized,
    F: FnMut(&SimState, &DVector<f64>, f64) -> Result<()>,
{
    assert!(dt > 0.0 && t_b > t_a);
    let steps = ((t_b - t_a) / dt).round().max(1.0) as usize;
    let dt = (t_b - t_a) / steps as f64;
    let nch = system.n_channels();
    let slots = system.channel_slots();
    let mut streams = PathStreams::new(seed, path_id, crate::rng::SLOTS_PER_PATH as usize);

    let mut state = initial.clone();
    let sqrt_dt = dt.sqrt();
    let mut potential_integral = 0.0;
    let mut dw = DVector::zeros(nch);
    for _ in 0..steps {
        for (c, &slot) in slots.iter().enumerate() {
            let n: f64 = streams.streams[slot].sample(StandardNormal);
            dw[c] = if negate { -n } else { n } * sqrt_dt;
        }
        potential_integral += system.potential(&state) * dt;
        on_step(&state, &dw, dt)?;
        step(system, &mut state, dt, &dw)?;
    }
    Ok((state, potential_integral))
}

/// Simulate one path and keep the whole trajectory with its increments.
#[allow(clippy::too_many_arguments)]
pub fn simulate<S: SdeSystem + ?Sized>(
    system: &S,
    initial: &SimState,
    t_a: f64,
    t_b: f64,
    dt: f64,
    seed: u64,
    path_id: u64,
    negate: bool,
) -> Result<PathSample> {
    let steps = ((t_b - t_a) / dt).round().max(1.0) as usize;
    let dt_eff = (t_b - t_a) / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    let mut increments = Vec::with_capacity(steps);
    let mut times = Vec::with_capacity(steps + 1);
    times.push(t_a);
    for k in 0..steps {
        times.push(t_a + (k + 1) as f64 * dt_eff);
    }
    let (end, potential_integral) = simulate_with(
        system,
        initial,
        t_a,
        t_b,
        dt,
        seed,
        path_id,
        negate,
        |pre, dw, _| {
            states.push(pre.clone());
            increments.push(dw.clone());
            Ok(())
        },
    )?;
    states.push(end);
    Ok(PathSample {
        kind: system.kind(),
        times,
        states,
        increments,
        dt: dt_eff,
        seed,
        path_id,
        potential_integral,
        girsanov_log_weight: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin, ModelId};
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn original_coefficients_model_a_flat() {
        // Constant metric: zero drift, diagonal diffusion diag(1/R₁, 1/R₂, 1, 1).
        let m = builtin(ModelId::A);
        let sys = OriginalSystem::new(m.as_ref());
        let state = SimState {
            z: dvector![0.3, 0.7, 0.2, -0.4],
            chart: 0,
            frame: GroupElement::U1(0.0),
        };
        let c = sys.coefficients(&state).unwrap();
        assert_eq!(c.drift.norm(), 0.0);
        let want = DMatrix::from_diagonal(&dvector![1.0, 1.0, 1.0, 1.0]);
        assert!(linalg::max_abs_diff(&c.diffusion, &want) < 1e-14);
    }

    #[test]
    fn original_drift_model_b_matches_conformal_formula() {
        // Generic route (metric derivatives) vs the registered closed form
        // −½(1+|y|²) y for the bare drift on the stereographic chart.
        let m = builtin(ModelId::B);
        let generic = OriginalSystem {
            model: m.as_ref(),
            use_analytic: false,
        };
        let analytic = OriginalSystem::new(m.as_ref());
        let state = SimState {
            z: dvector![0.4, -0.3, 0.6, 0.1, 0.2],
            chart: 0,
            frame: GroupElement::U1(0.0),
        };
        let cg = generic.coefficients(&state).unwrap();
        let ca = analytic.coefficients(&state).unwrap();
        assert!(
            (cg.drift.clone() - ca.drift.clone()).norm() < 1e-8,
            "drift dev {}",
            (cg.drift - ca.drift).norm()
        );
        assert!(linalg::max_abs_diff(&cg.diffusion, &ca.diffusion) < 1e-10);
        // 𝒳𝒳ᵀ = G^{AB}
        let q = dvector![0.4, -0.3, 0.6];
        let g_inv = linalg::spd_inverse(&m.metric_p(&q, 0), "g").unwrap();
        let xp = cg.diffusion.view((0, 0), (3, 3)).into_owned();
        assert!(linalg::max_abs_diff(&(&xp * xp.transpose()), &g_inv) < 1e-12);
        // analytic vs finite-difference Stratonovich correction
        let corr_a = analytic.strat_correction(&state).unwrap();
        let corr_g = fd_strat_correction(&generic, &state, &[0, 1, 2]).unwrap();
        assert!((corr_a - corr_g).norm() < 1e-6);
    }

    #[test]
    fn six_equation_residuals_small_on_all_models() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for id in [ModelId::A, ModelId::B, ModelId::C] {
            let m = builtin(id);
            for _ in 0..6 {
                let p = m.sample_adapted(&mut rng);
                let blocks = geometry::evaluate(m.as_ref(), &p.x, &p.f, p.chart).unwrap();
                let fb = solve_filtered_diffusion(m.as_ref(), &blocks, &p.a).unwrap();
                let res = filtered_diffusion_residuals(&blocks, &fb, &p.a).unwrap();
                for (eq, r) in res.iter().enumerate() {
                    assert!(*r < 1e-10, "{id}: equation {} residual {r:.3e}", eq + 1);
                }
            }
        }
    }

    #[test]
    fn model_a_fiber_origin_blocks() {
        // f̃ = 0: X̃^a_m̄ = 0, X̃^a_b̄ = G^{ab 1/2} = I, Z = 0, Ỹ = γ^{1/2}.
        let m = builtin(ModelId::A);
        let blocks = geometry::evaluate(m.as_ref(), &dvector![0.2], &dvector![0.0, 0.0], 0).unwrap();
        let fb = solve_filtered_diffusion(m.as_ref(), &blocks, &GroupElement::U1(0.0)).unwrap();
        assert_eq!(fb.xt_fm.norm(), 0.0);
        assert!(linalg::max_abs_diff(&fb.xt_fb, &DMatrix::identity(2, 2)) < 1e-14);
        assert_eq!(fb.xt_ab.norm(), 0.0);
        assert_relative_eq!(fb.xt_abeta[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn filtered_blocks_square_to_reduced_inverse() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let m = builtin(ModelId::C);
        let p = m.sample_adapted(&mut rng);
        let blocks = geometry::evaluate(m.as_ref(), &p.x, &p.f, p.chart).unwrap();
        let fb = solve_filtered_diffusion(m.as_ref(), &blocks, &p.a).unwrap();
        let nv = 3;
        let xx = &fb.xt_fm * fb.xt_fm.transpose() + &fb.xt_fb * fb.xt_fb.transpose();
        assert!(
            linalg::max_abs_diff(&xx, &blocks.ghat) < 1e-10,
            "ĝ vs X̃X̃ᵀ dev {}",
            linalg::max_abs_diff(&xx, &blocks.ghat)
        );
        let _ = nv;
    }

    #[test]
    fn drift_difference_is_metric_times_half_grad_sigma() {
        // b − b̃ = g_red⁻¹ · ½∇σ with σ = ln d, on every model.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for id in [ModelId::A, ModelId::B, ModelId::C] {
            let m = builtin(id);
            let p = m.sample_adapted(&mut rng);
            let dims = m.dims();
            let dd = drift_data(m.as_ref(), &p.x, &p.f, p.chart).unwrap();
            let blocks = geometry::evaluate(m.as_ref(), &p.x, &p.f, p.chart).unwrap();
            // ∇σ by finite differences of ln det d
            let h = 1e-5;
            let mut grad = DVector::zeros(dims.base + dims.fiber);
            for i in 0..dims.base {
                let mut xp = p.x.clone();
                xp[i] += h;
                let dp = geometry::evaluate(m.as_ref(), &xp, &p.f, p.chart).unwrap().d_det;
                xp[i] -= 2.0 * h;
                let dm = geometry::evaluate(m.as_ref(), &xp, &p.f, p.chart).unwrap().d_det;
                grad[i] = (dp.ln() - dm.ln()) / (2.0 * h);
            }
            for a in 0..dims.fiber {
                let mut fp = p.f.clone();
                fp[a] += h;
                let dp = geometry::evaluate(m.as_ref(), &p.x, &fp, p.chart).unwrap().d_det;
                fp[a] -= 2.0 * h;
                let dm = geometry::evaluate(m.as_ref(), &p.x, &fp, p.chart).unwrap().d_det;
                grad[dims.base + a] = (dp.ln() - dm.ln()) / (2.0 * h);
            }
            let want = blocks.reduced_inverse() * grad * 0.5;
            let mut got = DVector::zeros(dims.base + dims.fiber);
            for i in 0..dims.base {
                got[i] = dd.b_x[i] - dd.bt_x[i];
            }
            for a in 0..dims.fiber {
                got[dims.base + a] = dd.b_f[a] - dd.bt_f[a];
            }
            assert!(
                (got.clone() - want.clone()).norm() < 1e-6,
                "{id}: b − b̃ dev {}",
                (got - want).norm()
            );
        }
    }

    #[test]
    fn model_a_analytic_drift_matches_generic() {
        let m = builtin(ModelId::A);
        let x = dvector![0.4];
        let f = dvector![0.8, -0.6];
        let dd = drift_data(m.as_ref(), &x, &f, 0).unwrap();
        let c = m.reduced_coefficients_analytic(&x, &f, 0).unwrap();
        assert!((dd.b_f.clone() - c.b_f).norm() < 1e-8, "b dev");
        assert!((dd.bt_f.clone() - c.bt_f).norm() < 1e-8, "b̃ dev");
        assert!(dd.b_x.norm() < 1e-9);
        assert!(dd.div.norm() < 1e-8, "Γ₁ divergence should vanish on Model A");
    }

    #[test]
    fn model_a_adapted_hook_matches_generic() {
        let m = builtin(ModelId::A);
        let analytic = ReducedCoordSystem::adapted(m.as_ref());
        let mut generic = ReducedCoordSystem::adapted(m.as_ref());
        generic.use_analytic = false;
        let state = SimState {
            z: dvector![0.4, 0.8, -0.3],
            chart: 0,
            frame: GroupElement::U1(0.0),
        };
        let ca = analytic.coefficients(&state).unwrap();
        let cg = generic.coefficients(&state).unwrap();
        assert!((ca.drift.clone() - cg.drift).norm() < 1e-8);
        // diffusion agrees up to an orthogonal channel factor; compare ΣΣᵀ
        let pa = &ca.diffusion * ca.diffusion.transpose();
        let pg = &cg.diffusion * cg.diffusion.transpose();
        assert!(linalg::max_abs_diff(&pa, &pg) < 1e-10, "ΣΣᵀ mismatch");
        // direct channel-wise comparison (both use the same slot layout)
        assert!(linalg::max_abs_diff(&ca.diffusion, &cg.diffusion) < 1e-9);
        let sa = analytic.strat_correction(&state).unwrap();
        let sg = generic.strat_correction(&state).unwrap();
        assert!((sa - sg).norm() < 1e-6);
    }

    #[test]
    fn model_a_analytic_strat_correction_matches_fd() {
        let m = builtin(ModelId::A);
        let sys_analytic = ReducedCoordSystem::filtered(m.as_ref());
        let mut sys_generic = ReducedCoordSystem::filtered(m.as_ref());
        sys_generic.use_analytic = false;
        let state = SimState {
            z: dvector![0.2, 0.9, -0.5],
            chart: 0,
            frame: GroupElement::U1(0.0),
        };
        let ca = sys_analytic.strat_correction(&state).unwrap();
        let cg = sys_generic.strat_correction(&state).unwrap();
        assert!((ca - cg).norm() < 1e-6);
    }

    #[test]
    fn step_with_zero_drift_and_increments_is_identity() {
        let m = crate::model::ModelA {
            charge: 0.0,
            ..Default::default()
        };
        let sys = ReducedCoordSystem::filtered(&m);
        let mut state = SimState {
            z: dvector![0.3, 0.4, -0.2],
            chart: 0,
            frame: GroupElement::U1(0.0),
        };
        let before = state.z.clone();
        step(&sys, &mut state, 1e-3, &DVector::zeros(3)).unwrap();
        assert!((state.z - before).norm() < 1e-15);
    }

    #[test]
    fn simulate_is_deterministic_and_increment_variance_is_dt() {
        let m = builtin(ModelId::A);
        let sys = ReducedCoordSystem::filtered(m.as_ref());
        let init = SimState {
            z: dvector![0.0, 0.5, 0.0],
            chart: 0,
            frame: GroupElement::U1(0.0),
        };
        let p1 = simulate(&sys, &init, 0.0, 0.05, 1e-3, 42, 7, false).unwrap();
        let p2 = simulate(&sys, &init, 0.0, 0.05, 1e-3, 42, 7, false).unwrap();
        for (a, b) in p1.states.iter().zip(&p2.states) {
            assert_eq!(a.z, b.z);
        }
        // chi-square test on increments at the 1% level: Σ(ΔW/√dt)² over
        // N ≥ 10⁴ samples within ±2.576·√(2N).
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for pid in 0..60 {
            let p = simulate(&sys, &init, 0.0, 0.06, 1e-3, 9, pid, false).unwrap();
            for inc in &p.increments {
                for c in 0..inc.len() {
                    sum_sq += inc[c] * inc[c] / p.dt;
                    count += 1;
                }
            }
        }
        assert!(count >= 10_000);
        let dev = (sum_sq - count as f64).abs() / (2.0 * count as f64).sqrt();
        assert!(dev < 2.576, "chi-square z = {dev:.2}");
    }

    #[test]
    fn antithetic_negates_increments() {
        let m = builtin(ModelId::A);
        let sys = ReducedCoordSystem::filtered(m.as_ref());
        let init = SimState {
            z: dvector![0.0, 0.5, 0.0],
            chart: 0,
            frame: GroupElement::U1(0.0),
        };
        let p = simulate(&sys, &init, 0.0, 0.01, 1e-3, 42, 3, false).unwrap();
        let q = simulate(&sys, &init, 0.0, 0.01, 1e-3, 42, 3, true).unwrap();
        for (a, b) in p.increments.iter().zip(&q.increments) {
            assert_eq!(a.as_slice(), (-b).as_slice());
        }
    }

    #[test]
    fn path_dump_header() {
        let m = builtin(ModelId::A);
        let sys = ReducedCoordSystem::reduced(m.as_ref());
        let init = SimState {
            z: dvector![0.0, 0.5, 0.0],
            chart: 0,
            frame: GroupElement::U1(0.0),
        };
        let p = simulate(&sys, &init, 0.0, 0.01, 1e-3, 1, 0, false).unwrap();
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[0..8], b"FMCPATH1");
    }

    /// One Euler step of η pushed through the projection must agree with
    /// one step of ζ in mean to O(dt²). Both means are computed exactly
    /// by Gauss–Hermite quadrature over the step increments, so the weak
    /// error can be fitted without Monte Carlo noise.
    #[test]
    fn ito_transform_cross_check_slope() {
        for id in [ModelId::A, ModelId::C] {
            let m = builtin(id);
            let dims = m.dims();
            let mut rng = ChaCha12Rng::seed_from_u64(17);
            let start_adapted = {
                let mut p = m.sample_adapted(&mut rng);
                p.a = GroupElement::identity(m.group());
                p
            };
            let q0 = m.action(&m.section(&start_adapted.x, 0), &start_adapted.a, 0);
            let f0 = m.rep_matrix(&start_adapted.a) * &start_adapted.f;

            let orig = OriginalSystem::new(m.as_ref());
            let adapt = ReducedCoordSystem::adapted(m.as_ref());
            let red_dim = dims.base + dims.fiber;

            // exact one-step means under increments ~ N(0, dt)
            let (gh_x, gh_w) = crate::group::gauss_hermite(6);
            let norm = std::f64::consts::PI.powf(-0.5);
            let mean_step = |errs: &mut Vec<f64>, dt: f64| {
                let state_o = SimState {
                    z: {
                        let mut z = DVector::zeros(dims.p + dims.fiber);
                        z.rows_mut(0, dims.p).copy_from(&q0);
                        z.rows_mut(dims.p, dims.fiber).copy_from(&f0);
                        z
                    },
                    chart: 0,
                    frame: GroupElement::identity(m.group()),
                };
                let state_a = SimState {
                    z: {
                        let mut z = DVector::zeros(red_dim);
                        z.rows_mut(0, dims.base).copy_from(&start_adapted.x);
                        z.rows_mut(dims.base, dims.fiber).copy_from(&start_adapted.f);
                        z
                    },
                    chart: 0,
                    frame: GroupElement::identity(m.group()),
                };
                let co = orig.coefficients(&state_o).unwrap();
                let ca = adapt.coefficients(&state_a).unwrap();
                let n_o = orig.n_channels();
                // iterate over quadrature grid of the original increments
                let mut mean_push = DVector::zeros(red_dim);
                let mut idx = vec![0usize; n_o];
                loop {
                    let mut w = 1.0;
                    let mut dw = DVector::zeros(n_o);
                    for (c, &i) in idx.iter().enumerate() {
                        w *= gh_w[i] * norm;
                        dw[c] = 2.0_f64.sqrt() * gh_x[i] * dt.sqrt();
                    }
                    // plain Euler–Maruyama step of η (Itô drift)
                    let z1 = &state_o.z + &co.drift * dt + &co.diffusion * &dw;
                    let tot = TotalState {
                        q: z1.rows(0, dims.p).into_owned(),
                        f: z1.rows(dims.p, dims.fiber).into_owned(),
                        chart: 0,
                        frame: GroupElement::identity(m.group()),
                    };
                    let proj = m.project(&tot).unwrap();
                    for i in 0..dims.base {
                        mean_push[i] += w * proj.x[i];
                    }
                    for a in 0..dims.fiber {
                        mean_push[dims.base + a] += w * proj.f[a];
                    }
                    // advance multi-index
                    let mut c = 0;
                    loop {
                        if c == n_o {
                            break;
                        }
                        idx[c] += 1;
                        if idx[c] < gh_x.len() {
                            break;
                        }
                        idx[c] = 0;
                        c += 1;
                    }
                    if c == n_o {
                        break;
                    }
                }
                // exact mean of one ζ Euler step is just the drift
                let mean_zeta = &state_a.z + &ca.drift * dt;
                errs.push((mean_push - mean_zeta).norm());
            };
            let dts = [1e-2, 5e-3, 2.5e-3];
            let mut errs = Vec::new();
            for &dt in &dts {
                mean_step(&mut errs, dt);
            }
            // fit slope of log err vs log dt
            let slope = (errs[0] / errs[2]).ln() / (dts[0] / dts[2]).ln();
            assert!(
                slope >= 1.9,
                "{id}: mean-consistency slope {slope:.3} (errors {errs:?})"
            );
        }
    }
}
