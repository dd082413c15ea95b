//! Concrete bundle models: the total space `P × V`, the group action, the
//! gauge slice and the potential, behind one trait consumed by the
//! geometry, SDE and Monte Carlo layers.
//!
//! Built-in models register analytic first derivatives of all their
//! evaluators; a callback-defined [`CustomModel`] falls back to central
//! finite differences with step 1e-5. Everything here is immutable after
//! construction and shared freely across worker threads.

mod model_a;
mod model_b;
mod model_c;

pub use model_a::ModelA;
pub use model_b::ModelB;
pub use model_c::ModelC;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::group::{GroupElement, GroupKind};
use crate::linalg;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelId {
    A,
    B,
    C,
    Custom,
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelId::A => write!(f, "A"),
            ModelId::B => write!(f, "B"),
            ModelId::C => write!(f, "C"),
            ModelId::Custom => write!(f, "custom"),
        }
    }
}

/// Dimensions of the bundle: group, base, fiber vector space, and P.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub group: usize,
    pub base: usize,
    pub fiber: usize,
    pub p: usize,
}

/// Physical parameters: μ² = ħ/m, κ a positive dimensionless parameter,
/// m the mass. Defaults are μ = κ = m = 1.
#[derive(Debug, Clone, Copy)]
pub struct BundleParams {
    pub mu: f64,
    pub kappa: f64,
    pub mass: f64,
}

impl Default for BundleParams {
    fn default() -> Self {
        BundleParams {
            mu: 1.0,
            kappa: 1.0,
            mass: 1.0,
        }
    }
}

impl BundleParams {
    /// μ²κ — the diffusion scale multiplying every generator.
    pub fn mu2k(&self) -> f64 {
        self.mu * self.mu * self.kappa
    }

    /// 1/(μ²κm) — the Feynman–Kac potential weight.
    pub fn fk_weight(&self) -> f64 {
        1.0 / (self.mu * self.mu * self.kappa * self.mass)
    }
}

/// A point in adapted coordinates (x, f̃, a) on a given chart.
#[derive(Debug, Clone)]
pub struct AdaptedPoint {
    pub x: DVector<f64>,
    pub f: DVector<f64>,
    pub a: GroupElement,
    pub chart: usize,
}

impl AdaptedPoint {
    pub fn new(
        model: &dyn Model,
        x: DVector<f64>,
        f: DVector<f64>,
        a: GroupElement,
        chart: usize,
    ) -> Result<Self> {
        if x.len() != model.dims().base || f.len() != model.dims().fiber {
            return Err(Error::ChartDomain(format!(
                "adapted point dims ({}, {}) do not match model ({}, {})",
                x.len(),
                f.len(),
                model.dims().base,
                model.dims().fiber
            )));
        }
        if !model.in_base_chart(&x, chart) {
            return Err(Error::ChartDomain(format!(
                "x = {:?} outside chart {chart} range",
                x.as_slice()
            )));
        }
        if let GroupElement::Su2(q) = a {
            if (q.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::ChartDomain(format!(
                    "group element not normalized: |q| - 1 = {:e}",
                    q.norm() - 1.0
                )));
            }
        }
        Ok(AdaptedPoint { x, f, a, chart })
    }

    /// Point at the section lift (a = e) over (x, f̃).
    pub fn on_section(model: &dyn Model, x: DVector<f64>, f: DVector<f64>) -> Result<Self> {
        let a = GroupElement::identity(model.group());
        Self::new(model, x, f, a, 0)
    }
}

/// State of the original process η on P × V: P-chart coordinates, fiber
/// vector, chart id, and (for group-manifold models) the frame the chart
/// is centered on.
#[derive(Debug, Clone)]
pub struct TotalState {
    pub q: DVector<f64>,
    pub f: DVector<f64>,
    pub chart: usize,
    pub frame: GroupElement,
}

/// A concrete bundle: everything the geometry layer evaluates is defined
/// through this trait. All coordinates are chart-local; charts are indexed
/// by small integers.
pub trait Model: Send + Sync {
    fn id(&self) -> ModelId;
    fn group(&self) -> GroupKind;
    fn dims(&self) -> Dims;
    fn params(&self) -> &BundleParams;

    /// Riemannian metric G_AB(Q) on P in chart coordinates.
    fn metric_p(&self, q: &DVector<f64>, chart: usize) -> DMatrix<f64>;

    /// ∂G_AB/∂Q^C for each C. Default: central finite differences.
    fn metric_p_grad(&self, q: &DVector<f64>, chart: usize) -> Vec<DMatrix<f64>> {
        let n = q.len();
        let mut out = Vec::with_capacity(n);
        let mut qp = q.clone();
        for c in 0..n {
            qp[c] = q[c] + FD_STEP;
            let gp = self.metric_p(&qp, chart);
            qp[c] = q[c] - FD_STEP;
            let gm = self.metric_p(&qp, chart);
            qp[c] = q[c];
            out.push((gp - gm) / (2.0 * FD_STEP));
        }
        out
    }

    /// Constant fiber metric G_ab.
    fn metric_v(&self) -> DMatrix<f64>;

    /// Representation generators J̄_α = ∂D̄(a)/∂a^α |_{a=e} on V.
    fn rep_generators(&self) -> Vec<DMatrix<f64>>;

    /// Finite representation matrix D̄(g) acting on V.
    fn rep_matrix(&self, g: &GroupElement) -> DMatrix<f64>;

    /// Group action on P in chart coordinates: F^A(Q, g).
    fn action(&self, q: &DVector<f64>, g: &GroupElement, chart: usize) -> DVector<f64>;

    /// Jacobian F^A_B(Q, g) = ∂F^A/∂Q^B.
    fn action_jacobian_q(&self, q: &DVector<f64>, g: &GroupElement, chart: usize)
        -> DMatrix<f64>;

    /// Killing fields on P: K^A_α(Q) = ∂F^A(Q, a)/∂a^α |_{a=e}, columns α.
    fn killing_p(&self, q: &DVector<f64>, chart: usize) -> DMatrix<f64>;

    /// Local section Q*(x) of the gauge slice Σ = {χ = 0}.
    fn section(&self, x: &DVector<f64>, chart: usize) -> DVector<f64>;

    /// Q*^A_i = ∂Q*^A/∂x^i (n_P × n_M).
    fn section_jacobian(&self, x: &DVector<f64>, chart: usize) -> DMatrix<f64>;

    /// Gauge functions χ^α(Q), zero exactly on the slice.
    fn chi(&self, q: &DVector<f64>, chart: usize) -> DVector<f64>;

    /// χ^α_B = ∂χ^α/∂Q^B (n_G × n_P).
    fn chi_jacobian(&self, q: &DVector<f64>, chart: usize) -> DMatrix<f64>;

    /// Group-invariant potential in reduced coordinates, Ṽ(x, f̃).
    fn potential(&self, x: &DVector<f64>, f: &DVector<f64>) -> f64;

    /// The same potential on the total space, V(Q, f).
    fn potential_total(&self, q: &DVector<f64>, f: &DVector<f64>, chart: usize) -> f64;

    /// Adapted coordinates of a total-space point.
    fn project(&self, state: &TotalState) -> Result<AdaptedPoint>;

    /// Whether x lies in the declared range of the base chart.
    fn in_base_chart(&self, x: &DVector<f64>, chart: usize) -> bool;

    /// Normalize total-space state after an integration step: wrap periodic
    /// coordinates, switch stereographic charts, re-base group charts.
    fn normalize_total(&self, state: &mut TotalState);

    /// Normalize reduced state (x, f̃) after a step; may switch the base
    /// chart and gauge-rotate f̃ accordingly.
    fn normalize_reduced(&self, x: &mut DVector<f64>, f: &mut DVector<f64>, chart: &mut usize);

    /// Analytic ln d = ln det(γ + γ′) derivatives, when the model provides
    /// them (used by hot simulation loops; the generic finite-difference
    /// route remains the test oracle).
    fn sigma_analytic(&self, _x: &DVector<f64>, _f: &DVector<f64>, _chart: usize) -> Option<SigmaClosed> {
        None
    }

    /// Analytic drift/diffusion of the reduced (x, f̃) systems, when
    /// available.
    fn reduced_coefficients_analytic(
        &self,
        _x: &DVector<f64>,
        _f: &DVector<f64>,
        _chart: usize,
    ) -> Option<ReducedClosed> {
        None
    }

    /// Analytic drift/diffusion of the original process, when available.
    fn original_coefficients_analytic(
        &self,
        _q: &DVector<f64>,
        _chart: usize,
    ) -> Option<OriginalClosed> {
        None
    }

    /// Analytic coefficients of the adapted process ζ, when available.
    fn adapted_coefficients_analytic(
        &self,
        _x: &DVector<f64>,
        _f: &DVector<f64>,
        _chart: usize,
    ) -> Option<AdaptedClosed> {
        None
    }

    /// Draw a random adapted point in the interior of a chart (used by the
    /// audit experiments and property tests).
    fn sample_adapted(&self, rng: &mut rand_chacha::ChaCha12Rng) -> AdaptedPoint {
        use rand::Rng;
        let dims = self.dims();
        let x = DVector::from_fn(dims.base, |_, _| rng.random_range(-0.6..0.6));
        let f = DVector::from_fn(dims.fiber, |_, _| rng.random_range(-1.5..1.5));
        let a = match self.group() {
            GroupKind::U1 => GroupElement::U1(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)),
            GroupKind::Su2 => {
                let mut v = [0.0; 3];
                for c in v.iter_mut() {
                    *c = rng.random_range(-1.0..1.0);
                }
                let n = (v.iter().map(|t| t * t).sum::<f64>()).sqrt().max(1e-9);
                let scale = rng.random_range(0.05..1.2) / n;
                GroupElement::Su2(crate::group::Quat::exp_canonical(&[
                    v[0] * scale,
                    v[1] * scale,
                    v[2] * scale,
                ]))
            }
        };
        AdaptedPoint { x, f, a, chart: 0 }
    }

    /// Draw a random total-space state by lifting a sampled adapted point.
    fn sample_total(&self, rng: &mut rand_chacha::ChaCha12Rng) -> TotalState {
        let p = self.sample_adapted(rng);
        let q = self.action(&self.section(&p.x, p.chart), &p.a, p.chart);
        let f = self.rep_matrix(&p.a) * &p.f;
        TotalState {
            q,
            f,
            chart: p.chart,
            frame: GroupElement::identity(self.group()),
        }
    }
}

/// Closed-form σ = ln d data (value, gradients, Hessian blocks).
#[derive(Debug, Clone)]
pub struct SigmaClosed {
    pub sigma: f64,
    pub grad_x: DVector<f64>,
    pub grad_f: DVector<f64>,
    pub hess_xx: DMatrix<f64>,
    pub hess_xf: DMatrix<f64>,
    pub hess_ff: DMatrix<f64>,
}

/// Closed-form reduced-system coefficients: drifts b (with √d terms) and
/// b̃ (without), the diffusion blocks of the filtered system, the
/// Stratonovich drift correction ½ (∂Σ)Σ of the combined (x, f̃) system,
/// and the per-step contractions the channel filtering needs.
#[derive(Debug, Clone)]
pub struct ReducedClosed {
    pub b_x: DVector<f64>,
    pub b_f: DVector<f64>,
    pub bt_x: DVector<f64>,
    pub bt_f: DVector<f64>,
    /// X̃^i_m̄ (n_M × n_M).
    pub xt_xm: DMatrix<f64>,
    /// X̃^a_m̄ (n_V × n_M).
    pub xt_fm: DMatrix<f64>,
    /// X̃^a_b̄ (n_V × n_V).
    pub xt_fb: DMatrix<f64>,
    /// Stratonovich correction ½ Σ_j (∂_j Σ_{·c}) Σ_{jc} over (x,f̃).
    pub strat_correction: DVector<f64>,
    /// d^{μν}, inverse orbit metric (n_G × n_G).
    pub d_inv: DMatrix<f64>,
    /// Γ₁^ν of the multiplicative integral's du-part (n_G).
    pub gamma1: DVector<f64>,
    /// 𝒜γ^ν_k X̃^k_m̄ (n_G × n_M), the dw̃^m̄ channel contraction.
    pub conn_x: DMatrix<f64>,
    /// 𝒜̃^ν_a X̃^a_b̄ (n_G × n_V), the dw̃^b̄ channel contraction.
    pub conn_f: DMatrix<f64>,
}

/// Closed-form adapted-process (ζ) coefficients: the drift equals the
/// filtered one; the diffusion shares the P-sector Wiener channels.
#[derive(Debug, Clone)]
pub struct AdaptedClosed {
    pub b_x: DVector<f64>,
    pub b_f: DVector<f64>,
    /// X^i_M̄ = T N 𝒳 (n_M × n_P).
    pub x_xm: DMatrix<f64>,
    /// X^a_M̄ = N^a_A 𝒳^A_M̄ (n_V × n_P).
    pub x_fm: DMatrix<f64>,
    /// X^a_b̄ = 𝒳^a_b̄ (n_V × n_V).
    pub x_fb: DMatrix<f64>,
    /// ½ (∂Σ)Σ over (x, f̃), bare.
    pub strat_correction: DVector<f64>,
}

/// Closed-form original-process coefficients in a P-chart.
#[derive(Debug, Clone)]
pub struct OriginalClosed {
    /// Generator (Itô) drift on the P-block, ½μ²κ G^{-1/2} ∂(G^{1/2} G^{AB}).
    pub drift_q: DVector<f64>,
    /// Diffusion block 𝒳^A_M̄ with 𝒳𝒳ᵀ = G^{AB} (symmetric root).
    pub diff_q: DMatrix<f64>,
    /// Stratonovich correction ½ (∂𝒳)𝒳 on the P-block.
    pub strat_correction_q: DVector<f64>,
}

/// A model defined by plain closures; derivatives default to central
/// finite differences. Exists so a user can exercise the machinery on a
/// bundle that is not built in.
pub struct CustomModel {
    pub group: GroupKind,
    pub dims: Dims,
    pub params: BundleParams,
    pub metric_p: Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    pub metric_v: DMatrix<f64>,
    pub rep_generators: Vec<DMatrix<f64>>,
    pub rep_matrix: Box<dyn Fn(&GroupElement) -> DMatrix<f64> + Send + Sync>,
    pub action: Box<dyn Fn(&DVector<f64>, &GroupElement) -> DVector<f64> + Send + Sync>,
    pub section: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub chi: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub potential: Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>,
    pub potential_total: Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>,
}

impl Model for CustomModel {
    fn id(&self) -> ModelId {
        ModelId::Custom
    }
    fn group(&self) -> GroupKind {
        self.group
    }
    fn dims(&self) -> Dims {
        self.dims
    }
    fn params(&self) -> &BundleParams {
        &self.params
    }
    fn metric_p(&self, q: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        (self.metric_p)(q)
    }
    fn metric_v(&self) -> DMatrix<f64> {
        self.metric_v.clone()
    }
    fn rep_generators(&self) -> Vec<DMatrix<f64>> {
        self.rep_generators.clone()
    }
    fn rep_matrix(&self, g: &GroupElement) -> DMatrix<f64> {
        (self.rep_matrix)(g)
    }
    fn action(&self, q: &DVector<f64>, g: &GroupElement, _chart: usize) -> DVector<f64> {
        (self.action)(q, g)
    }
    fn action_jacobian_q(
        &self,
        q: &DVector<f64>,
        g: &GroupElement,
        _chart: usize,
    ) -> DMatrix<f64> {
        linalg::fd_jacobian(|z| (self.action)(z, g), q, FD_STEP)
    }
    fn killing_p(&self, q: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        let kind = self.group;
        linalg::fd_jacobian(
            |a| (self.action)(q, &GroupElement::from_canonical(kind, a)),
            &DVector::zeros(self.dims.group),
            FD_STEP,
        )
    }
    fn section(&self, x: &DVector<f64>, _chart: usize) -> DVector<f64> {
        (self.section)(x)
    }
    fn section_jacobian(&self, x: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        linalg::fd_jacobian(|z| (self.section)(z), x, FD_STEP)
    }
    fn chi(&self, q: &DVector<f64>, _chart: usize) -> DVector<f64> {
        (self.chi)(q)
    }
    fn chi_jacobian(&self, q: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        linalg::fd_jacobian(|z| (self.chi)(z), q, FD_STEP)
    }
    fn potential(&self, x: &DVector<f64>, f: &DVector<f64>) -> f64 {
        (self.potential)(x, f)
    }
    fn potential_total(&self, q: &DVector<f64>, f: &DVector<f64>, _chart: usize) -> f64 {
        (self.potential_total)(q, f)
    }
    fn project(&self, _state: &TotalState) -> Result<AdaptedPoint> {
        Err(Error::ChartDomain(
            "custom models do not implement projection".into(),
        ))
    }
    fn in_base_chart(&self, _x: &DVector<f64>, _chart: usize) -> bool {
        true
    }
    fn normalize_total(&self, _state: &mut TotalState) {}
    fn normalize_reduced(&self, _x: &mut DVector<f64>, _f: &mut DVector<f64>, _chart: &mut usize) {}
}

/// Instantiate a built-in model with default parameters.
pub fn builtin(id: ModelId) -> Box<dyn Model> {
    match id {
        ModelId::A => Box::new(ModelA::default()),
        ModelId::B => Box::new(ModelB::default()),
        ModelId::C => Box::new(ModelC::default()),
        ModelId::Custom => panic!("custom models are built by the caller"),
    }
}
