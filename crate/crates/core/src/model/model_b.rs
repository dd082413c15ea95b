//! Model B: P = S³ (unit quaternions, round metric) with the U(1) Hopf
//! circle action p ↦ p·e^{θk}; V = ℝ² with a charge-n rotation.
//!
//! P is charted by the stereographic pair. In chart c the quaternion is
//! recovered as q(y) with q₀ = ±(1−|y|²)/(1+|y|²), q_i = 2y_i/(1+|y|²),
//! and the round metric is conformally flat, G_AB = 4δ/(1+|y|²)².
//! The Hopf projection is n(q) = q k q̄ ∈ S²; the base carries its own
//! stereographic chart pair, and chart c uses the section
//!
//!   s₀(n) = (1 − n k)/|1 − n k|,        s₁(n) = [(1 + n k)/|1 + n k|]·i,
//!
//! which satisfy s k s̄ = n and are singular exactly at the opposite
//! chart's pole. The gauge function χ(y) is the fiber angle of
//! s(n(q))⁻¹ q, which lies on the stabilizer circle of k exactly.

use nalgebra::{DMatrix, DVector};

use super::{
    AdaptedPoint, BundleParams, Dims, Model, ModelId, OriginalClosed, TotalState,
};
use crate::error::Result;
use crate::group::{GroupElement, GroupKind, Quat};

#[derive(Debug, Clone)]
pub struct ModelB {
    pub charge: f64,
    /// Potential V = v_fiber·|f̃|².
    pub v_fiber: f64,
    pub params: BundleParams,
}

impl Default for ModelB {
    fn default() -> Self {
        ModelB {
            charge: 1.0,
            v_fiber: 0.0,
            params: BundleParams::default(),
        }
    }
}

const K_QUAT: Quat = Quat([0.0, 0.0, 0.0, 1.0]);
const I_QUAT: Quat = Quat([0.0, 1.0, 0.0, 0.0]);

fn rot(t: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()])
}

fn j90() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])
}

/// 4×4 matrix of left multiplication q ↦ p·q.
fn left_mul(p: &Quat) -> DMatrix<f64> {
    let [a, b, c, d] = p.0;
    DMatrix::from_row_slice(
        4,
        4,
        &[
            a, -b, -c, -d, //
            b, a, -d, c, //
            c, d, a, -b, //
            d, -c, b, a,
        ],
    )
}

/// 4×4 matrix of right multiplication q ↦ q·p.
fn right_mul(p: &Quat) -> DMatrix<f64> {
    let [a, b, c, d] = p.0;
    DMatrix::from_row_slice(
        4,
        4,
        &[
            a, -b, -c, -d, //
            b, a, d, -c, //
            c, -d, a, b, //
            d, c, -b, a,
        ],
    )
}

fn conj_matrix() -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0, -1.0, -1.0]))
}

/// Quaternion of chart coordinates y (chart 0 projects from q₀ = −1).
fn quat_from_chart(y: &DVector<f64>, chart: usize) -> Quat {
    let r2 = y.norm_squared();
    let s = 1.0 + r2;
    let q0 = (1.0 - r2) / s * if chart == 0 { 1.0 } else { -1.0 };
    Quat([q0, 2.0 * y[0] / s, 2.0 * y[1] / s, 2.0 * y[2] / s])
}

/// 4×3 Jacobian of `quat_from_chart`.
fn quat_from_chart_jac(y: &DVector<f64>, chart: usize) -> DMatrix<f64> {
    let r2 = y.norm_squared();
    let s = 1.0 + r2;
    let sign = if chart == 0 { 1.0 } else { -1.0 };
    let mut jac = DMatrix::zeros(4, 3);
    for j in 0..3 {
        jac[(0, j)] = -sign * 4.0 * y[j] / (s * s);
        for i in 0..3 {
            jac[(i + 1, j)] =
                2.0 * ((i == j) as u8 as f64) / s - 4.0 * y[i] * y[j] / (s * s);
        }
    }
    jac
}

/// Chart coordinates of a quaternion (must avoid the chart's pole).
fn chart_from_quat(q: &Quat, chart: usize) -> DVector<f64> {
    let denom = if chart == 0 { 1.0 + q.0[0] } else { 1.0 - q.0[0] };
    DVector::from_vec(vec![q.0[1] / denom, q.0[2] / denom, q.0[3] / denom])
}

/// 3×4 Jacobian of `chart_from_quat`.
fn chart_from_quat_jac(q: &Quat, chart: usize) -> DMatrix<f64> {
    let sign = if chart == 0 { 1.0 } else { -1.0 };
    let denom = if chart == 0 { 1.0 + q.0[0] } else { 1.0 - q.0[0] };
    let mut jac = DMatrix::zeros(3, 4);
    for i in 0..3 {
        jac[(i, 0)] = -sign * q.0[i + 1] / (denom * denom);
        jac[(i, i + 1)] = 1.0 / denom;
    }
    jac
}

/// Hopf projection n = Im(q k q̄) ∈ S² and its 3×4 Jacobian.
fn hopf(q: &Quat) -> DVector<f64> {
    let n = q.mul(&K_QUAT).mul(&q.conj());
    DVector::from_vec(vec![n.0[1], n.0[2], n.0[3]])
}

fn hopf_jac(q: &Quat) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(3, 4);
    for mu in 0..4 {
        let mut e = Quat([0.0, 0.0, 0.0, 0.0]);
        e.0[mu] = 1.0;
        let dn = e.mul(&K_QUAT).mul(&q.conj());
        let dn2 = q.mul(&K_QUAT).mul(&e.conj());
        for i in 0..3 {
            jac[(i, mu)] = dn.0[i + 1] + dn2.0[i + 1];
        }
    }
    jac
}

/// S² point from base-chart coordinates (chart 0 centered on +k).
fn s2_from_chart(x: &DVector<f64>, chart: usize) -> DVector<f64> {
    let r2 = x.norm_squared();
    let s = 1.0 + r2;
    let sign = if chart == 0 { 1.0 } else { -1.0 };
    DVector::from_vec(vec![2.0 * x[0] / s, 2.0 * x[1] / s, sign * (1.0 - r2) / s])
}

/// 3×2 Jacobian of `s2_from_chart`.
fn s2_from_chart_jac(x: &DVector<f64>, chart: usize) -> DMatrix<f64> {
    let r2 = x.norm_squared();
    let s = 1.0 + r2;
    let sign = if chart == 0 { 1.0 } else { -1.0 };
    let mut jac = DMatrix::zeros(3, 2);
    for j in 0..2 {
        for i in 0..2 {
            jac[(i, j)] = 2.0 * ((i == j) as u8 as f64) / s - 4.0 * x[i] * x[j] / (s * s);
        }
        jac[(2, j)] = -sign * 4.0 * x[j] / (s * s);
    }
    jac
}

/// Base-chart coordinates of an S² point.
fn s2_to_chart(n: &DVector<f64>, chart: usize) -> DVector<f64> {
    let denom = if chart == 0 { 1.0 + n[2] } else { 1.0 - n[2] };
    DVector::from_vec(vec![n[0] / denom, n[1] / denom])
}

/// Section quaternion s_c(n) with s k s̄ = n, and its 4×3 Jacobian in n.
fn section_quat(n: &DVector<f64>, chart: usize) -> (Quat, DMatrix<f64>) {
    // A = 1 ∓ n·k, affine in n; s = A/|A| (chart 0), s = (A/|A|)·i (chart 1).
    let nq = Quat([0.0, n[0], n[1], n[2]]);
    let sign = if chart == 0 { -1.0 } else { 1.0 };
    let prod = nq.mul(&K_QUAT);
    let a = Quat([
        1.0 + sign * prod.0[0],
        sign * prod.0[1],
        sign * prod.0[2],
        sign * prod.0[3],
    ]);
    // dA/dn_j = ± e_j·k (constant quaternions).
    let mut da = DMatrix::zeros(4, 3);
    for j in 0..3 {
        let mut e = Quat([0.0, 0.0, 0.0, 0.0]);
        e.0[j + 1] = 1.0;
        let col = e.mul(&K_QUAT);
        for mu in 0..4 {
            da[(mu, j)] = sign * col.0[mu];
        }
    }
    let norm = a.norm();
    let ahat = Quat([a.0[0] / norm, a.0[1] / norm, a.0[2] / norm, a.0[3] / norm]);
    // d(A/|A|) = (dA − Â (Â·dA)) / |A|.
    let mut ds = DMatrix::zeros(4, 3);
    for j in 0..3 {
        let dot: f64 = (0..4).map(|mu| ahat.0[mu] * da[(mu, j)]).sum();
        for mu in 0..4 {
            ds[(mu, j)] = (da[(mu, j)] - ahat.0[mu] * dot) / norm;
        }
    }
    if chart == 0 {
        (ahat, ds)
    } else {
        (ahat.mul(&I_QUAT), right_mul(&I_QUAT) * ds)
    }
}

impl ModelB {
    /// Fiber angle χ of y relative to the chart's section, with its
    /// gradient over y. g = s(n(q))⁻¹ q lies on the circle (cos χ, 0, 0,
    /// sin χ).
    fn fiber_angle(&self, y: &DVector<f64>, chart: usize) -> (f64, DVector<f64>) {
        let q = quat_from_chart(y, chart);
        let dq = quat_from_chart_jac(y, chart);
        let n = hopf(&q);
        let dn = hopf_jac(&q) * &dq;
        let (s, ds_dn) = section_quat(&n, chart);
        let ds = ds_dn * dn;
        let g = s.conj().mul(&q);
        // dg = conj(ds)·q + s̄·dq.
        let dg = right_mul(&q) * (conj_matrix() * ds) + left_mul(&s.conj()) * dq;
        let denom = g.0[0] * g.0[0] + g.0[3] * g.0[3];
        let chi = g.0[3].atan2(g.0[0]);
        let mut grad = DVector::zeros(3);
        for j in 0..3 {
            grad[j] = (g.0[0] * dg[(3, j)] - g.0[3] * dg[(0, j)]) / denom;
        }
        (chi, grad)
    }
}

impl Model for ModelB {
    fn id(&self) -> ModelId {
        ModelId::B
    }
    fn group(&self) -> GroupKind {
        GroupKind::U1
    }
    fn dims(&self) -> Dims {
        Dims {
            group: 1,
            base: 2,
            fiber: 2,
            p: 3,
        }
    }
    fn params(&self) -> &BundleParams {
        &self.params
    }

    fn metric_p(&self, q: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        let s = 1.0 + q.norm_squared();
        DMatrix::identity(3, 3) * (4.0 / (s * s))
    }

    fn metric_p_grad(&self, q: &DVector<f64>, _chart: usize) -> Vec<DMatrix<f64>> {
        let s = 1.0 + q.norm_squared();
        (0..3)
            .map(|c| DMatrix::identity(3, 3) * (-16.0 * q[c] / (s * s * s)))
            .collect()
    }

    fn metric_v(&self) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }

    fn rep_generators(&self) -> Vec<DMatrix<f64>> {
        vec![j90() * self.charge]
    }

    fn rep_matrix(&self, g: &GroupElement) -> DMatrix<f64> {
        let GroupElement::U1(t) = g else {
            panic!("Model B carries a U(1) action")
        };
        rot(self.charge * t)
    }

    fn action(&self, y: &DVector<f64>, g: &GroupElement, chart: usize) -> DVector<f64> {
        let GroupElement::U1(t) = g else {
            panic!("Model B carries a U(1) action")
        };
        let q = quat_from_chart(y, chart);
        let rot_k = Quat([t.cos(), 0.0, 0.0, t.sin()]);
        chart_from_quat(&q.mul(&rot_k), chart)
    }

    fn action_jacobian_q(
        &self,
        y: &DVector<f64>,
        g: &GroupElement,
        chart: usize,
    ) -> DMatrix<f64> {
        let GroupElement::U1(t) = g else {
            panic!("Model B carries a U(1) action")
        };
        let q = quat_from_chart(y, chart);
        let rot_k = Quat([t.cos(), 0.0, 0.0, t.sin()]);
        let q2 = q.mul(&rot_k);
        chart_from_quat_jac(&q2, chart) * right_mul(&rot_k) * quat_from_chart_jac(y, chart)
    }

    fn killing_p(&self, y: &DVector<f64>, chart: usize) -> DMatrix<f64> {
        let q = quat_from_chart(y, chart);
        let qk = q.mul(&K_QUAT);
        let jac = chart_from_quat_jac(&q, chart);
        let mut k = DMatrix::zeros(3, 1);
        for i in 0..3 {
            k[(i, 0)] = (0..4).map(|mu| jac[(i, mu)] * qk.0[mu]).sum();
        }
        k
    }

    fn section(&self, x: &DVector<f64>, chart: usize) -> DVector<f64> {
        let n = s2_from_chart(x, chart);
        let (s, _) = section_quat(&n, chart);
        chart_from_quat(&s, chart)
    }

    fn section_jacobian(&self, x: &DVector<f64>, chart: usize) -> DMatrix<f64> {
        let n = s2_from_chart(x, chart);
        let dn = s2_from_chart_jac(x, chart);
        let (s, ds_dn) = section_quat(&n, chart);
        chart_from_quat_jac(&s, chart) * ds_dn * dn
    }

    fn chi(&self, y: &DVector<f64>, chart: usize) -> DVector<f64> {
        DVector::from_vec(vec![self.fiber_angle(y, chart).0])
    }

    fn chi_jacobian(&self, y: &DVector<f64>, chart: usize) -> DMatrix<f64> {
        let (_, grad) = self.fiber_angle(y, chart);
        DMatrix::from_row_slice(1, 3, grad.as_slice())
    }

    fn potential(&self, _x: &DVector<f64>, f: &DVector<f64>) -> f64 {
        self.v_fiber * f.norm_squared()
    }

    fn potential_total(&self, _q: &DVector<f64>, f: &DVector<f64>, _chart: usize) -> f64 {
        self.v_fiber * f.norm_squared()
    }

    fn project(&self, state: &TotalState) -> Result<AdaptedPoint> {
        let chart = state.chart;
        let q = quat_from_chart(&state.q, chart);
        let n = hopf(&q);
        let x = s2_to_chart(&n, chart);
        let (a, _) = self.fiber_angle(&state.q, chart);
        let f_tilde = rot(-self.charge * a) * &state.f;
        AdaptedPoint::new(self, x, f_tilde, GroupElement::U1(a), chart)
    }

    fn in_base_chart(&self, x: &DVector<f64>, chart: usize) -> bool {
        chart < 2 && x.norm() <= 1.4
    }

    fn normalize_total(&self, state: &mut TotalState) {
        let r2 = state.q.norm_squared();
        if r2 > 1.25f64 * 1.25 {
            let y = state.q.clone();
            state.q = y / r2;
            state.chart = 1 - state.chart;
        }
    }

    fn normalize_reduced(&self, x: &mut DVector<f64>, f: &mut DVector<f64>, chart: &mut usize) {
        let r2 = x.norm_squared();
        if r2 > 1.25f64 * 1.25 {
            let n = s2_from_chart(x, *chart);
            let new_chart = 1 - *chart;
            let x_new = s2_to_chart(&n, new_chart);
            // Gauge change between the two sections at the same base point:
            // s_old(n) = s_new(n)·e^{ωk}; the new group coordinate is
            // a + ω, so f̃ rotates by D(ω) = rot(−charge·ω).
            let (s_old, _) = section_quat(&n, *chart);
            let (s_new, _) = section_quat(&n, new_chart);
            let g = s_new.conj().mul(&s_old);
            let omega = g.0[3].atan2(g.0[0]);
            let f_new = rot(-self.charge * omega) * &*f;
            *x = x_new;
            *f = f_new;
            *chart = new_chart;
        }
    }

    fn original_coefficients_analytic(
        &self,
        q: &DVector<f64>,
        _chart: usize,
    ) -> Option<OriginalClosed> {
        // Conformally flat chart: 𝒳 = c(y) I with c = (1+|y|²)/2;
        // bare drift G^{-1/2}∂(G^{1/2}G^{AB}) = −½(1+|y|²) y, and
        // ½(∂𝒳)𝒳 = ¼(1+|y|²) y.
        let s = 1.0 + q.norm_squared();
        Some(OriginalClosed {
            drift_q: q * (-0.5 * s),
            diff_q: DMatrix::identity(3, 3) * (s / 2.0),
            strat_correction_q: q * (0.25 * s),
        })
    }
}
