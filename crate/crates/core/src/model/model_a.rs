//! Model A: P = T² with coordinates (x, α), metric diag(R₁², R₂²), U(1)
//! acting by α-shift; V = ℝ² with the Euclidean metric and a charge-q
//! rotation representation. Gauge slice χ = α with section Q*(x) = (x, 0).
//!
//! Everything is abelian and flat, which makes all reduced-geometry
//! objects closed-form:
//!
//!   γ = R₂²,  γ′ = q²|f̃|²,  d = R₂² + q²|f̃|²,  h = R₁²,
//!   𝒜 (base components) ≡ 0,  dH = R₁²R₂²  (constant),
//!   ĝ^{ab} = δ^{ab} + K^a K^b / R₂²  with  K = q J f̃.
//!
//! The closed forms below are the hot-path providers; the generic
//! finite-difference machinery reproduces them in the test suite.

use nalgebra::{DMatrix, DVector};

use super::{
    AdaptedClosed, AdaptedPoint, BundleParams, Dims, Model, ModelId, OriginalClosed,
    ReducedClosed, SigmaClosed, TotalState,
};
use crate::error::Result;
use crate::group::{wrap_angle, GroupElement, GroupKind};

#[derive(Debug, Clone)]
pub struct ModelA {
    pub r1: f64,
    pub r2: f64,
    pub charge: f64,
    /// Potential V = v_fiber·|f̃|² + v_base·cos x.
    pub v_fiber: f64,
    pub v_base: f64,
    pub params: BundleParams,
}

impl Default for ModelA {
    fn default() -> Self {
        ModelA {
            r1: 1.0,
            r2: 1.0,
            charge: 1.0,
            v_fiber: 0.0,
            v_base: 0.0,
            params: BundleParams::default(),
        }
    }
}

/// 90° rotation generator on ℝ².
fn j90() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])
}

fn rot(t: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()])
}

impl ModelA {
    fn d_orbit(&self, f: &DVector<f64>) -> f64 {
        self.r2 * self.r2 + self.charge * self.charge * f.norm_squared()
    }

    /// K^a = q J f̃.
    fn killing_v(&self, f: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![-self.charge * f[1], self.charge * f[0]])
    }
}

impl Model for ModelA {
    fn id(&self) -> ModelId {
        ModelId::A
    }
    fn group(&self) -> GroupKind {
        GroupKind::U1
    }
    fn dims(&self) -> Dims {
        Dims {
            group: 1,
            base: 1,
            fiber: 2,
            p: 2,
        }
    }
    fn params(&self) -> &BundleParams {
        &self.params
    }

    fn metric_p(&self, _q: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![self.r1 * self.r1, self.r2 * self.r2]))
    }

    fn metric_p_grad(&self, _q: &DVector<f64>, _chart: usize) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)]
    }

    fn metric_v(&self) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }

    fn rep_generators(&self) -> Vec<DMatrix<f64>> {
        vec![j90() * self.charge]
    }

    fn rep_matrix(&self, g: &GroupElement) -> DMatrix<f64> {
        let GroupElement::U1(t) = g else {
            panic!("Model A carries a U(1) action")
        };
        rot(self.charge * t)
    }

    fn action(&self, q: &DVector<f64>, g: &GroupElement, _chart: usize) -> DVector<f64> {
        let GroupElement::U1(t) = g else {
            panic!("Model A carries a U(1) action")
        };
        DVector::from_vec(vec![q[0], q[1] + t])
    }

    fn action_jacobian_q(
        &self,
        _q: &DVector<f64>,
        _g: &GroupElement,
        _chart: usize,
    ) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }

    fn killing_p(&self, _q: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
    }

    fn section(&self, x: &DVector<f64>, _chart: usize) -> DVector<f64> {
        DVector::from_vec(vec![x[0], 0.0])
    }

    fn section_jacobian(&self, _x: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[1.0, 0.0])
    }

    fn chi(&self, q: &DVector<f64>, _chart: usize) -> DVector<f64> {
        DVector::from_vec(vec![q[1]])
    }

    fn chi_jacobian(&self, _q: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[0.0, 1.0])
    }

    fn potential(&self, x: &DVector<f64>, f: &DVector<f64>) -> f64 {
        self.v_fiber * f.norm_squared() + self.v_base * x[0].cos()
    }

    fn potential_total(&self, q: &DVector<f64>, f: &DVector<f64>, _chart: usize) -> f64 {
        self.v_fiber * f.norm_squared() + self.v_base * q[0].cos()
    }

    fn project(&self, state: &TotalState) -> Result<AdaptedPoint> {
        let a = wrap_angle(state.q[1]);
        let f_tilde = rot(-self.charge * a) * &state.f;
        AdaptedPoint::new(
            self,
            DVector::from_vec(vec![wrap_angle(state.q[0])]),
            f_tilde,
            GroupElement::U1(a),
            0,
        )
    }

    fn in_base_chart(&self, _x: &DVector<f64>, chart: usize) -> bool {
        chart == 0
    }

    fn normalize_total(&self, state: &mut TotalState) {
        state.q[0] = wrap_angle(state.q[0]);
        state.q[1] = wrap_angle(state.q[1]);
    }

    fn normalize_reduced(&self, x: &mut DVector<f64>, _f: &mut DVector<f64>, _chart: &mut usize) {
        x[0] = wrap_angle(x[0]);
    }

    fn sigma_analytic(
        &self,
        _x: &DVector<f64>,
        f: &DVector<f64>,
        _chart: usize,
    ) -> Option<SigmaClosed> {
        let c2 = self.charge * self.charge;
        let d = self.d_orbit(f);
        let grad_f = f * (2.0 * c2 / d);
        let hess_ff = DMatrix::identity(2, 2) * (2.0 * c2 / d)
            - (f * f.transpose()) * (4.0 * c2 * c2 / (d * d));
        Some(SigmaClosed {
            sigma: d.ln(),
            grad_x: DVector::zeros(1),
            grad_f,
            hess_xx: DMatrix::zeros(1, 1),
            hess_xf: DMatrix::zeros(1, 2),
            hess_ff,
        })
    }

    fn reduced_coefficients_analytic(
        &self,
        _x: &DVector<f64>,
        f: &DVector<f64>,
        _chart: usize,
    ) -> Option<ReducedClosed> {
        let c = self.charge;
        let c2 = c * c;
        let r2sq = self.r2 * self.r2;
        let d = self.d_orbit(f);
        let sqrt_d = d.sqrt();
        let k = self.killing_v(f);
        let r = f.norm();

        // X̃^a_b̄ = (δ + K Kᵀ/R₂²)^{1/2} = I + (√d/R₂ − 1) K̂ K̂ᵀ.
        let mut xt_fb = DMatrix::identity(2, 2);
        if k.norm() > 1e-300 {
            let khat = &k / k.norm();
            xt_fb += (&khat * khat.transpose()) * (sqrt_d / self.r2 - 1.0);
        }

        // Stratonovich correction on the f̃-block:
        // ½ Σ_{c,b} (∂_c X̃^a_b) X̃^c_b = −(d − R₂√d)/(2R₂²r²) · f̃.
        let mut strat = DVector::zeros(3);
        if r > 1e-12 && c != 0.0 {
            let coef = (d - self.r2 * sqrt_d) / (2.0 * r2sq * r * r);
            strat[1] = -coef * f[0];
            strat[2] = -coef * f[1];
        }

        let b_f = f * (-c2 / r2sq);
        let bt_f = f * (-c2 / r2sq - c2 / d);

        // 𝒜̃^ν_a X̃^a_b̄ = Kᵀ / (R₂ √d).
        let conn_f = DMatrix::from_row_slice(1, 2, &[k[0], k[1]]) / (self.r2 * sqrt_d);

        Some(ReducedClosed {
            b_x: DVector::zeros(1),
            b_f,
            bt_x: DVector::zeros(1),
            bt_f,
            xt_xm: DMatrix::from_element(1, 1, 1.0 / self.r1),
            xt_fm: DMatrix::zeros(2, 1),
            xt_fb,
            strat_correction: strat,
            d_inv: DMatrix::from_element(1, 1, 1.0 / d),
            gamma1: DVector::zeros(1),
            conn_x: DMatrix::zeros(1, 1),
            conn_f,
        })
    }

    fn original_coefficients_analytic(
        &self,
        _q: &DVector<f64>,
        _chart: usize,
    ) -> Option<OriginalClosed> {
        Some(OriginalClosed {
            drift_q: DVector::zeros(2),
            diff_q: DMatrix::from_diagonal(&DVector::from_vec(vec![
                1.0 / self.r1,
                1.0 / self.r2,
            ])),
            strat_correction_q: DVector::zeros(2),
        })
    }

    fn adapted_coefficients_analytic(
        &self,
        x: &DVector<f64>,
        f: &DVector<f64>,
        chart: usize,
    ) -> Option<AdaptedClosed> {
        // X^i_M̄ = (1/R₁, 0); X^a_M̄ columns: (0 | −K/R₂); X^a_b̄ = I;
        // strat correction ½(∂X^a_M̄)X = −½q²f̃/R₂².
        let red = self.reduced_coefficients_analytic(x, f, chart)?;
        let k = self.killing_v(f);
        let r2sq = self.r2 * self.r2;
        let mut x_fm = DMatrix::zeros(2, 2);
        x_fm.set_column(1, &(-&k / self.r2));
        let mut strat = DVector::zeros(3);
        strat[1] = -0.5 * self.charge * self.charge * f[0] / r2sq;
        strat[2] = -0.5 * self.charge * self.charge * f[1] / r2sq;
        Some(AdaptedClosed {
            b_x: red.b_x,
            b_f: red.b_f,
            x_xm: DMatrix::from_row_slice(1, 2, &[1.0 / self.r1, 0.0]),
            x_fm,
            x_fb: DMatrix::identity(2, 2),
            strat_correction: strat,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn killing_on_fiber_matches_generator_convention() {
        // f̃ = (1,0), q = 1 → K_V = (0,1).
        let m = ModelA::default();
        let f = DVector::from_vec(vec![1.0, 0.0]);
        let k = m.killing_v(&f);
        assert_relative_eq!(k[0], 0.0);
        assert_relative_eq!(k[1], 1.0);
    }

    #[test]
    fn projection_undoes_group_action() {
        let m = ModelA {
            charge: 2.0,
            ..ModelA::default()
        };
        let state = TotalState {
            q: DVector::from_vec(vec![0.3, 0.8]),
            f: DVector::from_vec(vec![0.5, -0.2]),
            chart: 0,
            frame: GroupElement::U1(0.0),
        };
        let p = m.project(&state).unwrap();
        // Rebuild f = D̄(a) f̃ and Q = F(Q*(x), a).
        let f_back = m.rep_matrix(&p.a) * &p.f;
        assert_relative_eq!(f_back[0], state.f[0], epsilon = 1e-14);
        assert_relative_eq!(f_back[1], state.f[1], epsilon = 1e-14);
        let q_back = m.action(&m.section(&p.x, 0), &p.a, 0);
        assert_relative_eq!(q_back[1], state.q[1], epsilon = 1e-14);
    }

    #[test]
    fn sigma_closed_form_at_unit_point() {
        // σ = ln(R₂² + q²|f̃|²); at f̃ = (1,0), q = R₂ = 1: σ = ln 2, σ_f = (1,0).
        let m = ModelA::default();
        let s = m
            .sigma_analytic(&DVector::zeros(1), &DVector::from_vec(vec![1.0, 0.0]), 0)
            .unwrap();
        assert_relative_eq!(s.sigma, 2.0_f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(s.grad_f[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(s.grad_f[1], 0.0);
        assert_relative_eq!(s.grad_x[0], 0.0);
    }

    #[test]
    fn charge_zero_decouples() {
        let m = ModelA {
            charge: 0.0,
            ..ModelA::default()
        };
        let f = DVector::from_vec(vec![0.7, -0.3]);
        assert_relative_eq!(m.d_orbit(&f), 1.0);
        let s = m.sigma_analytic(&DVector::zeros(1), &f, 0).unwrap();
        assert_relative_eq!(s.grad_f.norm(), 0.0);
        let c = m
            .reduced_coefficients_analytic(&DVector::zeros(1), &f, 0)
            .unwrap();
        assert_relative_eq!(c.b_f.norm(), 0.0);
        assert_relative_eq!(c.bt_f.norm(), 0.0);
        assert_relative_eq!(c.strat_correction.norm(), 0.0);
    }

    #[test]
    fn filtered_fiber_diffusion_squares_to_r_matrix() {
        let m = ModelA::default();
        let f = DVector::from_vec(vec![0.9, -1.4]);
        let c = m
            .reduced_coefficients_analytic(&DVector::zeros(1), &f, 0)
            .unwrap();
        let k = m.killing_v(&f);
        let want = DMatrix::identity(2, 2) + (&k * k.transpose()) / (m.r2 * m.r2);
        let got = &c.xt_fb * c.xt_fb.transpose();
        assert_relative_eq!(got, want, epsilon = 1e-13);
    }

    #[test]
    fn strat_correction_matches_finite_difference() {
        let m = ModelA {
            charge: 1.7,
            r2: 0.8,
            ..ModelA::default()
        };
        let f = DVector::from_vec(vec![0.6, 0.4]);
        let c = m
            .reduced_coefficients_analytic(&DVector::zeros(1), &f, 0)
            .unwrap();
        // FD of ½ Σ (∂_c X̃^a_b) X̃^c_b over the f̃ coordinates.
        let h = 1e-6;
        let xt = |f: &DVector<f64>| {
            m.reduced_coefficients_analytic(&DVector::zeros(1), f, 0)
                .unwrap()
                .xt_fb
        };
        let x0 = xt(&f);
        let mut corr = DVector::zeros(2);
        for cdim in 0..2 {
            let mut fp = f.clone();
            fp[cdim] += h;
            let xp = xt(&fp);
            fp[cdim] -= 2.0 * h;
            let xm = xt(&fp);
            let dx = (xp - xm) / (2.0 * h);
            for a in 0..2 {
                for b in 0..2 {
                    corr[a] += 0.5 * dx[(a, b)] * x0[(cdim, b)];
                }
            }
        }
        assert_relative_eq!(c.strat_correction[1], corr[0], epsilon = 1e-7);
        assert_relative_eq!(c.strat_correction[2], corr[1], epsilon = 1e-7);
    }
}
