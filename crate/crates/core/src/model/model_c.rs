//! Model C: P = SU(2) acted on by right translation of G = SU(2), so the
//! base is a single point; V = ℝ³ carries the adjoint representation.
//!
//! P is charted by canonical coordinates q around a frame quaternion,
//! Q(q) = frame·exp(q·T) with T_α = e_α/2, in which the bi-invariant round
//! metric is G_AB(q) = ¼ J_r(q)ᵀ J_r(q) and the Killing fields of right
//! translation are K(q) = J_r(q)⁻¹. The gauge functions are the chart
//! coordinates themselves, χ^α(q) = q^α, with section Q* = e.

use nalgebra::{DMatrix, DVector};

use super::{
    AdaptedPoint, BundleParams, Dims, Model, ModelId, ReducedClosed, SigmaClosed, TotalState,
};
use crate::error::Result;
use crate::group::{
    cross_matrix, su2_left_jacobian, su2_left_jacobian_inv, GroupElement, GroupKind, Quat,
    CHART_REBASE_THRESHOLD,
};

#[derive(Debug, Clone)]
pub struct ModelC {
    /// Potential V = v_fiber·|f̃|².
    pub v_fiber: f64,
    pub params: BundleParams,
}

impl Default for ModelC {
    fn default() -> Self {
        ModelC {
            v_fiber: 0.0,
            params: BundleParams::default(),
        }
    }
}

fn coords3(q: &DVector<f64>) -> [f64; 3] {
    [q[0], q[1], q[2]]
}

/// Right Jacobian of the canonical chart, J_r(q) = J_l(q)ᵀ.
fn right_jacobian(q: &[f64; 3]) -> DMatrix<f64> {
    su2_left_jacobian(q).transpose()
}

fn right_jacobian_inv(q: &[f64; 3]) -> DMatrix<f64> {
    su2_left_jacobian_inv(q).transpose()
}

impl Model for ModelC {
    fn id(&self) -> ModelId {
        ModelId::C
    }
    fn group(&self) -> GroupKind {
        GroupKind::Su2
    }
    fn dims(&self) -> Dims {
        Dims {
            group: 3,
            base: 0,
            fiber: 3,
            p: 3,
        }
    }
    fn params(&self) -> &BundleParams {
        &self.params
    }

    fn metric_p(&self, q: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        let jr = right_jacobian(&coords3(q));
        jr.transpose() * jr * 0.25
    }

    fn metric_v(&self) -> DMatrix<f64> {
        DMatrix::identity(3, 3)
    }

    fn rep_generators(&self) -> Vec<DMatrix<f64>> {
        // D̄(exp(aT)) = R(exp(aT))⁻¹, so J̄_α = −ad_α = −[e_α ×].
        (0..3)
            .map(|a| {
                let mut e = [0.0; 3];
                e[a] = 1.0;
                -cross_matrix(&e)
            })
            .collect()
    }

    fn rep_matrix(&self, g: &GroupElement) -> DMatrix<f64> {
        let GroupElement::Su2(q) = g else {
            panic!("Model C carries an SU(2) action")
        };
        q.rotation_matrix().transpose()
    }

    fn action(&self, q: &DVector<f64>, g: &GroupElement, _chart: usize) -> DVector<f64> {
        let GroupElement::Su2(gq) = g else {
            panic!("Model C carries an SU(2) action")
        };
        let here = Quat::exp_canonical(&coords3(q));
        DVector::from_row_slice(&here.mul(gq).log_canonical())
    }

    fn action_jacobian_q(
        &self,
        q: &DVector<f64>,
        g: &GroupElement,
        chart: usize,
    ) -> DMatrix<f64> {
        // ∂ Log(Exp(q) g)/∂q = J_r(F(q,g))⁻¹ · R(g⁻¹) · J_r(q).
        let GroupElement::Su2(gq) = g else {
            panic!("Model C carries an SU(2) action")
        };
        let target = self.action(q, g, chart);
        right_jacobian_inv(&coords3(&target))
            * gq.conj().rotation_matrix()
            * right_jacobian(&coords3(q))
    }

    fn killing_p(&self, q: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        right_jacobian_inv(&coords3(q))
    }

    fn section(&self, _x: &DVector<f64>, _chart: usize) -> DVector<f64> {
        DVector::zeros(3)
    }

    fn section_jacobian(&self, _x: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        DMatrix::zeros(3, 0)
    }

    fn chi(&self, q: &DVector<f64>, _chart: usize) -> DVector<f64> {
        q.clone()
    }

    fn chi_jacobian(&self, _q: &DVector<f64>, _chart: usize) -> DMatrix<f64> {
        DMatrix::identity(3, 3)
    }

    fn potential(&self, _x: &DVector<f64>, f: &DVector<f64>) -> f64 {
        self.v_fiber * f.norm_squared()
    }

    fn potential_total(&self, _q: &DVector<f64>, f: &DVector<f64>, _chart: usize) -> f64 {
        self.v_fiber * f.norm_squared()
    }

    fn project(&self, state: &TotalState) -> Result<AdaptedPoint> {
        // The whole of P is one orbit over the point base: a = frame·exp(q).
        let here = Quat::exp_canonical(&coords3(&state.q));
        let a = match state.frame {
            GroupElement::Su2(fr) => fr.mul(&here),
            _ => here,
        };
        // f = D̄(a) f̃ with D̄(a) = R(a)ᵀ, hence f̃ = R(a) f.
        let f_tilde = a.rotation_matrix() * &state.f;
        AdaptedPoint::new(self, DVector::zeros(0), f_tilde, GroupElement::Su2(a), 0)
    }

    fn in_base_chart(&self, _x: &DVector<f64>, chart: usize) -> bool {
        chart == 0
    }

    fn normalize_total(&self, state: &mut TotalState) {
        let norm = state.q.norm();
        if norm > CHART_REBASE_THRESHOLD {
            let here = Quat::exp_canonical(&coords3(&state.q));
            let fr = match state.frame {
                GroupElement::Su2(fr) => fr,
                _ => Quat::IDENTITY,
            };
            state.frame = GroupElement::Su2(fr.mul(&here).normalized());
            state.q.fill(0.0);
        }
    }

    fn normalize_reduced(&self, _x: &mut DVector<f64>, _f: &mut DVector<f64>, _chart: &mut usize) {}

    fn sigma_analytic(
        &self,
        _x: &DVector<f64>,
        f: &DVector<f64>,
        _chart: usize,
    ) -> Option<SigmaClosed> {
        // d has eigenvalue ¼ along f̃ and ¼ + r² on the orthogonal plane,
        // so σ = ln det d = ln ¼ + 2 ln(¼ + r²).
        let r2 = f.norm_squared();
        let s = 0.25 + r2;
        let grad_f = f * (4.0 / s);
        let hess_ff = DMatrix::identity(3, 3) * (4.0 / s) - (f * f.transpose()) * (8.0 / (s * s));
        Some(SigmaClosed {
            sigma: 0.25_f64.ln() + 2.0 * s.ln(),
            grad_x: DVector::zeros(0),
            grad_f,
            hess_xx: DMatrix::zeros(0, 0),
            hess_xf: DMatrix::zeros(0, 3),
            hess_ff,
        })
    }

    fn reduced_coefficients_analytic(
        &self,
        _x: &DVector<f64>,
        f: &DVector<f64>,
        _chart: usize,
    ) -> Option<ReducedClosed> {
        let xt = |f: &DVector<f64>| -> DMatrix<f64> {
            // X̃^a_b̄ = ĝ^{1/2} = I + (√(1+4r²) − 1)(I − f̂f̂ᵀ)
            let r2 = f.norm_squared();
            let psi = (1.0 + 4.0 * r2).sqrt() - 1.0;
            let mut m = DMatrix::identity(3, 3) * (1.0 + psi);
            if r2 > 1e-300 {
                m -= (f * f.transpose()) * (psi / r2);
            }
            m
        };
        let r2 = f.norm_squared();
        let s = 0.25 + r2;
        let b_f = f * (-8.0);
        let bt_f = f * (-8.0 - 2.0 / s);

        // Stratonovich correction by local differencing of the closed form.
        let h = 1e-6;
        let x0 = xt(f);
        let mut strat = DVector::zeros(3);
        for c in 0..3 {
            let mut fp = f.clone();
            fp[c] += h;
            let xp = xt(&fp);
            fp[c] -= 2.0 * h;
            let xm = xt(&fp);
            for a in 0..3 {
                for b in 0..3 {
                    strat[a] += 0.5 * (xp[(a, b)] - xm[(a, b)]) / (2.0 * h) * x0[(c, b)];
                }
            }
        }

        let mut d_inv = DMatrix::identity(3, 3) * (1.0 / s);
        if r2 > 1e-300 {
            d_inv += (f * f.transpose()) * ((4.0 - 1.0 / s) / r2);
        }
        // conn_f = 𝒜̃ X̃ = −[f̃×] √(1+4r²) / (¼ + r²)
        let conn_f = cross_matrix(&[f[0], f[1], f[2]]) * (-(1.0 + 4.0 * r2).sqrt() / s);

        Some(ReducedClosed {
            b_x: DVector::zeros(0),
            b_f,
            bt_x: DVector::zeros(0),
            bt_f,
            xt_xm: DMatrix::zeros(0, 0),
            xt_fm: DMatrix::zeros(3, 0),
            xt_fb: x0,
            strat_correction: strat,
            d_inv,
            gamma1: DVector::zeros(3),
            conn_x: DMatrix::zeros(3, 0),
            conn_f,
        })
    }
}
