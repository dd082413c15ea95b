//! Adapted-coordinate geometry of the bundle P × V → P ×_G V, evaluated
//! pointwise: Killing fields, orbit metrics γ, γ′ and d = γ + γ′, the
//! mechanical connection in its d- and γ-forms, the Faddeev–Popov matrix
//! and the projector family (Λ, N, P⊥, T), horizontal metrics and the
//! reduced-space metric with its determinant H.
//!
//! Everything in a [`GeometryBlocks`] depends only on (x, f̃) through the
//! section; the group coordinate enters the assembled metric and its
//! closed-form inverse via the chart matrices ū(a), v̄(a).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::group::{self, GroupElement};
use crate::linalg;
use crate::model::{AdaptedPoint, Model};

/// All pointwise tensors needed by the SDE, filtering and reduction layers.
#[derive(Debug, Clone)]
pub struct GeometryBlocks {
    /// K^A_α at Q*(x) (n_P × n_G).
    pub k_p: DMatrix<f64>,
    /// K^b_α = (J̄_α)^b_c f̃^c (n_V × n_G).
    pub k_v: DMatrix<f64>,
    /// γ_{μν} = K^A_μ G_AB K^B_ν.
    pub gamma: DMatrix<f64>,
    /// γ′_{μν} = K^r_μ G_rp K^p_ν.
    pub gamma_prime: DMatrix<f64>,
    /// d_{μν} = γ + γ′ and its determinant/inverse.
    pub d_orbit: DMatrix<f64>,
    pub d_det: f64,
    pub d_inv: DMatrix<f64>,
    pub gamma_inv: DMatrix<f64>,

    /// G_AB(Q*(x)) and G_ab with inverses.
    pub g_p: DMatrix<f64>,
    pub g_p_inv: DMatrix<f64>,
    pub g_v: DMatrix<f64>,
    pub g_v_inv: DMatrix<f64>,
    /// Q*^A_i (n_P × n_M).
    pub section_jac: DMatrix<f64>,

    /// Mechanical connection, d-version: 𝒜^α_i (n_G × n_M), 𝒜^α_p (n_G × n_V).
    pub a_d_x: DMatrix<f64>,
    pub a_d_f: DMatrix<f64>,
    /// γ-version 𝒜γ^μ_m = γ^{μν} K^A_ν G_AB Q*^B_m (n_G × n_M).
    pub a_gamma: DMatrix<f64>,

    /// χ^α_B at Q*(x) (n_G × n_P).
    pub chi_jac: DMatrix<f64>,
    /// Faddeev–Popov matrix Φ^α_β = K^A_β χ^α_A.
    pub fp: DMatrix<f64>,
    /// Λ^β_E = (Φ⁻¹)^β_μ χ^μ_E (n_G × n_P).
    pub lambda: DMatrix<f64>,
    /// G^{EC} Λ^μ_E Λ^ν_C (n_G × n_G).
    pub lambda_gram: DMatrix<f64>,
    /// N^D_C = δ^D_C − K^D_μ Λ^μ_C (n_P × n_P, row = upper index).
    pub n_p: DMatrix<f64>,
    /// N^a_A = −K^a_μ Λ^μ_A (n_V × n_P).
    pub n_v: DMatrix<f64>,
    /// (P⊥)^A_B (n_P × n_P, row = upper index).
    pub p_perp: DMatrix<f64>,
    /// T^i_D (n_M × n_P).
    pub t: DMatrix<f64>,

    /// Horizontal metrics G^H (γ-version) and G̃^H blocks (d-version).
    pub gh: DMatrix<f64>,
    pub gh_tilde: DMatrix<f64>,
    /// G̃^H_Aa = −G_AB K^B_μ d^{μν} K^b_ν G_ba (n_P × n_V).
    pub gh_tilde_mixed: DMatrix<f64>,
    /// G̃^H_ba = G_ba − G_bc K^c_μ d^{μν} K^p_ν G_pa (n_V × n_V).
    pub gh_tilde_v: DMatrix<f64>,
    /// h_ij = Q*^A_i G^H_AB Q*^B_j and inverse.
    pub h: DMatrix<f64>,
    pub h_inv: DMatrix<f64>,
    /// h̃_ij = Q*^A_i G̃^H_AB Q*^B_j.
    pub h_tilde: DMatrix<f64>,
    /// Reduced-space metric (the 2×2-block matrix whose determinant is H).
    pub reduced_metric: DMatrix<f64>,
    /// H = det(reduced_metric).
    pub cap_h: f64,

    /// Reduced inverse-metric blocks: ĝ^{ab} = G^{AB}N^a_A N^b_B + G^{ab},
    /// g^{ia} = h^{im} 𝒜γ^μ_m K^a_μ, and R^{ab} = γ^{αβ}K^a_α K^b_β + G^{ab}.
    pub ghat: DMatrix<f64>,
    pub mix: DMatrix<f64>,
    pub r_mat: DMatrix<f64>,
}

impl GeometryBlocks {
    /// Upper-left (n_M+n_V)² quadrant of the inverse metric: the inverse
    /// of the reduced-space metric.
    pub fn reduced_inverse(&self) -> DMatrix<f64> {
        let nm = self.h_inv.nrows();
        let nv = self.ghat.nrows();
        let mut out = DMatrix::zeros(nm + nv, nm + nv);
        out.view_mut((0, 0), (nm, nm)).copy_from(&self.h_inv);
        out.view_mut((0, nm), (nm, nv)).copy_from(&self.mix);
        out.view_mut((nm, 0), (nv, nm))
            .copy_from(&self.mix.transpose());
        out.view_mut((nm, nm), (nv, nv)).copy_from(&self.ghat);
        out
    }
}

/// Evaluate every block at the point (x, f̃) of the given chart.
pub fn evaluate(
    model: &dyn Model,
    x: &DVector<f64>,
    f: &DVector<f64>,
    chart: usize,
) -> Result<GeometryBlocks> {
    let dims = model.dims();
    if !model.in_base_chart(x, chart) {
        return Err(Error::ChartDomain(format!(
            "x = {:?} outside chart {chart}",
            x.as_slice()
        )));
    }

    let q_star = model.section(x, chart);
    let section_jac = model.section_jacobian(x, chart);
    let g_p = model.metric_p(&q_star, chart);
    let g_v = model.metric_v();
    let g_p_inv = linalg::spd_inverse(&g_p, "G_AB")?;
    let g_v_inv = linalg::spd_inverse(&g_v, "G_ab")?;

    let k_p = model.killing_p(&q_star, chart);
    let gens = model.rep_generators();
    let mut k_v = DMatrix::zeros(dims.fiber, dims.group);
    for (alpha, gen) in gens.iter().enumerate() {
        k_v.set_column(alpha, &(gen * f));
    }

    let gamma = k_p.transpose() * &g_p * &k_p;
    let gamma_prime = k_v.transpose() * &g_v * &k_v;
    let d_orbit = &gamma + &gamma_prime;
    if dims.group > 0 && linalg::min_eigenvalue(&d_orbit) <= 0.0 {
        return Err(Error::DegenerateOrbit {
            context: format!("x = {:?}, f = {:?}", x.as_slice(), f.as_slice()),
            detail: format!("min eig {:.3e}", linalg::min_eigenvalue(&d_orbit)),
        });
    }
    let d_det = linalg::det(&d_orbit);
    let d_inv = linalg::spd_inverse(&d_orbit, "d_orbit")?;
    let gamma_inv = linalg::spd_inverse(&gamma, "gamma")?;

    // Mechanical connection: 𝒜^α_i = d^{αβ} K^C_β G_DC Q*^D_i, fiber part
    // 𝒜^α_p = d^{αβ} K^r_β G_rp; the γ-version uses γ^{μν} instead.
    let kg_q = k_p.transpose() * &g_p * &section_jac; // (n_G × n_M)
    let a_d_x = &d_inv * &kg_q;
    let a_d_f = &d_inv * (k_v.transpose() * &g_v); // (n_G × n_V)
    let a_gamma = &gamma_inv * &kg_q;

    // Projector family.
    let chi_jac = model.chi_jacobian(&q_star, chart);
    let fp = &chi_jac * &k_p;
    let fp_inv = fp.clone().try_inverse().ok_or(Error::GribovChart {
        x: x.iter().copied().collect(),
    })?;
    let lambda = &fp_inv * &chi_jac;
    let lambda_gram = &lambda * &g_p_inv * lambda.transpose();
    let n_p = DMatrix::identity(dims.p, dims.p) - &k_p * &lambda;
    let n_v = -(&k_v * &lambda);
    // (P⊥)^A_B = δ^A_B − χ^α_B ((χχᵀ)⁻¹)^β_α (χᵀ)^A_β with
    // (χᵀ)^A_μ = G^{AB} γ_{μν} χ^ν_B.
    let chi_t = &g_p_inv * chi_jac.transpose() * &gamma; // (n_P × n_G)
    let chi_chi_t = &chi_jac * &chi_t; // (n_G × n_G)
    let chi_chi_t_inv = chi_chi_t.try_inverse().ok_or(Error::GribovChart {
        x: x.iter().copied().collect(),
    })?;
    let p_perp = DMatrix::identity(dims.p, dims.p) - &chi_t * &chi_chi_t_inv * &chi_jac;

    // Horizontal metrics and the reduced metric.
    let gh = &g_p - &g_p * &k_p * &gamma_inv * k_p.transpose() * &g_p;
    let gh_tilde = &g_p - &g_p * &k_p * &d_inv * k_p.transpose() * &g_p;
    let gh_tilde_mixed = -(&g_p * &k_p * &d_inv * k_v.transpose() * &g_v);
    let gh_tilde_v = &g_v - &g_v * &k_v * &d_inv * k_v.transpose() * &g_v;
    let h = section_jac.transpose() * &gh * &section_jac;
    let h_tilde = section_jac.transpose() * &gh_tilde * &section_jac;
    let h_inv = if dims.base > 0 {
        h.clone()
            .try_inverse()
            .ok_or_else(|| Error::DegenerateHorizontal(format!("x = {:?}", x.as_slice())))?
    } else {
        DMatrix::zeros(0, 0)
    };

    let nm = dims.base;
    let nv = dims.fiber;
    let mut reduced_metric = DMatrix::zeros(nm + nv, nm + nv);
    reduced_metric.view_mut((0, 0), (nm, nm)).copy_from(&h_tilde);
    let upper = section_jac.transpose() * &gh_tilde_mixed; // (n_M × n_V)
    reduced_metric.view_mut((0, nm), (nm, nv)).copy_from(&upper);
    reduced_metric
        .view_mut((nm, 0), (nv, nm))
        .copy_from(&upper.transpose());
    reduced_metric
        .view_mut((nm, nm), (nv, nv))
        .copy_from(&gh_tilde_v);
    let cap_h = linalg::det(&reduced_metric);
    if cap_h <= 0.0 {
        return Err(Error::DegenerateHorizontal(format!(
            "H = {cap_h:.3e} at x = {:?}",
            x.as_slice()
        )));
    }

    // T^i_D = (P⊥)^B_D G^H_BL Q*^L_m h^{mi}.
    let t = &h_inv * section_jac.transpose() * &gh * &p_perp;

    let ghat = &n_v * &g_p_inv * n_v.transpose() + &g_v_inv;
    let mix = &h_inv * a_gamma.transpose() * k_v.transpose();
    let r_mat = &k_v * &gamma_inv * k_v.transpose() + &g_v_inv;

    Ok(GeometryBlocks {
        k_p,
        k_v,
        gamma,
        gamma_prime,
        d_orbit,
        d_det,
        d_inv,
        gamma_inv,
        g_p,
        g_p_inv,
        g_v,
        g_v_inv,
        section_jac,
        a_d_x,
        a_d_f,
        a_gamma,
        chi_jac,
        fp,
        lambda,
        lambda_gram,
        n_p,
        n_v,
        p_perp,
        t,
        gh,
        gh_tilde,
        gh_tilde_mixed,
        gh_tilde_v,
        h,
        h_inv,
        h_tilde,
        reduced_metric,
        cap_h,
        ghat,
        mix,
        r_mat,
    })
}

/// Killing fields at a point: (K_P at Q*(x), K_V at f̃).
pub fn killing_fields(
    model: &dyn Model,
    point: &AdaptedPoint,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let b = evaluate(model, &point.x, &point.f, point.chart)?;
    Ok((b.k_p, b.k_v))
}

/// Orbit metrics (γ, γ′, d, det d).
pub fn orbit_metrics(
    model: &dyn Model,
    point: &AdaptedPoint,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, f64)> {
    let b = evaluate(model, &point.x, &point.f, point.chart)?;
    Ok((b.gamma, b.gamma_prime, b.d_orbit, b.d_det))
}

/// Mechanical connection components (𝒜_i, 𝒜_p, 𝒜γ).
pub fn mechanical_connection(
    model: &dyn Model,
    point: &AdaptedPoint,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let b = evaluate(model, &point.x, &point.f, point.chart)?;
    Ok((b.a_d_x, b.a_d_f, b.a_gamma))
}

/// Horizontal metrics (h, h⁻¹, h̃) and the reduced determinant H.
pub fn horizontal_metrics(
    model: &dyn Model,
    point: &AdaptedPoint,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, f64)> {
    let b = evaluate(model, &point.x, &point.f, point.chart)?;
    Ok((b.h, b.h_inv, b.h_tilde, b.cap_h))
}

/// Projector family (Λ, Φ, N_P, N_V, P⊥, T).
#[allow(clippy::type_complexity)]
pub fn projectors(
    model: &dyn Model,
    point: &AdaptedPoint,
) -> Result<(
    DMatrix<f64>,
    DMatrix<f64>,
    DMatrix<f64>,
    DMatrix<f64>,
    DMatrix<f64>,
    DMatrix<f64>,
)> {
    let b = evaluate(model, &point.x, &point.f, point.chart)?;
    Ok((b.lambda, b.fp, b.n_p, b.n_v, b.p_perp, b.t))
}

/// Group chart matrices (ū(a), v̄(a), D̄(a)).
pub fn group_matrices(
    model: &dyn Model,
    a: &GroupElement,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    Ok((group::ubar(a)?, group::vbar(a)?, model.rep_matrix(a)))
}

/// Full transformed metric G_ÃB̃ in the block layout of the adapted
/// coordinates (x, f̃, a), including the ū(a) factors.
pub fn assemble_metric(model: &dyn Model, point: &AdaptedPoint) -> Result<DMatrix<f64>> {
    let b = evaluate(model, &point.x, &point.f, point.chart)?;
    let ubar = group::ubar(&point.a)?;
    let dims = model.dims();
    let (nm, nv, ng) = (dims.base, dims.fiber, dims.group);
    let n = nm + nv + ng;
    let mut g = DMatrix::zeros(n, n);

    let xx = &b.h_tilde + b.a_d_x.transpose() * &b.d_orbit * &b.a_d_x;
    let xa = b.a_d_x.transpose() * &b.d_orbit * &ubar;
    let fa = b.a_d_f.transpose() * &b.d_orbit * &ubar;
    let aa = ubar.transpose() * &b.d_orbit * &ubar;

    g.view_mut((0, 0), (nm, nm)).copy_from(&xx);
    g.view_mut((nm, nm), (nv, nv)).copy_from(&b.g_v);
    g.view_mut((0, nm + nv), (nm, ng)).copy_from(&xa);
    g.view_mut((nm + nv, 0), (ng, nm)).copy_from(&xa.transpose());
    g.view_mut((nm, nm + nv), (nv, ng)).copy_from(&fa);
    g.view_mut((nm + nv, nm), (ng, nv)).copy_from(&fa.transpose());
    g.view_mut((nm + nv, nm + nv), (ng, ng)).copy_from(&aa);
    Ok(g)
}

/// Closed-form inverse metric G^ÃB̃ assembled from the block formulas
/// (not by numerical inversion).
pub fn inverse_metric(model: &dyn Model, point: &AdaptedPoint) -> Result<DMatrix<f64>> {
    let b = evaluate(model, &point.x, &point.f, point.chart)?;
    let vbar = group::vbar(&point.a)?;
    let dims = model.dims();
    let (nm, nv, ng) = (dims.base, dims.fiber, dims.group);
    let n = nm + nv + ng;
    let mut g = DMatrix::zeros(n, n);

    let xa = -(&b.h_inv * b.a_gamma.transpose() * vbar.transpose());
    let fa = -(&b.k_v * &b.lambda_gram * vbar.transpose());
    let aa = &vbar * &b.lambda_gram * vbar.transpose();

    g.view_mut((0, 0), (nm, nm)).copy_from(&b.h_inv);
    g.view_mut((0, nm), (nm, nv)).copy_from(&b.mix);
    g.view_mut((nm, 0), (nv, nm)).copy_from(&b.mix.transpose());
    g.view_mut((nm, nm), (nv, nv)).copy_from(&b.ghat);
    g.view_mut((0, nm + nv), (nm, ng)).copy_from(&xa);
    g.view_mut((nm + nv, 0), (ng, nm)).copy_from(&xa.transpose());
    g.view_mut((nm, nm + nv), (nv, ng)).copy_from(&fa);
    g.view_mut((nm + nv, nm), (ng, nv)).copy_from(&fa.transpose());
    g.view_mut((nm + nv, nm + nv), (ng, ng)).copy_from(&aa);
    Ok(g)
}

/// det G_ÃB̃ factorization pieces: (det d, (det ū)², H).
pub fn determinant_factors(model: &dyn Model, point: &AdaptedPoint) -> Result<(f64, f64, f64)> {
    let b = evaluate(model, &point.x, &point.f, point.chart)?;
    let du = group::det_ubar(&point.a)?;
    Ok((b.d_det, du * du, b.cap_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{fd_jacobian, max_abs_diff};
    use crate::model::{builtin, ModelId};
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn model_a_point(f: [f64; 2]) -> (Box<dyn Model>, AdaptedPoint) {
        let m = builtin(ModelId::A);
        let p = AdaptedPoint::new(
            m.as_ref(),
            dvector![0.3],
            DVector::from_row_slice(&f),
            GroupElement::U1(0.0),
            0,
        )
        .unwrap();
        (m, p)
    }

    #[test]
    fn model_a_killing_frozen_values() {
        let (m, p) = model_a_point([1.0, 0.0]);
        let (k_p, k_v) = killing_fields(m.as_ref(), &p).unwrap();
        assert_relative_eq!(k_v[(0, 0)], 0.0);
        assert_relative_eq!(k_v[(1, 0)], 1.0);
        assert_relative_eq!(k_p[(0, 0)], 0.0);
        assert_relative_eq!(k_p[(1, 0)], 1.0);
        let (_, p0) = model_a_point([0.0, 0.0]);
        let (_, k_v0) = killing_fields(m.as_ref(), &p0).unwrap();
        assert_eq!(k_v0.norm(), 0.0);
    }

    #[test]
    fn model_a_orbit_metric_frozen_values() {
        let (m, p) = model_a_point([1.0, 0.0]);
        let (gamma, gamma_prime, _, d) = orbit_metrics(m.as_ref(), &p).unwrap();
        assert_relative_eq!(gamma[(0, 0)], 1.0);
        assert_relative_eq!(gamma_prime[(0, 0)], 1.0);
        assert_relative_eq!(d, 2.0);
        let (_, p0) = model_a_point([0.0, 0.0]);
        let (.., d0) = orbit_metrics(m.as_ref(), &p0).unwrap();
        assert_relative_eq!(d0, 1.0);
    }

    #[test]
    fn model_a_connection_vanishes_on_base() {
        let (m, p) = model_a_point([0.7, -0.4]);
        let (a_i, a_p, a_gamma) = mechanical_connection(m.as_ref(), &p).unwrap();
        assert!(a_i.norm() < 1e-14);
        assert!(a_gamma.norm() < 1e-14);
        assert_eq!(a_p.nrows(), 1);
        let (_, p0) = model_a_point([0.0, 0.0]);
        let (_, a_p0, _) = mechanical_connection(m.as_ref(), &p0).unwrap();
        assert!(a_p0.norm() < 1e-14);
    }

    #[test]
    fn connection_consistency_a_times_d() {
        // 𝒜_i·d reconstructs K·G·Q* within 1e-12 on every model.
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        for id in [ModelId::A, ModelId::B, ModelId::C] {
            let m = builtin(id);
            let p = m.sample_adapted(&mut rng);
            let b = evaluate(m.as_ref(), &p.x, &p.f, p.chart).unwrap();
            let lhs = &b.d_orbit * &b.a_d_x;
            let rhs = b.k_p.transpose() * &b.g_p * &b.section_jac;
            assert!(max_abs_diff(&lhs, &rhs) < 1e-12, "{id}");
        }
    }

    #[test]
    fn model_a_h_frozen_values() {
        let (m, p) = model_a_point([1.0, 0.0]);
        let (h, _, h_tilde, cap_h) = horizontal_metrics(m.as_ref(), &p).unwrap();
        assert_relative_eq!(h[(0, 0)], 1.0);
        assert_relative_eq!(cap_h, 0.5, epsilon = 1e-14);
        // 𝒜 ≡ 0 on Model A, so h̃ = h.
        assert!(max_abs_diff(&h, &h_tilde) < 1e-14);
    }

    #[test]
    fn model_a_charge_zero_h_is_product() {
        let m = Box::new(crate::model::ModelA {
            charge: 0.0,
            ..Default::default()
        });
        let p = AdaptedPoint::new(
            m.as_ref(),
            dvector![1.1],
            dvector![0.9, -0.4],
            GroupElement::U1(0.0),
            0,
        )
        .unwrap();
        let (.., cap_h) = horizontal_metrics(m.as_ref(), &p).unwrap();
        assert_relative_eq!(cap_h, 1.0, epsilon = 1e-13);
        let (.., d) = orbit_metrics(m.as_ref(), &p).unwrap();
        assert_relative_eq!(d, 1.0);
    }

    #[test]
    fn model_a_projector_shapes_and_fp() {
        let (m, p) = model_a_point([0.5, 0.2]);
        let (lambda, fp, n_p, _, p_perp, t) = projectors(m.as_ref(), &p).unwrap();
        assert_relative_eq!(fp[(0, 0)], 1.0);
        assert_relative_eq!(lambda[(0, 1)], 1.0);
        // N has rank n_P − 1 = 1
        let svd = n_p.svd(false, false);
        let rank = svd.singular_values.iter().filter(|s| **s > 1e-10).count();
        assert_eq!(rank, 1);
        let b = evaluate(m.as_ref(), &p.x, &p.f, 0).unwrap();
        assert!(max_abs_diff(&(&t * &b.section_jac), &DMatrix::identity(1, 1)) < 1e-14);
        assert!(max_abs_diff(&(&b.section_jac * &t), &p_perp) < 1e-14);
    }

    fn points_for(model: &dyn Model, n: usize, seed: u64) -> Vec<AdaptedPoint> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n).map(|_| model.sample_adapted(&mut rng)).collect()
    }

    #[test]
    fn projector_algebra_identities_all_models() {
        for id in [ModelId::A, ModelId::B, ModelId::C] {
            let m = builtin(id);
            for p in points_for(m.as_ref(), 12, 3) {
                let b = evaluate(m.as_ref(), &p.x, &p.f, p.chart).unwrap();
                let np = &b.n_p;
                let pp = &b.p_perp;
                assert!(max_abs_diff(&(np * np), np) < 1e-12, "{id}: N² = N");
                assert!(max_abs_diff(&(pp * pp), pp) < 1e-12, "{id}: P⊥² = P⊥");
                assert!(max_abs_diff(&(np * pp), pp) < 1e-12, "{id}: N P⊥ = P⊥");
                assert!(max_abs_diff(&(pp * np), np) < 1e-12, "{id}: P⊥ N = N");
                assert!((np * &b.k_p).norm() < 1e-11, "{id}: N K = 0");
                if m.dims().base > 0 {
                    assert!(
                        max_abs_diff(
                            &(&b.t * &b.section_jac),
                            &DMatrix::identity(m.dims().base, m.dims().base)
                        ) < 1e-11,
                        "{id}: T Q* = I"
                    );
                    assert!(
                        max_abs_diff(&(&b.section_jac * &b.t), pp) < 1e-11,
                        "{id}: Q* T = P⊥"
                    );
                }
                // Λ-gram identity: G^{EC}Λ^α_EΛ^β_C = γ^{αβ} + h^{ij}𝒜γ^α_i𝒜γ^β_j
                let want = &b.gamma_inv + &b.a_gamma * &b.h_inv * b.a_gamma.transpose();
                assert!(
                    max_abs_diff(&b.lambda_gram, &want) < 1e-11,
                    "{id}: Λ-gram identity, dev {}",
                    max_abs_diff(&b.lambda_gram, &want)
                );
            }
        }
    }

    #[test]
    fn inverse_metric_times_metric_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for id in [ModelId::A, ModelId::B, ModelId::C] {
            let m = builtin(id);
            for _ in 0..8 {
                let p = m.sample_adapted(&mut rng);
                let g = assemble_metric(m.as_ref(), &p).unwrap();
                let gi = inverse_metric(m.as_ref(), &p).unwrap();
                let n = g.nrows();
                let dev = max_abs_diff(&(&g * &gi), &DMatrix::identity(n, n));
                assert!(dev < 1e-10, "{id}: G·G⁻¹ dev = {dev:.3e}");
            }
        }
    }

    #[test]
    fn model_a_block_diagonal_at_origin() {
        // a = e, f̃ = 0: assembled metric is diag(h̃, G_ab, d) and the
        // inverse is diag(h⁻¹, G^ab, γ-block).
        let (m, p) = model_a_point([0.0, 0.0]);
        let g = assemble_metric(m.as_ref(), &p).unwrap();
        let want = DMatrix::from_diagonal(&dvector![1.0, 1.0, 1.0, 1.0]);
        assert!(max_abs_diff(&g, &want) < 1e-14);
        let gi = inverse_metric(m.as_ref(), &p).unwrap();
        assert!(max_abs_diff(&gi, &want) < 1e-14);
    }

    #[test]
    fn determinant_factorization() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for id in [ModelId::A, ModelId::B, ModelId::C] {
            let m = builtin(id);
            for _ in 0..8 {
                let p = m.sample_adapted(&mut rng);
                let g = assemble_metric(m.as_ref(), &p).unwrap();
                let (d, du2, cap_h) = determinant_factors(m.as_ref(), &p).unwrap();
                let lhs = g.determinant();
                let rhs = d * du2 * cap_h;
                assert!(
                    ((lhs - rhs) / rhs).abs() < 1e-10,
                    "{id}: det factorization rel dev {:.3e}",
                    ((lhs - rhs) / rhs).abs()
                );
            }
        }
    }

    #[test]
    fn assembled_metric_is_pullback_of_original() {
        // Push the original block metric diag(G_AB, G_ab) through the
        // coordinate change (x, f̃, a) → (Q, f) by finite differences.
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for id in [ModelId::A, ModelId::B, ModelId::C] {
            let m = builtin(id);
            let p = m.sample_adapted(&mut rng);
            let dims = m.dims();
            let chart = p.chart;
            let kind = m.group();
            let embed = |z: &DVector<f64>| {
                let x = z.rows(0, dims.base).into_owned();
                let f = z.rows(dims.base, dims.fiber).into_owned();
                let a_coords = z.rows(dims.base + dims.fiber, dims.group).into_owned();
                let a = GroupElement::from_canonical(kind, &a_coords);
                let q = m.action(&m.section(&x, chart), &a, chart);
                let fv = m.rep_matrix(&a) * &f;
                let mut out = DVector::zeros(dims.p + dims.fiber);
                out.rows_mut(0, dims.p).copy_from(&q);
                out.rows_mut(dims.p, dims.fiber).copy_from(&fv);
                out
            };
            let mut z = DVector::zeros(dims.base + dims.fiber + dims.group);
            z.rows_mut(0, dims.base).copy_from(&p.x);
            z.rows_mut(dims.base, dims.fiber).copy_from(&p.f);
            z.rows_mut(dims.base + dims.fiber, dims.group)
                .copy_from(&p.a.canonical_coords());
            let jac = fd_jacobian(&embed, &z, 1e-6);
            let image = embed(&z);
            let q_img = image.rows(0, dims.p).into_owned();
            let mut g_orig = DMatrix::zeros(dims.p + dims.fiber, dims.p + dims.fiber);
            g_orig
                .view_mut((0, 0), (dims.p, dims.p))
                .copy_from(&m.metric_p(&q_img, chart));
            g_orig
                .view_mut((dims.p, dims.p), (dims.fiber, dims.fiber))
                .copy_from(&m.metric_v());
            let pullback = jac.transpose() * g_orig * jac;
            let assembled = assemble_metric(m.as_ref(), &p).unwrap();
            let dev = max_abs_diff(&pullback, &assembled);
            assert!(dev < 1e-6, "{id}: pullback dev {dev:.3e}");
        }
    }

    #[test]
    fn model_b_connection_matches_quaternionic_hopf_formula() {
        // Independent oracle: for the bi-invariant metric the γ-connection
        // one-form is 𝒜γ_i = ⟨Q*·k, ∂_i Q*⟩ / |Q*·k|², computed directly
        // from the quaternion embedding of the section.
        let m = crate::model::ModelB::default();
        for &(x0, x1) in &[(0.2, -0.4), (0.6, 0.3), (-0.5, -0.8)] {
            let x = dvector![x0, x1];
            let p = AdaptedPoint::new(&m, x.clone(), dvector![0.0, 0.0], GroupElement::U1(0.0), 0)
                .unwrap();
            let (_, _, a_gamma) = mechanical_connection(&m, &p).unwrap();
            let embed = |z: &DVector<f64>| {
                let y = m.section(z, 0);
                let r2 = y.norm_squared();
                let s = 1.0 + r2;
                DVector::from_vec(vec![
                    (1.0 - r2) / s,
                    2.0 * y[0] / s,
                    2.0 * y[1] / s,
                    2.0 * y[2] / s,
                ])
            };
            let jac = fd_jacobian(&embed, &x, 1e-6);
            let q = embed(&x);
            let qk = crate::group::Quat([q[0], q[1], q[2], q[3]])
                .mul(&crate::group::Quat([0.0, 0.0, 0.0, 1.0]));
            for i in 0..2 {
                let dot: f64 = (0..4).map(|mu| qk.0[mu] * jac[(mu, i)]).sum();
                assert!(
                    (a_gamma[(0, i)] - dot).abs() < 1e-8,
                    "Hopf connection dev {:.3e}",
                    (a_gamma[(0, i)] - dot).abs()
                );
            }
        }
    }

    #[test]
    fn model_b_fp_bounded_away_from_zero_on_chart() {
        let m = builtin(ModelId::B);
        for i in -4..=4 {
            for j in -4..=4 {
                let x = dvector![i as f64 * 0.25, j as f64 * 0.25];
                if x.norm() > 1.2 {
                    continue;
                }
                let p =
                    AdaptedPoint::new(m.as_ref(), x, dvector![0.3, 0.1], GroupElement::U1(0.0), 0)
                        .unwrap();
                let b = evaluate(m.as_ref(), &p.x, &p.f, 0).unwrap();
                assert!(b.fp.determinant().abs() > 0.1);
            }
        }
    }

    #[test]
    fn chart_domain_error_outside_range() {
        let m = builtin(ModelId::B);
        let r = evaluate(m.as_ref(), &dvector![5.0, 0.0], &dvector![0.0, 0.0], 0);
        assert!(matches!(r, Err(Error::ChartDomain(_))));
    }

    #[test]
    fn group_matrices_contract() {
        let m = builtin(ModelId::C);
        let a = GroupElement::Su2(crate::group::Quat::exp_canonical(&[0.7, -0.2, 0.4]));
        let (u, v, dbar) = group_matrices(m.as_ref(), &a).unwrap();
        assert!(max_abs_diff(&(&u * &v), &DMatrix::identity(3, 3)) < 1e-12);
        assert!(max_abs_diff(&(&dbar * dbar.transpose()), &DMatrix::identity(3, 3)) < 1e-12);
        // D̄(g) = D(g⁻¹) composes contravariantly: D̄(ab) = D̄(b)·D̄(a).
        let b = GroupElement::Su2(crate::group::Quat::exp_canonical(&[-0.3, 0.5, 0.1]));
        let dab = m.rep_matrix(&a.compose(&b));
        let dev = max_abs_diff(&dab, &(m.rep_matrix(&b) * m.rep_matrix(&a)));
        assert!(dev < 1e-10);
    }

    #[test]
    fn killing_v_matches_finite_difference_of_representation() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for id in [ModelId::A, ModelId::C] {
            let m = builtin(id);
            let p = m.sample_adapted(&mut rng);
            let b = evaluate(m.as_ref(), &p.x, &p.f, p.chart).unwrap();
            let h = 1e-6;
            let kind = m.group();
            for alpha in 0..m.dims().group {
                let mut e = DVector::zeros(m.dims().group);
                e[alpha] = h;
                let dp = m.rep_matrix(&GroupElement::from_canonical(kind, &e)) * &p.f;
                e[alpha] = -h;
                let dm = m.rep_matrix(&GroupElement::from_canonical(kind, &e)) * &p.f;
                let fd = (dp - dm) / (2.0 * h);
                for bidx in 0..m.dims().fiber {
                    assert!(
                        (b.k_v[(bidx, alpha)] - fd[bidx]).abs() < 1e-6,
                        "{id}: K_V finite-difference dev"
                    );
                }
            }
        }
    }
}
