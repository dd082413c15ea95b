//! Group elements, canonical charts and Haar quadrature for U(1) and SU(2).
//!
//! SU(2) elements are unit quaternions. Canonical coordinates are fixed by
//! the basis `T_α = e_α / 2` of su(2) (quaternion units halved), so that
//! the structure constants are `[T_α, T_β] = ε_{αβγ} T_γ` and the chart is
//! `a ↦ exp(a·T) = (cos(|a|/2), sin(|a|/2) â)` with `|a|` the rotation
//! angle. U(1) is charted by the angle θ ∈ (−π, π].
//!
//! `vbar(a)` is the derivative of the group multiplication law in the left
//! factor at the identity, `v̄^α_β(a) = ∂Φ^α(b,a)/∂b^β |_{b=e}`, and
//! `ubar(a)` is its inverse. For SU(2) these are the inverse left Jacobian
//! and the left Jacobian of the exponential chart.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Canonical-coordinate norm beyond which a group element should be
/// re-based onto a fresh chart (keeps v̄ well-conditioned).
pub const CHART_REBASE_THRESHOLD: f64 = 1.5;

/// Unit quaternion (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn mul(&self, o: &Quat) -> Quat {
        let [a0, a1, a2, a3] = self.0;
        let [b0, b1, b2, b3] = o.0;
        Quat([
            a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
            a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
            a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
            a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
        ])
    }

    pub fn conj(&self) -> Quat {
        Quat([self.0[0], -self.0[1], -self.0[2], -self.0[3]])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat([self.0[0] / n, self.0[1] / n, self.0[2] / n, self.0[3] / n])
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        (0..4).map(|i| self.0[i] * o.0[i]).sum()
    }

    /// exp(a·T) with T_α = e_α/2; |a| is the rotation angle.
    pub fn exp_canonical(a: &[f64; 3]) -> Quat {
        let th = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        let half = th / 2.0;
        // sin(θ/2)/θ with series fallback near zero.
        let s = if th < 1e-8 {
            0.5 - th * th / 48.0
        } else {
            half.sin() / th
        };
        Quat([half.cos(), s * a[0], s * a[1], s * a[2]])
    }

    /// Inverse of [`Quat::exp_canonical`], mapped to the |a| ≤ 2π sheet
    /// nearest the identity (w ≥ 0 is forced by sign flip; q and −q are the
    /// same rotation but distinct SU(2) elements, so the flip is only taken
    /// when the caller asks for the principal log).
    pub fn log_canonical(&self) -> [f64; 3] {
        let q = self.normalized();
        let vn = (q.0[1] * q.0[1] + q.0[2] * q.0[2] + q.0[3] * q.0[3]).sqrt();
        if vn < 1e-14 {
            return [2.0 * q.0[1], 2.0 * q.0[2], 2.0 * q.0[3]];
        }
        let half = vn.atan2(q.0[0]);
        let f = 2.0 * half / vn;
        [f * q.0[1], f * q.0[2], f * q.0[3]]
    }

    /// 2×2 special-unitary matrix of this quaternion:
    /// `1 ↦ I, i ↦ iσ₃, j ↦ iσ₂, k ↦ iσ₁`.
    pub fn su2_matrix(&self) -> DMatrix<Complex64> {
        let [w, x, y, z] = self.0;
        DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(w, x),
                Complex64::new(y, z),
                Complex64::new(-y, z),
                Complex64::new(w, -x),
            ],
        )
    }

    /// SO(3) rotation matrix of the conjugation v ↦ q v q̄ on imaginary
    /// quaternions (the adjoint representation in the e_α basis).
    pub fn rotation_matrix(&self) -> DMatrix<f64> {
        let w = self.0[0];
        let u = [self.0[1], self.0[2], self.0[3]];
        let mut r = DMatrix::identity(3, 3);
        let cross = cross_matrix(&u);
        let cross2 = &cross * &cross;
        r += cross * (2.0 * w) + cross2 * 2.0;
        r
    }
}

/// 3×3 matrix of the cross product `v ↦ a × v`.
pub fn cross_matrix(a: &[f64; 3]) -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0])
}

/// Left Jacobian of the SU(2) canonical chart:
/// `J_l(a) = I + (1−cosθ)/θ² [a×] + (θ−sinθ)/θ³ [a×]²`, θ = |a|.
pub fn su2_left_jacobian(a: &[f64; 3]) -> DMatrix<f64> {
    let th2 = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
    let th = th2.sqrt();
    let (c1, c2) = if th < 1e-6 {
        (0.5 - th2 / 24.0, 1.0 / 6.0 - th2 / 120.0)
    } else {
        ((1.0 - th.cos()) / th2, (th - th.sin()) / (th2 * th))
    };
    let cross = cross_matrix(a);
    let cross2 = &cross * &cross;
    DMatrix::identity(3, 3) + cross * c1 + cross2 * c2
}

/// Closed-form inverse of [`su2_left_jacobian`]:
/// `J_l⁻¹(a) = I − ½[a×] + (1/θ² − (1+cosθ)/(2θ sinθ)) [a×]²`.
pub fn su2_left_jacobian_inv(a: &[f64; 3]) -> DMatrix<f64> {
    let th2 = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
    let th = th2.sqrt();
    let c2 = if th < 1e-4 {
        1.0 / 12.0 + th2 / 720.0
    } else {
        1.0 / th2 - (1.0 + th.cos()) / (2.0 * th * th.sin())
    };
    let cross = cross_matrix(a);
    let cross2 = &cross * &cross;
    DMatrix::identity(3, 3) - cross * 0.5 + cross2 * c2
}

/// Which compact group a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    U1,
    Su2,
}

impl GroupKind {
    pub fn dim(&self) -> usize {
        match self {
            GroupKind::U1 => 1,
            GroupKind::Su2 => 3,
        }
    }
}

/// A group element: an angle for U(1), a unit quaternion for SU(2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroupElement {
    U1(f64),
    Su2(Quat),
}

/// Wrap an angle to (−π, π].
pub fn wrap_angle(t: f64) -> f64 {
    let mut t = t.rem_euclid(2.0 * std::f64::consts::PI);
    if t > std::f64::consts::PI {
        t -= 2.0 * std::f64::consts::PI;
    }
    t
}

impl GroupElement {
    pub fn identity(kind: GroupKind) -> GroupElement {
        match kind {
            GroupKind::U1 => GroupElement::U1(0.0),
            GroupKind::Su2 => GroupElement::Su2(Quat::IDENTITY),
        }
    }

    pub fn kind(&self) -> GroupKind {
        match self {
            GroupElement::U1(_) => GroupKind::U1,
            GroupElement::Su2(_) => GroupKind::Su2,
        }
    }

    pub fn compose(&self, o: &GroupElement) -> GroupElement {
        match (self, o) {
            (GroupElement::U1(a), GroupElement::U1(b)) => GroupElement::U1(wrap_angle(a + b)),
            (GroupElement::Su2(p), GroupElement::Su2(q)) => GroupElement::Su2(p.mul(q)),
            _ => panic!("composing elements of different groups"),
        }
    }

    pub fn inverse(&self) -> GroupElement {
        match self {
            GroupElement::U1(a) => GroupElement::U1(wrap_angle(-a)),
            GroupElement::Su2(q) => GroupElement::Su2(q.conj()),
        }
    }

    /// Canonical-chart coordinates relative to the identity.
    pub fn canonical_coords(&self) -> DVector<f64> {
        match self {
            GroupElement::U1(a) => DVector::from_vec(vec![*a]),
            GroupElement::Su2(q) => DVector::from_row_slice(&q.log_canonical()),
        }
    }

    pub fn from_canonical(kind: GroupKind, a: &DVector<f64>) -> GroupElement {
        match kind {
            GroupKind::U1 => GroupElement::U1(wrap_angle(a[0])),
            GroupKind::Su2 => GroupElement::Su2(Quat::exp_canonical(&[a[0], a[1], a[2]])),
        }
    }

    /// True when the element is within the canonical chart used for v̄/ū.
    pub fn on_chart(&self) -> bool {
        self.canonical_coords().norm() <= CHART_REBASE_THRESHOLD
    }

    /// Renormalize the representation (unit quaternion / wrapped angle).
    pub fn renormalized(&self) -> GroupElement {
        match self {
            GroupElement::U1(a) => GroupElement::U1(wrap_angle(*a)),
            GroupElement::Su2(q) => GroupElement::Su2(q.normalized()),
        }
    }
}

/// `v̄^α_β(a) = ∂Φ^α(b,a)/∂b^β |_{b=e}` in canonical coordinates.
pub fn vbar(a: &GroupElement) -> Result<DMatrix<f64>> {
    match a {
        GroupElement::U1(_) => Ok(DMatrix::identity(1, 1)),
        GroupElement::Su2(q) => {
            let coords = q.log_canonical();
            let th = (coords[0] * coords[0] + coords[1] * coords[1] + coords[2] * coords[2]).sqrt();
            if th > 2.0 * std::f64::consts::PI - 0.2 {
                return Err(Error::ChartDomain(format!(
                    "group element too far from chart center (|a| = {th:.3})"
                )));
            }
            Ok(su2_left_jacobian_inv(&coords))
        }
    }
}

/// Inverse of [`vbar`].
pub fn ubar(a: &GroupElement) -> Result<DMatrix<f64>> {
    match a {
        GroupElement::U1(_) => Ok(DMatrix::identity(1, 1)),
        GroupElement::Su2(q) => {
            vbar(a)?; // chart check
            Ok(su2_left_jacobian(&q.log_canonical()))
        }
    }
}

pub fn det_ubar(a: &GroupElement) -> Result<f64> {
    Ok(ubar(a)?.determinant())
}

/// Structure constants c^γ_{αβ} in the canonical basis.
pub fn structure_constants(kind: GroupKind) -> Vec<DMatrix<f64>> {
    // Returned as a vec over γ of matrices (α,β) ↦ c^γ_{αβ}.
    match kind {
        GroupKind::U1 => vec![DMatrix::zeros(1, 1)],
        GroupKind::Su2 => (0..3)
            .map(|g| {
                let mut m = DMatrix::zeros(3, 3);
                for a in 0..3 {
                    for b in 0..3 {
                        m[(a, b)] = levi_civita(a, b, g);
                    }
                }
                m
            })
            .collect(),
    }
}

fn levi_civita(a: usize, b: usize, c: usize) -> f64 {
    match (a, b, c) {
        (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
        (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
        _ => 0.0,
    }
}

/// Normalized Haar quadrature: nodes and weights with Σw = 1.
pub struct HaarQuadrature {
    pub nodes: Vec<GroupElement>,
    pub weights: Vec<f64>,
}

impl HaarQuadrature {
    /// U(1): N-point uniform rule, spectrally exact for |n| < N/2.
    pub fn u1(n: usize) -> Self {
        let nodes = (0..n)
            .map(|k| GroupElement::U1(wrap_angle(2.0 * std::f64::consts::PI * k as f64 / n as f64)))
            .collect();
        HaarQuadrature {
            nodes,
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// SU(2): product rule on S³ in the angles (ψ, ϑ, φ) of
    /// q = (cos ψ, sin ψ (sin ϑ cos φ, sin ϑ sin φ, cos ϑ)), with Haar
    /// measure sin²ψ sinϑ dψ dϑ dφ / (2π²). Gauss–Chebyshev (2nd kind) in
    /// ψ, Gauss–Legendre in cos ϑ, uniform trapezoid in φ. Exact for
    /// matrix-element products of polynomial degree ≤ min(2n_ψ−1, 2n_ϑ−1,
    /// n_φ−1) in the quaternion components.
    pub fn su2(n_psi: usize, n_theta: usize, n_phi: usize) -> Self {
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let (gl_nodes, gl_weights) = gauss_legendre(n_theta);
        let two_pi = 2.0 * std::f64::consts::PI;
        for i in 1..=n_psi {
            let psi = i as f64 * std::f64::consts::PI / (n_psi as f64 + 1.0);
            let w_psi = std::f64::consts::PI / (n_psi as f64 + 1.0) * psi.sin() * psi.sin();
            for (u, w_u) in gl_nodes.iter().zip(&gl_weights) {
                let sin_theta = (1.0 - u * u).sqrt();
                for k in 0..n_phi {
                    let phi = two_pi * k as f64 / n_phi as f64;
                    let w_phi = two_pi / n_phi as f64;
                    let q = Quat([
                        psi.cos(),
                        psi.sin() * sin_theta * phi.cos(),
                        psi.sin() * sin_theta * phi.sin(),
                        psi.sin() * u,
                    ]);
                    nodes.push(GroupElement::Su2(q));
                    weights.push(w_psi * w_u * w_phi / (2.0 * std::f64::consts::PI.powi(2)));
                }
            }
        }
        HaarQuadrature { nodes, weights }
    }

    pub fn for_group(kind: GroupKind) -> Self {
        match kind {
            GroupKind::U1 => Self::u1(256),
            GroupKind::Su2 => Self::su2(8, 8, 16),
        }
    }

    pub fn integrate<F: FnMut(&GroupElement) -> Complex64>(&self, mut f: F) -> Complex64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(g, w)| f(g) * Complex64::new(*w, 0.0))
            .sum()
    }
}

/// Gauss–Legendre nodes and weights on [−1, 1] by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Gauss–Hermite nodes and weights (physicists' convention:
/// ∫ e^{−x²} f(x) dx ≈ Σ w_i f(x_i)). For a standard normal expectation
/// use E[f(Z)] = (1/√π) Σ w_i f(√2 x_i).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[n - 1],
            3 => 1.91 * z - 0.91 * x[n - 2],
            _ => 2.0 * z - x[n - i + 1],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            // orthonormal Hermite recurrence
            let mut p1 = std::f64::consts::PI.powf(-0.25);
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[n - 1 - i] = z;
        x[i] = -z;
        w[n - 1 - i] = 2.0 / (pp * pp);
        w[i] = w[n - 1 - i];
    }
    (x, w)
}

/// Legendre polynomial P_n and its derivative at x.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
