//! Independent reference solutions used to validate the simulation path.
//!
//! Nothing in this module calls into the SDE layer, and the Model A
//! closed forms used by the grid solver and the pushforward oracle are
//! written out here directly rather than imported from the geometry
//! module: the point of these references is to be a second, separate
//! route to the same numbers. The one deliberate exception is
//! [`generator_apply`], which by construction assembles the reduced
//! differential generator from [`GeometryBlocks`] (with its own
//! finite-difference stencil for the divergence terms).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{self, GeometryBlocks};
#[cfg(test)]
use crate::group::gauss_legendre;
use crate::model::Model;

// ---------------------------------------------------------------------
// Heat kernels
// ---------------------------------------------------------------------

/// Heat-kernel density (w.r.t. the angle dθ) on a circle of the given
/// radius under the generator ½μ²κ Δ, after time t, at angle θ from the
/// start point. Uses the Fourier sum for diffuse times and the wrapped
/// Gaussian image sum for short times; truncation error is below 1e-12
/// in both regimes.
pub fn heat_kernel_circle(radius: f64, mu2k: f64, t: f64, theta: f64) -> f64 {
    assert!(t > 0.0, "heat kernel needs t > 0");
    let var = mu2k * t / (radius * radius);
    let two_pi = 2.0 * std::f64::consts::PI;
    if var >= 0.7 {
        // e^{−n² var/2} < 1e-17 for n² var > 74
        let n_max = (74.0_f64 / var).sqrt().ceil() as i64;
        let mut p = 1.0;
        for n in 1..=n_max {
            p += 2.0 * (-0.5 * var * (n * n) as f64).exp() * ((n as f64) * theta).cos();
        }
        p / two_pi
    } else {
        // wrapped Gaussian Σ_k N(θ + 2πk; 0, var)
        let k_max = 1 + ((74.0_f64 * var).sqrt() / two_pi).ceil() as i64;
        let mut p = 0.0;
        for k in -k_max..=k_max {
            let u = theta + two_pi * k as f64;
            p += (-u * u / (2.0 * var)).exp();
        }
        p / (two_pi * var).sqrt()
    }
}

/// Heat-kernel density on the unit S³ (w.r.t. the Riemannian volume,
/// total 2π²) under ½μ²κ Δ at geodesic distance ρ after time t.
pub fn heat_kernel_s3(mu2k: f64, t: f64, rho: f64) -> f64 {
    assert!(t > 0.0);
    let tau = 0.5 * mu2k * t;
    // The image sum is exact and numerically stable for short/moderate
    // times; the spectral sum wins once the kernel is diffuse.
    if tau <= 0.5 {
        s3_image(tau, rho)
    } else {
        s3_spectral(tau, rho)
    }
}

/// Spectral sum: p = (1/2π²) Σ_ℓ (ℓ+1) e^{−ℓ(ℓ+2)τ} sin((ℓ+1)ρ)/sin ρ,
/// with the ratio evaluated as the Chebyshev polynomial U_ℓ(cos ρ).
fn s3_spectral(tau: f64, rho: f64) -> f64 {
    let l_max = (80.0_f64 / tau).sqrt().ceil() as usize + 2;
    let c = rho.cos();
    let mut u_prev = 1.0; // U_0
    let mut u_curr = 2.0 * c; // U_1
    let mut sum = 1.0; // ℓ = 0 term
    for l in 1..=l_max {
        sum += (l as f64 + 1.0) * (-(l as f64) * (l as f64 + 2.0) * tau).exp() * u_curr;
        let next = 2.0 * c * u_curr - u_prev;
        u_prev = u_curr;
        u_curr = next;
    }
    sum / (2.0 * std::f64::consts::PI.powi(2))
}

/// Image sum (exact on odd spheres):
/// p = e^{τ}(4πτ)^{−3/2} Σ_k (ρ+2πk) e^{−(ρ+2πk)²/4τ} / sin ρ.
fn s3_image(tau: f64, rho: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let pref = tau.exp() / (4.0 * std::f64::consts::PI * tau).powf(1.5);
    // near ρ = 0 or π the 1/sin ρ needs the paired-image expansion; a tiny
    // offset keeps the evaluation in the regular region at no accuracy
    // cost for the τ used here.
    let rho = rho.clamp(1e-7, std::f64::consts::PI - 1e-7);
    let sin_rho = rho.sin();
    let mut sum = 0.0;
    for k in -5i64..=5 {
        let u = rho + two_pi * k as f64;
        let g = (-u * u / (4.0 * tau)).exp();
        if g == 0.0 {
            continue;
        }
        sum += u / sin_rho * g;
    }
    pref * sum
}

// ---------------------------------------------------------------------
// Exact reduced-law oracle for Model A
// ---------------------------------------------------------------------

/// Model A closed forms written out independently of the geometry module.
/// Coordinates are (x, f̃₁, f̃₂); the reduced generator is
/// ½μ²κ [ h ∂²_x + ĝ^{ab} ∂²_{ab} + b^a ∂_a ] with h = 1/R₁².
#[derive(Debug, Clone)]
pub struct ModelAReduced {
    pub r1: f64,
    pub r2: f64,
    pub charge: f64,
    pub mu2k: f64,
}

impl ModelAReduced {
    pub fn d(&self, f1: f64, f2: f64) -> f64 {
        self.r2 * self.r2 + self.charge * self.charge * (f1 * f1 + f2 * f2)
    }

    /// Full reduced inverse metric diag-block form, indices (x, f₁, f₂):
    /// ĝ^{ab} = δ^{ab} + K^a K^b / R₂² with K = q(−f₂, f₁).
    pub fn ghat(&self, f1: f64, f2: f64) -> [[f64; 3]; 3] {
        let q = self.charge;
        let k = [-q * f2, q * f1];
        let r2sq = self.r2 * self.r2;
        let mut a = [[0.0; 3]; 3];
        a[0][0] = 1.0 / (self.r1 * self.r1);
        for i in 0..2 {
            for j in 0..2 {
                a[i + 1][j + 1] = ((i == j) as u8 as f64) + k[i] * k[j] / r2sq;
            }
        }
        a
    }

    /// Fiber drift of the ξ process (with √d terms): b^a = −q²/R₂² f̃^a,
    /// or of the ξ̃ process: b̃^a = −q²(1/R₂² + 1/d) f̃^a.
    pub fn drift(&self, f1: f64, f2: f64, with_d: bool) -> [f64; 3] {
        let q2 = self.charge * self.charge;
        let base = if with_d {
            -q2 / (self.r2 * self.r2)
        } else {
            -q2 / (self.r2 * self.r2) - q2 / self.d(f1, f2)
        };
        [0.0, base * f1, base * f2]
    }

    /// Reduction-Jacobian integrand Δ_M̃ σ + ¼⟨∂σ, ∂σ⟩, σ = ln d, with the
    /// σ-derivatives taken by this oracle's own central stencil (step
    /// 1e-4) and contracted with the closed-form ĝ and b̃.
    pub fn jacobian_integrand(&self, f1: f64, f2: f64) -> f64 {
        let h = 1e-4;
        let s = |a: f64, b: f64| self.d(a, b).ln();
        let s0 = s(f1, f2);
        let s_1 = (s(f1 + h, f2) - s(f1 - h, f2)) / (2.0 * h);
        let s_2 = (s(f1, f2 + h) - s(f1, f2 - h)) / (2.0 * h);
        let s_11 = (s(f1 + h, f2) - 2.0 * s0 + s(f1 - h, f2)) / (h * h);
        let s_22 = (s(f1, f2 + h) - 2.0 * s0 + s(f1, f2 - h)) / (h * h);
        let s_12 = (s(f1 + h, f2 + h) - s(f1 + h, f2 - h) - s(f1 - h, f2 + h)
            + s(f1 - h, f2 - h))
            / (4.0 * h * h);
        let g = self.ghat(f1, f2);
        let bt = self.drift(f1, f2, false);
        let laplace = g[1][1] * s_11 + g[2][2] * s_22 + 2.0 * g[1][2] * s_12
            + bt[1] * s_1
            + bt[2] * s_2;
        let quad = g[1][1] * s_1 * s_1 + 2.0 * g[1][2] * s_1 * s_2 + g[2][2] * s_2 * s_2;
        laplace + 0.25 * quad
    }
}

/// Exact expectation E[g(x(t), f̃(t))] for the Model A reduced process
/// started at (x₀, f̃₀) on the section. The reduced law is the
/// pushforward of the decoupled product Brownian motion:
/// x(t) ~ N(x₀, μ²κ t/R₁²) (wrapped), f̃(t) = rot(−q α(t)) f(t) with
/// α(t) ~ N(0, μ²κ t/R₂²) and f(t) ~ N(f̃₀, μ²κ t I). Evaluated by
/// product Gauss–Hermite quadrature; requires integer charge (so the
/// α-wrapping drops out) and g 2π-periodic in x.
pub fn model_a_reduced_expectation(
    ma: &ModelAReduced,
    x0: f64,
    f0: &[f64; 2],
    t: f64,
    nodes: usize,
    g: &dyn Fn(f64, f64, f64) -> f64,
) -> f64 {
    assert!(
        (ma.charge - ma.charge.round()).abs() < 1e-12,
        "pushforward oracle needs integer charge"
    );
    let (gh_x, gh_w) = crate::group::gauss_hermite(nodes);
    let norm = std::f64::consts::PI.powf(-0.5);
    let scale = 2.0_f64.sqrt();
    let sx = (ma.mu2k * t).sqrt() / ma.r1;
    let sa = (ma.mu2k * t).sqrt() / ma.r2;
    let sf = (ma.mu2k * t).sqrt();
    let mut total = 0.0;
    for (xi, wx) in gh_x.iter().zip(&gh_w) {
        let x = x0 + sx * scale * xi;
        for (ai, wa) in gh_x.iter().zip(&gh_w) {
            let alpha = sa * scale * ai;
            let (c, s) = ((-ma.charge * alpha).cos(), (-ma.charge * alpha).sin());
            for (f1i, w1) in gh_x.iter().zip(&gh_w) {
                let f1 = f0[0] + sf * scale * f1i;
                for (f2i, w2) in gh_x.iter().zip(&gh_w) {
                    let f2 = f0[1] + sf * scale * f2i;
                    let g1 = c * f1 - s * f2;
                    let g2 = s * f1 + c * f2;
                    total += wx * wa * w1 * w2 * g(x, g1, g2);
                }
            }
        }
    }
    total * norm.powi(4)
}

// ---------------------------------------------------------------------
// Backward-Kolmogorov grid solver (Model A reduced space)
// ---------------------------------------------------------------------

/// Which reduced equation the grid solver integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdeMode {
    /// Generator of the ξ process: drift b (with the √d terms), no
    /// Jacobian potential.
    GeneratorXi,
    /// Hamiltonian route: drift b̃, Jacobian potential
    /// −⅛μ²κ(Δσ + ¼⟨∂σ,∂σ⟩), terminal data multiplied by d^{1/4} and the
    /// result divided by d^{1/4} at the start point.
    JacobianHamiltonian,
}

#[derive(Debug, Clone)]
pub struct PdeConfig {
    pub nx: usize,
    pub nf: usize,
    /// Fiber truncation: f̃ ∈ [−l, l]² with far-field Dirichlet.
    pub l: f64,
    pub t: f64,
    /// Explicit step; None picks half the stability bound.
    pub dt: Option<f64>,
    pub mode: PdeMode,
    /// Feynman–Kac weight 1/(μ²κm) applied to the potential.
    pub fk_weight: f64,
    /// Potential coefficients (V = v_fiber |f̃|² + v_base cos x).
    pub v_fiber: f64,
    pub v_base: f64,
}

impl Default for PdeConfig {
    fn default() -> Self {
        PdeConfig {
            nx: 64,
            nf: 48,
            l: 6.0,
            t: 0.25,
            dt: None,
            mode: PdeMode::GeneratorXi,
            fk_weight: 1.0,
            v_fiber: 0.0,
            v_base: 0.0,
        }
    }
}

/// Grid function u(x, f₁, f₂) at the final (earliest) time.
#[derive(Debug, Clone)]
pub struct GridSolution {
    pub nx: usize,
    pub nf: usize,
    pub l: f64,
    pub hx: f64,
    pub hf: f64,
    pub t: f64,
    pub steps: usize,
    pub values: Vec<f64>,
    /// Boundary treatment tag.
    pub boundary: &'static str,
}

impl GridSolution {
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.nf + j) * self.nf + k
    }

    /// Trilinear interpolation (x wrapped to [0, 2π)).
    pub fn interpolate(&self, x: f64, f1: f64, f2: f64) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        let xw = x.rem_euclid(two_pi);
        let gx = xw / self.hx;
        let i0 = gx.floor() as usize % self.nx;
        let fx = gx - gx.floor();
        let gj = (f1 + self.l) / self.hf;
        let gk = (f2 + self.l) / self.hf;
        assert!(
            gj >= 0.0 && gk >= 0.0 && gj <= (self.nf - 1) as f64 && gk <= (self.nf - 1) as f64,
            "interpolation point outside grid"
        );
        let j0 = (gj.floor() as usize).min(self.nf - 2);
        let k0 = (gk.floor() as usize).min(self.nf - 2);
        let fj = gj - j0 as f64;
        let fk = gk - k0 as f64;
        let mut out = 0.0;
        for (di, wi) in [(0usize, 1.0 - fx), (1, fx)] {
            let ii = (i0 + di) % self.nx;
            for (dj, wj) in [(0usize, 1.0 - fj), (1, fj)] {
                for (dk, wk) in [(0usize, 1.0 - fk), (1, fk)] {
                    out += wi * wj * wk * self.values[self.idx(ii, j0 + dj, k0 + dk)];
                }
            }
        }
        out
    }

    /// Versioned little-endian dump: magic, version, dims, spacings, data.
    pub fn write_binary<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"FMCGRID1")?;
        w.write_all(&1u32.to_le_bytes())?;
        for v in [self.nx as u64, self.nf as u64, self.steps as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [self.l, self.hx, self.hf, self.t] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Solve the backward Kolmogorov equation for the Model A reduced
/// generator on the (x, f̃) grid by explicit central differences
/// (second order in space, first order in the time step).
pub fn pde_backward_solve(
    ma: &ModelAReduced,
    cfg: &PdeConfig,
    terminal: &dyn Fn(f64, f64, f64) -> f64,
) -> Result<GridSolution> {
    let nx = cfg.nx;
    let nf = cfg.nf;
    let two_pi = 2.0 * std::f64::consts::PI;
    let hx = two_pi / nx as f64;
    let hf = 2.0 * cfg.l / (nf - 1) as f64;
    let xs: Vec<f64> = (0..nx).map(|i| i as f64 * hx).collect();
    let fs: Vec<f64> = (0..nf).map(|j| -cfg.l + j as f64 * hf).collect();

    // Coefficient fields over the fiber plane (x enters only through the
    // potential).
    let mut a11 = vec![0.0; nf * nf];
    let mut a22 = vec![0.0; nf * nf];
    let mut a12 = vec![0.0; nf * nf];
    let mut b1 = vec![0.0; nf * nf];
    let mut b2 = vec![0.0; nf * nf];
    let mut pot_f = vec![0.0; nf * nf];
    let with_d = cfg.mode == PdeMode::GeneratorXi;
    for (j, &f1) in fs.iter().enumerate() {
        for (k, &f2) in fs.iter().enumerate() {
            let g = ma.ghat(f1, f2);
            let b = ma.drift(f1, f2, with_d);
            let n = j * nf + k;
            a11[n] = g[1][1];
            a22[n] = g[2][2];
            a12[n] = g[1][2];
            b1[n] = b[1];
            b2[n] = b[2];
            pot_f[n] = cfg.fk_weight * cfg.v_fiber * (f1 * f1 + f2 * f2);
            if cfg.mode == PdeMode::JacobianHamiltonian {
                pot_f[n] -= 0.125 * ma.mu2k * ma.jacobian_integrand(f1, f2);
            }
        }
    }
    let axx = 1.0 / (ma.r1 * ma.r1);

    // Stability bound for the explicit step.
    let mut bound: f64 = 0.0;
    for n in 0..nf * nf {
        let local = 0.5
            * ma.mu2k
            * (2.0 * axx / (hx * hx)
                + 2.0 * (a11[n] + a22[n] + a12[n].abs()) / (hf * hf)
                + (b1[n].abs() + b2[n].abs()) / hf)
            + pot_f[n].abs()
            + cfg.fk_weight * cfg.v_base.abs();
        bound = bound.max(local);
    }
    let dt_stable = 0.8 / bound;
    let dt = match cfg.dt {
        Some(dt) => {
            if dt > dt_stable {
                return Err(Error::Config(format!(
                    "explicit step {dt:.3e} violates the stability bound {dt_stable:.3e}"
                )));
            }
            dt
        }
        None => dt_stable * 0.5,
    };
    let steps = (cfg.t / dt).ceil() as usize;
    let dt = cfg.t / steps as f64;

    let idx = |i: usize, j: usize, k: usize| (i * nf + j) * nf + k;
    let mut u: Vec<f64> = Vec::with_capacity(nx * nf * nf);
    for i in 0..nx {
        for j in 0..nf {
            for k in 0..nf {
                let mut v = terminal(xs[i], fs[j], fs[k]);
                if cfg.mode == PdeMode::JacobianHamiltonian {
                    v *= ma.d(fs[j], fs[k]).powf(0.25);
                }
                u.push(v);
            }
        }
    }
    let mut next = u.clone();

    use rayon::prelude::*;
    for _ in 0..steps {
        next.par_chunks_mut(nf * nf)
            .enumerate()
            .for_each(|(i, slab)| {
                let ip = (i + 1) % nx;
                let im = (i + nx - 1) % nx;
                for j in 1..nf - 1 {
                    for k in 1..nf - 1 {
                        let n = j * nf + k;
                        let c = u[idx(i, j, k)];
                        let uxx = (u[idx(ip, j, k)] - 2.0 * c + u[idx(im, j, k)]) / (hx * hx);
                        let u11 =
                            (u[idx(i, j + 1, k)] - 2.0 * c + u[idx(i, j - 1, k)]) / (hf * hf);
                        let u22 =
                            (u[idx(i, j, k + 1)] - 2.0 * c + u[idx(i, j, k - 1)]) / (hf * hf);
                        let u12 = (u[idx(i, j + 1, k + 1)] - u[idx(i, j + 1, k - 1)]
                            - u[idx(i, j - 1, k + 1)]
                            + u[idx(i, j - 1, k - 1)])
                            / (4.0 * hf * hf);
                        let du1 = (u[idx(i, j + 1, k)] - u[idx(i, j - 1, k)]) / (2.0 * hf);
                        let du2 = (u[idx(i, j, k + 1)] - u[idx(i, j, k - 1)]) / (2.0 * hf);
                        let lu = 0.5
                            * ma.mu2k
                            * (axx * uxx
                                + a11[n] * u11
                                + a22[n] * u22
                                + 2.0 * a12[n] * u12
                                + b1[n] * du1
                                + b2[n] * du2);
                        let pot = pot_f[n] + cfg.fk_weight * cfg.v_base * xs[i].cos();
                        slab[n] = c + dt * (lu + pot * c);
                    }
                }
                // Dirichlet: boundary nodes keep their terminal values.
                for j in [0, nf - 1] {
                    for k in 0..nf {
                        slab[j * nf + k] = u[idx(i, j, k)];
                    }
                }
                for j in 0..nf {
                    for k in [0, nf - 1] {
                        slab[j * nf + k] = u[idx(i, j, k)];
                    }
                }
            });
        std::mem::swap(&mut u, &mut next);
    }

    Ok(GridSolution {
        nx,
        nf,
        l: cfg.l,
        hx,
        hf,
        t: cfg.t,
        steps,
        values: u,
        boundary: "periodic-x/dirichlet-f",
    })
}

/// Reference value of the reduced zero-momentum semigroup at a start
/// point, through the grid solver in the requested mode. Both modes
/// converge to the same number; running them against each other checks
/// the Jacobian-potential form of the Hamiltonian.
pub fn reduced_zero_reference(
    ma: &ModelAReduced,
    cfg: &PdeConfig,
    terminal: &dyn Fn(f64, f64, f64) -> f64,
    x0: f64,
    f0: &[f64; 2],
) -> Result<f64> {
    let sol = pde_backward_solve(ma, cfg, terminal)?;
    let v = sol.interpolate(x0, f0[0], f0[1]);
    Ok(match cfg.mode {
        PdeMode::GeneratorXi => v,
        PdeMode::JacobianHamiltonian => v / ma.d(f0[0], f0[1]).powf(0.25),
    })
}

// ---------------------------------------------------------------------
// Direct generator application
// ---------------------------------------------------------------------

/// A scalar observable on the reduced space; derivatives are taken by
/// central differences with this oracle's own step.
pub struct ScalarField<'a> {
    pub f: &'a (dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Sync),
}

const GEN_FD_STEP: f64 = 2e-5;

/// Apply the reduced matrix generator to φ at a point, for a channel with
/// the given anti-Hermitian generator matrices (an empty slice gives the
/// scalar λ = 0 generator times a 1×1 identity).
///
/// Assembled directly from [`GeometryBlocks`]: second order carries the
/// reduced inverse metric, the scalar first-order part is the b-drift
/// (√(dH)-divergences with this module's own stencil), the J-linear
/// first-order part couples through −2(h𝒜γ)·∂x, −2(𝒜γ h 𝒜γ K)·∂f and
/// −2(R𝒜̃)·∂f, the J-linear zero-order part is the pair of divergence
/// terms, and the J² part carries γ^{αβ} + h^{ij}𝒜γ^α_i 𝒜γ^β_j.
pub fn generator_apply(
    model: &dyn Model,
    x: &DVector<f64>,
    f: &DVector<f64>,
    chart: usize,
    phi: &ScalarField,
    j_gens: &[DMatrix<Complex64>],
) -> Result<DMatrix<Complex64>> {
    let dims = model.dims();
    let mu2k = model.params().mu2k();
    let blocks = geometry::evaluate(model, x, f, chart)?;
    let dlam = if j_gens.is_empty() {
        1
    } else {
        j_gens[0].nrows()
    };

    // φ derivatives over the combined (x, f̃) coordinates.
    let h = GEN_FD_STEP;
    let n_all = dims.base + dims.fiber;
    let eval = |z: &DVector<f64>| {
        let xs = z.rows(0, dims.base).into_owned();
        let fs = z.rows(dims.base, dims.fiber).into_owned();
        (phi.f)(&xs, &fs)
    };
    let mut z0 = DVector::zeros(n_all);
    z0.rows_mut(0, dims.base).copy_from(x);
    z0.rows_mut(dims.base, dims.fiber).copy_from(f);
    let phi0 = eval(&z0);
    let mut grad = DVector::zeros(n_all);
    let mut hess = DMatrix::zeros(n_all, n_all);
    for i in 0..n_all {
        let mut zp = z0.clone();
        zp[i] += h;
        let fp = eval(&zp);
        zp[i] = z0[i] - h;
        let fm = eval(&zp);
        grad[i] = (fp - fm) / (2.0 * h);
        hess[(i, i)] = (fp - 2.0 * phi0 + fm) / (h * h);
        for j in (i + 1)..n_all {
            let mut zz = z0.clone();
            zz[i] += h;
            zz[j] += h;
            let pp = eval(&zz);
            zz[j] -= 2.0 * h;
            let pm = eval(&zz);
            zz[i] -= 2.0 * h;
            let mm = eval(&zz);
            zz[j] += 2.0 * h;
            let mp = eval(&zz);
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }

    // Scalar part: reduced inverse metric against the Hessian plus the
    // b-drift (with √d terms) against the gradient.
    let ginv = blocks.reduced_inverse();
    let (b_x, b_f) = reduced_drift_from_blocks(model, x, f, chart, true)?;
    let mut scalar = (&ginv * &hess).trace();
    for i in 0..dims.base {
        scalar += b_x[i] * grad[i];
    }
    for a in 0..dims.fiber {
        scalar += b_f[a] * grad[dims.base + a];
    }

    let mut out =
        DMatrix::<Complex64>::identity(dlam, dlam) * Complex64::new(0.5 * mu2k * scalar, 0.0);
    if j_gens.is_empty() {
        return Ok(out);
    }

    // J-linear first-order couplings.
    let hag = &blocks.h_inv * blocks.a_gamma.transpose(); // h^{ni}𝒜γ^β_n (n_M × n_G)
    let r_at = &blocks.r_mat * blocks.a_d_f.transpose(); // R^{ab}𝒜̃^β_a (n_V × n_G)
    let mut j_lin = vec![0.0; dims.group];
    for (nu, jl) in j_lin.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..dims.base {
            acc += -2.0 * hag[(i, nu)] * grad[i];
        }
        for a in 0..dims.fiber {
            // −2 h^{nk}𝒜γ^β_n 𝒜γ^μ_k K^a_μ ∂_a: mix = h⁻¹𝒜γᵀK_Vᵀ already
            // carries 𝒜γ^μ_k K^a_μ h^{ki}.
            let mut c = 0.0;
            for i in 0..dims.base {
                c += blocks.a_gamma[(nu, i)] * blocks.mix[(i, a)];
            }
            acc += -2.0 * c * grad[dims.base + a];
            acc += -2.0 * r_at[(a, nu)] * grad[dims.base + a];
        }
        *jl = acc;
    }

    // J-linear zero-order divergence terms.
    let div = filtering_divergence_from_blocks(model, x, f, chart)?;
    for nu in 0..dims.group {
        j_lin[nu] -= div[nu] * phi0;
    }
    for (nu, jl) in j_lin.iter().enumerate() {
        out += &j_gens[nu] * Complex64::new(0.5 * mu2k * jl, 0.0);
    }

    // J² part with γ^{αβ} + h^{ij}𝒜γ𝒜γ.
    let coef = &blocks.gamma_inv + &blocks.a_gamma * &blocks.h_inv * blocks.a_gamma.transpose();
    for al in 0..dims.group {
        for be in 0..dims.group {
            out +=
                &j_gens[al] * &j_gens[be] * Complex64::new(0.5 * mu2k * coef[(al, be)] * phi0, 0.0);
        }
    }
    Ok(out)
}

/// The b-drift (`with_d` = true) or b̃-drift (false) assembled from
/// geometry blocks by this module's own central stencil over the
/// √(dH)- or √H-weighted block products.
pub fn reduced_drift_from_blocks(
    model: &dyn Model,
    x: &DVector<f64>,
    f: &DVector<f64>,
    chart: usize,
    with_d: bool,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let dims = model.dims();
    let h = GEN_FD_STEP;
    let weight = |b: &GeometryBlocks| {
        if with_d {
            (b.d_det * b.cap_h).sqrt()
        } else {
            b.cap_h.sqrt()
        }
    };
    let center = geometry::evaluate(model, x, f, chart)?;
    let w0 = weight(&center);

    let at = |dx: i32, i: usize, df: i32, a: usize| -> Result<GeometryBlocks> {
        let mut xs = x.clone();
        let mut fs = f.clone();
        if dx != 0 {
            xs[i] += dx as f64 * h;
        }
        if df != 0 {
            fs[a] += df as f64 * h;
        }
        geometry::evaluate(model, &xs, &fs, chart)
    };

    let mut b_x = DVector::zeros(dims.base);
    let mut b_f = DVector::zeros(dims.fiber);

    // ∂_j(w h^{ij}) and ∂_j(w h^{mj}𝒜γ^μ_m) K^a_μ terms.
    for j in 0..dims.base {
        let bp = at(1, j, 0, 0)?;
        let bm = at(-1, j, 0, 0)?;
        let (wp, wm) = (weight(&bp), weight(&bm));
        for i in 0..dims.base {
            b_x[i] += (wp * bp.h_inv[(i, j)] - wm * bm.h_inv[(i, j)]) / (2.0 * h) / w0;
        }
        let hp = bp.h_inv.row(j) * bp.a_gamma.transpose(); // (1 × n_G)
        let hm = bm.h_inv.row(j) * bm.a_gamma.transpose();
        for a in 0..dims.fiber {
            let mut acc = 0.0;
            for mu in 0..dims.group {
                acc += center.k_v[(a, mu)] * (wp * hp[(0, mu)] - wm * hm[(0, mu)]) / (2.0 * h);
            }
            b_f[a] += acc / w0;
        }
    }
    // 𝒜γ^μ_n h^{ni} ∂_b(w K^b_μ) into b_x, and ∂_b(w ĝ^{ab}) into b_f.
    for bdim in 0..dims.fiber {
        let bp = at(0, 0, 1, bdim)?;
        let bm = at(0, 0, -1, bdim)?;
        let (wp, wm) = (weight(&bp), weight(&bm));
        for mu in 0..dims.group {
            let dkw = (wp * bp.k_v[(bdim, mu)] - wm * bm.k_v[(bdim, mu)]) / (2.0 * h) / w0;
            for i in 0..dims.base {
                let hag: f64 = (0..dims.base)
                    .map(|n| center.a_gamma[(mu, n)] * center.h_inv[(n, i)])
                    .sum();
                b_x[i] += hag * dkw;
            }
        }
        for a in 0..dims.fiber {
            b_f[a] += (wp * bp.ghat[(a, bdim)] - wm * bm.ghat[(a, bdim)]) / (2.0 * h) / w0;
        }
    }
    Ok((b_x, b_f))
}

/// The two J-linear divergence terms of the filtering generator,
/// (1/√(dH)) ∂_k(√(dH) h^{km}𝒜γ^ν_m) + G^{EC}Λ^ν_EΛ^μ_C (1/√(dH)) ∂_b(√(dH) K^b_μ).
pub fn filtering_divergence_from_blocks(
    model: &dyn Model,
    x: &DVector<f64>,
    f: &DVector<f64>,
    chart: usize,
) -> Result<DVector<f64>> {
    let dims = model.dims();
    let h = GEN_FD_STEP;
    let center = geometry::evaluate(model, x, f, chart)?;
    let w0 = (center.d_det * center.cap_h).sqrt();
    let mut div = DVector::zeros(dims.group);
    for k in 0..dims.base {
        let mut xs = x.clone();
        xs[k] += h;
        let bp = geometry::evaluate(model, &xs, f, chart)?;
        xs[k] -= 2.0 * h;
        let bm = geometry::evaluate(model, &xs, f, chart)?;
        let wp = (bp.d_det * bp.cap_h).sqrt();
        let wm = (bm.d_det * bm.cap_h).sqrt();
        let vp = bp.h_inv.row(k) * bp.a_gamma.transpose();
        let vm = bm.h_inv.row(k) * bm.a_gamma.transpose();
        for nu in 0..dims.group {
            div[nu] += (wp * vp[(0, nu)] - wm * vm[(0, nu)]) / (2.0 * h) / w0;
        }
    }
    for b in 0..dims.fiber {
        let mut fs = f.clone();
        fs[b] += h;
        let bp = geometry::evaluate(model, x, &fs, chart)?;
        fs[b] -= 2.0 * h;
        let bm = geometry::evaluate(model, x, &fs, chart)?;
        let wp = (bp.d_det * bp.cap_h).sqrt();
        let wm = (bm.d_det * bm.cap_h).sqrt();
        for mu in 0..dims.group {
            let dkw = (wp * bp.k_v[(b, mu)] - wm * bm.k_v[(b, mu)]) / (2.0 * h) / w0;
            for nu in 0..dims.group {
                div[nu] += center.lambda_gram[(nu, mu)] * dkw;
            }
        }
    }
    Ok(div)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn circle_kernel_frozen_value() {
        // R = 1, μ²κ = 1, t = 1, θ = 0 → ≈ 0.39894.
        let p = heat_kernel_circle(1.0, 1.0, 1.0, 0.0);
        assert!((p - 0.39894).abs() < 5e-6, "got {p}");
    }

    #[test]
    fn circle_kernel_normalized_and_regime_consistent() {
        for &(t, r) in &[(0.05, 1.0), (0.3, 1.0), (1.0, 0.7), (2.0, 1.3)] {
            let n = 4096;
            let h = 2.0 * std::f64::consts::PI / n as f64;
            let mass: f64 = (0..n)
                .map(|i| heat_kernel_circle(r, 1.0, t, -std::f64::consts::PI + i as f64 * h) * h)
                .sum();
            assert!((mass - 1.0).abs() < 1e-12, "t={t}: mass {mass}");
        }
        // both branches agree around the switch point
        let a = heat_kernel_circle(1.0, 1.0, 0.6999, 0.4);
        let b = heat_kernel_circle(1.0, 1.0, 0.7001, 0.4);
        assert!((a - b).abs() / a < 1e-3);
    }

    #[test]
    fn circle_kernel_short_time_gaussian() {
        let t: f64 = 1e-3;
        let th = 0.3 * t.sqrt();
        let p = heat_kernel_circle(1.0, 1.0, t, th);
        let gauss = (-th * th / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
        assert_relative_eq!(p, gauss, epsilon = 1e-10);
    }

    #[test]
    fn circle_kernel_eigenfunction_decay() {
        // ∫ cos θ p_t dθ = e^{−½μ²κ t/R²}.
        let (t, r) = (0.4, 1.2);
        let n = 4096;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let val: f64 = (0..n)
            .map(|i| {
                let th = i as f64 * h;
                th.cos() * heat_kernel_circle(r, 1.0, t, th) * h
            })
            .sum();
        assert_relative_eq!(val, (-0.5 * t / (r * r)).exp(), epsilon = 1e-10);
    }

    #[test]
    fn s3_kernel_normalized_by_quadrature() {
        for &t in &[0.05, 0.3, 1.0] {
            let (nodes, weights) = gauss_legendre(256);
            let mass: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(u, w)| {
                    let rho = std::f64::consts::PI * (u + 1.0) / 2.0;
                    let jac = std::f64::consts::PI / 2.0;
                    w * jac
                        * heat_kernel_s3(1.0, t, rho)
                        * 4.0
                        * std::f64::consts::PI
                        * rho.sin().powi(2)
                })
                .sum();
            assert!((mass - 1.0).abs() < 1e-8, "t = {t}: mass = {mass}");
        }
    }

    #[test]
    fn s3_kernel_spectral_and_image_agree() {
        // Near the regime switch both forms are well conditioned.
        for &rho in &[0.1, 0.5, 1.2, 2.8] {
            let tau = 0.5_f64;
            let a = s3_spectral(tau, rho);
            let b = s3_image(tau, rho);
            assert!(
                ((a - b) / a).abs() < 1e-11,
                "rho={rho}: spectral {a} vs image {b}"
            );
        }
    }

    #[test]
    fn s3_kernel_short_time_gaussian_limit() {
        let t = 1e-3;
        let rho = 0.2;
        let tau: f64 = 0.5 * t;
        let p = heat_kernel_s3(1.0, t, rho);
        let leading = tau.exp() / (4.0 * std::f64::consts::PI * tau).powf(1.5) * rho / rho.sin()
            * (-rho * rho / (4.0 * tau)).exp();
        assert!(((p - leading) / p).abs() < 1e-6);
    }

    #[test]
    fn s3_kernel_eigenfunction_decay() {
        // ∫ cos ρ p dV = e^{−3τ} (ℓ = 1 eigenvalue on unit S³ is 3).
        let t = 0.3;
        let tau: f64 = 0.15;
        let (nodes, weights) = gauss_legendre(256);
        let val: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(u, w)| {
                let rho = std::f64::consts::PI * (u + 1.0) / 2.0;
                let jac = std::f64::consts::PI / 2.0;
                w * jac
                    * rho.cos()
                    * heat_kernel_s3(1.0, t, rho)
                    * 4.0
                    * std::f64::consts::PI
                    * rho.sin().powi(2)
            })
            .sum();
        assert_relative_eq!(val, (-3.0 * tau).exp(), epsilon = 1e-8);
    }

    #[test]
    fn pushforward_probability_is_one() {
        let ma = ModelAReduced {
            r1: 1.0,
            r2: 1.0,
            charge: 1.0,
            mu2k: 1.0,
        };
        let one = model_a_reduced_expectation(&ma, 0.4, &[0.8, -0.2], 0.3, 24, &|_, _, _| 1.0);
        assert_relative_eq!(one, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn pushforward_x_marginal_matches_circle_kernel() {
        let ma = ModelAReduced {
            r1: 1.3,
            r2: 1.0,
            charge: 1.0,
            mu2k: 1.0,
        };
        let t = 0.4;
        let val = model_a_reduced_expectation(&ma, 0.7, &[0.5, 0.5], t, 24, &|x, _, _| x.cos());
        let want = (-0.5 * t / (ma.r1 * ma.r1)).exp() * 0.7_f64.cos();
        assert_relative_eq!(val, want, epsilon = 1e-10);
    }

    #[test]
    fn pushforward_fiber_second_moment_is_brownian() {
        // E|f̃|² = |f̃₀|² + 2μ²κ t: the gauge rotation preserves the norm.
        let ma = ModelAReduced {
            r1: 1.0,
            r2: 0.8,
            charge: 2.0,
            mu2k: 1.0,
        };
        let t = 0.25;
        let val = model_a_reduced_expectation(&ma, 0.0, &[1.0, -0.5], t, 24, &|_, f1, f2| {
            f1 * f1 + f2 * f2
        });
        assert_relative_eq!(val, 1.25 + 2.0 * t, epsilon = 1e-9);
    }

    #[test]
    fn jacobian_integrand_charge_zero_vanishes() {
        let ma = ModelAReduced {
            r1: 1.0,
            r2: 1.0,
            charge: 0.0,
            mu2k: 1.0,
        };
        assert!(ma.jacobian_integrand(0.7, -0.4).abs() < 1e-12);
    }

    #[test]
    fn jacobian_integrand_large_f_asymptotics() {
        // q = R₂ = 1, |f̃| = 10: Δσ + ¼⟨∂σ,∂σ⟩ = (4 − r²)/d², d = 1 + r².
        let ma = ModelAReduced {
            r1: 1.0,
            r2: 1.0,
            charge: 1.0,
            mu2k: 1.0,
        };
        let r2 = 100.0;
        let d = 1.0 + r2;
        let want = (4.0 - r2) / (d * d);
        let got = ma.jacobian_integrand(10.0, 0.0);
        assert!(((got - want) / want).abs() < 0.01, "got {got}, want {want}");
    }

    #[test]
    fn pde_constant_preserved_and_decay_matches() {
        let ma = ModelAReduced {
            r1: 1.0,
            r2: 1.0,
            charge: 0.0,
            mu2k: 1.0,
        };
        let cfg = PdeConfig {
            nx: 32,
            nf: 33,
            l: 5.0,
            t: 0.2,
            ..Default::default()
        };
        let sol = pde_backward_solve(&ma, &cfg, &|_, _, _| 1.0).unwrap();
        let v = sol.interpolate(0.3, 0.2, -0.4);
        assert!((v - 1.0).abs() < 1e-12, "constant preservation: {v}");

        // q = 0, φ = cos x: exact decay e^{−½ t/R₁²} cos x. Evaluate at a
        // grid node so interpolation error does not enter.
        let sol2 = pde_backward_solve(&ma, &cfg, &|x, _, _| x.cos()).unwrap();
        let x0 = std::f64::consts::PI / 4.0; // grid node for nx = 32
        let got = sol2.interpolate(x0, 0.0, 0.0);
        let want = (-0.5 * 0.2_f64).exp() * x0.cos();
        assert!((got - want).abs() < 1e-3, "got {got}, want {want}");
    }

    #[test]
    fn pde_modes_agree_with_pushforward_oracle() {
        let ma = ModelAReduced {
            r1: 1.0,
            r2: 1.0,
            charge: 1.0,
            mu2k: 1.0,
        };
        let phi = |x: f64, f1: f64, f2: f64| x.cos() * (-(f1 * f1 + f2 * f2)).exp();
        let t = 0.2;
        // grid-node start point: x = 2π·3/48, f on quarter-integer nodes
        let x0 = std::f64::consts::PI / 8.0;
        let f0 = [0.5, -0.25];
        let exact = model_a_reduced_expectation(&ma, x0, &f0, t, 28, &phi);
        for mode in [PdeMode::GeneratorXi, PdeMode::JacobianHamiltonian] {
            let cfg = PdeConfig {
                nx: 48,
                nf: 49,
                l: 6.0,
                t,
                mode,
                ..Default::default()
            };
            let got = reduced_zero_reference(&ma, &cfg, &phi, x0, &f0).unwrap();
            assert!(
                ((got - exact) / exact).abs() < 5e-3,
                "{mode:?}: got {got}, exact {exact}"
            );
        }
    }

    #[test]
    fn pde_rejects_unstable_step() {
        let ma = ModelAReduced {
            r1: 1.0,
            r2: 1.0,
            charge: 1.0,
            mu2k: 1.0,
        };
        let cfg = PdeConfig {
            nx: 16,
            nf: 17,
            l: 4.0,
            t: 0.1,
            dt: Some(1.0),
            ..Default::default()
        };
        assert!(matches!(
            pde_backward_solve(&ma, &cfg, &|_, _, _| 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grid_dump_header() {
        let ma = ModelAReduced {
            r1: 1.0,
            r2: 1.0,
            charge: 0.0,
            mu2k: 1.0,
        };
        let cfg = PdeConfig {
            nx: 8,
            nf: 9,
            l: 3.0,
            t: 0.05,
            ..Default::default()
        };
        let sol = pde_backward_solve(&ma, &cfg, &|_, _, _| 1.0).unwrap();
        let mut buf = Vec::new();
        sol.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[0..8], b"FMCGRID1");
        let n = u64::from_le_bytes(buf[12..20].try_into().unwrap());
        assert_eq!(n as usize, 8);
    }
}
