//! Rate-dependent Taylor-type crystal plasticity for BCC polycrystals.
//!
//! Every crystal experiences the same macroscopic deformation gradient; the
//! aggregate Cauchy stress is the volume-weighted average of the per-crystal
//! stresses. Per crystal the deformation gradient decomposes as
//! `F = F_e * F_p`, the second Piola-Kirchhoff stress is linear in the
//! elastic Green strain with cubic stiffness, slip rates follow a power law
//! in the resolved shear stress, and slip resistances harden along an
//! extended Voce curve with latent coupling.
//!
//! All per-crystal work happens in the lattice frame of the initial
//! orientation: the macroscopic gradient is conjugated into that frame once
//! per step, so slip geometry and stiffness stay canonical constants. The
//! evolving orientation is derived on demand from the rotation part of
//! `F_e` and never integrated separately.
//!
//! Stress units are MPa internally; elastic constants are entered in GPa.
//! Per-crystal integration is independent given the step kinematics, so a
//! data-parallel implementation would be legal; this one is sequential and
//! accumulates the average stress in crystal-index order, which keeps results
//! bitwise reproducible.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odf_histogram::{Texture, TextureEntry};
use crate::orientation_space::Quat;

/// Reference strain rate that converts an action magnitude into a step
/// duration: dt = |f| / REFERENCE_STRAIN_RATE. Chosen equal to the reference
/// slip rate so the power law operates near unit stress ratio.
pub const REFERENCE_STRAIN_RATE: f64 = 1.0e-3;

const GPA_TO_MPA: f64 = 1.0e3;

// ---------------------------------------------------------------------------
// Material parameters.

/// Elastic and viscoplastic material constants. Elastic constants in GPa,
/// resistances and hardening moduli in MPa.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MaterialParams {
    pub c11: f64,
    pub c12: f64,
    pub c44: f64,
    /// Reference shear rate (1/s).
    pub gamma_dot_0: f64,
    /// Rate sensitivity exponent m; the flow rule uses 1/m.
    pub rate_m: f64,
    pub tau_0: f64,
    pub tau_1: f64,
    pub theta_0: f64,
    pub theta_1: f64,
    /// Latent-hardening ratio for coplanar system pairs.
    pub q_hat_1: f64,
    /// Latent-hardening ratio for non-coplanar system pairs.
    pub q_hat_2: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            c11: 226.0,
            c12: 140.0,
            c44: 116.0,
            gamma_dot_0: 0.001,
            rate_m: 0.02,
            tau_0: 90.0,
            tau_1: 32.0,
            theta_0: 250.0,
            theta_1: 60.0,
            q_hat_1: 1.4,
            q_hat_2: 1.4,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("c11", self.c11),
            ("c12", self.c12),
            ("c44", self.c44),
            ("gamma_dot_0", self.gamma_dot_0),
            ("rate_m", self.rate_m),
            ("tau_0", self.tau_0),
            ("tau_1", self.tau_1),
            ("theta_0", self.theta_0),
            ("theta_1", self.theta_1),
            ("q_hat_1", self.q_hat_1),
            ("q_hat_2", self.q_hat_2),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid_argument(format!(
                    "material parameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Slip geometry.

/// One slip system: unit slip direction `m` and unit plane normal `n`,
/// expressed in the crystal lattice frame.
#[derive(Debug, Clone, Copy)]
pub struct SlipSystem {
    pub direction: Vector3<f64>,
    pub normal: Vector3<f64>,
}

struct SystemTables {
    systems: [SlipSystem; 24],
    /// Schmid tensors m (x) n.
    schmid: [Matrix3<f64>; 24],
    /// Indices of coplanar partners (parallel plane normals), per system.
    coplanar: Vec<Vec<usize>>,
}

fn system_tables() -> &'static SystemTables {
    static TABLES: OnceLock<SystemTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        // Canonical ordering: the twelve {110}<111> systems first, then the
        // twelve {112}<111>. Plane normals are listed in a fixed documented
        // order with the first nonzero Miller index positive; for each plane
        // the in-plane <111> directions follow in lexicographic order of
        // their integer triples (again first component positive).
        let normals_110: [[i32; 3]; 6] =
            [[0, 1, 1], [0, 1, -1], [1, 0, 1], [1, 0, -1], [1, 1, 0], [1, -1, 0]];
        let normals_112: [[i32; 3]; 12] = [
            [1, 1, 2],
            [1, 1, -2],
            [1, -1, 2],
            [1, -1, -2],
            [1, 2, 1],
            [1, 2, -1],
            [1, -2, 1],
            [1, -2, -1],
            [2, 1, 1],
            [2, 1, -1],
            [2, -1, 1],
            [2, -1, -1],
        ];
        let dirs_111: [[i32; 3]; 4] = [[1, -1, -1], [1, -1, 1], [1, 1, -1], [1, 1, 1]];
        let mut systems = Vec::with_capacity(24);
        for family in [&normals_110[..], &normals_112[..]] {
            for n in family {
                for d in &dirs_111 {
                    let dot: i32 = (0..3).map(|i| n[i] * d[i]).sum();
                    if dot == 0 {
                        let nv = Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
                        let dv = Vector3::new(d[0] as f64, d[1] as f64, d[2] as f64);
                        systems.push(SlipSystem {
                            direction: dv / dv.norm(),
                            normal: nv / nv.norm(),
                        });
                    }
                }
            }
        }
        let systems: [SlipSystem; 24] = systems.try_into().expect("24 BCC slip systems");
        let schmid =
            std::array::from_fn(|i| systems[i].direction * systems[i].normal.transpose());
        let coplanar = (0..24)
            .map(|i| {
                (0..24)
                    .filter(|&j| {
                        j != i && systems[i].normal.dot(&systems[j].normal).abs() > 1.0 - 1e-9
                    })
                    .collect()
            })
            .collect();
        SystemTables { systems, schmid, coplanar }
    })
}

/// The 24 BCC slip systems ({110}<111> and {112}<111>), canonically ordered.
pub fn slip_systems_bcc() -> &'static [SlipSystem; 24] {
    &system_tables().systems
}

/// Latent-hardening matrix: 1 on the diagonal, q_hat_1 for coplanar pairs,
/// q_hat_2 otherwise.
pub fn latent_matrix(params: &MaterialParams) -> Vec<[f64; 24]> {
    let tables = system_tables();
    (0..24)
        .map(|i| {
            std::array::from_fn(|j| {
                if i == j {
                    1.0
                } else if tables.coplanar[i].contains(&j) {
                    params.q_hat_1
                } else {
                    params.q_hat_2
                }
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Constitutive pieces.

fn pk_stress_unchecked(f_e: &Matrix3<f64>, params: &MaterialParams) -> Matrix3<f64> {
    let e = (f_e.transpose() * f_e - Matrix3::identity()) * 0.5;
    let (c11, c12, c44) =
        (params.c11 * GPA_TO_MPA, params.c12 * GPA_TO_MPA, params.c44 * GPA_TO_MPA);
    let tr = e.trace();
    let mut t = Matrix3::zeros();
    for i in 0..3 {
        t[(i, i)] = c12 * (tr - e[(i, i)]) + c11 * e[(i, i)];
        for j in 0..3 {
            if i != j {
                t[(i, j)] = 2.0 * c44 * e[(i, j)];
            }
        }
    }
    t
}

/// Second Piola-Kirchhoff stress (MPa) from the elastic deformation gradient,
/// `T* = 1/2 C : (F_e^T F_e - I)` with cubic stiffness in the lattice frame.
pub fn second_pk_stress(f_e: &Matrix3<f64>, params: &MaterialParams) -> Result<Matrix3<f64>> {
    if !(f_e.determinant() > 1e-12) {
        return Err(Error::invalid_argument("second_pk_stress requires det F_e > 0"));
    }
    Ok(pk_stress_unchecked(f_e, params))
}

/// Cauchy stress from the second Piola-Kirchhoff stress:
/// `T = det(F_e)^-1 F_e T* F_e^T`.
pub fn cauchy_from_pk(t_star: &Matrix3<f64>, f_e: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let det = f_e.determinant();
    if !(det > 1e-12) {
        return Err(Error::invalid_argument("cauchy_from_pk requires det F_e > 0"));
    }
    Ok(f_e * t_star * f_e.transpose() / det)
}

/// Resolved shear stress on one system: `tau = ((F_e^T F_e) T*) : (m (x) n)`.
pub fn resolved_shear(f_e: &Matrix3<f64>, t_star: &Matrix3<f64>, system: &SlipSystem) -> f64 {
    let a = (f_e.transpose() * f_e) * t_star;
    system.direction.dot(&(a * system.normal))
}

fn power_sign(ratio: f64, inv_m: f64, inv_m_int: Option<i32>) -> f64 {
    let a = ratio.abs();
    let mag = match inv_m_int {
        Some(p) => a.powi(p),
        None => a.powf(inv_m),
    };
    mag * ratio.signum()
}

fn inv_m_exponent(params: &MaterialParams) -> (f64, Option<i32>) {
    let inv_m = 1.0 / params.rate_m;
    let rounded = inv_m.round();
    if (inv_m - rounded).abs() < 1e-9 && rounded.abs() < 1e6 {
        (inv_m, Some(rounded as i32))
    } else {
        (inv_m, None)
    }
}

/// Power-law slip rates `gamma_dot = gamma_dot_0 |tau/r|^(1/m) sign(tau)`.
pub fn shear_rates(tau: &[f64; 24], r: &[f64; 24], params: &MaterialParams) -> [f64; 24] {
    let (inv_m, inv_m_int) = inv_m_exponent(params);
    std::array::from_fn(|i| params.gamma_dot_0 * power_sign(tau[i] / r[i], inv_m, inv_m_int))
}

/// Extended Voce reference resistance `tau_hat(Gamma)`.
pub fn voce_stress(big_gamma: f64, params: &MaterialParams) -> f64 {
    params.tau_0
        + (params.tau_1 + params.theta_1 * big_gamma)
            * (1.0 - (-big_gamma * params.theta_0 / params.tau_1).exp())
}

/// Analytic derivative d tau_hat / d Gamma of the extended Voce curve.
pub fn voce_slope(big_gamma: f64, params: &MaterialParams) -> f64 {
    let e = (-big_gamma * params.theta_0 / params.tau_1).exp();
    params.theta_1 * (1.0 - e)
        + (params.tau_1 + params.theta_1 * big_gamma) * (params.theta_0 / params.tau_1) * e
}

/// Hardening rates `r_dot_eta = (d tau_hat/d Gamma) sum_zeta q_hat[eta][zeta]
/// |gamma_dot_zeta|`. The slip resistances themselves do not enter; the Voce
/// curve is driven by the accumulated shear.
pub fn hardening_rates(
    gamma_dot: &[f64; 24],
    big_gamma: f64,
    _r: &[f64; 24],
    params: &MaterialParams,
) -> [f64; 24] {
    let slope = voce_slope(big_gamma, params);
    let latent = latent_matrix(params);
    std::array::from_fn(|i| {
        slope * (0..24).map(|j| latent[i][j] * gamma_dot[j].abs()).sum::<f64>()
    })
}

/// Same contraction as `hardening_rates`, exploiting the two-level latent
/// structure: O(24) instead of the full 24x24 product.
fn hardening_rates_fast(
    gamma_dot_abs: &[f64; 24],
    slope: f64,
    params: &MaterialParams,
    tables: &SystemTables,
) -> [f64; 24] {
    let total: f64 = gamma_dot_abs.iter().sum();
    std::array::from_fn(|i| {
        let cop: f64 = tables.coplanar[i].iter().map(|&j| gamma_dot_abs[j]).sum();
        let own = gamma_dot_abs[i];
        slope
            * (params.q_hat_2 * (total - own - cop) + own + params.q_hat_1 * cop)
    })
}

// ---------------------------------------------------------------------------
// Crystal state and integration.

/// Integration and balancing controls.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SolverOptions {
    /// Largest admissible shear increment per substep.
    pub max_dgamma: f64,
    /// Lower bound on substep resolution: h <= dt / min_substeps.
    pub min_substeps: usize,
    /// Hard cap on substep attempts per crystal per step.
    pub max_substeps: usize,
    pub newton_max_iters: usize,
    /// Relative finite-difference perturbation for the lateral Jacobian.
    pub fd_rel: f64,
    /// Absolute lateral-stress tolerance (MPa).
    pub stress_tol_abs: f64,
    /// Relative lateral-stress tolerance against |T'_11|.
    pub stress_tol_rel: f64,
    /// Equivalent-strain cap; a step that would cross it is rejected.
    pub strain_cap: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_dgamma: 2.0e-3,
            min_substeps: 20,
            max_substeps: 1 << 14,
            newton_max_iters: 25,
            fd_rel: 1.0e-7,
            stress_tol_abs: 0.5,
            stress_tol_rel: 1.0e-3,
            strain_cap: 0.70,
        }
    }
}

/// Per-crystal state. `f_c` is the current macroscopic deformation gradient
/// conjugated into the lattice frame of the initial orientation; `f_p` lives
/// entirely in that frame.
#[derive(Debug, Clone)]
pub struct CrystalState {
    pub initial_orientation: Quat,
    pub f_c: Matrix3<f64>,
    pub f_p: Matrix3<f64>,
    pub r: [f64; 24],
    pub big_gamma: f64,
}

impl CrystalState {
    pub fn new(orientation: Quat, params: &MaterialParams) -> Self {
        CrystalState {
            initial_orientation: orientation,
            f_c: Matrix3::identity(),
            f_p: Matrix3::identity(),
            r: [params.tau_0; 24],
            big_gamma: 0.0,
        }
    }

    pub fn elastic_gradient(&self) -> Result<Matrix3<f64>> {
        let f_p_inv = self
            .f_p
            .try_inverse()
            .ok_or_else(|| Error::InternalConsistency("singular F_p".into()))?;
        Ok(self.f_c * f_p_inv)
    }

    /// Current orientation: initial orientation composed with the rigid
    /// rotation R_e from the polar decomposition F_e = R_e U_e.
    pub fn current_orientation(&self) -> Result<Quat> {
        let f_e = self.elastic_gradient()?;
        let c = f_e.transpose() * f_e;
        let eig = nalgebra::SymmetricEigen::new(c);
        let mut u_inv = Matrix3::zeros();
        for k in 0..3 {
            let lam = eig.eigenvalues[k];
            if !(lam > 1e-12) {
                return Err(Error::InternalConsistency("non-positive elastic stretch".into()));
            }
            let v = eig.eigenvectors.column(k);
            u_inv += v * v.transpose() / lam.sqrt();
        }
        let r_e = f_e * u_inv;
        Ok(self.initial_orientation.compose(&Quat::from_matrix(&r_e)))
    }
}

fn exp3(a: &Matrix3<f64>) -> Matrix3<f64> {
    // Truncated series; arguments here have norm on the order of the shear
    // increment cap, so the 5-term error is far below integration accuracy.
    let a2 = a * a;
    let a3 = a2 * a;
    let a4 = a3 * a;
    Matrix3::identity() + a + a2 * 0.5 + a3 * (1.0 / 6.0) + a4 * (1.0 / 24.0)
}

/// Cubic lattice-frame stress response C : eps in MPa.
fn cubic_stress_of_strain(eps: &Matrix3<f64>, params: &MaterialParams) -> Matrix3<f64> {
    let (c11, c12, c44) =
        (params.c11 * GPA_TO_MPA, params.c12 * GPA_TO_MPA, params.c44 * GPA_TO_MPA);
    let tr = eps.trace();
    let mut s = Matrix3::zeros();
    for i in 0..3 {
        s[(i, i)] = c12 * (tr - eps[(i, i)]) + c11 * eps[(i, i)];
        for j in 0..3 {
            if i != j {
                s[(i, j)] = 2.0 * c44 * eps[(i, j)];
            }
        }
    }
    s
}

fn contract(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += a[(i, j)] * b[(i, j)];
        }
    }
    s
}

/// Everything constant across the substeps of one crystal integration.
struct StepCtx<'a> {
    params: &'a MaterialParams,
    options: &'a SolverOptions,
    tables: &'static SystemTables,
    inv_m: f64,
    inv_m_int: Option<i32>,
}

impl<'a> StepCtx<'a> {
    fn new(params: &'a MaterialParams, options: &'a SolverOptions) -> Self {
        let (inv_m, inv_m_int) = inv_m_exponent(params);
        StepCtx { params, options, tables: system_tables(), inv_m, inv_m_int }
    }
}

struct TauEval {
    tau: [f64; 24],
    f_p_new: Matrix3<f64>,
    f_e: Matrix3<f64>,
    t_star: Matrix3<f64>,
}

/// Resolved shear stresses after applying shear increments `dg` on top of
/// `f_p_start`, with the crystal carried to `f_c_end`.
fn eval_tau_after(
    f_c_end: &Matrix3<f64>,
    f_p_start: &Matrix3<f64>,
    dg: &[f64; 24],
    ctx: &StepCtx<'_>,
) -> Result<TauEval> {
    let mut l = Matrix3::zeros();
    for i in 0..24 {
        l += ctx.tables.schmid[i] * dg[i];
    }
    let mut f_p_new = exp3(&l) * f_p_start;
    let det = f_p_new.determinant();
    if !(det > 1e-12 && det.is_finite()) {
        return Err(Error::IntegrationFailure("plastic flow lost positivity".into()));
    }
    f_p_new /= det.cbrt();
    let f_p_inv = f_p_new
        .try_inverse()
        .ok_or_else(|| Error::IntegrationFailure("singular F_p during integration".into()))?;
    let f_e = f_c_end * f_p_inv;
    let t_star = pk_stress_unchecked(&f_e, ctx.params);
    let a = (f_e.transpose() * f_e) * t_star;
    let tau = std::array::from_fn(|i| contract(&a, &ctx.tables.schmid[i]));
    Ok(TauEval { tau, f_p_new, f_e, t_star })
}

/// Analytic sensitivity of the resolved stresses to the shear increments at
/// the given elastic configuration: `m[eta][zeta] = -d tau_eta / d dgamma_zeta`
/// (positive on the diagonal; shearing a system relaxes its own stress).
/// Derived from `dF_e/d dgamma_zeta = -F_e S_zeta`.
fn interaction_at(ev: &TauEval, ctx: &StepCtx<'_>) -> Box<[[f64; 24]; 24]> {
    let c_e = ev.f_e.transpose() * ev.f_e;
    let mut m = Box::new([[0.0f64; 24]; 24]);
    for z in 0..24 {
        let s = &ctx.tables.schmid[z];
        let d_c = -(s.transpose() * c_e + c_e * s);
        let d_t = cubic_stress_of_strain(&(d_c * 0.5), ctx.params);
        let d_a = d_c * ev.t_star + c_e * d_t;
        for e in 0..24 {
            m[e][z] = -contract(&ctx.tables.schmid[e], &d_a);
        }
    }
    m
}

enum SubstepSolve {
    /// Converged shear increments and the matching plastic gradient.
    Converged { dg: [f64; 24], f_p_new: Matrix3<f64> },
    /// The damped Newton could not reduce the residual; the caller should
    /// retry with a smaller substep.
    Stalled,
}

/// Backward-Euler substep: solves the implicit flow rule `dg_eta = h
/// gamma_dot_0 |tau_eta(dg)/r_eta|^(1/m) sign(tau_eta(dg))` by damped Newton.
/// The residual is the m-th power of both sides,
///
///   R_eta = |dg_eta / (h gamma_dot_0)|^m sign(dg_eta) - tau_eta(dg) / r_eta,
///
/// which is dimensionless and bounded: the stress term is linear in the
/// increments (Jacobian block M / r) and the power term contributes only a
/// nonnegative diagonal, so the linear systems stay well conditioned even
/// where the raw power law spans hundreds of orders of magnitude. The
/// implicit evaluation keeps the stiff flow rule stable and the step response
/// differentiable; the plastic update itself stays the exponential map.
fn solve_substep(
    f_c_end: &Matrix3<f64>,
    st: &CrystalState,
    h: f64,
    ctx: &StepCtx<'_>,
) -> Result<SubstepSolve> {
    // Residual in shear units: R_i = dg_i - h gamma_dot_0 psign(tau_i(dg)/r_i).
    // Its Jacobian is I + diag(gp) M, whose identity block keeps the redundant
    // shear directions (the null space of the rank-deficient interaction
    // moduli) perfectly conditioned. The flow-rule gains gp span hundreds of
    // orders of magnitude at 1/m = 50, so each row is equilibrated before the
    // factorization: hot rows then act as well-scaled stress equations while
    // cool rows stay shear equations. Far from the solution Newton still
    // contracts overshot stresses only geometrically (a factor of about
    // 1 - m per step, the linearization of the power law), hence the generous
    // iteration budget; the bisection predictor below removes most of that
    // crawl by starting every component at a self-consistent magnitude.
    const NEWTON_TOL: f64 = 1e-10;
    const MAX_ITERS: usize = 200;
    let m_exp = ctx.params.rate_m;
    let scale = h * ctx.params.gamma_dot_0;
    let cap = ctx.options.max_dgamma;
    let flow = |tau: f64, r: f64| -> f64 {
        scale * power_sign(tau / r, ctx.inv_m, ctx.inv_m_int)
    };
    let trial = eval_tau_after(f_c_end, &st.f_p, &[0.0; 24], ctx)?;
    // Jacobian moduli at the elastic trial configuration; the elastic state
    // barely moves within one substep, so they are reused across iterations
    // (modified Newton) with the exact residual deciding convergence.
    let interaction = interaction_at(&trial, ctx);
    // Self-relaxation predictor: per system, solve the scalar implicit
    // equation `(x/scale)^m = (|tau_trial| - M_ii x) / r` by bisection,
    // ignoring cross couplings. This starts every component at a
    // self-consistent magnitude instead of the raw (wildly overshooting)
    // elastic rates; Newton then only has to resolve the couplings.
    let mut dg = [0.0f64; 24];
    for i in 0..24 {
        let tau_t = trial.tau[i];
        if flow(tau_t, st.r[i]).abs() <= 1e-14 {
            continue;
        }
        let m_ii = interaction[i][i];
        if !(m_ii > 0.0) {
            dg[i] = flow(tau_t, st.r[i]).clamp(-cap, cap);
            continue;
        }
        let target = tau_t.abs();
        let phi = |x: f64| (x / scale).powf(m_exp) - (target - m_ii * x) / st.r[i];
        let mut lo = 0.0f64;
        let mut hi = target / m_ii;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if phi(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        dg[i] = 0.5 * (lo + hi) * tau_t.signum();
    }
    let residual = |dgv: &[f64; 24], tau: &[f64; 24]| -> [f64; 24] {
        std::array::from_fn(|i| dgv[i] - flow(tau[i], st.r[i]))
    };
    let inf_norm = |r: &[f64; 24]| r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let two_norm = |r: &[f64; 24]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut ev = eval_tau_after(f_c_end, &st.f_p, &dg, ctx)?;
    let mut res = residual(&dg, &ev.tau);
    for _iter in 0..MAX_ITERS {
        let rn = inf_norm(&res);
        let rn2 = two_norm(&res);
        if rn <= NEWTON_TOL {
            return Ok(SubstepSolve::Converged { dg, f_p_new: ev.f_p_new });
        }
        if !rn.is_finite() {
            return Ok(SubstepSolve::Stalled);
        }
        // Flow-rule gains gp_i = d(h gamma_dot_i)/d tau_i >= 0.
        let gp: [f64; 24] = std::array::from_fn(|i| {
            let ratio = (ev.tau[i] / st.r[i]).abs();
            let pow = match ctx.inv_m_int {
                Some(p) => ratio.powi(p - 1),
                None => ratio.powf(ctx.inv_m - 1.0),
            };
            let g = scale * ctx.inv_m / st.r[i] * pow;
            if g.is_finite() {
                g
            } else {
                1e300
            }
        });
        // Rows with negligible gain are exact identity rows; eliminate them
        // up front and solve only the coupled block, equilibrated row-wise.
        let coupled: [bool; 24] = std::array::from_fn(|i| gp[i] > 1e-16);
        let active: Vec<usize> = (0..24).filter(|&i| coupled[i]).collect();
        let mut delta = [0.0f64; 24];
        for i in 0..24 {
            if !coupled[i] {
                delta[i] = -res[i];
            }
        }
        let n = active.len();
        if n > 0 {
            let mut a = vec![0.0f64; n * n];
            let mut b = vec![0.0f64; n];
            for (ai, &i) in active.iter().enumerate() {
                let row_mod = interaction[i].iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let w = 1.0 / (1.0 + gp[i] * row_mod);
                let mut rhs = -res[i];
                for j in 0..24 {
                    if !coupled[j] {
                        rhs -= gp[i] * interaction[i][j] * delta[j];
                    }
                }
                b[ai] = w * rhs;
                for (aj, &j) in active.iter().enumerate() {
                    let entry = if i == j { 1.0 } else { 0.0 } + gp[i] * interaction[i][j];
                    a[ai * n + aj] = w * entry;
                }
            }
            if solve_dense(&mut a, &mut b, n).is_none() {
                return Ok(SubstepSolve::Stalled);
            }
            for (ai, &i) in active.iter().enumerate() {
                delta[i] = b[ai];
            }
        }
        // Damped update, accepted on two-norm progress, with the initial step
        // length capped near the shear cap (the solution always lies within
        // that scale).
        let step_len = inf_norm(&delta);
        let mut lambda = if step_len > 4.0 * cap { 4.0 * cap / step_len } else { 1.0 };
        let mut advanced = false;
        for _ in 0..20 {
            let dg_try: [f64; 24] = std::array::from_fn(|i| dg[i] + lambda * delta[i]);
            if let Ok(ev_try) = eval_tau_after(f_c_end, &st.f_p, &dg_try, ctx) {
                let res_try = residual(&dg_try, &ev_try.tau);
                let rn2_try = two_norm(&res_try);
                if rn2_try.is_finite() && rn2_try < rn2 {
                    dg = dg_try;
                    ev = ev_try;
                    res = res_try;
                    advanced = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !advanced {
            return Ok(SubstepSolve::Stalled);
        }
    }
    Ok(SubstepSolve::Stalled)
}

/// In-place Gaussian elimination with partial pivoting; `a` is n x n row
/// major, `b` the right-hand side (solution on exit).
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<()> {
    for col in 0..n {
        let mut piv = col;
        for row in (col + 1)..n {
            if a[row * n + col].abs() > a[piv * n + col].abs() {
                piv = row;
            }
        }
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for j in (col + 1)..n {
            s -= a[col * n + j] * b[j];
        }
        b[col] = s / a[col * n + col];
    }
    Some(())
}

struct StepPath {
    /// Orthonormal eigenbasis of the relative stretch, lattice frame.
    basis: Matrix3<f64>,
    log_eig: [f64; 3],
    f_start: Matrix3<f64>,
    dt: f64,
}

impl StepPath {
    /// Constant-velocity-gradient path from `f_start` to `f_new`; the relative
    /// deformation must be symmetric positive definite (it is a rotated
    /// diagonal stretch by construction of the process kinematics).
    fn new(f_start: &Matrix3<f64>, f_new: &Matrix3<f64>, dt: f64) -> Result<Self> {
        let f_start_inv = f_start
            .try_inverse()
            .ok_or_else(|| Error::invalid_argument("singular start deformation gradient"))?;
        let rel = f_new * f_start_inv;
        let sym = (rel + rel.transpose()) * 0.5;
        let skew_norm = (rel - rel.transpose()).norm();
        if skew_norm > 1e-6 * sym.norm().max(1.0) {
            return Err(Error::invalid_argument(
                "relative step deformation is not a pure stretch",
            ));
        }
        let eig = nalgebra::SymmetricEigen::new(sym);
        let mut log_eig = [0.0f64; 3];
        for k in 0..3 {
            let lam = eig.eigenvalues[k];
            if !(lam > 1e-12) {
                return Err(Error::invalid_argument("non-positive relative stretch"));
            }
            log_eig[k] = lam.ln();
        }
        Ok(StepPath { basis: eig.eigenvectors, log_eig, f_start: *f_start, dt })
    }

    fn at(&self, t: f64) -> Matrix3<f64> {
        let s = (t / self.dt).clamp(0.0, 1.0);
        let d = Matrix3::from_diagonal(&Vector3::new(
            (s * self.log_eig[0]).exp(),
            (s * self.log_eig[1]).exp(),
            (s * self.log_eig[2]).exp(),
        ));
        self.basis * d * self.basis.transpose() * self.f_start
    }
}

/// Substep scheduling: adaptive (optionally recording the accepted substep
/// sizes) or replay of a previously recorded schedule. Replaying a frozen
/// schedule makes the step response a smooth function of the imposed
/// deformation, which the finite-difference balancing Jacobian needs; the
/// adaptive accept/reject decisions would otherwise flip under tiny
/// perturbations and drown the derivative signal.
enum IntegrateMode<'a> {
    Adaptive { record: Option<&'a mut Vec<f64>> },
    Replay { schedule: &'a [f64] },
}

/// Commits a converged substep: plastic gradient, hardening, accumulated
/// shear. The hardening increment uses the solved shear magnitudes directly
/// (the substep length cancels out of rate times h).
fn apply_accepted(
    st: &mut CrystalState,
    dg: &[f64; 24],
    f_p_new: Matrix3<f64>,
    params: &MaterialParams,
    tables: &SystemTables,
) {
    let abs_dg: [f64; 24] = std::array::from_fn(|i| dg[i].abs());
    let slope = voce_slope(st.big_gamma, params);
    let r_inc = hardening_rates_fast(&abs_dg, slope, params, tables);
    for i in 0..24 {
        st.r[i] += r_inc[i];
    }
    st.big_gamma += abs_dg.iter().sum::<f64>();
    st.f_p = f_p_new;
}

fn integrate_crystal_inner(
    state: &CrystalState,
    f_new: &Matrix3<f64>,
    dt: f64,
    params: &MaterialParams,
    options: &SolverOptions,
    mode: IntegrateMode<'_>,
) -> Result<(CrystalState, Matrix3<f64>, usize)> {
    if !(dt > 0.0) {
        return Err(Error::invalid_argument("integrate_crystal requires dt > 0"));
    }
    if !(f_new.determinant() > 0.0) {
        return Err(Error::invalid_argument("integrate_crystal requires det F_new > 0"));
    }
    let ctx = StepCtx::new(params, options);
    let path = StepPath::new(&state.f_c, f_new, dt)?;
    let mut st = state.clone();
    let mut attempts = 0usize;
    match mode {
        IntegrateMode::Replay { schedule } => {
            // Replays follow the recorded substep grid on the frozen path so
            // perturbed evaluations stay smooth for divided differences. A
            // recorded width can still stall at a perturbed state right at a
            // yield transition; splitting it in halves (bounded depth) keeps
            // the same grid points and degrades the evaluation gracefully
            // instead of failing it.
            let mut t = 0.0f64;
            for &h in schedule {
                let mut pending = vec![(h, 0u32)];
                while let Some((hw, depth)) = pending.pop() {
                    match solve_substep(&path.at(t + hw), &st, hw, &ctx)? {
                        SubstepSolve::Converged { dg, f_p_new } => {
                            apply_accepted(&mut st, &dg, f_p_new, params, ctx.tables);
                            t += hw;
                            attempts += 1;
                        }
                        SubstepSolve::Stalled => {
                            if depth >= 8 {
                                return Err(Error::IntegrationFailure(
                                    "implicit substep stalled during schedule replay".into(),
                                ));
                            }
                            pending.push((0.5 * hw, depth + 1));
                            pending.push((0.5 * hw, depth + 1));
                        }
                    }
                }
            }
        }
        IntegrateMode::Adaptive { mut record } => {
            let h_cap = dt / options.min_substeps as f64;
            let mut t = 0.0f64;
            let mut h_next = h_cap;
            let mut just_rejected = false;
            while t < dt * (1.0 - 1e-12) {
                attempts += 1;
                if attempts > options.max_substeps {
                    return Err(Error::IntegrationFailure(format!(
                        "substep limit {} exceeded at t = {t:.3e} of {dt:.3e} s",
                        options.max_substeps
                    )));
                }
                let h = h_next.min(h_cap).min(dt - t);
                match solve_substep(&path.at(t + h), &st, h, &ctx)? {
                    SubstepSolve::Converged { dg, f_p_new }
                        if dg.iter().fold(0.0f64, |m, x| m.max(x.abs()))
                            <= options.max_dgamma * (1.0 + 1e-12) =>
                    {
                        apply_accepted(&mut st, &dg, f_p_new, params, ctx.tables);
                        t += h;
                        if let Some(rec) = record.as_deref_mut() {
                            rec.push(h);
                        }
                        // Grow cautiously, and not straight after a rejection,
                        // to avoid accept/reject churn at the cap boundary.
                        h_next = if just_rejected { h } else { h * 1.5 };
                        just_rejected = false;
                    }
                    _ => {
                        h_next = h * 0.5;
                        just_rejected = true;
                    }
                }
            }
        }
    }
    st.f_c = *f_new;
    let f_p_inv = st
        .f_p
        .try_inverse()
        .ok_or_else(|| Error::IntegrationFailure("singular F_p after integration".into()))?;
    let f_e = st.f_c * f_p_inv;
    let t_star = pk_stress_unchecked(&f_e, params);
    let t_lat = cauchy_from_pk(&t_star, &f_e).map_err(|_| {
        Error::IntegrationFailure("elastic deformation gradient lost positivity".into())
    })?;
    let o = st.initial_orientation.to_matrix();
    let t_sample = o * t_lat * o.transpose();
    Ok((st, t_sample, attempts))
}

/// Integrates one crystal from its current configuration to the lattice-frame
/// deformation gradient `f_new` over `dt` seconds. Substeps are adaptive on
/// the shear-increment cap; each substep evaluates the flow rule implicitly
/// and updates F_p by the exponential map.
pub fn integrate_crystal(
    state: &CrystalState,
    f_new: &Matrix3<f64>,
    dt: f64,
    params: &MaterialParams,
    options: &SolverOptions,
) -> Result<(CrystalState, Matrix3<f64>)> {
    let (st, stress, _) = integrate_crystal_inner(
        state,
        f_new,
        dt,
        params,
        options,
        IntegrateMode::Adaptive { record: None },
    )?;
    Ok((st, stress))
}

// ---------------------------------------------------------------------------
// Aggregate.

/// Volume-weighted polycrystal aggregate under Taylor kinematics.
#[derive(Debug, Clone)]
pub struct CrystalAggregate {
    pub crystals: Vec<CrystalState>,
    pub volumes: Vec<f64>,
    /// Macroscopic deformation gradient, sample frame.
    pub f_total: Matrix3<f64>,
    pub eq_strain: f64,
    /// Previous step's lateral solution, used as the Newton warm start.
    pub last_lateral: Option<(f64, f64)>,
}

impl CrystalAggregate {
    pub fn from_texture(texture: &Texture, params: &MaterialParams) -> Result<Self> {
        params.validate()?;
        let total: f64 = texture.total_volume();
        let crystals: Vec<CrystalState> = texture
            .entries
            .iter()
            .map(|e| CrystalState::new(e.orientation, params))
            .collect();
        let volumes = texture.entries.iter().map(|e| e.volume / total).collect();
        Ok(CrystalAggregate {
            crystals,
            volumes,
            f_total: Matrix3::identity(),
            eq_strain: 0.0,
            last_lateral: None,
        })
    }

    /// Current crystallographic texture (derived orientations, fixed volumes).
    pub fn texture(&self) -> Result<Texture> {
        let entries = self
            .crystals
            .iter()
            .zip(self.volumes.iter())
            .map(|(c, &v)| {
                Ok(TextureEntry { orientation: c.current_orientation()?, volume: v })
            })
            .collect::<Result<Vec<_>>>()?;
        Texture::new(entries)
    }

    /// Volume-averaged sample-frame Cauchy stress of the current state,
    /// without integrating anything.
    pub fn mean_stress(&self, params: &MaterialParams) -> Result<Matrix3<f64>> {
        let mut t_bar = Matrix3::zeros();
        for (c, &v) in self.crystals.iter().zip(self.volumes.iter()) {
            let f_e = c.elastic_gradient()?;
            let t_star = second_pk_stress(&f_e, params)?;
            let t_lat = cauchy_from_pk(&t_star, &f_e)?;
            let o = c.initial_orientation.to_matrix();
            t_bar += (o * t_lat * o.transpose()) * v;
        }
        Ok(t_bar)
    }
}

/// Result of one lateral balancing solve.
pub struct BalanceResult {
    pub f22: f64,
    pub f33: f64,
    /// Sample-frame volume-averaged Cauchy stress at the balanced state.
    pub stress: Matrix3<f64>,
    /// The same stress expressed in the rotated process frame.
    pub rotated_stress: Matrix3<f64>,
    pub newton_iterations: usize,
    pub residual: (f64, f64),
    pub tolerance: f64,
    pub new_states: Vec<CrystalState>,
    pub max_substeps_used: usize,
}

struct TrialEval {
    states: Vec<CrystalState>,
    stress: Matrix3<f64>,
    rotated: Matrix3<f64>,
    residual: (f64, f64),
    tolerance: f64,
    max_substeps: usize,
    /// Accepted substep schedules, one per crystal (empty in replay mode).
    schedules: Vec<Vec<f64>>,
}

fn trial_integrate(
    agg: &CrystalAggregate,
    f11: f64,
    x: (f64, f64),
    rot: &Matrix3<f64>,
    dt: f64,
    params: &MaterialParams,
    options: &SolverOptions,
    replay: Option<&[Vec<f64>]>,
) -> Result<TrialEval> {
    let f_hat = rot
        * Matrix3::from_diagonal(&Vector3::new(f11, x.0, x.1))
        * rot.transpose();
    // Each crystal's lattice-frame target comes from the accumulated
    // macroscopic product, not from compounding its own f_c, so that a state
    // restored from a snapshot (which reconstructs f_c from F) continues on
    // the bitwise-identical trajectory.
    let f_total_new = f_hat * agg.f_total;
    let mut states = Vec::with_capacity(agg.crystals.len());
    let mut schedules = Vec::new();
    let mut stress = Matrix3::zeros();
    let mut max_substeps = 0usize;
    for (i, (c, &v)) in agg.crystals.iter().zip(agg.volumes.iter()).enumerate() {
        let o = c.initial_orientation.to_matrix();
        let f_new_c = o.transpose() * f_total_new * o;
        let (st, t_sample, used) = match replay {
            Some(grids) => integrate_crystal_inner(
                c,
                &f_new_c,
                dt,
                params,
                options,
                IntegrateMode::Replay { schedule: &grids[i] },
            )?,
            None => {
                let mut rec = Vec::new();
                let out = integrate_crystal_inner(
                    c,
                    &f_new_c,
                    dt,
                    params,
                    options,
                    IntegrateMode::Adaptive { record: Some(&mut rec) },
                )?;
                schedules.push(rec);
                out
            }
        };
        stress += t_sample * v;
        max_substeps = max_substeps.max(used);
        states.push(st);
    }
    let rotated = rot.transpose() * stress * rot;
    let tolerance = options.stress_tol_abs.max(options.stress_tol_rel * rotated[(0, 0)].abs());
    Ok(TrialEval {
        states,
        stress,
        rotated,
        residual: (rotated[(1, 1)], rotated[(2, 2)]),
        tolerance,
        max_substeps,
        schedules,
    })
}

fn residual_norm(r: (f64, f64)) -> f64 {
    (r.0 * r.0 + r.1 * r.1).sqrt()
}

/// Solves for the lateral stretches (F22, F33) in the rotated process frame
/// so that the rotated lateral normal stresses vanish within tolerance, by
/// Newton iteration with a finite-difference Jacobian. The aggregate is not
/// mutated; the accepted trial states are returned for the caller to commit.
pub fn balance_lateral(
    agg: &CrystalAggregate,
    f11: f64,
    rotation: &Quat,
    dt: f64,
    params: &MaterialParams,
    options: &SolverOptions,
) -> Result<BalanceResult> {
    let rot = rotation.to_matrix();
    let isochoric = 1.0 / f11.sqrt();
    let mut x = agg.last_lateral.unwrap_or((isochoric, isochoric));
    let mut ev = trial_integrate(agg, f11, x, &rot, dt, params, options, None)?;
    let mut iters = 0usize;
    loop {
        let converged =
            ev.residual.0.abs() < ev.tolerance && ev.residual.1.abs() < ev.tolerance;
        // Always take at least one correction: the warm start can sit inside
        // the absolute tolerance while still being kinematically off (for
        // example micro-strain elastic steps, where the correct laterals
        // differ from the isochoric guess but all stresses are tiny).
        if converged && (iters >= 1 || residual_norm(ev.residual) < 1e-12) {
            return Ok(BalanceResult {
                f22: x.0,
                f33: x.1,
                stress: ev.stress,
                rotated_stress: ev.rotated,
                newton_iterations: iters,
                residual: ev.residual,
                tolerance: ev.tolerance,
                new_states: ev.states,
                max_substeps_used: ev.max_substeps,
            });
        }
        if iters >= options.newton_max_iters {
            return Err(Error::BalancingFailure(format!(
                "no lateral balance after {iters} iterations; residual ({:.3e}, {:.3e}) MPa \
                 against tolerance {:.3e}",
                ev.residual.0, ev.residual.1, ev.tolerance
            )));
        }
        // Finite-difference Jacobian on the frozen substep schedules of the
        // base point, so the differences are smooth in the perturbation (a
        // replay of the base schedules reproduces the base residual bitwise).
        let mut jac = [[0.0f64; 2]; 2];
        for k in 0..2 {
            let delta = options.fd_rel * x_component(x, k).abs().max(options.fd_rel);
            let xp = perturb(x, k, delta);
            let evp =
                trial_integrate(agg, f11, xp, &rot, dt, params, options, Some(&ev.schedules))?;
            jac[0][k] = (evp.residual.0 - ev.residual.0) / delta;
            jac[1][k] = (evp.residual.1 - ev.residual.1) / delta;
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() < 1e-30 {
            return Err(Error::BalancingFailure("singular lateral Jacobian".into()));
        }
        let mut step = (
            (jac[1][1] * ev.residual.0 - jac[0][1] * ev.residual.1) / det,
            (jac[0][0] * ev.residual.1 - jac[1][0] * ev.residual.0) / det,
        );
        // Keep steps inside a trust region; lateral stretches move by at most
        // a couple percent per process step.
        let cap = 0.02;
        step.0 = step.0.clamp(-cap, cap);
        step.1 = step.1.clamp(-cap, cap);
        let base_norm = residual_norm(ev.residual);
        // Backtracking line search keeping the least-bad successful trial. A
        // wildly off trial can blow up the stiff flow rule; such simulation
        // failures just shrink the step further.
        let mut accepted: Option<((f64, f64), TrialEval)> = None;
        let mut last_err = None;
        let mut lambda = 1.0;
        for _ in 0..6 {
            let x_try = (x.0 - lambda * step.0, x.1 - lambda * step.1);
            match trial_integrate(agg, f11, x_try, &rot, dt, params, options, None) {
                Ok(ev_try) => {
                    let norm = residual_norm(ev_try.residual);
                    let improved = norm < base_norm;
                    let better_than_kept = accepted
                        .as_ref()
                        .map(|(_, kept)| norm < residual_norm(kept.residual))
                        .unwrap_or(true);
                    if better_than_kept {
                        accepted = Some((x_try, ev_try));
                    }
                    if improved {
                        break;
                    }
                }
                Err(e) if e.is_simulation_failure() => last_err = Some(e),
                Err(e) => return Err(e),
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((x_new, ev_new)) => {
                x = x_new;
                ev = ev_new;
            }
            None => {
                return Err(last_err.unwrap_or_else(|| {
                    Error::BalancingFailure("line search produced no usable trial".into())
                }))
            }
        }
        iters += 1;
    }
}

fn x_component(x: (f64, f64), k: usize) -> f64 {
    if k == 0 {
        x.0
    } else {
        x.1
    }
}

fn perturb(x: (f64, f64), k: usize, delta: f64) -> (f64, f64) {
    if k == 0 {
        (x.0 + delta, x.1)
    } else {
        (x.0, x.1 + delta)
    }
}

/// Diagnostics of one applied process step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub f11: f64,
    pub f22: f64,
    pub f33: f64,
    pub dt: f64,
    pub eq_strain_increment: f64,
    /// Volume-averaged sample-frame Cauchy stress at the end of the step.
    pub mean_stress: Matrix3<f64>,
    pub rotated_stress: Matrix3<f64>,
    pub newton_iterations: usize,
    pub residual: (f64, f64),
    pub tolerance: f64,
    pub max_substeps_used: usize,
}

/// Outcome of a process step: either applied, or rejected because it would
/// cross the equivalent-strain cap (the aggregate is left untouched).
pub enum StepOutcome {
    Applied(StepReport),
    StrainCapped,
}

/// Applies one process step `F_hat = R diag(1+f, F22, F33) R^T` on top of the
/// current configuration: balances the lateral stretches, integrates every
/// crystal over `dt = |f| / REFERENCE_STRAIN_RATE`, accumulates the von Mises
/// equivalent strain, and commits the new states. `f = 0` is a no-op that
/// leaves the aggregate untouched.
pub fn apply_process_step(
    agg: &mut CrystalAggregate,
    f: f64,
    rotation: &Quat,
    params: &MaterialParams,
    options: &SolverOptions,
) -> Result<StepOutcome> {
    if !(f.is_finite() && f.abs() <= 0.02 + 1e-12) {
        return Err(Error::invalid_argument(format!(
            "deformation magnitude f = {f} outside [-0.02, 0.02]"
        )));
    }
    if f == 0.0 {
        let stress = agg.mean_stress(params)?;
        return Ok(StepOutcome::Applied(StepReport {
            f11: 1.0,
            f22: 1.0,
            f33: 1.0,
            dt: 0.0,
            eq_strain_increment: 0.0,
            mean_stress: stress,
            rotated_stress: stress,
            newton_iterations: 0,
            residual: (0.0, 0.0),
            tolerance: options.stress_tol_abs,
            max_substeps_used: 0,
        }));
    }
    let f11 = 1.0 + f;
    let dt = f.abs() / REFERENCE_STRAIN_RATE;
    let bal = balance_lateral(agg, f11, rotation, dt, params, options)?;
    let logs = [f11.ln(), bal.f22.ln(), bal.f33.ln()];
    let d_eq = (2.0 / 3.0 * logs.iter().map(|l| l * l).sum::<f64>()).sqrt();
    if agg.eq_strain + d_eq > options.strain_cap + 1e-12 {
        return Ok(StepOutcome::StrainCapped);
    }
    let rot = rotation.to_matrix();
    let f_hat = rot
        * Matrix3::from_diagonal(&Vector3::new(f11, bal.f22, bal.f33))
        * rot.transpose();
    agg.crystals = bal.new_states;
    agg.f_total = f_hat * agg.f_total;
    agg.eq_strain += d_eq;
    agg.last_lateral = Some((bal.f22, bal.f33));
    Ok(StepOutcome::Applied(StepReport {
        f11,
        f22: bal.f22,
        f33: bal.f33,
        dt,
        eq_strain_increment: d_eq,
        mean_stress: bal.stress,
        rotated_stress: bal.rotated_stress,
        newton_iterations: bal.newton_iterations,
        residual: bal.residual,
        tolerance: bal.tolerance,
        max_substeps_used: bal.max_substeps_used,
    }))
}

// ---------------------------------------------------------------------------
// Elastic property evaluation.

const VOIGT_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)];

fn rotated_stiffness_voigt(o: &Matrix3<f64>, params: &MaterialParams) -> Matrix6<f64> {
    let h = params.c11 - params.c12 - 2.0 * params.c44;
    let mut c = Matrix6::zeros();
    for (bi, &(i, j)) in VOIGT_PAIRS.iter().enumerate() {
        for (bj, &(k, l)) in VOIGT_PAIRS.iter().enumerate() {
            let dij = (i == j) as usize as f64;
            let dkl = (k == l) as usize as f64;
            let dik = (i == k) as usize as f64;
            let djl = (j == l) as usize as f64;
            let dil = (i == l) as usize as f64;
            let djk = (j == k) as usize as f64;
            let mut aniso = 0.0;
            for m in 0..3 {
                aniso += o[(i, m)] * o[(j, m)] * o[(k, m)] * o[(l, m)];
            }
            c[(bi, bj)] =
                params.c12 * dij * dkl + params.c44 * (dik * djl + dil * djk) + h * aniso;
        }
    }
    c
}

/// Voigt (uniform strain) volume average of the rotated stiffness tensors,
/// as a 6x6 matrix in GPa.
pub fn voigt_average_stiffness(texture: &Texture, params: &MaterialParams) -> Matrix6<f64> {
    let total = texture.total_volume();
    let mut c_bar = Matrix6::zeros();
    for e in &texture.entries {
        let o = e.orientation.to_matrix();
        c_bar += rotated_stiffness_voigt(&o, params) * (e.volume / total);
    }
    c_bar
}

/// Directional Young's modulus E_ii (GPa) of the Voigt-average stiffness.
/// `axis` is 1, 2, or 3.
pub fn young_modulus(texture: &Texture, axis: usize, params: &MaterialParams) -> Result<f64> {
    if !(1..=3).contains(&axis) {
        return Err(Error::invalid_argument("axis must be 1, 2, or 3"));
    }
    let c_bar = voigt_average_stiffness(texture, params);
    let s = c_bar
        .try_inverse()
        .ok_or_else(|| Error::invalid_argument("singular average stiffness"))?;
    Ok(1.0 / s[(axis - 1, axis - 1)])
}

/// All three directional Young's moduli (GPa).
pub fn young_moduli(texture: &Texture, params: &MaterialParams) -> Result<[f64; 3]> {
    let c_bar = voigt_average_stiffness(texture, params);
    let s = c_bar
        .try_inverse()
        .ok_or_else(|| Error::invalid_argument("singular average stiffness"))?;
    Ok([1.0 / s[(0, 0)], 1.0 / s[(1, 1)], 1.0 / s[(2, 2)]])
}

// ---------------------------------------------------------------------------
// Snapshot I/O.

/// Writes the aggregate as text: header lines with the macroscopic state,
/// then one line per crystal `volume q(4) Fp(9 row-major) r(24) Gamma`.
pub fn write_snapshot(agg: &CrystalAggregate, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("# aggregate snapshot: volume q(4) Fp(9 row-major) r(24) Gamma\n");
    out.push_str("# F=");
    for i in 0..3 {
        for j in 0..3 {
            out.push_str(&format!(" {:.17e}", agg.f_total[(i, j)]));
        }
    }
    out.push('\n');
    out.push_str(&format!("# eq_strain= {:.17e}\n", agg.eq_strain));
    if let Some((a, b)) = agg.last_lateral {
        out.push_str(&format!("# lateral= {a:.17e} {b:.17e}\n"));
    }
    for (c, &v) in agg.crystals.iter().zip(agg.volumes.iter()) {
        let q = c.initial_orientation.as_array();
        out.push_str(&format!("{v:.17e}"));
        for x in q {
            out.push_str(&format!(" {x:.17e}"));
        }
        for i in 0..3 {
            for j in 0..3 {
                out.push_str(&format!(" {:.17e}", c.f_p[(i, j)]));
            }
        }
        for x in c.r {
            out.push_str(&format!(" {x:.17e}"));
        }
        out.push_str(&format!(" {:.17e}\n", c.big_gamma));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a snapshot written by `write_snapshot`.
pub fn read_snapshot(path: &Path) -> Result<CrystalAggregate> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut f_total: Option<Matrix3<f64>> = None;
    let mut eq_strain = 0.0f64;
    let mut last_lateral = None;
    let mut crystals = Vec::new();
    let mut volumes = Vec::new();
    let parse_floats = |rest: &str, n: usize, what: &str| -> Result<Vec<f64>> {
        let vals: Vec<f64> =
            rest.split_whitespace().map(|t| t.parse::<f64>()).collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(path, format!("{what}: {e}")))?;
        if vals.len() != n {
            return Err(Error::parse(path, format!("{what}: expected {n} numbers")));
        }
        Ok(vals)
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# F=") {
            let v = parse_floats(rest, 9, "F header")?;
            f_total = Some(Matrix3::from_row_slice(&v));
        } else if let Some(rest) = line.strip_prefix("# eq_strain=") {
            eq_strain = parse_floats(rest, 1, "eq_strain header")?[0];
        } else if let Some(rest) = line.strip_prefix("# lateral=") {
            let v = parse_floats(rest, 2, "lateral header")?;
            last_lateral = Some((v[0], v[1]));
        } else if line.starts_with('#') {
            continue;
        } else {
            let v = parse_floats(line, 39, "crystal line")?;
            let orientation = crate::orientation_space::quat_from_file_components(
                v[1], v[2], v[3], v[4],
            );
            let f_p = Matrix3::from_row_slice(&v[5..14]);
            let mut r = [0.0f64; 24];
            r.copy_from_slice(&v[14..38]);
            volumes.push(v[0]);
            crystals.push(CrystalState {
                initial_orientation: orientation,
                f_c: Matrix3::identity(),
                f_p,
                r,
                big_gamma: v[38],
            });
        }
    }
    let f_total = f_total
        .ok_or_else(|| Error::parse(path, "missing # F= header".to_string()))?;
    if crystals.is_empty() {
        return Err(Error::parse(path, "snapshot has no crystals".to_string()));
    }
    for c in crystals.iter_mut() {
        let o = c.initial_orientation.to_matrix();
        c.f_c = o.transpose() * f_total * o;
    }
    Ok(CrystalAggregate { crystals, volumes, f_total, eq_strain, last_lateral })
}
