//! Symmetrized generalized spherical harmonic (GSH) features of orientation
//! distributions, truncated at degree 8. With cubic crystal symmetry and no
//! sample symmetry the surviving degrees are l in {0, 4, 6, 8} with one
//! symmetrized harmonic each; dropping the constant l = 0 term leaves 21
//! complex coefficients (nu in 0..=l), encoded as 42 reals.
//!
//! Convention, fixed once here: the Wigner matrix of a rotation `R` with ZYZ
//! Euler angles `(alpha, beta, gamma)` is
//! `D^l_{m n} = exp(-i m alpha) d^l_{m n}(beta) exp(-i n gamma)`, a group
//! homomorphism (`D(R1 R2) = D(R1) D(R2)`). Crystal symmetry acts on the
//! right quaternion factor, which leaves a one-dimensional invariant subspace
//! per degree; its basis vector is fixed to the self-conjugate phase and the
//! sample-side rows carry an extra `i^|nu|` so that real distributions satisfy
//! `c_{l,-nu} = conj(c_{l,nu})`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::odf_histogram::Texture;
use crate::orientation_space::{cubic_group, Quat};

/// Degrees carried by the feature vector.
pub const FEATURE_DEGREES: [usize; 3] = [4, 6, 8];

/// Number of real feature components: 2 * (5 + 7 + 9).
pub const FEATURE_DIM: usize = 42;

const RANK_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Wigner d and D matrices.

/// Precomputed monomial expansion of one little-d entry:
/// `d(beta) = sum_s coef_s cos(beta/2)^cp_s sin(beta/2)^sp_s`.
struct DTerm {
    coef: f64,
    cos_pow: u8,
    sin_pow: u8,
}

struct DTable {
    l: usize,
    terms: Vec<Vec<DTerm>>, // indexed by (m' + l) * (2l + 1) + (m + l)
}

fn factorial(n: i64) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn build_d_table(l: usize) -> DTable {
    let li = l as i64;
    let dim = 2 * l + 1;
    let mut terms = Vec::with_capacity(dim * dim);
    for mp in -li..=li {
        for m in -li..=li {
            let norm = (factorial(li + mp) * factorial(li - mp) * factorial(li + m)
                * factorial(li - m))
            .sqrt();
            let s_min = 0.max(m - mp);
            let s_max = (li + m).min(li - mp);
            let mut list = Vec::new();
            for s in s_min..=s_max {
                let sign = if (mp - m + s) % 2 == 0 { 1.0 } else { -1.0 };
                let denom = factorial(li + m - s)
                    * factorial(s)
                    * factorial(mp - m + s)
                    * factorial(li - mp - s);
                list.push(DTerm {
                    coef: sign * norm / denom,
                    cos_pow: (2 * li + m - mp - 2 * s) as u8,
                    sin_pow: (mp - m + 2 * s) as u8,
                });
            }
            terms.push(list);
        }
    }
    DTable { l, terms }
}

fn d_table(l: usize) -> &'static DTable {
    static TABLES: OnceLock<Vec<DTable>> = OnceLock::new();
    let tables = TABLES.get_or_init(|| (0..=8).map(build_d_table).collect());
    assert!(l <= 8, "degree {l} beyond the truncation");
    &tables[l]
}

/// ZYZ Euler angles of a rotation matrix (`R = Rz(alpha) Ry(beta) Rz(gamma)`).
fn euler_zyz(m: &nalgebra::Matrix3<f64>) -> (f64, f64, f64) {
    let sin_beta = (m[(0, 2)] * m[(0, 2)] + m[(1, 2)] * m[(1, 2)]).sqrt();
    if sin_beta > 1e-12 {
        let alpha = m[(1, 2)].atan2(m[(0, 2)]);
        let beta = sin_beta.atan2(m[(2, 2)]);
        let gamma = m[(2, 1)].atan2(-m[(2, 0)]);
        (alpha, beta, gamma)
    } else if m[(2, 2)] > 0.0 {
        // Pure rotation about z.
        (m[(1, 0)].atan2(m[(0, 0)]), 0.0, 0.0)
    } else {
        ((-m[(1, 0)]).atan2(-m[(0, 0)]), PI, 0.0)
    }
}

/// Dense Wigner matrix `D^l(q)`, row index m' and column index m in `-l..=l`
/// (offset by `+l`).
pub fn wigner_d(l: usize, q: &Quat) -> Vec<Complex64> {
    let (alpha, beta, gamma) = euler_zyz(&q.to_matrix());
    let table = d_table(l);
    let dim = 2 * l + 1;
    let (c, s) = ((beta / 2.0).cos(), (beta / 2.0).sin());
    let max_pow = 2 * l + 1;
    let mut c_pow = vec![1.0f64; max_pow + 1];
    let mut s_pow = vec![1.0f64; max_pow + 1];
    for p in 1..=max_pow {
        c_pow[p] = c_pow[p - 1] * c;
        s_pow[p] = s_pow[p - 1] * s;
    }
    // Phases e^{-i m alpha} and e^{-i m gamma} for m in -l..=l.
    let phase = |angle: f64| -> Vec<Complex64> {
        (0..dim)
            .map(|i| {
                let m = i as f64 - l as f64;
                Complex64::from_polar(1.0, -m * angle)
            })
            .collect()
    };
    let pa = phase(alpha);
    let pg = phase(gamma);
    let mut out = vec![Complex64::new(0.0, 0.0); dim * dim];
    for mp in 0..dim {
        for m in 0..dim {
            let mut d = 0.0;
            for t in &table.terms[mp * dim + m] {
                d += t.coef * c_pow[t.cos_pow as usize] * s_pow[t.sin_pow as usize];
            }
            out[mp * dim + m] = pa[mp] * pg[m] * d;
        }
    }
    let _ = table.l;
    out
}

// ---------------------------------------------------------------------------
// Cubic-invariant subspaces.

/// Hermitian Jacobi eigendecomposition; returns (eigenvalues, eigenvectors as
/// columns). Sizes here are at most 17x17.
fn hermitian_eigen(a: &[Complex64], n: usize) -> (Vec<f64>, Vec<Complex64>) {
    let mut a = a.to_vec();
    let mut v = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        v[i * n + i] = Complex64::new(1.0, 0.0);
    }
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q].norm_sqr();
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                let r = apq.norm();
                if r < 1e-300 {
                    continue;
                }
                let phase = apq / r;
                let tau = (a[p * n + p].re - a[q * n + q].re) / (2.0 * r);
                let t = {
                    let sign = if tau >= 0.0 { 1.0 } else { -1.0 };
                    -sign / (tau.abs() + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = phase * (t * c);
                // Columns p and q of A and V: right-multiply by G, then
                // left-multiply A by G^H. G[pp]=c, G[pq]=s, G[qp]=-conj(s), G[qq]=c.
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = aip * c - aiq * s.conj();
                    a[i * n + q] = aip * s + aiq * c;
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = vip * c - viq * s.conj();
                    v[i * n + q] = vip * s + viq * c;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = apj * c - aqj * s;
                    a[q * n + j] = apj * s.conj() + aqj * c;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[i * n + i].re).collect();
    (eig, v)
}

/// Basis of the subspace invariant under the right action of the cubic group
/// in degree `l` (dimension M(l): 1 for l in {0, 4, 6, 8}, 0 otherwise up to
/// degree 8). Vectors are unit norm, self-conjugate under
/// `a_m = (-1)^m conj(a_{-m})`, with a deterministic overall sign.
pub fn cubic_invariant_basis(l: usize) -> Vec<Vec<Complex64>> {
    let dim = 2 * l + 1;
    let mut p = vec![Complex64::new(0.0, 0.0); dim * dim];
    for g in cubic_group() {
        let d = wigner_d(l, g);
        for i in 0..dim * dim {
            p[i] += d[i];
        }
    }
    let scale = 1.0 / 24.0;
    for x in p.iter_mut() {
        *x *= scale;
    }
    let (eig, vecs) = hermitian_eigen(&p, dim);
    let mut basis = Vec::new();
    for i in 0..dim {
        if eig[i] > 1.0 - RANK_EPS.sqrt() {
            let mut a: Vec<Complex64> = (0..dim).map(|r| vecs[r * dim + i]).collect();
            fix_phase(&mut a, l);
            basis.push(a);
        } else if eig[i] > RANK_EPS && eig[i] < 1.0 - RANK_EPS {
            // A projector has spectrum {0, 1}; anything else is a bug.
            panic!("projector eigenvalue {} for degree {l}", eig[i]);
        }
    }
    basis
}

/// Enforces `K a = a` with `(K a)_m = (-1)^m conj(a_{-m})`, then a
/// deterministic sign.
fn fix_phase(a: &mut [Complex64], l: usize) {
    let dim = 2 * l + 1;
    let k_of = |a: &[Complex64]| -> Vec<Complex64> {
        (0..dim)
            .map(|i| {
                let m = i as i64 - l as i64;
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                let j = (dim - 1 - i) as usize; // index of -m
                sign * a[j].conj()
            })
            .collect()
    };
    let ka = k_of(a);
    // K a = c a with |c| = 1 on a one-dimensional invariant space.
    let mut c = Complex64::new(0.0, 0.0);
    for i in 0..dim {
        c += a[i].conj() * ka[i];
    }
    let mu = Complex64::from_polar(1.0, c.arg() / 2.0);
    for x in a.iter_mut() {
        *x *= mu;
    }
    // Normalize and fix the remaining +-1 freedom: the largest-magnitude
    // component (smallest index on ties) gets a positive real part.
    let n = a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    for x in a.iter_mut() {
        *x /= n;
    }
    let mut best = 0;
    for i in 1..dim {
        if a[i].norm() > a[best].norm() + 1e-12 {
            best = i;
        }
    }
    let lead = a[best];
    let flip = if lead.re.abs() > 1e-12 { lead.re < 0.0 } else { lead.im < 0.0 };
    if flip {
        for x in a.iter_mut() {
            *x = -*x;
        }
    }
}

/// The symmetrized basis shared by all feature computations.
pub struct GshBasis {
    vecs: [Vec<Complex64>; 3],
}

pub fn gsh_basis() -> &'static GshBasis {
    static BASIS: OnceLock<GshBasis> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut vecs: Vec<Vec<Complex64>> = Vec::with_capacity(3);
        for l in FEATURE_DEGREES {
            let b = cubic_invariant_basis(l);
            assert_eq!(b.len(), 1, "expected a single invariant vector for degree {l}");
            vecs.push(b.into_iter().next().unwrap());
        }
        GshBasis { vecs: vecs.try_into().map_err(|_| ()).unwrap() }
    })
}

const I_POW: [Complex64; 4] = [
    Complex64::new(1.0, 0.0),
    Complex64::new(0.0, 1.0),
    Complex64::new(-1.0, 0.0),
    Complex64::new(0.0, -1.0),
];

impl GshBasis {
    /// Values of all symmetrized basis functions at one orientation, for the
    /// full sample index range `nu in -l..=l` of degree `l`.
    pub fn values_full(&self, which: usize, q: &Quat) -> Vec<Complex64> {
        let l = FEATURE_DEGREES[which];
        let dim = 2 * l + 1;
        let d = wigner_d(l, q);
        let a = &self.vecs[which];
        let scale = ((2 * l + 1) as f64).sqrt();
        (0..dim)
            .map(|row| {
                let mut t = Complex64::new(0.0, 0.0);
                for m in 0..dim {
                    t += d[row * dim + m] * a[m];
                }
                let nu_abs = (row as i64 - l as i64).unsigned_abs() as usize;
                t * scale * I_POW[nu_abs % 4]
            })
            .collect()
    }

    /// Feature slice (nu >= 0) for all three degrees: 21 complex values.
    pub fn values(&self, q: &Quat) -> [Complex64; 21] {
        let mut out = [Complex64::new(0.0, 0.0); 21];
        let mut at = 0;
        for which in 0..3 {
            let l = FEATURE_DEGREES[which];
            let full = self.values_full(which, q);
            for nu in 0..=l {
                out[at] = full[l + nu];
                at += 1;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Texture features.

/// GSH feature vector of a texture: coefficients `c_{l,nu}` for l in {4,6,8},
/// nu in 0..=l, as interleaved (re, im) pairs.
pub fn gsh_features(texture: &Texture) -> [f64; FEATURE_DIM] {
    let basis = gsh_basis();
    let total = texture.total_volume();
    let mut acc = [Complex64::new(0.0, 0.0); 21];
    for e in &texture.entries {
        let vals = basis.values(&e.orientation);
        let w = e.volume / total;
        for (a, v) in acc.iter_mut().zip(vals.iter()) {
            *a += w * v.conj();
        }
    }
    let mut out = [0.0f64; FEATURE_DIM];
    for (i, c) in acc.iter().enumerate() {
        out[2 * i] = c.re;
        out[2 * i + 1] = c.im;
    }
    out
}

/// Goal encoding: identical to the state encoding by construction.
pub fn encode_goal(texture: &Texture) -> [f64; FEATURE_DIM] {
    gsh_features(texture)
}

/// Full coefficient set (nu in -l..=l per degree) of a texture; retained for
/// verification of the conjugation structure.
pub fn gsh_coefficients_full(texture: &Texture) -> Vec<Vec<Complex64>> {
    let basis = gsh_basis();
    let total = texture.total_volume();
    let mut out: Vec<Vec<Complex64>> = FEATURE_DEGREES
        .iter()
        .map(|l| vec![Complex64::new(0.0, 0.0); 2 * l + 1])
        .collect();
    for e in &texture.entries {
        let w = e.volume / total;
        for which in 0..3 {
            let vals = basis.values_full(which, &e.orientation);
            for (a, v) in out[which].iter_mut().zip(vals.iter()) {
                *a += w * v.conj();
            }
        }
    }
    out
}

pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(FEATURE_DIM);
    for l in FEATURE_DEGREES {
        for nu in 0..=l {
            names.push(format!("c{l}_{nu}_re"));
            names.push(format!("c{l}_{nu}_im"));
        }
    }
    names
}

/// CSV export of one feature vector (header + single row).
pub fn write_features_csv(features: &[f64; FEATURE_DIM], path: &Path) -> Result<()> {
    let mut out = feature_names().join(",");
    out.push('\n');
    let row: Vec<String> = features.iter().map(|v| format!("{v:.16e}")).collect();
    out.push_str(&row.join(","));
    out.push('\n');
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
