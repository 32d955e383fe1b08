//! Orientation algebra on SO(3) with cubic crystal symmetry: unit quaternions,
//! the symmetry-reduced misorientation metric, fundamental-zone reduction,
//! near-uniform orientation grids, and a spatial index for nearest-bin queries.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seed of the grid shipped as the default histogram support and the one the
/// environment uses for its action-rotation set.
pub const DEFAULT_GRID_SEED: u64 = 7;

/// Relaxation sweeps applied after seeding a grid.
pub const LLOYD_SWEEPS: usize = 50;

/// Grids up to this size are seeded by farthest-point sampling; larger grids
/// start from a random subset of the pool (farthest-point is quadratic and
/// blows the runtime budget around J = 8192).
pub const FARTHEST_POINT_LIMIT: usize = 1024;

const SIGN_TIE_EPS: f64 = 1e-12;

/// Unit quaternion `(w, x, y, z)` representing a rotation. Construction
/// normalizes and canonicalizes the sign so that `w >= 0` (first nonzero
/// component positive when `w == 0`); both antipodes denote the same rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[inline]
fn canonical(v: [f64; 4]) -> [f64; 4] {
    let flip = if v[0].abs() > SIGN_TIE_EPS {
        v[0] < 0.0
    } else if v[1].abs() > SIGN_TIE_EPS {
        v[1] < 0.0
    } else if v[2].abs() > SIGN_TIE_EPS {
        v[2] < 0.0
    } else {
        v[3] < 0.0
    };
    if flip {
        [-v[0], -v[1], -v[2], -v[3]]
    } else {
        v
    }
}

#[inline]
fn hprod(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

#[inline]
fn dot4(a: [f64; 4], b: [f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

#[inline]
fn norm4(a: [f64; 4]) -> f64 {
    dot4(a, a).sqrt()
}

impl Quat {
    /// Builds a unit quaternion from unnormalized components.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = norm4([w, x, y, z]);
        assert!(n > 1e-300 && n.is_finite(), "degenerate quaternion");
        let v = canonical([w / n, x / n, y / n, z / n]);
        Quat { w: v[0], x: v[1], y: v[2], z: v[3] }
    }

    pub fn identity() -> Self {
        Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        assert!(n > 1e-300, "zero rotation axis");
        let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
        Quat::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    #[inline]
    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    #[inline]
    pub fn from_array(v: [f64; 4]) -> Self {
        Quat::new(v[0], v[1], v[2], v[3])
    }

    /// Hamilton product; `R(a.compose(b)) == R(a) * R(b)`.
    #[inline]
    pub fn compose(&self, rhs: &Quat) -> Quat {
        Quat::from_array(hprod(self.as_array(), rhs.as_array()))
    }

    #[inline]
    pub fn inverse(&self) -> Quat {
        Quat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Rotation matrix (columns are the rotated basis vectors).
    pub fn to_matrix(&self) -> nalgebra::Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        nalgebra::Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method; `m` must be a proper rotation.
    pub fn from_matrix(m: &nalgebra::Matrix3<f64>) -> Self {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z);
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Quat::new(w, x, y, z)
    }

    /// Rotates a 3-vector.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let m = self.to_matrix();
        let r = m * nalgebra::Vector3::new(v[0], v[1], v[2]);
        [r[0], r[1], r[2]]
    }

    /// Representative of the cubic fundamental zone: the symmetry-equivalent
    /// with maximal `w` (smallest rotation angle), ties broken by the
    /// lexicographically largest `(w, x, y, z)`.
    pub fn to_fundamental_zone(&self) -> Quat {
        let q = self.as_array();
        let mut best: Option<[f64; 4]> = None;
        for g in cubic_group() {
            let cand = canonical(hprod(q, g.as_array()));
            best = Some(match best {
                None => cand,
                Some(b) => {
                    if cand[0] > b[0] + SIGN_TIE_EPS {
                        cand
                    } else if cand[0] >= b[0] - SIGN_TIE_EPS && lex_gt(&cand, &b) {
                        cand
                    } else {
                        b
                    }
                }
            });
        }
        let v = best.unwrap();
        Quat { w: v[0], x: v[1], y: v[2], z: v[3] }
    }
}

fn lex_gt(a: &[f64; 4], b: &[f64; 4]) -> bool {
    for i in 0..4 {
        if a[i] > b[i] {
            return true;
        }
        if a[i] < b[i] {
            return false;
        }
    }
    false
}

#[inline]
fn chordal2(a: [f64; 4], b: [f64; 4]) -> f64 {
    // min(|a-b|^2, |a+b|^2) via explicit differences; the dot-product form
    // sqrt(2 - 2|a.b|) loses half the significant digits near zero.
    let mut dm = 0.0;
    let mut dp = 0.0;
    for c in 0..4 {
        let m = a[c] - b[c];
        let p = a[c] + b[c];
        dm += m * m;
        dp += p * p;
    }
    dm.min(dp)
}

/// Quaternion (chordal) metric on SO(3): `min(|q1 - q2|, |q1 + q2|)`.
#[inline]
pub fn quat_metric(a: &Quat, b: &Quat) -> f64 {
    chordal2(a.as_array(), b.as_array()).sqrt()
}

/// Cubic-symmetrized metric: minimum of `quat_metric` over the 24 proper
/// rotations of the cube applied on the crystal side. By bi-invariance the
/// one-sided minimum equals the two-sided one.
#[inline]
pub fn cubic_metric(a: &Quat, b: &Quat) -> f64 {
    let bb = b.as_array();
    let aa = a.as_array();
    let mut best = f64::INFINITY;
    for g in cubic_group() {
        let v = hprod(aa, g.as_array());
        let d2 = chordal2(v, bb);
        if d2 < best {
            best = d2;
        }
    }
    best.sqrt()
}

/// The 24 proper rotations of the cube as unit quaternions.
pub fn cubic_group() -> &'static [Quat; 24] {
    static GROUP: OnceLock<[Quat; 24]> = OnceLock::new();
    GROUP.get_or_init(|| {
        let mut g = Vec::with_capacity(24);
        g.push(Quat::identity());
        // 90/180/270 degrees about the coordinate axes.
        for axis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            for quarter in 1..4 {
                g.push(Quat::from_axis_angle(axis, quarter as f64 * std::f64::consts::FRAC_PI_2));
            }
        }
        // 120/240 degrees about the body diagonals.
        for axis in [[1.0, 1.0, 1.0], [1.0, 1.0, -1.0], [1.0, -1.0, 1.0], [1.0, -1.0, -1.0]] {
            for third in [1.0, 2.0] {
                g.push(Quat::from_axis_angle(axis, third * 2.0 * std::f64::consts::FRAC_PI_3));
            }
        }
        // 180 degrees about the face diagonals.
        for axis in [
            [1.0, 1.0, 0.0],
            [1.0, -1.0, 0.0],
            [1.0, 0.0, 1.0],
            [1.0, 0.0, -1.0],
            [0.0, 1.0, 1.0],
            [0.0, 1.0, -1.0],
        ] {
            g.push(Quat::from_axis_angle(axis, std::f64::consts::PI));
        }
        g.try_into().unwrap()
    })
}

/// Draws a Haar-uniform random rotation.
pub fn haar_quat<R: Rng + ?Sized>(rng: &mut R) -> Quat {
    loop {
        let v: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        if norm4(v) > 1e-6 {
            return Quat::from_array(v);
        }
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor index over the symmetry-expanded point cloud.

#[derive(Clone)]
struct Entry {
    v: [f64; 4],
    bin: u32,
    sym: u8,
    neg: bool,
}

#[derive(Clone, Copy)]
struct Node {
    entry: u32,
    left: i32,
    right: i32,
}

/// kd-tree over the 48-fold expansion (24 symmetry variants, both quaternion
/// signs) of a set of orientations, so that Euclidean nearest-neighbor search
/// in R^4 realizes the cubic-symmetrized metric exactly.
pub struct SymNnIndex {
    entries: Vec<Entry>,
    nodes: Vec<Node>,
    root: i32,
    n_bins: usize,
}

impl SymNnIndex {
    pub fn build(points: &[Quat]) -> SymNnIndex {
        assert!(!points.is_empty(), "empty point set");
        let group = cubic_group();
        let mut entries = Vec::with_capacity(points.len() * 48);
        for (bin, p) in points.iter().enumerate() {
            for (si, g) in group.iter().enumerate() {
                let v = hprod(p.as_array(), g.as_array());
                entries.push(Entry { v, bin: bin as u32, sym: si as u8, neg: false });
                entries.push(Entry {
                    v: [-v[0], -v[1], -v[2], -v[3]],
                    bin: bin as u32,
                    sym: si as u8,
                    neg: true,
                });
            }
        }
        let mut idx: Vec<u32> = (0..entries.len() as u32).collect();
        let mut nodes = Vec::with_capacity(entries.len());
        let root = build_node(&entries, &mut idx[..], 0, &mut nodes);
        SymNnIndex { entries, nodes, root, n_bins: points.len() }
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Nearest bin and its symmetrized distance.
    pub fn nearest(&self, q: &Quat) -> (usize, f64) {
        let mut heap = BoundedHeap::new(1);
        self.search(self.root, 0, q.as_array(), &mut heap);
        let (d2, e) = heap.items[0];
        (self.entries[e as usize].bin as usize, d2.max(0.0).sqrt())
    }

    /// Nearest bin together with the query aligned into that bin's
    /// neighborhood (the signed symmetry variant of `q` closest to the bin
    /// center in plain R^4 distance).
    pub fn nearest_aligned(&self, q: &Quat) -> (usize, [f64; 4]) {
        let mut heap = BoundedHeap::new(1);
        self.search(self.root, 0, q.as_array(), &mut heap);
        let (_, e) = heap.items[0];
        let entry = &self.entries[e as usize];
        let g_inv = cubic_group()[entry.sym as usize].inverse();
        let mut aligned = hprod(q.as_array(), g_inv.as_array());
        if entry.neg {
            aligned = [-aligned[0], -aligned[1], -aligned[2], -aligned[3]];
        }
        (entry.bin as usize, aligned)
    }

    /// The `k` nearest distinct bins, ascending by symmetrized distance (ties
    /// by bin id). Errors if fewer than `k` bins exist.
    pub fn k_nearest(&self, q: &Quat, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.n_bins {
            return Err(Error::invalid_argument(format!(
                "k = {k} out of range for {} bins",
                self.n_bins
            )));
        }
        let qa = q.as_array();
        let mut m = (2 * k + 16).min(self.entries.len());
        loop {
            let mut heap = BoundedHeap::new(m);
            self.search(self.root, 0, qa, &mut heap);
            let mut items = heap.items;
            items.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then_with(|| self.entries[a.1 as usize].bin.cmp(&self.entries[b.1 as usize].bin))
            });
            let mut out: Vec<(usize, f64)> = Vec::with_capacity(k);
            for (d2, e) in &items {
                let bin = self.entries[*e as usize].bin as usize;
                if !out.iter().any(|(b, _)| *b == bin) {
                    out.push((bin, d2.max(0.0).sqrt()));
                    if out.len() == k {
                        return Ok(out);
                    }
                }
            }
            if m == self.entries.len() {
                return Err(Error::InternalConsistency(format!(
                    "found only {} distinct bins for k = {k}",
                    out.len()
                )));
            }
            m = (m * 2).min(self.entries.len());
        }
    }

    fn search(&self, node: i32, depth: usize, q: [f64; 4], heap: &mut BoundedHeap) {
        if node < 0 {
            return;
        }
        let n = self.nodes[node as usize];
        let p = &self.entries[n.entry as usize].v;
        let mut d2 = 0.0;
        for c in 0..4 {
            let d = p[c] - q[c];
            d2 += d * d;
        }
        heap.push(d2, n.entry);
        let axis = depth % 4;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, depth + 1, q, heap);
        if !heap.full() || delta * delta < heap.worst() {
            self.search(far, depth + 1, q, heap);
        }
    }
}

fn build_node(entries: &[Entry], idx: &mut [u32], depth: usize, nodes: &mut Vec<Node>) -> i32 {
    if idx.is_empty() {
        return -1;
    }
    let axis = depth % 4;
    let mid = idx.len() / 2;
    idx.select_nth_unstable_by(mid, |a, b| {
        entries[*a as usize].v[axis].total_cmp(&entries[*b as usize].v[axis])
    });
    let entry = idx[mid];
    let me = nodes.len();
    nodes.push(Node { entry, left: -1, right: -1 });
    let (lo, hi) = idx.split_at_mut(mid);
    let left = build_node(entries, lo, depth + 1, nodes);
    let right = build_node(entries, &mut hi[1..], depth + 1, nodes);
    nodes[me].left = left;
    nodes[me].right = right;
    me as i32
}

/// Fixed-capacity max-heap of `(dist2, entry)`.
struct BoundedHeap {
    cap: usize,
    items: Vec<(f64, u32)>,
}

impl BoundedHeap {
    fn new(cap: usize) -> Self {
        BoundedHeap { cap, items: Vec::with_capacity(cap) }
    }

    fn full(&self) -> bool {
        self.items.len() == self.cap
    }

    fn worst(&self) -> f64 {
        self.items[0].0
    }

    fn push(&mut self, d2: f64, e: u32) {
        if self.items.len() < self.cap {
            self.items.push((d2, e));
            let mut i = self.items.len() - 1;
            while i > 0 {
                let parent = (i - 1) / 2;
                if self.items[parent].0 < self.items[i].0 {
                    self.items.swap(parent, i);
                    i = parent;
                } else {
                    break;
                }
            }
        } else if d2 < self.items[0].0 {
            self.items[0] = (d2, e);
            let mut i = 0;
            loop {
                let (l, r) = (2 * i + 1, 2 * i + 2);
                let mut largest = i;
                if l < self.items.len() && self.items[l].0 > self.items[largest].0 {
                    largest = l;
                }
                if r < self.items.len() && self.items[r].0 > self.items[largest].0 {
                    largest = r;
                }
                if largest == i {
                    break;
                }
                self.items.swap(i, largest);
                i = largest;
            }
        }
    }
}

/// Brute-force reference for `SymNnIndex::k_nearest`; used by tests and as a
/// fallback oracle.
pub fn k_nearest_brute(points: &[Quat], q: &Quat, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> =
        points.iter().enumerate().map(|(i, p)| (i, cubic_metric(p, q))).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

// ---------------------------------------------------------------------------
// Near-uniform grids.

/// A near-uniform set of orientations in the cubic fundamental zone, used both
/// as histogram support and as the action rotation set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrientationGrid {
    pub points: Vec<Quat>,
    pub j: usize,
    pub seed: u64,
    /// Coefficient of variation of nearest-neighbor distances (uniformity
    /// quality; lower is more even).
    pub cv: f64,
}

/// Generates a near-uniform orientation grid: Haar-oversample the fundamental
/// zone (64 J candidates), seed J points (farthest-point up to
/// [`FARTHEST_POINT_LIMIT`], random subset beyond), then run
/// [`LLOYD_SWEEPS`] centroidal relaxation sweeps under the symmetrized metric.
/// Deterministic for a given `(j, seed)`.
pub fn sample_uniform_grid(j: usize, seed: u64) -> Result<OrientationGrid> {
    use rand::SeedableRng;
    if j == 0 {
        return Err(Error::invalid_argument("grid size J must be positive"));
    }
    let pool_size = j
        .checked_mul(64)
        .ok_or_else(|| Error::invalid_argument("grid size J overflows the oversample pool"))?;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let pool: Vec<Quat> =
        (0..pool_size).map(|_| haar_quat(&mut rng).to_fundamental_zone()).collect();

    let mut seeds: Vec<Quat> = if j <= FARTHEST_POINT_LIMIT {
        farthest_point_seeds(&pool, j)
    } else {
        pool[..j].to_vec()
    };

    for _ in 0..LLOYD_SWEEPS {
        let index = SymNnIndex::build(&seeds);
        let mut sums = vec![[0.0f64; 4]; j];
        let mut counts = vec![0usize; j];
        for p in &pool {
            let (bin, aligned) = index.nearest_aligned(p);
            for c in 0..4 {
                sums[bin][c] += aligned[c];
            }
            counts[bin] += 1;
        }
        for b in 0..j {
            if counts[b] > 0 && norm4(sums[b]) > 1e-12 {
                seeds[b] = Quat::from_array(sums[b]).to_fundamental_zone();
            }
        }
    }

    seeds.sort_by(|a, b| {
        a.as_array()
            .iter()
            .zip(b.as_array().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| !o.is_eq())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let cv = nn_distance_cv(&seeds);
    Ok(OrientationGrid { points: seeds, j, seed, cv })
}

fn farthest_point_seeds(pool: &[Quat], j: usize) -> Vec<Quat> {
    // Precompute the 24 symmetry variants of every pool point so each
    // distance update is a row of dot products.
    let group = cubic_group();
    let variants: Vec<[[f64; 4]; 24]> = pool
        .iter()
        .map(|p| {
            let mut vs = [[0.0; 4]; 24];
            for (i, g) in group.iter().enumerate() {
                vs[i] = hprod(p.as_array(), g.as_array());
            }
            vs
        })
        .collect();
    let dist_to = |i: usize, s: &Quat| -> f64 {
        let sa = s.as_array();
        let mut best = 0.0f64;
        for v in &variants[i] {
            let d = dot4(*v, sa).abs();
            if d > best {
                best = d;
            }
        }
        (2.0 - 2.0 * best.min(1.0)).max(0.0).sqrt()
    };

    let mut seeds = Vec::with_capacity(j);
    seeds.push(pool[0]);
    let mut min_dist: Vec<f64> = (0..pool.len()).map(|i| dist_to(i, &pool[0])).collect();
    while seeds.len() < j {
        let mut best_i = 0;
        let mut best_d = -1.0;
        for (i, d) in min_dist.iter().enumerate() {
            if *d > best_d {
                best_d = *d;
                best_i = i;
            }
        }
        let s = pool[best_i];
        seeds.push(s);
        for i in 0..pool.len() {
            let d = dist_to(i, &s);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    seeds
}

/// Coefficient of variation (std/mean) of each point's distance to its nearest
/// other point under the symmetrized metric.
pub fn nn_distance_cv(points: &[Quat]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let index = SymNnIndex::build(points);
    let mut dists = Vec::with_capacity(points.len());
    for p in points {
        // The nearest distinct bin after the point's own bin (distance 0).
        let nn = index.k_nearest(p, 2).expect("at least two bins");
        let d = if nn[0].1 > 1e-9 { nn[0].1 } else { nn[1].1 };
        dists.push(d);
    }
    let n = dists.len() as f64;
    let mean = dists.iter().sum::<f64>() / n;
    let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    if mean > 0.0 {
        var.sqrt() / mean
    } else {
        f64::INFINITY
    }
}

/// Process-wide cache of generated grids and their indexes, keyed by
/// `(j, seed)`. Grid generation is deterministic, so sharing is safe.
pub fn grid_with_index(j: usize, seed: u64) -> Result<(Arc<OrientationGrid>, Arc<SymNnIndex>)> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), (Arc<OrientationGrid>, Arc<SymNnIndex>)>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&(j, seed)) {
        return Ok(hit.clone());
    }
    let grid = Arc::new(sample_uniform_grid(j, seed)?);
    let index = Arc::new(SymNnIndex::build(&grid.points));
    let pair = (grid, index);
    cache.lock().unwrap().insert((j, seed), pair.clone());
    Ok(pair)
}

// ---------------------------------------------------------------------------
// Grid file I/O: header `# J=<J> seed=<seed> cv=<cv>`, then `w x y z` lines.

pub fn write_grid_file(grid: &OrientationGrid, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# J={} seed={} cv={:.16e}\n", grid.j, grid.seed, grid.cv));
    for p in &grid.points {
        out.push_str(&format!("{:.16e} {:.16e} {:.16e} {:.16e}\n", p.w, p.x, p.y, p.z));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_grid_file(path: &Path) -> Result<OrientationGrid> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty grid file"))?
        .map_err(|e| Error::io(path, e))?;
    let (j, seed, cv) = parse_grid_header(&header).ok_or_else(|| {
        Error::parse(path, format!("bad grid header: {header:?}"))
    })?;
    let mut points = Vec::with_capacity(j);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line.split_whitespace().map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(|e| Error::parse(path, format!("bad grid line {line:?}: {e}")))?;
        if vals.len() != 4 {
            return Err(Error::parse(path, format!("expected 4 values per line, got {}", vals.len())));
        }
        points.push(quat_from_file_components(vals[0], vals[1], vals[2], vals[3]));
    }
    if points.len() != j {
        return Err(Error::parse(path, format!("header says J={j} but found {} points", points.len())));
    }
    Ok(OrientationGrid { points, j, seed, cv })
}

/// Builds a quaternion from file components without renormalizing when they
/// are already unit, so that write/read round-trips are bitwise exact.
pub(crate) fn quat_from_file_components(w: f64, x: f64, y: f64, z: f64) -> Quat {
    let n = norm4([w, x, y, z]);
    if (n - 1.0).abs() < 1e-9 {
        let v = canonical([w, x, y, z]);
        Quat { w: v[0], x: v[1], y: v[2], z: v[3] }
    } else {
        Quat::new(w, x, y, z)
    }
}

fn parse_grid_header(header: &str) -> Option<(usize, u64, f64)> {
    let rest = header.strip_prefix('#')?.trim();
    let mut j = None;
    let mut seed = None;
    let mut cv = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("J=") {
            j = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("seed=") {
            seed = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("cv=") {
            cv = v.parse().ok();
        }
    }
    Some((j?, seed?, cv?))
}

/// Saves a grid with `write_grid_file` semantics to any writer (used by the
/// snapshot code).
pub fn write_grid<W: Write>(grid: &OrientationGrid, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "# J={} seed={} cv={:.16e}", grid.j, grid.seed, grid.cv)?;
    for p in &grid.points {
        writeln!(w, "{:.16e} {:.16e} {:.16e} {:.16e}", p.w, p.x, p.y, p.z)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pole figure point export.

/// Stereographic pole-figure point data for a crystal direction family.
/// Returns `[x, y, weight]` rows, projecting symmetry-equivalent directions
/// onto the upper hemisphere.
pub fn pole_figure_points(entries: &[(Quat, f64)], miller: [f64; 3]) -> Vec<[f64; 3]> {
    let n = (miller[0] * miller[0] + miller[1] * miller[1] + miller[2] * miller[2]).sqrt();
    assert!(n > 1e-300, "zero pole direction");
    let d = [miller[0] / n, miller[1] / n, miller[2] / n];
    // Orbit of the direction under the 24 rotations, deduplicated up to sign.
    let mut orbit: Vec<[f64; 3]> = Vec::new();
    for g in cubic_group() {
        let u = g.rotate(d);
        let dup = orbit.iter().any(|o| {
            let dp = (o[0] * u[0] + o[1] * u[1] + o[2] * u[2]).abs();
            dp > 1.0 - 1e-9
        });
        if !dup {
            orbit.push(u);
        }
    }
    let mut out = Vec::with_capacity(entries.len() * orbit.len());
    let w_scale = 1.0 / orbit.len() as f64;
    for (q, vol) in entries {
        let m = q.to_matrix();
        for dir in &orbit {
            let u = m * nalgebra::Vector3::new(dir[0], dir[1], dir[2]);
            let u = if u[2] < 0.0 { -u } else { u };
            let denom = 1.0 + u[2];
            out.push([u[0] / denom, u[1] / denom, vol * w_scale]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha20Rng {
        rand_chacha::ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn metric_examples() {
        let id = Quat::identity();
        assert_eq!(quat_metric(&id, &id), 0.0);
        // 180-degree rotation about z vs identity.
        let qz = Quat::new(0.0, 0.0, 0.0, 1.0);
        assert!((quat_metric(&id, &qz) - std::f64::consts::SQRT_2).abs() < 1e-12);
        // Sign invariance.
        let q = Quat::from_axis_angle([0.3, -1.0, 0.2], 0.7);
        assert!(quat_metric(&q, &Quat::new(-q.w, -q.x, -q.y, -q.z)) < 1e-12);
    }

    #[test]
    fn cubic_group_is_a_group() {
        let g = cubic_group();
        assert_eq!(g.len(), 24);
        for (i, a) in g.iter().enumerate() {
            for (j, b) in g.iter().enumerate() {
                if i != j {
                    assert!(quat_metric(a, b) > 0.1, "elements {i} and {j} coincide");
                }
                let prod = a.compose(b);
                let closed = g.iter().any(|c| quat_metric(&prod, c) < 1e-9);
                assert!(closed, "product of {i} and {j} left the group");
            }
            let inv = a.inverse();
            assert!(g.iter().any(|c| quat_metric(&inv, c) < 1e-9));
        }
    }

    #[test]
    fn compose_matches_matrix_product() {
        let mut r = rng(3);
        for _ in 0..50 {
            let a = haar_quat(&mut r);
            let b = haar_quat(&mut r);
            let lhs = a.compose(&b).to_matrix();
            let rhs = a.to_matrix() * b.to_matrix();
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn matrix_round_trip() {
        let mut r = rng(4);
        for _ in 0..200 {
            let q = haar_quat(&mut r);
            let back = Quat::from_matrix(&q.to_matrix());
            assert!(quat_metric(&q, &back) < 1e-12);
        }
    }

    #[test]
    fn fundamental_zone_is_idempotent_and_canonical() {
        let mut r = rng(5);
        for _ in 0..200 {
            let q = haar_quat(&mut r);
            let f = q.to_fundamental_zone();
            let f2 = f.to_fundamental_zone();
            assert_eq!(f.as_array(), f2.as_array());
            assert!(cubic_metric(&q, &f) < 1e-12);
            // Maximal w among all equivalents.
            for g in cubic_group() {
                let v = canonical(hprod(q.as_array(), g.as_array()));
                assert!(v[0] <= f.w + 1e-12);
            }
            // Equivalent inputs reduce to the same representative.
            let g = cubic_group()[7];
            let f3 = q.compose(&g).to_fundamental_zone();
            assert!(quat_metric(&f, &f3) < 1e-12);
        }
    }

    #[test]
    fn cubic_metric_symmetry_invariance() {
        let mut r = rng(6);
        for _ in 0..100 {
            let a = haar_quat(&mut r);
            let b = haar_quat(&mut r);
            let d = cubic_metric(&a, &b);
            assert!((cubic_metric(&b, &a) - d).abs() < 1e-12);
            for g in [cubic_group()[3], cubic_group()[11], cubic_group()[20]] {
                assert!((cubic_metric(&a.compose(&g), &b) - d).abs() < 1e-12);
                assert!((cubic_metric(&a, &b.compose(&g)) - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let grid = sample_uniform_grid(64, 11).unwrap();
        let index = SymNnIndex::build(&grid.points);
        let mut r = rng(12);
        for _ in 0..300 {
            let q = haar_quat(&mut r);
            for k in [1usize, 3, 10] {
                let fast = index.k_nearest(&q, k).unwrap();
                let brute = k_nearest_brute(&grid.points, &q, k);
                assert_eq!(fast.len(), brute.len());
                for (f, b) in fast.iter().zip(brute.iter()) {
                    assert_eq!(f.0, b.0);
                    assert!((f.1 - b.1).abs() < 1e-10);
                }
            }
            let (bin, d) = index.nearest(&q);
            let brute = k_nearest_brute(&grid.points, &q, 1);
            assert_eq!(bin, brute[0].0);
            assert!((d - brute[0].1).abs() < 1e-10);
        }
    }

    #[test]
    fn nearest_aligned_consistency() {
        let grid = sample_uniform_grid(32, 13).unwrap();
        let index = SymNnIndex::build(&grid.points);
        let mut r = rng(14);
        for _ in 0..100 {
            let q = haar_quat(&mut r);
            let (bin, aligned) = index.nearest_aligned(&q);
            let center = grid.points[bin].as_array();
            let mut d2 = 0.0;
            for c in 0..4 {
                let d = aligned[c] - center[c];
                d2 += d * d;
            }
            assert!((d2.sqrt() - cubic_metric(&q, &grid.points[bin])).abs() < 1e-10);
        }
    }

    #[test]
    fn grid_determinism_and_size_errors() {
        let a = sample_uniform_grid(24, 5).unwrap();
        let b = sample_uniform_grid(24, 5).unwrap();
        assert_eq!(a.points.len(), 24);
        for (p, q) in a.points.iter().zip(b.points.iter()) {
            assert_eq!(p.as_array(), q.as_array());
        }
        assert!(sample_uniform_grid(0, 5).is_err());
        let c = sample_uniform_grid(24, 6).unwrap();
        let same = a
            .points
            .iter()
            .zip(c.points.iter())
            .all(|(p, q)| quat_metric(p, q) < 1e-12);
        assert!(!same, "different seeds should give different grids");
    }

    #[test]
    fn grid_file_round_trip() {
        let grid = sample_uniform_grid(16, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.txt");
        write_grid_file(&grid, &path).unwrap();
        let back = read_grid_file(&path).unwrap();
        assert_eq!(back.j, 16);
        assert_eq!(back.seed, 9);
        assert_eq!(back.cv, grid.cv);
        for (p, q) in grid.points.iter().zip(back.points.iter()) {
            assert_eq!(p.as_array(), q.as_array());
        }
    }

    #[test]
    fn pole_figure_identity_cube() {
        let pts = pole_figure_points(&[(Quat::identity(), 1.0)], [1.0, 0.0, 0.0]);
        // Orbit of <100> up to sign is {e1, e2, e3}.
        assert_eq!(pts.len(), 3);
        for p in &pts {
            assert!((p[2] - 1.0 / 3.0).abs() < 1e-12);
        }
        let has = |x: f64, y: f64| pts.iter().any(|p| (p[0] - x).abs() < 1e-9 && (p[1] - y).abs() < 1e-9);
        assert!(has(0.0, 0.0));
        assert!(has(1.0, 0.0));
        assert!(has(0.0, 1.0));
    }
}
