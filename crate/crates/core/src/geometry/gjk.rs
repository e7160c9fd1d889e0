//! GJK distance between convex bodies, with EPA fallback for overlap.
//!
//! Everything works on the configuration-space obstacle M = A ⊖ B, sampled
//! through `support_A(v) - support_B(-v)`. The closest point of a simplex is
//! found by checking every face of it, which is cheap for at most four
//! vertices and does not suffer the sign flips of incremental Johnson
//! recursions.

use super::body::ConvexBody;
use super::epa;
use super::Vec3;
use crate::error::{Error, Result};

pub const GJK_MAX_ITERATIONS: usize = 128;
pub const GJK_RELATIVE_TOLERANCE: f64 = 1e-14;
const MAX_RESEEDS: usize = 4;

/// Signed distance between two convex bodies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceResult {
    /// Separation when positive, minus the penetration depth when negative.
    pub signed_distance: f64,
    pub witness_a: Vec3,
    pub witness_b: Vec3,
    /// Unit vector from body A into body B. Translating B along it increases
    /// the signed distance.
    pub normal: Vec3,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SupportVertex {
    pub w: Vec3,
    pub a: Vec3,
    pub b: Vec3,
}

pub(crate) fn support_vertex(a: &ConvexBody, b: &ConvexBody, dir: &Vec3) -> SupportVertex {
    let sa = a.support_unchecked(dir);
    let sb = b.support_unchecked(&-dir);
    SupportVertex { w: sa - sb, a: sa, b: sb }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Simplex {
    pub verts: [SupportVertex; 4],
    pub len: usize,
}

impl Simplex {
    fn push(&mut self, v: SupportVertex) {
        self.verts[self.len] = v;
        self.len += 1;
    }

    pub fn vertices(&self) -> &[SupportVertex] {
        &self.verts[..self.len]
    }
}

/// Closest point to the origin on the hull of `pts`, as barycentric weights.
/// Returns (point, weights, subset mask).
fn closest_on_hull(pts: &[SupportVertex]) -> (Vec3, [f64; 4], u8) {
    let n = pts.len();
    let mut best = (Vec3::zeros(), [0.0; 4], 0u8);
    let mut best_norm = f64::INFINITY;
    for mask in 1u8..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let Some(lambda) = affine_projection(pts, &idx) else {
            continue;
        };
        if lambda.iter().take(idx.len()).any(|l| *l < 0.0) {
            continue;
        }
        let mut p = Vec3::zeros();
        let mut weights = [0.0; 4];
        for (k, &i) in idx.iter().enumerate() {
            p += pts[i].w * lambda[k];
            weights[i] = lambda[k];
        }
        let norm = p.norm_squared();
        // prefer fewer vertices on ties so the simplex stays small
        if norm < best_norm * (1.0 - 1e-12) || (norm <= best_norm && mask.count_ones() < best.2.count_ones()) {
            best_norm = norm;
            best = (p, weights, mask);
        }
    }
    best
}

/// Barycentric coordinates of the origin's projection onto the affine hull of
/// the chosen points, or None when they are affinely dependent.
fn affine_projection(pts: &[SupportVertex], idx: &[usize]) -> Option<[f64; 4]> {
    let k = idx.len();
    let y0 = pts[idx[0]].w;
    if k == 1 {
        return Some([1.0, 0.0, 0.0, 0.0]);
    }
    let d: Vec<Vec3> = idx[1..].iter().map(|&i| pts[i].w - y0).collect();
    let m = k - 1;
    let mut g = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    let mut scale = 0.0f64;
    for r in 0..m {
        for c in 0..m {
            g[r][c] = d[r].dot(&d[c]);
        }
        rhs[r] = -d[r].dot(&y0);
        scale = scale.max(g[r][r]);
    }
    let mu = solve_small(&g, &rhs, m, scale)?;
    let mut lambda = [0.0; 4];
    let mut sum = 0.0;
    for r in 0..m {
        lambda[r + 1] = mu[r];
        sum += mu[r];
    }
    lambda[0] = 1.0 - sum;
    Some(lambda)
}

fn solve_small(g: &[[f64; 3]; 3], rhs: &[f64; 3], m: usize, scale: f64) -> Option<[f64; 3]> {
    let tiny = 1e-14 * scale.powi(m as i32);
    match m {
        1 => {
            if g[0][0] <= tiny || g[0][0] == 0.0 {
                return None;
            }
            Some([rhs[0] / g[0][0], 0.0, 0.0])
        }
        2 => {
            let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
            if det.abs() <= tiny || det == 0.0 {
                return None;
            }
            Some([
                (rhs[0] * g[1][1] - g[0][1] * rhs[1]) / det,
                (g[0][0] * rhs[1] - rhs[0] * g[1][0]) / det,
                0.0,
            ])
        }
        _ => {
            let a = nalgebra::Matrix3::new(
                g[0][0], g[0][1], g[0][2], g[1][0], g[1][1], g[1][2], g[2][0], g[2][1], g[2][2],
            );
            let det = a.determinant();
            if det.abs() <= tiny || det == 0.0 {
                return None;
            }
            let x = a.try_inverse()? * Vec3::new(rhs[0], rhs[1], rhs[2]);
            Some([x.x, x.y, x.z])
        }
    }
}

/// Residual |v| (relative to the body scale) treated as touching the origin
/// once GJK can make no further progress.
const STALL_OVERLAP: f64 = 1e-9;
/// Below this |v| (relative to scale) support directions are too noisy to
/// tighten the bracket further; a stalled run is accepted as converged.
const STALL_RESOLUTION: f64 = 1e-7;

/// Decides a run that can make no further progress: Ok(true) for overlap,
/// Ok(false) for an accepted separation, Err(gap) for a genuine failure.
/// A flat simplex around the origin (planar overlap) cannot grow to a
/// tetrahedron, so rounding leaves a tiny residual v instead of 0.
fn stalled(v_norm: f64, gap: f64, scale: f64, tolerance: f64) -> std::result::Result<bool, f64> {
    if v_norm <= STALL_OVERLAP * scale {
        Ok(true)
    } else if gap <= 1e-6 * v_norm.max(tolerance) || v_norm.min(gap) <= STALL_RESOLUTION * scale {
        Ok(false)
    } else {
        Err(gap)
    }
}

pub(crate) enum GjkOutcome {
    Separated {
        v: Vec3,
        witness_a: Vec3,
        witness_b: Vec3,
    },
    Overlap(Simplex),
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Distance,
    /// Stop as soon as the separation is known to exceed the tolerance.
    Intersect,
}

/// Deterministic perturbation sequence for reseeding the initial direction.
fn seed_direction(a: &ConvexBody, b: &ConvexBody, attempt: usize) -> Vec3 {
    const PERTURB: [[f64; 3]; MAX_RESEEDS + 1] = [
        [0.0, 0.0, 0.0],
        [0.61, -0.37, 0.23],
        [-0.29, 0.83, -0.41],
        [0.47, 0.19, -0.77],
        [-0.71, -0.53, 0.31],
    ];
    let mut d = a.interior_point() - b.interior_point();
    let scale = d.norm().max(1.0);
    let p = PERTURB[attempt];
    d += Vec3::new(p[0], p[1], p[2]) * (if attempt == 0 { 0.0 } else { 0.1 * scale });
    if d.norm_squared() < 1e-24 {
        d = Vec3::new(1.0, 0.3, 0.1);
    }
    d
}

fn run_gjk(a: &ConvexBody, b: &ConvexBody, tolerance: f64, mode: Mode) -> Result<GjkOutcome> {
    let mut last_gap = f64::NAN;
    for attempt in 0..=MAX_RESEEDS {
        match gjk_attempt(a, b, tolerance, mode, seed_direction(a, b, attempt)) {
            Ok(out) => return Ok(out),
            Err(gap) => last_gap = gap,
        }
    }
    Err(Error::numerical(
        "gjk",
        format!(
            "no convergence after {} reseeds of {GJK_MAX_ITERATIONS} iterations (gap {last_gap:.3e})",
            MAX_RESEEDS + 1
        ),
    ))
}

/// One GJK run; Err carries the remaining duality gap on failure.
fn gjk_attempt(
    a: &ConvexBody,
    b: &ConvexBody,
    tolerance: f64,
    mode: Mode,
    init: Vec3,
) -> std::result::Result<GjkOutcome, f64> {
    let mut simplex = Simplex::default();
    let first = support_vertex(a, b, &-init);
    let mut v = first.w;
    simplex.push(first);
    let mut weights = [1.0, 0.0, 0.0, 0.0];
    let mut scale = v.norm().max(1e-3);
    let mut gap = f64::INFINITY;
    let mut best_lower = f64::NEG_INFINITY;

    let separated = |s: &Simplex, w: &[f64; 4], v: Vec3| {
        let mut wa = Vec3::zeros();
        let mut wb = Vec3::zeros();
        for (vert, l) in s.vertices().iter().zip(w.iter()) {
            wa += vert.a * *l;
            wb += vert.b * *l;
        }
        GjkOutcome::Separated {
            v,
            witness_a: wa,
            witness_b: wb,
        }
    };

    for _ in 0..GJK_MAX_ITERATIONS {
        let v_norm_sq = v.norm_squared();
        if v_norm_sq <= (1e-13 * scale).powi(2) {
            return Ok(GjkOutcome::Overlap(simplex));
        }
        let vert = support_vertex(a, b, &-v);
        scale = scale.max(vert.w.norm());
        let v_norm = v_norm_sq.sqrt();
        let lower = v.dot(&vert.w) / v_norm;
        if mode == Mode::Intersect && lower > tolerance {
            return Ok(separated(&simplex, &weights, v));
        }
        best_lower = best_lower.max(lower);
        gap = v_norm - best_lower;
        if gap <= GJK_RELATIVE_TOLERANCE * v_norm || gap <= tolerance.min(1e-3 * v_norm) {
            return Ok(separated(&simplex, &weights, v));
        }
        if simplex
            .vertices()
            .iter()
            .any(|s| (s.w - vert.w).norm_squared() <= (1e-14 * scale).powi(2))
        {
            // no new support point: converged as far as arithmetic allows
            return stalled(v_norm, gap, scale, tolerance).map(|overlap| {
                if overlap {
                    GjkOutcome::Overlap(simplex)
                } else {
                    separated(&simplex, &weights, v)
                }
            });
        }
        simplex.push(vert);
        let (p, w, mask) = closest_on_hull(simplex.vertices());
        // compact to the supporting subset
        let mut next = Simplex::default();
        let mut next_w = [0.0; 4];
        for i in 0..simplex.len {
            if mask & (1 << i) != 0 {
                next_w[next.len] = w[i];
                next.push(simplex.verts[i]);
            }
        }
        let improved = p.norm_squared() < v_norm_sq * (1.0 - 1e-15);
        simplex = next;
        weights = next_w;
        if simplex.len == 4 {
            return Ok(GjkOutcome::Overlap(simplex));
        }
        if !improved {
            let v_keep = if p.norm_squared() < v_norm_sq { p } else { v };
            return stalled(v_norm, gap, scale, tolerance).map(|overlap| {
                if overlap {
                    GjkOutcome::Overlap(simplex)
                } else {
                    separated(&simplex, &weights, v_keep)
                }
            });
        }
        v = p;
    }
    let v_norm = v.norm();
    match stalled(v_norm, gap, scale, tolerance) {
        Ok(false) => Ok(separated(&simplex, &weights, v)),
        // out of iterations but provably apart
        _ if best_lower > 0.0 && gap <= 1e-4 * v_norm => Ok(separated(&simplex, &weights, v)),
        _ => Err(gap),
    }
}

fn check_tolerance(tolerance: f64) -> Result<()> {
    if tolerance.is_finite() && tolerance > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "distance tolerance must be positive, got {tolerance}"
        )))
    }
}

fn signed_distance(a: &ConvexBody, b: &ConvexBody, tolerance: f64, strict: bool) -> Result<DistanceResult> {
    check_tolerance(tolerance)?;
    match run_gjk(a, b, tolerance, Mode::Distance)? {
        GjkOutcome::Separated {
            v,
            witness_a,
            witness_b,
        } => {
            let d = v.norm();
            Ok(DistanceResult {
                signed_distance: d,
                witness_a,
                witness_b,
                normal: -v / d,
            })
        }
        GjkOutcome::Overlap(simplex) => epa::penetration(a, b, &simplex, tolerance, strict),
    }
}

/// Signed distance with witness points and contact normal.
pub fn distance(a: &ConvexBody, b: &ConvexBody, tolerance: f64) -> Result<DistanceResult> {
    signed_distance(a, b, tolerance, true)
}

/// As [`distance`], but deep contact between curved bodies may settle for
/// EPA's best estimate once the face cap is reached.
pub(crate) fn distance_estimate(a: &ConvexBody, b: &ConvexBody, tolerance: f64) -> Result<DistanceResult> {
    signed_distance(a, b, tolerance, false)
}

/// True iff the signed distance is at most `tolerance`.
pub fn intersects(a: &ConvexBody, b: &ConvexBody, tolerance: f64) -> Result<bool> {
    check_tolerance(tolerance)?;
    Ok(match run_gjk(a, b, tolerance, Mode::Intersect)? {
        GjkOutcome::Separated { v, .. } => v.norm() <= tolerance,
        GjkOutcome::Overlap(_) => true,
    })
}
