//! Expanding polytope algorithm for penetration depth.
//!
//! Planar problems (every body confined to z = 0) run a polygon expansion;
//! a 3D polytope built on a flat set would have no volume to expand.

use super::body::ConvexBody;
use super::gjk::{support_vertex, DistanceResult, Simplex, SupportVertex};
use super::Vec3;
use crate::error::{Error, Result};

pub const EPA_FACE_TOLERANCE: f64 = 1e-9;
pub const EPA_MAX_FACES: usize = 255;

/// With `strict` unset, hitting the face cap returns the best face found so
/// far: its depth undershoots the true one by at most the reported gap.
pub(crate) fn penetration(
    a: &ConvexBody,
    b: &ConvexBody,
    simplex: &Simplex,
    tolerance: f64,
    strict: bool,
) -> Result<DistanceResult> {
    let up = support_vertex(a, b, &Vec3::z()).w.z;
    let down = support_vertex(a, b, &-Vec3::z()).w.z;
    let scale = simplex
        .vertices()
        .iter()
        .map(|v| v.w.norm())
        .fold(1.0, f64::max);
    if up.abs() <= 1e-12 * scale && down.abs() <= 1e-12 * scale {
        planar(a, b, simplex, tolerance, strict)
    } else {
        spatial(a, b, simplex, tolerance, strict)
    }
}

fn finish(depth: f64, normal: Vec3, a: Vec3, b: Vec3) -> DistanceResult {
    DistanceResult {
        signed_distance: -depth.max(0.0),
        witness_a: a,
        witness_b: b,
        normal,
    }
}

fn convergence_tolerance(tolerance: f64) -> f64 {
    tolerance.max(EPA_FACE_TOLERANCE)
}

// ---------------------------------------------------------------------------
// planar

fn planar(a: &ConvexBody, b: &ConvexBody, simplex: &Simplex, tolerance: f64, strict: bool) -> Result<DistanceResult> {
    let tol = convergence_tolerance(tolerance);
    let mut pts: Vec<SupportVertex> = simplex.vertices().to_vec();
    for k in 0..8 {
        let t = k as f64 * std::f64::consts::FRAC_PI_4;
        pts.push(support_vertex(a, b, &Vec3::new(t.cos(), t.sin(), 0.0)));
    }
    let mut poly = hull_2d(pts);
    if poly.len() < 3 {
        // M is a segment or a point: zero depth
        let n = if poly.len() == 2 {
            let d = poly[1].w - poly[0].w;
            Vec3::new(-d.y, d.x, 0.0).normalize()
        } else {
            Vec3::x()
        };
        let v = poly[0];
        return Ok(finish(0.0, n, v.a, v.b));
    }

    loop {
        let m = poly.len();
        let mut best = (0usize, f64::INFINITY, Vec3::zeros());
        for i in 0..m {
            let p = poly[i].w;
            let q = poly[(i + 1) % m].w;
            let e = q - p;
            // counter-clockwise polygon: outward normal is (e.y, -e.x)
            let len = e.norm();
            if len == 0.0 {
                continue;
            }
            let n = Vec3::new(e.y, -e.x, 0.0) / len;
            let d = n.dot(&p);
            if d < best.1 {
                best = (i, d, n);
            }
        }
        let (i, d, n) = best;
        let w = support_vertex(a, b, &n);
        let growth = n.dot(&w.w) - d;
        if growth <= tol || poly.len() >= EPA_MAX_FACES {
            if strict && growth > tol && growth > 1e-6 * d.max(1.0) {
                return Err(Error::numerical(
                    "epa",
                    format!("edge cap {EPA_MAX_FACES} reached with gap {growth:.3e}"),
                ));
            }
            let p = poly[i];
            let q = poly[(i + 1) % m];
            let e = q.w - p.w;
            let t = (-p.w.dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
            let wa = p.a + (q.a - p.a) * t;
            let wb = p.b + (q.b - p.b) * t;
            return Ok(finish(d, n, wa, wb));
        }
        poly.insert(i + 1, w);
    }
}

/// Counter-clockwise convex hull in the xy-plane (monotone chain).
fn hull_2d(mut pts: Vec<SupportVertex>) -> Vec<SupportVertex> {
    pts.sort_by(|p, q| {
        p.w.x
            .partial_cmp(&q.w.x)
            .unwrap()
            .then(p.w.y.partial_cmp(&q.w.y).unwrap())
    });
    pts.dedup_by(|p, q| (p.w - q.w).norm_squared() < 1e-28);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &SupportVertex, p: &SupportVertex, q: &SupportVertex| {
        (p.w.x - o.w.x) * (q.w.y - o.w.y) - (p.w.y - o.w.y) * (q.w.x - o.w.x)
    };
    let mut lower: Vec<SupportVertex> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<SupportVertex> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

// ---------------------------------------------------------------------------
// spatial

#[derive(Debug, Clone, Copy)]
struct Face {
    v: [usize; 3],
    n: Vec3,
    d: f64,
}

fn make_face(verts: &[SupportVertex], i: usize, j: usize, k: usize, interior: &Vec3) -> Option<Face> {
    let (p, q, r) = (verts[i].w, verts[j].w, verts[k].w);
    let mut n = (q - p).cross(&(r - p));
    let len = n.norm();
    if len <= 1e-14 * (q - p).norm().max((r - p).norm()).powi(2).max(1e-300) {
        return None;
    }
    n /= len;
    let mut v = [i, j, k];
    if n.dot(&(p - interior)) < 0.0 {
        n = -n;
        v.swap(1, 2);
    }
    Some(Face { v, n, d: n.dot(&p) })
}

fn initial_tetrahedron(a: &ConvexBody, b: &ConvexBody, simplex: &Simplex) -> Option<Vec<SupportVertex>> {
    let mut verts: Vec<SupportVertex> = simplex.vertices().to_vec();
    let scale = verts.iter().map(|v| v.w.norm()).fold(1e-6, f64::max);
    let eps = 1e-10 * scale;
    let axes = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z(), -Vec3::z()];

    if verts.len() == 1 {
        for d in &axes {
            let w = support_vertex(a, b, d);
            if (w.w - verts[0].w).norm() > eps {
                verts.push(w);
                break;
            }
        }
        if verts.len() < 2 {
            return None;
        }
    }
    if verts.len() == 2 {
        let d = (verts[1].w - verts[0].w).normalize();
        let helper = axes
            .iter()
            .step_by(2)
            .min_by(|p, q| d.dot(p).abs().partial_cmp(&d.dot(q).abs()).unwrap())
            .unwrap();
        let e1 = d.cross(helper).normalize();
        let e2 = d.cross(&e1);
        for k in 0..6 {
            let t = k as f64 * std::f64::consts::FRAC_PI_3;
            let dir = e1 * t.cos() + e2 * t.sin();
            let w = support_vertex(a, b, &dir);
            let off = w.w - verts[0].w;
            if (off - d * off.dot(&d)).norm() > eps {
                verts.push(w);
                break;
            }
        }
        if verts.len() < 3 {
            return None;
        }
    }
    if verts.len() == 3 {
        let n = (verts[1].w - verts[0].w).cross(&(verts[2].w - verts[0].w));
        if n.norm() == 0.0 {
            return None;
        }
        let n = n.normalize();
        let up = support_vertex(a, b, &n);
        let down = support_vertex(a, b, &-n);
        let hu = n.dot(&(up.w - verts[0].w));
        let hd = -n.dot(&(down.w - verts[0].w));
        let pick = if hu >= hd { (up, hu) } else { (down, hd) };
        if pick.1 <= eps {
            return None;
        }
        verts.push(pick.0);
    }
    Some(verts)
}

fn spatial(a: &ConvexBody, b: &ConvexBody, simplex: &Simplex, tolerance: f64, strict: bool) -> Result<DistanceResult> {
    let tol = convergence_tolerance(tolerance);
    let Some(mut verts) = initial_tetrahedron(a, b, simplex) else {
        // flat configuration-space obstacle in some plane: touching contact
        let v = simplex.vertices()[0];
        let n = if simplex.len >= 3 {
            let s = simplex.vertices();
            (s[1].w - s[0].w).cross(&(s[2].w - s[0].w)).normalize()
        } else {
            Vec3::x()
        };
        return Ok(finish(0.0, n, v.a, v.b));
    };
    let interior = verts.iter().map(|v| v.w).sum::<Vec3>() / 4.0;
    let mut faces: Vec<Face> = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]]
        .iter()
        .filter_map(|f| make_face(&verts, f[0], f[1], f[2], &interior))
        .collect();
    if faces.len() < 4 {
        return Err(Error::numerical("epa", "degenerate initial tetrahedron"));
    }

    loop {
        let (best_idx, best) = faces
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.d.partial_cmp(&y.1.d).unwrap())
            .map(|(i, f)| (i, *f))
            .unwrap();
        let w = support_vertex(a, b, &best.n);
        let growth = best.n.dot(&w.w) - best.d;
        if growth <= tol || faces.len() >= EPA_MAX_FACES {
            if strict && growth > tol && growth > 1e-6 * best.d.max(1.0) {
                return Err(Error::numerical(
                    "epa",
                    format!("face cap {EPA_MAX_FACES} reached with gap {growth:.3e}"),
                ));
            }
            return Ok(face_result(&verts, &best));
        }

        let new_index = verts.len();
        verts.push(w);
        let mut horizon: Vec<(usize, usize)> = Vec::new();
        let mut kept: Vec<Face> = Vec::with_capacity(faces.len() + 4);
        for (fi, f) in faces.iter().enumerate() {
            let visible = fi == best_idx || f.n.dot(&(w.w - verts[f.v[0]].w)) > 1e-14 * (1.0 + w.w.norm());
            if visible {
                for e in [(f.v[0], f.v[1]), (f.v[1], f.v[2]), (f.v[2], f.v[0])] {
                    if let Some(pos) = horizon.iter().position(|&(p, q)| p == e.1 && q == e.0) {
                        horizon.swap_remove(pos);
                    } else {
                        horizon.push(e);
                    }
                }
            } else {
                kept.push(*f);
            }
        }
        for (p, q) in horizon {
            if let Some(f) = make_face(&verts, p, q, new_index, &interior) {
                kept.push(f);
            }
        }
        if kept.is_empty() {
            return Err(Error::numerical("epa", "polytope collapsed during expansion"));
        }
        faces = kept;
    }
}

fn face_result(verts: &[SupportVertex], f: &Face) -> DistanceResult {
    let (p, q, r) = (verts[f.v[0]], verts[f.v[1]], verts[f.v[2]]);
    let target = f.n * f.d;
    // barycentric coordinates of the origin's projection on the face
    let v0 = q.w - p.w;
    let v1 = r.w - p.w;
    let v2 = target - p.w;
    let d00 = v0.dot(&v0);
    let d01 = v0.dot(&v1);
    let d11 = v1.dot(&v1);
    let d20 = v2.dot(&v0);
    let d21 = v2.dot(&v1);
    let denom = d00 * d11 - d01 * d01;
    let (l1, l2) = if denom.abs() > 0.0 {
        ((d11 * d20 - d01 * d21) / denom, (d00 * d21 - d01 * d20) / denom)
    } else {
        (0.0, 0.0)
    };
    let l0 = 1.0 - l1 - l2;
    let wa = p.a * l0 + q.a * l1 + r.a * l2;
    let wb = p.b * l0 + q.b * l1 + r.b * l2;
    finish(f.d, f.n, wa, wb)
}
