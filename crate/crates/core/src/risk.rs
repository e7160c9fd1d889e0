//! ε-shadows, two-stage risk certification and the risk gradient.

use nalgebra::{DVector, Matrix3, Matrix3xX};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{distance, distance_estimate, ConvexBody, Covariance, DistanceResult, Ellipsoid, HalfEllipsoid, Vec3};
use crate::kinematics::{jacobian_from_chain, ChainState, JointState, PosedShape, RobotModel};
use crate::stats::{self, Dof};

pub const DEFAULT_EPS_TOL: f64 = 1e-6;

/// Absolute GJK tolerance (m) used when locating tangency.
const CONTACT_TOLERANCE: f64 = 1e-10;
/// Relative width of the final bracket on the squared radius.
const RADIUS_RESOLUTION: f64 = 1e-10;
const MAX_SEARCH_STEPS: usize = 200;
/// Slack, relative to the radius, allowed when checking that signed distance
/// falls as the shadow grows.
const MONOTONICITY_SLACK: f64 = 1e-6;

/// Nominal convex shape whose position carries additive Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainObstacle {
    pub name: String,
    pub nominal: ConvexBody,
    pub covariance: Covariance,
}

impl UncertainObstacle {
    pub fn new(name: impl Into<String>, nominal: ConvexBody, covariance: Covariance) -> Self {
        Self {
            name: name.into(),
            nominal,
            covariance,
        }
    }

    pub fn dim(&self) -> Dof {
        self.covariance.dim()
    }

    /// Squared Mahalanobis radius enclosing probability `1 − eps`.
    pub fn squared_radius(&self, eps: f64) -> Result<f64> {
        check_eps(eps)?;
        stats::chi2_isf(eps, self.dim())
    }

    pub fn shadow_with_radius(&self, squared_radius: f64) -> Result<ConvexBody> {
        let e = Ellipsoid::new(self.covariance, squared_radius)?;
        Ok(ConvexBody::minkowski(self.nominal.clone(), ConvexBody::from(e)))
    }

    pub fn half_shadow_with_radius(&self, squared_radius: f64, normal: Vec3) -> Result<ConvexBody> {
        let h = HalfEllipsoid::new(Ellipsoid::new(self.covariance, squared_radius)?, normal)?;
        Ok(ConvexBody::minkowski(self.nominal.clone(), ConvexBody::from(h)))
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("eps must lie in (0, 1), got {eps}")))
    }
}

fn check_eps_tol(eps_tol: f64) -> Result<()> {
    if eps_tol > 0.0 && eps_tol < 0.5 {
        Ok(())
    } else {
        Err(Error::domain(format!("epsTol must lie in (0, 0.5), got {eps_tol}")))
    }
}

/// Nominal geometry grown by the ellipsoid holding probability `1 − eps`.
pub fn shadow(obstacle: &UncertainObstacle, eps: f64) -> Result<ConvexBody> {
    obstacle.shadow_with_radius(obstacle.squared_radius(eps)?)
}

/// Nominal geometry grown by the half of that ellipsoid on the `normal` side.
pub fn half_shadow(obstacle: &UncertainObstacle, eps: f64, normal: &Vec3) -> Result<ConvexBody> {
    obstacle.half_shadow_with_radius(obstacle.squared_radius(eps)?, *normal)
}

/// Where a shadow touches the robot when the search stops.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowContact {
    pub link: usize,
    /// Witness on the robot surface, world frame.
    pub point: Vec3,
    /// Unit normal from the robot into the shadow.
    pub normal: Vec3,
    /// Ellipsoid-center-to-contact vector of the touching (half-)ellipsoid.
    pub x: Vec3,
    pub squared_radius: f64,
    /// dε/dp: risk sensitivity to motion of the contact point (1/m).
    pub sensitivity: Vec3,
    /// False when the search hit its floor without any contact.
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskCertificate {
    pub eps1: f64,
    pub eps2: f64,
    pub eps_prime: f64,
    pub saturated: bool,
    pub dim: Dof,
    /// Contact of the full shadow; its normal orients the half shadow.
    pub first: ShadowContact,
    /// Contact of the half shadow.
    pub second: ShadowContact,
}

impl RiskCertificate {
    pub fn contact_normal(&self) -> &Vec3 {
        &self.first.normal
    }

    pub fn link_index(&self) -> usize {
        self.first.link
    }

    pub fn contact_point(&self) -> &Vec3 {
        &self.first.point
    }
}

/// Affine model ε(θ) ≈ ε₀ + ∇ε·(θ − θ₀).
#[derive(Debug, Clone, PartialEq)]
pub struct RiskLinearization {
    pub eps0: f64,
    pub gradient: DVector<f64>,
    pub anchor: JointState,
}

impl RiskLinearization {
    pub fn evaluate(&self, theta: &JointState) -> f64 {
        self.eps0 + self.gradient.dot(&(theta - &self.anchor))
    }
}

#[derive(Debug, Clone)]
pub struct SceneRisk {
    pub certificates: Vec<RiskCertificate>,
    pub total: f64,
}

// Certification runs in whitened coordinates u = W d, where WᵀW = Σ⁻¹.
// There the ellipsoid of squared radius c is a ball of radius s = √c, so the
// full shadow touches a convex robot shape R exactly when s equals the
// distance between W·R and W·O.

/// Robot shapes and nominal geometry mapped into whitened coordinates.
struct Whitened {
    shapes: Vec<ConvexBody>,
    links: Vec<usize>,
    nominal: ConvexBody,
    whitening: Matrix3<f64>,
    coloring: Matrix3<f64>,
    unit: Covariance,
}

impl Whitened {
    fn new(shapes: &[PosedShape], obstacle: &UncertainObstacle) -> Result<Self> {
        let cov = &obstacle.covariance;
        let w = *cov.whitening();
        Ok(Self {
            shapes: shapes
                .iter()
                .map(|s| ConvexBody::linear(w, s.body.clone()))
                .collect::<Result<_>>()?,
            links: shapes.iter().map(|s| s.link).collect(),
            nominal: ConvexBody::linear(w, obstacle.nominal.clone())?,
            whitening: w,
            coloring: cov.coloring(),
            unit: Covariance::isotropic(cov.dim().get(), 1.0)?,
        })
    }

    fn half_ball(&self, radius: f64, normal: Vec3) -> Result<HalfEllipsoid> {
        HalfEllipsoid::new(Ellipsoid::new(self.unit, radius * radius)?, normal)
    }

    fn half_shadow(&self, radius: f64, normal: Vec3) -> Result<ConvexBody> {
        Ok(ConvexBody::minkowski(
            self.nominal.clone(),
            ConvexBody::from(self.half_ball(radius, normal)?),
        ))
    }

    /// World-frame unit normal from a whitened one (normals map by Wᵀ).
    fn world_normal(&self, nu: &Vec3) -> Vec3 {
        (self.whitening.transpose() * nu).normalize()
    }
}

/// Minimum signed distance over a subset of shapes. Ties go to the earlier shape.
fn closest<'a>(
    candidates: impl Iterator<Item = (usize, &'a ConvexBody)>,
    body: &ConvexBody,
) -> Result<Option<(usize, DistanceResult)>> {
    let mut best: Option<(usize, DistanceResult)> = None;
    for (i, shape) in candidates {
        let d = distance_estimate(shape, body, CONTACT_TOLERANCE)?;
        if best
            .as_ref()
            .is_none_or(|(_, b)| d.signed_distance < b.signed_distance)
        {
            best = Some((i, d));
        }
    }
    Ok(best)
}

struct Search {
    /// Largest radius known to miss, the closest shape and its distance data.
    miss: (f64, usize, DistanceResult),
    /// Whether the upper end of the range was reached without contact.
    floor: bool,
}

/// Finds the largest whitened radius in [s_lo, s_hi] whose grown body misses
/// every candidate shape. The gap is close to linear in s, so each step is a
/// false-position step (Illinois variant) with a bisection safeguard.
fn search<F>(
    candidates: &[(usize, &ConvexBody)],
    dim: Dof,
    s_lo: f64,
    s_hi: f64,
    eps_tol: f64,
    grow: F,
) -> Result<Search>
where
    F: Fn(f64) -> Result<ConvexBody>,
{
    let eval = |s: f64| -> Result<(usize, DistanceResult)> {
        closest(candidates.iter().copied(), &grow(s)?)?
            .ok_or_else(|| Error::domain("robot has no collision shapes"))
    };
    let lo_eval = eval(s_lo)?;
    if lo_eval.1.signed_distance <= 0.0 {
        return Err(Error::numerical("certify", "search bracket starts inside the robot"));
    }
    let hi_eval = eval(s_hi)?;
    if hi_eval.1.signed_distance > 0.0 {
        let (i, d) = hi_eval;
        return Ok(Search {
            miss: (s_hi, i, d),
            floor: true,
        });
    }

    let (mut s_lo, mut f_lo) = (s_lo, lo_eval.1.signed_distance);
    let (mut s_hi, mut f_hi) = (s_hi, hi_eval.1.signed_distance);
    // f_lo/f_hi get down-weighted by the Illinois rule; keep the true values
    let (mut gap_lo, mut gap_hi) = (f_lo, f_hi);
    let mut miss = (s_lo, lo_eval.0, lo_eval.1);
    let resolution = RADIUS_RESOLUTION * (s_hi * s_hi).max(1.0);
    let mut last_side = 0i8;
    let mut width_before = s_hi - s_lo;
    for step in 0..MAX_SEARCH_STEPS {
        let (cl, ch) = (s_lo * s_lo, s_hi * s_hi);
        let eps_gap = stats::sf_unchecked(cl, dim) - stats::sf_unchecked(ch, dim);
        if eps_gap < eps_tol && ch - cl <= resolution {
            return Ok(Search { miss, floor: false });
        }
        let mut s = if step % 3 == 2 && (s_hi - s_lo) > 0.5 * width_before {
            0.5 * (s_lo + s_hi)
        } else {
            s_lo + (s_hi - s_lo) * f_lo / (f_lo - f_hi)
        };
        if step % 3 == 2 {
            width_before = s_hi - s_lo;
        }
        if !(s > s_lo && s < s_hi) {
            s = 0.5 * (s_lo + s_hi);
        }
        let (i, d) = eval(s)?;
        let f = d.signed_distance;
        let slack = MONOTONICITY_SLACK * s.max(1.0);
        if f > gap_lo + slack || f < gap_hi - slack {
            return Err(Error::numerical(
                "certify",
                format!(
                    "signed distance not monotone in the shadow radius at s = {s:.6e} \
                     ({f:.3e} outside [{gap_hi:.3e}, {gap_lo:.3e}])"
                ),
            ));
        }
        if f > 0.0 {
            s_lo = s;
            f_lo = f;
            gap_lo = f;
            miss = (s, i, d);
            if last_side == 1 {
                f_hi *= 0.5;
            }
            last_side = 1;
        } else {
            s_hi = s;
            f_hi = f;
            gap_hi = f;
            if last_side == -1 {
                f_lo *= 0.5;
            }
            last_side = -1;
        }
    }
    Err(Error::numerical(
        "certify",
        format!("radius search did not converge in {MAX_SEARCH_STEPS} steps"),
    ))
}

fn inactive(template: &ShadowContact, squared_radius: f64) -> ShadowContact {
    ShadowContact {
        squared_radius,
        sensitivity: Vec3::zeros(),
        active: false,
        ..template.clone()
    }
}

/// Relative radius step for probing a tangent contact.
const TANGENT_PROBE: f64 = 1e-2;

/// Largest move accepted when snapping a witness onto a support point.
const WITNESS_AGREEMENT: f64 = 1e-3;

/// Robot-side contact point for a separated pair, given an accurate normal.
///
/// On a smooth side the support point along the normal is exact, while on a
/// flat side it jumps to a vertex. Take a candidate that agrees with the GJK
/// witness, preferring the robot side.
fn sharpen_witness(robot: &ConvexBody, other: &ConvexBody, d: &DistanceResult, gap: f64) -> Vec3 {
    let nu = d.normal;
    let from_robot = robot.support_unchecked(&nu);
    let from_other = other.support_unchecked(&-nu) - nu * gap;
    let ea = (from_robot - d.witness_a).norm();
    let eb = (from_other - d.witness_a).norm();
    let limit = WITNESS_AGREEMENT * gap.abs().max(1.0);
    // the robot-side point is consistent with the normal by construction
    if ea <= limit {
        from_robot
    } else if eb <= limit {
        from_other
    } else {
        d.witness_a
    }
}

/// Certifies an upper bound on collision risk between posed robot shapes and
/// one obstacle.
pub fn certify_posed(shapes: &[PosedShape], obstacle: &UncertainObstacle, eps_tol: f64) -> Result<RiskCertificate> {
    certify_with(shapes, obstacle, eps_tol, None)
}

/// `half_normal` overrides the whitened half-space normal (tests only).
fn certify_with(
    shapes: &[PosedShape],
    obstacle: &UncertainObstacle,
    eps_tol: f64,
    half_normal: Option<Vec3>,
) -> Result<RiskCertificate> {
    check_eps_tol(eps_tol)?;
    let dim = obstacle.dim();
    let c_max = stats::chi2_isf(eps_tol, dim)?;
    let s_max = c_max.sqrt();
    let white = Whitened::new(shapes, obstacle)?;

    // Full shadow: the search over c has its root exactly at the squared
    // whitened distance, so evaluate it directly.
    let (i1, d1) = closest(white.shapes.iter().enumerate(), &white.nominal)?
        .ok_or_else(|| Error::domain("robot has no collision shapes"))?;
    if d1.signed_distance <= 0.0 {
        let touch = ShadowContact {
            link: white.links[i1],
            point: white.coloring * d1.witness_a,
            normal: white.world_normal(&d1.normal),
            x: Vec3::zeros(),
            squared_radius: 0.0,
            sensitivity: Vec3::zeros(),
            active: false,
        };
        return Ok(RiskCertificate {
            eps1: 1.0,
            eps2: 1.0,
            eps_prime: 1.0,
            saturated: true,
            dim,
            first: touch.clone(),
            second: touch,
        });
    }

    let s1 = d1.signed_distance;
    let nu1 = d1.normal;
    // the GJK normal is far more accurate than its witnesses on curved
    // surfaces, so rebuild the contact from it
    let u1 = -s1 * nu1;
    let x1 = white.coloring * u1;
    let n1 = white.world_normal(&nu1);
    let c1 = s1 * s1;
    let p1 = sharpen_witness(&white.shapes[i1], &white.nominal, &d1, s1);
    let first_contact = ShadowContact {
        link: white.links[i1],
        point: white.coloring * p1,
        normal: n1,
        x: x1,
        squared_radius: c1,
        // ∇ₓε = −χ²ₙ(xᵀΣ⁻¹x)·2xᵀΣ⁻¹
        sensitivity: obstacle.covariance.precision() * x1 * (-2.0 * stats::pdf_unchecked(c1, dim)),
        active: true,
    };

    if s1 >= s_max {
        let floor = inactive(&first_contact, c_max);
        return Ok(RiskCertificate {
            eps1: eps_tol,
            eps2: eps_tol,
            eps_prime: eps_tol,
            saturated: false,
            dim,
            second: floor.clone(),
            first: floor,
        });
    }
    let eps1 = stats::sf_unchecked(c1, dim);

    // Half shadow, opening away from the robot. A shape can only meet it if
    // its offset set W·R − W·O reaches into that half-space; the first
    // contact shape never does.
    let m = half_normal.unwrap_or(nu1);
    let candidates: Vec<(usize, &ConvexBody)> = white
        .shapes
        .iter()
        .enumerate()
        .filter(|(i, shape)| *i != i1 && shape.support_value(&m) + white.nominal.support_value(&-m) > 0.0)
        .collect();
    let floor = |template: &ShadowContact| RiskCertificate {
        eps1,
        eps2: eps_tol,
        eps_prime: 0.5 * (eps1 + eps_tol),
        saturated: false,
        dim,
        second: inactive(template, c_max),
        first: template.clone(),
    };
    if candidates.is_empty() {
        return Ok(floor(&first_contact));
    }
    let second = search(&candidates, dim, s1, s_max, eps_tol, |s| white.half_shadow(s, m))?;
    if second.floor {
        return Ok(floor(&first_contact));
    }
    let (s_miss, i2, _) = second.miss;
    // Right at tangency the GJK direction and sign are noise, so probe the
    // contact at two slightly smaller radii and extrapolate.
    let unit = white.half_ball(1.0, m)?;
    let probe = |k: f64| -> Result<(Vec3, Vec3, f64)> {
        let s = s_miss * (1.0 - k * TANGENT_PROBE);
        let grown = white.half_shadow(s, m)?;
        let d = distance(&white.shapes[i2], &grown, CONTACT_TOLERANCE)?;
        let p = sharpen_witness(&white.shapes[i2], &grown, &d, d.signed_distance);
        // Newton step to tangency: the gap falls at the unit support rate
        let rate = -d.normal.dot(&unit.support_unchecked(&-d.normal));
        let touch = if rate > 0.0 { s + d.signed_distance / rate } else { s_miss };
        Ok((d.normal, p, touch))
    };
    let (nu_a, p_a, s_a) = probe(1.0)?;
    let (nu_b, p_b, s_b) = probe(2.0)?;
    let nu = (2.0 * nu_a - nu_b).normalize();
    let p2 = 2.0 * p_a - p_b;
    let s_touch = (4.0 * s_a - s_b) / 3.0;
    let s2 = if (s_touch - s_miss).abs() <= TANGENT_PROBE * s_miss { s_touch } else { s_miss };
    let c2 = s2 * s2;
    let x2_white = unit.support_unchecked(&-nu) * s2;
    // reach of the unit half ball along −ν; the gap closes at this rate in s
    let reach = -nu.dot(&x2_white) / s2;
    let sensitivity = if reach > 0.0 {
        white.whitening.transpose() * nu * (2.0 * s2 * stats::pdf_unchecked(c2, dim) / reach)
    } else {
        Vec3::zeros()
    };
    let eps2 = stats::sf_unchecked(c2, dim).min(eps1);
    Ok(RiskCertificate {
        eps1,
        eps2,
        eps_prime: 0.5 * (eps1 + eps2),
        saturated: false,
        dim,
        first: first_contact,
        second: ShadowContact {
            link: white.links[i2],
            point: white.coloring * p2,
            normal: white.world_normal(&nu),
            x: white.coloring * x2_white,
            squared_radius: c2,
            sensitivity,
            active: true,
        },
    })
}

pub fn certify_risk(
    robot: &RobotModel,
    theta: &JointState,
    obstacle: &UncertainObstacle,
    eps_tol: f64,
) -> Result<RiskCertificate> {
    let shapes = robot.posed_shapes(theta)?;
    certify_posed(&shapes, obstacle, eps_tol)
}

fn term_gradient(robot: &RobotModel, chain: &ChainState, contact: &ShadowContact) -> Result<DVector<f64>> {
    if !contact.active {
        return Ok(DVector::zeros(robot.dof()));
    }
    let jac: Matrix3xX<f64> = jacobian_from_chain(robot, chain, contact.link, &contact.point)?;
    Ok((contact.sensitivity.transpose() * jac).transpose())
}

pub(crate) fn gradient_from_chain(cert: &RiskCertificate, robot: &RobotModel, chain: &ChainState) -> Result<DVector<f64>> {
    if cert.saturated {
        return Err(Error::domain(
            "risk gradient is undefined for a saturated certificate; use the signed-distance constraint",
        ));
    }
    let g1 = term_gradient(robot, chain, &cert.first)?;
    let g2 = term_gradient(robot, chain, &cert.second)?;
    Ok((g1 + g2) * 0.5)
}

/// ∇θ ε′ = (∇ε₁ + ∇ε₂)/2, treating contact link, point and normal as fixed.
pub fn risk_gradient(
    cert: &RiskCertificate,
    robot: &RobotModel,
    theta: &JointState,
    obstacle: &UncertainObstacle,
) -> Result<DVector<f64>> {
    if cert.dim != obstacle.dim() {
        return Err(Error::domain("certificate and obstacle disagree on workspace dimension"));
    }
    let chain = robot.chain_state(theta)?;
    gradient_from_chain(cert, robot, &chain)
}

pub fn linearize_risk(cert: &RiskCertificate, gradient: DVector<f64>, anchor: JointState) -> Result<RiskLinearization> {
    if gradient.len() != anchor.len() {
        return Err(Error::domain(format!(
            "gradient has {} entries but anchor has {}",
            gradient.len(),
            anchor.len()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("linearize_risk", "non-finite gradient"));
    }
    Ok(RiskLinearization {
        eps0: cert.eps_prime,
        gradient,
        anchor,
    })
}

/// Certificates for every obstacle and their summed bound.
pub fn scene_risk(
    robot: &RobotModel,
    theta: &JointState,
    obstacles: &[UncertainObstacle],
    eps_tol: f64,
) -> Result<SceneRisk> {
    check_eps_tol(eps_tol)?;
    let shapes = robot.posed_shapes(theta)?;
    let certificates = obstacles
        .par_iter()
        .map(|o| certify_posed(&shapes, o, eps_tol))
        .collect::<Result<Vec<_>>>()?;
    let total = certificates.iter().map(|c| c.eps_prime).sum();
    Ok(SceneRisk { certificates, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{Joint, JointKind, Link};
    use crate::geometry::Pose;
    use approx::assert_abs_diff_eq;

    fn point_obstacle(dim: usize, sigma: f64) -> UncertainObstacle {
        UncertainObstacle::new(
            "p",
            ConvexBody::point(Vec3::zeros()).unwrap(),
            Covariance::isotropic(dim, sigma).unwrap(),
        )
    }

    fn point_robot() -> RobotModel {
        RobotModel::planar_point(0.0, 100.0).unwrap()
    }

    /// One prismatic joint along x carrying a point.
    fn slider() -> RobotModel {
        let j = Joint::new("x", JointKind::Prismatic, Vec3::x(), Pose::identity(), -10.0, 10.0).unwrap();
        let link = Link {
            shapes: vec![ConvexBody::point(Vec3::zeros()).unwrap()],
        };
        RobotModel::new("slider", Pose::identity(), vec![j], vec![link]).unwrap()
    }

    #[test]
    fn shadow_examples() {
        let o = point_obstacle(3, 1.0);
        let eps = stats::chi2_sf(1.0, Dof::THREE).unwrap();
        let s = shadow(&o, eps).unwrap();
        for v in [Vec3::x(), Vec3::new(1.0, -2.0, 0.5)] {
            assert_abs_diff_eq!(s.support(&v).unwrap().norm(), 1.0, epsilon = 1e-9);
        }
        let boxed = UncertainObstacle::new(
            "b",
            ConvexBody::cuboid(Vec3::new(1.0, 1.0, 1.0)).unwrap(),
            Covariance::isotropic(3, 1.0).unwrap(),
        );
        assert_abs_diff_eq!(shadow(&boxed, eps).unwrap().support_value(&Vec3::x()), 2.0, epsilon = 1e-9);
        let tiny = shadow(&boxed, 1.0 - 1e-15).unwrap();
        assert_abs_diff_eq!(tiny.support_value(&Vec3::x()), 1.0, epsilon = 1e-4);
        assert!(shadow(&o, 0.0).is_err());
        assert!(shadow(&o, 1.0).is_err());
    }

    #[test]
    fn half_shadow_examples() {
        let o = point_obstacle(3, 1.0);
        let eps = stats::chi2_sf(1.0, Dof::THREE).unwrap();
        let h = half_shadow(&o, eps, &Vec3::z()).unwrap();
        assert_abs_diff_eq!(h.support(&Vec3::z()).unwrap(), Vec3::z(), epsilon = 1e-9);
        assert_abs_diff_eq!(h.support(&-Vec3::z()).unwrap().z, 0.0, epsilon = 1e-12);
        assert!(half_shadow(&o, eps, &Vec3::new(0.0, 0.0, 2.0)).is_err());
    }

    #[test]
    fn closed_form_point_pair() {
        let sigma = 0.3;
        let o = point_obstacle(2, sigma);
        let robot = point_robot();
        for k in [1.0, 2.0, 3.0] {
            let r = k * sigma;
            let theta = DVector::from_vec(vec![r, 0.0]);
            let cert = certify_risk(&robot, &theta, &o, 1e-6).unwrap();
            let expected = (-(r * r) / (2.0 * sigma * sigma)).exp();
            assert!((cert.eps1 - expected).abs() <= 1e-6, "r={r}: {} vs {expected}", cert.eps1);
            assert!(cert.eps1 >= expected - 1e-12, "bound must stay conservative");
            assert_abs_diff_eq!(cert.eps2, 1e-6, epsilon = 1e-12);
            assert_abs_diff_eq!(cert.eps_prime, 0.5 * (cert.eps1 + 1e-6), epsilon = 1e-15);
            assert_abs_diff_eq!(cert.contact_normal(), &-Vec3::x(), epsilon = 1e-6);
            assert!(!cert.second.active);
        }
    }

    #[test]
    fn saturated_and_floor_cases() {
        let o = UncertainObstacle::new(
            "s",
            ConvexBody::sphere(Vec3::zeros(), 1.0).unwrap(),
            Covariance::isotropic(2, 0.1).unwrap(),
        );
        let robot = point_robot();
        let cert = certify_risk(&robot, &DVector::from_vec(vec![0.5, 0.0]), &o, 1e-6).unwrap();
        assert!(cert.saturated);
        assert_eq!(cert.eps_prime, 1.0);
        assert!(risk_gradient(&cert, &robot, &DVector::from_vec(vec![0.5, 0.0]), &o).is_err());

        let far = DVector::from_vec(vec![50.0, 0.0]);
        let cert = certify_risk(&robot, &far, &o, 1e-6).unwrap();
        assert_eq!(cert.eps1, 1e-6);
        assert_eq!(cert.eps2, cert.eps1);
        assert_eq!(risk_gradient(&cert, &robot, &far, &o).unwrap().norm(), 0.0);

        assert!(certify_risk(&robot, &far, &o, 0.5).is_err());
        assert!(certify_risk(&robot, &far, &o, 0.0).is_err());
    }

    #[test]
    fn slider_gradient_closed_form() {
        let o = point_obstacle(2, 1.0);
        let robot = slider();
        let theta = DVector::from_vec(vec![1.0]);
        let cert = certify_risk(&robot, &theta, &o, 1e-6).unwrap();
        let g1 = term_gradient(&robot, &robot.chain_state(&theta).unwrap(), &cert.first).unwrap();
        assert_abs_diff_eq!(g1[0], -(-0.5f64).exp(), epsilon = 1e-6);
        // the half shadow never re-contacts, so ε′ carries half of it
        let g = risk_gradient(&cert, &robot, &theta, &o).unwrap();
        assert_abs_diff_eq!(g[0], -0.5 * (-0.5f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn linearization_tracks_closed_form() {
        let o = point_obstacle(2, 1.0);
        let robot = slider();
        let theta0 = DVector::from_vec(vec![1.0]);
        let cert = certify_risk(&robot, &theta0, &o, 1e-6).unwrap();
        let g = risk_gradient(&cert, &robot, &theta0, &o).unwrap();
        let lin = linearize_risk(&cert, g.clone(), theta0.clone()).unwrap();
        assert_eq!(lin.evaluate(&theta0), cert.eps_prime);
        let step = &theta0 - &g.normalize() * 0.01;
        assert!(lin.evaluate(&step) < cert.eps_prime);
        let theta1 = DVector::from_vec(vec![1.01]);
        let truth = certify_risk(&robot, &theta1, &o, 1e-6).unwrap().eps_prime;
        assert!((lin.evaluate(&theta1) - truth).abs() <= 1e-3);
        assert!(linearize_risk(&cert, DVector::zeros(2), theta0).is_err());
    }

    #[test]
    fn scene_risk_sums() {
        let robot = point_robot();
        let theta = DVector::from_vec(vec![0.0, 0.0]);
        assert_eq!(scene_risk(&robot, &theta, &[], 1e-6).unwrap().total, 0.0);
        let o = UncertainObstacle::new(
            "far",
            ConvexBody::sphere(Vec3::new(1.0, 0.0, 0.0), 0.2).unwrap(),
            Covariance::isotropic(2, 0.3).unwrap(),
        );
        let one = scene_risk(&robot, &theta, &[o.clone()], 1e-6).unwrap();
        assert_eq!(one.total, one.certificates[0].eps_prime);
        let two = scene_risk(&robot, &theta, &[o.clone(), o], 1e-6).unwrap();
        assert_eq!(two.total, 2.0 * one.total);
    }

    #[test]
    fn eps2_never_exceeds_eps1_and_retreat_is_monotone() {
        let robot = RobotModel::planar_point(0.1, 100.0).unwrap();
        let o = UncertainObstacle::new(
            "box",
            ConvexBody::cuboid(Vec3::new(0.3, 0.2, 0.0)).unwrap(),
            Covariance::from_row_major(2, &[0.04, 0.01, 0.01, 0.02]).unwrap(),
        );
        let start = DVector::from_vec(vec![0.55, 0.3]);
        let cert = certify_risk(&robot, &start, &o, 1e-6).unwrap();
        assert!(cert.eps2 <= cert.eps1);
        let n = cert.contact_normal();
        let mut prev = cert.eps_prime;
        for k in 1..20 {
            let th = &start - DVector::from_vec(vec![n.x, n.y]) * (0.02 * k as f64);
            let e = certify_risk(&robot, &th, &o, 1e-6).unwrap();
            assert!(e.eps2 <= e.eps1);
            assert!(e.eps_prime <= prev + 1e-9, "step {k}: {} > {prev}", e.eps_prime);
            prev = e.eps_prime;
        }
    }

    fn arm() -> RobotModel {
        let cap = |l: f64| ConvexBody::capsule(Vec3::zeros(), Vec3::new(l, 0.0, 0.0), 0.04).unwrap();
        let joints = vec![
            Joint::new("yaw", JointKind::Revolute, Vec3::z(), Pose::translation(0.0, 0.0, 0.1), -3.1, 3.1).unwrap(),
            Joint::new("shoulder", JointKind::Revolute, Vec3::y(), Pose::translation(0.0, 0.0, 0.1), -3.1, 3.1).unwrap(),
            Joint::new("elbow", JointKind::Revolute, Vec3::y(), Pose::translation(0.4, 0.0, 0.0), -3.1, 3.1).unwrap(),
        ];
        let links = vec![Link::default(), Link { shapes: vec![cap(0.4)] }, Link { shapes: vec![cap(0.35)] }];
        RobotModel::new("arm", Pose::identity(), joints, links).unwrap()
    }

    /// Random arm pose and box obstacle with a correlated covariance.
    fn random_case(rng: &mut rand_chacha::ChaCha8Rng) -> (JointState, UncertainObstacle) {
        use rand::Rng;
        let theta = DVector::from_fn(3, |_, _| rng.random_range(-1.5..1.5));
        let a = Matrix3::from_fn(|_, _| rng.random_range(-0.1..0.1));
        let cov = a * a.transpose() + Matrix3::identity() * 0.002;
        let center = Vec3::new(rng.random_range(0.2..0.7), rng.random_range(-0.4..0.4), rng.random_range(0.0..0.5));
        let nominal = ConvexBody::translated(ConvexBody::cuboid(Vec3::new(0.06, 0.05, 0.08)).unwrap(), center);
        (theta, UncertainObstacle::new("o", nominal, Covariance::from_matrix3(cov).unwrap()))
    }

    fn central<F: Fn(&JointState) -> f64>(theta: &JointState, h: f64, f: F) -> DVector<f64> {
        DVector::from_fn(theta.len(), |k, _| {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p[k] += h;
            m[k] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    #[test]
    fn arm_gradient_matches_differences_without_half_contact() {
        use rand::SeedableRng;
        let robot = arm();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 30 {
            let (theta, o) = random_case(&mut rng);
            let c = certify_risk(&robot, &theta, &o, 1e-6).unwrap();
            if c.saturated || c.second.active || !(1e-3..0.9).contains(&c.eps1) {
                continue;
            }
            let g = risk_gradient(&c, &robot, &theta, &o).unwrap();
            let fd = central(&theta, 1e-4, |t| certify_risk(&robot, t, &o, 1e-6).unwrap().eps_prime);
            assert!((&g - &fd).amax() <= (1e-3 * fd.amax()).max(1e-6), "{g} vs {fd}");
            checked += 1;
        }
    }

    #[test]
    fn half_contact_gradient_holds_the_half_space_fixed() {
        use rand::SeedableRng;
        let robot = arm();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 10 {
            let (theta, o) = random_case(&mut rng);
            let c = certify_risk(&robot, &theta, &o, 1e-6).unwrap();
            if c.saturated || !c.second.active || c.eps2 < 1e-4 {
                continue;
            }
            let m = (o.covariance.coloring().transpose() * c.first.normal).normalize();
            let frozen = |t: &JointState| {
                let shapes = robot.posed_shapes(t).unwrap();
                certify_with(&shapes, &o, 1e-6, Some(m)).unwrap().eps_prime
            };
            let g = risk_gradient(&c, &robot, &theta, &o).unwrap();
            let fd = central(&theta, 1e-3, frozen);
            assert!((&g - &fd).amax() <= 1e-2 * fd.amax(), "{g} vs {fd}");
            checked += 1;
        }
    }
}
