use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen};

use super::{Pose, Vec3};
use crate::error::{Error, Result};
use crate::stats::Dof;

/// Positional covariance of an uncertain obstacle.
///
/// Always stored as 3×3. In 2D the z row and column are zero: the Cholesky
/// factor has a zero third column and `precision` is the inverse of the
/// planar block padded with zeros, so every offset it produces stays in the
/// z = 0 plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance {
    dim: Dof,
    matrix: Matrix3<f64>,
    factor: Matrix3<f64>,
    precision: Matrix3<f64>,
    whitening: Matrix3<f64>,
    sigma_max: f64,
}

impl Covariance {
    /// Builds a covariance from an n×n row-major array, n ∈ {2, 3}.
    pub fn from_row_major(dim: usize, entries: &[f64]) -> Result<Self> {
        let dof = Dof::new(dim)?;
        if entries.len() != dim * dim {
            return Err(Error::domain(format!(
                "covariance needs {} entries for dimension {dim}, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::domain("covariance entries must be finite"));
        }
        let mut m = Matrix3::zeros();
        for r in 0..dim {
            for c in 0..dim {
                m[(r, c)] = entries[r * dim + c];
            }
        }
        Self::build(dof, m)
    }

    pub fn from_matrix3(m: Matrix3<f64>) -> Result<Self> {
        Self::build(Dof::THREE, m)
    }

    /// σ²·I in the given dimension.
    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self> {
        let dof = Dof::new(dim)?;
        let mut m = Matrix3::zeros();
        for i in 0..dim {
            m[(i, i)] = sigma * sigma;
        }
        Self::build(dof, m)
    }

    fn build(dim: Dof, m: Matrix3<f64>) -> Result<Self> {
        let scale = m.abs().max().max(f64::MIN_POSITIVE);
        if (m - m.transpose()).abs().max() > 1e-12 * scale {
            return Err(Error::domain("covariance is not symmetric"));
        }
        let m = 0.5 * (m + m.transpose());
        let (factor, precision, eigen_max) = match dim.get() {
            2 => {
                let block = Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
                let chol = block
                    .cholesky()
                    .ok_or_else(|| Error::domain("covariance is not positive definite"))?;
                let l = chol.l();
                let inv = chol.inverse();
                let mut factor = Matrix3::zeros();
                let mut precision = Matrix3::zeros();
                for r in 0..2 {
                    for c in 0..2 {
                        factor[(r, c)] = l[(r, c)];
                        precision[(r, c)] = inv[(r, c)];
                    }
                }
                let eig = SymmetricEigen::new(block).eigenvalues;
                (factor, precision, eig.max())
            }
            _ => {
                let chol = m
                    .cholesky()
                    .ok_or_else(|| Error::domain("covariance is not positive definite"))?;
                let eig = SymmetricEigen::new(m).eigenvalues;
                (chol.l(), chol.inverse(), eig.max())
            }
        };
        if eigen_max <= 0.0 {
            return Err(Error::domain("covariance is not positive definite"));
        }
        let whitening = coloring_of(dim, &factor)
            .try_inverse()
            .ok_or_else(|| Error::domain("covariance is not positive definite"))?;
        Ok(Self {
            dim,
            matrix: m,
            factor,
            precision,
            whitening,
            sigma_max: eigen_max.sqrt(),
        })
    }

    pub fn dim(&self) -> Dof {
        self.dim
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// Lower-triangular L with Σ = L Lᵀ.
    pub fn factor(&self) -> &Matrix3<f64> {
        &self.factor
    }

    /// Σ⁻¹ on the workspace block.
    pub fn precision(&self) -> &Matrix3<f64> {
        &self.precision
    }

    /// Largest standard deviation (square root of the top eigenvalue).
    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn mahalanobis_sq(&self, x: &Vec3) -> f64 {
        x.dot(&(self.precision * x))
    }

    /// W with Wᵀ W = Σ⁻¹ on the workspace block: maps offsets to standard
    /// coordinates. In 2D the z axis passes through unchanged.
    pub fn whitening(&self) -> &Matrix3<f64> {
        &self.whitening
    }

    /// Inverse of [`Covariance::whitening`].
    pub fn coloring(&self) -> Matrix3<f64> {
        coloring_of(self.dim, &self.factor)
    }

    /// Maps a standard-normal vector to an offset with this covariance.
    pub fn transform_standard(&self, z: &Vec3) -> Vec3 {
        self.factor * z
    }
}

fn coloring_of(dim: Dof, factor: &Matrix3<f64>) -> Matrix3<f64> {
    let mut m = *factor;
    if dim == Dof::TWO {
        m[(2, 2)] = 1.0;
    }
    m
}

/// {d : dᵀ Σ⁻¹ d ≤ c}
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub covariance: Covariance,
    pub squared_radius: f64,
}

impl Ellipsoid {
    pub fn new(covariance: Covariance, squared_radius: f64) -> Result<Self> {
        if !(squared_radius >= 0.0) || !squared_radius.is_finite() {
            return Err(Error::domain(format!(
                "ellipsoid squared radius must be finite and nonnegative, got {squared_radius}"
            )));
        }
        Ok(Self {
            covariance,
            squared_radius,
        })
    }

    /// √c · Σv / √(vᵀΣv)
    pub fn support(&self, v: &Vec3) -> Result<Vec3> {
        check_direction(v)?;
        Ok(self.support_unchecked(v))
    }

    pub(crate) fn support_unchecked(&self, v: &Vec3) -> Vec3 {
        let l = self.covariance.factor();
        let w = l.transpose() * v;
        let norm = w.norm();
        if norm == 0.0 || self.squared_radius == 0.0 {
            return Vec3::zeros();
        }
        l * (w * (self.squared_radius.sqrt() / norm))
    }

    pub fn contains(&self, d: &Vec3) -> bool {
        self.covariance.mahalanobis_sq(d) <= self.squared_radius
    }
}

/// {d : dᵀ Σ⁻¹ d ≤ c, n̂ᵀ d ≥ 0}
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfEllipsoid {
    pub ellipsoid: Ellipsoid,
    normal: Vec3,
}

impl HalfEllipsoid {
    pub fn new(ellipsoid: Ellipsoid, normal: Vec3) -> Result<Self> {
        if !normal.iter().all(|x| x.is_finite()) || (normal.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "half-ellipsoid normal must be unit length, got norm {}",
                normal.norm()
            )));
        }
        Ok(Self { ellipsoid, normal })
    }

    pub fn normal(&self) -> &Vec3 {
        &self.normal
    }

    pub fn support(&self, v: &Vec3) -> Result<Vec3> {
        check_direction(v)?;
        Ok(self.support_unchecked(v))
    }

    /// Whether the unconstrained ellipsoid maximizer already lies in the
    /// half-space, i.e. the support point is on the curved part.
    pub fn support_on_curved_part(&self, v: &Vec3) -> bool {
        let l = self.ellipsoid.covariance.factor();
        let w = l.transpose() * v;
        let m = l.transpose() * self.normal;
        w.dot(&m) >= 0.0
    }

    pub(crate) fn support_unchecked(&self, v: &Vec3) -> Vec3 {
        let c = self.ellipsoid.squared_radius;
        if c == 0.0 {
            return Vec3::zeros();
        }
        let l = self.ellipsoid.covariance.factor();
        let root_c = c.sqrt();
        let w = l.transpose() * v;
        let m = l.transpose() * self.normal;
        let w_norm = w.norm();
        if w_norm == 0.0 {
            return Vec3::zeros();
        }
        if w.dot(&m) >= 0.0 {
            return l * (w * (root_c / w_norm));
        }
        let m_sq = m.norm_squared();
        if m_sq == 0.0 {
            return l * (w * (root_c / w_norm));
        }
        let projected = w - m * (w.dot(&m) / m_sq);
        let p_norm = projected.norm();
        if p_norm > 1e-12 * w_norm {
            return l * (projected * (root_c / p_norm));
        }
        // v antiparallel to the normal: every rim point of the slice attains
        // the maximum, take the first coordinate axis that survives
        // projection into the slice.
        for axis in [Vec3::x(), Vec3::y(), Vec3::z()] {
            let a = l.transpose() * axis;
            let a = a - m * (a.dot(&m) / m_sq);
            let a_norm = a.norm();
            if a_norm > 1e-12 * (l.transpose() * axis).norm().max(f64::MIN_POSITIVE) {
                return l * (a * (root_c / a_norm));
            }
        }
        Vec3::zeros()
    }

    pub fn contains(&self, d: &Vec3) -> bool {
        self.ellipsoid.contains(d) && self.normal.dot(d) >= 0.0
    }
}

/// A convex set given by its support mapping.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexBody {
    Sphere { center: Vec3, radius: f64 },
    Polytope { vertices: Arc<[Vec3]> },
    Capsule { a: Vec3, b: Vec3, radius: f64 },
    Ellipsoid(Ellipsoid),
    HalfEllipsoid(HalfEllipsoid),
    Posed { pose: Pose, body: Arc<ConvexBody> },
    /// Image of `body` under an invertible linear map.
    Linear { map: Matrix3<f64>, body: Arc<ConvexBody> },
    MinkowskiSum(Arc<ConvexBody>, Arc<ConvexBody>),
}

pub(crate) fn check_direction(v: &Vec3) -> Result<()> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::domain("support direction must be finite"));
    }
    if v.norm_squared() == 0.0 {
        return Err(Error::domain("support direction must be nonzero"));
    }
    Ok(())
}

fn check_point(p: &Vec3, what: &str) -> Result<()> {
    if p.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(format!("{what} must have finite coordinates")))
    }
}

fn check_radius(r: f64) -> Result<()> {
    if r.is_finite() && r >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "radius must be finite and nonnegative, got {r}"
        )))
    }
}

impl ConvexBody {
    pub fn sphere(center: Vec3, radius: f64) -> Result<Self> {
        check_point(&center, "sphere center")?;
        check_radius(radius)?;
        Ok(ConvexBody::Sphere { center, radius })
    }

    pub fn point(p: Vec3) -> Result<Self> {
        Self::sphere(p, 0.0)
    }

    pub fn polytope(vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::domain("polytope needs at least one vertex"));
        }
        for v in &vertices {
            check_point(v, "polytope vertex")?;
        }
        Ok(ConvexBody::Polytope {
            vertices: vertices.into(),
        })
    }

    /// Axis-aligned box centred at the origin. A zero half-extent collapses
    /// that axis, which is how planar rectangles are expressed.
    pub fn cuboid(half_extents: Vec3) -> Result<Self> {
        if half_extents.iter().any(|h| !h.is_finite() || *h < 0.0) {
            return Err(Error::domain(
                "box half extents must be finite and nonnegative",
            ));
        }
        let mut vertices: Vec<Vec3> = Vec::with_capacity(8);
        for i in 0..8 {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            let v = Vec3::new(
                sx * half_extents.x,
                sy * half_extents.y,
                sz * half_extents.z,
            );
            if !vertices.contains(&v) {
                vertices.push(v);
            }
        }
        Self::polytope(vertices)
    }

    pub fn capsule(a: Vec3, b: Vec3, radius: f64) -> Result<Self> {
        check_point(&a, "capsule endpoint")?;
        check_point(&b, "capsule endpoint")?;
        check_radius(radius)?;
        Ok(ConvexBody::Capsule { a, b, radius })
    }

    pub fn posed(pose: Pose, body: impl Into<Arc<ConvexBody>>) -> Self {
        ConvexBody::Posed {
            pose,
            body: body.into(),
        }
    }

    pub fn translated(body: impl Into<Arc<ConvexBody>>, offset: Vec3) -> Self {
        Self::posed(Pose::translation(offset.x, offset.y, offset.z), body)
    }

    /// `map · body`; the map must be invertible.
    pub fn linear(map: Matrix3<f64>, body: impl Into<Arc<ConvexBody>>) -> Result<Self> {
        if !map.iter().all(|x| x.is_finite()) || map.determinant().abs() <= f64::MIN_POSITIVE {
            return Err(Error::domain("linear map must be finite and invertible"));
        }
        Ok(ConvexBody::Linear {
            map,
            body: body.into(),
        })
    }

    pub fn minkowski(a: impl Into<Arc<ConvexBody>>, b: impl Into<Arc<ConvexBody>>) -> Self {
        ConvexBody::MinkowskiSum(a.into(), b.into())
    }

    /// The farthest point of the body along `direction`.
    pub fn support(&self, direction: &Vec3) -> Result<Vec3> {
        check_direction(direction)?;
        Ok(self.support_unchecked(direction))
    }

    pub(crate) fn support_unchecked(&self, v: &Vec3) -> Vec3 {
        match self {
            ConvexBody::Sphere { center, radius } => {
                if *radius == 0.0 {
                    *center
                } else {
                    center + v * (*radius / v.norm())
                }
            }
            ConvexBody::Polytope { vertices } => {
                let mut best = vertices[0];
                let mut best_dot = best.dot(v);
                for p in vertices.iter().skip(1) {
                    let d = p.dot(v);
                    if d > best_dot {
                        best_dot = d;
                        best = *p;
                    }
                }
                best
            }
            ConvexBody::Capsule { a, b, radius } => {
                let end = if b.dot(v) > a.dot(v) { b } else { a };
                if *radius == 0.0 {
                    *end
                } else {
                    end + v * (*radius / v.norm())
                }
            }
            ConvexBody::Ellipsoid(e) => e.support_unchecked(v),
            ConvexBody::HalfEllipsoid(h) => h.support_unchecked(v),
            ConvexBody::Posed { pose, body } => {
                let local = pose.rotation.inverse_transform_vector(v);
                let s = body.support_unchecked(&local);
                pose.rotation.transform_vector(&s) + pose.translation.vector
            }
            ConvexBody::Linear { map, body } => map * body.support_unchecked(&(map.transpose() * v)),
            ConvexBody::MinkowskiSum(a, b) => a.support_unchecked(v) + b.support_unchecked(v),
        }
    }

    /// A point inside the body (used to seed searches).
    pub fn interior_point(&self) -> Vec3 {
        match self {
            ConvexBody::Sphere { center, .. } => *center,
            ConvexBody::Polytope { vertices } => {
                vertices.iter().sum::<Vec3>() / vertices.len() as f64
            }
            ConvexBody::Capsule { a, b, .. } => 0.5 * (a + b),
            ConvexBody::Ellipsoid(_) => Vec3::zeros(),
            ConvexBody::HalfEllipsoid(h) => {
                // centroid of a half-ellipsoid sits along Σn̂
                let c = h.ellipsoid.squared_radius;
                if c == 0.0 {
                    return Vec3::zeros();
                }
                0.375 * h.ellipsoid.support_unchecked(h.normal())
            }
            ConvexBody::Posed { pose, body } => pose.transform_point(&body.interior_point().into()).coords,
            ConvexBody::Linear { map, body } => map * body.interior_point(),
            ConvexBody::MinkowskiSum(a, b) => a.interior_point() + b.interior_point(),
        }
    }

    /// Support-function value h(v) = max ⟨v, p⟩.
    pub fn support_value(&self, v: &Vec3) -> f64 {
        self.support_unchecked(v).dot(v)
    }
}

impl From<Ellipsoid> for ConvexBody {
    fn from(e: Ellipsoid) -> Self {
        ConvexBody::Ellipsoid(e)
    }
}

impl From<HalfEllipsoid> for ConvexBody {
    fn from(h: HalfEllipsoid) -> Self {
        ConvexBody::HalfEllipsoid(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_box() -> ConvexBody {
        ConvexBody::cuboid(Vec3::new(1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn support_examples() {
        let s = ConvexBody::sphere(Vec3::zeros(), 1.0).unwrap();
        assert_eq!(s.support(&Vec3::z()).unwrap(), Vec3::z());
        assert_eq!(
            unit_box().support(&Vec3::new(1.0, 1.0, 1.0)).unwrap(),
            Vec3::new(1.0, 1.0, 1.0)
        );
        let sum = ConvexBody::minkowski(s.clone(), s);
        assert_eq!(sum.support(&Vec3::x()).unwrap(), Vec3::new(2.0, 0.0, 0.0));
        assert!(unit_box().support(&Vec3::zeros()).is_err());
    }

    #[test]
    fn ellipsoid_support_examples() {
        let e = Ellipsoid::new(Covariance::isotropic(3, 1.0).unwrap(), 1.0).unwrap();
        assert_relative_eq!(e.support(&Vec3::z()).unwrap(), Vec3::z(), epsilon = 1e-15);

        let cov = Covariance::from_matrix3(Matrix3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0)))
            .unwrap();
        let e = Ellipsoid::new(cov, 1.0).unwrap();
        assert_relative_eq!(
            e.support(&Vec3::x()).unwrap(),
            Vec3::new(2.0, 0.0, 0.0),
            epsilon = 1e-15
        );

        let degenerate = Ellipsoid::new(cov, 0.0).unwrap();
        assert_eq!(degenerate.support(&Vec3::new(0.3, -1.0, 2.0)).unwrap(), Vec3::zeros());
        assert!(e.support(&Vec3::zeros()).is_err());
    }

    #[test]
    fn half_ellipsoid_support_examples() {
        let e = Ellipsoid::new(Covariance::isotropic(3, 1.0).unwrap(), 1.0).unwrap();
        let h = HalfEllipsoid::new(e, Vec3::z()).unwrap();
        assert_relative_eq!(h.support(&Vec3::z()).unwrap(), Vec3::z(), epsilon = 1e-15);
        let down = h.support(&-Vec3::z()).unwrap();
        assert!(down.z.abs() < 1e-15);
        assert_relative_eq!(down.norm(), 1.0, epsilon = 1e-12);

        let e2 = Ellipsoid::new(Covariance::isotropic(2, 1.0).unwrap(), 4.0).unwrap();
        let h2 = HalfEllipsoid::new(e2, Vec3::x()).unwrap();
        let v = Vec3::new(std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, 0.0);
        assert_relative_eq!(
            h2.support(&v).unwrap(),
            Vec3::new(2f64.sqrt(), 2f64.sqrt(), 0.0),
            epsilon = 1e-12
        );
        assert!(HalfEllipsoid::new(e, Vec3::new(0.0, 0.0, 2.0)).is_err());
    }

    #[test]
    fn covariance_validation() {
        assert!(Covariance::from_row_major(2, &[1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(Covariance::from_row_major(2, &[1.0, 0.1, 0.0, 1.0]).is_err());
        assert!(Covariance::from_row_major(3, &[1.0, 0.0, 0.0, 1.0]).is_err());
        let c = Covariance::from_row_major(2, &[4.0, 0.0, 0.0, 1.0]).unwrap();
        assert_relative_eq!(c.sigma_max(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(c.mahalanobis_sq(&Vec3::new(2.0, 1.0, 7.0)), 2.0, epsilon = 1e-12);
    }

    fn random_spd() -> impl Strategy<Value = Covariance> {
        prop::array::uniform9(-1.0f64..1.0).prop_map(|a| {
            let m = Matrix3::from_row_slice(&a);
            Covariance::from_matrix3(m * m.transpose() + Matrix3::identity() * 0.05).unwrap()
        })
    }

    fn direction() -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-1.0f64..1.0)
            .prop_map(|a| Vec3::new(a[0], a[1], a[2]))
            .prop_filter("nonzero", |v| v.norm() > 1e-3)
    }

    proptest! {
        #[test]
        fn support_is_scale_invariant(v in direction(), lambda in 1e-3f64..1e3, cov in random_spd()) {
            let bodies = [
                ConvexBody::sphere(Vec3::new(0.1, 0.2, 0.3), 0.7).unwrap(),
                unit_box(),
                ConvexBody::capsule(Vec3::zeros(), Vec3::x(), 0.2).unwrap(),
                Ellipsoid::new(cov, 2.0).unwrap().into(),
                HalfEllipsoid::new(Ellipsoid::new(cov, 2.0).unwrap(), Vec3::y()).unwrap().into(),
            ];
            for b in &bodies {
                let p = b.support(&v).unwrap();
                let q = b.support(&(v * lambda)).unwrap();
                prop_assert!((p - q).norm() <= 1e-12 * (1.0 + p.norm()));
            }
        }

        #[test]
        fn minkowski_support_is_sum(v in direction(), cov in random_spd(), r in 0.0f64..2.0) {
            let a = ConvexBody::sphere(Vec3::new(1.0, -2.0, 0.5), r).unwrap();
            let b: ConvexBody = Ellipsoid::new(cov, 1.5).unwrap().into();
            let sum = ConvexBody::minkowski(a.clone(), b.clone());
            prop_assert_eq!(sum.support(&v).unwrap(), a.support(&v).unwrap() + b.support(&v).unwrap());
        }

        #[test]
        fn ellipsoid_support_maximizes(v in direction(), cov in random_spd(), c in 0.1f64..9.0) {
            let e = Ellipsoid::new(cov, c).unwrap();
            let s = e.support(&v).unwrap();
            prop_assert!((cov.mahalanobis_sq(&s) - c).abs() < 1e-9 * c);
            let closed = cov.matrix() * v * (c.sqrt() / v.dot(&(cov.matrix() * v)).sqrt());
            prop_assert!((s - closed).norm() < 1e-10 * (1.0 + s.norm()));
        }
    }

    /// Dense sampling of the half-ellipsoid boundary (curved part and slice
    /// rim) as an independent maximizer.
    fn sampled_max(h: &HalfEllipsoid, v: &Vec3, samples: usize) -> f64 {
        let l = h.ellipsoid.covariance.factor();
        let c = h.ellipsoid.squared_radius;
        let mut best = f64::NEG_INFINITY;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for i in 0..samples {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / samples as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let u = Vec3::new(r * phi.cos(), r * phi.sin(), z);
            let d = l * u * c.sqrt();
            if h.normal().dot(&d) >= 0.0 {
                best = best.max(v.dot(&d));
            }
        }
        // rim of the slice: unit circle orthogonal to m in u-space
        let m = l.transpose() * h.normal();
        let m = m / m.norm();
        let helper = if m.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = m.cross(&helper).normalize();
        let e2 = m.cross(&e1);
        for i in 0..samples / 10 {
            let t = 2.0 * std::f64::consts::PI * i as f64 / (samples / 10) as f64;
            let u = e1 * t.cos() + e2 * t.sin();
            best = best.max(v.dot(&(l * u * c.sqrt())));
        }
        best
    }

    #[test]
    fn half_ellipsoid_support_is_feasible_and_optimal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let cov = Covariance::from_matrix3(a * a.transpose() + Matrix3::identity() * 0.1).unwrap();
            let c = rng.random_range(0.5..6.0);
            let n = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let v = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let h = HalfEllipsoid::new(Ellipsoid::new(cov, c).unwrap(), n).unwrap();
            let d = h.support(&v).unwrap();
            assert!(cov.mahalanobis_sq(&d) <= c * (1.0 + 1e-9));
            assert!(n.dot(&d) >= -1e-9);
            let sampled = sampled_max(&h, &v, 100_000);
            assert!(v.dot(&d) >= sampled - 1e-9, "support {} sampled {}", v.dot(&d), sampled);
            // sampling is dense enough to come close from below
            assert!(v.dot(&d) - sampled < 5e-3 * (1.0 + sampled.abs()));
        }
    }

    #[test]
    fn whitening_inverts_the_factor() {
        for cov in [
            Covariance::from_row_major(2, &[0.04, 0.01, 0.01, 0.02]).unwrap(),
            Covariance::from_row_major(3, &[2.0, 0.3, -0.1, 0.3, 1.0, 0.2, -0.1, 0.2, 0.5]).unwrap(),
        ] {
            let w = cov.whitening();
            assert!((w * cov.coloring() - Matrix3::identity()).abs().max() < 1e-12);
            let mut p = w.transpose() * w;
            if cov.dim() == Dof::TWO {
                p[(2, 2)] = 0.0;
            }
            assert!((p - cov.precision()).abs().max() < 1e-9 * cov.precision().abs().max());
        }
    }

    #[test]
    fn linear_image_of_ball_is_ellipsoid() {
        let cov = Covariance::from_row_major(3, &[2.0, 0.3, -0.1, 0.3, 1.0, 0.2, -0.1, 0.2, 0.5]).unwrap();
        let ball = ConvexBody::sphere(Vec3::zeros(), 1.5).unwrap();
        let image = ConvexBody::linear(cov.coloring(), ball).unwrap();
        let e = Ellipsoid::new(cov, 2.25).unwrap();
        for v in [Vec3::x(), Vec3::new(0.3, -1.0, 2.0), Vec3::new(-1.0, -1.0, -1.0)] {
            assert_relative_eq!(image.support(&v).unwrap(), e.support(&v).unwrap(), epsilon = 1e-12);
        }
        assert!(ConvexBody::linear(Matrix3::zeros(), ConvexBody::point(Vec3::zeros()).unwrap()).is_err());
    }
}
