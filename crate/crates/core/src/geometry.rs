//! Ray/primitive intersection routines.

use crate::math::{Ray, Vec3};
use crate::scene::{QuadLight, Sphere};

/// Möller–Trumbore. Returns `(t, u, v)` with barycentrics of vertices `b` and `c`.
#[inline]
pub fn intersect_triangle(ray: &Ray, tri: &[Vec3; 3], t_min: f32, t_max: f32) -> Option<(f32, f32, f32)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = ray.dir.cross(e2);
    let det = e1.dot(p);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - tri[0];
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = ray.dir.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv;
    if t > t_min && t < t_max {
        Some((t, u, v))
    } else {
        None
    }
}

pub fn triangle_normal(tri: &[Vec3; 3]) -> Vec3 {
    (tri[1] - tri[0]).cross(tri[2] - tri[0]).normalize()
}

pub fn triangle_is_degenerate(tri: &[Vec3; 3]) -> bool {
    let n = (tri[1] - tri[0]).cross(tri[2] - tri[0]);
    !(n.length_squared() > 0.0) || !n.is_finite()
}

#[inline]
pub fn intersect_sphere(ray: &Ray, s: &Sphere, t_min: f32, t_max: f32) -> Option<f32> {
    let oc = ray.origin - s.center;
    let b = oc.dot(ray.dir);
    // Numerically stable form of c: |oc|^2 - r^2, via the perpendicular distance.
    let perp = oc - ray.dir * b;
    let disc = s.radius * s.radius - perp.length_squared();
    if disc < 0.0 {
        return None;
    }
    let c = oc.length_squared() - s.radius * s.radius;
    let sq = disc.sqrt();
    let q = if b > 0.0 { -b - sq } else { -b + sq };
    if q == 0.0 {
        return None;
    }
    let (t0, t1) = {
        let a = c / q;
        if a < q {
            (a, q)
        } else {
            (q, a)
        }
    };
    if t0 > t_min && t0 < t_max {
        Some(t0)
    } else if t1 > t_min && t1 < t_max {
        Some(t1)
    } else {
        None
    }
}

/// Returns `(t, a, b)` with the hit at `corner + a*edge_u + b*edge_v`.
#[inline]
pub fn intersect_quad(ray: &Ray, q: &QuadLight, t_min: f32, t_max: f32) -> Option<(f32, f32, f32)> {
    let n = q.edge_u.cross(q.edge_v);
    let denom = n.dot(ray.dir);
    if denom == 0.0 {
        return None;
    }
    let t = n.dot(q.corner - ray.origin) / denom;
    if !(t > t_min && t < t_max) {
        return None;
    }
    let p = ray.at(t) - q.corner;
    let nn = n.length_squared();
    let a = p.cross(q.edge_v).dot(n) / nn;
    let b = q.edge_u.cross(p).dot(n) / nn;
    if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) {
        Some((t, a, b))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_hit_from_outside_and_inside() {
        let s = Sphere { center: Vec3::ZERO, radius: 1.0, material: 0 };
        let r = Ray::new(Vec3::new(0.0, 0.0, -5.0), Vec3::new(0.0, 0.0, 1.0));
        assert!((intersect_sphere(&r, &s, 1e-4, f32::INFINITY).unwrap() - 4.0).abs() < 1e-5);
        let inside = Ray::new(Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0));
        assert!((intersect_sphere(&inside, &s, 1e-4, f32::INFINITY).unwrap() - 1.0).abs() < 1e-6);
        let miss = Ray::new(Vec3::new(0.0, 2.0, -5.0), Vec3::new(0.0, 0.0, 1.0));
        assert!(intersect_sphere(&miss, &s, 1e-4, f32::INFINITY).is_none());
    }

    #[test]
    fn quad_hit_parameters() {
        let q = QuadLight {
            corner: Vec3::new(-1.0, 2.0, -1.0),
            edge_u: Vec3::new(2.0, 0.0, 0.0),
            edge_v: Vec3::new(0.0, 0.0, 2.0),
            radiance: Vec3::ONE,
        };
        let r = Ray::new(Vec3::new(0.5, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        let (t, a, b) = intersect_quad(&r, &q, 0.0, f32::INFINITY).unwrap();
        assert!((t - 2.0).abs() < 1e-6);
        assert!((a - 0.75).abs() < 1e-6);
        assert!((b - 0.5).abs() < 1e-6);
        let miss = Ray::new(Vec3::new(1.5, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        assert!(intersect_quad(&miss, &q, 0.0, f32::INFINITY).is_none());
    }

    #[test]
    fn degenerate_triangle_never_hits() {
        let tri = [Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        assert!(triangle_is_degenerate(&tri));
        let r = Ray::new(Vec3::new(0.5, 1.0, 0.0), Vec3::new(0.0, -1.0, 0.0));
        assert!(intersect_triangle(&r, &tri, 0.0, f32::INFINITY).is_none());
    }
}
