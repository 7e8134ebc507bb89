//! Scattering functions for the four material kinds.
//!
//! All directions are world space and point away from the surface. `n` is the
//! shading normal flipped to the side of `wo`, except for dielectrics which
//! need the outward normal to tell entering from leaving.

use std::f32::consts::{FRAC_1_PI, PI};

use crate::math::Vec3;
use crate::scene::Material;

const MIN_ALPHA: f32 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct BsdfSample {
    pub wi: Vec3,
    /// f * |cos| / pdf
    pub weight: Vec3,
    /// Solid-angle density; meaningless when `delta` is set.
    pub pdf: f32,
    pub delta: bool,
}

/// True when the material has no non-delta lobe and direct light sampling is useless.
pub fn is_delta(m: &Material) -> bool {
    match *m {
        Material::Metal { roughness, .. } => roughness * roughness < MIN_ALPHA,
        Material::Dielectric { .. } | Material::Emissive { .. } => true,
        Material::Diffuse { .. } => false,
    }
}

#[inline]
fn reflect(wo: Vec3, n: Vec3) -> Vec3 {
    n * (2.0 * wo.dot(n)) - wo
}

#[inline]
fn schlick(f0: Vec3, cos: f32) -> Vec3 {
    let m = (1.0 - cos).clamp(0.0, 1.0);
    let m5 = m * m * m * m * m;
    f0 + (Vec3::ONE - f0) * m5
}

fn ggx_d(alpha: f32, cos_h: f32) -> f32 {
    let a2 = alpha * alpha;
    let c2 = cos_h * cos_h;
    let d = c2 * (a2 - 1.0) + 1.0;
    a2 / (PI * d * d)
}

fn ggx_g1(alpha: f32, cos: f32) -> f32 {
    let a2 = alpha * alpha;
    2.0 * cos / (cos + (a2 + (1.0 - a2) * cos * cos).sqrt())
}

/// Evaluates `(f, pdf)` for a non-delta material.
pub fn eval(m: &Material, wo: Vec3, wi: Vec3, n: Vec3) -> (Vec3, f32) {
    let cos_o = n.dot(wo);
    let cos_i = n.dot(wi);
    if cos_o <= 0.0 || cos_i <= 0.0 {
        return (Vec3::ZERO, 0.0);
    }
    match *m {
        Material::Diffuse { albedo } => (albedo * FRAC_1_PI, cos_i * FRAC_1_PI),
        Material::Metal { albedo, roughness } => {
            let alpha = roughness * roughness;
            if alpha < MIN_ALPHA {
                return (Vec3::ZERO, 0.0);
            }
            let h = (wo + wi).normalize();
            let cos_h = n.dot(h);
            let oh = wo.dot(h);
            if cos_h <= 0.0 || oh <= 0.0 {
                return (Vec3::ZERO, 0.0);
            }
            let d = ggx_d(alpha, cos_h);
            let g = ggx_g1(alpha, cos_o) * ggx_g1(alpha, cos_i);
            let f = schlick(albedo, oh) * (d * g / (4.0 * cos_o * cos_i));
            (f, d * cos_h / (4.0 * oh))
        }
        Material::Dielectric { .. } | Material::Emissive { .. } => (Vec3::ZERO, 0.0),
    }
}

/// Samples an incident direction. `u` holds three uniform numbers.
pub fn sample(m: &Material, wo: Vec3, n: Vec3, u: [f32; 3]) -> Option<BsdfSample> {
    match *m {
        Material::Diffuse { albedo } => {
            let r = u[0].sqrt();
            let phi = 2.0 * PI * u[1];
            let z = (1.0 - u[0]).max(0.0).sqrt();
            let (t, b) = n.basis();
            let wi = (t * (r * phi.cos()) + b * (r * phi.sin()) + n * z).normalize();
            let cos = n.dot(wi);
            if cos <= 0.0 || n.dot(wo) <= 0.0 {
                return None;
            }
            Some(BsdfSample { wi, weight: albedo, pdf: cos * FRAC_1_PI, delta: false })
        }
        Material::Metal { albedo, roughness } => {
            let cos_o = n.dot(wo);
            if cos_o <= 0.0 {
                return None;
            }
            let alpha = roughness * roughness;
            if alpha < MIN_ALPHA {
                let wi = reflect(wo, n);
                return Some(BsdfSample { wi, weight: schlick(albedo, cos_o), pdf: 1.0, delta: true });
            }
            let a2 = alpha * alpha;
            let cos2 = (1.0 - u[0]) / (1.0 + (a2 - 1.0) * u[0]);
            let cos_h = cos2.sqrt();
            let sin_h = (1.0 - cos2).max(0.0).sqrt();
            let phi = 2.0 * PI * u[1];
            let (t, b) = n.basis();
            let h = (t * (sin_h * phi.cos()) + b * (sin_h * phi.sin()) + n * cos_h).normalize();
            let oh = wo.dot(h);
            if oh <= 0.0 {
                return None;
            }
            let wi = reflect(wo, h);
            let cos_i = n.dot(wi);
            if cos_i <= 0.0 {
                return None;
            }
            let cos_h = n.dot(h);
            let g = ggx_g1(alpha, cos_o) * ggx_g1(alpha, cos_i);
            let weight = schlick(albedo, oh) * (g * oh / (cos_o * cos_h));
            let pdf = ggx_d(alpha, cos_h) * cos_h / (4.0 * oh);
            Some(BsdfSample { wi, weight, pdf, delta: false })
        }
        Material::Dielectric { ior, albedo } => {
            let cos_o = wo.dot(n);
            let (eta, n, cos_o) = if cos_o > 0.0 { (1.0 / ior, n, cos_o) } else { (ior, -n, -cos_o) };
            let sin2_t = eta * eta * (1.0 - cos_o * cos_o);
            let fresnel = if sin2_t >= 1.0 {
                1.0
            } else {
                let cos_t = (1.0 - sin2_t).sqrt();
                let rs = (eta * cos_o - cos_t) / (eta * cos_o + cos_t);
                let rp = (cos_o - eta * cos_t) / (cos_o + eta * cos_t);
                0.5 * (rs * rs + rp * rp)
            };
            let wi = if u[2] < fresnel {
                reflect(wo, n)
            } else {
                let cos_t = (1.0 - sin2_t).sqrt();
                (-wo * eta + n * (eta * cos_o - cos_t)).normalize()
            };
            Some(BsdfSample { wi, weight: albedo, pdf: 1.0, delta: true })
        }
        Material::Emissive { .. } => None,
    }
}
