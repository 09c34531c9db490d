//! Equirectangular and sphere geometry.
//!
//! Conventions, used everywhere in the crate:
//!
//! * Camera frame: y up, z forward through the image center, x right.
//! * A direction for latitude `lat` / longitude `lon` is
//!   `(cos lat * sin lon, sin lat, cos lat * cos lon)`.
//! * Pixel `(u, v)` has its center at `lon = (u + 0.5) / W * 2pi - pi`,
//!   `lat = pi/2 - (v + 0.5) / H * pi`, so `v = 0` is the top (north) row and
//!   `u` grows eastward with a periodic seam at `u = W - 0.5`.
//!
//! The sampling grids project a small square of tangent-plane offsets through
//! the inverse gnomonic map, which is what makes attention neighborhoods
//! follow the sphere instead of the distorted pixel lattice.

use std::f64::consts::PI;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("equirectangular layout must be 2:1, got {width}x{height}")]
    BadAspect { height: usize, width: usize },

    #[error("direction is {angle_deg:.1} degrees from the tangent point, beyond the {limit_deg:.0} degree guard")]
    OutsideTangentCap { angle_deg: f64, limit_deg: f64 },

    #[error("layout too small: {0}x{1}")]
    TooSmall(usize, usize),
}

/// Gnomonic projections are only trusted within this many degrees of the
/// tangent point; beyond it the map stretches without bound.
pub const TANGENT_CAP_DEG: f64 = 80.0;

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// A 2:1 equirectangular image layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErpLayout {
    pub height: usize,
    pub width: usize,
}

impl ErpLayout {
    pub fn new(height: usize, width: usize) -> Result<Self, GeometryError> {
        if height < 2 || width < 4 {
            return Err(GeometryError::TooSmall(height, width));
        }
        if width != 2 * height {
            return Err(GeometryError::BadAspect { height, width });
        }
        Ok(ErpLayout { height, width })
    }

    pub fn npixels(self) -> usize {
        self.height * self.width
    }

    /// Angular width of one equatorial pixel (radians); equal to the angular
    /// height of every pixel row on a 2:1 layout.
    pub fn pixel_pitch(self) -> f64 {
        2.0 * PI / self.width as f64
    }

    /// Continuous pixel coordinates to (lon, lat); integer u, v address pixel
    /// centers.
    pub fn pixel_to_latlon(self, u: f64, v: f64) -> (f64, f64) {
        let lon = (u + 0.5) / self.width as f64 * 2.0 * PI - PI;
        let lat = PI / 2.0 - (v + 0.5) / self.height as f64 * PI;
        (lon, lat)
    }

    /// Inverse of [`Self::pixel_to_latlon`]. `lon` outside `[-pi, pi)` wraps;
    /// the returned u lies in `[-0.5, W - 0.5)`.
    pub fn latlon_to_pixel(self, lon: f64, lat: f64) -> (f64, f64) {
        let lon = wrap_angle(lon);
        let u = (lon + PI) / (2.0 * PI) * self.width as f64 - 0.5;
        let v = (PI / 2.0 - lat) / PI * self.height as f64 - 0.5;
        (u, v)
    }

    /// Unit view direction through the center of pixel `(u, v)`.
    pub fn pixel_to_dir(self, u: f64, v: f64) -> Vec3 {
        let (lon, lat) = self.pixel_to_latlon(u, v);
        latlon_to_dir(lon, lat)
    }
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = (a + PI).rem_euclid(two_pi);
    if r < 0.0 {
        r += two_pi;
    }
    r - PI
}

pub fn latlon_to_dir(lon: f64, lat: f64) -> Vec3 {
    let (cl, sl) = (lat.cos(), lat.sin());
    [cl * lon.sin(), sl, cl * lon.cos()]
}

/// (lon, lat) of a direction; the input need not be unit length.
pub fn dir_to_latlon(d: Vec3) -> (f64, f64) {
    let n = norm(d);
    let lat = (d[1] / n).clamp(-1.0, 1.0).asin();
    let lon = if d[0] == 0.0 && d[2] == 0.0 { 0.0 } else { d[0].atan2(d[2]) };
    (lon, lat)
}

/// Orthonormal tangent frame at a point on the sphere: `east` points toward
/// growing longitude, `north` toward growing latitude. At the poles, where
/// east degenerates, it is pinned to +x.
#[derive(Debug, Clone, Copy)]
pub struct TangentFrame {
    pub center: Vec3,
    pub east: Vec3,
    pub north: Vec3,
}

impl TangentFrame {
    pub fn at_dir(center: Vec3) -> Self {
        let center = normalize(center);
        let up = [0.0, 1.0, 0.0];
        let e = cross(up, center);
        let en = norm(e);
        let east = if en < 1e-12 { [1.0, 0.0, 0.0] } else { scale(e, 1.0 / en) };
        let north = cross(center, east);
        TangentFrame { center, east, north }
    }

    pub fn at_latlon(lon: f64, lat: f64) -> Self {
        Self::at_dir(latlon_to_dir(lon, lat))
    }

    /// Gnomonic (tangent-plane) projection. A point at angular distance
    /// `theta` from the center lands at planar radius `tan(theta)`.
    /// Directions beyond [`TANGENT_CAP_DEG`] are rejected.
    pub fn gnomonic(&self, dir: Vec3) -> Result<(f64, f64), GeometryError> {
        let dir = normalize(dir);
        let c = dot(dir, self.center);
        let limit = (TANGENT_CAP_DEG.to_radians()).cos();
        if c < limit {
            return Err(GeometryError::OutsideTangentCap {
                angle_deg: c.clamp(-1.0, 1.0).acos().to_degrees(),
                limit_deg: TANGENT_CAP_DEG,
            });
        }
        let t = scale(dir, 1.0 / c);
        Ok((dot(t, self.east), dot(t, self.north)))
    }

    /// Inverse gnomonic: tangent-plane offset back to a unit direction.
    pub fn gnomonic_inv(&self, x: f64, y: f64) -> Vec3 {
        normalize(add(self.center, add(scale(self.east, x), scale(self.north, y))))
    }
}

/// Per-token spherical sampling locations in fractional ERP pixels.
///
/// Layout of `coords` is `[K, 2, H, W]` with channel 0 = u, 1 = v, matching
/// the coordinate tensors consumed by the attention sampler. Sample k indexes
/// the tangent square row-major, so at the equator k runs over the familiar
/// 3x3 pixel neighborhood in reading order. u values are left unwrapped
/// (continuous near the token); v is clamped to `[-0.5, H - 0.5]`.
#[derive(Debug, Clone)]
pub struct SamplingGrid {
    pub layout: ErpLayout,
    pub k_side: usize,
    /// tangent-plane offset between adjacent samples (radians)
    pub spacing: f64,
    pub coords: Vec<f64>,
}

impl SamplingGrid {
    pub fn k(&self) -> usize {
        self.k_side * self.k_side
    }

    /// (u, v) of sample `k` for the token at `(y, x)`.
    pub fn at(&self, y: usize, x: usize, k: usize) -> (f64, f64) {
        let (h, w) = (self.layout.height, self.layout.width);
        let u = self.coords[((k * 2) * h + y) * w + x];
        let v = self.coords[((k * 2 + 1) * h + y) * w + x];
        (u, v)
    }
}

/// Build the deformable-attention base grid: a `k_side x k_side` square of
/// tangent-plane points at multiples of `spacing`, projected back to
/// fractional ERP coordinates around every token.
pub fn build_sampling_grid(
    layout: ErpLayout,
    k_side: usize,
    spacing: f64,
) -> Result<SamplingGrid, GeometryError> {
    if k_side == 0 || k_side % 2 == 0 {
        return Err(GeometryError::TooSmall(k_side, k_side));
    }
    let (h, w) = (layout.height, layout.width);
    let k = k_side * k_side;
    let r = (k_side / 2) as isize;
    let wf = w as f64;
    let mut coords = vec![0.0f64; k * 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (uc, _vc) = (x as f64, y as f64);
            let (lon, lat) = layout.pixel_to_latlon(uc, y as f64);
            let frame = TangentFrame::at_latlon(lon, lat);
            for jy in -r..=r {
                for jx in -r..=r {
                    let ki = ((jy + r) as usize) * k_side + (jx + r) as usize;
                    // +jx steps east (u grows), +jy steps down the image
                    // (v grows, latitude falls)
                    let dir = frame.gnomonic_inv(jx as f64 * spacing, -(jy as f64) * spacing);
                    let (slon, slat) = dir_to_latlon(dir);
                    let (mut su, sv) = layout.latlon_to_pixel(slon, slat);
                    // keep u continuous near the token instead of wrapped
                    su -= wf * ((su - uc) / wf).round();
                    let sv = sv.clamp(-0.5, h as f64 - 0.5);
                    coords[((ki * 2) * h + y) * w + x] = su;
                    coords[((ki * 2 + 1) * h + y) * w + x] = sv;
                }
            }
        }
    }
    Ok(SamplingGrid { layout, k_side, spacing, coords })
}

/// Back-project a depth map to camera-space points (`depth` is Euclidean ray
/// length, not planar z). Invalid pixels yield `None`.
pub fn depth_to_points(
    layout: ErpLayout,
    depth: &[f64],
    mask: &[bool],
) -> Vec<Option<Vec3>> {
    let (h, w) = (layout.height, layout.width);
    debug_assert_eq!(depth.len(), h * w);
    debug_assert_eq!(mask.len(), h * w);
    let mut pts = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask[i] {
                let dir = layout.pixel_to_dir(x as f64, y as f64);
                pts[i] = Some(scale(dir, depth[i]));
            }
        }
    }
    pts
}

/// Finite-difference surface normals from a depth map; the reference
/// implementation used to cross-check analytic ground truth and predictions.
///
/// Tangents are central differences of back-projected points (u wraps, v does
/// not), the normal is their cross product, sign-flipped to face the camera.
/// Returns `[3, H, W]` normals and a validity mask; pixels fail when any
/// neighbor is invalid, the cross product degenerates, or the row touches the
/// poles (no vertical neighbors).
pub fn depth_to_normals_oracle(
    layout: ErpLayout,
    depth: &[f64],
    mask: &[bool],
) -> (Vec<f64>, Vec<bool>) {
    let (h, w) = (layout.height, layout.width);
    let pts = depth_to_points(layout, depth, mask);
    let mut normals = vec![0.0f64; 3 * h * w];
    let mut ok = vec![false; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 0..w {
            let i = y * w + x;
            let xe = (x + 1) % w;
            let xw = (x + w - 1) % w;
            let (Some(pe), Some(pw), Some(ps), Some(pn), Some(_pc)) = (
                pts[y * w + xe],
                pts[y * w + xw],
                pts[(y + 1) * w + x],
                pts[(y - 1) * w + x],
                pts[i],
            ) else {
                continue;
            };
            let tu = sub(pe, pw);
            let tv = sub(ps, pn);
            let n = cross(tv, tu);
            let len = norm(n);
            if len < 1e-12 {
                continue;
            }
            let mut n = scale(n, 1.0 / len);
            let view = layout.pixel_to_dir(x as f64, y as f64);
            if dot(n, view) > 0.0 {
                n = scale(n, -1.0);
            }
            normals[i] = n[0];
            normals[h * w + i] = n[1];
            normals[2 * h * w + i] = n[2];
            ok[i] = true;
        }
    }
    (normals, ok)
}
