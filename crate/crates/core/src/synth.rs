//! Seeded box-world generator: axis-aligned rooms with a few boxes inside,
//! ray-cast into equirectangular panoramas with analytically exact depth,
//! normals and validity. This stands in for captured datasets, so training
//! and evaluation stay fully reproducible on one machine.
//!
//! Depth is the Euclidean ray length in meters, matching the point
//! reconstruction `p = dir * depth`. Normals follow the camera-facing
//! convention used everywhere else in the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{dot, norm, scale, ErpLayout, Vec3};
use crate::{Error, Result};

/// Room widths in meters.
pub const ROOM_WIDTH_RANGE: (f64, f64) = (3.0, 8.0);
/// Object edge lengths in meters.
pub const OBJECT_SIZE_RANGE: (f64, f64) = (0.3, 1.5);
/// The camera keeps at least this clearance from every object, in meters.
pub const CAMERA_CLEARANCE: f64 = 0.3;
/// No surface may be farther than this from the camera, keeping normalized
/// depth safely inside the unit range the depth head can express.
pub const MAX_CORNER_DISTANCE: f64 = 9.5;
/// Ambient term added to the diffuse response before the albedo scales it.
pub const AMBIENT: f64 = 0.2;

const RETRY_BOUND: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn widths(&self) -> Vec3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    /// Euclidean distance from `p` to the box (zero inside).
    pub fn distance(&self, p: Vec3) -> f64 {
        let mut sq = 0.0;
        for a in 0..3 {
            let d = (self.min[a] - p[a]).max(0.0).max(p[a] - self.max[a]);
            sq += d * d;
        }
        sq.sqrt()
    }

    /// Absolute distance from `p` to the surface (inside or out).
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        if !self.contains(p) {
            return self.distance(p);
        }
        (0..3)
            .map(|a| (p[a] - self.min[a]).min(self.max[a] - p[a]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn encloses(&self, other: &Aabb) -> bool {
        (0..3).all(|a| other.min[a] >= self.min[a] && other.max[a] <= self.max[a])
    }
}

/// Outward unit normal of face `f` (+x, -x, +y, -y, +z, -z).
fn face_normal(f: usize) -> Vec3 {
    let mut n = [0.0; 3];
    n[f / 2] = if f % 2 == 0 { 1.0 } else { -1.0 };
    n
}

/// One generated scene. The camera sits at the origin, strictly inside the
/// room and clear of every object.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxScene {
    pub seed: u64,
    pub room: Aabb,
    pub objects: Vec<Aabb>,
    /// Albedo per face: entry 0 is the room, then one per object; faces are
    /// ordered +x, -x, +y, -y, +z, -z.
    pub albedo: Vec<[[f64; 3]; 6]>,
    /// Unit direction from surfaces toward the light.
    pub light: Vec3,
}

fn rand_unit_dir(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let l = norm(v);
        if l > 0.1 && l < 1.0 {
            return scale(v, 1.0 / l);
        }
    }
}

fn rand_albedo(rng: &mut ChaCha8Rng) -> [[f64; 3]; 6] {
    let mut a = [[0.0; 3]; 6];
    for f in a.iter_mut() {
        for c in f.iter_mut() {
            *c = rng.gen_range(0.2..0.95);
        }
    }
    a
}

/// Deterministic scene from a seed. The room is drawn until its farthest
/// corner is close enough; each object retries placement up to a bound, then
/// shrinks and tries again, so generation always terminates.
pub fn sample_scene(seed: u64) -> BoxScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = loop {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..3 {
            let w = rng.gen_range(ROOM_WIDTH_RANGE.0..ROOM_WIDTH_RANGE.1);
            // Center offset keeps the origin strictly inside with clearance.
            let c = rng.gen_range(-0.8..0.8) * w / 2.0;
            min[a] = c - w / 2.0;
            max[a] = c + w / 2.0;
        }
        let far = (0..3)
            .map(|a| min[a].abs().max(max[a].abs()).powi(2))
            .sum::<f64>()
            .sqrt();
        if far <= MAX_CORNER_DISTANCE {
            break Aabb { min, max };
        }
    };

    let n_objects = rng.gen_range(0..=6);
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut size = [
            rng.gen_range(OBJECT_SIZE_RANGE.0..OBJECT_SIZE_RANGE.1),
            rng.gen_range(OBJECT_SIZE_RANGE.0..OBJECT_SIZE_RANGE.1),
            rng.gen_range(OBJECT_SIZE_RANGE.0..OBJECT_SIZE_RANGE.1),
        ];
        'place: loop {
            for _ in 0..RETRY_BOUND {
                let mut min = [0.0; 3];
                let mut max = [0.0; 3];
                for a in 0..3 {
                    let lo = room.min[a] + size[a] / 2.0;
                    let hi = room.max[a] - size[a] / 2.0;
                    let c = rng.gen_range(lo..hi);
                    min[a] = c - size[a] / 2.0;
                    max[a] = c + size[a] / 2.0;
                }
                let b = Aabb { min, max };
                if b.distance([0.0; 3]) >= CAMERA_CLEARANCE {
                    objects.push(b);
                    break 'place;
                }
            }
            for s in &mut size {
                *s *= 0.5;
            }
        }
    }

    let mut albedo = Vec::with_capacity(1 + objects.len());
    for _ in 0..=objects.len() {
        albedo.push(rand_albedo(&mut rng));
    }
    let light = rand_unit_dir(&mut rng);
    BoxScene { seed, room, objects, albedo, light }
}

/// A rendered panorama with exact ground truth. All maps are channel-major
/// and row-major within a channel, like the tensors they feed.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoSample {
    pub layout: ErpLayout,
    /// `[3*h*w]`, each channel in [0, 1].
    pub rgb: Vec<f64>,
    /// `[h*w]` Euclidean ray length, meters.
    pub depth: Vec<f64>,
    /// `[3*h*w]` unit normals facing the camera.
    pub normal: Vec<f64>,
    /// All true: every ray hits the room.
    pub mask: Vec<bool>,
    /// `[h*w]` hit identity, `box_index * 6 + face`; box 0 is the room.
    pub face_id: Vec<u32>,
}

/// Exit distance and face for a ray starting inside `b`.
fn exit_box(b: &Aabb, d: Vec3) -> (f64, usize) {
    let mut t_best = f64::INFINITY;
    let mut face = 0;
    for a in 0..3 {
        if d[a] > 0.0 {
            let t = b.max[a] / d[a];
            if t < t_best {
                t_best = t;
                face = 2 * a;
            }
        } else if d[a] < 0.0 {
            let t = b.min[a] / d[a];
            if t < t_best {
                t_best = t;
                face = 2 * a + 1;
            }
        }
    }
    (t_best, face)
}

/// Entry distance and face for a ray starting outside `b`, if it hits.
fn enter_box(b: &Aabb, d: Vec3) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut face = 0;
    for a in 0..3 {
        if d[a] == 0.0 {
            if 0.0 < b.min[a] || 0.0 > b.max[a] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = (b.min[a] / d[a], b.max[a] / d[a]);
        let mut f0 = 2 * a + 1;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            f0 = 2 * a;
        }
        if t0 > t_near {
            t_near = t0;
            face = f0;
        }
        t_far = t_far.min(t1);
    }
    (t_near <= t_far && t_near > 1e-9).then_some((t_near, face))
}

/// Cast one ray from the origin; returns (distance, box index, face).
fn cast(scene: &BoxScene, d: Vec3) -> (f64, usize, usize) {
    let (mut t, f) = exit_box(&scene.room, d);
    let mut hit = (0usize, f);
    for (i, b) in scene.objects.iter().enumerate() {
        if let Some((ti, fi)) = enter_box(b, d) {
            if ti < t {
                t = ti;
                hit = (i + 1, fi);
            }
        }
    }
    (t, hit.0, hit.1)
}

/// Render the scene into a panorama at the given layout.
pub fn raycast(scene: &BoxScene, layout: ErpLayout) -> PanoSample {
    let (h, w) = (layout.height, layout.width);
    let n = h * w;
    let mut rgb = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let mut normal = vec![0.0; 3 * n];
    let mut face_id = vec![0u32; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dir = layout.pixel_to_dir(x as f64, y as f64);
            let (t, box_idx, face) = cast(scene, dir);
            let mut nrm = face_normal(face);
            if dot(nrm, dir) > 0.0 {
                nrm = scale(nrm, -1.0);
            }
            let lit = dot(nrm, scene.light).max(0.0) + AMBIENT;
            let alb = scene.albedo[box_idx][face];
            depth[i] = t;
            face_id[i] = (box_idx * 6 + face) as u32;
            for c in 0..3 {
                normal[c * n + i] = nrm[c];
                rgb[c * n + i] = (alb[c] * lit).clamp(0.0, 1.0);
            }
        }
    }
    PanoSample { layout, rgb, depth, normal, mask: vec![true; n], face_id }
}

/// Render the scene for `seed` at the layout; the one-call entry the dataset
/// writer and tests share.
pub fn render_sample(seed: u64, layout: ErpLayout) -> PanoSample {
    raycast(&sample_scene(seed), layout)
}

/// Validate scene invariants; generation upholds them by construction, and
/// the loader re-checks imported scenes.
pub fn check_scene(scene: &BoxScene) -> Result<()> {
    let wr = scene.room.widths();
    if wr.iter().any(|w| *w < ROOM_WIDTH_RANGE.0 - 1e-9 || *w > ROOM_WIDTH_RANGE.1 + 1e-9) {
        return Err(Error::invalid("room widths out of range"));
    }
    if !scene.room.contains([0.0; 3]) {
        return Err(Error::invalid("camera outside the room"));
    }
    if scene.objects.len() > 6 {
        return Err(Error::invalid("too many objects"));
    }
    for b in &scene.objects {
        if !scene.room.encloses(b) {
            return Err(Error::invalid("object pokes out of the room"));
        }
        if b.widths().iter().any(|w| *w <= 0.0) {
            return Err(Error::invalid("degenerate object"));
        }
        if b.distance([0.0; 3]) < CAMERA_CLEARANCE - 1e-9 {
            return Err(Error::invalid("object too close to the camera"));
        }
    }
    if scene.albedo.len() != scene.objects.len() + 1 {
        return Err(Error::invalid("albedo table size mismatch"));
    }
    if (norm(scene.light) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("light direction not unit"));
    }
    Ok(())
}
