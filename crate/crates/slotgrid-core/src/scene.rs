//! Procedural synthetic LiDAR scenes with ground-truth boxes.
//!
//! Objects are placed by rejection sampling (non-overlapping in BEV, fully
//! inside the extent) and surfaced with one of three sampling modes. L-shape
//! sampling hits only the two faces visible from the sensor at the origin,
//! which leaves object centers empty the way real LiDAR self-occlusion does.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::{rotated_iou_bev, BoxLabel};
use crate::error::{Error, Result};
use crate::math;
use crate::sparse::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceMode {
    /// Two sensor-facing faces only.
    LShape,
    /// A ring around the object axis.
    Ring,
    /// Uniform points inside the box.
    UniformInBox,
}

/// One object class: name plus dimension ranges in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
}

/// Car-like and pedestrian-like classes.
pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "car".into(),
            length: (3.8, 4.8),
            width: (1.7, 2.1),
            height: (1.4, 1.7),
        },
        ClassSpec {
            name: "pedestrian".into(),
            length: (0.5, 0.7),
            width: (0.5, 0.7),
            height: (1.6, 1.8),
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Lower-left corner of the scene in meters.
    pub origin: (f64, f64),
    /// Scene side lengths in meters.
    pub size: (f64, f64),
    pub num_objects: (usize, usize),
    pub classes: Vec<ClassSpec>,
    pub points_per_object: (usize, usize),
    /// Expected clutter points per square meter.
    pub clutter_density: f64,
    pub mode: SurfaceMode,
    /// Inset from the scene boundary that boxes must respect.
    pub margin: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.0 <= 0.0 || self.size.1 <= 0.0 {
            return Err(Error::Invalid("scene size must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Invalid("scene needs at least one class".into()));
        }
        if self.num_objects.0 > self.num_objects.1 {
            return Err(Error::Invalid("num_objects range is inverted".into()));
        }
        if self.points_per_object.0 < 1 || self.points_per_object.0 > self.points_per_object.1 {
            return Err(Error::Invalid(
                "points_per_object must be a valid range with minimum >= 1".into(),
            ));
        }
        if self.clutter_density < 0.0 {
            return Err(Error::Invalid("clutter density must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            origin: (-20.48, -20.48),
            size: (40.96, 40.96),
            num_objects: (1, 4),
            classes: default_classes(),
            points_per_object: (24, 64),
            clutter_density: 0.04,
            mode: SurfaceMode::LShape,
            margin: 1.0,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 128;

fn sample_range(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

fn place_objects(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<Vec<BoxLabel>> {
    let count = if spec.num_objects.0 == spec.num_objects.1 {
        spec.num_objects.0
    } else {
        rng.gen_range(spec.num_objects.0..=spec.num_objects.1)
    };
    let mut boxes: Vec<BoxLabel> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let class_id = rng.gen_range(0..spec.classes.len());
            let class = &spec.classes[class_id];
            let l = sample_range(rng, class.length);
            let w = sample_range(rng, class.width);
            let h = sample_range(rng, class.height);
            let yaw = rng.gen_range(-core::f64::consts::PI..core::f64::consts::PI);
            // Keep the whole rotated footprint inside the extent.
            let half_diag = 0.5 * math::sqrt(l * l + w * w);
            let inset = spec.margin + half_diag;
            let (x_lo, x_hi) = (spec.origin.0 + inset, spec.origin.0 + spec.size.0 - inset);
            let (y_lo, y_hi) = (spec.origin.1 + inset, spec.origin.1 + spec.size.1 - inset);
            if x_lo >= x_hi || y_lo >= y_hi {
                continue;
            }
            let cx = rng.gen_range(x_lo..x_hi);
            let cy = rng.gen_range(y_lo..y_hi);
            let candidate = BoxLabel {
                cx,
                cy,
                cz: h * 0.5,
                l,
                w,
                h,
                yaw,
                class_id,
            };
            if boxes.iter().all(|b| rotated_iou_bev(b, &candidate) == 0.0) {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleScene(format!(
                "could not place {count} non-overlapping objects in a {:.1} x {:.1} m scene",
                spec.size.0, spec.size.1
            )));
        }
    }
    Ok(boxes)
}

/// Rotates a box-frame offset into the world and adds the center.
fn box_to_world(b: &BoxLabel, u: f64, v: f64) -> (f64, f64) {
    let (s, c) = (math::sin(b.yaw), math::cos(b.yaw));
    (b.cx + c * u - s * v, b.cy + s * u + c * v)
}

fn sample_object_point(rng: &mut ChaCha8Rng, b: &BoxLabel, mode: SurfaceMode) -> Point {
    let intensity = rng.gen_range(0.1..0.9);
    let z = b.cz - b.h * 0.5 + rng.gen_range(0.05..0.95) * b.h;
    match mode {
        SurfaceMode::UniformInBox => {
            let u = rng.gen_range(-0.5..0.5) * b.l;
            let v = rng.gen_range(-0.5..0.5) * b.w;
            let (x, y) = box_to_world(b, u, v);
            Point::new(x, y, z, intensity)
        }
        SurfaceMode::Ring => {
            let r = 0.45 * b.l.min(b.w);
            let angle = rng.gen_range(0.0..core::f64::consts::TAU);
            let (x, y) = box_to_world(b, r * math::cos(angle), r * math::sin(angle));
            Point::new(x, y, z, intensity)
        }
        SurfaceMode::LShape => {
            // Sensor direction in the box frame decides the two visible faces.
            let (s, c) = (math::sin(b.yaw), math::cos(b.yaw));
            let dx = -b.cx;
            let dy = -b.cy;
            let du = c * dx + s * dy;
            let dv = -s * dx + c * dy;
            let face_x_sign = if du >= 0.0 { 1.0 } else { -1.0 };
            let face_y_sign = if dv >= 0.0 { 1.0 } else { -1.0 };
            // Pick one of the two faces with probability proportional to its
            // BEV length, then sample along it with a little inward jitter.
            let pick_x_face = rng.gen_range(0.0..(b.l + b.w)) < b.w;
            let jitter = rng.gen_range(0.0..0.04);
            let (u, v) = if pick_x_face {
                (
                    face_x_sign * (b.l * 0.5 - jitter),
                    rng.gen_range(-0.5..0.5) * b.w,
                )
            } else {
                (
                    rng.gen_range(-0.5..0.5) * b.l,
                    face_y_sign * (b.w * 0.5 - jitter),
                )
            };
            let (x, y) = box_to_world(b, u, v);
            Point::new(x, y, z, intensity)
        }
    }
}

/// Generates one scene: object surface points plus ground clutter, and the
/// ground-truth boxes. Deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Vec<Point>, Vec<BoxLabel>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let boxes = place_objects(&mut rng, spec)?;
    let mut points = Vec::new();
    for b in &boxes {
        let count = if spec.points_per_object.0 == spec.points_per_object.1 {
            spec.points_per_object.0
        } else {
            rng.gen_range(spec.points_per_object.0..=spec.points_per_object.1)
        };
        for _ in 0..count {
            points.push(sample_object_point(&mut rng, b, spec.mode));
        }
    }
    let clutter_count = math::round(spec.clutter_density * spec.size.0 * spec.size.1) as usize;
    for _ in 0..clutter_count {
        let x = spec.origin.0 + rng.gen_range(0.0..1.0) * spec.size.0;
        let y = spec.origin.1 + rng.gen_range(0.0..1.0) * spec.size.1;
        let z = rng.gen_range(0.0..0.4);
        let intensity = rng.gen_range(0.1..0.9);
        points.push(Point::new(x, y, z, intensity));
    }
    Ok((points, boxes))
}
