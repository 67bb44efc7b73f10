//! Procedural scenes: textured primitives, a directional light and a
//! camera rig.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraIntrinsics, CameraPose, DepthRange};

/// Surface geometry in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    /// Rectangle through `center` with unit `normal`, spanned by unit
    /// `axis_u` and `normal x axis_u`.
    Plane { center: Vector3<f64>, normal: Vector3<f64>, axis_u: Vector3<f64>, half_extent: [f64; 2] },
    /// Axis-aligned box.
    Cuboid { min: Vector3<f64>, max: Vector3<f64> },
    Sphere { center: Vector3<f64>, radius: f64 },
}

/// Solid texture: two octaves of value noise blended with a 3D checker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    pub frequency: f64,
    /// Checker weight in `[0, 1]`.
    pub checker: f64,
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

/// How cameras are placed around the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RigMode {
    /// Small baselines along a short arc, like a video.
    Sequence,
    /// Cameras spread over the full circle.
    Wide,
}

/// Parameters of one procedurally generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub rig: RigMode,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// Focal length as a fraction of the image width.
    pub focal: f64,
    /// Boxes and spheres resting on the ground.
    pub objects: usize,
    /// Tall thin boxes that hide parts of the scene from some cameras.
    pub occluders: usize,
    /// Amplitude of the per-view brightness gain around 1.
    pub lighting: f64,
    /// Total arc covered by a sequence rig, in degrees.
    pub sequence_arc: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            rig: RigMode::Wide,
            views: 20,
            height: 64,
            width: 80,
            focal: 0.9,
            objects: 6,
            occluders: 2,
            lighting: 0.15,
            sequence_arc: 40.0,
        }
    }
}

/// Half size of the square ground plane.
pub const GROUND_HALF: f64 = 2.0;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views < 5 {
            return Err(Error::Config(format!("scene needs at least 5 views, got {}", self.views)));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("image size {}x{} must be a positive multiple of 4", self.height, self.width)));
        }
        if !(self.focal > 0.0) || !(0.0..1.0).contains(&self.lighting) {
            return Err(Error::Config("focal must be positive and lighting in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let f = self.focal * self.width as f64;
        CameraIntrinsics::new(f, f, (self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
            .expect("positive focal")
    }
}

/// Geometry, appearance and cameras of one scene. Camera depth ranges are
/// placeholders until the views are rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub spec: SceneSpec,
    pub primitives: Vec<Primitive>,
    /// Unit vector towards the light.
    pub light: Vector3<f64>,
    pub cameras: Vec<Camera>,
    /// Per-view brightness gain.
    pub gains: Vec<f32>,
}

fn random_texture(rng: &mut impl Rng) -> Texture {
    let mut color = || -> [f32; 3] { [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)] };
    let (color_a, color_b) = (color(), color());
    Texture {
        seed: rng.random(),
        frequency: rng.random_range(3.0..6.0),
        checker: rng.random_range(0.2..0.6),
        color_a,
        color_b,
    }
}

impl Scene {
    /// Deterministic scene for `spec.seed`.
    pub fn generate(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut primitives = vec![Primitive {
            shape: Shape::Plane {
                center: Vector3::zeros(),
                normal: Vector3::z(),
                axis_u: Vector3::x(),
                half_extent: [GROUND_HALF, GROUND_HALF],
            },
            texture: random_texture(&mut rng),
        }];
        for _ in 0..spec.objects {
            let r = 1.3 * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let (x, y) = (r * a.cos(), r * a.sin());
            let shape = if rng.random_bool(0.5) {
                let half = Vector3::new(rng.random_range(0.15..0.45), rng.random_range(0.15..0.45), rng.random_range(0.1..0.45));
                let c = Vector3::new(x, y, half.z);
                Shape::Cuboid { min: c - half, max: c + half }
            } else {
                let radius = rng.random_range(0.2..0.45);
                Shape::Sphere { center: Vector3::new(x, y, radius), radius }
            };
            primitives.push(Primitive { shape, texture: random_texture(&mut rng) });
        }
        for _ in 0..spec.occluders {
            let r = rng.random_range(0.8..1.6);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let half = Vector3::new(rng.random_range(0.05..0.1), rng.random_range(0.05..0.1), rng.random_range(0.4..0.7));
            let c = Vector3::new(r * a.cos(), r * a.sin(), half.z);
            primitives.push(Primitive { shape: Shape::Cuboid { min: c - half, max: c + half }, texture: random_texture(&mut rng) });
        }
        let light = Vector3::new(0.4, 0.3, 0.85).normalize();
        let k = spec.intrinsics();
        let placeholder = DepthRange::new(0.1, 100.0)?;
        let n = spec.views;
        let start = rng.random_range(0.0..std::f64::consts::TAU);
        let mut cameras = Vec::with_capacity(n);
        let mut gains = Vec::with_capacity(n);
        for i in 0..n {
            let (angle, radius, height) = match spec.rig {
                RigMode::Wide => (
                    start + std::f64::consts::TAU * i as f64 / n as f64 + rng.random_range(-0.08..0.08),
                    rng.random_range(3.2..4.0),
                    rng.random_range(1.3..2.6),
                ),
                RigMode::Sequence => (
                    start + spec.sequence_arc.to_radians() * i as f64 / (n - 1) as f64 + rng.random_range(-0.01..0.01),
                    3.6 + rng.random_range(-0.05..0.05),
                    1.9 + rng.random_range(-0.05..0.05),
                ),
            };
            let eye = Vector3::new(radius * angle.cos(), radius * angle.sin(), height);
            let target = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.0..0.3));
            let pose = CameraPose::look_at(eye, target, Vector3::z())?;
            cameras.push(Camera { intrinsics: k, pose, range: placeholder });
            gains.push(1.0 + spec.lighting as f32 * rng.random_range(-1.0f32..1.0));
        }
        Ok(Self { spec: spec.clone(), primitives, light, cameras, gains })
    }
}
