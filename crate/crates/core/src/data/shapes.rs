//! Parametric surface sampling for the synthetic classes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::DataError;
use crate::geometry::{normalize_cloud, Point, PointCloud};

pub const SPHERE_RADIUS: f64 = 1.0;
pub const CUBE_HALF_EXTENT: f64 = 1.0;
pub const TORUS_RADII: (f64, f64) = (1.0, 0.35);
pub const CYLINDER_DIMS: (f64, f64) = (0.6, 1.6);
pub const CONE_DIMS: (f64, f64) = (0.8, 1.6);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [Self::Sphere, Self::Cube, Self::Torus, Self::Cylinder, Self::Cone];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Cube => "cube",
            Self::Torus => "torus",
            Self::Cylinder => "cylinder",
            Self::Cone => "cone",
        }
    }

    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }
}

/// Pose jitter applied after surface sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseJitter {
    pub rotate: bool,
    /// Per-axis scale drawn uniformly from this range.
    pub scale: (f64, f64),
}

impl PoseJitter {
    pub const NONE: PoseJitter = PoseJitter { rotate: false, scale: (1.0, 1.0) };
}

impl Default for PoseJitter {
    fn default() -> Self {
        Self { rotate: true, scale: (0.8, 1.2) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub n: usize,
    pub seed: u64,
    pub pose: PoseJitter,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, n: usize, seed: u64) -> Self {
        Self { kind, n, seed, pose: PoseJitter::default() }
    }
}

fn sample_sphere<R: Rng>(rng: &mut R) -> Point {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|x| SPHERE_RADIUS * x / n);
        }
    }
}

fn sample_cube<R: Rng>(rng: &mut R) -> Point {
    let e = CUBE_HALF_EXTENT;
    let face = rng.random_range(0..6);
    let u = rng.random_range(-e..=e);
    let v = rng.random_range(-e..=e);
    let s = if face % 2 == 0 { e } else { -e };
    match face / 2 {
        0 => [s, u, v],
        1 => [u, s, v],
        _ => [u, v, s],
    }
}

fn sample_torus<R: Rng>(rng: &mut R) -> Point {
    let (big, small) = TORUS_RADII;
    loop {
        let theta = rng.random_range(0.0..2.0 * PI);
        let phi = rng.random_range(0.0..2.0 * PI);
        // Area element is proportional to (R + r cos theta).
        if rng.random::<f64>() * (big + small) <= big + small * theta.cos() {
            let ring = big + small * theta.cos();
            return [ring * phi.cos(), ring * phi.sin(), small * theta.sin()];
        }
    }
}

fn sample_disc<R: Rng>(rng: &mut R, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    (r * a.cos(), r * a.sin())
}

fn sample_cylinder<R: Rng>(rng: &mut R) -> Point {
    let (r, h) = CYLINDER_DIMS;
    let side = 2.0 * PI * r * h;
    let caps = 2.0 * PI * r * r;
    if rng.random::<f64>() * (side + caps) < side {
        let a = rng.random_range(0.0..2.0 * PI);
        [r * a.cos(), r * a.sin(), rng.random_range(-h / 2.0..=h / 2.0)]
    } else {
        let (x, y) = sample_disc(rng, r);
        let z = if rng.random::<bool>() { h / 2.0 } else { -h / 2.0 };
        [x, y, z]
    }
}

fn sample_cone<R: Rng>(rng: &mut R) -> Point {
    let (r, h) = CONE_DIMS;
    let slant = (r * r + h * h).sqrt();
    let lateral = PI * r * slant;
    let base = PI * r * r;
    if rng.random::<f64>() * (lateral + base) < lateral {
        // Distance from the apex grows with the square root for uniform area.
        let s = rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..2.0 * PI);
        [r * s * a.cos(), r * s * a.sin(), h / 2.0 - h * s]
    } else {
        let (x, y) = sample_disc(rng, r);
        [x, y, -h / 2.0]
    }
}

/// Uniform samples on the raw surface, before pose jitter and normalization.
pub fn sample_surface<R: Rng>(kind: ShapeKind, n: usize, rng: &mut R) -> Vec<Point> {
    (0..n)
        .map(|_| match kind {
            ShapeKind::Sphere => sample_sphere(rng),
            ShapeKind::Cube => sample_cube(rng),
            ShapeKind::Torus => sample_torus(rng),
            ShapeKind::Cylinder => sample_cylinder(rng),
            ShapeKind::Cone => sample_cone(rng),
        })
        .collect()
}

fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let q: [f64; 4] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Seeded surface sample with pose jitter, normalized to the unit ball.
pub fn gen_shape(spec: &ShapeSpec) -> Result<PointCloud, DataError> {
    if spec.n < 64 {
        return Err(DataError::Invalid(format!("shape needs at least 64 points, got {}", spec.n)));
    }
    let (lo, hi) = spec.pose.scale;
    if !(lo > 0.0 && lo <= hi) {
        return Err(DataError::Invalid(format!("scale range ({lo}, {hi}) must be positive and ordered")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pts = sample_surface(spec.kind, spec.n, &mut rng);
    let scale: [f64; 3] = if lo < hi { std::array::from_fn(|_| rng.random_range(lo..=hi)) } else { [lo; 3] };
    let rot = if spec.pose.rotate { Some(random_rotation(&mut rng)) } else { None };
    for p in &mut pts {
        let s = [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]];
        *p = match rot {
            Some(m) => std::array::from_fn(|i| m[i][0] * s[0] + m[i][1] * s[1] + m[i][2] * s[2]),
            None => s,
        };
    }
    let pc = PointCloud::new(pts).map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(normalize_cloud(&pc))
}
