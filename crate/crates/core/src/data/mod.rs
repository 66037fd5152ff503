//! Synthetic dataset generation and file formats.
//!
//! A dataset directory holds `manifest.jsonl` plus `points/<id>.pdco`
//! (`[n, 3]`) and `depth/<id>.pdco` (`[32, 32]`) for every record.

mod pdco;
mod ply;
mod render;
mod shapes;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PointCloud;
use crate::seeds::derive_seed;
use crate::tensorcore::Array;

pub use pdco::{decode as decode_tensor, encode as encode_tensor, read_tensor, write_tensor, Dtype, PdcoError};
pub use ply::{export_ply, export_xyz, parse_ply, parse_xyz, ply_string, read_ply};
pub use render::{render_depth, View, DEPTH_RES, DEPTH_SENTINEL};
pub use shapes::{
    gen_shape, sample_surface, PoseJitter, ShapeKind, ShapeSpec, CONE_DIMS, CUBE_HALF_EXTENT, CYLINDER_DIMS, SPHERE_RADIUS,
    TORUS_RADII,
};

pub const CLASS_NAMES: [&str; 5] = ["sphere", "cube", "torus", "cylinder", "cone"];

pub const TEMPLATES: [&str; 8] = [
    "a point cloud of a {}",
    "a 3D model of a {}",
    "a depth map of a {}",
    "there is a {} in the scene",
    "a photo of a {}",
    "a rendering of a {}",
    "an object shaped like a {}",
    "a sketch of a {}",
];

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Tensor(#[from] PdcoError),
}

pub fn prompt_text(label: usize, template_index: usize) -> Result<String, DataError> {
    let name = CLASS_NAMES.get(label).ok_or_else(|| DataError::Invalid(format!("unknown label {label}")))?;
    let template =
        TEMPLATES.get(template_index).ok_or_else(|| DataError::Invalid(format!("unknown template {template_index}")))?;
    Ok(template.replace("{}", name))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    pub class_name: String,
    pub points: String,
    pub depth: String,
    pub prompt: String,
    pub template_index: usize,
    pub split: Split,
}

/// A record with its tensors loaded.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub template_index: usize,
    pub points: PointCloud,
    pub depth: Array,
}

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub pose: PoseJitter,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { seed: 0, train_per_class: 200, test_per_class: 50, points: 2048, pose: PoseJitter::default() }
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |e| DataError::Io(format!("{}: {e}", path.display()))
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| DataError::Io(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io(path))?;
    f.write_all(&out).map_err(io(path))
}

pub fn parse_manifest(text: &str) -> Result<Vec<SampleRecord>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DataError::Parse(format!("manifest line {}: {e}", i + 1))))
        .collect()
}

/// Generates every sample and writes the dataset directory. Each sample
/// draws from its own stream derived from `(seed, split, label, index)`.
pub fn gen_dataset(out: &Path, opts: &GenOptions) -> Result<Vec<SampleRecord>, DataError> {
    for sub in ["points", "depth"] {
        fs::create_dir_all(out.join(sub)).map_err(io(out))?;
    }
    let mut records = Vec::new();
    for (split, count) in [(Split::Train, opts.train_per_class), (Split::Test, opts.test_per_class)] {
        for kind in ShapeKind::ALL {
            for i in 0..count {
                let label = kind.label();
                let split_code = match split {
                    Split::Train => 0,
                    Split::Test => 1,
                };
                let stream = derive_seed(opts.seed, &[split_code, label as u64, i as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                let spec = ShapeSpec { kind, n: opts.points, seed: rng.random(), pose: opts.pose };
                let cloud = gen_shape(&spec)?;
                let depth = render_depth(&cloud, View::PosZ);
                let template_index = rng.random_range(0..TEMPLATES.len());
                let id = format!("{}_{}_{i:04}", if split == Split::Train { "train" } else { "test" }, kind.name());
                let points_rel = format!("points/{id}.pdco");
                let depth_rel = format!("depth/{id}.pdco");
                write_tensor(&out.join(&points_rel), &cloud.to_array(), Dtype::F64)?;
                write_tensor(&out.join(&depth_rel), &depth, Dtype::F64)?;
                records.push(SampleRecord {
                    id,
                    label,
                    class_name: kind.name().to_string(),
                    points: points_rel,
                    depth: depth_rel,
                    prompt: prompt_text(label, template_index)?,
                    template_index,
                    split,
                });
            }
        }
    }
    write_manifest(&out.join(MANIFEST), &records)?;
    Ok(records)
}

/// A dataset directory with its manifest parsed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DataError> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        Ok(Self { root: root.to_path_buf(), records: parse_manifest(&text)? })
    }

    pub fn load(&self, record: &SampleRecord) -> Result<Sample, DataError> {
        let pts = read_tensor(&self.root.join(&record.points))?;
        let points = PointCloud::from_array(&pts).map_err(|e| DataError::Parse(format!("{}: {e}", record.points)))?;
        let depth = read_tensor(&self.root.join(&record.depth))?;
        if depth.len() != DEPTH_RES * DEPTH_RES {
            return Err(DataError::Parse(format!("{}: expected a {DEPTH_RES}x{DEPTH_RES} map", record.depth)));
        }
        if record.label >= CLASS_NAMES.len() || record.template_index >= TEMPLATES.len() {
            return Err(DataError::Parse(format!("{}: label or template out of range", record.id)));
        }
        Ok(Sample { id: record.id.clone(), label: record.label, template_index: record.template_index, points, depth })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>, DataError> {
        self.records.iter().filter(|r| r.split == split).map(|r| self.load(r)).collect()
    }

    pub fn find(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}
