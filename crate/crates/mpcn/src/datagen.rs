//! Procedural voxel-shape dataset: parametric families with base/novel
//! roles, paired orthographic depth views, few-shot splits, and a
//! manifest-backed on-disk format (PGM depth images + binvox volumes).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MpcnError, Result};
use crate::voxelcore::{
    orthographic_depth, read_binvox_file, read_pgm_file, write_binvox_file, write_pgm_file,
    Pgm, ViewAxis, VoxelGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Primitive {
    Box,
    Ellipsoid,
    Cylinder,
    LComposite,
    Ring,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyRole {
    Base,
    Novel,
}

impl FamilyRole {
    pub fn name(self) -> &'static str {
        match self {
            FamilyRole::Base => "base",
            FamilyRole::Novel => "novel",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(FamilyRole::Base),
            "novel" => Some(FamilyRole::Novel),
            _ => None,
        }
    }
}

/// One shape category: a primitive plus jitter ranges. The generator is a
/// pure function of (family, sample seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeFamily {
    pub id: String,
    pub primitive: Primitive,
    pub role: FamilyRole,
    /// Base size range as a fraction of the grid side.
    pub size: (f64, f64),
    /// Per-axis aspect multiplier range.
    pub aspect: (f64, f64),
    /// Maximum center offset from the grid middle, fraction of the side.
    pub position_jitter: f64,
}

impl ShapeFamily {
    fn validate(&self) -> Result<()> {
        let ok_range = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !ok_range(self.size) || !ok_range(self.aspect) {
            return Err(MpcnError::Generation(format!(
                "family {}: degenerate size/aspect range",
                self.id
            )));
        }
        if !(0.0..0.25).contains(&self.position_jitter) {
            return Err(MpcnError::Generation(format!(
                "family {}: position jitter {} out of range",
                self.id, self.position_jitter
            )));
        }
        Ok(())
    }
}

/// The default corpus: four base families, two novel.
pub fn default_families() -> Vec<ShapeFamily> {
    vec![
        ShapeFamily {
            id: "box".into(),
            primitive: Primitive::Box,
            role: FamilyRole::Base,
            size: (0.20, 0.26),
            aspect: (0.85, 1.15),
            position_jitter: 0.04,
        },
        ShapeFamily {
            id: "ellipsoid".into(),
            primitive: Primitive::Ellipsoid,
            role: FamilyRole::Base,
            size: (0.20, 0.28),
            aspect: (0.8, 1.2),
            position_jitter: 0.04,
        },
        ShapeFamily {
            id: "cylinder".into(),
            primitive: Primitive::Cylinder,
            role: FamilyRole::Base,
            size: (0.18, 0.26),
            aspect: (0.85, 1.15),
            position_jitter: 0.04,
        },
        ShapeFamily {
            id: "lshape".into(),
            primitive: Primitive::LComposite,
            role: FamilyRole::Base,
            size: (0.20, 0.30),
            aspect: (0.8, 1.2),
            position_jitter: 0.04,
        },
        ShapeFamily {
            id: "ring".into(),
            primitive: Primitive::Ring,
            role: FamilyRole::Novel,
            size: (0.26, 0.34),
            aspect: (0.8, 1.2),
            position_jitter: 0.03,
        },
        ShapeFamily {
            id: "cross".into(),
            primitive: Primitive::Cross,
            role: FamilyRole::Novel,
            size: (0.34, 0.45),
            aspect: (0.8, 1.2),
            position_jitter: 0.03,
        },
    ]
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Deterministically voxelizes one sample of a family.
pub fn generate_shape(family: &ShapeFamily, resolution: usize, seed: u64) -> Result<VoxelGrid> {
    family.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = uniform(&mut rng, family.size);
    let aspect = [
        uniform(&mut rng, family.aspect),
        uniform(&mut rng, family.aspect),
        uniform(&mut rng, family.aspect),
    ];
    let pj = family.position_jitter;
    let center = [
        0.5 + uniform(&mut rng, (-pj, pj)),
        0.5 + uniform(&mut rng, (-pj, pj)),
        0.5 + uniform(&mut rng, (-pj, pj)),
    ];

    let inside: std::boxed::Box<dyn Fn(f64, f64, f64) -> bool> = match family.primitive {
        Primitive::Box => {
            let half = [
                (size * aspect[0]).min(0.42),
                (size * aspect[1]).min(0.42),
                (size * aspect[2]).min(0.42),
            ];
            std::boxed::Box::new(move |x, y, z| {
                (x - center[0]).abs() <= half[0]
                    && (y - center[1]).abs() <= half[1]
                    && (z - center[2]).abs() <= half[2]
            })
        }
        Primitive::Ellipsoid => {
            // Prolate: stretched along z so the family reads as a tall blob.
            let rad = [
                0.75 * size * aspect[0],
                0.75 * size * aspect[1],
                (2.2 * size * aspect[2]).min(0.45),
            ];
            std::boxed::Box::new(move |x, y, z| {
                let u = (x - center[0]) / rad[0];
                let v = (y - center[1]) / rad[1];
                let w = (z - center[2]) / rad[2];
                u * u + v * v + w * w <= 1.0
            })
        }
        Primitive::Cylinder => {
            // Oblate: a wide flat disc.
            let radius = (1.5 * size * aspect[0]).min(0.42);
            let half_h = 0.45 * size * aspect[2];
            std::boxed::Box::new(move |x, y, z| {
                let u = x - center[0];
                let v = y - center[1];
                u * u + v * v <= radius * radius && (z - center[2]).abs() <= half_h
            })
        }
        Primitive::LComposite => {
            let w = 0.45 * size * aspect[0];
            let half_h = (1.2 * size).min(0.42);
            let arm = (2.0 * size).min(0.45);
            std::boxed::Box::new(move |x, y, z| {
                let dx = x - center[0];
                let dy = y - center[1];
                let dz = z - center[2];
                let post =
                    dx.abs() <= w && dy.abs() <= w && dz.abs() <= half_h;
                let foot = (0.0..=arm).contains(&dx)
                    && dy.abs() <= w
                    && (-half_h..=(-half_h + 2.0 * w)).contains(&dz);
                post || foot
            })
        }
        Primitive::Ring => {
            let major = size;
            let tube = 0.35 * size * aspect[2];
            std::boxed::Box::new(move |x, y, z| {
                let u = x - center[0];
                let v = y - center[1];
                let planar = (u * u + v * v).sqrt() - major;
                let w = z - center[2];
                planar * planar + w * w <= tube * tube
            })
        }
        Primitive::Cross => {
            let arm = size.min(0.45);
            let w = 0.18 * size * aspect[0];
            std::boxed::Box::new(move |x, y, z| {
                let dx = (x - center[0]).abs();
                let dy = (y - center[1]).abs();
                let dz = (z - center[2]).abs();
                (dx <= arm && dy <= w && dz <= w)
                    || (dy <= arm && dx <= w && dz <= w)
                    || (dz <= arm && dx <= w && dy <= w)
            })
        }
    };

    let inv = 1.0 / resolution as f64;
    let grid = VoxelGrid::from_fn(resolution, |x, y, z| {
        inside(
            (x as f64 + 0.5) * inv,
            (y as f64 + 0.5) * inv,
            (z as f64 + 0.5) * inv,
        )
    });
    let occ = grid.occupancy();
    if !(0.01..=0.9).contains(&occ) {
        return Err(MpcnError::Generation(format!(
            "family {} seed {seed}: occupancy {occ:.4} outside (0.01, 0.9)",
            family.id
        )));
    }
    Ok(grid)
}

/// One (image, voxel) pair with its provenance.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub sample_id: String,
    pub category: String,
    pub role: FamilyRole,
    pub view: ViewAxis,
    /// Orthographic depth view of `voxel` along `view`, values in [0, 1].
    pub image: Array2<f64>,
    pub voxel: VoxelGrid,
    pub seed: u64,
}

impl SamplePair {
    /// Recomputes the depth view from the voxel grid; equal to `image` for
    /// any well-formed pair.
    pub fn regenerate_image(&self) -> Array2<f64> {
        orthographic_depth(&self.voxel, self.view, false)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub resolution: usize,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn categories(&self) -> Vec<String> {
        let mut seen = BTreeMap::new();
        for s in &self.samples {
            seen.entry(s.category.clone()).or_insert(());
        }
        seen.into_keys().collect()
    }
}

const VIEW_CYCLE: [ViewAxis; 3] = [ViewAxis::Z, ViewAxis::X, ViewAxis::Y];

fn view_suffix(axis: ViewAxis) -> &'static str {
    match axis {
        ViewAxis::X => "vx",
        ViewAxis::Y => "vy",
        ViewAxis::Z => "vz",
    }
}

fn view_from_id(sample_id: &str) -> ViewAxis {
    match sample_id.rsplit('_').next() {
        Some("vx") => ViewAxis::X,
        Some("vy") => ViewAxis::Y,
        _ => ViewAxis::Z,
    }
}

/// Generates `n_per_family` shapes per family with `views_per_shape` depth
/// views each. Fully deterministic in `seed`.
pub fn generate_dataset(
    families: &[ShapeFamily],
    n_per_family: usize,
    views_per_shape: usize,
    resolution: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_per_family == 0 {
        return Err(MpcnError::Generation("n_per_family must be at least 1".into()));
    }
    if !(1..=3).contains(&views_per_shape) {
        return Err(MpcnError::Generation(
            "views_per_shape must be between 1 and 3".into(),
        ));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(families.len() * n_per_family * views_per_shape);
    for family in families {
        family.validate()?;
        for i in 0..n_per_family {
            let sample_seed = master.random::<u64>();
            let voxel = generate_shape(family, resolution, sample_seed)?;
            for v in 0..views_per_shape {
                let view = VIEW_CYCLE[v];
                let image = orthographic_depth(&voxel, view, false);
                samples.push(SamplePair {
                    sample_id: format!("{}_{:05}_{}", family.id, i, view_suffix(view)),
                    category: family.id.clone(),
                    role: family.role,
                    view,
                    image,
                    voxel: voxel.clone(),
                    seed: sample_seed,
                });
            }
        }
    }
    Ok(Dataset {
        resolution,
        samples,
    })
}

/// The episodic split: all base samples, `shots` support samples per novel
/// family, and the remaining novel samples as queries.
#[derive(Debug, Clone)]
pub struct FewShotSplit {
    pub base: Vec<SamplePair>,
    pub support: Vec<SamplePair>,
    pub query: Vec<SamplePair>,
}

pub fn split_fewshot(
    dataset: &Dataset,
    novel_families: &[String],
    shots: usize,
    seed: u64,
) -> Result<FewShotSplit> {
    let categories = dataset.categories();
    for fam in novel_families {
        if !categories.contains(fam) {
            return Err(MpcnError::config(format!(
                "novel family {fam} not present in dataset"
            )));
        }
    }
    let mut base = Vec::new();
    let mut per_family: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if novel_families.contains(&s.category) {
            per_family.entry(s.category.as_str()).or_default().push(i);
        } else {
            base.push(s.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (fam, mut indices) in per_family {
        if shots > indices.len() {
            return Err(MpcnError::config(format!(
                "family {fam} has {} samples, cannot draw {shots} shots",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let (chosen, rest) = indices.split_at(shots);
        let mut chosen = chosen.to_vec();
        let mut rest = rest.to_vec();
        chosen.sort_unstable();
        rest.sort_unstable();
        support.extend(chosen.iter().map(|&i| dataset.samples[i].clone()));
        query.extend(rest.iter().map(|&i| dataset.samples[i].clone()));
    }
    Ok(FewShotSplit {
        base,
        support,
        query,
    })
}

/// Writes `manifest.csv` plus `images/` and `voxels/` under `dir`.
/// Returns the manifest path. Layout is stable: same dataset, same bytes.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    let voxels = dir.join("voxels");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&voxels)?;
    let manifest_path = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path)
        .map_err(|e| MpcnError::Generation(format!("manifest write: {e}")))?;
    writer
        .write_record(["sample_id", "category", "role", "image_path", "voxel_path", "seed"])
        .map_err(|e| MpcnError::Generation(format!("manifest write: {e}")))?;
    let maxval = dataset.resolution as u16;
    for s in &dataset.samples {
        let image_rel = format!("images/{}.pgm", s.sample_id);
        let voxel_rel = format!("voxels/{}.binvox", s.sample_id);
        let pgm = Pgm::from_unit_image(&s.image, maxval)?;
        write_pgm_file(&pgm, &dir.join(&image_rel))?;
        write_binvox_file(&s.voxel, &dir.join(&voxel_rel))?;
        writer
            .write_record([
                s.sample_id.as_str(),
                s.category.as_str(),
                s.role.name(),
                image_rel.as_str(),
                voxel_rel.as_str(),
                &s.seed.to_string(),
            ])
            .map_err(|e| MpcnError::Generation(format!("manifest write: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| MpcnError::Generation(format!("manifest write: {e}")))?;
    Ok(manifest_path)
}

/// Loads a manifest-described dataset, validating every row. All voxel
/// files must share one resolution; per-row failures are collected and
/// reported together.
pub fn load_binvox_dataset(manifest_path: &Path) -> Result<Dataset> {
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(manifest_path)
        .map_err(|e| MpcnError::DatasetLoad(vec![format!("manifest: {e}")]))?;
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    let mut resolution = None;
    for (row_idx, record) in reader.records().enumerate() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("row {}: {e}", row_idx + 1));
                continue;
            }
        };
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let sample_id = field(0);
        let category = field(1);
        let role = match FamilyRole::parse(&field(2)) {
            Some(r) => r,
            None => {
                errors.push(format!("row {sample_id}: unknown role {:?}", field(2)));
                continue;
            }
        };
        let seed = match field(5).parse::<u64>() {
            Ok(s) => s,
            Err(e) => {
                errors.push(format!("row {sample_id}: bad seed: {e}"));
                continue;
            }
        };
        let voxel = match read_binvox_file(&root.join(field(4))) {
            Ok(v) => v,
            Err(e) => {
                errors.push(format!("row {sample_id}: voxel: {e}"));
                continue;
            }
        };
        match resolution {
            None => resolution = Some(voxel.resolution()),
            Some(r) if r != voxel.resolution() => {
                errors.push(format!(
                    "row {sample_id}: resolution {} differs from {r}",
                    voxel.resolution()
                ));
                continue;
            }
            _ => {}
        }
        let image = match read_pgm_file(&root.join(field(3))) {
            Ok(p) => p.to_unit_image(),
            Err(e) => {
                errors.push(format!("row {sample_id}: image: {e}"));
                continue;
            }
        };
        if image.dim() != (voxel.resolution(), voxel.resolution()) {
            errors.push(format!(
                "row {sample_id}: image {:?} does not match resolution {}",
                image.dim(),
                voxel.resolution()
            ));
            continue;
        }
        samples.push(SamplePair {
            view: view_from_id(&sample_id),
            sample_id,
            category,
            role,
            image,
            voxel,
            seed,
        });
    }
    if !errors.is_empty() {
        return Err(MpcnError::DatasetLoad(errors));
    }
    Ok(Dataset {
        resolution: resolution.unwrap_or(0),
        samples,
    })
}
