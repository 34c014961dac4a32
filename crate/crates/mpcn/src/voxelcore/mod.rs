//! Voxel data types, evaluation metrics, shape distance, and file I/O.
//!
//! Grids are cubic with resolution `r_v` and linear index `x*r_v^2 + y*r_v + z`.
//! All metric operations are pure functions over immutable inputs.

mod binvox;
mod pgm;

pub use binvox::{read_binvox, read_binvox_file, write_binvox, write_binvox_file};
pub use pgm::{read_pgm, read_pgm_file, write_pgm, write_pgm_file, Pgm};

use ndarray::Array2;

use crate::error::{MpcnError, Result};

/// Binary occupancy cube. Every element is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VoxelGrid {
    resolution: usize,
    data: Vec<u8>,
}

impl VoxelGrid {
    /// All-empty grid of the given resolution.
    pub fn empty(resolution: usize) -> Self {
        assert!(resolution > 0, "resolution must be positive");
        VoxelGrid {
            resolution,
            data: vec![0; resolution * resolution * resolution],
        }
    }

    /// All-occupied grid.
    pub fn full(resolution: usize) -> Self {
        let mut g = VoxelGrid::empty(resolution);
        g.data.fill(1);
        g
    }

    /// Builds a grid from an occupancy predicate over voxel indices.
    pub fn from_fn(resolution: usize, mut occupied: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut g = VoxelGrid::empty(resolution);
        for x in 0..resolution {
            for y in 0..resolution {
                for z in 0..resolution {
                    if occupied(x, y, z) {
                        g.set(x, y, z, true);
                    }
                }
            }
        }
        g
    }

    /// Builds a grid from raw 0/1 bytes in `x*r^2 + y*r + z` order.
    pub fn from_raw(resolution: usize, data: Vec<u8>) -> Result<Self> {
        let n = resolution * resolution * resolution;
        if data.len() != n {
            return Err(MpcnError::shape(format!(
                "voxel payload holds {} values, resolution {} needs {}",
                data.len(),
                resolution,
                n
            )));
        }
        if let Some(bad) = data.iter().position(|&v| v > 1) {
            return Err(MpcnError::shape(format!(
                "voxel value at linear index {bad} is {}, expected 0 or 1",
                data[bad]
            )));
        }
        Ok(VoxelGrid { resolution, data })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.resolution + y) * self.resolution + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, occupied: bool) {
        let i = self.index(x, y, z);
        self.data[i] = occupied as u8;
    }

    /// Raw occupancy bytes in `x*r^2 + y*r + z` order.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn occupied_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Fraction of occupied voxels in [0, 1].
    pub fn occupancy(&self) -> f64 {
        self.occupied_count() as f64 / self.data.len() as f64
    }

    /// Lossless lift to a probability volume (0.0 / 1.0 entries).
    pub fn to_prob(&self) -> ProbVolume {
        ProbVolume {
            resolution: self.resolution,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Real-valued occupancy probabilities in [0, 1], the decoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    resolution: usize,
    data: Vec<f64>,
}

impl ProbVolume {
    /// Validates that every entry lies in [0, 1].
    pub fn from_raw(resolution: usize, data: Vec<f64>) -> Result<Self> {
        let n = resolution * resolution * resolution;
        if data.len() != n {
            return Err(MpcnError::shape(format!(
                "probability payload holds {} values, resolution {} needs {}",
                data.len(),
                resolution,
                n
            )));
        }
        if let Some(bad) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(MpcnError::shape(format!(
                "probability at linear index {bad} is {} outside [0,1]",
                data[bad]
            )));
        }
        Ok(ProbVolume { resolution, data })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[(x * self.resolution + y) * self.resolution + z]
    }

    /// Binarize at a threshold (strict `>`).
    pub fn threshold(&self, t: f64) -> VoxelGrid {
        VoxelGrid {
            resolution: self.resolution,
            data: self.data.iter().map(|&p| (p > t) as u8).collect(),
        }
    }
}

fn check_same_resolution(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MpcnError::shape(format!(
            "volume resolutions differ: {a} vs {b}"
        )));
    }
    Ok(())
}

/// Intersection-over-union of the thresholded prediction and the ground truth.
///
/// A voxel counts as predicted occupied when its probability strictly exceeds
/// `t`. When both the thresholded prediction and the ground truth are empty
/// the result is 1.0 (perfect agreement on emptiness).
pub fn iou(pred: &ProbVolume, gt: &VoxelGrid, t: f64) -> Result<f64> {
    check_same_resolution(pred.resolution, gt.resolution)?;
    if !(t > 0.0 && t < 1.0) {
        return Err(MpcnError::config(format!(
            "IoU threshold must lie in (0,1), got {t}"
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        let p_on = p > t;
        let g_on = g != 0;
        inter += (p_on && g_on) as usize;
        union += (p_on || g_on) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean squared voxel difference, in [0, 1] for valid inputs.
pub fn shape_distance(pr: &ProbVolume, gt: &VoxelGrid) -> Result<f64> {
    check_same_resolution(pr.resolution, gt.resolution)?;
    let mut acc = 0.0;
    for (&p, &g) in pr.data.iter().zip(gt.data.iter()) {
        let d = p - g as f64;
        acc += d * d;
    }
    Ok(acc / pr.data.len() as f64)
}

/// Mean squared difference between two binary grids (same formula as
/// [`shape_distance`] with a 0/1 prediction, without the float lift).
pub fn voxel_distance(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    check_same_resolution(a.resolution, b.resolution)?;
    let differing = a
        .data
        .iter()
        .zip(b.data.iter())
        .filter(|(x, y)| x != y)
        .count();
    Ok(differing as f64 / a.data.len() as f64)
}

/// Viewing axis for orthographic depth images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ViewAxis {
    X,
    Y,
    Z,
}

impl ViewAxis {
    pub fn name(self) -> &'static str {
        match self {
            ViewAxis::X => "x",
            ViewAxis::Y => "y",
            ViewAxis::Z => "z",
        }
    }
}

/// Orthographic depth view of a grid.
///
/// Each pixel holds `(r_v - d) / r_v` where `d` is the number of steps from
/// the viewing plane to the first occupied voxel along the axis, or 0.0 when
/// the ray hits nothing. `flip` views from the high-index side instead.
///
/// Pixel layout: axis X -> `out[[y, z]]`, axis Y -> `out[[x, z]]`,
/// axis Z -> `out[[x, y]]`.
pub fn orthographic_depth(g: &VoxelGrid, axis: ViewAxis, flip: bool) -> Array2<f64> {
    let r = g.resolution;
    let mut out = Array2::zeros((r, r));
    for u in 0..r {
        for v in 0..r {
            let mut hit = 0.0;
            for d in 0..r {
                let idx = if flip { r - 1 - d } else { d };
                let occupied = match axis {
                    ViewAxis::X => g.get(idx, u, v),
                    ViewAxis::Y => g.get(u, idx, v),
                    ViewAxis::Z => g.get(u, v, idx),
                };
                if occupied {
                    hit = (r - d) as f64 / r as f64;
                    break;
                }
            }
            out[[u, v]] = hit;
        }
    }
    out
}

/// Montage of all axial (z) slices as one graymap, for eyeballing shapes.
/// Debug aid; layout is a near-square tiling of the `r_v` slices.
pub fn slice_montage(g: &VoxelGrid) -> Pgm {
    let r = g.resolution;
    let cols = (r as f64).sqrt().ceil() as usize;
    let rows = r.div_ceil(cols);
    let mut pixels = vec![0u16; (rows * r) * (cols * r)];
    let width = cols * r;
    for z in 0..r {
        let tile_row = z / cols;
        let tile_col = z % cols;
        for x in 0..r {
            for y in 0..r {
                let px = tile_row * r + x;
                let py = tile_col * r + y;
                pixels[px * width + py] = if g.get(x, y, z) { 255 } else { 0 };
            }
        }
    }
    Pgm {
        width,
        height: rows * r,
        maxval: 255,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar triple-loop IoU used as the independent oracle.
    pub(crate) fn iou_oracle(pred: &ProbVolume, gt: &VoxelGrid, t: f64) -> f64 {
        let r = gt.resolution();
        let mut inter = 0usize;
        let mut union = 0usize;
        for x in 0..r {
            for y in 0..r {
                for z in 0..r {
                    let p = pred.get(x, y, z) > t;
                    let g = gt.get(x, y, z);
                    if p && g {
                        inter += 1;
                    }
                    if p || g {
                        union += 1;
                    }
                }
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Scalar triple-loop shape distance oracle.
    pub(crate) fn distance_oracle(pr: &ProbVolume, gt: &VoxelGrid) -> f64 {
        let r = gt.resolution();
        let mut acc = 0.0;
        for x in 0..r {
            for y in 0..r {
                for z in 0..r {
                    let d = pr.get(x, y, z) - gt.get(x, y, z) as u8 as f64;
                    acc += d * d;
                }
            }
        }
        acc / (r * r * r) as f64
    }

    fn random_grid(rng: &mut impl rand::Rng, r: usize, density: f64) -> VoxelGrid {
        VoxelGrid::from_fn(r, |_, _, _| rng.random::<f64>() < density)
    }

    fn random_prob(rng: &mut impl rand::Rng, r: usize) -> ProbVolume {
        let n = r * r * r;
        ProbVolume::from_raw(r, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn iou_identity_is_one() {
        let g = VoxelGrid::from_fn(4, |x, y, z| (x + y + z) % 3 == 0);
        assert!(g.occupied_count() > 0);
        assert_eq!(iou(&g.to_prob(), &g, 0.5).unwrap(), 1.0);
        assert_eq!(iou(&g.to_prob(), &g, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let pred = ProbVolume::from_raw(3, vec![0.0; 27]).unwrap();
        let gt = VoxelGrid::full(3);
        assert_eq!(iou(&pred, &gt, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn iou_three_sevenths_case() {
        // r=2: gt occupies linear indices 0..4; pred exceeds t on 1..7,
        // overlapping gt on {1,2,3}. Expected 3/7 by direct counting.
        let gt = VoxelGrid::from_raw(2, vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        let pred =
            ProbVolume::from_raw(2, vec![0.1, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.1]).unwrap();
        let expected = iou_oracle(&pred, &gt, 0.3);
        assert_eq!(expected, 3.0 / 7.0);
        assert_eq!(iou(&pred, &gt, 0.3).unwrap(), expected);
    }

    #[test]
    fn iou_empty_union_is_one() {
        let pred = ProbVolume::from_raw(2, vec![0.0; 8]).unwrap();
        let gt = VoxelGrid::empty(2);
        assert_eq!(iou(&pred, &gt, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn iou_threshold_is_strict() {
        // Probability exactly at t must not count as occupied.
        let pred = ProbVolume::from_raw(1, vec![0.3]).unwrap();
        let gt = VoxelGrid::full(1);
        assert_eq!(iou(&pred, &gt, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_mismatch_and_bad_threshold() {
        let pred = ProbVolume::from_raw(2, vec![0.0; 8]).unwrap();
        let gt = VoxelGrid::empty(3);
        assert!(iou(&pred, &gt, 0.3).is_err());
        let gt2 = VoxelGrid::empty(2);
        assert!(iou(&pred, &gt2, 0.0).is_err());
        assert!(iou(&pred, &gt2, 1.0).is_err());
    }

    #[test]
    fn shape_distance_identity_and_max() {
        let g = VoxelGrid::from_fn(4, |x, _, _| x % 2 == 0);
        assert_eq!(shape_distance(&g.to_prob(), &g).unwrap(), 0.0);
        let ones = ProbVolume::from_raw(4, vec![1.0; 64]).unwrap();
        let zeros = VoxelGrid::empty(4);
        assert_eq!(shape_distance(&ones, &zeros).unwrap(), 1.0);
    }

    #[test]
    fn shape_distance_single_voxel_diff() {
        let gt = VoxelGrid::empty(32);
        let mut pred = gt.clone();
        pred.set(5, 7, 11, true);
        let d = shape_distance(&pred.to_prob(), &gt).unwrap();
        let expected = distance_oracle(&pred.to_prob(), &gt);
        assert_eq!(d, expected);
        assert!((d - 1.0 / 32768.0).abs() < 1e-15);
    }

    #[test]
    fn voxel_distance_matches_prob_route() {
        let mut rng = crate::test_rng(11);
        for _ in 0..20 {
            let a = random_grid(&mut rng, 8, 0.4);
            let b = random_grid(&mut rng, 8, 0.4);
            let via_prob = shape_distance(&a.to_prob(), &b).unwrap();
            assert_eq!(voxel_distance(&a, &b).unwrap(), via_prob);
        }
    }

    #[test]
    fn metrics_match_oracles_on_random_grids() {
        let mut rng = crate::test_rng(7);
        for i in 0..200 {
            let gt = random_grid(&mut rng, 8, 0.3 + 0.4 * (i % 3) as f64 / 3.0);
            let pred = random_prob(&mut rng, 8);
            assert_eq!(
                iou(&pred, &gt, 0.3).unwrap(),
                iou_oracle(&pred, &gt, 0.3),
                "iou mismatch at case {i}"
            );
            let d = shape_distance(&pred, &gt).unwrap();
            assert!((d - distance_oracle(&pred, &gt)).abs() <= 1e-12);
            assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn iou_symmetric_for_binary_volumes() {
        let mut rng = crate::test_rng(13);
        for _ in 0..50 {
            let a = random_grid(&mut rng, 8, 0.4);
            let b = random_grid(&mut rng, 8, 0.4);
            let ab = iou(&a.to_prob(), &b, 0.3).unwrap();
            let ba = iou(&b.to_prob(), &a, 0.3).unwrap();
            assert_eq!(ab, ba);
        }
    }

    #[test]
    fn depth_empty_grid_is_zero() {
        let g = VoxelGrid::empty(8);
        let img = orthographic_depth(&g, ViewAxis::Z, false);
        assert!(img.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_full_grid_is_ones() {
        let g = VoxelGrid::full(8);
        for axis in [ViewAxis::X, ViewAxis::Y, ViewAxis::Z] {
            for flip in [false, true] {
                let img = orthographic_depth(&g, axis, flip);
                assert!(img.iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn depth_single_voxel_ray_march() {
        // Independent ray-march oracle for a single occupied voxel.
        let r = 8;
        let (vx, vy, vz) = (2, 5, 3);
        let mut g = VoxelGrid::empty(r);
        g.set(vx, vy, vz, true);
        for (axis, along, u, v) in [
            (ViewAxis::X, vx, vy, vz),
            (ViewAxis::Y, vy, vx, vz),
            (ViewAxis::Z, vz, vx, vy),
        ] {
            for flip in [false, true] {
                let img = orthographic_depth(&g, axis, flip);
                let d = if flip { r - 1 - along } else { along };
                let expected = (r - d) as f64 / r as f64;
                assert_eq!(img[[u, v]], expected, "axis {axis:?} flip {flip}");
                let nonzero = img.iter().filter(|&&p| p != 0.0).count();
                assert_eq!(nonzero, 1);
            }
        }
    }

    #[test]
    fn montage_smoke() {
        let g = VoxelGrid::from_fn(8, |x, y, z| x == y && y == z);
        let m = slice_montage(&g);
        assert_eq!(m.width % 8, 0);
        assert_eq!(m.pixels.iter().filter(|&&p| p == 255).count(), 8);
    }
}
