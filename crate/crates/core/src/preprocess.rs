//! LiDAR voxelization and camera bit-map construction.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::scene::{PointCloud, SceneImage, VehicleType};
use crate::{Error, Result};

pub const BS_MARK: i8 = -2;
pub const RECEIVER_MARK: i8 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelSpec {
    pub x_bounds: (f64, f64),
    pub y_bounds: (f64, f64),
    pub z_bounds: (f64, f64),
    pub bin_sizes: Vec3,
}

impl VoxelSpec {
    fn bounds(&self) -> [(f64, f64); 3] {
        [self.x_bounds, self.y_bounds, self.z_bounds]
    }

    /// Cells per axis; each extent must be a whole number of bins.
    pub fn shape(&self) -> Result<[usize; 3]> {
        let mut shape = [0usize; 3];
        for (axis, ((lo, hi), bin)) in self.bounds().iter().zip(self.bin_sizes).enumerate() {
            if !(hi > lo) || !(bin > 0.0) {
                return Err(Error::invalid(format!("axis {axis}: need max > min and bin > 0")));
            }
            let q = (hi - lo) / bin;
            let n = q.round();
            if (q - n).abs() > 1e-9 || n < 1.0 {
                return Err(Error::invalid(format!("axis {axis}: extent {} is not a multiple of bin {bin}", hi - lo)));
            }
            shape[axis] = n as usize;
        }
        Ok(shape)
    }

    /// Half-open bins with the last bin closed; `None` outside the bounds.
    pub fn cell_of(&self, p: Vec3, shape: [usize; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for (axis, (lo, hi)) in self.bounds().iter().enumerate() {
            let v = p[axis];
            if !(v >= *lo && v <= *hi) {
                return None;
            }
            let i = ((v - lo) / self.bin_sizes[axis]).floor() as usize;
            idx[axis] = i.min(shape[axis] - 1);
        }
        Some(idx)
    }
}

/// Occupancy grid with marked BS (−2) and receiver (−1) cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub shape: [usize; 3],
    pub cells: Vec<i8>,
}

impl VoxelGrid {
    pub fn zeros(shape: [usize; 3]) -> Self {
        VoxelGrid { shape, cells: vec![0; shape[0] * shape[1] * shape[2]] }
    }

    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.shape[1] + idx[1]) * self.shape[2] + idx[2]
    }

    pub fn get(&self, idx: [usize; 3]) -> i8 {
        self.cells[self.flat_index(idx)]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Runs of equal nonzero values as `[start, length, value]`.
    pub fn to_rle(&self) -> VoxelRle {
        let mut runs: Vec<[i64; 3]> = Vec::new();
        for (i, &v) in self.cells.iter().enumerate() {
            if v == 0 {
                continue;
            }
            match runs.last_mut() {
                Some(r) if r[0] + r[1] == i as i64 && r[2] == v as i64 => r[1] += 1,
                _ => runs.push([i as i64, 1, v as i64]),
            }
        }
        VoxelRle { shape: self.shape, runs }
    }

    pub fn from_rle(rle: &VoxelRle) -> Result<Self> {
        let mut grid = VoxelGrid::zeros(rle.shape);
        for &[start, len, value] in &rle.runs {
            let (s, l) = (start as usize, len as usize);
            if start < 0 || len < 0 || s + l > grid.cells.len() || !(-2..=1).contains(&value) {
                return Err(Error::Data(format!("bad voxel run [{start}, {len}, {value}]")));
            }
            grid.cells[s..s + l].fill(value as i8);
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelRle {
    pub shape: [usize; 3],
    pub runs: Vec<[i64; 3]>,
}

pub fn voxelize(cloud: &PointCloud, spec: &VoxelSpec, bs_position: Vec3, receiver_position: Vec3) -> Result<VoxelGrid> {
    let shape = spec.shape()?;
    let bs = spec
        .cell_of(bs_position, shape)
        .ok_or_else(|| Error::invalid("base station outside voxel bounds"))?;
    let rx = spec
        .cell_of(receiver_position, shape)
        .ok_or_else(|| Error::invalid("receiver outside voxel bounds"))?;
    if bs == rx {
        return Err(Error::MarkerCollision(bs));
    }
    let mut grid = VoxelGrid::zeros(shape);
    for p in &cloud.points {
        if let Some(idx) = spec.cell_of(*p, shape) {
            let i = grid.flat_index(idx);
            grid.cells[i] = 1;
        }
    }
    let i = grid.flat_index(rx);
    grid.cells[i] = RECEIVER_MARK;
    let i = grid.flat_index(bs);
    grid.cells[i] = BS_MARK;
    Ok(grid)
}

/// Per-window class map of a camera image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitMap {
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
    pub stride: usize,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedBitMap {
    pub rows: usize,
    pub cols: usize,
    /// 0 background, 1 receiver type, 2 obstacle.
    pub labels: Vec<u8>,
}

pub fn bitmap_shape(height: usize, width: usize, window: usize, stride: usize) -> (usize, usize) {
    ((height - window) / stride + 1, (width - window) / stride + 1)
}

/// Most frequent vehicle label in the crop (ties to the smaller label), else 0.
pub fn majority_label(img: &SceneImage, row: usize, col: usize, window: usize) -> u8 {
    let mut counts = [0usize; 4];
    for r in row..row + window {
        for &p in &img.pixels[r * img.width + col..r * img.width + col + window] {
            counts[(p as usize).min(3)] += 1;
        }
    }
    let mut best = 0u8;
    let mut best_count = 0;
    for (label, &count) in counts.iter().enumerate().skip(1) {
        if count > best_count {
            best = label as u8;
            best_count = count;
        }
    }
    best
}

pub fn make_bitmap<F>(img: &SceneImage, window: usize, stride: usize, classify: F) -> Result<BitMap>
where
    F: Fn(&SceneImage, usize, usize, usize) -> u8,
{
    if window == 0 || window > img.height.min(img.width) {
        return Err(Error::invalid(format!(
            "window {window} does not fit a {}x{} image",
            img.height, img.width
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let (rows, cols) = bitmap_shape(img.height, img.width, window, stride);
    let mut labels = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            labels.push(classify(img, i * stride, j * stride, window));
        }
    }
    Ok(BitMap { rows, cols, window, stride, labels })
}

pub fn refine_bitmap(bm: &BitMap, receiver_type: VehicleType) -> RefinedBitMap {
    let target = receiver_type.label();
    let labels = bm
        .labels
        .iter()
        .map(|&l| match l {
            0 => 0,
            l if l == target => 1,
            _ => 2,
        })
        .collect();
    RefinedBitMap { rows: bm.rows, cols: bm.cols, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raymobtime_spec() -> VoxelSpec {
        VoxelSpec {
            x_bounds: (744.0, 767.0),
            y_bounds: (429.0, 679.0),
            z_bounds: (0.0, 10.0),
            bin_sizes: [1.15, 1.25, 1.0],
        }
    }

    #[test]
    fn profile_grid_shapes() {
        assert_eq!(raymobtime_spec().shape().unwrap(), [20, 200, 10]);
        let neu = VoxelSpec {
            x_bounds: (-4.0, 16.0),
            y_bounds: (0.0, 80.0),
            z_bounds: (0.0, 10.0),
            bin_sizes: [1.0, 4.0, 0.5],
        };
        assert_eq!(neu.shape().unwrap(), [20, 20, 20]);
    }

    #[test]
    fn non_integral_bins_rejected() {
        let spec = VoxelSpec { bin_sizes: [1.3, 1.25, 1.0], ..raymobtime_spec() };
        assert!(spec.shape().is_err());
    }

    #[test]
    fn empty_cloud_has_only_markers() {
        let g = voxelize(&PointCloud::default(), &raymobtime_spec(), [746.0, 560.0, 4.0], [755.0, 500.0, 1.5]).unwrap();
        assert_eq!(g.shape, [20, 200, 10]);
        assert_eq!(g.cells.iter().filter(|&&c| c == BS_MARK).count(), 1);
        assert_eq!(g.cells.iter().filter(|&&c| c == RECEIVER_MARK).count(), 1);
        assert_eq!(g.cells.iter().filter(|&&c| c != 0).count(), 2);
    }

    #[test]
    fn markers_take_precedence_and_collide() {
        let spec = raymobtime_spec();
        let bs = [746.0, 560.0, 4.0];
        let cloud = PointCloud { points: vec![[746.1, 560.1, 4.2], [760.0, 600.0, 2.0], [800.0, 600.0, 2.0]] };
        let g = voxelize(&cloud, &spec, bs, [755.0, 500.0, 1.5]).unwrap();
        let shape = spec.shape().unwrap();
        assert_eq!(g.get(spec.cell_of(bs, shape).unwrap()), BS_MARK);
        assert_eq!(g.cells.iter().filter(|&&c| c == 1).count(), 1);
        assert!(matches!(voxelize(&cloud, &spec, bs, [746.2, 560.2, 4.1]), Err(Error::MarkerCollision(_))));
    }

    #[test]
    fn upper_edge_goes_to_last_bin() {
        let spec = VoxelSpec { x_bounds: (0.0, 2.0), y_bounds: (0.0, 2.0), z_bounds: (0.0, 2.0), bin_sizes: [1.0; 3] };
        assert_eq!(spec.cell_of([1.0, 2.0, 0.0], [2, 2, 2]), Some([1, 1, 0]));
        assert_eq!(spec.cell_of([2.0001, 0.0, 0.0], [2, 2, 2]), None);
    }

    fn uniform_image(h: usize, w: usize, label: u8) -> SceneImage {
        SceneImage { height: h, width: w, pixels: vec![label; h * w] }
    }

    #[test]
    fn profile_bitmap_shape() {
        let img = uniform_image(540, 960, 0);
        let bm = make_bitmap(&img, 40, 5, majority_label).unwrap();
        assert_eq!((bm.rows, bm.cols), (101, 185));
    }

    #[test]
    fn bitmap_edge_cases() {
        let img = uniform_image(16, 16, 2);
        let bm = make_bitmap(&img, 16, 3, majority_label).unwrap();
        assert_eq!((bm.rows, bm.cols), (1, 1));
        let bm = make_bitmap(&img, 4, 2, majority_label).unwrap();
        assert!(bm.labels.iter().all(|&l| l == 2));
        assert!(make_bitmap(&img, 17, 1, majority_label).is_err());
        assert!(make_bitmap(&img, 4, 0, majority_label).is_err());
    }

    #[test]
    fn majority_ignores_background_and_breaks_ties_low() {
        let img = SceneImage { height: 2, width: 2, pixels: vec![0, 0, 0, 3] };
        assert_eq!(majority_label(&img, 0, 0, 2), 3);
        let img = SceneImage { height: 2, width: 2, pixels: vec![3, 1, 0, 0] };
        assert_eq!(majority_label(&img, 0, 0, 2), 1);
        let img = SceneImage { height: 2, width: 2, pixels: vec![3, 3, 1, 0] };
        assert_eq!(majority_label(&img, 0, 0, 2), 3);
    }

    #[test]
    fn refine_relabels() {
        let bm = BitMap { rows: 1, cols: 5, window: 1, stride: 1, labels: vec![0, 2, 3, 2, 1] };
        assert_eq!(refine_bitmap(&bm, VehicleType::Car).labels, vec![0, 1, 2, 1, 2]);
        let zeros = BitMap { labels: vec![0; 5], ..bm.clone() };
        assert_eq!(refine_bitmap(&zeros, VehicleType::Bus).labels, vec![0; 5]);
        let cars = BitMap { labels: vec![2; 5], ..bm };
        assert_eq!(refine_bitmap(&cars, VehicleType::Car).labels, vec![1; 5]);
    }

    proptest! {
        #[test]
        fn bitmap_shape_formula(h in 1usize..=256, l in 1usize..=256, w in 1usize..=64, x in 1usize..=16) {
            prop_assume!(w <= h.min(l));
            let img = uniform_image(h, l, 0);
            let bm = make_bitmap(&img, w, x, |_, _, _, _| 0).unwrap();
            prop_assert_eq!((bm.rows, bm.cols), ((h - w) / x + 1, (l - w) / x + 1));
        }

        #[test]
        fn voxelize_is_order_invariant(
            pts in proptest::collection::vec((744.0f64..767.0, 429.0f64..679.0, 0.0f64..10.0), 0..200),
            seed in any::<u64>(),
        ) {
            let spec = raymobtime_spec();
            let points: Vec<Vec3> = pts.iter().map(|&(x, y, z)| [x, y, z]).collect();
            let mut shuffled = points.clone();
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            let bs = [746.0, 560.0, 4.0];
            let rx = [755.0, 500.0, 1.5];
            let a = voxelize(&PointCloud { points }, &spec, bs, rx).unwrap();
            let b = voxelize(&PointCloud { points: shuffled }, &spec, bs, rx).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(VoxelGrid::from_rle(&a.to_rle()).unwrap(), a);
        }
    }
}
