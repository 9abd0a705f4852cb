//! Randomized vehicular scenes and the raw sensor observations derived from
//! them.
//!
//! The road runs along +y. Lanes are stacked along +x starting at
//! `road_origin[0]`; lanes in the lower half of the road carry traffic in +y,
//! the others in −y. Vehicles are axis-aligned boxes resting on the ground and
//! the receiver antenna sits at the centre of the receiver's roof. Two optional
//! building walls line the road at `wall_margin_m` beyond each edge.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{distance, Aabb, Vec3};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 200;
/// Minimum bumper-to-bumper gap between vehicles in the same lane.
const MIN_GAP_M: f64 = 0.5;
const BS_POLE_HALF_WIDTH_M: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleType {
    Bus,
    Car,
    Truck,
}

impl VehicleType {
    pub const ALL: [VehicleType; 3] = [VehicleType::Bus, VehicleType::Car, VehicleType::Truck];

    /// Image class label: background 0, bus 1, car 2, truck 3.
    pub fn label(self) -> u8 {
        match self {
            VehicleType::Bus => 1,
            VehicleType::Car => 2,
            VehicleType::Truck => 3,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            1 => Some(VehicleType::Bus),
            2 => Some(VehicleType::Car),
            3 => Some(VehicleType::Truck),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub road_length_m: f64,
    pub lane_count: u32,
    pub lane_width_m: f64,
    /// (x, y) of the road corner with the smallest coordinates.
    pub road_origin: [f64; 2],
    pub bs_position: Vec3,
    pub bs_height_m: f64,
    pub vehicle_count_range: (u32, u32),
    /// (length, width, height) per type.
    pub vehicle_dims: BTreeMap<VehicleType, Vec3>,
    pub traffic_density: f64,
    pub rng_seed: u64,
    /// Distance of the building walls beyond the road edges; `None` disables them.
    pub wall_margin_m: Option<f64>,
    pub wall_height_m: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let mut dims = BTreeMap::new();
        dims.insert(VehicleType::Bus, [12.0, 2.5, 3.2]);
        dims.insert(VehicleType::Car, [4.5, 1.8, 1.5]);
        dims.insert(VehicleType::Truck, [8.0, 2.5, 3.8]);
        SceneConfig {
            road_length_m: 80.0,
            lane_count: 4,
            lane_width_m: 3.5,
            road_origin: [0.0, 0.0],
            bs_position: [-2.0, 40.0, 4.0],
            bs_height_m: 4.0,
            vehicle_count_range: (4, 12),
            vehicle_dims: dims,
            traffic_density: 0.5,
            rng_seed: 7,
            wall_margin_m: Some(2.5),
            wall_height_m: 15.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.road_length_m > 0.0) {
            return bad("road_length_m must be > 0");
        }
        if self.lane_count == 0 || !(self.lane_width_m > 0.0) {
            return bad("need at least one lane of positive width");
        }
        if !(self.bs_height_m > 0.0) {
            return bad("bs_height_m must be > 0");
        }
        if self.vehicle_count_range.0 > self.vehicle_count_range.1 {
            return bad("vehicle_count_range min > max");
        }
        if self.vehicle_count_range.1 == 0 {
            return bad("scene needs at least one vehicle to host the receiver");
        }
        if self.vehicle_dims.is_empty() {
            return bad("vehicle_dims is empty");
        }
        if self.vehicle_dims.values().any(|d| d.iter().any(|v| !(*v > 0.0))) {
            return bad("vehicle dims must be positive");
        }
        if !(0.0..=1.0).contains(&self.traffic_density) {
            return bad("traffic_density must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn road_x_range(&self) -> (f64, f64) {
        let x0 = self.road_origin[0];
        (x0, x0 + self.lane_count as f64 * self.lane_width_m)
    }

    pub fn road_y_range(&self) -> (f64, f64) {
        let y0 = self.road_origin[1];
        (y0, y0 + self.road_length_m)
    }

    fn walls(&self) -> Vec<Wall> {
        let Some(margin) = self.wall_margin_m else {
            return Vec::new();
        };
        let (x0, x1) = self.road_x_range();
        let (y0, y1) = self.road_y_range();
        let x_lo = x0 - margin;
        let x_hi = x1 + margin;
        vec![
            Wall { x: x_lo, y_range: (y0, y1), height_m: self.wall_height_m, normal_sign: 1.0 },
            Wall { x: x_hi, y_range: (y0, y1), height_m: self.wall_height_m, normal_sign: -1.0 },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleInstance {
    pub vehicle_type: VehicleType,
    pub center: Vec3,
    /// 0 for +y travel, π for −y travel.
    pub heading: f64,
    /// (length, width, height).
    pub dims: Vec3,
}

impl VehicleInstance {
    pub fn new(vehicle_type: VehicleType, ground: [f64; 2], heading: f64, dims: Vec3) -> Self {
        VehicleInstance {
            vehicle_type,
            center: [ground[0], ground[1], dims[2] / 2.0],
            heading,
            dims,
        }
    }

    /// World-axis half extents; length lies along y.
    pub fn half_extents(&self) -> Vec3 {
        [self.dims[1] / 2.0, self.dims[0] / 2.0, self.dims[2] / 2.0]
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_center(self.center, self.half_extents())
    }

    pub fn roof_center(&self) -> Vec3 {
        [self.center[0], self.center[1], self.dims[2]]
    }

    /// Unit travel direction in the ground plane.
    pub fn direction(&self) -> [f64; 2] {
        if self.heading.cos() >= 0.0 {
            [0.0, 1.0]
        } else {
            [0.0, -1.0]
        }
    }
}

/// Vertical reflecting plane `x = const` bounding the road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub x: f64,
    pub y_range: (f64, f64),
    pub height_m: f64,
    /// Sign of the x component of the wall's road-facing normal.
    pub normal_sign: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub receiver: VehicleInstance,
    pub obstacles: Vec<VehicleInstance>,
    pub bs_position: Vec3,
    pub bs_height_m: f64,
    #[serde(default)]
    pub walls: Vec<Wall>,
}

impl Scene {
    pub fn receiver_antenna(&self) -> Vec3 {
        self.receiver.roof_center()
    }

    /// The mast carrying the base-station radio.
    pub fn bs_structure(&self) -> Aabb {
        let h = self.bs_height_m.max(self.bs_position[2]);
        Aabb {
            min: [
                self.bs_position[0] - BS_POLE_HALF_WIDTH_M,
                self.bs_position[1] - BS_POLE_HALF_WIDTH_M,
                0.0,
            ],
            max: [
                self.bs_position[0] + BS_POLE_HALF_WIDTH_M,
                self.bs_position[1] + BS_POLE_HALF_WIDTH_M,
                h,
            ],
        }
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &VehicleInstance> {
        std::iter::once(&self.receiver).chain(self.obstacles.iter())
    }
}

pub fn generate_scene(cfg: &SceneConfig, scene_id: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.rng_seed, Purpose::Placement, scene_id);

    let (lo, hi) = cfg.vehicle_count_range;
    let mut count = lo;
    for _ in lo..hi {
        if rng.random_bool(cfg.traffic_density) {
            count += 1;
        }
    }

    let types: Vec<(VehicleType, Vec3)> = cfg.vehicle_dims.iter().map(|(t, d)| (*t, *d)).collect();
    let (y0, y1) = cfg.road_y_range();
    let mut placed: Vec<VehicleInstance> = Vec::with_capacity(count as usize);
    for vehicle in 0..count as usize {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (vtype, dims) = types[rng.random_range(0..types.len())];
            let lane = rng.random_range(0..cfg.lane_count);
            let half_len = dims[0] / 2.0;
            if 2.0 * half_len > y1 - y0 || dims[1] > cfg.lane_width_m {
                continue;
            }
            let y = rng.random_range((y0 + half_len)..=(y1 - half_len));
            let x = cfg.road_origin[0] + (lane as f64 + 0.5) * cfg.lane_width_m;
            let heading = if lane < cfg.lane_count.div_ceil(2) { 0.0 } else { std::f64::consts::PI };
            let candidate = VehicleInstance::new(vtype, [x, y], heading, dims);
            let padded = {
                let mut b = candidate.bounds();
                b.min[1] -= MIN_GAP_M / 2.0;
                b.max[1] += MIN_GAP_M / 2.0;
                b
            };
            let clash = placed.iter().any(|v| {
                let mut b = v.bounds();
                b.min[1] -= MIN_GAP_M / 2.0;
                b.max[1] += MIN_GAP_M / 2.0;
                b.overlaps(&padded)
            });
            if !clash {
                placed.push(candidate);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::SceneInfeasible {
                scene_id,
                vehicle,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }

    let rx_index = rng.random_range(0..placed.len());
    let receiver = placed.remove(rx_index);
    Ok(Scene {
        scene_id,
        receiver,
        obstacles: placed,
        bs_position: cfg.bs_position,
        bs_height_m: cfg.bs_height_m,
        walls: cfg.walls(),
    })
}

/// True iff the BS→receiver-antenna segment clears every obstacle box.
pub fn classify_los(scene: &Scene) -> bool {
    let a = scene.bs_position;
    let b = scene.receiver_antenna();
    !scene.obstacles.iter().any(|o| o.bounds().intersects_segment(a, b))
}

/// Local planar coordinates in metres standing in for decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsReading {
    pub latitude_like: f64,
    pub longitude_like: f64,
}

impl GpsReading {
    pub fn as_xy(&self) -> [f64; 2] {
        [self.latitude_like, self.longitude_like]
    }
}

pub fn read_gps(scene: &Scene, noise_sigma_m: f64, rng: &mut ChaCha8Rng) -> Result<GpsReading> {
    if !(noise_sigma_m >= 0.0) {
        return Err(Error::invalid("noise_sigma_m must be >= 0"));
    }
    let [x, y, _] = scene.receiver.center;
    if noise_sigma_m == 0.0 {
        return Ok(GpsReading { latitude_like: x, longitude_like: y });
    }
    let normal = Normal::new(0.0, noise_sigma_m).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(GpsReading {
        latitude_like: x + normal.sample(rng),
        longitude_like: y + normal.sample(rng),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

/// Uniform samples on the five exposed faces (all but the bottom) of `b`.
fn sample_box_surface(b: &Aabb, per_face: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Vec3>) {
    // (fixed axis, fixed value)
    let faces = [
        (0, b.min[0]),
        (0, b.max[0]),
        (1, b.min[1]),
        (1, b.max[1]),
        (2, b.max[2]),
    ];
    for (axis, value) in faces {
        for _ in 0..per_face {
            let mut p = [0.0; 3];
            for (i, c) in p.iter_mut().enumerate() {
                *c = if i == axis {
                    value
                } else {
                    b.min[i] + rng.random::<f64>() * (b.max[i] - b.min[i])
                };
            }
            out.push(p);
        }
    }
}

pub fn sample_lidar(
    scene: &Scene,
    max_range_m: f64,
    points_per_face: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PointCloud> {
    if !(max_range_m > 0.0) {
        return Err(Error::invalid("max_range_m must be > 0"));
    }
    if points_per_face == 0 {
        return Err(Error::invalid("points_per_face must be >= 1"));
    }
    let sensor = scene.receiver_antenna();
    let mut raw = Vec::new();
    for o in &scene.obstacles {
        sample_box_surface(&o.bounds(), points_per_face, rng, &mut raw);
    }
    sample_box_surface(&scene.bs_structure(), points_per_face, rng, &mut raw);
    raw.retain(|p| distance(*p, sensor) <= max_range_m);
    Ok(PointCloud { points: raw })
}

/// Orthographic camera at the base station looking along +x across the road.
/// Image columns follow +y, rows follow −z (row 0 is the top).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraGeometry {
    pub plane_x: f64,
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
}

impl CameraGeometry {
    pub fn for_road(cfg: &SceneConfig) -> Self {
        CameraGeometry {
            plane_x: cfg.bs_position[0],
            y_range: cfg.road_y_range(),
            z_range: (0.0, 5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneImage {
    pub height: usize,
    pub width: usize,
    /// Row-major class labels.
    pub pixels: Vec<u8>,
}

impl SceneImage {
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.width + c]
    }
}

pub fn render_image(scene: &Scene, camera: &CameraGeometry, resolution: (usize, usize)) -> Result<SceneImage> {
    let (h, l) = resolution;
    if h == 0 || l == 0 {
        return Err(Error::invalid("image resolution must be positive"));
    }
    let (y0, y1) = camera.y_range;
    let (z0, z1) = camera.z_range;
    if !(y1 > y0 && z1 > z0) {
        return Err(Error::invalid("camera window must have positive extent"));
    }
    // Visible vehicles, nearest first; the first hit per pixel wins.
    let mut visible: Vec<(f64, Aabb, u8)> = scene
        .vehicles()
        .filter_map(|v| {
            let b = v.bounds();
            let depth = b.min[0] - camera.plane_x;
            (depth >= 0.0).then_some((depth, b, v.vehicle_type.label()))
        })
        .collect();
    visible.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut pixels = vec![0u8; h * l];
    let dy = (y1 - y0) / l as f64;
    let dz = (z1 - z0) / h as f64;
    for r in 0..h {
        let z = z1 - (r as f64 + 0.5) * dz;
        for c in 0..l {
            let y = y0 + (c as f64 + 0.5) * dy;
            if let Some((_, _, label)) = visible
                .iter()
                .find(|(_, b, _)| y >= b.min[1] && y <= b.max[1] && z >= b.min[2] && z <= b.max[2])
            {
                pixels[r * l + c] = *label;
            }
        }
    }
    Ok(SceneImage { height: h, width: l, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn single_vehicle_cfg() -> SceneConfig {
        SceneConfig { vehicle_count_range: (1, 1), ..SceneConfig::default() }
    }

    #[test]
    fn one_vehicle_is_the_receiver() {
        let s = generate_scene(&single_vehicle_cfg(), 3).unwrap();
        assert!(s.obstacles.is_empty());
        assert!(classify_los(&s));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 11).unwrap());
        assert_ne!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 12).unwrap());
    }

    #[test]
    fn receiver_rests_on_ground() {
        let s = generate_scene(&SceneConfig::default(), 5).unwrap();
        for v in s.vehicles() {
            assert_eq!(v.center[2], v.dims[2] / 2.0);
        }
    }

    #[test]
    fn overcrowded_road_is_infeasible() {
        let cfg = SceneConfig {
            road_length_m: 20.0,
            lane_count: 1,
            vehicle_count_range: (10, 10),
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::SceneInfeasible { .. })));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SceneConfig { vehicle_count_range: (5, 2), ..SceneConfig::default() };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Config(_))));
        let cfg = SceneConfig { bs_height_m: 0.0, ..SceneConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn blocking_box_on_midpoint_breaks_los() {
        let mut s = generate_scene(&single_vehicle_cfg(), 0).unwrap();
        let a = s.bs_position;
        let b = s.receiver_antenna();
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
        s.obstacles.push(VehicleInstance {
            vehicle_type: VehicleType::Truck,
            center: [mid[0], mid[1], 3.0],
            heading: 0.0,
            dims: [2.0, 2.0, 6.0],
        });
        assert!(!classify_los(&s));
    }

    #[test]
    fn zero_noise_gps_is_exact() {
        let s = generate_scene(&SceneConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = read_gps(&s, 0.0, &mut rng).unwrap();
        assert_eq!(g.as_xy(), [s.receiver.center[0], s.receiver.center[1]]);
        assert!(read_gps(&s, -1.0, &mut rng).is_err());
    }

    #[test]
    fn gps_is_reproducible() {
        let s = generate_scene(&SceneConfig::default(), 1).unwrap();
        let a = read_gps(&s, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = read_gps(&s, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gps_noise_has_requested_spread() {
        let s = generate_scene(&SceneConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| read_gps(&s, 1.0, &mut rng).unwrap().latitude_like - s.receiver.center[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std = {}", var.sqrt());
    }

    #[test]
    fn lidar_empty_when_nothing_in_range() {
        let mut s = generate_scene(&single_vehicle_cfg(), 0).unwrap();
        s.bs_position = [1000.0, 1000.0, 4.0];
        let cloud = sample_lidar(&s, 50.0, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(cloud.points.is_empty());
    }

    #[test]
    fn lidar_points_lie_on_single_obstacle() {
        let mut s = generate_scene(&single_vehicle_cfg(), 0).unwrap();
        s.bs_position = [1000.0, 1000.0, 4.0];
        let rx = s.receiver.center;
        let obstacle = VehicleInstance::new(VehicleType::Bus, [rx[0] + 3.5, rx[1]], 0.0, [12.0, 2.5, 3.2]);
        s.obstacles.push(obstacle.clone());
        let cloud = sample_lidar(&s, 100.0, 50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(cloud.points.len(), 250);
        let b = obstacle.bounds();
        for p in &cloud.points {
            assert!(b.surface_distance(*p) <= 1e-9);
            assert!(distance(*p, s.receiver_antenna()) <= 100.0);
        }
    }

    #[test]
    fn lidar_respects_max_range() {
        let s = generate_scene(&SceneConfig::default(), 4).unwrap();
        let cloud = sample_lidar(&s, 15.0, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for p in &cloud.points {
            assert!(distance(*p, s.receiver_antenna()) <= 15.0);
        }
    }

    #[test]
    fn image_of_empty_window_is_background() {
        let s = generate_scene(&single_vehicle_cfg(), 0).unwrap();
        let cam = CameraGeometry { plane_x: -2.0, y_range: (500.0, 600.0), z_range: (0.0, 5.0) };
        let img = render_image(&s, &cam, (10, 20)).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn car_filling_frame() {
        let mut s = generate_scene(&single_vehicle_cfg(), 0).unwrap();
        s.receiver = VehicleInstance::new(VehicleType::Car, [5.0, 40.0], 0.0, [4.5, 1.8, 1.5]);
        let cam = CameraGeometry { plane_x: -2.0, y_range: (39.0, 41.0), z_range: (0.2, 1.2) };
        let img = render_image(&s, &cam, (8, 16)).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 2));
        assert!(render_image(&s, &cam, (0, 16)).is_err());
    }
}
