//! ULA/DFT codebooks, geometric multipath tracing and per-beam-pair power.
//!
//! Both arrays are half-wavelength ULAs. The BS array axis is +y (along the
//! road) with broadside +x; a receiver's array axis is its travel direction
//! with broadside to its left. Angles are azimuths in the ground plane,
//! measured from broadside towards the array axis.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::geometry::{distance, Aabb, Vec3};
use crate::scene::{classify_los, Scene};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub element_count: usize,
    pub weights: Vec<Vec<Complex64>>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// DFT codebook: beam `m` has spatial frequency 2πm/element_count.
pub fn dft_codebook(element_count: usize) -> Result<Codebook> {
    if element_count < 1 {
        return Err(Error::invalid("element_count must be >= 1"));
    }
    let n = element_count as f64;
    let scale = 1.0 / n.sqrt();
    let weights = (0..element_count)
        .map(|m| {
            (0..element_count)
                .map(|k| Complex64::from_polar(scale, 2.0 * PI * (m * k) as f64 / n))
                .collect()
        })
        .collect();
    Ok(Codebook { element_count, weights })
}

/// Unit-norm λ/2 ULA response: element k = exp(iπk·sin θ)/√N.
pub fn steering_vector(element_count: usize, angle: f64) -> Vec<Complex64> {
    let scale = 1.0 / (element_count as f64).sqrt();
    let phase = PI * angle.sin();
    (0..element_count)
        .map(|k| Complex64::from_polar(scale, phase * k as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub gain: Complex64,
    pub aod: f64,
    pub aoa: f64,
    pub is_los: bool,
    pub length_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub paths: Vec<Path>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub reflection_loss_db: f64,
    pub pathloss_exponent: f64,
    /// Only sets the phase rotation per metre of path length.
    pub wavelength_m: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            reflection_loss_db: 6.0,
            pathloss_exponent: 2.0,
            wavelength_m: 0.005,
        }
    }
}

/// Azimuth of `dir` in a frame with the given broadside and axis unit vectors.
fn azimuth(dir: [f64; 2], broadside: [f64; 2], axis: [f64; 2]) -> f64 {
    let along = dir[0] * axis[0] + dir[1] * axis[1];
    let across = dir[0] * broadside[0] + dir[1] * broadside[1];
    along.atan2(across)
}

pub fn bs_aod(bs: Vec3, toward: Vec3) -> f64 {
    azimuth([toward[0] - bs[0], toward[1] - bs[1]], [1.0, 0.0], [0.0, 1.0])
}

pub fn receiver_aoa(scene: &Scene, from: Vec3) -> f64 {
    let rx = scene.receiver_antenna();
    let axis = scene.receiver.direction();
    let broadside = [-axis[1], axis[0]];
    azimuth([from[0] - rx[0], from[1] - rx[1]], broadside, axis)
}

/// A vertical reflecting rectangle lying in the plane `coord[axis] = value`.
#[derive(Debug, Clone, Copy)]
struct Reflector {
    axis: usize,
    value: f64,
    /// Extent along the other horizontal axis.
    span: (f64, f64),
    height: f64,
    normal_sign: f64,
    owner: Option<usize>,
}

fn reflectors(scene: &Scene) -> Vec<Reflector> {
    let mut out = Vec::new();
    for (i, o) in scene.obstacles.iter().enumerate() {
        let b = o.bounds();
        for axis in 0..2 {
            let other = 1 - axis;
            for (value, sign) in [(b.min[axis], -1.0), (b.max[axis], 1.0)] {
                out.push(Reflector {
                    axis,
                    value,
                    span: (b.min[other], b.max[other]),
                    height: b.max[2],
                    normal_sign: sign,
                    owner: Some(i),
                });
            }
        }
    }
    for w in &scene.walls {
        out.push(Reflector {
            axis: 0,
            value: w.x,
            span: w.y_range,
            height: w.height_m,
            normal_sign: w.normal_sign,
            owner: None,
        });
    }
    out
}

fn path_gain(length: f64, bounces: u32, cfg: &TraceConfig) -> Complex64 {
    let amp = length.powf(-cfg.pathloss_exponent / 2.0) * 10f64.powf(-cfg.reflection_loss_db * bounces as f64 / 20.0);
    let cycles = (length / cfg.wavelength_m).fract();
    Complex64::from_polar(amp, -2.0 * PI * cycles)
}

/// LOS plus first-order specular reflections (image method).
pub fn trace_paths(scene: &Scene, cfg: &TraceConfig) -> Result<PathSet> {
    let bs = scene.bs_position;
    let rx = scene.receiver_antenna();
    let boxes: Vec<Aabb> = scene.obstacles.iter().map(|o| o.bounds()).collect();
    let mut paths = Vec::new();

    if classify_los(scene) {
        let d = distance(bs, rx);
        paths.push(Path {
            gain: path_gain(d, 0, cfg),
            aod: bs_aod(bs, rx),
            aoa: receiver_aoa(scene, bs),
            is_los: true,
            length_m: d,
        });
    }

    for r in reflectors(scene) {
        let a = r.axis;
        if (bs[a] - r.value) * r.normal_sign <= 0.0 || (rx[a] - r.value) * r.normal_sign <= 0.0 {
            continue;
        }
        let mut image = bs;
        image[a] = 2.0 * r.value - bs[a];
        let t = (r.value - image[a]) / (rx[a] - image[a]);
        let mut hit = [0.0; 3];
        for i in 0..3 {
            hit[i] = image[i] + t * (rx[i] - image[i]);
        }
        hit[a] = r.value;
        let o = 1 - a;
        if hit[o] < r.span.0 || hit[o] > r.span.1 || hit[2] < 0.0 || hit[2] > r.height {
            continue;
        }
        let blocked = boxes.iter().enumerate().any(|(i, b)| {
            Some(i) != r.owner && (b.intersects_segment(bs, hit) || b.intersects_segment(hit, rx))
        });
        if blocked {
            continue;
        }
        let d = distance(image, rx);
        paths.push(Path {
            gain: path_gain(d, 1, cfg),
            aod: bs_aod(bs, hit),
            aoa: receiver_aoa(scene, hit),
            is_los: false,
            length_m: d,
        });
    }

    if paths.is_empty() {
        return Err(Error::LinkOutage);
    }
    Ok(PathSet { paths })
}

/// Complex M×N matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Complex64>,
}

impl ChannelMatrix {
    pub fn get(&self, m: usize, n: usize) -> Complex64 {
        self.entries[m * self.cols + n]
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        ChannelMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|e| e * c).collect(),
        }
    }
}

/// H = Σ_p g_p · a_tx(aod_p) · a_rx(aoa_p)^H.
pub fn synth_channel(paths: &PathSet, m: usize, n: usize) -> Result<ChannelMatrix> {
    if m < 1 || n < 1 {
        return Err(Error::invalid("array sizes must be >= 1"));
    }
    if paths.paths.is_empty() {
        return Err(Error::invalid("empty path set"));
    }
    let mut entries = vec![Complex64::new(0.0, 0.0); m * n];
    for p in &paths.paths {
        let at = steering_vector(m, p.aod);
        let ar = steering_vector(n, p.aoa);
        for (i, ati) in at.iter().enumerate() {
            let gi = p.gain * ati;
            for (j, arj) in ar.iter().enumerate() {
                entries[i * n + j] += gi * arj.conj();
            }
        }
    }
    Ok(ChannelMatrix { rows: m, cols: n, entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major |w_t^H H w_r|², tx beam major.
    pub y: Vec<f64>,
    pub best_pair: (usize, usize),
}

impl PowerMatrix {
    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.y[m * self.cols + n]
    }

    /// Flattened class index m·N + n of the best pair.
    pub fn best_index(&self) -> usize {
        self.best_pair.0 * self.cols + self.best_pair.1
    }
}

/// Flattened argmax; ties go to the smallest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn power_matrix(h: &ChannelMatrix, tx: &Codebook, rx: &Codebook) -> Result<PowerMatrix> {
    if tx.element_count != h.rows || rx.element_count != h.cols {
        return Err(Error::invalid(format!(
            "codebook sizes ({}, {}) do not match channel {}x{}",
            tx.element_count, rx.element_count, h.rows, h.cols
        )));
    }
    // A = W_tx^H · H, one row per tx beam.
    let n = h.cols;
    let mut y = Vec::with_capacity(tx.len() * rx.len());
    let mut row = vec![Complex64::new(0.0, 0.0); n];
    for wt in &tx.weights {
        row.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (i, wti) in wt.iter().enumerate() {
            let c = wti.conj();
            for (j, r) in row.iter_mut().enumerate() {
                *r += c * h.entries[i * n + j];
            }
        }
        for wr in &rx.weights {
            let v: Complex64 = row.iter().zip(wr).map(|(a, b)| a * b).sum();
            y.push(v.norm_sqr());
        }
    }
    let best = argmax_first(&y);
    let cols = rx.len();
    Ok(PowerMatrix {
        rows: tx.len(),
        cols,
        y,
        best_pair: (best / cols, best % cols),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig, VehicleInstance, VehicleType};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn codebook_of_one() {
        let cb = dft_codebook(1).unwrap();
        assert_eq!(cb.weights, vec![vec![c(1.0, 0.0)]]);
        assert!(dft_codebook(0).is_err());
    }

    #[test]
    fn codebook_columns_orthonormal() {
        for size in [4, 8, 32] {
            let cb = dft_codebook(size).unwrap();
            assert_eq!(cb.len(), size);
            for a in 0..size {
                for b in 0..size {
                    let ip: Complex64 = cb.weights[a].iter().zip(&cb.weights[b]).map(|(x, y)| x.conj() * y).sum();
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert!((ip - c(expect, 0.0)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn steering_vector_cases() {
        let v = steering_vector(4, 0.0);
        assert!(v.iter().all(|e| (e - c(0.5, 0.0)).norm() < 1e-15));
        let v = steering_vector(2, PI / 2.0);
        let s = 1.0 / 2f64.sqrt();
        assert!((v[0] - c(s, 0.0)).norm() < 1e-12);
        assert!((v[1] - c(-s, 0.0)).norm() < 1e-12);
        for angle in [-1.3, 0.2, 2.9] {
            let norm: f64 = steering_vector(7, angle).iter().map(|e| e.norm_sqr()).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    fn single_path(gain: Complex64, aod: f64, aoa: f64) -> PathSet {
        PathSet {
            paths: vec![Path { gain, aod, aoa, is_los: true, length_m: 1.0 }],
        }
    }

    #[test]
    fn broadside_channel_is_flat() {
        let h = synth_channel(&single_path(c(1.0, 0.0), 0.0, 0.0), 4, 2).unwrap();
        let expect = 1.0 / 8f64.sqrt();
        assert!(h.entries.iter().all(|e| (e - c(expect, 0.0)).norm() < 1e-12));
        assert!(synth_channel(&PathSet::default(), 4, 2).is_err());
    }

    #[test]
    fn channel_is_linear_in_gain() {
        let g = c(0.3, -1.2);
        let base = synth_channel(&single_path(c(1.0, 0.0), 0.4, -0.7), 8, 4).unwrap();
        let scaled = synth_channel(&single_path(g, 0.4, -0.7), 8, 4).unwrap();
        for (a, b) in base.entries.iter().zip(&scaled.entries) {
            assert!((a * g - b).norm() < 1e-12);
        }
    }

    #[test]
    fn two_paths_superpose() {
        let p1 = Path { gain: c(0.5, 0.1), aod: 0.3, aoa: -0.2, is_los: true, length_m: 1.0 };
        let p2 = Path { gain: c(-0.2, 0.4), aod: -1.1, aoa: 0.9, is_los: false, length_m: 2.0 };
        let both = synth_channel(&PathSet { paths: vec![p1, p2] }, 6, 3).unwrap();
        let h1 = synth_channel(&PathSet { paths: vec![p1] }, 6, 3).unwrap();
        let h2 = synth_channel(&PathSet { paths: vec![p2] }, 6, 3).unwrap();
        for k in 0..18 {
            assert!((both.entries[k] - h1.entries[k] - h2.entries[k]).norm() < 1e-14);
        }
    }

    #[test]
    fn scalar_power_matrix() {
        let h = ChannelMatrix { rows: 1, cols: 1, entries: vec![c(1.0, 0.0)] };
        let cb = dft_codebook(1).unwrap();
        let p = power_matrix(&h, &cb, &cb).unwrap();
        assert_eq!(p.y, vec![1.0]);
        assert_eq!(p.best_pair, (0, 0));
        assert!(power_matrix(&h, &dft_codebook(2).unwrap(), &cb).is_err());
    }

    #[test]
    fn power_scales_with_modulus_squared() {
        let h = synth_channel(&single_path(c(0.7, 0.2), 0.5, 0.1), 8, 4).unwrap();
        let (tx, rx) = (dft_codebook(8).unwrap(), dft_codebook(4).unwrap());
        let base = power_matrix(&h, &tx, &rx).unwrap();
        let k = c(-1.5, 2.0);
        let scaled = power_matrix(&h.scaled(k), &tx, &rx).unwrap();
        for (a, b) in base.y.iter().zip(&scaled.y) {
            assert!((a * k.norm_sqr() - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
        assert_eq!(base.best_pair, scaled.best_pair);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax_first(&[0.5, 1.0, 1.0, 0.2]), 1);
        assert_eq!(argmax_first(&[0.0, 0.0]), 0);
    }

    fn open_scene() -> Scene {
        let cfg = SceneConfig { vehicle_count_range: (1, 1), wall_margin_m: None, ..SceneConfig::default() };
        generate_scene(&cfg, 2).unwrap()
    }

    #[test]
    fn unobstructed_scene_has_single_los_path() {
        let s = open_scene();
        let ps = trace_paths(&s, &TraceConfig::default()).unwrap();
        assert_eq!(ps.paths.len(), 1);
        assert!(ps.paths[0].is_los);
        let d = distance(s.bs_position, s.receiver_antenna());
        assert!((ps.paths[0].gain.norm() - 1.0 / d).abs() < 1e-15);
    }

    #[test]
    fn blocked_link_uses_reflections_only() {
        let mut s = open_scene();
        s.receiver = VehicleInstance::new(VehicleType::Car, [1.75, 30.0], 0.0, [4.5, 1.8, 1.5]);
        // truck between BS and receiver
        s.obstacles.push(VehicleInstance::new(VehicleType::Truck, [1.75, 37.0], 0.0, [8.0, 2.5, 3.8]));
        // bus further down the lane whose rear face reflects
        s.obstacles.push(VehicleInstance::new(VehicleType::Bus, [1.75, 16.0], 0.0, [12.0, 2.5, 3.2]));
        assert!(!classify_los(&s));
        let ps = trace_paths(&s, &TraceConfig::default()).unwrap();
        assert!(!ps.paths.is_empty());
        assert!(ps.paths.iter().all(|p| !p.is_los));
    }

    #[test]
    fn total_blockage_is_outage() {
        let mut s = open_scene();
        s.receiver = VehicleInstance::new(VehicleType::Car, [5.25, 40.0], 0.0, [4.5, 1.8, 1.5]);
        s.obstacles.push(VehicleInstance::new(VehicleType::Truck, [1.75, 40.0], 0.0, [8.0, 2.5, 6.0]));
        assert!(matches!(trace_paths(&s, &TraceConfig::default()), Err(Error::LinkOutage)));
    }

    #[test]
    fn wall_reflection_matches_specular_geometry() {
        let cfg = SceneConfig { vehicle_count_range: (1, 1), ..SceneConfig::default() };
        let s = generate_scene(&cfg, 9).unwrap();
        let ps = trace_paths(&s, &TraceConfig::default()).unwrap();
        let bs = s.bs_position;
        let rx = s.receiver_antenna();
        let mut checked = 0;
        for w in &s.walls {
            // equal-angle condition along the road axis
            let da = (bs[0] - w.x).abs();
            let db = (rx[0] - w.x).abs();
            if (bs[0] - w.x) * w.normal_sign <= 0.0 {
                continue;
            }
            let py = bs[1] + (rx[1] - bs[1]) * da / (da + db);
            let expect_aod = (py - bs[1]).atan2(w.x - bs[0]);
            let found = ps.paths.iter().filter(|p| !p.is_los).any(|p| (p.aod - expect_aod).abs() < 1e-9);
            assert!(found, "no path with aod {expect_aod}");
            checked += 1;
        }
        assert!(checked >= 1);
    }
}
