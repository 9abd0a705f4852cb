use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Profile, RunConfig};
use crate::channel::{dft_codebook, power_matrix, synth_channel, trace_paths, Codebook};
use crate::neural::{Example, Modality, Tensor};
use crate::preprocess::{make_bitmap, majority_label, refine_bitmap, voxelize, RefinedBitMap, VoxelGrid, VoxelRle};
use crate::rng::{self, Purpose};
use crate::scene::{classify_los, generate_scene, read_gps, render_image, sample_lidar, CameraGeometry, GpsReading, Scene, SceneConfig};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub split: Split,
    pub scene: Scene,
    pub los: bool,
    pub gps: GpsReading,
    pub lidar_points: usize,
    pub voxels: VoxelRle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<RefinedBitMap>,
    /// Received power per beam pair, flattened tx-major.
    pub power: Vec<f64>,
    pub best_pair: (usize, usize),
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedScene {
    pub scene_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub profile: Profile,
    pub sample_count: usize,
    pub split_fractions: [f64; 3],
    pub split_counts: BTreeMap<Split, usize>,
    /// sha256 of each split's JSON lines in file order.
    pub checksums: BTreeMap<Split, String>,
    pub skipped: Vec<SkippedScene>,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn checksum(&self, split: Split) -> &str {
        self.manifest.checksums.get(&split).map(String::as_str).unwrap_or_default()
    }
}

struct Codebooks {
    tx: Codebook,
    rx: Codebook,
}

fn codebooks(cfg: &RunConfig) -> Result<Codebooks> {
    Ok(Codebooks { tx: dft_codebook(cfg.antennas.tx_elements)?, rx: dft_codebook(cfg.antennas.rx_elements)? })
}

/// Builds one sample; scene-level failures (placement, outage, marker
/// collision) come back as `Ok(Err(reason))` so the caller can skip them.
fn build_sample(
    cfg: &RunConfig,
    scene_cfg: &SceneConfig,
    books: &Codebooks,
    id: u64,
    split: Split,
) -> Result<std::result::Result<Sample, String>> {
    let scene = match generate_scene(scene_cfg, id) {
        Ok(s) => s,
        Err(e @ Error::SceneInfeasible { .. }) => return Ok(Err(e.to_string())),
        Err(e) => return Err(e),
    };
    let paths = match trace_paths(&scene, &cfg.trace) {
        Ok(p) => p,
        Err(Error::LinkOutage) => return Ok(Err("link outage".into())),
        Err(e) => return Err(e),
    };
    let h = synth_channel(&paths, cfg.antennas.tx_elements, cfg.antennas.rx_elements)?;
    let pm = power_matrix(&h, &books.tx, &books.rx)?;

    let gps = read_gps(&scene, cfg.sensors.gps_noise_sigma_m, &mut rng::stream(cfg.seed, Purpose::Gps, id))?;
    let cloud = sample_lidar(
        &scene,
        cfg.sensors.lidar_max_range_m,
        cfg.sensors.lidar_points_per_face,
        &mut rng::stream(cfg.seed, Purpose::Lidar, id),
    )?;
    let grid = match voxelize(&cloud, &cfg.voxel, scene.bs_position, receiver_marker(cfg, &scene, &gps)) {
        Ok(g) => g,
        Err(e @ Error::MarkerCollision(_)) => return Ok(Err(e.to_string())),
        Err(e) => return Err(e),
    };
    let image = match (cfg.has_image(), cfg.sensors.image_resolution) {
        (true, Some(res)) => {
            let img = render_image(&scene, &CameraGeometry::for_road(scene_cfg), res)?;
            let bm = make_bitmap(&img, cfg.sensors.bitmap_window, cfg.sensors.bitmap_stride, majority_label)?;
            Some(refine_bitmap(&bm, scene.receiver.vehicle_type))
        }
        _ => None,
    };
    Ok(Ok(Sample {
        id,
        split,
        los: classify_los(&scene),
        scene,
        gps,
        lidar_points: cloud.points.len(),
        voxels: grid.to_rle(),
        image,
        label: pm.best_index(),
        best_pair: pm.best_pair,
        power: pm.y,
    }))
}

/// The receiver cell is marked at the noisy GPS fix, clamped into the grid.
fn receiver_marker(cfg: &RunConfig, scene: &Scene, gps: &GpsReading) -> [f64; 3] {
    let v = &cfg.voxel;
    let clamp = |x: f64, (lo, hi): (f64, f64)| x.clamp(lo, hi);
    [
        clamp(gps.latitude_like, v.x_bounds),
        clamp(gps.longitude_like, v.y_bounds),
        clamp(scene.receiver_antenna()[2], v.z_bounds),
    ]
}

/// Generates `count` valid samples with consecutive scene ids starting at
/// `*next_id`, skipping failed scenes.
fn collect(
    cfg: &RunConfig,
    scene_cfg: &SceneConfig,
    books: &Codebooks,
    split: Split,
    count: usize,
    next_id: &mut u64,
    skipped: &mut Vec<SkippedScene>,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(count);
    let budget = *next_id + 10 * count as u64 + 100;
    while out.len() < count {
        if *next_id >= budget {
            let ids: Vec<u64> = skipped.iter().rev().take(10).map(|s| s.scene_id).collect();
            return Err(Error::Data(format!(
                "too many unusable scenes while building the {split:?} split (recent ids {ids:?})"
            )));
        }
        let want = count - out.len();
        let ids: Vec<u64> = (*next_id..*next_id + want as u64).collect();
        *next_id += want as u64;
        let built = ids
            .par_iter()
            .map(|&id| build_sample(cfg, scene_cfg, books, id, split))
            .collect::<Result<Vec<_>>>()?;
        for (id, b) in ids.into_iter().zip(built) {
            match b {
                Ok(s) => out.push(s),
                Err(reason) => skipped.push(SkippedScene { scene_id: id, reason }),
            }
        }
    }
    Ok(out)
}

pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = (n as f64 * fractions[0]).round() as usize;
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train);
    [train, val, n - train - val]
}

pub fn generate(cfg: &RunConfig, n_samples: usize) -> Result<Dataset> {
    cfg.validate()?;
    let counts = split_counts(n_samples, cfg.dataset.split_fractions);
    if counts.contains(&0) {
        return Err(Error::Config(format!("{n_samples} samples leave a split empty: {counts:?}")));
    }
    let books = codebooks(cfg)?;
    let base = cfg.scene_config();
    let test_scene = match cfg.dataset.test_traffic_density {
        Some(d) => SceneConfig { traffic_density: d, ..base.clone() },
        None => base.clone(),
    };
    let mut next_id = 0;
    let mut skipped = Vec::new();
    let mut samples = Vec::with_capacity(n_samples);
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        let scene_cfg = if split == Split::Test { &test_scene } else { &base };
        samples.extend(collect(cfg, scene_cfg, &books, split, count, &mut next_id, &mut skipped)?);
    }
    let lines = sample_lines(&samples)?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        profile: cfg.profile,
        sample_count: samples.len(),
        split_fractions: cfg.dataset.split_fractions,
        split_counts: Split::ALL.into_iter().zip(counts).collect(),
        checksums: split_checksums(&samples, &lines),
        skipped,
        config: RunConfig { output_dir: PathBuf::new(), ..cfg.clone() },
    };
    Ok(Dataset { manifest, samples })
}

fn sample_lines(samples: &[Sample]) -> Result<Vec<String>> {
    samples.iter().map(|s| serde_json::to_string(s).map_err(Error::from)).collect()
}

fn split_checksums(samples: &[Sample], lines: &[String]) -> BTreeMap<Split, String> {
    let mut hashers: BTreeMap<Split, Sha256> = Split::ALL.iter().map(|s| (*s, Sha256::new())).collect();
    for (s, line) in samples.iter().zip(lines) {
        let h = hashers.get_mut(&s.split).expect("all splits present");
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    hashers.into_iter().map(|(k, h)| (k, hex::encode(h.finalize()))).collect()
}

pub fn write(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join(SAMPLES_FILE))?);
    for line in sample_lines(&dataset.samples)? {
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&dataset.manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let data_err = |what: &str, e: &dyn std::fmt::Display| Error::Data(format!("{what}: {e}"));
    let manifest_text =
        fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| data_err(&format!("{}", dir.display()), &e))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text).map_err(|e| data_err("manifest", &e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported dataset format version {}", manifest.format_version)));
    }
    let f = fs::File::open(dir.join(SAMPLES_FILE)).map_err(|e| data_err(SAMPLES_FILE, &e))?;
    let mut samples = Vec::with_capacity(manifest.sample_count);
    let mut lines = Vec::with_capacity(manifest.sample_count);
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let s: Sample = serde_json::from_str(&line).map_err(|e| data_err(&format!("line {}", i + 1), &e))?;
        samples.push(s);
        lines.push(line);
    }
    if samples.len() != manifest.sample_count {
        return Err(Error::Data(format!("manifest lists {} samples, file has {}", manifest.sample_count, samples.len())));
    }
    if split_checksums(&samples, &lines) != manifest.checksums {
        return Err(Error::Data("split checksums do not match the manifest".into()));
    }
    let b = manifest.config.class_count();
    if let Some(s) = samples.iter().find(|s| s.label >= b || s.power.len() != b) {
        return Err(Error::Data(format!("sample {} has a label or power row outside {b} beam pairs", s.id)));
    }
    Ok(Dataset { manifest, samples })
}

/// Model inputs for `sample` in modality order.
pub fn model_inputs(cfg: &RunConfig, sample: &Sample, modalities: &[Modality]) -> Result<Vec<Tensor>> {
    let mut mods = modalities.to_vec();
    mods.sort();
    mods.iter().map(|m| modality_input(cfg, sample, *m)).collect()
}

pub fn modality_input(cfg: &RunConfig, sample: &Sample, modality: Modality) -> Result<Tensor> {
    match modality {
        Modality::Gps => {
            let (x0, x1) = cfg.voxel.x_bounds;
            let (y0, y1) = cfg.voxel.y_bounds;
            Ok(Tensor::vector(vec![
                (sample.gps.latitude_like - x0) / (x1 - x0),
                (sample.gps.longitude_like - y0) / (y1 - y0),
            ]))
        }
        Modality::Lidar => {
            let grid = VoxelGrid::from_rle(&sample.voxels)?;
            Tensor::new(grid.shape.to_vec(), grid.cells.iter().map(|&c| c as f64).collect())
        }
        Modality::Image => {
            let img = sample
                .image
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sample {} has no image", sample.id)))?;
            Tensor::new(vec![img.rows, img.cols], img.labels.iter().map(|&l| l as f64).collect())
        }
    }
}

pub fn examples(cfg: &RunConfig, samples: &[&Sample], modalities: &[Modality]) -> Result<Vec<Example>> {
    samples
        .par_iter()
        .map(|s| Ok(Example { inputs: model_inputs(cfg, s, modalities)?, label: s.label }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(profile: Profile) -> RunConfig {
        let mut cfg = RunConfig::for_profile(profile);
        cfg.dataset.samples = 10;
        cfg
    }

    #[test]
    fn split_counts_cover_all() {
        assert_eq!(split_counts(2000, [0.73, 0.17, 0.10]), [1460, 340, 200]);
        assert_eq!(split_counts(10, [0.73, 0.17, 0.10]), [7, 2, 1]);
    }

    #[test]
    fn generation_is_deterministic_and_labels_in_range() {
        let cfg = small(Profile::NeuLike);
        let a = generate(&cfg, 10).unwrap();
        let b = generate(&cfg, 10).unwrap();
        assert_eq!(a.manifest.checksums, b.manifest.checksums);
        assert!(a.samples.iter().all(|s| s.label < 64 && s.image.is_none()));
        assert_eq!(a.split(Split::Test).count(), 1);
        let line = serde_json::to_string(&a.samples[0]).unwrap();
        assert!(!line.contains("\"image\""));
    }

    #[test]
    fn round_trip_and_tamper_detection() {
        let cfg = small(Profile::NeuLike);
        let ds = generate(&cfg, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write(&ds, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.samples, ds.samples);
        let path = dir.path().join(SAMPLES_FILE);
        let text = fs::read_to_string(&path).unwrap().replacen("\"los\":true", "\"los\":false", 1);
        let text = if text == fs::read_to_string(&path).unwrap() {
            text.replacen("\"los\":false", "\"los\":true", 1)
        } else {
            text
        };
        fs::write(&path, text).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn raymobtime_samples_carry_bitmaps() {
        let cfg = small(Profile::RaymobtimeLike);
        let ds = generate(&cfg, 3).unwrap_err();
        assert!(ds.is_config_error());
        let ds = generate(&cfg, 10).unwrap();
        for s in &ds.samples {
            let img = s.image.as_ref().unwrap();
            assert_eq!((img.rows, img.cols), (101, 185));
            assert_eq!(s.voxels.shape, [20, 200, 10]);
            assert!(s.label < 256);
            let inputs = model_inputs(&cfg, s, &cfg.modalities).unwrap();
            assert_eq!(inputs.len(), 3);
        }
    }
}
