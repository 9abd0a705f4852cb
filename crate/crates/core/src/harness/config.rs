use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::TraceConfig;
use crate::latency::{NrTiming, PipelineTiming};
use crate::neural::{Activation, ExtractorSpec, LayerSpec, Modality, ModelSpec, TrainConfig};
use crate::preprocess::{bitmap_shape, VoxelSpec};
use crate::scene::SceneConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 32×8 arrays, GPS + LiDAR + camera.
    RaymobtimeLike,
    /// 8×8 arrays, GPS + LiDAR.
    NeuLike,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::RaymobtimeLike => "raymobtime-like",
            Profile::NeuLike => "neu-like",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raymobtime-like" | "raymobtime" => Ok(Profile::RaymobtimeLike),
            "neu-like" | "neu" => Ok(Profile::NeuLike),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub gps_noise_sigma_m: f64,
    pub lidar_max_range_m: f64,
    pub lidar_points_per_face: usize,
    /// (H, L) of the camera image; absent when the profile has no camera.
    pub image_resolution: Option<(usize, usize)>,
    pub bitmap_window: usize,
    pub bitmap_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AntennaConfig {
    pub tx_elements: usize,
    pub rx_elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub samples: usize,
    /// train, validation, test
    pub split_fractions: [f64; 3],
    /// Traffic density used for the test split only.
    pub test_traffic_density: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    /// Defaults to the number of beam pairs.
    pub latent_dim: Option<usize>,
    pub gps_hidden: usize,
    pub sensor_hidden: usize,
    /// Defaults to the latent dimension.
    pub fusion_hidden: Option<usize>,
    pub dropout: f64,
    /// Train the single-modality models first and build the fusion model on
    /// their extractors.
    pub staged_fusion: bool,
    /// Keep reused extractors fixed while the fusion head trains.
    pub freeze_extractors: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub k_list: Vec<usize>,
    pub alpha_list: Vec<f64>,
    pub t_total_ms: f64,
    pub nr: NrTiming,
    pub pipeline: PipelineTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub modalities: Vec<Modality>,
    pub scene: SceneConfig,
    pub sensors: SensorConfig,
    pub voxel: VoxelSpec,
    pub trace: TraceConfig,
    pub antennas: AntennaConfig,
    pub dataset: DatasetConfig,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub selection: SelectionConfig,
}

const DEFAULT_ALPHAS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 5.0];
const CONTACT_TIME_MS: f64 = 807.0;

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let train = TrainConfig { learning_rate: 1e-3, max_epochs: 60, ..TrainConfig::default() };
        let model = ModelOptions {
            latent_dim: None, gps_hidden: 16, sensor_hidden: 64, fusion_hidden: None,
            dropout: 0.0,
            staged_fusion: true,
            freeze_extractors: true,
        };
        match profile {
            Profile::NeuLike => RunConfig {
                profile,
                seed: 7,
                output_dir: PathBuf::from("runs/neu-like"),
                modalities: vec![Modality::Gps, Modality::Lidar],
                scene: SceneConfig::default(),
                sensors: SensorConfig {
                    gps_noise_sigma_m: 1.0,
                    lidar_max_range_m: 100.0,
                    lidar_points_per_face: 12,
                    image_resolution: None,
                    bitmap_window: 40,
                    bitmap_stride: 5,
                },
                voxel: VoxelSpec {
                    x_bounds: (-4.0, 16.0),
                    y_bounds: (0.0, 80.0),
                    z_bounds: (0.0, 10.0),
                    bin_sizes: [1.0, 4.0, 0.5],
                },
                trace: TraceConfig::default(),
                antennas: AntennaConfig { tx_elements: 8, rx_elements: 8 },
                dataset: DatasetConfig { samples: 2000, split_fractions: [0.73, 0.17, 0.10], test_traffic_density: None },
                model,
                train,
                selection: SelectionConfig {
                    k_list: vec![1, 2, 3, 5, 8, 10, 16, 20, 32, 64],
                    alpha_list: DEFAULT_ALPHAS.to_vec(),
                    t_total_ms: CONTACT_TIME_MS,
                    nr: NrTiming::default(),
                    pipeline: PipelineTiming::neu(),
                },
            },
            Profile::RaymobtimeLike => RunConfig {
                profile,
                seed: 7,
                output_dir: PathBuf::from("runs/raymobtime-like"),
                modalities: vec![Modality::Gps, Modality::Lidar, Modality::Image],
                scene: SceneConfig {
                    road_length_m: 200.0,
                    road_origin: [748.0, 460.0],
                    bs_position: [746.0, 560.0, 4.0],
                    vehicle_count_range: (6, 24),
                    ..SceneConfig::default()
                },
                sensors: SensorConfig {
                    gps_noise_sigma_m: 1.0,
                    lidar_max_range_m: 100.0,
                    lidar_points_per_face: 12,
                    image_resolution: Some((540, 960)),
                    bitmap_window: 40,
                    bitmap_stride: 5,
                },
                voxel: VoxelSpec {
                    x_bounds: (744.0, 767.0),
                    y_bounds: (429.0, 679.0),
                    z_bounds: (0.0, 10.0),
                    bin_sizes: [1.15, 1.25, 1.0],
                },
                trace: TraceConfig::default(),
                antennas: AntennaConfig { tx_elements: 32, rx_elements: 8 },
                dataset: DatasetConfig { samples: 2000, split_fractions: [0.73, 0.17, 0.10], test_traffic_density: None },
                model,
                train,
                selection: SelectionConfig {
                    k_list: vec![1, 5, 6, 10, 13, 20, 30, 50, 100, 256],
                    alpha_list: DEFAULT_ALPHAS.to_vec(),
                    t_total_ms: CONTACT_TIME_MS,
                    nr: NrTiming::default(),
                    pipeline: PipelineTiming::raymobtime(),
                },
            },
        }
    }

    /// Parses a TOML document naming a `profile`; every other key overrides
    /// that profile's defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let profile: Profile = match user.get("profile") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("`profile` must be a string".into())),
            None => Profile::NeuLike,
        };
        let mut base = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Scene placement, sensor noise and training all derive from this seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig { rng_seed: self.seed, ..self.scene.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { rng_seed: self.seed, ..self.train.clone() }
    }

    pub fn class_count(&self) -> usize {
        self.antennas.tx_elements * self.antennas.rx_elements
    }

    pub fn has_image(&self) -> bool {
        self.modalities.contains(&Modality::Image)
    }

    pub fn bitmap_shape(&self) -> Option<(usize, usize)> {
        let (h, l) = self.sensors.image_resolution?;
        Some(bitmap_shape(h, l, self.sensors.bitmap_window, self.sensors.bitmap_stride))
    }

    pub fn input_shape(&self, modality: Modality) -> Result<Vec<usize>> {
        match modality {
            Modality::Gps => Ok(vec![2]),
            Modality::Lidar => Ok(self.voxel.shape()?.to_vec()),
            Modality::Image => {
                let (r, c) = self.bitmap_shape().ok_or_else(|| Error::Config("profile has no camera".into()))?;
                Ok(vec![r, c])
            }
        }
    }

    /// Dense extractors for `modalities` (sorted) and the fusion head.
    pub fn model_spec(&self, modalities: &[Modality]) -> Result<ModelSpec> {
        let b = self.class_count();
        let d = self.model.latent_dim.unwrap_or(b);
        let layer = |width, activation| LayerSpec { width, activation, dropout: self.model.dropout };
        let mut mods = modalities.to_vec();
        mods.sort();
        mods.dedup();
        let mut extractors = Vec::new();
        for m in mods {
            if !self.modalities.contains(&m) {
                return Err(Error::Config(format!("modality {} is not enabled in this run", m.name())));
            }
            let hidden = if m == Modality::Gps { self.model.gps_hidden } else { self.model.sensor_hidden };
            extractors.push(ExtractorSpec {
                modality: m,
                input_shape: self.input_shape(m)?,
                layers: vec![layer(hidden, Activation::Relu), LayerSpec::new(d, Activation::Tanh)],
            });
        }
        let spec = ModelSpec {
            latent_dim: d,
            extractors,
            fusion_layers: vec![
                layer(self.model.fusion_hidden.unwrap_or(d), Activation::Relu),
                LayerSpec::new(b, Activation::Linear),
            ],
            class_count: b,
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.scene.validate()?;
        self.voxel.shape().map_err(|e| Error::Config(e.to_string()))?;
        if self.antennas.tx_elements == 0 || self.antennas.rx_elements == 0 {
            return bad("antenna element counts must be positive".into());
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        if self.profile == Profile::NeuLike && self.has_image() {
            return bad("the neu-like profile has no camera".into());
        }
        if self.has_image() {
            let Some((h, l)) = self.sensors.image_resolution else {
                return bad("image modality needs sensors.image_resolution".into());
            };
            let w = self.sensors.bitmap_window;
            if w == 0 || w > h.min(l) || self.sensors.bitmap_stride == 0 {
                return bad("bit-map window must fit the image and stride be >= 1".into());
            }
        }
        let f = self.dataset.split_fractions;
        if f.iter().any(|x| !(*x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be nonnegative and sum to 1".into());
        }
        if f[0] == 0.0 || f[1] == 0.0 || f[2] == 0.0 {
            return bad("every split needs a nonzero fraction".into());
        }
        if let Some(d) = self.dataset.test_traffic_density {
            if !(0.0..=1.0).contains(&d) {
                return bad("test_traffic_density must lie in [0, 1]".into());
            }
        }
        if !(self.sensors.gps_noise_sigma_m >= 0.0) {
            return bad("gps noise sigma must be >= 0".into());
        }
        let b = self.class_count();
        if self.selection.k_list.iter().any(|k| *k == 0 || *k > b) {
            return bad(format!("k_list entries must lie in 1..={b}"));
        }
        if self.selection.alpha_list.iter().any(|a| !(*a >= 0.0)) || !(self.selection.t_total_ms > 0.0) {
            return bad("alphas must be >= 0 and t_total_ms > 0".into());
        }
        self.selection.nr.validate()?;
        self.selection.pipeline.validate()?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        for p in [self.scene.bs_position, self.receiver_probe()] {
            if self.voxel.cell_of(p, self.voxel.shape()?).is_none() {
                return bad(format!("point {p:?} lies outside the voxel bounds"));
            }
        }
        self.model_spec(&self.modalities)?;
        Ok(())
    }

    fn receiver_probe(&self) -> [f64; 3] {
        let (x0, x1) = self.scene.road_x_range();
        let (y0, y1) = self.scene.road_y_range();
        [(x0 + x1) / 2.0, (y0 + y1) / 2.0, 1.0]
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
