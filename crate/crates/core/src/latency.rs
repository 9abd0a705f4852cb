//! Timing and payload models for standard and fusion-assisted beam selection.
//! All times are milliseconds.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// 5G-NR synchronization-signal timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NrTiming {
    /// SS burst periodicity.
    pub t_p: f64,
    /// SS burst duration.
    pub t_ssb: f64,
    pub blocks_per_burst: u32,
}

impl Default for NrTiming {
    fn default() -> Self {
        NrTiming { t_p: 20.0, t_ssb: 5.0, blocks_per_burst: 32 }
    }
}

impl NrTiming {
    /// Time to sweep one beam: T_ssb / blocks_per_burst (156.25 µs by default).
    pub fn t_b(&self) -> f64 {
        self.t_ssb / self.blocks_per_burst as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_p > 0.0 && self.t_ssb > 0.0) || self.blocks_per_burst == 0 {
            return Err(Error::Config("NR timing values must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed overheads of the fusion pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTiming {
    pub name: String,
    pub t_process: f64,
    pub t_data: f64,
    pub t_control: f64,
}

impl PipelineTiming {
    /// GPS + LiDAR + camera, 802.11p worst-case data channel.
    pub fn raymobtime() -> Self {
        PipelineTiming { name: "raymobtime-like".into(), t_process: 1.30, t_data: 1.332, t_control: 1.03 }
    }

    /// GPS + LiDAR only, so no image preprocessing.
    pub fn neu() -> Self {
        PipelineTiming { name: "neu-like".into(), t_process: 0.0, t_data: 0.33, t_control: 0.53 }
    }

    pub fn fixed_overhead(&self) -> f64 {
        self.t_process + self.t_data + self.t_control
    }

    pub fn validate(&self) -> Result<()> {
        if [self.t_process, self.t_data, self.t_control].iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("pipeline timing values must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub rate_bps_min: f64,
    pub rate_bps_max: f64,
    pub bytes_per_element: usize,
}

impl LinkBudget {
    pub fn ieee_80211p() -> Self {
        LinkBudget { rate_bps_min: 3e6, rate_bps_max: 27e6, bytes_per_element: 8 }
    }

    pub fn lte_siso() -> Self {
        LinkBudget { rate_bps_min: 4.4e6, rate_bps_max: 75e6, bytes_per_element: 8 }
    }
}

/// Exhaustive 5G-NR sweep over `beam_pairs` pairs.
pub fn t_nr(beam_pairs: usize, nt: &NrTiming) -> f64 {
    let per = nt.blocks_per_burst as usize;
    nt.t_p * ((beam_pairs.max(1) - 1) / per) as f64 + nt.t_ssb
}

/// Sweep of only the `k` selected pairs.
pub fn t_sweep(k: usize, nt: &NrTiming) -> f64 {
    let per = nt.blocks_per_burst as usize;
    let k = k.max(1);
    nt.t_p * ((k - 1) / per) as f64 + nt.t_b() * (1 + (k - 1) % per) as f64
}

/// End-to-end fusion-assisted selection latency.
pub fn t_df(k: usize, pt: &PipelineTiming, nt: &NrTiming) -> f64 {
    pt.t_process + pt.t_data + pt.t_control + t_sweep(k, nt)
}

pub const IEEE_80211AD_MS_PER_PAIR: f64 = 0.303;

pub fn t_80211ad(beam_pairs: usize, per_pair_ms: f64) -> f64 {
    per_pair_ms * beam_pairs as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    RawLidar,
    VoxelGrid,
    FusedFeatures,
    SelectedBeams,
}

impl std::str::FromStr for PayloadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_lidar" => Ok(PayloadKind::RawLidar),
            "voxel_grid" => Ok(PayloadKind::VoxelGrid),
            "fused_features" => Ok(PayloadKind::FusedFeatures),
            "selected_beams" => Ok(PayloadKind::SelectedBeams),
            other => Err(Error::invalid(format!("unknown payload kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadProfile {
    pub class_count: usize,
    pub grid_shape: [usize; 3],
    pub bytes_per_cell: usize,
    pub bytes_per_element: usize,
    /// Needed only for raw LiDAR accounting (x, y, z per point).
    pub raw_lidar_points: Option<usize>,
}

pub fn payload_bytes(kind: PayloadKind, profile: &PayloadProfile) -> Result<usize> {
    Ok(match kind {
        PayloadKind::RawLidar => {
            let n = profile
                .raw_lidar_points
                .ok_or_else(|| Error::invalid("profile has no raw LiDAR point count"))?;
            n * 3 * profile.bytes_per_element
        }
        PayloadKind::VoxelGrid => profile.grid_shape.iter().product::<usize>() * profile.bytes_per_cell,
        PayloadKind::FusedFeatures => 2 * profile.class_count * profile.bytes_per_element,
        PayloadKind::SelectedBeams => profile.class_count * 8,
    })
}

pub fn transfer_time(bytes: usize, rate_bps: f64) -> Result<f64> {
    if !(rate_bps > 0.0) {
        return Err(Error::invalid("rate must be positive"));
    }
    Ok(bytes as f64 * 8.0 / rate_bps * 1e3)
}

/// Time a vehicle at `speed_mps` spends inside the BS coverage.
pub fn contact_time(bs_height_m: f64, coverage_angle_deg: f64, speed_mps: f64) -> Result<f64> {
    if !(bs_height_m > 0.0 && speed_mps > 0.0) || !(0.0..180.0).contains(&coverage_angle_deg) {
        return Err(Error::invalid("need h > 0, v > 0 and a coverage angle in [0, 180)"));
    }
    Ok(2.0 * bs_height_m * (coverage_angle_deg.to_radians() / 2.0).tan() / speed_mps * 1e3)
}

/// Approximate 3-dB beamwidth of an N-element ULA: 2/N rad, in degrees.
pub fn beamwidth_deg(elements: usize) -> f64 {
    (2.0 / elements.max(1) as f64).to_degrees()
}

pub fn coverage_angle_deg(elements: usize) -> f64 {
    elements as f64 * beamwidth_deg(elements)
}
