use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Profile, RunConfig};
use super::dataset::{self, examples, modality_input, model_inputs, Dataset, DatasetManifest, Sample, Split};
use crate::latency::{t_df, t_nr, t_sweep, payload_bytes, PayloadKind, PayloadProfile};
use crate::metrics::{self, EvalRecord};
use crate::neural::{
    decode_features, encode_features, mec_side_predict, predict, vehicle_side_features, LayerWeights, Modality,
    ModelSpec, Parameters, ScoreVector, TrainConfig, TrainData, TrainState, Trainer,
};
use crate::topk::{build_tables, select_k, EmpiricalTables, KSelectionConfig};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Fusion,
    Gps,
    Lidar,
    Image,
}

impl TrainMode {
    pub fn unimodal(m: Modality) -> Self {
        match m {
            Modality::Gps => TrainMode::Gps,
            Modality::Lidar => TrainMode::Lidar,
            Modality::Image => TrainMode::Image,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Fusion => "fusion",
            TrainMode::Gps => "gps",
            TrainMode::Lidar => "lidar",
            TrainMode::Image => "image",
        }
    }

    pub fn modalities(self, cfg: &RunConfig) -> Vec<Modality> {
        match self {
            TrainMode::Fusion => cfg.modalities.clone(),
            TrainMode::Gps => vec![Modality::Gps],
            TrainMode::Lidar => vec![Modality::Lidar],
            TrainMode::Image => vec![Modality::Image],
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(TrainMode::Fusion),
            other => Ok(TrainMode::unimodal(other.parse().map_err(|_| Error::Config(format!("unknown mode `{other}`")))?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub profile: Profile,
    pub mode: TrainMode,
    pub seed: u64,
    pub spec: ModelSpec,
    pub train_config: TrainConfig,
    pub train_checksum: String,
    pub layers: Vec<LayerWeights>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn params(&self) -> Result<Parameters> {
        Parameters::from_layers(&self.spec, &self.layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", ck.format_version)));
        }
        Ok(ck)
    }
}

/// Refuses datasets generated under a different sensing or antenna setup.
pub fn check_compatible(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<()> {
    let d = &manifest.config;
    let same = manifest.profile == cfg.profile
        && d.antennas == cfg.antennas
        && d.voxel == cfg.voxel
        && d.sensors == cfg.sensors
        && d.modalities == cfg.modalities;
    if !same {
        return Err(Error::Config("dataset manifest does not match the run configuration".into()));
    }
    Ok(())
}

fn split_refs(ds: &Dataset, split: Split) -> Vec<&Sample> {
    ds.split(split).collect()
}

pub fn cmd_generate(cfg: &RunConfig, n_samples: usize, dir: &Path) -> Result<DatasetManifest> {
    let ds = dataset::generate(cfg, n_samples)?;
    dataset::write(&ds, dir)?;
    Ok(ds.manifest)
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub epochs_run: usize,
}

/// Trains `mode` on the train split, validating on the val split. With
/// `resume`, continues that checkpoint's optimizer state up to
/// `cfg.train.max_epochs` total epochs.
/// Fusion parameters whose extractor layers come from trained
/// single-modality checkpoints; returns the parameters and the reused layer
/// names.
pub fn fusion_warm_start(
    ds: &Dataset,
    spec: &ModelSpec,
    seed: u64,
    extractors: &[Checkpoint],
) -> Result<(Parameters, Vec<String>)> {
    let mut params = Parameters::init(spec, seed)?;
    let mut reused = Vec::new();
    for ck in extractors {
        let [m] = ck.spec.modalities()[..] else {
            return Err(Error::Config(format!("`{}` checkpoint is not a single-modality model", ck.mode.name())));
        };
        let ours = spec.extractor(m).map(|(_, e)| e);
        if ours != ck.spec.extractor(m).map(|(_, e)| e) || ck.spec.latent_dim != spec.latent_dim {
            return Err(Error::Config(format!("{} extractor does not match the fusion model", m.name())));
        }
        if ck.train_checksum != ds.checksum(Split::Train) {
            return Err(Error::Config(format!("{} checkpoint was trained on a different dataset", m.name())));
        }
        let prefix = format!("{}/", m.name());
        let layers: Vec<LayerWeights> = ck.layers.iter().filter(|l| l.name.starts_with(&prefix)).cloned().collect();
        reused.extend(params.copy_matching_layers(&layers)?);
    }
    let best = extractors
        .iter()
        .fold(None::<&Checkpoint>, |b, c| match b {
            Some(b) if b.state.best_val_top1 >= c.state.best_val_top1 => Some(b),
            _ => Some(c),
        });
    if let Some(ck) = best {
        copy_head(&mut params, spec, ck)?;
    }
    Ok((params, reused))
}

/// Starts the fusion head as the given single-modality head, with zero
/// weight on the other latents.
fn copy_head(params: &mut Parameters, spec: &ModelSpec, ck: &Checkpoint) -> Result<()> {
    let m = ck.spec.modalities()[0];
    let (slot, _) = spec.extractor(m).expect("extractor checked by caller");
    if ck.spec.fusion_layers.iter().map(|l| l.width).ne(spec.fusion_layers.iter().map(|l| l.width)) {
        return Err(Error::Config("fusion head widths differ from the single-modality head".into()));
    }
    let src = ck.params()?;
    let d = spec.latent_dim;
    let head = |ls: &[crate::neural::DenseLayout]| ls.iter().filter(|l| l.name.starts_with("fusion/")).cloned().collect::<Vec<_>>();
    for (dst, from) in head(&params.layout).iter().zip(&head(&src.layout)) {
        let from_w = &src.values[from.weights.clone()];
        let w = &mut params.values[dst.weights.clone()];
        if dst.fan_in == from.fan_in {
            w.copy_from_slice(from_w);
        } else {
            w.fill(0.0);
            w[slot * d * dst.fan_out..(slot + 1) * d * dst.fan_out].copy_from_slice(from_w);
        }
        params.values[dst.biases.clone()].copy_from_slice(&src.values[from.biases.clone()]);
    }
    Ok(())
}

pub fn cmd_train(ds: &Dataset, cfg: &RunConfig, mode: TrainMode, resume: Option<&Checkpoint>) -> Result<TrainResult> {
    cmd_train_from(ds, cfg, mode, resume, &[])
}

/// Like [`cmd_train`]; a fusion model starts from the extractors of the
/// given single-modality checkpoints.
pub fn cmd_train_from(
    ds: &Dataset,
    cfg: &RunConfig,
    mode: TrainMode,
    resume: Option<&Checkpoint>,
    extractors: &[Checkpoint],
) -> Result<TrainResult> {
    if !extractors.is_empty() && mode != TrainMode::Fusion {
        return Err(Error::Config("extractor checkpoints only apply to fusion training".into()));
    }
    check_compatible(&ds.manifest, cfg)?;
    let mods = mode.modalities(cfg);
    let spec = cfg.model_spec(&mods)?;
    let tcfg = cfg.train_config();
    let data = TrainData {
        train: examples(cfg, &split_refs(ds, Split::Train), &mods)?,
        validation: examples(cfg, &split_refs(ds, Split::Val), &mods)?,
    };
    let mut trainer = match resume {
        Some(ck) => {
            if ck.spec != spec || ck.mode != mode || ck.train_checksum != ds.checksum(Split::Train) {
                return Err(Error::Config("checkpoint was trained on a different model or dataset".into()));
            }
            Trainer::resume(&spec, &tcfg, ck.state.clone())?
        }
        None if extractors.is_empty() => Trainer::new(&spec, &tcfg)?,
        None => {
            let (params, reused) = fusion_warm_start(ds, &spec, tcfg.rng_seed, extractors)?;
            let frozen = if cfg.model.freeze_extractors { reused } else { Vec::new() };
            let mut t = Trainer::warm_start(&spec, &tcfg, params, &frozen)?;
            t.score_start(&data)?;
            t
        }
    };
    let start = trainer.state().epochs_done;
    while !trainer.finished() {
        trainer.epoch(&data)?;
    }
    let state = trainer.state().clone();
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        profile: cfg.profile,
        mode,
        seed: cfg.seed,
        layers: trainer.best_params().to_layers(),
        spec,
        train_config: tcfg,
        train_checksum: ds.checksum(Split::Train).to_string(),
        state,
    };
    Ok(TrainResult { epochs_run: checkpoint.state.epochs_done - start, checkpoint })
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn train_log_csv(state: &TrainState) -> Result<String> {
    csv_text(
        &["epoch", "train_loss", "val_top1"],
        state.log.iter().map(|l| vec![l.epoch.to_string(), l.train_loss.to_string(), l.val_top1.to_string()]),
    )
}

/// Scores every sample of `split` with a checkpoint, in file order.
pub fn score_split(ds: &Dataset, cfg: &RunConfig, ck: &Checkpoint, split: Split) -> Result<Vec<EvalRecord>> {
    let params = ck.params()?;
    let mods = ck.spec.modalities();
    split_refs(ds, split)
        .par_iter()
        .map(|s| {
            let score = predict(&params, &ck.spec, &model_inputs(cfg, s, &mods)?)?;
            Ok(EvalRecord { score, true_index: s.label, power_row: s.power.clone() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mode: String,
    pub k: usize,
    pub acc_at_k: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kl: f64,
    pub label_kl: f64,
    pub throughput_ratio: f64,
    pub throughput_skipped: usize,
}

pub fn evaluation_rows(mode: &str, records: &[EvalRecord], k_list: &[usize]) -> Result<Vec<EvalRow>> {
    let prf = metrics::weighted_prf(records)?;
    let kl = metrics::mean_kl(records)?;
    let label_kl = metrics::label_distribution_kl(records)?;
    k_list
        .iter()
        .map(|&k| {
            let tr = metrics::throughput_ratio(records, k)?;
            Ok(EvalRow {
                mode: mode.to_string(),
                k,
                acc_at_k: metrics::acc_at_k(records, k)?,
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
                kl,
                label_kl,
                throughput_ratio: tr.ratio,
                throughput_skipped: tr.skipped,
            })
        })
        .collect()
}

pub fn evaluation_csv(rows: &[EvalRow]) -> Result<String> {
    csv_text(
        &["mode", "k", "acc_at_k", "precision", "recall", "f1", "kl", "label_kl", "throughput_ratio", "throughput_skipped"],
        rows.iter().map(|r| {
            vec![
                r.mode.clone(),
                r.k.to_string(),
                r.acc_at_k.to_string(),
                r.precision.to_string(),
                r.recall.to_string(),
                r.f1.to_string(),
                r.kl.to_string(),
                r.label_kl.to_string(),
                r.throughput_ratio.to_string(),
                r.throughput_skipped.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDump {
    pub mode: String,
    pub id: u64,
    pub record: EvalRecord,
}

/// Vehicle/edge split inference compared with the monolithic forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributedCheck {
    pub mode: String,
    pub samples: usize,
    pub max_abs_diff: f64,
    /// After the latents went through the wire format.
    pub max_abs_diff_wire: f64,
    pub argmax_agree: bool,
}

impl DistributedCheck {
    pub fn passed(&self) -> bool {
        self.max_abs_diff <= 1e-12 && self.max_abs_diff_wire <= 1e-9 && self.argmax_agree
    }
}

pub fn distributed_check(ds: &Dataset, cfg: &RunConfig, ck: &Checkpoint, split: Split) -> Result<Option<DistributedCheck>> {
    let mods = ck.spec.modalities();
    if !(mods.contains(&Modality::Gps) && mods.contains(&Modality::Lidar)) {
        return Ok(None);
    }
    let params = ck.params()?;
    let spec = &ck.spec;
    let diffs = split_refs(ds, split)
        .par_iter()
        .map(|s| {
            let central = predict(&params, spec, &model_inputs(cfg, s, &mods)?)?;
            let z = vehicle_side_features(
                &params,
                spec,
                &modality_input(cfg, s, Modality::Gps)?,
                &modality_input(cfg, s, Modality::Lidar)?,
            )?;
            let image = if mods.contains(&Modality::Image) { Some(modality_input(cfg, s, Modality::Image)?) } else { None };
            let split_path = mec_side_predict(&params, spec, &z, image.as_ref())?;
            let wire = mec_side_predict(&params, spec, &decode_features(&encode_features(&z)?)?, image.as_ref())?;
            let diff = |a: &ScoreVector| central.s.iter().zip(&a.s).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            Ok((diff(&split_path), diff(&wire), central.argmax() == split_path.argmax()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(DistributedCheck {
        mode: ck.mode.name().to_string(),
        samples: diffs.len(),
        max_abs_diff: diffs.iter().map(|d| d.0).fold(0.0, f64::max),
        max_abs_diff_wire: diffs.iter().map(|d| d.1).fold(0.0, f64::max),
        argmax_agree: diffs.iter().all(|d| d.2),
    }))
}

pub fn distributed_csv(checks: &[DistributedCheck]) -> Result<String> {
    csv_text(
        &["mode", "samples", "max_abs_diff", "max_abs_diff_wire", "argmax_agree", "passed"],
        checks.iter().map(|c| {
            vec![
                c.mode.clone(),
                c.samples.to_string(),
                c.max_abs_diff.to_string(),
                c.max_abs_diff_wire.to_string(),
                c.argmax_agree.to_string(),
                c.passed().to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub dump: Vec<EvalDump>,
    pub distributed: Vec<DistributedCheck>,
}

pub fn cmd_evaluate(ds: &Dataset, cfg: &RunConfig, checkpoints: &[Checkpoint], k_list: &[usize]) -> Result<EvalReport> {
    check_compatible(&ds.manifest, cfg)?;
    let b = cfg.class_count();
    if let Some(k) = k_list.iter().find(|k| **k == 0 || **k > b) {
        return Err(Error::Config(format!("K = {k} outside 1..={b}")));
    }
    let ids: Vec<u64> = ds.split(Split::Test).map(|s| s.id).collect();
    let mut report = EvalReport { rows: Vec::new(), dump: Vec::new(), distributed: Vec::new() };
    for ck in checkpoints {
        if ck.profile != cfg.profile || ck.spec.class_count != b {
            return Err(Error::Config(format!("{} checkpoint does not match the profile", ck.mode.name())));
        }
        let records = score_split(ds, cfg, ck, Split::Test)?;
        report.rows.extend(evaluation_rows(ck.mode.name(), &records, k_list)?);
        if let Some(c) = distributed_check(ds, cfg, ck, Split::Test)? {
            report.distributed.push(c);
        }
        report.dump.extend(ids.iter().zip(records).map(|(id, record)| EvalDump {
            mode: ck.mode.name().to_string(),
            id: *id,
            record,
        }));
    }
    Ok(report)
}

/// Tables together with the checksum of the split they were built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablesDocument {
    pub train_checksum: String,
    pub tables: EmpiricalTables,
}

pub fn build_training_tables(ds: &Dataset, cfg: &RunConfig, ck: &Checkpoint) -> Result<TablesDocument> {
    let records = score_split(ds, cfg, ck, Split::Train)?;
    let scores: Vec<ScoreVector> = records.iter().map(|r| r.score.clone()).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.true_index).collect();
    Ok(TablesDocument { train_checksum: ds.checksum(Split::Train).to_string(), tables: build_tables(&scores, &labels)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectRow {
    pub alpha: f64,
    pub mean_k: f64,
    pub acc_at_selected_k: f64,
    pub throughput_ratio: f64,
    pub mean_t_df: f64,
    pub samples: usize,
    pub infeasible: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectDump {
    pub alpha: f64,
    pub id: u64,
    /// `None` when no K meets the contact time.
    pub k: Option<usize>,
    pub included: bool,
    pub t_df: Option<f64>,
    pub throughput_ratio: Option<f64>,
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct SelectReport {
    pub tables: TablesDocument,
    pub rows: Vec<SelectRow>,
    pub dump: Vec<SelectDump>,
}

pub fn cmd_select_k(
    ds: &Dataset,
    cfg: &RunConfig,
    ck: &Checkpoint,
    tables: Option<TablesDocument>,
    alpha_list: &[f64],
    t_total_ms: f64,
) -> Result<SelectReport> {
    check_compatible(&ds.manifest, cfg)?;
    let tables = match tables {
        Some(t) if t.train_checksum != ds.checksum(Split::Train) => {
            return Err(Error::Data("tables were not built from this dataset's train split".into()))
        }
        Some(t) => t,
        None => build_training_tables(ds, cfg, ck)?,
    };
    let test = score_split(ds, cfg, ck, Split::Test)?;
    let ids: Vec<u64> = ds.split(Split::Test).map(|s| s.id).collect();
    let mut rows = Vec::new();
    let mut dump = Vec::new();
    for &alpha in alpha_list {
        let kcfg = KSelectionConfig {
            alpha,
            t_total_ms,
            pipeline: cfg.selection.pipeline.clone(),
            nr: cfg.selection.nr.clone(),
        };
        kcfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        let per = test
            .par_iter()
            .map(|r| match select_k(&tables.tables, &r.score, &kcfg) {
                Ok(sel) => {
                    let subset_ratio = metrics::record_throughput_ratio(r, sel.k)?;
                    Ok((Some(sel.k), sel.subset.contains(r.true_index), subset_ratio, sel.inclusion.fallback))
                }
                Err(Error::ContactTimeTooShort { .. }) => Ok((None, false, None, false)),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>>>()?;
        let feasible: Vec<_> = per.iter().filter(|p| p.0.is_some()).collect();
        let n = feasible.len().max(1) as f64;
        let ratios: Vec<f64> = feasible.iter().filter_map(|p| p.2).collect();
        let t_dfs: Vec<f64> = feasible.iter().map(|p| t_df(p.0.unwrap(), &kcfg.pipeline, &kcfg.nr)).collect();
        rows.push(SelectRow {
            alpha,
            mean_k: feasible.iter().map(|p| p.0.unwrap() as f64).sum::<f64>() / n,
            acc_at_selected_k: feasible.iter().filter(|p| p.1).count() as f64 / n,
            throughput_ratio: ratios.iter().sum::<f64>() / ratios.len().max(1) as f64,
            mean_t_df: t_dfs.iter().sum::<f64>() / n,
            samples: per.len(),
            infeasible: per.len() - feasible.len(),
            fallbacks: per.iter().filter(|p| p.3).count(),
        });
        dump.extend(ids.iter().zip(&per).map(|(id, p)| SelectDump {
            alpha,
            id: *id,
            k: p.0,
            included: p.1,
            t_df: p.0.map(|k| t_df(k, &kcfg.pipeline, &kcfg.nr)),
            throughput_ratio: p.2,
            fallback: p.3,
        }));
    }
    Ok(SelectReport { tables, rows, dump })
}

pub fn select_csv(rows: &[SelectRow]) -> Result<String> {
    csv_text(
        &["alpha", "mean_k", "acc_at_selected_k", "throughput_ratio", "mean_t_df_ms", "samples", "infeasible", "fallbacks"],
        rows.iter().map(|r| {
            vec![
                r.alpha.to_string(),
                r.mean_k.to_string(),
                r.acc_at_selected_k.to_string(),
                r.throughput_ratio.to_string(),
                r.mean_t_df.to_string(),
                r.samples.to_string(),
                r.infeasible.to_string(),
                r.fallbacks.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub k: usize,
    pub t_sweep: f64,
    pub t_df: f64,
    pub t_nr: f64,
    pub reduction: f64,
}

pub fn cmd_latency(cfg: &RunConfig, ks: impl IntoIterator<Item = usize>) -> Result<Vec<LatencyRow>> {
    let b = cfg.class_count();
    let nt = &cfg.selection.nr;
    let pt = &cfg.selection.pipeline;
    let full = t_nr(b, nt);
    ks.into_iter()
        .map(|k| {
            if k == 0 || k > b {
                return Err(Error::Config(format!("K = {k} outside 1..={b}")));
            }
            let df = t_df(k, pt, nt);
            Ok(LatencyRow { k, t_sweep: t_sweep(k, nt), t_df: df, t_nr: full, reduction: 1.0 - df / full })
        })
        .collect()
}

pub fn latency_csv(rows: &[LatencyRow]) -> Result<String> {
    csv_text(
        &["k", "t_sweep_ms", "t_df_ms", "t_nr_ms", "reduction"],
        rows.iter().map(|r| {
            vec![r.k.to_string(), r.t_sweep.to_string(), r.t_df.to_string(), r.t_nr.to_string(), r.reduction.to_string()]
        }),
    )
}

/// Bytes shipped per sample for each payload kind under this run's shapes.
pub fn payload_csv(cfg: &RunConfig, mean_lidar_points: Option<usize>) -> Result<String> {
    let profile = PayloadProfile {
        class_count: cfg.class_count(),
        grid_shape: cfg.voxel.shape()?,
        bytes_per_cell: 8,
        bytes_per_element: 8,
        raw_lidar_points: mean_lidar_points,
    };
    let mut rows = Vec::new();
    for (name, kind) in [
        ("raw_lidar", PayloadKind::RawLidar),
        ("voxel_grid", PayloadKind::VoxelGrid),
        ("fused_features", PayloadKind::FusedFeatures),
        ("selected_beams", PayloadKind::SelectedBeams),
    ] {
        if kind == PayloadKind::RawLidar && mean_lidar_points.is_none() {
            continue;
        }
        rows.push(vec![name.to_string(), payload_bytes(kind, &profile)?.to_string()]);
    }
    csv_text(&["payload", "bytes"], rows)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_config_echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(())
}

pub fn write_eval_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("evaluate.csv"), evaluation_csv(&report.rows)?)?;
    fs::write(dir.join("distributed.csv"), distributed_csv(&report.distributed)?)?;
    write_jsonl(&dir.join("eval_samples.jsonl"), &report.dump)
}

pub fn write_select_report(report: &SelectReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("select_k.csv"), select_csv(&report.rows)?)?;
    fs::write(dir.join("tables.json"), serde_json::to_vec(&report.tables)?)?;
    write_jsonl(&dir.join("select_k_samples.jsonl"), &report.dump)
}

pub fn read_eval_dump(path: &Path) -> Result<Vec<EvalDump>> {
    let text = fs::read_to_string(path)?;
    text.lines().map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

/// Everything produced by [`cmd_report`].
#[derive(Debug, Clone)]
pub struct FullReport {
    pub manifest: DatasetManifest,
    pub checkpoints: Vec<Checkpoint>,
    pub evaluation: EvalReport,
    pub selection: SelectReport,
    pub latency: Vec<LatencyRow>,
}

/// Report files compared across runs for reproducibility.
pub const REPORT_FILES: [&str; 6] =
    ["evaluate.csv", "distributed.csv", "select_k.csv", "latency.csv", "payload.csv", "training.csv"];

/// generate → train (each single-modality model, then fusion) → evaluate → select-k
/// → latency, all under `out`.
pub fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<FullReport> {
    cfg.validate()?;
    write_config_echo(cfg, out)?;
    let data_dir = out.join("dataset");
    let ds = dataset::generate(cfg, cfg.dataset.samples)?;
    dataset::write(&ds, &data_dir)?;

    let mut modes: Vec<TrainMode> = cfg.modalities.iter().map(|m| TrainMode::unimodal(*m)).collect();
    modes.push(TrainMode::Fusion);
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut log_rows = Vec::new();
    for mode in modes {
        let extractors = if mode == TrainMode::Fusion && cfg.model.staged_fusion { &checkpoints[..] } else { &[] };
        let ck = cmd_train_from(&ds, cfg, mode, None, extractors)?.checkpoint;
        ck.save(&out.join("checkpoints").join(format!("{}.json", mode.name())))?;
        for l in &ck.state.log {
            log_rows.push(vec![
                mode.name().to_string(),
                l.epoch.to_string(),
                l.train_loss.to_string(),
                l.val_top1.to_string(),
            ]);
        }
        checkpoints.push(ck);
    }
    fs::write(out.join("training.csv"), csv_text(&["mode", "epoch", "train_loss", "val_top1"], log_rows)?)?;
    checkpoints.rotate_right(1);

    let evaluation = cmd_evaluate(&ds, cfg, &checkpoints, &cfg.selection.k_list)?;
    write_eval_report(&evaluation, out)?;
    let selection =
        cmd_select_k(&ds, cfg, &checkpoints[0], None, &cfg.selection.alpha_list, cfg.selection.t_total_ms)?;
    write_select_report(&selection, out)?;
    let latency = cmd_latency(cfg, 1..=cfg.class_count())?;
    fs::write(out.join("latency.csv"), latency_csv(&latency)?)?;
    let mean_points = ds.samples.iter().map(|s| s.lidar_points).sum::<usize>() / ds.samples.len();
    fs::write(out.join("payload.csv"), payload_csv(cfg, Some(mean_points))?)?;

    Ok(FullReport { manifest: ds.manifest, checkpoints, evaluation, selection, latency })
}
