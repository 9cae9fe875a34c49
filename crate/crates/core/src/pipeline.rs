//! End-to-end runs composed from the library pieces: pretraining from a
//! manifest, probing, and the with/without context-loss ablation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::probe::{run_probe, ProbeReport};
use crate::sim::{DatasetManifest, Split};
use crate::train::{load_backbone, load_event_images, train_loop, TrainSummary, Trainer};

/// Writes the resolved configuration and version into `dir`.
pub fn write_run_header(dir: &Path, command: &str, config: &Config) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = format!(
        "# evpretrain {} {command}\n{}",
        env!("CARGO_PKG_VERSION"),
        config.to_toml()?
    );
    let path = dir.join("run_header.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn manifest_path(config: &Config) -> Result<PathBuf> {
    let m = if config.probe.manifest.is_empty() {
        &config.train.manifest
    } else {
        &config.probe.manifest
    };
    if m.is_empty() {
        return Err(Error::Config("no dataset manifest configured (train.manifest)".into()));
    }
    Ok(PathBuf::from(m))
}

/// Trains from scratch (or resumes) and writes metrics and checkpoints to `out`.
pub fn pretrain(
    config: &Config,
    out: &Path,
    resume: Option<&Path>,
    on_step: impl FnMut(&crate::train::LossReport),
) -> Result<(Trainer<f32>, TrainSummary)> {
    if config.train.manifest.is_empty() {
        return Err(Error::Config("train.manifest is required for pretraining".into()));
    }
    let manifest = DatasetManifest::load(&config.train.manifest)?;
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(&Container::load(path)?)?,
        None => Trainer::new(config.train.clone())?,
    };
    let data = load_event_images(&manifest, Split::Pretrain, &trainer.config.model)?;
    if data.is_empty() {
        return Err(Error::invalid("manifest has no pretrain samples"));
    }
    let summary = train_loop(&mut trainer, &data, out, on_step)?;
    Ok((trainer, summary))
}

/// Probes the teacher backbone of `checkpoint`, or a fresh random
/// initialization when `checkpoint` is `None`.
pub fn probe(config: &Config, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<ProbeReport> {
    let manifest = DatasetManifest::load(manifest_path(config)?)?;
    let (arch, params, id) = match checkpoint {
        Some(path) => {
            let (arch, params) = load_backbone::<f32>(&Container::load(path)?, "teacher")?;
            (arch, params, path.display().to_string())
        }
        None => {
            let (arch, params) = Architecture::init::<f32>(&config.train.model, config.probe.seed)?;
            (arch, params, format!("random-init:{}", config.probe.seed))
        }
    };
    let report = run_probe(&arch, &params, &manifest, &config.probe, &id, out)?;
    if let Some(dir) = out {
        let path = dir.join("probe_report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub lambda_context: f64,
    pub initial_total: f64,
    pub final_total: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// `mIoU(with) − mIoU(without)`, in mIoU points (×100).
    pub difference_points: f64,
    pub sign: String,
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | lambda_context | initial L_total | final L_total | probe mIoU |\n");
        s.push_str("|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.2} |\n",
                r.variant,
                r.lambda_context,
                r.initial_total,
                r.final_total,
                100.0 * r.miou
            ));
        }
        s.push_str(&format!(
            "\nmIoU difference (with - without): {:+.2} points ({})\n",
            self.difference_points, self.sign
        ));
        s
    }
}

fn mean_total(reports: &[crate::train::LossReport]) -> f64 {
    reports.iter().map(|r| r.l_total).sum::<f64>() / reports.len().max(1) as f64
}

/// Pretrains and probes twice, with the configured context weight and with
/// the context loss disabled, and writes a comparison table to `out`.
pub fn ablation(config: &Config, out: &Path) -> Result<AblationReport> {
    let with_weight = if config.train.lambda_context > 0.0 { config.train.lambda_context } else { 0.1 };
    let mut rows = Vec::new();
    for (variant, weight) in [("with L_context", with_weight), ("without L_context", 0.0)] {
        let mut cfg = config.clone();
        cfg.train.lambda_context = weight;
        let dir = out.join(if weight > 0.0 { "with_context" } else { "without_context" });
        write_run_header(&dir, "ablate", &cfg)?;
        let (_, summary) = pretrain(&cfg, &dir, None, |_| {})?;
        let report = probe(&cfg, Some(&summary.final_checkpoint), Some(&dir))?;
        let n = summary.reports.len();
        let window = n.clamp(1, 10);
        rows.push(AblationRow {
            variant: variant.into(),
            lambda_context: weight,
            initial_total: mean_total(&summary.reports[..window.min(n)]),
            final_total: mean_total(&summary.reports[n.saturating_sub(window)..]),
            miou: report.miou,
        });
    }
    let diff = 100.0 * (rows[0].miou - rows[1].miou);
    let sign = if diff > 0.0 {
        "positive"
    } else if diff < 0.0 {
        "negative"
    } else {
        "zero"
    };
    let report = AblationReport {
        rows,
        difference_points: diff,
        sign: sign.into(),
    };
    let md = out.join("ablation.md");
    std::fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    let js = out.join("ablation.json");
    std::fs::write(&js, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&js, e))?;
    Ok(report)
}
