//! `evpretrain` command line: simulate, pretrain, probe, render, inspect, ablate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or numeric error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::PatchGrid;
use crate::checkpoint::{Container, CHECKPOINT_MAGIC};
use crate::config::{split_override, Config};
use crate::context::{kmeans, l2_normalize_rows, render_context_labels};
use crate::error::{Error, Result};
use crate::event::{read_events, render_grid_rgb, render_rgb, to_event_image, voxelize, write_png_rgb, EVENT_MAGIC};
use crate::pipeline;
use crate::probe::extract_features;
use crate::rng::{derive_seed, seeded};
use crate::sim::{pack_dataset, DatasetManifest, Split};
use crate::train::load_backbone;

#[derive(Debug, Parser)]
#[command(name = "evpretrain", version, about = "Self-supervised dense pre-training for event cameras")]
pub struct Cli {
    /// Worker threads; 1 gives the deterministic single-threaded mode.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML config with [sim], [train] and [probe] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.lr=0.0005` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed applied to simulation, training and probing.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a moving-shapes (and optional image-folder) dataset.
    Simulate(Common),
    /// Pretrain student/teacher and write checkpoints plus metrics.csv.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest (overrides train.manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe of a checkpoint's teacher backbone.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, required_unless_present = "random_init")]
        checkpoint: Option<PathBuf>,
        /// Probe a randomly initialized backbone instead.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
    },
    /// Render event, voxel and (with a checkpoint) context-label PNGs.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "events")]
        manifest: Option<PathBuf>,
        /// A single event file instead of a manifest.
        #[arg(long, conflicts_with = "manifest")]
        events: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Summarize a manifest, checkpoint or event file.
    Inspect { path: PathBuf },
    /// Pretrain and probe with and without the context loss; print a table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<Config> {
    let overrides = common
        .overrides
        .iter()
        .map(|s| split_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = &common.config {
        if !p.exists() {
            return Err(Error::Config(format!("config file {} not found", p.display())));
        }
    }
    let mut config = Config::load(common.config.as_deref(), &overrides)?;
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    Ok(config)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn set_manifest(config: &mut Config, manifest: &Option<PathBuf>) {
    if let Some(m) = manifest {
        config.train.manifest = m.display().to_string();
        config.probe.manifest = m.display().to_string();
    }
}

/// Parses `argv` (including the program name), runs, and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists (e.g. repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Simulate(common) => {
            let config = resolve(&common)?;
            let out = out_dir(&common, "data");
            pipeline::write_run_header(&out, "simulate", &config)?;
            let m = pack_dataset(&config.sim.sources()?, &out, &config.sim)?;
            println!("wrote {} samples to {}", m.samples.len(), out.join(DatasetManifest::FILE_NAME).display());
        }
        Command::Pretrain {
            common,
            manifest,
            resume,
        } => {
            let mut config = resolve(&common)?;
            set_manifest(&mut config, &manifest);
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(&config.train.output_dir));
            pipeline::write_run_header(&out, "pretrain", &config)?;
            let (_, summary) = pipeline::pretrain(&config, &out, resume.as_deref(), |r| {
                println!(
                    "step {:>5}  total {:.4}  patch {:.4}  context {:.4}  image {:.4}  H_t {:.3}  lr {:.2e}",
                    r.step, r.l_total, r.l_patch, r.l_context, r.l_image, r.teacher_entropy, r.lr
                );
            })?;
            println!("checkpoint: {}", summary.final_checkpoint.display());
        }
        Command::Probe {
            common,
            manifest,
            checkpoint,
            random_init,
        } => {
            let mut config = resolve(&common)?;
            set_manifest(&mut config, &manifest);
            let out = out_dir(&common, "runs/probe");
            pipeline::write_run_header(&out, "probe", &config)?;
            let ckpt = if random_init { None } else { checkpoint.as_deref() };
            let report = pipeline::probe(&config, ckpt, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Render {
            common,
            manifest,
            events,
            checkpoint,
            limit,
        } => {
            let config = resolve(&common)?;
            let out = out_dir(&common, "runs/render");
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let files: Vec<PathBuf> = match (&manifest, &events) {
                (_, Some(e)) => vec![e.clone()],
                (Some(m), None) => {
                    let m = DatasetManifest::load(m)?;
                    m.samples.iter().take(limit).map(|r| m.resolve(&r.events)).collect()
                }
                (None, None) => return Err(Error::Config("render needs --manifest or --events".into())),
            };
            let backbone = match &checkpoint {
                Some(p) => Some(load_backbone::<f32>(&Container::load(p)?, "teacher")?),
                None => None,
            };
            for (i, path) in files.iter().enumerate() {
                let stream = read_events(path)?;
                write_png_rgb(&render_rgb(&stream), out.join(format!("events_{i:05}.png")))?;
                let bins = backbone.as_ref().map_or(config.train.model.channels, |(a, _)| a.config.channels);
                let grid = voxelize(&stream, bins)?;
                write_png_rgb(&render_grid_rgb(&grid), out.join(format!("voxels_{i:05}.png")))?;
                if let Some((arch, params)) = &backbone {
                    let image = to_event_image(&grid);
                    let z = extract_features(arch, params, &image)?;
                    let k = config.train.num_contexts.min(z.rows());
                    let clusters = kmeans(
                        &l2_normalize_rows(&z),
                        k,
                        config.train.kmeans_iters,
                        &mut seeded(derive_seed(config.train.seed, i as u64)),
                    )?;
                    let pg = PatchGrid::new(arch.config.image_height, arch.config.image_width, arch.config.patch)?;
                    render_context_labels(&clusters.assignment, &pg, 1)?
                        .save(out.join(format!("contexts_{i:05}.png")))?;
                }
            }
            println!("rendered {} samples to {}", files.len(), out.display());
        }
        Command::Inspect { path } => inspect(&path)?,
        Command::Ablate { common, manifest } => {
            let mut config = resolve(&common)?;
            set_manifest(&mut config, &manifest);
            let out = out_dir(&common, "runs/ablate");
            pipeline::write_run_header(&out, "ablate", &config)?;
            let report = pipeline::ablation(&config, &out)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let c = Container::decode(&bytes)?;
        let numel: usize = c.tensors.iter().map(|(_, t)| t.shape().iter().product::<usize>()).sum();
        println!("container: {}", path.display());
        for key in ["kind", "step", "version", "checkpoint"] {
            if let Some(v) = c.header.get(key) {
                println!("{key}: {v}");
            }
        }
        println!("tensors: {}", c.tensors.len());
        println!("elements: {numel}");
        for (name, t) in c.tensors.iter().take(12) {
            println!("  {name} {:?} {:?}", t.dtype(), t.shape());
        }
        if c.tensors.len() > 12 {
            println!("  ... {} more", c.tensors.len() - 12);
        }
    } else if bytes.starts_with(EVENT_MAGIC) {
        let s = crate::event::decode_events(&bytes)?;
        println!("events: {}", path.display());
        println!("size: {}x{}", s.width(), s.height());
        println!("count: {}", s.len());
        println!("duration_us: {}", s.duration());
        println!("polarity_sum: {}", s.polarity_sum());
    } else {
        let m = DatasetManifest::load(path)?;
        println!("manifest: {}", path.display());
        println!("samples: {}", m.samples.len());
        for split in [Split::Pretrain, Split::ProbeTrain, Split::ProbeTest] {
            println!("  {split:?}: {}", m.split(split).count());
        }
        println!("seed: {}", m.seed);
        println!("simulator: {}", m.simulator_version);
        println!("events: {}", m.samples.iter().map(|r| r.num_events).sum::<u64>());
    }
    Ok(())
}
