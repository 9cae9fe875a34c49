use std::path::{Path, PathBuf};

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_trajectory, warp_and_simulate, Frame, MotionPattern, MovingShapesConfig, Scene, SimConfig};
use crate::error::{Error, Result};
use crate::event::{encode_events, EventStream};
use crate::rng::{derive_seed, seeded};

pub const SIMULATOR_VERSION: &str = concat!("evpretrain-sim/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    ProbeTrain,
    ProbeTest,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    MovingShapes { split: Split },
    Image { path: PathBuf, pattern: MotionPattern, split: Split },
}

impl SampleSource {
    fn split(&self) -> Split {
        match self {
            SampleSource::MovingShapes { split } | SampleSource::Image { split, .. } => *split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PackConfig {
    pub seed: u64,
    pub num_pretrain: usize,
    pub num_probe_train: usize,
    pub num_probe_test: usize,
    /// Optional folder of PNGs moved along synthetic trajectories (pretrain split).
    pub image_dir: String,
    pub image_pattern: MotionPattern,
    pub image_amplitude: f64,
    pub image_poses: usize,
    pub sim: SimConfig,
    pub shapes: MovingShapesConfig,
}

impl Default for PackConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_pretrain: 256,
            num_probe_train: 96,
            num_probe_test: 64,
            image_dir: String::new(),
            image_pattern: MotionPattern::RandomAffine,
            image_amplitude: 4.0,
            image_poses: 8,
            sim: SimConfig::default(),
            shapes: MovingShapesConfig::default(),
        }
    }
}

impl PackConfig {
    /// Sample list implied by the counts and the optional image folder.
    pub fn sources(&self) -> Result<Vec<SampleSource>> {
        let mut out = Vec::new();
        for (split, n) in [
            (Split::Pretrain, self.num_pretrain),
            (Split::ProbeTrain, self.num_probe_train),
            (Split::ProbeTest, self.num_probe_test),
        ] {
            out.extend((0..n).map(|_| SampleSource::MovingShapes { split }));
        }
        if !self.image_dir.is_empty() {
            let dir = Path::new(&self.image_dir);
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            paths.sort();
            out.extend(paths.into_iter().map(|path| SampleSource::Image {
                path,
                pattern: self.image_pattern,
                split: Split::Pretrain,
            }));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub events: String,
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    pub num_events: u64,
    pub source: String,
    pub split: Split,
    pub labels: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: String,
    pub samples: Vec<SampleRecord>,
    pub seed: u64,
    pub simulator_version: String,
    #[serde(skip)]
    dir: PathBuf,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.samples.is_empty() {
            return Err(Error::invalid(format!("{} lists no samples", path.display())));
        }
        Ok(m)
    }

    /// Pretty JSON with keys in sorted order.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }

    /// Absolute location of a path stored relative to the manifest.
    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.dir.join(relative)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &SampleRecord)> {
        self.samples
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.split == split)
    }
}

/// Reads a label PNG written by [`pack_dataset`]; pixel values are class ids.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path.as_ref())?.to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

fn resize_frame(frame: &Frame, width: usize, height: usize) -> Frame {
    if frame.width == width && frame.height == height {
        return frame.clone();
    }
    let sx = frame.width as f64 / width as f64;
    let sy = frame.height as f64 / height as f64;
    Frame::from_fn(width, height, |x, y| {
        let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (frame.width - 1) as f64);
        let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (frame.height - 1) as f64);
        crate::geometry::sample_bilinear(&frame.data, frame.width, frame.height, u, v)
    })
}

struct Simulated {
    stream: EventStream,
    labels: Option<Vec<u8>>,
    source: String,
    duration_us: u64,
}

fn simulate_source(source: &SampleSource, seed: u64, config: &PackConfig) -> Result<Simulated> {
    let mut sim = config.sim.clone();
    sim.seed = derive_seed(seed, 1);
    match source {
        SampleSource::MovingShapes { .. } => {
            let scene = Scene::random(&config.shapes, &mut seeded(seed))?;
            let (stream, labels) = scene.simulate(&config.shapes, &sim)?;
            Ok(Simulated {
                stream,
                labels: Some(labels),
                source: "moving-shapes".into(),
                duration_us: config.shapes.duration_us,
            })
        }
        SampleSource::Image { path, pattern, .. } => {
            let frame = resize_frame(
                &Frame::load_png(path)?,
                config.shapes.width,
                config.shapes.height,
            );
            let traj = generate_trajectory(
                *pattern,
                config.shapes.duration_us,
                config.image_amplitude,
                config.image_poses,
                seed,
            )?;
            let stream = warp_and_simulate(&frame, &traj, &sim)?;
            Ok(Simulated {
                stream,
                labels: None,
                source: format!("image:{}:{pattern}", path.display()),
                duration_us: config.shapes.duration_us,
            })
        }
    }
}

/// Simulates every source and writes events, label maps and `manifest.json`.
///
/// Output is byte-identical for equal seeds regardless of thread count.
pub fn pack_dataset(
    sources: &[SampleSource],
    out_dir: impl AsRef<Path>,
    config: &PackConfig,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if sources.is_empty() {
        return Err(Error::invalid("no sources to pack"));
    }
    config.sim.validate()?;
    for sub in ["events", "labels"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let simulated: Vec<Result<Simulated>> = sources
        .par_iter()
        .enumerate()
        .map(|(i, src)| simulate_source(src, derive_seed(config.seed, i as u64), config))
        .collect();

    let mut samples = Vec::with_capacity(sources.len());
    for (i, (src, sim)) in sources.iter().zip(simulated).enumerate() {
        let sim = sim?;
        let events_rel = format!("events/{i:05}.evs");
        let events_path = out_dir.join(&events_rel);
        std::fs::write(&events_path, encode_events(&sim.stream))
            .map_err(|e| Error::io(&events_path, e))?;
        let labels = match &sim.labels {
            Some(map) => {
                let rel = format!("labels/{i:05}.png");
                let img = GrayImage::from_raw(
                    sim.stream.width() as u32,
                    sim.stream.height() as u32,
                    map.clone(),
                )
                .ok_or_else(|| Error::invalid("label map size mismatch"))?;
                img.save_with_format(out_dir.join(&rel), image::ImageFormat::Png)?;
                Some(rel)
            }
            None => None,
        };
        samples.push(SampleRecord {
            events: events_rel,
            width: sim.stream.width(),
            height: sim.stream.height(),
            duration_us: sim.duration_us,
            num_events: sim.stream.len() as u64,
            source: sim.source,
            split: src.split(),
            labels,
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.display().to_string(),
        samples,
        seed: config.seed,
        simulator_version: SIMULATOR_VERSION.to_string(),
        dir: out_dir.to_path_buf(),
    };
    let path = out_dir.join(DatasetManifest::FILE_NAME);
    std::fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
