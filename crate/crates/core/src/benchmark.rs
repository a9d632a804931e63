//! Benchmark runner: registers every pair of a manifest, optionally under
//! several pixel-noise levels, and assembles a reproducible report.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{summarize, MetricSummary};
use crate::features::Frame;
use crate::geometry::io::read_cloud;
use crate::geometry::RigidTransform;
use crate::model::Model;
use crate::pipeline::{recompute_metrics, register, PairInput, Providers, RegistrationResult, Timing};
use crate::synthetic::{synthetic_pair, SceneParams};

/// Environment variable with the number of benchmark workers.
pub const WORKERS_ENV: &str = "DINOREG_WORKERS";

/// Recorded in every report.
pub const RMSE_CORRESPONDENCES: &str =
    "ground-truth point pairs: each target point mapped by the gt transform and paired with its nearest source point within gt_correspondence_radius";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
}

/// Clouds, cameras and DRFM files of one pair; relative paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilePairSpec {
    pub source_cloud: PathBuf,
    pub target_cloud: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_vfeat: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_vfeat: Option<PathBuf>,
    pub camera_a: PathBuf,
    pub camera_b: PathBuf,
    /// Maps target coordinates into the source frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<RigidTransform>,
}

/// One line of a pairs manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairSpec {
    Synthetic { synthetic: SyntheticSpec },
    Files(Box<FilePairSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairsManifest {
    pub base_dir: PathBuf,
    pub pairs: Vec<PairSpec>,
}

impl PairsManifest {
    /// JSON lines, one [`PairSpec`] per non-blank line.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let spec = serde_json::from_str(line).map_err(|e| Error::Malformed {
                format: "pairs manifest",
                reason: format!("line {}: {e}", n + 1),
            })?;
            pairs.push(spec);
        }
        Ok(Self {
            base_dir: base_dir.into(),
            pairs,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::parse(&text, path.parent().unwrap_or(Path::new(".")))?;
        if m.pairs.is_empty() {
            return Err(Error::EmptyManifest(path.into()));
        }
        Ok(m)
    }

    pub fn synthetic(seeds: impl IntoIterator<Item = u64>) -> Self {
        Self {
            base_dir: PathBuf::from("."),
            pairs: seeds
                .into_iter()
                .map(|seed| PairSpec::Synthetic {
                    synthetic: SyntheticSpec { seed },
                })
                .collect(),
        }
    }

    /// Load the inputs of pair `index`.
    pub fn resolve(&self, index: usize) -> Result<PairInput> {
        match &self.pairs[index] {
            PairSpec::Synthetic { synthetic } => {
                let p = synthetic_pair(synthetic.seed, &SceneParams::default())?;
                Ok(PairInput {
                    source: p.source,
                    target: p.target,
                    gt: Some(p.gt),
                })
            }
            PairSpec::Files(f) => {
                let at = |p: &Path| self.base_dir.join(p);
                let frame = |cloud: &Path, camera: &Path, vfeat: &Option<PathBuf>| -> Result<Frame> {
                    Ok(Frame {
                        cloud: read_cloud(at(cloud))?,
                        camera: CameraModel::load(at(camera))?,
                        visual_path: vfeat.as_deref().map(at),
                        world_pose: None,
                    })
                };
                Ok(PairInput {
                    source: frame(&f.source_cloud, &f.camera_a, &f.source_vfeat)?,
                    target: frame(&f.target_cloud, &f.camera_b, &f.target_vfeat)?,
                    gt: f.gt,
                })
            }
        }
    }
}

/// Outcome of one pair in one section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub index: usize,
    pub pair: PairSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<RegistrationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    pub noise_sigma: f64,
    /// Over pairs with a ground-truth transform.
    pub summary: MetricSummary,
    pub pairs: Vec<PairOutcome>,
}

impl ReportSection {
    pub fn failed(&self) -> usize {
        self.pairs.iter().filter(|p| p.result.is_none()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub weights_hash: String,
    pub rmse_correspondences: String,
    pub config: PipelineConfig,
    pub sections: Vec<ReportSection>,
}

/// Wall-clock seconds, kept apart from the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSection {
    pub noise_sigma: f64,
    pub per_pair: Vec<Option<Timing>>,
    pub mean_total: f64,
    pub wall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub workers: usize,
    pub sections: Vec<TimingSection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    /// `None` runs a single section at the configured noise level.
    pub sigmas: Option<Vec<f64>>,
    pub workers: usize,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            sigmas: None,
            workers: 1,
        }
    }
}

/// Worker count from [`WORKERS_ENV`], or the available parallelism.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Noise seed of pair `index`; the target side is derived from it inside `register`.
pub fn pair_noise_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Summary over the pairs of `outcomes` that have ground truth.
pub fn summarize_outcomes(manifest: &PairsManifest, outcomes: &[PairOutcome], cfg: &PipelineConfig) -> MetricSummary {
    let with_gt: Vec<Option<_>> = outcomes
        .iter()
        .filter(|o| has_gt(&manifest.pairs[o.index]) || o.result.as_ref().is_some_and(|r| r.metrics.is_some()))
        .map(|o| o.result.as_ref().and_then(|r| r.metrics.as_ref()))
        .collect();
    summarize(&with_gt, &cfg.metrics)
}

fn has_gt(spec: &PairSpec) -> bool {
    match spec {
        PairSpec::Synthetic { .. } => true,
        PairSpec::Files(f) => f.gt.is_some(),
    }
}

pub fn run_benchmark(
    manifest: &PairsManifest,
    cfg: &PipelineConfig,
    model: &Model,
    providers: &Providers,
    weights_hash: &str,
    opts: &BenchmarkOptions,
) -> Result<(MetricReport, TimingReport)> {
    if manifest.pairs.is_empty() {
        return Err(Error::EmptyManifest(manifest.base_dir.clone()));
    }
    let sigmas = opts.sigmas.clone().unwrap_or_else(|| vec![cfg.noise_sigma]);
    if sigmas.is_empty() {
        return Err(Error::Config("empty sigma sweep".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let mut sections = Vec::with_capacity(sigmas.len());
    let mut timings = Vec::with_capacity(sigmas.len());
    for &sigma in &sigmas {
        let mut c = cfg.clone();
        c.noise_sigma = sigma;
        c.validate()?;
        let start = std::time::Instant::now();
        let runs: Vec<(PairOutcome, Option<Timing>)> = pool.install(|| {
            (0..manifest.pairs.len())
                .into_par_iter()
                .map(|i| {
                    let res = manifest
                        .resolve(i)
                        .and_then(|pair| register(&pair, &c, model, providers, pair_noise_seed(c.seed, i)));
                    let pair = manifest.pairs[i].clone();
                    match res {
                        Ok(r) => {
                            let t = r.timing.clone();
                            (PairOutcome { index: i, pair, error: None, result: Some(r) }, Some(t))
                        }
                        Err(e) => {
                            log::warn!("pair {i} failed: {e}");
                            (PairOutcome { index: i, pair, error: Some(e.to_string()), result: None }, None)
                        }
                    }
                })
                .collect()
        });
        let wall = start.elapsed().as_secs_f64();
        let (outcomes, per_pair): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
        let done: Vec<f64> = per_pair.iter().flatten().map(|t: &Timing| t.total).collect();
        let mean_total = if done.is_empty() { 0.0 } else { done.iter().sum::<f64>() / done.len() as f64 };
        sections.push(ReportSection {
            noise_sigma: sigma,
            summary: summarize_outcomes(manifest, &outcomes, &c),
            pairs: outcomes,
        });
        timings.push(TimingSection {
            noise_sigma: sigma,
            per_pair,
            mean_total,
            wall,
        });
    }
    let report = MetricReport {
        config_hash: cfg.hash(),
        weights_hash: weights_hash.into(),
        rmse_correspondences: RMSE_CORRESPONDENCES.into(),
        config: cfg.clone(),
        sections,
    };
    Ok((
        report,
        TimingReport {
            workers: opts.workers.max(1),
            sections: timings,
        },
    ))
}

/// Per-pair metrics recomputed from the stored correspondences, summarized
/// per section.
pub fn recompute_summaries(manifest: &PairsManifest, report: &MetricReport) -> Result<Vec<MetricSummary>> {
    report
        .sections
        .iter()
        .map(|s| {
            let mut recomputed = s.pairs.clone();
            for o in &mut recomputed {
                if let Some(r) = o.result.as_mut() {
                    let pair = manifest.resolve(o.index)?;
                    r.metrics = recompute_metrics(&pair, r, &report.config)?;
                }
            }
            Ok(summarize_outcomes(manifest, &recomputed, &report.config))
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRow {
    noise_sigma: f64,
    pairs: usize,
    failed: usize,
    pir: f64,
    ir: f64,
    fmr: f64,
    rr: f64,
    rre_deg: f64,
    rte_m: f64,
    pose_recall: f64,
}

impl MetricReport {
    /// Largest failed fraction over the sections.
    pub fn worst_failure_fraction(&self) -> f64 {
        self.sections
            .iter()
            .map(|s| s.failed() as f64 / s.pairs.len().max(1) as f64)
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One summary row per section.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.sections {
            let m = &s.summary;
            w.serialize(CsvRow {
                noise_sigma: s.noise_sigma,
                pairs: m.pairs,
                failed: m.failed,
                pir: m.pir,
                ir: m.ir,
                fmr: m.fmr,
                rr: m.rr,
                rre_deg: m.rre_deg,
                rte_m: m.rte_m,
                pose_recall: m.pose_recall,
            })
            .expect("row serializes");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }
}
