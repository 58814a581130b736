//! End-to-end toy benchmark: InD and OoD mixtures, a trained classifier, and
//! paired (input, reconstruction) representations for every test point.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{train_toy_classifier, ToyClassifier, TrainConfig};
use super::gmm::GmmSpec;
use super::sampler::{reverse_sample, Guidance, SamplerKind};
use super::schedule::{linear_to_alpha_bar, DiffusionSchedule};
use crate::detectors::{DetectorContext, DetectorSettings};
use crate::error::{Error, Result};
use crate::rectify::{percentile_levels, RectifyConfig, RectifyMode};
use crate::repr::{DatasetManifest, DatasetRole, Dims, PairedRecord, RecordFormat, RecordTable, RepresentationRecord};
use crate::rng::{SampleStream, Split};

/// Stream step for drawing a point from its mixture; diffusion steps use
/// `0..=T`.
const DRAW_STEP: u64 = u64::MAX;

pub const OOD_DATASET: &str = "toy-ood";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub classes: usize,
    pub radius: f64,
    /// Tangential offset of the two components of each class.
    pub spread: f64,
    pub variance: f64,
    /// OoD means are the InD template rotated by this angle.
    pub ood_rotation_deg: f64,
    pub ood_variance_scale: f64,
    pub n_train: usize,
    pub n_bank: usize,
    pub n_calibration: usize,
    pub n_ind_test: usize,
    pub n_ood_test: usize,
    pub steps: usize,
    pub beta_start: f64,
    /// `ᾱ_T`; the linear schedule is solved to reach it for any `T`.
    pub alpha_bar_final: f64,
    /// Noise level reconstructions start from; `None` means `T`.
    pub t_start: Option<usize>,
    pub sampler: SamplerKind,
    /// Guide reconstructions toward the class the classifier predicts.
    pub conditional: bool,
    pub guidance_scale: f64,
    pub classifier: TrainConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 3,
            radius: 4.0,
            spread: 0.7,
            variance: 0.3,
            ood_rotation_deg: 60.0,
            ood_variance_scale: 2.0,
            n_train: 600,
            n_bank: 600,
            n_calibration: 500,
            n_ind_test: 1000,
            n_ood_test: 1000,
            steps: 24,
            beta_start: 1e-4,
            alpha_bar_final: 0.02,
            t_start: None,
            sampler: SamplerKind::Ddim,
            conditional: true,
            guidance_scale: 3.0,
            classifier: TrainConfig::default(),
        }
    }
}

impl ToyConfig {
    pub fn ind_spec(&self) -> Result<GmmSpec> {
        GmmSpec::ring(self.classes, self.radius, 0.0, self.spread, self.variance)
    }

    pub fn ood_spec(&self) -> Result<GmmSpec> {
        self.ind_spec()?.rotated(self.ood_rotation_deg, self.ood_variance_scale)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        linear_to_alpha_bar(self.steps, self.beta_start, self.alpha_bar_final)
    }

    pub fn start_step(&self) -> usize {
        self.t_start.unwrap_or(self.steps)
    }
}

/// Raw points, their reconstructions, and the paired representations.
#[derive(Debug, Clone, Default)]
pub struct ToySplit {
    pub points: Vec<Vec<f64>>,
    pub generations: Vec<Vec<f64>>,
    pub pairs: Vec<PairedRecord>,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: ToyConfig,
    pub ind_spec: GmmSpec,
    pub ood_spec: GmmSpec,
    pub schedule: DiffusionSchedule,
    pub classifier: ToyClassifier,
    /// Clip levels from in-distribution training-feature percentiles.
    pub rectify: RectifyConfig,
    pub calibration: ToySplit,
    pub ind_test: ToySplit,
    pub ood_test: ToySplit,
    pub bank: Vec<RepresentationRecord>,
}

fn draw(spec: &GmmSpec, seed: u64, split: Split, index: usize) -> (Vec<f64>, usize) {
    spec.sample(&mut SampleStream::new(seed, split, index as u64).step(DRAW_STEP))
}

/// Reconstructs and embeds `n` points drawn from `draw_spec`.
#[allow(clippy::too_many_arguments)]
pub fn generate_split(
    draw_spec: &GmmSpec,
    model_spec: &GmmSpec,
    classifier: &ToyClassifier,
    schedule: &DiffusionSchedule,
    cfg: &ToyConfig,
    split: Split,
    prefix: &str,
    n: usize,
) -> Result<ToySplit> {
    let sampler = cfg.sampler.build();
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, label) = draw(draw_spec, cfg.seed, split, i);
            let guidance = if cfg.conditional {
                Guidance::Conditional {
                    class: classifier.predict(&x)?,
                    scale: cfg.guidance_scale,
                }
            } else {
                Guidance::None
            };
            let stream = SampleStream::new(cfg.seed, split, i as u64);
            let x_hat = reverse_sample(
                &x,
                model_spec,
                schedule,
                sampler.as_ref(),
                guidance,
                cfg.start_step(),
                &stream,
            )?;
            let id = format!("{prefix}-{i:05}");
            let pair = PairedRecord::new(classifier.embed(&id, &x)?, classifier.embed(&id, &x_hat)?)?;
            let pair = if split == Split::OodTest {
                pair
            } else {
                pair.with_label(label)
            };
            Ok((x, x_hat, pair))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = ToySplit::default();
    for (x, x_hat, pair) in rows {
        out.points.push(x);
        out.generations.push(x_hat);
        out.pairs.push(pair);
    }
    Ok(out)
}

pub fn build_benchmark(cfg: &ToyConfig) -> Result<Benchmark> {
    let ind_spec = cfg.ind_spec()?;
    let ood_spec = cfg.ood_spec()?;
    let schedule = cfg.schedule()?;
    if cfg.start_step() > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "t_start {} exceeds T={}",
            cfg.start_step(),
            cfg.steps
        )));
    }

    let (train_x, train_y): (Vec<Vec<f64>>, Vec<usize>) = (0..cfg.n_train)
        .map(|i| draw(&ind_spec, cfg.seed, Split::Train, i))
        .unzip();
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.classifier.clone()
    };
    let classifier = train_toy_classifier(&train_x, &train_y, cfg.classes, &train_cfg)?;
    let train_features: Vec<Vec<f64>> = train_x.iter().map(|x| classifier.feature_map.features(x)).collect();
    let rectify = percentile_levels(train_features.iter().map(Vec::as_slice), RectifyMode::React)?;

    let split = |spec: &GmmSpec, s: Split, prefix: &str, n: usize| {
        generate_split(spec, &ind_spec, &classifier, &schedule, cfg, s, prefix, n)
    };
    let calibration = split(&ind_spec, Split::Calibration, "cal", cfg.n_calibration)?;
    let ind_test = split(&ind_spec, Split::IndTest, "ind", cfg.n_ind_test)?;
    let ood_test = split(&ood_spec, Split::OodTest, "ood", cfg.n_ood_test)?;
    let bank = (0..cfg.n_bank)
        .map(|i| classifier.embed(&format!("bank-{i:05}"), &draw(&ind_spec, cfg.seed, Split::Bank, i).0))
        .collect::<Result<Vec<_>>>()?;

    Ok(Benchmark {
        config: cfg.clone(),
        ind_spec,
        ood_spec,
        schedule,
        classifier,
        rectify,
        calibration,
        ind_test,
        ood_test,
        bank,
    })
}

/// File names inside a benchmark directory.
pub mod files {
    pub const HEAD: &str = "head.toml";
    pub const CLASSIFIER: &str = "classifier.toml";
    pub const RECTIFY: &str = "rectify.toml";
    pub const TOY_CONFIG: &str = "toy_config.toml";

    pub fn manifest(role: crate::repr::DatasetRole) -> String {
        format!("{role}.manifest.toml")
    }
}

pub(crate) fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Benchmark {
    /// Detector settings with the benchmark's own clip levels.
    pub fn default_settings(&self) -> DetectorSettings {
        let mut settings = DetectorSettings::default();
        settings.d3.rectify = self.rectify;
        settings
    }

    pub fn context(&self, settings: DetectorSettings) -> DetectorContext {
        DetectorContext {
            head: Some(self.classifier.head.clone()),
            calibration: Some(self.calibration.pairs.clone()),
            bank: Some(self.bank.clone()),
            settings,
        }
    }

    /// Writes the four datasets with their manifests, the head, the full
    /// classifier, the clip levels and the config.
    pub fn write(&self, dir: &Path, format: RecordFormat) -> Result<Vec<DatasetManifest>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dims = self.classifier.dims();
        let paired = |name: &str, role: DatasetRole, split: &ToySplit| -> Result<DatasetManifest> {
            let inputs = table(dims, split.pairs.iter().map(|p| p.input.clone()).collect())?;
            let gens = table(dims, split.pairs.iter().map(|p| p.generation.clone()).collect())?;
            DatasetManifest::write_dataset(dir, name, role, format, &inputs, Some(&gens))
        };
        let manifests = vec![
            paired("ind-calibration", DatasetRole::IndCalibration, &self.calibration)?,
            paired("ind-test", DatasetRole::IndTest, &self.ind_test)?,
            paired(OOD_DATASET, DatasetRole::OodTest, &self.ood_test)?,
            DatasetManifest::write_dataset(
                dir,
                "feature-bank",
                DatasetRole::FeatureBank,
                format,
                &table(dims, self.bank.clone())?,
                None,
            )?,
        ];
        for m in &manifests {
            m.save(&dir.join(files::manifest(m.role)))?;
        }
        self.classifier.head.save(&dir.join(files::HEAD))?;
        write_toml(&self.classifier, &dir.join(files::CLASSIFIER))?;
        write_toml(&self.rectify, &dir.join(files::RECTIFY))?;
        write_toml(&self.config, &dir.join(files::TOY_CONFIG))?;
        Ok(manifests)
    }
}

fn table(dims: Dims, records: Vec<RepresentationRecord>) -> Result<RecordTable> {
    RecordTable::with_dims(dims, records)
}
