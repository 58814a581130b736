use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{default_out, echo, ensure_dir, read_toml, resolve, write_text, write_toml, Overrides};
use super::scores::{file_name, list_score_files, read_scores, write_scores};
use super::{AblateArgs, CalibrateArgs, DetectorFlags, EvalArgs, GenToyArgs, InputFlags, ReportArgs, ScoreArgs};
use crate::detectors::{
    calibrate as fit_calibration, CalibrationStats, D3Config, D3Detector, Detector, DetectorContext, DetectorRegistry,
    DetectorSettings, RemovalTarget,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_table_csv, render_table_markdown, EvalReport};
use crate::rectify::{RectifyConfig, RectifyMode};
use crate::repr::{ClassifierHead, DatasetManifest, DatasetRole, PairedRecord, RecordFormat};
use crate::sweep::{lambda_curve_csv, rows_csv, steps_curve_csv, sweep, SweepGrid, SweepRow};
use crate::toydiff::benchmark::files;
use crate::toydiff::{build_benchmark, SamplerKind, ToyConfig};

fn check<T: FromStr<Err = Error>>(value: &Option<String>) -> Result<()> {
    if let Some(v) = value {
        v.parse::<T>()?;
    }
    Ok(())
}

fn set_split_sizes(flags: &mut Overrides, prefix: &str, n: Option<usize>) {
    if let Some(n) = n {
        for key in ["n_bank", "n_calibration", "n_ind_test", "n_ood_test"] {
            flags.set(&format!("{prefix}.{key}"), n as i64);
        }
    }
}

// gen-toy

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenToyConfig {
    /// Not echoed: the echo is written inside it.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub format: RecordFormat,
    pub toy: ToyConfig,
}

impl Default for GenToyConfig {
    fn default() -> Self {
        Self {
            out: default_out("gen-toy"),
            format: RecordFormat::TextTable,
            toy: ToyConfig::default(),
        }
    }
}

pub fn gen_toy(a: GenToyArgs) -> Result<()> {
    check::<SamplerKind>(&a.sampler)?;
    check::<RecordFormat>(&a.format)?;
    let mut flags = Overrides::default();
    flags.path("out", &a.out);
    flags.opt("toy.seed", a.seed.map(|v| v as i64));
    flags.opt("toy.steps", a.steps.map(|v| v as i64));
    flags.opt("toy.t_start", a.t_start.map(|v| v as i64));
    flags.opt("toy.sampler", a.sampler.clone());
    flags.opt("toy.guidance_scale", a.guidance_scale);
    if a.unconditional {
        flags.set("toy.conditional", false);
    }
    if let Some(f) = &a.format {
        flags.set("format", f.parse::<RecordFormat>()?.to_string());
    }
    set_split_sizes(&mut flags, "toy", a.n);
    let cfg: GenToyConfig = resolve(&GenToyConfig::default(), a.config.as_deref(), flags)?;

    let bench = build_benchmark(&cfg.toy)?;
    ensure_dir(&cfg.out)?;
    bench.write(&cfg.out, cfg.format)?;
    echo(&cfg.out, &cfg)?;
    eprintln!("wrote benchmark to {}", cfg.out.display());
    Ok(())
}

// shared input resolution

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub benchmark: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub ind_calibration: Option<PathBuf>,
    pub feature_bank: Option<PathBuf>,
}

impl Inputs {
    fn flags(flags: &mut Overrides, prefix: &str, f: &InputFlags) {
        flags.path(&format!("{prefix}.benchmark"), &f.benchmark);
        flags.path(&format!("{prefix}.head"), &f.head);
        flags.path(&format!("{prefix}.ind_calibration"), &f.ind_calibration);
        flags.path(&format!("{prefix}.feature_bank"), &f.feature_bank);
    }

    /// Fills unset inputs from the benchmark directory.
    fn complete(&mut self) {
        let Some(dir) = self.benchmark.clone() else { return };
        let fill = |slot: &mut Option<PathBuf>, p: PathBuf| {
            if slot.is_none() && p.exists() {
                *slot = Some(p);
            }
        };
        fill(&mut self.head, dir.join(files::HEAD));
        fill(
            &mut self.ind_calibration,
            dir.join(files::manifest(DatasetRole::IndCalibration)),
        );
        fill(
            &mut self.feature_bank,
            dir.join(files::manifest(DatasetRole::FeatureBank)),
        );
    }

    fn head(&self) -> Result<ClassifierHead> {
        let path = self
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no classifier head given (--head or --benchmark)".into()))?;
        ClassifierHead::load(path)
    }

    fn benchmark_rectify(&self) -> Result<Option<RectifyConfig>> {
        match &self.benchmark {
            Some(dir) if dir.join(files::RECTIFY).exists() => Ok(Some(read_toml(&dir.join(files::RECTIFY))?)),
            _ => Ok(None),
        }
    }

    fn context(&self, settings: DetectorSettings) -> Result<DetectorContext> {
        let calibration = match &self.ind_calibration {
            Some(p) => Some(load_manifest(p, DatasetRole::IndCalibration)?.1),
            None => None,
        };
        let bank = match &self.feature_bank {
            Some(p) => {
                let (dir, m) = manifest_at(p)?;
                expect_role(&m, DatasetRole::FeatureBank, p)?;
                Some(m.load_records(&dir)?.into_records())
            }
            None => None,
        };
        Ok(DetectorContext {
            head: Some(self.head()?),
            calibration,
            bank,
            settings,
        })
    }
}

fn manifest_at(path: &Path) -> Result<(PathBuf, DatasetManifest)> {
    let m = DatasetManifest::load(path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, m))
}

fn expect_role(m: &DatasetManifest, role: DatasetRole, path: &Path) -> Result<()> {
    if m.role != role {
        return Err(Error::MissingRole(format!(
            "{role} (manifest {} has role {})",
            path.display(),
            m.role
        )));
    }
    Ok(())
}

fn load_manifest(path: &Path, role: DatasetRole) -> Result<(DatasetManifest, Vec<PairedRecord>)> {
    let (dir, m) = manifest_at(path)?;
    expect_role(&m, role, path)?;
    let pairs = m.load_pairs(&dir)?;
    Ok((m, pairs))
}

/// Pairs for a dataset to score. Unpaired sets reuse the input as the
/// generation, which only the disparity detectors reject.
fn load_scoring_set(path: &Path) -> Result<(DatasetManifest, Vec<PairedRecord>, bool)> {
    let (dir, m) = manifest_at(path)?;
    if m.generation_path.is_some() {
        let pairs = m.load_pairs(&dir)?;
        return Ok((m, pairs, true));
    }
    let pairs = m
        .load_records(&dir)?
        .into_records()
        .into_iter()
        .map(|r| PairedRecord::new(r.clone(), r))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, pairs, false))
}

fn detector_flags(flags: &mut Overrides, prefix: &str, f: &DetectorFlags) -> Result<()> {
    check::<RectifyMode>(&f.rectify)?;
    check::<RemovalTarget>(&f.removal_target)?;
    let d3 = format!("{prefix}.d3");
    flags.opt(&format!("{d3}.lambda"), f.lambda);
    flags.opt(&format!("{d3}.rectify.mode"), f.rectify.clone());
    flags.opt(&format!("{d3}.rectify.c"), f.c);
    flags.opt(&format!("{d3}.rectify.alpha"), f.alpha);
    flags.opt(&format!("{d3}.rectify.beta"), f.beta);
    flags.opt(&format!("{d3}.removal_target"), f.removal_target.clone());
    flags.opt(&format!("{d3}.prob_metric"), f.prob_metric.clone());
    flags.opt(&format!("{d3}.feat_metric"), f.feat_metric.clone());
    flags.opt(&format!("{prefix}.d3plus_lambda"), f.d3plus_lambda);
    flags.opt(&format!("{prefix}.odin_temperature"), f.odin_temperature);
    flags.opt(&format!("{prefix}.gradnorm_temperature"), f.gradnorm_temperature);
    flags.opt(
        &format!("{prefix}.gradnorm_orientation"),
        f.gradnorm_orientation.clone(),
    );
    flags.opt(&format!("{prefix}.knn_k"), f.knn_k.map(|v| v as i64));
    flags.opt(
        &format!("{prefix}.vim_residual_dim"),
        f.vim_residual_dim.map(|v| v as i64),
    );
    Ok(())
}

/// Resolves twice when a benchmark directory supplies its own clip levels,
/// so they sit between built-in defaults and the config file.
fn resolve_with_benchmark<T, F>(
    defaults: T,
    file: Option<&Path>,
    make_flags: F,
    inputs: fn(&mut T) -> &mut Inputs,
    settings: fn(&mut T) -> &mut DetectorSettings,
) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
    F: Fn() -> Result<Overrides>,
{
    let mut first: T = resolve(&defaults, file, make_flags()?)?;
    let Some(rectify) = inputs(&mut first).benchmark_rectify()? else {
        inputs(&mut first).complete();
        return Ok(first);
    };
    let mut defaults = defaults;
    settings(&mut defaults).d3.rectify = rectify;
    let mut cfg: T = resolve(&defaults, file, make_flags()?)?;
    inputs(&mut cfg).complete();
    Ok(cfg)
}

fn d3_detector_name(name: &str) -> Option<&'static str> {
    match name {
        "d3" => Some("d3"),
        "d3plus" => Some("d3plus"),
        _ => None,
    }
}

/// The configuration `d3plus` actually runs with.
fn effective_d3(name: &str, settings: &DetectorSettings) -> D3Config {
    let mut cfg = settings.d3;
    if name == "d3plus" {
        cfg.lambda = settings.d3plus_lambda;
        cfg.rectify.mode = RectifyMode::Vra;
    }
    cfg
}

// calibrate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub detector: String,
    pub inputs: Inputs,
    pub settings: DetectorSettings,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            out: default_out("calibrate"),
            detector: "d3".into(),
            inputs: Inputs::default(),
            settings: DetectorSettings::default(),
        }
    }
}

/// Output of `calibrate`, consumed by `score --calibration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub detector: String,
    pub d3: D3Config,
    pub stats: CalibrationStats,
}

pub const CALIBRATION_FILE: &str = "calibration.toml";

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let cfg = resolve_with_benchmark(
        CalibrateConfig::default(),
        a.config.as_deref(),
        || {
            let mut flags = Overrides::default();
            flags.path("out", &a.out);
            flags.opt("detector", a.detector.clone());
            Inputs::flags(&mut flags, "inputs", &a.inputs);
            detector_flags(&mut flags, "settings", &a.detector_flags)?;
            Ok(flags)
        },
        |c| &mut c.inputs,
        |c| &mut c.settings,
    )?;
    if d3_detector_name(&cfg.detector).is_none() {
        return Err(Error::InvalidArgument(format!(
            "calibrate supports `d3` and `d3plus`, not `{}`",
            cfg.detector
        )));
    }
    let path = cfg
        .inputs
        .ind_calibration
        .as_ref()
        .ok_or_else(|| Error::MissingRole(DatasetRole::IndCalibration.to_string()))?;
    let (_, pairs) = load_manifest(path, DatasetRole::IndCalibration)?;
    let head = cfg.inputs.head()?;
    let d3 = effective_d3(&cfg.detector, &cfg.settings);
    let stats = fit_calibration(&pairs, &head, &d3)?;
    ensure_dir(&cfg.out)?;
    write_toml(
        &cfg.out.join(CALIBRATION_FILE),
        &CalibrationFile {
            detector: cfg.detector.clone(),
            d3,
            stats,
        },
    )?;
    echo(&cfg.out, &cfg)
}

// score

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub detectors: Vec<String>,
    pub datasets: Vec<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub inputs: Inputs,
    pub settings: DetectorSettings,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            out: default_out("score"),
            detectors: vec!["d3".into()],
            datasets: Vec::new(),
            calibration: None,
            inputs: Inputs::default(),
            settings: DetectorSettings::default(),
        }
    }
}

pub fn score(a: ScoreArgs) -> Result<()> {
    let mut cfg = resolve_with_benchmark(
        ScoreConfig::default(),
        a.config.as_deref(),
        || {
            let mut flags = Overrides::default();
            flags.path("out", &a.out);
            flags.list("detectors", &a.detectors);
            let datasets: Vec<String> = a.datasets.iter().map(|p| p.display().to_string()).collect();
            flags.list("datasets", &datasets);
            flags.path("calibration", &a.calibration);
            Inputs::flags(&mut flags, "inputs", &a.inputs);
            detector_flags(&mut flags, "settings", &a.detector_flags)?;
            Ok(flags)
        },
        |c| &mut c.inputs,
        |c| &mut c.settings,
    )?;
    if cfg.datasets.is_empty() {
        if let Some(dir) = &cfg.inputs.benchmark {
            cfg.datasets = [DatasetRole::IndTest, DatasetRole::OodTest]
                .into_iter()
                .map(|r| dir.join(files::manifest(r)))
                .collect();
        }
    }
    if cfg.datasets.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to score (--dataset or --benchmark)".into(),
        ));
    }
    if cfg.detectors.is_empty() {
        return Err(Error::InvalidArgument("no detectors selected".into()));
    }

    let registry = DetectorRegistry::builtin();
    let calibration: Option<CalibrationFile> = cfg.calibration.as_deref().map(read_toml).transpose()?;
    let mut ctx = cfg.inputs.context(cfg.settings.clone())?;
    let mut detectors: Vec<Box<dyn Detector>> = Vec::new();
    for name in &cfg.detectors {
        let reuse = calibration.as_ref().filter(|c| &c.detector == name);
        let det: Box<dyn Detector> = match (reuse, d3_detector_name(name)) {
            (Some(c), Some(static_name)) => {
                Box::new(D3Detector::from_stats(static_name, ctx.head()?.clone(), c.d3, c.stats))
            }
            _ => {
                if ctx.calibration.is_none() && d3_detector_name(name).is_some() && calibration.is_some() {
                    return Err(Error::InvalidArgument(format!("calibration file is not for `{name}`")));
                }
                registry.build(name, &ctx)?
            }
        };
        detectors.push(det);
    }
    ctx.calibration = None;

    ensure_dir(&cfg.out)?;
    for path in &cfg.datasets {
        let (manifest, pairs, paired) = load_scoring_set(path)?;
        for det in &detectors {
            if !paired && d3_detector_name(det.name()).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "`{}` needs generations but dataset `{}` has none",
                    det.name(),
                    manifest.name
                )));
            }
            let scores = det.score_all(&pairs)?;
            write_scores(
                &cfg.out.join(file_name(&manifest.name, det.name())),
                det.name(),
                &scores,
            )?;
        }
    }
    echo(&cfg.out, &cfg)
}

// eval

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub scores: PathBuf,
    pub ind_dataset: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            out: default_out("eval"),
            scores: default_out("score"),
            ind_dataset: DatasetRole::IndTest.to_string(),
        }
    }
}

pub const REPORTS_FILE: &str = "reports.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportsFile {
    pub reports: Vec<EvalReport>,
}

/// Reports for every (detector, OoD dataset) in `dir`, detectors in name
/// order.
pub fn evaluate_dir(dir: &Path, ind_dataset: &str) -> Result<Vec<EvalReport>> {
    let mut by_dataset: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for path in list_score_files(dir)? {
        let f = read_scores(&path)?;
        by_dataset.entry(f.dataset).or_default().insert(f.detector, f.scores);
    }
    let ind = by_dataset
        .remove(ind_dataset)
        .ok_or_else(|| Error::MissingRole(format!("{ind_dataset} (no score files in {})", dir.display())))?;
    if by_dataset.is_empty() {
        return Err(Error::MissingRole(format!(
            "{} (no score files in {})",
            DatasetRole::OodTest,
            dir.display()
        )));
    }
    let mut reports = Vec::new();
    for (detector, ind_scores) in &ind {
        for (dataset, dets) in &by_dataset {
            let ood = dets
                .get(detector)
                .ok_or_else(|| Error::DetectorMismatch(format!("`{dataset}` has no scores for `{detector}`")))?;
            reports.push(evaluate(detector, dataset, ind_scores, ood)?);
        }
    }
    for (dataset, dets) in &by_dataset {
        if let Some(extra) = dets.keys().find(|d| !ind.contains_key(*d)) {
            return Err(Error::DetectorMismatch(format!(
                "`{dataset}` has scores for `{extra}` but `{ind_dataset}` does not"
            )));
        }
    }
    Ok(reports)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut flags = Overrides::default();
    flags.path("out", &a.out);
    flags.path("scores", &a.scores);
    flags.opt("ind_dataset", a.ind_dataset.clone());
    let cfg: EvalConfig = resolve(&EvalConfig::default(), a.config.as_deref(), flags)?;
    let reports = evaluate_dir(&cfg.scores, &cfg.ind_dataset)?;
    ensure_dir(&cfg.out)?;
    write_text(&cfg.out.join("eval.csv"), &render_table_csv(&reports))?;
    write_text(&cfg.out.join("eval.md"), &render_table_markdown(&reports))?;
    write_toml(&cfg.out.join(REPORTS_FILE), &ReportsFile { reports })?;
    echo(&cfg.out, &cfg)
}

// ablate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub grid: SweepGrid,
    pub toy: ToyConfig,
    pub d3: D3Config,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            out: default_out("ablate"),
            grid: SweepGrid::default(),
            toy: ToyConfig::default(),
            d3: D3Config::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_FILE: &str = "sweep.toml";

pub fn ablate(a: AblateArgs) -> Result<()> {
    for r in &a.rectify {
        r.parse::<RectifyMode>()?;
    }
    for r in &a.removal_target {
        r.parse::<RemovalTarget>()?;
    }
    let mut flags = Overrides::default();
    flags.path("out", &a.out);
    flags.opt("toy.seed", a.seed.map(|v| v as i64));
    set_split_sizes(&mut flags, "toy", a.n);
    flags.list("grid.lambda", &a.lambda);
    flags.list("grid.steps", &a.steps.iter().map(|&v| v as i64).collect::<Vec<_>>());
    flags.list("grid.rectify", &a.rectify);
    flags.list("grid.removal_target", &a.removal_target);
    flags.list("grid.conditional", &a.conditional);
    let cfg: AblateConfig = resolve(&AblateConfig::default(), a.config.as_deref(), flags)?;

    let rows = sweep(&cfg.grid, &cfg.toy, &cfg.d3)?;
    ensure_dir(&cfg.out)?;
    write_text(&cfg.out.join("sweep.csv"), &rows_csv(&rows))?;
    write_text(&cfg.out.join("plot_lambda.csv"), &lambda_curve_csv(&rows))?;
    write_text(&cfg.out.join("plot_steps.csv"), &steps_curve_csv(&rows))?;
    write_toml(&cfg.out.join(SWEEP_FILE), &SweepFile { rows })?;
    echo(&cfg.out, &cfg)
}

// report

pub fn report(a: ReportArgs) -> Result<()> {
    let markdown = match a.format.as_str() {
        "markdown" | "md" => true,
        "csv" => false,
        other => {
            return Err(Error::Unknown {
                kind: "report format",
                name: other.into(),
                available: "markdown, csv".into(),
            })
        }
    };
    let reports_path = a.from.join(REPORTS_FILE);
    let sweep_path = a.from.join(SWEEP_FILE);
    let text = if reports_path.exists() {
        let f: ReportsFile = read_toml(&reports_path)?;
        if markdown {
            render_table_markdown(&f.reports)
        } else {
            render_table_csv(&f.reports)
        }
    } else if sweep_path.exists() {
        let f: SweepFile = read_toml(&sweep_path)?;
        let csv = rows_csv(&f.rows);
        if markdown {
            csv_to_markdown(&csv)
        } else {
            csv
        }
    } else {
        return Err(Error::InvalidArgument(format!(
            "{} holds neither {REPORTS_FILE} nor {SWEEP_FILE}",
            a.from.display()
        )));
    };
    print!("{text}");
    Ok(())
}

fn csv_to_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
        if i == 0 {
            out.push_str(&format!("|{}\n", "---|".repeat(cells.len())));
        }
    }
    out
}
