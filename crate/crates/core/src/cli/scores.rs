//! Per-sample score files: `{dataset}.{detector}.scores.csv` with columns
//! `id,detector,score,flags`.

use std::path::{Path, PathBuf};

use crate::detectors::ScoreRecord;
use crate::error::{Error, Result};

pub const SUFFIX: &str = ".scores.csv";

pub fn file_name(dataset: &str, detector: &str) -> String {
    format!("{dataset}.{detector}{SUFFIX}")
}

pub fn write_scores(path: &Path, detector: &str, scores: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, csv_io(e)))?;
    let io = |e: csv::Error| Error::io(path, csv_io(e));
    w.write_record(["id", "detector", "score", "flags"]).map_err(io)?;
    for s in scores {
        w.write_record([s.id.as_str(), detector, &s.score.to_string(), &s.flags_label()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(e: csv::Error) -> std::io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => std::io::Error::other(format!("{other:?}")),
    }
}

/// One parsed score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub dataset: String,
    pub detector: String,
    pub scores: Vec<f64>,
}

pub fn read_scores(path: &Path) -> Result<ScoreFile> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(SUFFIX))
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a `*{SUFFIX}` file", path.display())))?;
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, csv_io(e)))?;
    let header = r.headers().map_err(|e| Error::malformed(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "detector", "score", "flags"] {
        return Err(Error::malformed(1, format!("{}: unexpected header", path.display())));
    }
    let mut detector: Option<String> = None;
    let mut scores = Vec::new();
    for (i, row) in r.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::malformed(line, e.to_string()))?;
        let det = &row[1];
        match &detector {
            None => detector = Some(det.to_string()),
            Some(d) if d != det => {
                return Err(Error::malformed(line, format!("mixed detectors `{d}` and `{det}`")));
            }
            _ => {}
        }
        let score: f64 = row[2]
            .parse()
            .map_err(|_| Error::malformed(line, format!("score `{}` is not a number", &row[2])))?;
        if !score.is_finite() {
            return Err(Error::malformed(line, "score is not finite"));
        }
        scores.push(score);
    }
    // Name is `{dataset}.{detector}`; an empty file takes the detector from
    // the last dot.
    let detector = match detector {
        Some(d) => d,
        None => name.rsplit_once('.').map(|(_, d)| d.to_string()).unwrap_or_default(),
    };
    let dataset = name
        .strip_suffix(&format!(".{detector}"))
        .ok_or_else(|| {
            Error::malformed(
                0,
                format!("{}: name does not end in detector `{detector}`", path.display()),
            )
        })?
        .to_string();
    Ok(ScoreFile {
        dataset,
        detector,
        scores,
    })
}

/// All score files in `dir`, sorted by file name.
pub fn list_score_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(SUFFIX)))
        .collect();
    out.sort();
    Ok(out)
}
