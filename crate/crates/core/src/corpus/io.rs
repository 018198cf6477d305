//! JSONL corpus files (one study per line) plus a JSON split manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{CorpusError, CorpusSplit, GeneratorConfig, ImageGrid, PatientRecord, SplitName, StudyRecord, ViewTag};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    /// Split name → file path relative to the manifest.
    pub splits: BTreeMap<String, String>,
    pub generator_config: GeneratorConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageLine {
    view: ViewTag,
    pixels_b64: String,
    side: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyLine {
    patient_id: String,
    study_index: usize,
    timestamp: i64,
    images: Vec<ImageLine>,
    findings: String,
    impression: String,
    labels: Vec<u8>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// Writes `train.jsonl`, `validation.jsonl`, `test.jsonl` and `manifest.json` into `dir`.
pub fn write_corpus(corpus: &CorpusSplit, dir: &Path) -> Result<PathBuf, CorpusError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut splits = BTreeMap::new();
    for name in SplitName::ALL {
        let file = format!("{}.jsonl", name.as_str());
        let path = dir.join(&file);
        let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        for patient in corpus.split(name) {
            for study in &patient.studies {
                let line = serde_json::to_string(&to_line(study)).expect("study serializes");
                writeln!(out, "{line}").map_err(io_err(&path))?;
            }
        }
        out.flush().map_err(io_err(&path))?;
        splits.insert(name.as_str().to_string(), file);
    }
    let manifest = CorpusManifest { version: FORMAT_VERSION, splits, generator_config: corpus.config.clone() };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Reads a corpus from a directory holding `manifest.json` (or from the manifest path itself).
pub fn read_corpus(path: &Path) -> Result<CorpusSplit, CorpusError> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| CorpusError::Record {
        path: manifest_path.clone(),
        line: e.line(),
        field: "manifest".into(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = CorpusSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        config: manifest.generator_config.clone(),
    };
    for name in SplitName::ALL {
        let Some(file) = manifest.splits.get(name.as_str()) else {
            return Err(CorpusError::Record {
                path: manifest_path.clone(),
                line: 0,
                field: format!("splits.{}", name.as_str()),
                message: "missing split".into(),
            });
        };
        let patients = read_split(&base.join(file), manifest.generator_config.num_conditions)?;
        match name {
            SplitName::Train => out.train = patients,
            SplitName::Validation => out.validation = patients,
            SplitName::Test => out.test = patients,
        }
    }
    Ok(out)
}

fn to_line(study: &StudyRecord) -> StudyLine {
    StudyLine {
        patient_id: study.patient_id.clone(),
        study_index: study.study_index,
        timestamp: study.timestamp,
        images: study
            .images
            .iter()
            .map(|im| ImageLine { view: im.view(), pixels_b64: STANDARD.encode(im.pixels()), side: im.side() })
            .collect(),
        findings: study.findings.clone(),
        impression: study.impression.clone(),
        labels: study.labels.iter().map(|&l| l as u8).collect(),
    }
}

fn read_split(path: &Path, num_conditions: usize) -> Result<Vec<PatientRecord>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut patients: Vec<PatientRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |field: &str, message: String| CorpusError::Record {
            path: path.to_path_buf(),
            line: line_no,
            field: field.to_string(),
            message,
        };
        let rec: StudyLine = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("record")
                .to_string();
            bad(&field, msg)
        })?;
        let study = from_line(rec, num_conditions).map_err(|(field, message)| bad(field, message))?;

        match patients.last_mut() {
            Some(p) if p.patient_id == study.patient_id => {
                let prev = p.studies.last().expect("non-empty patient");
                if study.study_index != prev.study_index + 1 {
                    return Err(bad("study_index", format!("expected {}, got {}", prev.study_index + 1, study.study_index)));
                }
                if study.timestamp <= prev.timestamp {
                    return Err(bad("timestamp", "timestamps must strictly increase within a patient".into()));
                }
                p.studies.push(study);
            }
            _ => {
                if patients.iter().any(|p| p.patient_id == study.patient_id) {
                    return Err(bad("patient_id", "studies of a patient must be contiguous".into()));
                }
                if study.study_index != 1 {
                    return Err(bad("study_index", format!("first study must have index 1, got {}", study.study_index)));
                }
                patients.push(PatientRecord { patient_id: study.patient_id.clone(), studies: vec![study] });
            }
        }
    }
    Ok(patients)
}

fn from_line(rec: StudyLine, num_conditions: usize) -> Result<StudyRecord, (&'static str, String)> {
    if !(1..=super::MAX_IMAGES_PER_STUDY).contains(&rec.images.len()) {
        return Err(("images", format!("a study must carry 1..=5 images, found {}", rec.images.len())));
    }
    if rec.findings.trim().is_empty() {
        return Err(("findings", "empty section".into()));
    }
    if rec.impression.trim().is_empty() {
        return Err(("impression", "empty section".into()));
    }
    if rec.labels.len() != num_conditions {
        return Err(("labels", format!("expected {num_conditions} labels, found {}", rec.labels.len())));
    }
    if rec.labels.iter().any(|&l| l > 1) {
        return Err(("labels", "labels must be 0 or 1".into()));
    }
    let images = rec
        .images
        .into_iter()
        .map(|im| {
            let pixels = STANDARD.decode(&im.pixels_b64).map_err(|e| ("images.pixels_b64", e.to_string()))?;
            if pixels.len() != im.side * im.side {
                return Err(("images.side", format!("{} pixels do not form a {}×{} grid", pixels.len(), im.side, im.side)));
            }
            Ok(ImageGrid::new(im.side, im.view, pixels))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StudyRecord {
        patient_id: rec.patient_id,
        study_index: rec.study_index,
        timestamp: rec.timestamp,
        images,
        findings: rec.findings,
        impression: rec.impression,
        labels: rec.labels.into_iter().map(|l| l == 1).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, SplitSizes};

    fn corpus() -> CorpusSplit {
        generate_corpus(&GeneratorConfig {
            patients: SplitSizes { train: 6, validation: 2, test: 2 },
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus();
        write_corpus(&c, dir.path()).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), c);
    }

    #[test]
    fn truncated_file_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&corpus(), dir.path()).unwrap();
        let train = dir.path().join("train.jsonl");
        let text = std::fs::read_to_string(&train).unwrap();
        let cut = text.lines().next().unwrap().len() + 1 + 40;
        std::fs::write(&train, &text[..cut]).unwrap();
        let err = read_corpus(dir.path()).unwrap_err();
        assert!(matches!(err, CorpusError::Record { line: 2, .. }), "{err}");
    }

    #[test]
    fn six_images_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = corpus();
        let extra = c.train[0].studies[0].images[0].clone();
        c.train[0].studies[0].images = vec![extra; 6];
        write_corpus(&c, dir.path()).unwrap();
        let err = read_corpus(dir.path()).unwrap_err();
        match err {
            CorpusError::Record { line, field, .. } => {
                assert_eq!(line, 1);
                assert_eq!(field, "images");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(CorpusError::Io { .. })));
    }
}
