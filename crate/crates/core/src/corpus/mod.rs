//! Synthetic longitudinal study corpus.
//!
//! Patients have one or more studies over time; every study carries one to
//! five grayscale images, a findings section, an impression section and the
//! latent condition states the texts were rendered from.

mod generate;
mod io;
pub mod templates;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use generate::{generate_corpus, GeneratorConfig, SplitSizes};
pub use io::{read_corpus, write_corpus, CorpusManifest};
pub use templates::NUM_CONDITIONS;

/// Largest number of images a retained study may carry.
pub const MAX_IMAGES_PER_STUDY: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: field `{field}`: {message}")]
    Record { path: PathBuf, line: usize, field: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Frontal,
    Lateral,
}

/// Square 8-bit grayscale image; intensity `v / 255` lies in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageGrid {
    side: usize,
    view: ViewTag,
    pixels: Vec<u8>,
}

impl ImageGrid {
    pub fn new(side: usize, view: ViewTag, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), side * side, "pixel count must equal side²");
        Self { side, view, pixels }
    }

    /// Quantizes intensities, clamping to `[0, 1]`.
    pub fn from_intensities(side: usize, view: ViewTag, values: &[f64]) -> Self {
        assert_eq!(values.len(), side * side, "pixel count must equal side²");
        let pixels = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self { side, view, pixels }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn view(&self) -> ViewTag {
        self.view
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn intensity(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col] as f64 / 255.0
    }

    pub fn intensities(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRecord {
    pub patient_id: String,
    /// 1-based position within the patient's ordered studies.
    pub study_index: usize,
    pub timestamp: i64,
    pub images: Vec<ImageGrid>,
    pub findings: String,
    pub impression: String,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub studies: Vec<StudyRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<PatientRecord>,
    pub validation: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
    pub config: GeneratorConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Counts of one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub patients: usize,
    pub studies: usize,
    /// Studies that have a previous study.
    pub with_previous: usize,
    pub images: usize,
    /// Share of (consecutive study pair, condition) cells whose label is unchanged.
    pub label_persistence: f64,
    pub positive_rate: f64,
}

impl CorpusSplit {
    pub fn split(&self, name: SplitName) -> &[PatientRecord] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn num_studies(&self, name: SplitName) -> usize {
        self.split(name).iter().map(|p| p.studies.len()).sum()
    }

    /// SHA-256 over every study's identity, texts, labels and pixels, split by split.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for name in SplitName::ALL {
            h.update(name.as_str().as_bytes());
            for study in self.split(name).iter().flat_map(|p| &p.studies) {
                for field in [study.patient_id.as_str(), study.findings.as_str(), study.impression.as_str()] {
                    h.update((field.len() as u64).to_le_bytes());
                    h.update(field.as_bytes());
                }
                h.update((study.study_index as u64).to_le_bytes());
                h.update(study.timestamp.to_le_bytes());
                h.update(study.labels.iter().map(|&l| l as u8).collect::<Vec<_>>());
                for im in &study.images {
                    h.update([im.view() as u8]);
                    h.update((im.side() as u64).to_le_bytes());
                    h.update(im.pixels());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn stats(&self, name: SplitName) -> SplitStats {
        let patients = self.split(name);
        let (mut kept, mut pairs, mut positives, mut labels) = (0usize, 0usize, 0usize, 0usize);
        for p in patients {
            for w in p.studies.windows(2) {
                pairs += w[0].labels.len();
                kept += w[0].labels.iter().zip(&w[1].labels).filter(|(a, b)| a == b).count();
            }
            for s in &p.studies {
                labels += s.labels.len();
                positives += s.labels.iter().filter(|&&l| l).count();
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        SplitStats {
            patients: patients.len(),
            studies: self.num_studies(name),
            with_previous: patients.iter().map(|p| p.studies.len().saturating_sub(1)).sum(),
            images: patients.iter().flat_map(|p| &p.studies).map(|s| s.images.len()).sum(),
            label_persistence: ratio(kept, pairs),
            positive_rate: ratio(positives, labels),
        }
    }

    pub fn find_study(&self, patient_id: &str, study_index: usize) -> Option<(SplitName, &StudyRecord)> {
        SplitName::ALL.into_iter().find_map(|name| {
            self.split(name)
                .iter()
                .find(|p| p.patient_id == patient_id)
                .and_then(|p| p.studies.get(study_index.checked_sub(1)?))
                .map(|s| (name, s))
        })
    }
}

/// Collapses all whitespace runs (including newlines and tabs) to single
/// spaces and trims both ends.
pub fn format_report(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops studies missing a section or carrying more than five images, then
/// truncates each patient at the first duplicated timestamp (the tied
/// studies and everything after them). Patients left empty are removed and
/// surviving studies are re-indexed from 1.
pub fn apply_exclusions(patients: Vec<PatientRecord>) -> Vec<PatientRecord> {
    patients
        .into_iter()
        .filter_map(|mut patient| {
            patient.studies.sort_by_key(|s| s.timestamp);
            let cut = patient
                .studies
                .windows(2)
                .position(|w| w[0].timestamp == w[1].timestamp)
                .unwrap_or(patient.studies.len());
            patient.studies.truncate(cut);
            patient.studies.retain(|s| {
                !s.findings.trim().is_empty()
                    && !s.impression.trim().is_empty()
                    && (1..=MAX_IMAGES_PER_STUDY).contains(&s.images.len())
            });
            for (i, s) in patient.studies.iter_mut().enumerate() {
                s.study_index = i + 1;
            }
            (!patient.studies.is_empty()).then_some(patient)
        })
        .collect()
}
