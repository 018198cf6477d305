use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::templates::{render_findings, render_impression, NUM_CONDITIONS, TEMPLATE_BANK_VERSION};
use super::{
    apply_exclusions, format_report, CorpusError, CorpusSplit, ImageGrid, PatientRecord, SplitName, StudyRecord,
    ViewTag,
};
use crate::seeding::{derive_seed, rng_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.train,
            SplitName::Validation => self.validation,
            SplitName::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Patients generated per split (before exclusions).
    pub patients: SplitSizes,
    pub num_conditions: usize,
    /// Success probability of the truncated geometric study-count law.
    pub study_count_p: f64,
    pub max_studies: usize,
    /// Probability that a condition is positive at a patient's first study.
    pub prevalence: f64,
    /// Probability that a condition keeps its state from one study to the next.
    pub persistence: f64,
    /// Conditions rendered at `weak_contrast` instead of `glyph_contrast`.
    pub weak_conditions: Vec<usize>,
    pub glyph_contrast: f64,
    pub weak_contrast: f64,
    /// Chance that a positive weak-subset condition shows in a study at all.
    pub weak_visibility: f64,
    /// Probability that a positive condition appears in any given image of the
    /// study (at least one image always shows it).
    pub glyph_image_prob: f64,
    /// Relative weights of 1..=5 images per study.
    pub images_per_study: Vec<f64>,
    pub noise: f64,
    pub image_side: usize,
    /// Rates of injected defects that the exclusion rules must remove.
    pub oversize_rate: f64,
    pub missing_section_rate: f64,
    pub duplicate_timestamp_rate: f64,
    pub template_bank: String,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            patients: SplitSizes { train: 1000, validation: 50, test: 100 },
            num_conditions: NUM_CONDITIONS,
            study_count_p: 0.5,
            max_studies: 8,
            prevalence: 0.2,
            persistence: 0.9,
            weak_conditions: vec![2, 7, 10, 13],
            glyph_contrast: 0.6,
            weak_contrast: 0.25,
            weak_visibility: 0.7,
            glyph_image_prob: 0.5,
            images_per_study: vec![0.3, 0.35, 0.2, 0.1, 0.05],
            noise: 0.05,
            image_side: 64,
            oversize_rate: 0.01,
            missing_section_rate: 0.005,
            duplicate_timestamp_rate: 0.003,
            template_bank: TEMPLATE_BANK_VERSION.to_string(),
            seed: 17,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<(), CorpusError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CorpusError::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        unit("persistence", self.persistence)?;
        unit("prevalence", self.prevalence)?;
        unit("glyph_image_prob", self.glyph_image_prob)?;
        unit("glyph_contrast", self.glyph_contrast)?;
        unit("weak_contrast", self.weak_contrast)?;
        unit("weak_visibility", self.weak_visibility)?;
        unit("oversize_rate", self.oversize_rate)?;
        unit("missing_section_rate", self.missing_section_rate)?;
        unit("duplicate_timestamp_rate", self.duplicate_timestamp_rate)?;
        if !(self.study_count_p > 0.0 && self.study_count_p <= 1.0) {
            return Err(CorpusError::InvalidConfig("study_count_p must lie in (0, 1]".into()));
        }
        if self.max_studies == 0 {
            return Err(CorpusError::InvalidConfig("max_studies must be at least 1".into()));
        }
        if self.num_conditions == 0 || self.num_conditions > NUM_CONDITIONS {
            return Err(CorpusError::InvalidConfig(format!("num_conditions must lie in 1..={NUM_CONDITIONS}")));
        }
        if let Some(&c) = self.weak_conditions.iter().find(|&&c| c >= self.num_conditions) {
            return Err(CorpusError::InvalidConfig(format!("weak condition {c} is not a condition index")));
        }
        if self.images_per_study.len() != super::MAX_IMAGES_PER_STUDY
            || self.images_per_study.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.images_per_study.iter().sum::<f64>() <= 0.0
        {
            return Err(CorpusError::InvalidConfig("images_per_study needs 5 non-negative weights".into()));
        }
        if self.image_side < 16 {
            return Err(CorpusError::InvalidConfig("image_side must be at least 16".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(CorpusError::InvalidConfig("noise must be non-negative".into()));
        }
        if self.template_bank != TEMPLATE_BANK_VERSION {
            return Err(CorpusError::InvalidConfig(format!(
                "unknown template bank `{}` (available: {TEMPLATE_BANK_VERSION})",
                self.template_bank
            )));
        }
        Ok(())
    }
}

/// Builds the three splits. Each patient draws from its own seed derived from
/// `(seed, split, index)`, so the output depends only on the config.
pub fn generate_corpus(config: &GeneratorConfig) -> Result<CorpusSplit, CorpusError> {
    config.validate()?;
    let mut splits = SplitName::ALL.map(|split| {
        let raw = (0..config.patients.get(split))
            .map(|i| generate_patient(config, split, i))
            .collect();
        apply_exclusions(raw)
    });
    Ok(CorpusSplit {
        train: std::mem::take(&mut splits[0]),
        validation: std::mem::take(&mut splits[1]),
        test: std::mem::take(&mut splits[2]),
        config: config.clone(),
    })
}

fn split_prefix(split: SplitName) -> &'static str {
    match split {
        SplitName::Train => "tr",
        SplitName::Validation => "va",
        SplitName::Test => "te",
    }
}

fn sample_study_count(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> usize {
    let q = 1.0 - config.study_count_p;
    let weights: Vec<f64> = (0..config.max_studies).map(|k| q.powi(k as i32)).collect();
    WeightedIndex::new(&weights).expect("study-count weights").sample(rng) + 1
}

fn generate_patient(config: &GeneratorConfig, split: SplitName, index: usize) -> PatientRecord {
    let mut rng = rng_from(derive_seed(config.seed, &[split as u64, index as u64]));
    let patient_id = format!("{}{:05}", split_prefix(split), index);
    let k = config.num_conditions;
    let n = sample_study_count(config, &mut rng);
    let image_counts = WeightedIndex::new(&config.images_per_study).expect("validated weights");

    let mut labels: Vec<bool> = (0..k).map(|_| rng.gen_bool(config.prevalence)).collect();
    let mut timestamp: i64 = rng.gen_range(0..1000);
    let mut studies = Vec::with_capacity(n);
    for s in 0..n {
        if s > 0 {
            for l in labels.iter_mut() {
                if !rng.gen_bool(config.persistence) {
                    *l = !*l;
                }
            }
            if !rng.gen_bool(config.duplicate_timestamp_rate) {
                timestamp += rng.gen_range(1..=365);
            }
        }
        let num_images = if rng.gen_bool(config.oversize_rate) {
            super::MAX_IMAGES_PER_STUDY + 1
        } else {
            image_counts.sample(&mut rng) + 1
        };
        let images = render_images(config, &labels, num_images, &mut rng);
        let mut padded = labels.clone();
        padded.resize(NUM_CONDITIONS, false);
        let mut findings = format_report(&render_findings(&padded));
        let mut impression = format_report(&render_impression(&padded));
        if rng.gen_bool(config.missing_section_rate) {
            if rng.gen_bool(0.5) {
                findings.clear();
            } else {
                impression.clear();
            }
        }
        studies.push(StudyRecord {
            patient_id: patient_id.clone(),
            study_index: s + 1,
            timestamp,
            images,
            findings,
            impression,
            labels: labels.clone(),
        });
    }
    PatientRecord { patient_id, studies }
}

/// Centre (row, col) of the glyph for condition `c` on a 4×4 lattice that
/// stays inside any centred or jittered crop of at least `side - 8` pixels.
pub(crate) fn glyph_center(c: usize, side: usize) -> (usize, usize) {
    let cell = c % 16;
    let step = (side - 16) / 4;
    let origin = 8 + step / 2;
    (origin + step * (cell / 4), origin + step * (cell % 4))
}

fn render_images(config: &GeneratorConfig, labels: &[bool], count: usize, rng: &mut ChaCha8Rng) -> Vec<ImageGrid> {
    let side = config.image_side;
    let mut canvases: Vec<Vec<f64>> = (0..count)
        .map(|i| {
            let view = if i % 2 == 0 { ViewTag::Frontal } else { ViewTag::Lateral };
            (0..side * side)
                .map(|p| {
                    let (r, c) = (p / side, p % side);
                    let band = match view {
                        ViewTag::Frontal => c.abs_diff(side / 2) <= 1,
                        ViewTag::Lateral => r.abs_diff(side / 2) <= 1,
                    };
                    let base = if band { 0.35 } else { 0.15 };
                    base + rng.gen_range(-config.noise..=config.noise)
                })
                .collect()
        })
        .collect();

    let half = ((side - 16) / 4 / 3).max(1);
    for (c, _) in labels.iter().enumerate().filter(|(_, &on)| on) {
        let weak = config.weak_conditions.contains(&c);
        if weak && !rng.gen_bool(config.weak_visibility) {
            continue;
        }
        let contrast = if weak { config.weak_contrast } else { config.glyph_contrast };
        let mut shown: Vec<usize> = (0..count).filter(|_| rng.gen_bool(config.glyph_image_prob)).collect();
        if shown.is_empty() {
            shown.push(rng.gen_range(0..count));
        }
        let (cr, cc) = glyph_center(c, side);
        for &i in &shown {
            for r in cr - half..cr + half {
                for col in cc - half..cc + half {
                    canvases[i][r * side + col] += contrast;
                }
            }
        }
    }

    canvases
        .iter()
        .enumerate()
        .map(|(i, px)| {
            let view = if i % 2 == 0 { ViewTag::Frontal } else { ViewTag::Lateral };
            ImageGrid::from_intensities(side, view, px)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig { patients: SplitSizes { train: 30, validation: 5, test: 5 }, ..Default::default() }
    }

    #[test]
    fn zero_patients_gives_empty_splits() {
        let cfg = GeneratorConfig { patients: SplitSizes { train: 0, validation: 0, test: 0 }, ..Default::default() };
        let c = generate_corpus(&cfg).unwrap();
        assert!(c.train.is_empty() && c.validation.is_empty() && c.test.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_corpus(&small()).unwrap(), generate_corpus(&small()).unwrap());
    }

    #[test]
    fn full_persistence_freezes_labels() {
        let cfg = GeneratorConfig { persistence: 1.0, ..small() };
        let c = generate_corpus(&cfg).unwrap();
        for p in &c.train {
            assert!(p.studies.iter().all(|s| s.labels == p.studies[0].labels));
        }
        assert_eq!(c.stats(SplitName::Train).label_persistence, 1.0);
    }

    #[test]
    fn split_stats_match_the_generator() {
        let c = generate_corpus(&GeneratorConfig { patients: SplitSizes { train: 800, validation: 0, test: 0 }, image_side: 16, ..Default::default() }).unwrap();
        let s = c.stats(SplitName::Train);
        assert_eq!(s.studies, s.patients + s.with_previous);
        assert!((s.label_persistence - 0.9).abs() < 0.02, "{s:?}");
        assert!(s.images >= s.studies && s.images <= 5 * s.studies);
        let empty = c.stats(SplitName::Test);
        assert_eq!((empty.studies, empty.label_persistence), (0, 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            GeneratorConfig { persistence: 1.5, ..small() },
            GeneratorConfig { persistence: -0.1, ..small() },
            GeneratorConfig { weak_conditions: vec![14], ..small() },
            GeneratorConfig { weak_visibility: 1.2, ..small() },
            GeneratorConfig { images_per_study: vec![1.0], ..small() },
            GeneratorConfig { template_bank: "tb-0".into(), ..small() },
        ] {
            assert!(matches!(generate_corpus(&cfg), Err(CorpusError::InvalidConfig(_))));
        }
    }

    #[test]
    fn studies_satisfy_record_invariants() {
        let c = generate_corpus(&small()).unwrap();
        for p in c.train.iter().chain(&c.validation).chain(&c.test) {
            for (i, s) in p.studies.iter().enumerate() {
                assert_eq!(s.study_index, i + 1);
                assert!((1..=5).contains(&s.images.len()));
                assert!(!s.findings.is_empty() && !s.impression.is_empty());
                assert!(s.images.iter().all(|im| im.side() == 64));
            }
            assert!(p.studies.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        }
    }

    #[test]
    fn patient_ids_are_disjoint_across_splits() {
        let c = generate_corpus(&small()).unwrap();
        let ids: std::collections::HashSet<_> =
            c.train.iter().chain(&c.validation).chain(&c.test).map(|p| p.patient_id.clone()).collect();
        assert_eq!(ids.len(), c.train.len() + c.validation.len() + c.test.len());
    }

    /// Mean brightness over a condition's glyph square, maximised over the images.
    fn glyph_signal(s: &crate::corpus::StudyRecord, c: usize) -> f64 {
        let (r0, c0) = glyph_center(c, 64);
        s.images
            .iter()
            .map(|im| {
                let mut sum = 0.0;
                for r in r0 - 3..r0 + 3 {
                    for col in c0 - 3..c0 + 3 {
                        sum += im.intensity(r, col);
                    }
                }
                sum / 36.0
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn weak_conditions_show_in_the_configured_share_of_studies() {
        let cfg = GeneratorConfig { patients: SplitSizes { train: 400, validation: 0, test: 0 }, ..Default::default() };
        let c = generate_corpus(&cfg).unwrap();
        let (mut strong, mut weak_shown, mut weak_total) = ((0, 0), 0, 0);
        for s in c.train.iter().flat_map(|p| &p.studies) {
            for cond in 0..NUM_CONDITIONS {
                if !s.labels[cond] {
                    continue;
                }
                let sig = glyph_signal(s, cond);
                if cfg.weak_conditions.contains(&cond) {
                    weak_total += 1;
                    weak_shown += (sig > 0.25 + cfg.weak_contrast / 2.0) as usize;
                } else {
                    strong.0 += 1;
                    strong.1 += (sig > 0.5) as usize;
                }
            }
        }
        assert_eq!(strong.0, strong.1, "every strong glyph is drawn");
        let share = weak_shown as f64 / weak_total as f64;
        assert!((share - cfg.weak_visibility).abs() < 0.06, "weak share {share} over {weak_total}");
    }

    #[test]
    fn glyph_lattice_is_distinct_and_inside_the_safe_crop() {
        let side = 64;
        let mut seen = std::collections::HashSet::new();
        for c in 0..NUM_CONDITIONS {
            let (r, col) = glyph_center(c, side);
            assert!(seen.insert((r, col)));
            assert!(r >= 12 && r + 12 <= side && col >= 12 && col + 12 <= side);
        }
    }
}
