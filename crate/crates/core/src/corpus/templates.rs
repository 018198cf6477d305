//! Versioned sentence templates. Report texts are a pure function of the
//! latent condition states, and the rule-based labeler reads the same table.

/// Number of observed conditions.
pub const NUM_CONDITIONS: usize = 14;

pub const TEMPLATE_BANK_VERSION: &str = "tb-1";

/// Impression used when no condition is positive.
pub const NORMAL_IMPRESSION: &str = "No acute cardiopulmonary process.";

/// Findings filler used when no condition is positive.
pub const CLEAR_LUNGS: &str = "The lungs are clear.";

pub struct ConditionTemplate {
    pub name: &'static str,
    /// Findings sentence when positive.
    pub positive: &'static str,
    /// Impression sentence when positive.
    pub summary: &'static str,
    /// Sentence stated in the findings when negative; `None` means the
    /// condition is simply not mentioned.
    pub negative: Option<&'static str>,
    /// Hedged phrasing, recognised by the labeler but never generated.
    pub uncertain: &'static str,
}

pub const CONDITIONS: [ConditionTemplate; NUM_CONDITIONS] = [
    ConditionTemplate {
        name: "enlarged_cardiomediastinum",
        positive: "The cardiomediastinal silhouette is widened.",
        summary: "Widened mediastinum.",
        negative: None,
        uncertain: "The mediastinum may be widened.",
    },
    ConditionTemplate {
        name: "cardiomegaly",
        positive: "The heart is enlarged.",
        summary: "Cardiomegaly.",
        negative: None,
        uncertain: "Possible cardiomegaly.",
    },
    ConditionTemplate {
        name: "lung_opacity",
        positive: "There is a patchy opacity in the right lower lobe.",
        summary: "Right lower lobe opacity.",
        negative: None,
        uncertain: "Possible right lower lobe opacity.",
    },
    ConditionTemplate {
        name: "lung_lesion",
        positive: "A nodule is seen in the left upper lobe.",
        summary: "Left upper lobe nodule.",
        negative: None,
        uncertain: "Possible left upper lobe nodule.",
    },
    ConditionTemplate {
        name: "edema",
        positive: "There is interstitial pulmonary edema.",
        summary: "Pulmonary edema.",
        negative: None,
        uncertain: "Possible pulmonary edema.",
    },
    ConditionTemplate {
        name: "consolidation",
        positive: "There is consolidation in the left lower lobe.",
        summary: "Left lower lobe consolidation.",
        negative: None,
        uncertain: "Possible left lower lobe consolidation.",
    },
    ConditionTemplate {
        name: "pneumonia",
        positive: "Airspace disease is compatible with pneumonia.",
        summary: "Pneumonia.",
        negative: None,
        uncertain: "Possible pneumonia.",
    },
    ConditionTemplate {
        name: "atelectasis",
        positive: "There is bibasilar atelectasis.",
        summary: "Bibasilar atelectasis.",
        negative: None,
        uncertain: "Possible bibasilar atelectasis.",
    },
    ConditionTemplate {
        name: "pneumothorax",
        positive: "There is a small right apical pneumothorax.",
        summary: "Right pneumothorax.",
        negative: Some("There is no pneumothorax."),
        uncertain: "Possible right pneumothorax.",
    },
    ConditionTemplate {
        name: "pleural_effusion",
        positive: "There is a small left pleural effusion.",
        summary: "Left pleural effusion.",
        negative: Some("There is no pleural effusion."),
        uncertain: "Possible left pleural effusion.",
    },
    ConditionTemplate {
        name: "pleural_other",
        positive: "There is apical pleural thickening.",
        summary: "Pleural thickening.",
        negative: None,
        uncertain: "Possible pleural thickening.",
    },
    ConditionTemplate {
        name: "fracture",
        positive: "A healed rib fracture is noted.",
        summary: "Rib fracture.",
        negative: None,
        uncertain: "Possible rib fracture.",
    },
    ConditionTemplate {
        name: "support_devices",
        positive: "A central venous catheter is in place.",
        summary: "Catheter in place.",
        negative: None,
        uncertain: "A catheter may be present.",
    },
    ConditionTemplate {
        name: "calcification",
        positive: "The aortic knob is calcified.",
        summary: "Aortic calcification.",
        negative: None,
        uncertain: "Possible aortic calcification.",
    },
];

/// Findings text for a label vector: positive sentences in condition order,
/// followed by the stated negatives.
pub fn render_findings(labels: &[bool]) -> String {
    let mut parts: Vec<&str> = CONDITIONS
        .iter()
        .zip(labels)
        .filter(|(_, &on)| on)
        .map(|(c, _)| c.positive)
        .collect();
    if parts.is_empty() {
        parts.push(CLEAR_LUNGS);
    }
    parts.extend(CONDITIONS.iter().zip(labels).filter_map(|(c, &on)| if on { None } else { c.negative }));
    parts.join(" ")
}

pub fn render_impression(labels: &[bool]) -> String {
    let parts: Vec<&str> = CONDITIONS
        .iter()
        .zip(labels)
        .filter(|(_, &on)| on)
        .map(|(c, _)| c.summary)
        .collect();
    if parts.is_empty() {
        NORMAL_IMPRESSION.to_string()
    } else {
        parts.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn every_sentence_is_unique() {
        let mut seen = HashSet::new();
        for c in &CONDITIONS {
            for s in [Some(c.positive), Some(c.summary), c.negative, Some(c.uncertain)].into_iter().flatten() {
                assert!(seen.insert(s.to_lowercase()), "duplicate sentence {s}");
                assert!(s.ends_with('.'));
                assert_eq!(s.matches('.').count(), 1, "sentence must hold exactly one period: {s}");
            }
        }
        assert!(seen.insert(NORMAL_IMPRESSION.to_lowercase()));
        assert!(seen.insert(CLEAR_LUNGS.to_lowercase()));
    }

    #[test]
    fn all_negative_report() {
        let labels = [false; NUM_CONDITIONS];
        assert_eq!(
            render_findings(&labels),
            "The lungs are clear. There is no pneumothorax. There is no pleural effusion."
        );
        assert_eq!(render_impression(&labels), NORMAL_IMPRESSION);
    }
}
