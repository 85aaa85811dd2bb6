//! Instruction-tuning records for the anomaly-detection, attribute-caption
//! and anomaly-analysis tasks, plus dataset statistics and the token NLL
//! used as the supervised fine-tuning loss.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;

pub const VERDICT_DEFECTIVE: &str = "This product is defective.";
pub const VERDICT_ACCEPTABLE: &str = "This product is acceptable.";

pub fn verdict_line(label: Label) -> &'static str {
    match label {
        Label::Abnormal => VERDICT_DEFECTIVE,
        Label::Normal => VERDICT_ACCEPTABLE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    AnomalyDetection,
    AttributeCaption,
    AnomalyAnalysis,
    CotM,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::AnomalyDetection => "anomaly_detection",
            Task::AttributeCaption => "attribute_caption",
            Task::AnomalyAnalysis => "anomaly_analysis",
            Task::CotM => "cot_m",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Human,
    Generated,
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFlag {
    FilteredOut,
}

/// How a generated response was produced; enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationInfo {
    pub client: String,
    pub prompt_version: String,
    pub prompt_hash: String,
}

/// One instruction-tuning sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub sample_id: String,
    pub product_class: String,
    pub label: Label,
    pub task: Task,
    pub prompt: String,
    pub response: String,
    /// Paths relative to the dataset root.
    pub image_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_manifest_ref: Option<String>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationInfo>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub flags: BTreeSet<RecordFlag>,
}

impl InstructionRecord {
    pub fn is_filtered(&self) -> bool {
        self.flags.contains(&RecordFlag::FilteredOut)
    }

    /// Task-specific response invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Integrity(format!("record `{}`: {m}", self.id)));
        match self.task {
            Task::AnomalyDetection => {
                let expected = match self.label {
                    Label::Abnormal => "Yes",
                    Label::Normal => "No",
                };
                if self.response != expected {
                    return bad(format!(
                        "anomaly_detection response must be `{expected}`, got `{}`",
                        self.response
                    ));
                }
            }
            Task::AttributeCaption => {
                if self.provenance != Provenance::Human {
                    return bad("attribute_caption requires a human caption".into());
                }
                if self.response.trim().is_empty() {
                    return bad("empty caption".into());
                }
            }
            Task::AnomalyAnalysis | Task::CotM => {
                if self.task == Task::AnomalyAnalysis {
                    let verdict = verdict_line(self.label);
                    let rest = self.response.strip_prefix(verdict);
                    if rest.is_none_or(|r| r.trim().is_empty()) {
                        return bad(format!(
                            "anomaly_analysis response must start with `{verdict}` followed by an explanation"
                        ));
                    }
                }
                if self.provenance != Provenance::Human && self.generation.is_none() && self.task == Task::CotM {
                    return bad("generated record lacks generation info".into());
                }
            }
        }
        Ok(())
    }
}

/// Validates every record and checks id uniqueness.
pub fn validate_records(records: &[InstructionRecord]) -> Result<()> {
    let mut ids = BTreeSet::new();
    for r in records {
        r.validate()?;
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Integrity(format!("duplicate record id `{}`", r.id)));
        }
    }
    Ok(())
}

/// A human-annotated source sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedSample {
    pub sample_id: String,
    pub product_class: String,
    #[serde(default)]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    /// Image path relative to the dataset root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_manifest_ref: Option<String>,
}

/// Words that describe where a defect is or what it looks like.
const DEFECT_ATTRIBUTE_TERMS: &[&str] = &[
    // location
    "left", "right", "top", "bottom", "upper", "lower", "center", "centre", "middle", "corner",
    "edge", "side", "near", "inner", "outer", "surface",
    // orientation
    "horizontal", "vertical", "diagonal", "horizontally", "vertically", "diagonally", "along",
    "across",
    // shape
    "scratch", "scratches", "crack", "cracks", "hole", "holes", "dent", "spot", "spots", "line",
    "round", "circular", "irregular", "elongated", "long", "thin", "small", "large", "bent",
    "broken", "missing", "chip", "stain", "cut",
    // color
    "red", "green", "blue", "black", "white", "yellow", "brown", "gray", "grey", "dark", "light",
    "orange", "pink", "purple", "color", "colour", "discolored", "discoloured",
];

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Product-class catalog loaded from `{"classes": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Catalog {
    pub classes: BTreeSet<String>,
}

impl AnnotatedSample {
    pub fn validate(&self, catalog: Option<&Catalog>) -> Result<()> {
        if let Some(cat) = catalog {
            if !cat.classes.contains(&self.product_class) {
                return Err(Error::Integrity(format!(
                    "sample `{}`: class `{}` is not in the catalog",
                    self.sample_id, self.product_class
                )));
            }
        }
        if let (Some(Label::Abnormal), Some(caption)) = (self.label, &self.caption) {
            if !words(caption).any(|w| DEFECT_ATTRIBUTE_TERMS.contains(&w.as_str())) {
                return Err(Error::Integrity(format!(
                    "sample `{}`: abnormal caption mentions no defect attribute",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }

    fn object_name(&self) -> String {
        self.product_class.replace('_', " ")
    }

    fn require_label(&self) -> Result<Label> {
        self.label
            .ok_or_else(|| Error::Argument(format!("sample `{}` has no label", self.sample_id)))
    }

    fn base_record(&self, task: Task, label: Label, prompt: String, response: String, provenance: Provenance) -> InstructionRecord {
        InstructionRecord {
            id: format!("{}:{}", self.sample_id, task.as_str()),
            sample_id: self.sample_id.clone(),
            product_class: self.product_class.clone(),
            label,
            task,
            prompt,
            response,
            image_refs: self.image.iter().cloned().collect(),
            roi_manifest_ref: self.roi_manifest_ref.clone(),
            provenance,
            generation: None,
            flags: BTreeSet::new(),
        }
    }
}

pub fn ad_prompt(object: &str) -> String {
    format!("<image>\nAre there any defects on the {object} in this image? Answer with Yes or No.")
}

pub fn caption_prompt(object: &str) -> String {
    format!(
        "<image>\nDescribe the {object} in this image in detail: its color, shape, layout, material and texture, and for any defect its location, orientation, shape and color."
    )
}

pub fn analysis_prompt(object: &str) -> String {
    format!(
        "<image>\nIs the {object} in this image defective or acceptable? Explain your judgement using its visual attributes."
    )
}

pub fn build_ad_record(sample: &AnnotatedSample) -> Result<InstructionRecord> {
    let label = sample.require_label()?;
    let response = match label {
        Label::Abnormal => "Yes",
        Label::Normal => "No",
    };
    Ok(sample.base_record(
        Task::AnomalyDetection,
        label,
        ad_prompt(&sample.object_name()),
        response.to_string(),
        Provenance::Human,
    ))
}

pub fn build_caption_record(sample: &AnnotatedSample) -> Result<InstructionRecord> {
    let label = sample.require_label()?;
    let caption = sample
        .caption
        .as_ref()
        .filter(|c| !c.trim().is_empty())
        .ok_or_else(|| Error::Argument(format!("sample `{}` has no caption", sample.sample_id)))?;
    Ok(sample.base_record(
        Task::AttributeCaption,
        label,
        caption_prompt(&sample.object_name()),
        caption.clone(),
        Provenance::Human,
    ))
}

/// Verdict line followed by an externally generated explanation.
pub fn build_analysis_record(sample: &AnnotatedSample, explanation: &str) -> Result<InstructionRecord> {
    let label = sample.require_label()?;
    if sample.caption.as_ref().is_none_or(|c| c.trim().is_empty()) {
        return Err(Error::Argument(format!("sample `{}` has no caption", sample.sample_id)));
    }
    let explanation = explanation.trim();
    if explanation.is_empty() {
        return Err(Error::Argument(format!(
            "empty explanation for sample `{}`",
            sample.sample_id
        )));
    }
    Ok(sample.base_record(
        Task::AnomalyAnalysis,
        label,
        analysis_prompt(&sample.object_name()),
        format!("{} {explanation}", verdict_line(label)),
        Provenance::Generated,
    ))
}

/// Builds every applicable record for a set of samples, sorted by id.
///
/// `explanations` maps sample ids to generated explanations; samples without
/// one get no analysis record.
pub fn build_dataset(
    samples: &[AnnotatedSample],
    explanations: &BTreeMap<String, String>,
    catalog: Option<&Catalog>,
) -> Result<Vec<InstructionRecord>> {
    let mut out = Vec::new();
    for s in samples {
        s.validate(catalog)?;
        out.push(build_ad_record(s)?);
        if s.caption.is_some() {
            out.push(build_caption_record(s)?);
            if let Some(e) = explanations.get(&s.sample_id) {
                out.push(build_analysis_record(s, e)?);
            }
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    validate_records(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub per_task: BTreeMap<String, usize>,
    pub per_label: BTreeMap<String, usize>,
    pub per_class: BTreeMap<String, usize>,
    /// Distinct human-annotated samples per label.
    pub human_samples: BTreeMap<String, usize>,
    /// `min / max` of the human-annotated normal and abnormal sample counts.
    pub human_balance: Option<f64>,
    /// Catalog classes with no records.
    pub missing_classes: Vec<String>,
}

pub fn dataset_stats(records: &[InstructionRecord], catalog: Option<&Catalog>) -> DatasetStats {
    let mut per_task = BTreeMap::new();
    let mut per_label = BTreeMap::new();
    let mut per_class = BTreeMap::new();
    let mut human: BTreeMap<Label, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        *per_task.entry(r.task.as_str().to_string()).or_insert(0) += 1;
        *per_label.entry(r.label.to_string()).or_insert(0) += 1;
        *per_class.entry(r.product_class.clone()).or_insert(0) += 1;
        if r.provenance == Provenance::Human {
            human.entry(r.label).or_default().insert(&r.sample_id);
        }
    }
    let normal = human.get(&Label::Normal).map_or(0, BTreeSet::len);
    let abnormal = human.get(&Label::Abnormal).map_or(0, BTreeSet::len);
    let human_balance = (normal > 0 && abnormal > 0)
        .then(|| normal.min(abnormal) as f64 / normal.max(abnormal) as f64);
    let missing_classes = catalog
        .map(|c| {
            c.classes
                .iter()
                .filter(|k| !per_class.contains_key(*k))
                .cloned()
                .collect()
        })
        .unwrap_or_default();
    DatasetStats {
        total: records.len(),
        per_task,
        per_label,
        per_class,
        human_samples: [
            ("abnormal".to_string(), abnormal),
            ("normal".to_string(), normal),
        ]
        .into(),
        human_balance,
        missing_classes,
    }
}

/// Negative log-likelihood of a token sequence: `-sum(log p)`.
///
/// Uses compensated summation so that splitting a sequence and adding the
/// parts agrees with the whole to within a couple of ulps.
pub fn sft_nll(token_logprobs: &[f64]) -> Result<f64> {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (i, &lp) in token_logprobs.iter().enumerate() {
        if !lp.is_finite() || lp > 0.0 {
            return Err(Error::Argument(format!(
                "token {i} has invalid log-probability {lp}"
            )));
        }
        let x = -lp;
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    Ok(sum + comp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: &str, label: Option<Label>, caption: Option<&str>) -> AnnotatedSample {
        AnnotatedSample {
            sample_id: id.into(),
            product_class: "pcb1".into(),
            label,
            caption: caption.map(str::to_string),
            image: Some(format!("images/{id}.png")),
            roi_manifest_ref: None,
        }
    }

    #[test]
    fn ad_record_responses() {
        let r = build_ad_record(&sample("a", Some(Label::Abnormal), None)).unwrap();
        assert_eq!(r.response, "Yes");
        r.validate().unwrap();
        let r = build_ad_record(&sample("n", Some(Label::Normal), None)).unwrap();
        assert_eq!(r.response, "No");
        r.validate().unwrap();
        assert!(matches!(build_ad_record(&sample("x", None, None)), Err(Error::Argument(_))));
    }

    #[test]
    fn caption_record_is_verbatim() {
        let cap = "A green board,  with\ttwo  white connectors.\n";
        let r = build_caption_record(&sample("n", Some(Label::Normal), Some(cap))).unwrap();
        assert_eq!(r.response.as_bytes(), cap.as_bytes());
        assert_eq!(r.provenance, Provenance::Human);
        assert!(build_caption_record(&sample("n", Some(Label::Normal), None)).is_err());
    }

    #[test]
    fn analysis_record_prefix() {
        let s = sample("a", Some(Label::Abnormal), Some("scratch on the left"));
        let r = build_analysis_record(&s, "A long scratch runs across the left edge.").unwrap();
        assert!(r.response.starts_with(VERDICT_DEFECTIVE));
        assert!(r.response.contains("A long scratch"));
        r.validate().unwrap();
        let n = sample("n", Some(Label::Normal), Some("green board"));
        let r = build_analysis_record(&n, "Everything is in place.").unwrap();
        assert!(r.response.starts_with(VERDICT_ACCEPTABLE));
        assert!(build_analysis_record(&n, "  ").is_err());
    }

    #[test]
    fn validation_rejects_violations() {
        let mut r = build_ad_record(&sample("a", Some(Label::Abnormal), None)).unwrap();
        r.response = "yes".into();
        assert!(r.validate().is_err());
        let r = build_ad_record(&sample("a", Some(Label::Abnormal), None)).unwrap();
        assert!(validate_records(&[r.clone(), r]).is_err());
        let bad = sample("a", Some(Label::Abnormal), Some("a board"));
        assert!(bad.validate(None).is_err());
        let cat = Catalog { classes: ["pcb2".to_string()].into() };
        assert!(sample("n", Some(Label::Normal), None).validate(Some(&cat)).is_err());
    }

    #[test]
    fn stats_balance_and_catalog() {
        let mut recs = Vec::new();
        for i in 0..3 {
            recs.push(build_ad_record(&sample(&format!("n{i}"), Some(Label::Normal), None)).unwrap());
            recs.push(build_ad_record(&sample(&format!("a{i}"), Some(Label::Abnormal), None)).unwrap());
        }
        let cat = Catalog { classes: ["pcb1".to_string(), "pcb4".to_string()].into() };
        let st = dataset_stats(&recs, Some(&cat));
        assert_eq!(st.total, 6);
        assert_eq!(st.human_balance, Some(1.0));
        assert_eq!(st.missing_classes, vec!["pcb4".to_string()]);

        let empty = dataset_stats(&[], None);
        assert_eq!(empty.total, 0);
        assert!(empty.per_task.is_empty());
        assert_eq!(empty.human_balance, None);
    }

    #[test]
    fn nll_examples() {
        assert_eq!(sft_nll(&[-0.5, -1.0]).unwrap(), 1.5);
        assert_eq!(sft_nll(&[]).unwrap(), 0.0);
        assert_eq!(sft_nll(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(sft_nll(&[0.1]).is_err());
        assert!(sft_nll(&[f64::NEG_INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn nll_is_additive(a in prop::collection::vec(-20.0f64..=0.0, 0..40), b in prop::collection::vec(-20.0f64..=0.0, 0..40)) {
            let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
            let lhs = sft_nll(&joined).unwrap();
            let rhs = sft_nll(&a).unwrap() + sft_nll(&b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
