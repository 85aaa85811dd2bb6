//! Benchmark prompt rendering, answer extraction and run scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cotm::MfgStore;
use crate::cvm::Rationale;
use crate::error::{Error, Result};
use crate::label::Decision;
use crate::map_io::BinaryMask;
use crate::metrics::defect_size_class;

pub const OPTION_A: &str = "Yes";
pub const OPTION_B: &str = "No";

const OPTIONS_BLOCK: &str =
    "A. Yes\nB. No\nAnswer with the option's letter from the given choices directly.";
const ONE_SHOT_QUESTION: &str = "The second image shows an acceptable product. Compared to the acceptable product, find out whether there are defects in the product in the first image.";
const MYRIAD_QUESTION: &str = "This image may be simulated by photo editing. According to IAD expert opinions and corresponding visual descriptions, find out if there are defects in this image.";
const ANOMALYGPT_QUESTION: &str = "Is there any anomaly in the image?";

/// One binary multiple-choice benchmark question. Options are always
/// `A = Yes` (defect) and `B = No` (normal).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    pub sample_id: String,
    pub product_class: String,
    /// Name substituted into the question; defaults to the product class
    /// with underscores as spaces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_name: Option<String>,
    pub ground_truth: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_image: Option<String>,
    /// MFG store key; defaults to the product class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mfg_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_ref: Option<String>,
}

impl EvalItem {
    pub fn object_name(&self) -> String {
        self.object_name
            .clone()
            .unwrap_or_else(|| self.product_class.replace('_', " "))
    }

    pub fn question(&self) -> String {
        format!("Are there any defects on the {} in this image?", self.object_name())
    }

    fn mfg_key(&self) -> &str {
        self.mfg_ref.as_deref().unwrap_or(&self.product_class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    General,
    Onevision,
    Myriad,
    Anomalygpt,
}

impl std::str::FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Template::General),
            "onevision" => Ok(Template::Onevision),
            "myriad" => Ok(Template::Myriad),
            "anomalygpt" => Ok(Template::Anomalygpt),
            other => Err(Error::config("template", format!("unknown template `{other}`"))),
        }
    }
}

impl Template {
    fn image_placeholder(&self) -> &'static str {
        match self {
            Template::General | Template::Onevision => "<image>",
            Template::Myriad => "<Image><ImageHere><\\Image>",
            Template::Anomalygpt => "</Img>",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shot {
    Zero,
    One,
}

/// Lookup tables consulted while rendering.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptContext<'a> {
    pub mfg: Option<&'a MfgStore>,
    /// Per-class hint text for the AnomalyGPT template.
    pub hints: Option<&'a BTreeMap<String, String>>,
}

/// Instantiates the evaluation prompt for one item.
///
/// The manufacturing-process context, when requested, sits between the
/// image placeholder(s) and the question.
pub fn render_prompt(
    item: &EvalItem,
    template: Template,
    with_mfg: bool,
    shot: Shot,
    ctx: &PromptContext<'_>,
) -> Result<String> {
    let context = if with_mfg {
        let store = ctx.mfg.ok_or_else(|| {
            Error::config("mfg_store", "an MFG store is required for +MFG prompts")
        })?;
        let process = store.get(item.mfg_key()).ok_or_else(|| {
            Error::config(
                "mfg_store",
                format!("no manufacturing process for `{}`", item.mfg_key()),
            )
        })?;
        Some(process.render())
    } else {
        None
    };
    if shot == Shot::One && item.reference_image.is_none() {
        return Err(Error::Argument(format!(
            "one-shot item `{}` has no reference image",
            item.sample_id
        )));
    }

    let ph = template.image_placeholder();
    let images = match shot {
        Shot::Zero => ph.to_string(),
        Shot::One => format!("{ph}\n{ph}"),
    };
    let ctx_line = context.map(|c| format!("{c}\n")).unwrap_or_default();
    let general_q = match shot {
        Shot::Zero => item.question(),
        Shot::One => ONE_SHOT_QUESTION.to_string(),
    };

    let prompt = match template {
        Template::General => format!("{images}\n{ctx_line}{general_q}\n{OPTIONS_BLOCK}"),
        Template::Onevision => {
            let header = if with_mfg {
                "Referencing the image and production process that are shown below, please answer the question:"
            } else {
                "Referencing the image that is shown below, please answer the question:"
            };
            format!("{header}\nImage:\n{images}\n{ctx_line}Question: {general_q}\n{OPTIONS_BLOCK}")
        }
        Template::Myriad => format!("{images}\n{ctx_line}{MYRIAD_QUESTION}"),
        Template::Anomalygpt => {
            let hint = ctx
                .hints
                .and_then(|h| h.get(&item.product_class))
                .filter(|h| !h.trim().is_empty())
                .map(|h| format!("{} ", h.trim()))
                .unwrap_or_default();
            format!("{images}\n{ctx_line}{hint}{ANOMALYGPT_QUESTION}")
        }
    };
    Ok(prompt)
}

/// A rendered prompt with the image paths in placeholder order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub sample_id: String,
    pub prompt: String,
    pub images: Vec<String>,
}

pub fn render_items(
    items: &[EvalItem],
    template: Template,
    with_mfg: bool,
    shot: Shot,
    ctx: &PromptContext<'_>,
) -> Result<Vec<RenderedPrompt>> {
    let mut out: Vec<RenderedPrompt> = items
        .iter()
        .map(|item| {
            let prompt = render_prompt(item, template, with_mfg, shot, ctx)?;
            let mut images: Vec<String> = item.image.iter().cloned().collect();
            if shot == Shot::One {
                images.extend(item.reference_image.iter().cloned());
            }
            Ok(RenderedPrompt {
                sample_id: item.sample_id.clone(),
                prompt,
                images,
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerScheme {
    /// First standalone `A` or `B` token.
    OptionLetter,
    /// Earliest whole-word `yes` or `no`, case-insensitive.
    Keyword,
}

impl std::str::FromStr for AnswerScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "option_letter" | "letter" => Ok(AnswerScheme::OptionLetter),
            "keyword" => Ok(AnswerScheme::Keyword),
            other => Err(Error::config("scheme", format!("unknown answer scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Defect,
    Normal,
    Abstain,
}

impl Answer {
    pub fn decision(self) -> Option<Decision> {
        match self {
            Answer::Defect => Some(Decision::Defect),
            Answer::Normal => Some(Decision::Normal),
            Answer::Abstain => None,
        }
    }
}

impl From<Option<Decision>> for Answer {
    fn from(d: Option<Decision>) -> Self {
        match d {
            Some(Decision::Defect) => Answer::Defect,
            Some(Decision::Normal) => Answer::Normal,
            None => Answer::Abstain,
        }
    }
}

pub fn extract_answer(response: &str, scheme: AnswerScheme) -> Answer {
    let mut words = response
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty());
    match scheme {
        AnswerScheme::OptionLetter => words
            .find_map(|w| match w {
                "A" => Some(Answer::Defect),
                "B" => Some(Answer::Normal),
                _ => None,
            })
            .unwrap_or(Answer::Abstain),
        AnswerScheme::Keyword => words
            .find_map(|w| {
                if w.eq_ignore_ascii_case("yes") {
                    Some(Answer::Defect)
                } else if w.eq_ignore_ascii_case("no") {
                    Some(Answer::Normal)
                } else {
                    None
                }
            })
            .unwrap_or(Answer::Abstain),
    }
}

/// One line of a responses JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub sample_id: String,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_score_query: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_score_reference: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<Rationale>,
}

pub fn answers_from_responses(
    responses: &[Response],
    scheme: AnswerScheme,
) -> Result<BTreeMap<String, Answer>> {
    let mut out = BTreeMap::new();
    for r in responses {
        if out
            .insert(r.sample_id.clone(), extract_answer(&r.response_text, scheme))
            .is_some()
        {
            return Err(Error::Scoring(format!("duplicate response for `{}`", r.sample_id)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl BucketScore {
    fn new(total: usize, correct: usize) -> Self {
        Self {
            total,
            correct,
            accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub total: usize,
    pub correct: usize,
    pub abstained: usize,
    pub accuracy: f64,
    /// `small`/`medium`/`large` for defect items and `normal` for normal ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_size: Option<BTreeMap<String, BucketScore>>,
    /// Accuracy with MFG context minus accuracy without, when paired.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_mfg: Option<f64>,
}

/// Multiple-choice accuracy. Abstentions count as incorrect.
pub fn score_run(
    items: &[EvalItem],
    answers: &BTreeMap<String, Answer>,
    gt_masks: Option<&BTreeMap<String, BinaryMask>>,
) -> Result<RunReport> {
    let missing: Vec<&str> = items
        .iter()
        .filter(|i| !answers.contains_key(&i.sample_id))
        .map(|i| i.sample_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Scoring(format!("missing answers for: {}", missing.join(", "))));
    }
    let mut correct = 0;
    let mut abstained = 0;
    let mut buckets: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for item in items {
        let answer = answers[&item.sample_id];
        let ok = answer.decision() == Some(item.ground_truth);
        correct += usize::from(ok);
        abstained += usize::from(answer == Answer::Abstain);
        if let Some(masks) = gt_masks {
            let bucket = match item.ground_truth {
                Decision::Normal => "normal".to_string(),
                Decision::Defect => {
                    let key = item.gt_mask_ref.as_deref().unwrap_or(&item.sample_id);
                    let mask = masks.get(key).ok_or_else(|| {
                        Error::Scoring(format!("defect item `{}` has no ground-truth mask", item.sample_id))
                    })?;
                    defect_size_class(mask)
                        .map_err(|e| Error::Scoring(format!("item `{}`: {e}", item.sample_id)))?
                        .value
                        .as_str()
                        .to_string()
                }
            };
            let e = buckets.entry(bucket).or_default();
            e.0 += 1;
            e.1 += usize::from(ok);
        }
    }
    let total = items.len();
    Ok(RunReport {
        total,
        correct,
        abstained,
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        per_size: gt_masks.map(|_| {
            buckets
                .into_iter()
                .map(|(k, (t, c))| (k, BucketScore::new(t, c)))
                .collect()
        }),
        delta_mfg: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub base: RunReport,
    pub mfg: RunReport,
    pub delta_mfg: f64,
}

/// Scores a run without and with MFG context on the same items.
pub fn score_paired(
    items: &[EvalItem],
    base: &BTreeMap<String, Answer>,
    with_mfg: &BTreeMap<String, Answer>,
    gt_masks: Option<&BTreeMap<String, BinaryMask>>,
) -> Result<PairedReport> {
    let base = score_run(items, base, gt_masks)?;
    let mut mfg = score_run(items, with_mfg, gt_masks)?;
    let delta = mfg.accuracy - base.accuracy;
    mfg.delta_mfg = Some(delta);
    Ok(PairedReport {
        base,
        mfg,
        delta_mfg: delta,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

impl RunReport {
    /// Plain-text summary table.
    pub fn to_table(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>9}", "bucket", "total", "correct", "accuracy");
        let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>9}", "all", self.total, self.correct, pct(self.accuracy));
        if let Some(per) = &self.per_size {
            for key in ["small", "medium", "large", "normal"] {
                if let Some(b) = per.get(key) {
                    let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>9}", key, b.total, b.correct, pct(b.accuracy));
                }
            }
        }
        let _ = writeln!(s, "abstained: {}", self.abstained);
        if let Some(d) = self.delta_mfg {
            let _ = writeln!(s, "delta_mfg: {:+.1}%", d * 100.0);
        }
        s
    }
}
