//! Chain-of-thought data organization around manufacturing processes.
//!
//! Three generation modes are supported:
//!
//! * **captioned**: an attribute caption plus the product's manufacturing
//!   process go to a text generator, which writes the reasoning trajectory;
//! * **checklist**: samples with only a coarse defect label get a
//!   per-step pass/FAIL checklist that doubles as the explanation;
//! * **text-only**: a normal caption is edited at the attribute level, a
//!   defect may be injected, and the generator reasons over the result.
//!
//! Generated records are reviewed by hand afterwards; [`filter_records`]
//! flags rejected ids without deleting anything.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::instructiad::{
    verdict_line, GenerationInfo, InstructionRecord, Provenance, RecordFlag, Task,
};
use crate::label::Label;
use crate::map_io::read_json;

pub const PROMPT_VERSION: &str = "cot-v1";
const SYSTEM_PROMPT: &str = include_str!("../assets/prompts/cot_system_v1.txt");
const USER_TEMPLATE: &str = include_str!("../assets/prompts/cot_user_v1.txt");
pub const CHECKLIST_VERSION: &str = "checklist-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfgSource {
    Web,
    Llm,
    Gpt,
    Factory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MfgStep {
    pub name: String,
    pub description: String,
}

/// A product's manufacturing process as ordered, named steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MfgProcess {
    pub product_class: String,
    pub steps: Vec<MfgStep>,
    pub source: MfgSource,
}

impl MfgProcess {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Argument(format!(
                "manufacturing process for `{}` has no steps",
                self.product_class
            )));
        }
        if let Some(i) = self.steps.iter().position(|s| s.name.trim().is_empty()) {
            return Err(Error::Argument(format!(
                "manufacturing step {} of `{}` has an empty name",
                i + 1,
                self.product_class
            )));
        }
        Ok(())
    }

    /// Parses a numbered process listing.
    ///
    /// Lines starting with `N.` open a step; text before the first `:` is the
    /// name and the rest, plus any following unnumbered lines, the
    /// description. Text before the first step is ignored.
    pub fn parse(product_class: &str, text: &str, source: MfgSource) -> Result<Self> {
        let mut steps: Vec<MfgStep> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let digits = line.chars().take_while(char::is_ascii_digit).count();
            if digits > 0 && line[digits..].starts_with('.') {
                let body = line[digits + 1..].trim();
                let (name, desc) = body.split_once(':').unwrap_or((body, ""));
                steps.push(MfgStep {
                    name: name.trim().to_string(),
                    description: desc.trim().to_string(),
                });
            } else if let Some(step) = steps.last_mut() {
                let cont = line.trim_start_matches(['-', '*', '•']).trim();
                if !step.description.is_empty() {
                    step.description.push(' ');
                }
                step.description.push_str(cont);
            }
        }
        let process = Self {
            product_class: product_class.to_string(),
            steps,
            source,
        };
        process.validate()?;
        Ok(process)
    }

    /// Context text inserted into prompts.
    pub fn render(&self) -> String {
        let mut s = format!(
            "The following is the production process of the {}:",
            self.product_class.replace('_', " ")
        );
        for (i, step) in self.steps.iter().enumerate() {
            s.push_str(&format!("\n{}. {}: {}", i + 1, step.name, step.description));
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum StoreEntry {
    Steps { source: MfgSource, steps: Vec<MfgStep> },
    Text { source: MfgSource, text: String },
}

/// Manufacturing processes keyed by product class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MfgStore {
    processes: BTreeMap<String, MfgProcess>,
}

impl MfgStore {
    pub fn insert(&mut self, process: MfgProcess) {
        self.processes.insert(process.product_class.clone(), process);
    }

    pub fn get(&self, product_class: &str) -> Option<&MfgProcess> {
        self.processes.get(product_class)
    }

    pub fn len(&self) -> usize {
        self.processes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.processes.is_empty()
    }

    /// Loads `{"<class>": {"source": ..., "steps": [...]}}`; an entry may give
    /// a numbered `text` listing instead of `steps`.
    pub fn load(path: &Path) -> Result<Self> {
        let raw: BTreeMap<String, StoreEntry> = read_json(path)?;
        let mut store = Self::default();
        for (class, entry) in raw {
            let process = match entry {
                StoreEntry::Steps { source, steps } => MfgProcess {
                    product_class: class.clone(),
                    steps,
                    source,
                },
                StoreEntry::Text { source, text } => MfgProcess::parse(&class, &text, source)?,
            };
            process
                .validate()
                .map_err(|e| Error::format(path, e.to_string()))?;
            store.insert(process);
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Color,
    ComponentType,
    Quantity,
    Shape,
    Material,
    Texture,
    Layout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeEdit {
    pub attribute: Attribute,
    pub old: String,
    pub new: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPlan {
    pub edits: Vec<AttributeEdit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject_defect: Option<String>,
    pub seed: u64,
}

const COLORS: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "brown", "orange", "gray", "silver",
];
const QUANTITIES: &[&str] = &["one", "two", "three", "four", "five", "six"];
const DEFECT_POOL: &[&str] = &[
    "One component is missing.",
    "A thin scratch runs across the surface near the left edge.",
    "A crack appears close to the top edge.",
    "A dark spot of contamination is visible in the center.",
    "One part is bent out of its normal position.",
];

impl EditPlan {
    /// Draws a plan for `caption`: at most one color and one quantity swap,
    /// each drawn from words already in the caption, and a defect sentence
    /// injected with probability one half.
    pub fn sample(caption: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: BTreeSet<&str> = caption
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let mut edits = Vec::new();
        for (attribute, vocab) in [(Attribute::Color, COLORS), (Attribute::Quantity, QUANTITIES)] {
            let found: Vec<&str> = words
                .iter()
                .copied()
                .filter(|w| vocab.contains(&w.to_lowercase().as_str()))
                .collect();
            if let Some(&old) = found.choose(&mut rng) {
                if rng.random_bool(0.5) {
                    continue;
                }
                let lower = old.to_lowercase();
                let choices: Vec<&str> = vocab.iter().copied().filter(|w| *w != lower).collect();
                let new = choices.choose(&mut rng).expect("vocabulary has alternatives");
                edits.push(AttributeEdit {
                    attribute,
                    old: old.to_string(),
                    new: match_case(old, new),
                });
            }
        }
        let inject_defect = rng
            .random_bool(0.5)
            .then(|| DEFECT_POOL.choose(&mut rng).expect("pool is nonempty").to_string());
        Self {
            edits,
            inject_defect,
            seed,
        }
    }
}

/// `word` with its first letter uppercased when `like` starts uppercase.
fn match_case(like: &str, word: &str) -> String {
    let mut chars = word.chars();
    match (like.chars().next(), chars.next()) {
        (Some(l), Some(f)) if l.is_uppercase() => f.to_uppercase().chain(chars).collect(),
        _ => word.to_string(),
    }
}

fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before = haystack[..start].chars().next_back();
        let after = haystack[end..].chars().next();
        if !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric) {
            return Some(start);
        }
        from = start + 1;
        while !haystack.is_char_boundary(from) {
            from += 1;
        }
    }
    None
}

/// Applies a plan's edits in order, each replacing the first whole-word
/// occurrence of its old value, then appends the injected defect sentence.
pub fn augment_caption(caption: &str, plan: &EditPlan) -> Result<(String, Label)> {
    let mut text = caption.to_string();
    for edit in &plan.edits {
        let at = find_word(&text, &edit.old).ok_or_else(|| Error::Edit {
            attribute: serde_json::to_value(edit.attribute)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            message: format!("`{}` does not occur in the caption", edit.old),
        })?;
        text.replace_range(at..at + edit.old.len(), &edit.new);
    }
    let label = match &plan.inject_defect {
        Some(defect) => {
            let trimmed_len = text.trim_end().len();
            text.truncate(trimmed_len);
            if !text.is_empty() && !text.ends_with(['.', '!', '?']) {
                text.push('.');
            }
            let mut sentence = defect.trim().to_string();
            if let Some(first) = sentence.get(..1) {
                let upper = first.to_uppercase();
                sentence.replace_range(..1, &upper);
            }
            if !sentence.ends_with(['.', '!', '?']) {
                sentence.push('.');
            }
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(&sentence);
            Label::Abnormal
        }
        None => Label::Normal,
    };
    Ok((text, label))
}

/// Extra tokens matched when a defect label contains the key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymTable(pub BTreeMap<String, Vec<String>>);

impl Default for SynonymTable {
    fn default() -> Self {
        let pairs: &[(&str, &[&str])] = &[
            ("missing", &["quantity", "number", "assembly", "assembled"]),
            ("swap", &["color", "coded", "coding"]),
            ("color", &["colour", "coded", "coding"]),
            ("colour", &["color", "coded", "coding"]),
            ("poke", &["insulation", "extrusion"]),
            ("cut", &["insulation", "sheath", "stripping"]),
            ("bent", &["stranding", "twisting", "assembly"]),
            ("crack", &["cooling", "sheath"]),
            ("contamination", &["cleaning", "coating", "packaging"]),
            ("print", &["printing", "label", "labeling"]),
        ];
        Self(
            pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "the", "of", "on", "in", "to", "is", "are", "with", "for", "or", "by",
    "at", "as", "it", "its", "this", "that", "from", "be",
];

fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Labels treated as "no defect" by the checklist.
fn is_normal_label(label: &str) -> bool {
    matches!(label.trim().to_lowercase().as_str(), "" | "good" | "normal" | "ok")
}

/// Index of the step whose name and description share the most tokens with
/// the (synonym-expanded) label; earliest step wins ties.
pub fn match_step(mfg: &MfgProcess, label: &str, synonyms: &SynonymTable) -> Option<usize> {
    let mut wanted = tokens(label);
    for t in wanted.clone() {
        if let Some(extra) = synonyms.0.get(&t) {
            wanted.extend(extra.iter().map(|s| s.to_lowercase()));
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for (i, step) in mfg.steps.iter().enumerate() {
        let have = tokens(&format!("{} {}", step.name, step.description));
        let score = wanted.intersection(&have).count();
        if score > 0 && best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}

/// Checklist explanation: one line per step, then a verdict line.
pub fn build_checklist(
    mfg: &MfgProcess,
    coarse_label: Option<&str>,
    synonyms: &SynonymTable,
) -> Result<String> {
    mfg.validate()?;
    let defect = coarse_label.filter(|l| !is_normal_label(l));
    let failed = match defect {
        Some(label) => Some(
            match_step(mfg, label, synonyms)
                .ok_or_else(|| Error::UnmatchedLabel(label.to_string()))?,
        ),
        None => None,
    };
    let mut lines = Vec::with_capacity(mfg.steps.len() + 1);
    for (i, step) in mfg.steps.iter().enumerate() {
        let status = if Some(i) == failed {
            format!("FAIL ({})", defect.unwrap_or_default())
        } else {
            "pass".to_string()
        };
        lines.push(format!("Step {} — {}: {status}", i + 1, step.name));
    }
    let verdict = if failed.is_some() {
        verdict_line(Label::Abnormal)
    } else {
        verdict_line(Label::Normal)
    };
    lines.push(format!("Verdict: {verdict}"));
    Ok(lines.join("\n"))
}

/// Text generator behind the reasoning-trajectory step.
pub trait GenClient: Send + Sync {
    fn generate(&self, system: &str, user: &str) -> Result<String>;

    /// Recorded on every generated record.
    fn identity(&self) -> String;
}

fn sha256_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.update([0u8]);
        }
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn prompt_hash(system: &str, user: &str) -> String {
    sha256_hex(&[system, user])
}

/// Deterministic template filler standing in for a real model.
///
/// It reads the numbered steps and the stated outcome back out of the
/// prompt, so its output mentions every step name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubClient {
    pub seed: u64,
}

const STUB_PHRASES: &[&str] = &[
    "the attributes this step controls look as expected",
    "nothing in the description contradicts what this step should produce",
    "the relevant parts appear consistent with this step",
    "this step leaves visible traces that match the description",
];

impl GenClient for StubClient {
    fn generate(&self, _system: &str, user: &str) -> Result<String> {
        let section = user
            .split_once("Manufacturing process:")
            .map(|(_, rest)| rest.split("Inspection outcome:").next().unwrap_or(rest))
            .unwrap_or("");
        let steps = MfgProcess::parse("stub", section, MfgSource::Llm)
            .map(|p| p.steps)
            .unwrap_or_default();
        let defective = user.contains("Inspection outcome: defective");
        let mut seed_bytes = [0u8; 8];
        seed_bytes.copy_from_slice(&Sha256::digest(user.as_bytes())[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ u64::from_le_bytes(seed_bytes));
        let flagged = (defective && !steps.is_empty()).then(|| rng.random_range(0..steps.len()));
        let mut out = String::from("Let me check the product against each manufacturing step.");
        for (i, step) in steps.iter().enumerate() {
            let phrase = if Some(i) == flagged {
                "the description shows a deviation that this step should have prevented"
            } else {
                STUB_PHRASES.choose(&mut rng).expect("phrases nonempty")
            };
            out.push_str(&format!("\nStep {} ({}): {phrase}.", i + 1, step.name));
        }
        out.push('\n');
        out.push_str(verdict_line(if defective { Label::Abnormal } else { Label::Normal }));
        Ok(out)
    }

    fn identity(&self) -> String {
        format!("stub:seed={}", self.seed)
    }
}

#[cfg(feature = "http")]
pub use http::HttpClient;

#[cfg(feature = "http")]
mod http {
    use std::time::Duration;

    use serde_json::{json, Value};

    use super::{prompt_hash, GenClient};
    use crate::error::{Error, Result};

    /// Chat-completion style JSON endpoint.
    ///
    /// Transport failures, 429 and 5xx responses are retried with
    /// exponential backoff; the prompt hash is sent as an idempotency key.
    #[derive(Debug, Clone)]
    pub struct HttpClient {
        pub endpoint: String,
        pub model: String,
        pub token: Option<String>,
        pub max_attempts: u32,
        pub backoff: Duration,
        pub timeout: Duration,
    }

    impl HttpClient {
        pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
            Self {
                endpoint: endpoint.into(),
                model: model.into(),
                token: None,
                max_attempts: 3,
                backoff: Duration::from_millis(500),
                timeout: Duration::from_secs(120),
            }
        }

        /// Reads the bearer token from `var` if set.
        pub fn with_token_env(mut self, var: &str) -> Self {
            self.token = std::env::var(var).ok().filter(|t| !t.is_empty());
            self
        }

        fn attempt(&self, agent: &ureq::Agent, body: &Value, key: &str) -> std::result::Result<String, (bool, String)> {
            let mut req = agent
                .post(&self.endpoint)
                .header("Content-Type", "application/json")
                .header("Idempotency-Key", key);
            if let Some(token) = &self.token {
                req = req.header("Authorization", &format!("Bearer {token}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let value: Value = resp
                        .body_mut()
                        .read_json()
                        .map_err(|e| (false, format!("invalid response body: {e}")))?;
                    value["choices"][0]["message"]["content"]
                        .as_str()
                        .map(str::to_string)
                        .ok_or_else(|| (false, "response has no choices[0].message.content".into()))
                }
                Err(ureq::Error::StatusCode(code)) => {
                    Err((code == 429 || code >= 500, format!("HTTP status {code}")))
                }
                Err(e) => Err((true, e.to_string())),
            }
        }
    }

    impl GenClient for HttpClient {
        fn generate(&self, system: &str, user: &str) -> Result<String> {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(self.timeout))
                .build()
                .into();
            let body = json!({
                "model": self.model,
                "temperature": 0,
                "messages": [
                    {"role": "system", "content": system},
                    {"role": "user", "content": user},
                ],
            });
            let key = prompt_hash(system, user);
            let attempts = self.max_attempts.max(1);
            let mut last = String::new();
            for n in 1..=attempts {
                match self.attempt(&agent, &body, &key) {
                    Ok(text) => return Ok(text),
                    Err((false, msg)) => return Err(Error::Generation(msg)),
                    Err((true, msg)) => {
                        log::warn!("generation attempt {n}/{attempts} failed: {msg}");
                        last = msg;
                        if n < attempts {
                            std::thread::sleep(self.backoff * 2u32.pow(n - 1));
                        }
                    }
                }
            }
            Err(Error::Retryable {
                attempts,
                message: last,
            })
        }

        fn identity(&self) -> String {
            format!("http:{}#{}", self.endpoint, self.model)
        }
    }
}

/// A generated trajectory with what is needed to regenerate it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub info: GenerationInfo,
}

pub fn render_cot_prompt(caption: &str, mfg: &MfgProcess, label: Label) -> String {
    let verdict = match label {
        Label::Abnormal => "defective",
        Label::Normal => "acceptable",
    };
    USER_TEMPLATE
        .replace("{object}", &mfg.product_class.replace('_', " "))
        .replace("{caption}", caption.trim())
        .replace("{mfg}", &mfg.render())
        .replace("{verdict}", verdict)
}

/// Asks the client for a reasoning trajectory interleaving the caption's
/// visual details with the manufacturing steps.
pub fn generate_cot(
    caption: &str,
    mfg: &MfgProcess,
    label: Label,
    client: &dyn GenClient,
) -> Result<Generation> {
    if caption.trim().is_empty() {
        return Err(Error::Argument("caption is empty".into()));
    }
    mfg.validate()?;
    let user = render_cot_prompt(caption, mfg, label);
    let text = client.generate(SYSTEM_PROMPT, &user)?;
    if text.trim().is_empty() {
        return Err(Error::Generation("client returned an empty generation".into()));
    }
    Ok(Generation {
        text,
        info: GenerationInfo {
            client: client.identity(),
            prompt_version: PROMPT_VERSION.to_string(),
            prompt_hash: prompt_hash(SYSTEM_PROMPT, &user),
        },
    })
}

/// Flags rejected records as filtered out. Returns the rejected ids that
/// matched no record.
pub fn filter_records(records: &mut [InstructionRecord], rejected: &BTreeSet<String>) -> Vec<String> {
    let known: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let unknown: Vec<String> = rejected
        .iter()
        .filter(|id| !known.contains(id.as_str()))
        .cloned()
        .collect();
    for id in &unknown {
        log::warn!("rejection list names unknown record id `{id}`");
    }
    for r in records.iter_mut() {
        if rejected.contains(&r.id) {
            r.flags.insert(RecordFlag::FilteredOut);
        }
    }
    unknown
}

/// Records eligible for training export.
pub fn export_records(records: &[InstructionRecord]) -> Vec<&InstructionRecord> {
    records.iter().filter(|r| !r.is_filtered()).collect()
}

/// Plain-text id list, one per line; blank lines and `#` comments ignored.
pub fn parse_rejection_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotmMode {
    Captioned,
    Checklist,
    TextOnly,
}

/// One CoT-M work item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotmTask {
    pub sample_id: String,
    pub product_class: String,
    pub mode: CotmMode,
    #[serde(default)]
    pub label: Option<Label>,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub coarse_label: Option<String>,
    #[serde(default)]
    pub image: Option<String>,
    /// Text-only mode: explicit plan; otherwise one is sampled from the seed.
    #[serde(default)]
    pub plan: Option<EditPlan>,
}

#[derive(Debug, Clone)]
pub struct CotmOptions {
    pub seed: u64,
    pub in_flight: usize,
    pub synonyms: SynonymTable,
}

impl Default for CotmOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            in_flight: 4,
            synonyms: SynonymTable::default(),
        }
    }
}

fn image_question(mfg: &MfgProcess) -> String {
    format!(
        "<image>\n{}\nAre there any defects on the {} in this image? Reason step by step through the manufacturing process.",
        mfg.render(),
        mfg.product_class.replace('_', " ")
    )
}

fn text_question(caption: &str, mfg: &MfgProcess) -> String {
    format!(
        "Product description: {}\n{}\nIs this product defective? Reason step by step through the manufacturing process.",
        caption.trim(),
        mfg.render()
    )
}

fn task_seed(base: u64, sample_id: &str) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&Sha256::digest(sample_id.as_bytes())[..8]);
    base ^ u64::from_le_bytes(b)
}

fn run_task(
    task: &CotmTask,
    store: &MfgStore,
    client: &dyn GenClient,
    opts: &CotmOptions,
) -> Result<InstructionRecord> {
    let mfg = store.get(&task.product_class).ok_or_else(|| {
        Error::config("mfg_store", format!("no manufacturing process for `{}`", task.product_class))
    })?;
    let need_caption = || {
        task.caption
            .as_deref()
            .filter(|c| !c.trim().is_empty())
            .ok_or_else(|| Error::Argument(format!("task `{}` needs a caption", task.sample_id)))
    };
    let (label, prompt, response, provenance, generation) = match task.mode {
        CotmMode::Captioned => {
            let label = task.label.ok_or_else(|| {
                Error::Argument(format!("task `{}` needs a label", task.sample_id))
            })?;
            let g = generate_cot(need_caption()?, mfg, label, client)?;
            (label, image_question(mfg), g.text, Provenance::Generated, g.info)
        }
        CotmMode::Checklist => {
            let text = build_checklist(mfg, task.coarse_label.as_deref(), &opts.synonyms)?;
            let label = if text.ends_with(verdict_line(Label::Abnormal)) {
                Label::Abnormal
            } else {
                Label::Normal
            };
            let info = GenerationInfo {
                client: "checklist".into(),
                prompt_version: CHECKLIST_VERSION.into(),
                prompt_hash: sha256_hex(&[
                    &mfg.render(),
                    task.coarse_label.as_deref().unwrap_or(""),
                ]),
            };
            (label, image_question(mfg), text, Provenance::Generated, info)
        }
        CotmMode::TextOnly => {
            let caption = need_caption()?;
            let plan = task
                .plan
                .clone()
                .unwrap_or_else(|| EditPlan::sample(caption, task_seed(opts.seed, &task.sample_id)));
            let (augmented, label) = augment_caption(caption, &plan)?;
            let g = generate_cot(&augmented, mfg, label, client)?;
            (label, text_question(&augmented, mfg), g.text, Provenance::Augmented, g.info)
        }
    };
    Ok(InstructionRecord {
        id: format!("{}:{}", task.sample_id, Task::CotM.as_str()),
        sample_id: task.sample_id.clone(),
        product_class: task.product_class.clone(),
        label,
        task: Task::CotM,
        prompt,
        response,
        image_refs: match task.mode {
            CotmMode::TextOnly => Vec::new(),
            _ => task.image.iter().cloned().collect(),
        },
        roi_manifest_ref: None,
        provenance,
        generation: Some(generation),
        flags: BTreeSet::new(),
    })
}

/// Runs every task with at most `in_flight` concurrent generations and
/// returns records sorted by id.
pub fn run_cotm(
    tasks: &[CotmTask],
    store: &MfgStore,
    client: &dyn GenClient,
    opts: &CotmOptions,
) -> Result<Vec<InstructionRecord>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<InstructionRecord>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let workers = opts.in_flight.clamp(1, tasks.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let result = run_task(&tasks[i], store, client, opts);
                slots.lock().expect("no worker panicked")[i] = Some(result);
            });
        }
    });
    let mut records = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Integrity(format!("duplicate task sample_id `{}`", w[0].sample_id)));
    }
    Ok(records)
}
