//! Story text to diffusion prompts: scene splitting, describe → summarize →
//! facial descriptors → magic words → style, with a pluggable LLM backend.
//!
//! The fallback backend is a set of deterministic string rules so that the
//! whole story→prompts step is a pure function and can be golden-tested.

use std::io;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textcond::{edit_prompt, PLACEHOLDER};

pub const DESCRIBE_INSTRUCTION: &str =
    "Prompts to generate painting that best describes each scene of a story.";
pub const SUMMARIZE_INSTRUCTION: &str = "Summarize each noun phrase.";
pub const DESCRIPTOR_INSTRUCTION: &str = "If the main subject of the prompt is categorized as a human, add facial descriptions on the subject such as 'symmetrical face', 'emerald eyes'.";

pub const DEFAULT_MAGIC_WORDS: [&str; 2] = ["highly detailed", "insanely intricate"];
pub const DEFAULT_STYLE: &str = "illustrated by Quentin Blake";
pub const FALLBACK_DESCRIPTORS: [&str; 2] = ["symmetrical face", "beautiful eyes"];
pub const API_KEY_ENV: &str = "STORYBOOK_LLM_API_KEY";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("story text is empty")]
    EmptyStory,
    #[error("scene {0} is empty")]
    EmptyScene(usize),
    #[error("sentences per scene must be at least 1")]
    BadGrouping,
    #[error("temperature must be non-negative, got {0}")]
    BadTemperature(f32),
    #[error("remote backend has no endpoint configured")]
    NoEndpoint,
    #[error("unsupported instruction {0:?}")]
    UnsupportedInstruction(String),
    #[error("LLM request failed: {0}")]
    Network(String),
    #[error("LLM request timed out after {0:?}")]
    Timeout(Duration),
    #[error("LLM endpoint answered HTTP {0}")]
    Status(u16),
    #[error("LLM response does not match the schema: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("prompt records: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub index: usize,
    pub text: String,
    pub main_subject: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub title: String,
    pub raw_text: String,
    pub scenes: Vec<Scene>,
}

impl Story {
    /// `main_subject` is attached to every scene that mentions it.
    pub fn parse(
        title: &str,
        raw_text: &str,
        per_scene: usize,
        main_subject: Option<&str>,
    ) -> Result<Self, PromptError> {
        let mut scenes = split_scenes(raw_text, per_scene)?;
        if let Some(subject) = main_subject {
            for s in &mut scenes {
                if mentions(&s.text, subject) {
                    s.main_subject = Some(subject.to_string());
                }
            }
        }
        Ok(Self {
            title: title.to_string(),
            raw_text: raw_text.to_string(),
            scenes,
        })
    }
}

fn mentions(text: &str, word: &str) -> bool {
    let w = word.to_lowercase();
    words(text).any(|t| t.to_lowercase() == w)
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '*'))
        .filter(|t| !t.is_empty())
}

/// Sentences end at `.`, `!` or `?` (plus any closing quotes) followed by
/// whitespace or the end of the text.
fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len()
                && matches!(chars[j].1, '.' | '!' | '?' | '"' | '\'' | '\u{201d}' | ')')
            {
                j += 1;
            }
            if j == chars.len() || chars[j].1.is_whitespace() {
                let end = chars.get(j).map_or(text.len(), |&(b, _)| b);
                out.push(&text[start..end]);
                start = end;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    out.push(&text[start..]);
    out.into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn split_scenes(raw_text: &str, per_scene: usize) -> Result<Vec<Scene>, PromptError> {
    if per_scene == 0 {
        return Err(PromptError::BadGrouping);
    }
    let sents = sentences(raw_text);
    if sents.is_empty() {
        return Err(PromptError::EmptyStory);
    }
    Ok(sents
        .chunks(per_scene)
        .enumerate()
        .map(|(index, group)| Scene {
            index,
            text: group.join(" "),
            main_subject: None,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmBackend {
    pub kind: BackendKind,
    pub endpoint: String,
    pub temperature: f32,
    pub top_p: f32,
    pub timeout_ms: u64,
    /// Cap on concurrent remote requests.
    pub max_in_flight: usize,
}

impl Default for LlmBackend {
    fn default() -> Self {
        Self {
            kind: BackendKind::Fallback,
            endpoint: String::new(),
            temperature: 0.5,
            top_p: 1.0,
            timeout_ms: 30_000,
            max_in_flight: 4,
        }
    }
}

impl LlmBackend {
    pub fn fallback() -> Self {
        Self::default()
    }

    pub fn remote(endpoint: &str) -> Self {
        Self {
            kind: BackendKind::Remote,
            endpoint: endpoint.to_string(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if !(self.temperature >= 0.0) {
            return Err(PromptError::BadTemperature(self.temperature));
        }
        if self.kind == BackendKind::Remote && self.endpoint.is_empty() {
            return Err(PromptError::NoEndpoint);
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    instruction: &'a str,
    input: &'a str,
    temperature: f32,
    top_p: f32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    completion: String,
}

pub fn llm_complete(
    backend: &LlmBackend,
    instruction: &str,
    input: &str,
) -> Result<String, PromptError> {
    backend.validate()?;
    match backend.kind {
        BackendKind::Fallback => match instruction {
            DESCRIBE_INSTRUCTION => Ok(fallback_describe(input)),
            SUMMARIZE_INSTRUCTION => Ok(fallback_summarize(input)),
            DESCRIPTOR_INSTRUCTION => Ok(append_phrases(input, &FALLBACK_DESCRIPTORS)),
            other => Err(PromptError::UnsupportedInstruction(other.to_string())),
        },
        BackendKind::Remote => remote_complete(backend, instruction, input),
    }
}

fn remote_complete(
    backend: &LlmBackend,
    instruction: &str,
    input: &str,
) -> Result<String, PromptError> {
    let timeout = Duration::from_millis(backend.timeout_ms);
    let agent = ureq::AgentBuilder::new().timeout(timeout).build();
    let mut req = agent.post(&backend.endpoint);
    if let Ok(key) = std::env::var(API_KEY_ENV) {
        req = req.set("Authorization", &format!("Bearer {key}"));
    }
    let body = CompletionRequest {
        instruction,
        input,
        temperature: backend.temperature,
        top_p: backend.top_p,
    };
    let resp = match req.send_json(&body) {
        Ok(r) => r,
        Err(ureq::Error::Status(code, _)) => return Err(PromptError::Status(code)),
        Err(ureq::Error::Transport(t)) => {
            return Err(if is_timeout(&t) {
                PromptError::Timeout(timeout)
            } else {
                PromptError::Network(t.to_string())
            })
        }
    };
    let text = resp.into_string().map_err(|e| {
        if matches!(
            e.kind(),
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock
        ) {
            PromptError::Timeout(timeout)
        } else {
            PromptError::Network(e.to_string())
        }
    })?;
    let parsed: CompletionResponse =
        serde_json::from_str(&text).map_err(|e| PromptError::Schema(e.to_string()))?;
    Ok(parsed.completion)
}

fn is_timeout(t: &ureq::Transport) -> bool {
    let mut source: Option<&(dyn std::error::Error + 'static)> = std::error::Error::source(t);
    while let Some(e) = source {
        if let Some(io) = e.downcast_ref::<io::Error>() {
            if matches!(
                io.kind(),
                io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock
            ) {
                return true;
            }
        }
        source = e.source();
    }
    false
}

// ---- fallback rules ----------------------------------------------------------

const CAUSATIVES: [&str; 3] = ["made", "makes", "make"];
const ABSTRACT_HEADS: [&str; 6] = ["idea", "thought", "sight", "sound", "memory", "story"];
const COLLECTIVES: [&str; 10] = [
    "herd", "group", "flock", "crowd", "pack", "bunch", "pair", "family", "swarm", "field",
];
const LINKING: [&str; 4] = ["was", "were", "is", "are"];
const PREPOSITIONS: [&str; 9] = [
    "in", "on", "at", "of", "from", "under", "over", "near", "into",
];

/// Irregular past tenses seen in children's stories, mapped to their stems.
const IRREGULAR: [(&str, &str); 16] = [
    ("saw", "see"),
    ("ran", "run"),
    ("flew", "fly"),
    ("sat", "sit"),
    ("went", "go"),
    ("came", "come"),
    ("found", "find"),
    ("met", "meet"),
    ("slept", "sleep"),
    ("stood", "stand"),
    ("sang", "sing"),
    ("drew", "draw"),
    ("wept", "weep"),
    ("rode", "ride"),
    ("left", "leave"),
    ("fell", "fall"),
];

fn strip_terminal(s: &str) -> &str {
    s.trim()
        .trim_end_matches(['.', '!', '?', '"', '\'', '\u{201d}'])
        .trim_end()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn progressive(stem: &str) -> String {
    let double = ["run", "sit", "swim", "hop", "get"];
    if double.contains(&stem) {
        let last = stem.chars().last().expect("non-empty stem");
        return format!("{stem}{last}ing");
    }
    if stem.ends_with("ie") {
        return format!("{}ying", &stem[..stem.len() - 2]);
    }
    if stem.ends_with('e') && !stem.ends_with("ee") && stem.len() > 2 {
        return format!("{}ing", &stem[..stem.len() - 1]);
    }
    format!("{stem}ing")
}

/// Stem of a past-tense token, if it looks like one.
fn past_stem(tok: &str) -> Option<String> {
    let lower = tok.to_lowercase();
    if let Some(&(_, stem)) = IRREGULAR.iter().find(|(p, _)| *p == lower) {
        return Some(stem.to_string());
    }
    let base = lower.strip_suffix("ed")?;
    if base.len() < 2 {
        return None;
    }
    if let Some(b) = base.strip_suffix('i') {
        return Some(format!("{b}y"));
    }
    let bytes = base.as_bytes();
    let n = bytes.len();
    if n >= 2 && bytes[n - 1] == bytes[n - 2] && !matches!(bytes[n - 1], b'l' | b's' | b'e') {
        return Some(base[..n - 1].to_string());
    }
    // "smiled" → "smile": restore a silent e after consonant-vowel-consonant
    if n >= 3
        && is_cvc(&bytes[n - 3..])
        && !matches!(bytes[n - 1], b'w' | b'x' | b'y' | b'r' | b'n' | b'k' | b't')
    {
        return Some(format!("{base}e"));
    }
    Some(base.to_string())
}

fn is_cvc(b: &[u8]) -> bool {
    let vowel = |c: u8| b"aeiou".contains(&c);
    !vowel(b[0]) && vowel(b[1]) && !vowel(b[2])
}

fn indefinite(np: &str) -> String {
    let rest = np
        .strip_prefix("the ")
        .or_else(|| np.strip_prefix("The "))
        .unwrap_or(np);
    if rest.len() == np.len() {
        return np.to_string();
    }
    let article = if rest.starts_with(|c: char| "aeiouAEIOU".contains(c)) {
        "an"
    } else {
        "a"
    };
    format!("{article} {rest}")
}

/// "The idea of the herd of elephants made the little prince laugh" is read as
/// cause + causative verb + subject + bare verb.
fn describe_causative(toks: &[&str]) -> Option<String> {
    let k = toks
        .iter()
        .position(|t| CAUSATIVES.contains(&t.to_lowercase().as_str()))?;
    if k == 0 || k + 2 >= toks.len() {
        return None;
    }
    let mut cause = &toks[..k];
    if cause.len() > 3
        && ABSTRACT_HEADS.contains(&cause[1].to_lowercase().as_str())
        && cause[2] == "of"
    {
        cause = &cause[3..];
    }
    let after = &toks[k + 1..];
    let verb = after.len() - 1;
    let subject = after[..verb].join(" ");
    Some(format!(
        "{} {}, surrounded by {}",
        capitalize(&subject),
        progressive(&after[verb].to_lowercase()),
        indefinite(&cause.join(" "))
    ))
}

/// Subject + verb phrase, with the verb in progressive form.
pub fn fallback_describe(scene: &str) -> String {
    let body = strip_terminal(scene);
    // a fronted adverbial ("In the forest, …") moves behind the clause
    let fronted = body.split_once(',').filter(|(head, rest)| {
        let first = head.split_whitespace().next().unwrap_or("").to_lowercase();
        PREPOSITIONS.contains(&first.as_str()) && !rest.trim().is_empty()
    });
    let moved;
    let body = match fronted {
        Some((head, rest)) => {
            let mut h = head.trim().to_string();
            h[..1].make_ascii_lowercase();
            moved = format!("{} {h}", rest.trim());
            moved.as_str()
        }
        None => body,
    };
    let toks: Vec<&str> = body.split_whitespace().collect();
    if let Some(d) = describe_causative(&toks) {
        return d;
    }
    for (i, t) in toks.iter().enumerate().skip(1) {
        let lower = t.to_lowercase();
        if LINKING.contains(&lower.as_str()) {
            let mut out = toks[..i].join(" ");
            if i + 1 < toks.len() {
                out.push_str(", ");
                out.push_str(&toks[i + 1..].join(" "));
            }
            return capitalize(&out);
        }
        if let Some(stem) = past_stem(t) {
            let mut parts = toks[..i].to_vec();
            let verb = progressive(&stem);
            parts.push(&verb);
            parts.extend_from_slice(&toks[i + 1..]);
            return capitalize(&parts.join(" "));
        }
    }
    capitalize(body)
}

/// Head noun of a modifier phrase: skip a collective ("a herd of X" → X),
/// then take the last word before the first preposition.
fn head_noun(phrase: &str) -> Option<String> {
    let phrase = phrase.trim();
    let phrase = phrase.split_once(" by ").map_or(phrase, |(_, r)| r);
    let phrase = phrase.strip_prefix("with ").unwrap_or(phrase);
    let toks: Vec<&str> = phrase.split_whitespace().collect();
    let mut start = 0;
    while start < toks.len()
        && matches!(
            toks[start].to_lowercase().as_str(),
            "a" | "an" | "the" | "some" | "many"
        )
    {
        start += 1;
    }
    if start + 2 < toks.len()
        && COLLECTIVES.contains(&toks[start].to_lowercase().as_str())
        && toks[start + 1] == "of"
    {
        start += 2;
    }
    let rest = &toks[start..];
    let end = rest
        .iter()
        .position(|t| PREPOSITIONS.contains(&t.to_lowercase().as_str()))
        .unwrap_or(rest.len());
    rest[..end]
        .last()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
}

/// Main clause kept, each trailing modifier reduced to "with <head noun>".
pub fn fallback_summarize(description: &str) -> String {
    let body = strip_terminal(description);
    let mut parts = body.split(',');
    let main = parts.next().unwrap_or("").trim().to_string();
    let mut out = main.clone();
    for m in parts {
        if let Some(h) = head_noun(m) {
            if !h.is_empty() && !mentions(&out, &h) {
                out.push_str(" with ");
                out.push_str(&h);
            }
        }
    }
    out
}

fn normalize_phrase(p: &str) -> String {
    p.trim().to_lowercase()
}

/// Comma-joins `extras` onto `prompt`, skipping phrases already present.
pub fn append_phrases<S: AsRef<str>>(prompt: &str, extras: &[S]) -> String {
    let mut present: Vec<String> = prompt.split(',').map(normalize_phrase).collect();
    let mut out = prompt.trim().to_string();
    for e in extras {
        let e = e.as_ref().trim();
        if e.is_empty() || present.contains(&normalize_phrase(e)) {
            continue;
        }
        if out.is_empty() {
            out.push_str(e);
        } else {
            out.push_str(", ");
            out.push_str(e);
        }
        present.push(normalize_phrase(e));
    }
    out
}

pub fn describe_scene(backend: &LlmBackend, scene: &Scene) -> Result<String, PromptError> {
    if scene.text.trim().is_empty() {
        return Err(PromptError::EmptyScene(scene.index));
    }
    llm_complete(backend, DESCRIBE_INSTRUCTION, &scene.text)
}

pub fn summarize(backend: &LlmBackend, description: &str) -> Result<String, PromptError> {
    llm_complete(backend, SUMMARIZE_INSTRUCTION, description)
}

pub fn add_facial_descriptors(
    backend: &LlmBackend,
    summary: &str,
    is_person: bool,
) -> Result<String, PromptError> {
    if !is_person {
        return Ok(summary.to_string());
    }
    llm_complete(backend, DESCRIPTOR_INSTRUCTION, summary)
}

pub fn apply_style<S: AsRef<str>>(prompt: &str, magic_words: &[S], style_modifier: &str) -> String {
    let with_magic = append_phrases(prompt, magic_words);
    append_phrases(&with_magic, &[style_modifier])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub sentences_per_scene: usize,
    pub magic_words: Vec<String>,
    pub style_modifier: String,
    /// Character replaced by the placeholder in the edited prompt.
    pub main_subject: String,
    /// Words marking a scene's subject as a person for the fallback backend.
    pub person_words: Vec<String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            sentences_per_scene: 1,
            magic_words: DEFAULT_MAGIC_WORDS.iter().map(|s| s.to_string()).collect(),
            style_modifier: DEFAULT_STYLE.to_string(),
            main_subject: "prince".into(),
            person_words: [
                "prince", "princess", "king", "queen", "pilot", "boy", "girl", "man", "woman",
                "child", "person",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub scene: usize,
    pub description: String,
    pub summary: String,
    pub with_descriptors: String,
    pub style_modifier: String,
    pub final_prompt: String,
    /// `None` when the scene never names the main subject.
    pub edited_prompt: Option<String>,
}

/// The fallback decides from the lexicon; a remote LLM is always asked and
/// applies the conditional instruction itself.
fn is_person(backend: &LlmBackend, scene: &Scene, cfg: &PromptConfig) -> bool {
    match backend.kind {
        BackendKind::Remote => true,
        BackendKind::Fallback => {
            scene.main_subject.is_some()
                || cfg.person_words.iter().any(|w| mentions(&scene.text, w))
        }
    }
}

pub fn scene_prompt(
    backend: &LlmBackend,
    scene: &Scene,
    cfg: &PromptConfig,
) -> Result<PromptRecord, PromptError> {
    let description = describe_scene(backend, scene)?;
    let summary = summarize(backend, &description)?;
    let with_descriptors =
        add_facial_descriptors(backend, &summary, is_person(backend, scene, cfg))?;
    let final_prompt = apply_style(&with_descriptors, &cfg.magic_words, &cfg.style_modifier);
    let edited_prompt = edit_prompt(&final_prompt, &cfg.main_subject, PLACEHOLDER).ok();
    Ok(PromptRecord {
        scene: scene.index,
        description,
        summary,
        with_descriptors,
        style_modifier: cfg.style_modifier.clone(),
        final_prompt,
        edited_prompt,
    })
}

/// Prompts for every scene, in scene order. Remote calls fan out over at most
/// `max_in_flight` threads.
pub fn story_prompts(
    backend: &LlmBackend,
    story: &Story,
    cfg: &PromptConfig,
) -> Result<Vec<PromptRecord>, PromptError> {
    backend.validate()?;
    if backend.kind == BackendKind::Fallback || backend.max_in_flight <= 1 {
        return story
            .scenes
            .iter()
            .map(|s| scene_prompt(backend, s, cfg))
            .collect();
    }
    let mut out = Vec::with_capacity(story.scenes.len());
    for chunk in story.scenes.chunks(backend.max_in_flight) {
        let results: Vec<Result<PromptRecord, PromptError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|s| scope.spawn(move || scene_prompt(backend, s, cfg)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("prompt worker panicked"))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

pub fn records_to_json(records: &[PromptRecord]) -> String {
    let mut s = serde_json::to_string_pretty(records).expect("records serialize");
    s.push('\n');
    s
}

pub fn save_records(records: &[PromptRecord], path: &Path) -> Result<(), PromptError> {
    std::fs::write(path, records_to_json(records)).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_records(path: &Path) -> Result<Vec<PromptRecord>, PromptError> {
    let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
