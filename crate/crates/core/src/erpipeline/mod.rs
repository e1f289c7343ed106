//! Entity-representation construction.
//!
//! Static representations come from the first two paragraphs of a knowledge
//! base page; dynamic ones from a chat model, with a second round when the
//! first answer is a refusal. Every build is cached per (qid, mode, pipeline
//! version) so interrupted runs resume without repeating client calls.

pub mod cache;
pub mod clients;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::datamodel::{EntityRecord, ErSource};
use crate::encoders::tokenize::token_spans;
use crate::error::{Error, Result};
use crate::exec::Exec;

pub use cache::{ErCache, ErCacheEntry, RoundRecord};
pub use clients::{ChatMessage, ClientError, KbClient, LlmClient, Role};

pub const DEFAULT_MAX_TOKENS: usize = 256;
/// Bumped whenever prompts or cleaning change; part of every cache key.
pub const PIPELINE_VERSION: &str = "er-1";
pub const SYSTEM_PROMPT: &str = "You are a helpful assistant designed to give a comprehensive introduction about people. Who is this one?";
pub const FOLLOW_UP_PROMPT: &str = "Please provide more detailed information.";
pub const DEFAULT_REFUSAL_PATTERNS: &str = include_str!("../../data/refusal_patterns.txt");

fn reference_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[[0-9]+\]").expect("valid regex"))
}

/// Strips `[n]` reference markers and control characters, collapses
/// whitespace, trims, and keeps at most `max_tokens` whole tokens.
pub fn clean_text(raw: &str, max_tokens: usize) -> String {
    let mut text: String = raw
        .chars()
        .filter_map(|c| {
            if c.is_whitespace() {
                Some(' ')
            } else if c.is_control() {
                None
            } else {
                Some(c)
            }
        })
        .collect();
    // Removing a marker can splice a new one together, e.g. "[[1]2]".
    loop {
        let next = reference_marker().replace_all(&text, "").into_owned();
        if next == text {
            break;
        }
        text = next;
    }
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let spans = token_spans(&collapsed);
    if spans.len() <= max_tokens {
        return collapsed;
    }
    match max_tokens.checked_sub(1).map(|i| spans[i].1) {
        Some(end) => collapsed[..end].trim_end().to_string(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErMode {
    Static,
    Dynamic,
}

impl ErMode {
    pub fn name(self) -> &'static str {
        match self {
            ErMode::Static => "static",
            ErMode::Dynamic => "dynamic",
        }
    }

    pub fn source(self) -> ErSource {
        match self {
            ErMode::Static => ErSource::Static,
            ErMode::Dynamic => ErSource::Dynamic,
        }
    }
}

impl std::str::FromStr for ErMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(ErMode::Static),
            "dynamic" => Ok(ErMode::Dynamic),
            other => Err(Error::InvalidInput(format!("unknown mode `{other}` (expected static or dynamic)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// The knowledge base has no page for the entity.
    NotFound,
    /// Nothing was left after cleaning.
    Empty,
    /// The chat model still refused after the follow-up round.
    Refused,
}

impl DropReason {
    pub fn name(self) -> &'static str {
        match self {
            DropReason::NotFound => "not_found",
            DropReason::Empty => "empty",
            DropReason::Refused => "refused",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ErOutcome {
    Built { er_text: String },
    Dropped { reason: DropReason },
}

impl ErOutcome {
    pub fn text(&self) -> Option<&str> {
        match self {
            ErOutcome::Built { er_text } => Some(er_text),
            ErOutcome::Dropped { .. } => None,
        }
    }
}

/// Casefolded substring matcher for refusal answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefusalDetector {
    patterns: Vec<String>,
}

impl RefusalDetector {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self> {
        let patterns: Vec<String> = patterns.iter().map(|p| p.as_ref().trim().to_lowercase()).filter(|p| !p.is_empty()).collect();
        if patterns.is_empty() {
            return Err(Error::Config("refusal pattern list is empty".into()));
        }
        Ok(Self { patterns })
    }

    /// One pattern per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim_start().starts_with('#')).collect();
        Self::new(&lines)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn matches(&self, response: &str) -> bool {
        let folded = response.to_lowercase();
        self.patterns.iter().any(|p| folded.contains(p.as_str()))
    }
}

impl Default for RefusalDetector {
    fn default() -> Self {
        Self::parse(DEFAULT_REFUSAL_PATTERNS).expect("bundled refusal patterns are non-empty")
    }
}

/// Result of one build together with the exchanges that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildTrace {
    pub outcome: ErOutcome,
    pub rounds: Vec<RoundRecord>,
}

/// Cleaned first two paragraphs of the entity's page.
pub fn build_static_er(entity: &EntityRecord, kb: &dyn KbClient, max_tokens: usize) -> Result<BuildTrace, ClientError> {
    let extract = kb.fetch_extract(&entity.name)?;
    let round = RoundRecord { request: vec![ChatMessage::user(entity.name.clone())], response: extract.as_ref().map(|p| p.join("\n\n")) };
    let outcome = match extract {
        None => ErOutcome::Dropped { reason: DropReason::NotFound },
        Some(paragraphs) => {
            let joined = paragraphs.iter().take(2).map(String::as_str).collect::<Vec<_>>().join(" ");
            let er_text = clean_text(&joined, max_tokens);
            if er_text.is_empty() {
                ErOutcome::Dropped { reason: DropReason::Empty }
            } else {
                ErOutcome::Built { er_text }
            }
        }
    };
    Ok(BuildTrace { outcome, rounds: vec![round] })
}

/// Prompt settings for the dynamic builder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DynamicPrompts {
    pub system: String,
    pub follow_up: String,
}

impl Default for DynamicPrompts {
    fn default() -> Self {
        Self { system: SYSTEM_PROMPT.to_string(), follow_up: FOLLOW_UP_PROMPT.to_string() }
    }
}

/// Asks the chat model for an introduction, following up once with the static
/// description when the first answer is a refusal.
pub fn build_dynamic_er(
    entity: &EntityRecord,
    llm: &dyn LlmClient,
    kb: &dyn KbClient,
    detector: &RefusalDetector,
    prompts: &DynamicPrompts,
    max_tokens: usize,
) -> Result<BuildTrace, ClientError> {
    let mut messages = vec![ChatMessage::system(prompts.system.clone()), ChatMessage::user(entity.name.clone())];
    let first = llm.chat(&messages)?;
    let mut rounds = vec![RoundRecord { request: messages.clone(), response: Some(first.clone()) }];
    let mut answer = first;
    if detector.matches(&answer) {
        let context = build_static_er(entity, kb, max_tokens)?;
        let follow_up = match context.outcome.text() {
            Some(desc) => format!("{desc} {}", prompts.follow_up),
            None => prompts.follow_up.clone(),
        };
        messages.push(ChatMessage::assistant(answer));
        messages.push(ChatMessage::user(follow_up));
        let second = llm.chat(&messages)?;
        rounds.push(RoundRecord { request: messages, response: Some(second.clone()) });
        answer = second;
        if detector.matches(&answer) {
            return Ok(BuildTrace { outcome: ErOutcome::Dropped { reason: DropReason::Refused }, rounds });
        }
    }
    let er_text = clean_text(&answer, max_tokens);
    let outcome = if er_text.is_empty() { ErOutcome::Dropped { reason: DropReason::Empty } } else { ErOutcome::Built { er_text } };
    Ok(BuildTrace { outcome, rounds })
}

/// Per-entity result of an enhancement run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhanceRecord {
    pub qid: String,
    pub outcome: ErOutcome,
    /// Number of client rounds recorded for this entity.
    pub rounds: usize,
    /// Served from the cache without client calls.
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhanceRun {
    pub mode: ErMode,
    pub records: Vec<EnhanceRecord>,
}

impl EnhanceRun {
    /// Entities with their new representation; dropped entities are omitted.
    pub fn apply(&self, entities: &[EntityRecord]) -> Vec<EntityRecord> {
        let by_qid: BTreeMap<&str, &EnhanceRecord> = self.records.iter().map(|r| (r.qid.as_str(), r)).collect();
        entities
            .iter()
            .filter_map(|e| {
                let text = by_qid.get(e.qid.as_str())?.outcome.text()?;
                Some(EntityRecord { er_text: text.to_string(), er_source: self.mode.source(), ..e.clone() })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancementSummary {
    pub mode: ErMode,
    pub total: usize,
    pub built: usize,
    pub dropped: usize,
    /// Entities that needed the follow-up round.
    pub round2: usize,
    pub cached: usize,
    pub drop_reasons: BTreeMap<String, usize>,
}

pub fn report_enhancement(run: &EnhanceRun) -> EnhancementSummary {
    let mut s = EnhancementSummary {
        mode: run.mode,
        total: run.records.len(),
        built: 0,
        dropped: 0,
        round2: 0,
        cached: 0,
        drop_reasons: BTreeMap::new(),
    };
    for r in &run.records {
        match &r.outcome {
            ErOutcome::Built { .. } => s.built += 1,
            ErOutcome::Dropped { reason } => {
                s.dropped += 1;
                *s.drop_reasons.entry(reason.name().to_string()).or_default() += 1;
            }
        }
        if run.mode == ErMode::Dynamic && r.rounds >= 2 {
            s.round2 += 1;
        }
        if r.cached {
            s.cached += 1;
        }
    }
    s
}

/// Runs one mode over a set of entities, consulting the cache first.
pub struct ErPipeline<'a> {
    pub kb: &'a dyn KbClient,
    pub llm: Option<&'a dyn LlmClient>,
    pub detector: RefusalDetector,
    pub prompts: DynamicPrompts,
    pub cache: Option<ErCache>,
    pub max_tokens: usize,
    /// Upper bound on concurrent entity builds.
    pub concurrency: usize,
}

impl<'a> ErPipeline<'a> {
    pub fn new(kb: &'a dyn KbClient) -> Self {
        Self {
            kb,
            llm: None,
            detector: RefusalDetector::default(),
            prompts: DynamicPrompts::default(),
            cache: None,
            max_tokens: DEFAULT_MAX_TOKENS,
            concurrency: 4,
        }
    }

    pub fn build_one(&self, entity: &EntityRecord, mode: ErMode) -> Result<EnhanceRecord> {
        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.get(&entity.qid, mode)? {
                return Ok(EnhanceRecord { qid: entity.qid.clone(), rounds: entry.rounds.len(), outcome: entry.outcome, cached: true });
            }
        }
        let trace = match mode {
            ErMode::Static => build_static_er(entity, self.kb, self.max_tokens)?,
            ErMode::Dynamic => {
                let llm = self.llm.ok_or_else(|| Error::Config("dynamic mode needs a chat client".into()))?;
                build_dynamic_er(entity, llm, self.kb, &self.detector, &self.prompts, self.max_tokens)?
            }
        };
        if let Some(cache) = &self.cache {
            cache.put(&ErCacheEntry {
                qid: entity.qid.clone(),
                mode,
                version: PIPELINE_VERSION.to_string(),
                rounds: trace.rounds.clone(),
                outcome: trace.outcome.clone(),
            })?;
        }
        Ok(EnhanceRecord { qid: entity.qid.clone(), rounds: trace.rounds.len(), outcome: trace.outcome, cached: false })
    }

    pub fn run(&self, entities: &[EntityRecord], mode: ErMode, exec: Exec) -> Result<EnhanceRun> {
        let build = || exec.try_map(entities, |e| self.build_one(e, mode));
        #[cfg(feature = "parallel")]
        let records = if exec.is_parallel() {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.concurrency.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(build)?
        } else {
            build()?
        };
        #[cfg(not(feature = "parallel"))]
        let records = build()?;
        Ok(EnhanceRun { mode, records })
    }
}

#[cfg(test)]
mod tests {
    use super::clients::{FixtureKbClient, FixtureLlmClient, RecordedChat};
    use super::*;
    use proptest::prelude::*;

    fn entity(qid: &str, name: &str) -> EntityRecord {
        EntityRecord { qid: qid.into(), name: name.into(), type_tag: None, er_text: String::new(), er_source: ErSource::Property }
    }

    #[test]
    fn clean_text_rule_example() {
        assert_eq!(clean_text("Trump[1]  is  a\tpolitician", 256), "Trump is a politician");
        assert_eq!(clean_text("a[[1]2]b\u{7}c [x]", 256), "abc [x]");
        assert_eq!(clean_text("  already clean  ", 256), "already clean");
    }

    #[test]
    fn clean_text_truncates_whole_tokens() {
        let long: String = (0..1000).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let out = clean_text(&long, 256);
        assert_eq!(crate::encoders::count_tokens(&out), 256);
        assert!(long.starts_with(&out));
        assert!(out.ends_with("w255"));
        assert_eq!(clean_text("U.S. politics", 2), "U.");
        assert_eq!(clean_text("anything", 0), "");
    }

    proptest! {
        #[test]
        fn clean_text_is_idempotent(raw in "[a-z0-9\\[\\] \t\n\u{1}.,]{0,80}", max in 0usize..20) {
            let once = clean_text(&raw, max);
            prop_assert_eq!(clean_text(&once, max), once.clone());
            prop_assert!(crate::encoders::count_tokens(&once) <= max);
        }
    }

    #[test]
    fn detector_is_casefolded() {
        let d = RefusalDetector::default();
        assert!(d.matches("Without more specific information, it is difficult to say."));
        assert!(!d.matches("Bruce Golding is a Jamaican politician."));
        assert!(RefusalDetector::new::<&str>(&[]).is_err());
        assert!(RefusalDetector::parse("# only a comment\n\n").is_err());
    }

    fn kb() -> FixtureKbClient {
        let mut pages = BTreeMap::new();
        pages.insert("Enno Hagenah".into(), Some("Enno Hagenah is a German politician.[2]\n\nHe was born in 1953.\n\nThird.".into()));
        pages.insert("Nobody".into(), None);
        FixtureKbClient::new(pages)
    }

    #[test]
    fn static_takes_two_paragraphs_or_drops() {
        let kb = kb();
        let t = build_static_er(&entity("Q1", "Enno Hagenah"), &kb, 256).unwrap();
        assert_eq!(t.outcome.text(), Some("Enno Hagenah is a German politician. He was born in 1953."));
        let t = build_static_er(&entity("Q2", "Nobody"), &kb, 256).unwrap();
        assert_eq!(t.outcome, ErOutcome::Dropped { reason: DropReason::NotFound });
    }

    fn chat(name: &str, extra: &[ChatMessage], response: &str) -> RecordedChat {
        let mut messages = vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(name)];
        messages.extend_from_slice(extra);
        RecordedChat { messages, response: response.into() }
    }

    #[test]
    fn dynamic_follows_up_only_on_refusal() {
        let kb = kb();
        let refusal = "Without more specific information, it is difficult to identify this person.";
        let llm = FixtureLlmClient::new(vec![
            chat("Bruce Golding", &[], "Bruce Golding is a Jamaican politician."),
            chat("Enno Hagenah", &[], refusal),
            chat(
                "Enno Hagenah",
                &[
                    ChatMessage::assistant(refusal),
                    ChatMessage::user(
                        "Enno Hagenah is a German politician. He was born in 1953. Please provide more detailed information.",
                    ),
                ],
                "Enno Hagenah is a German politician of the Greens.",
            ),
        ]);
        let d = RefusalDetector::default();
        let p = DynamicPrompts::default();
        let t = build_dynamic_er(&entity("Q0", "Bruce Golding"), &llm, &kb, &d, &p, 256).unwrap();
        assert_eq!(t.rounds.len(), 1);
        assert_eq!(t.outcome.text(), Some("Bruce Golding is a Jamaican politician."));
        let t = build_dynamic_er(&entity("Q1", "Enno Hagenah"), &llm, &kb, &d, &p, 256).unwrap();
        assert_eq!(t.rounds.len(), 2);
        assert_eq!(t.outcome.text(), Some("Enno Hagenah is a German politician of the Greens."));
    }

    #[test]
    fn cache_hit_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let kb = kb();
        let mut pipeline = ErPipeline::new(&kb);
        pipeline.cache = Some(ErCache::new(dir.path()).unwrap());
        let es = vec![entity("Q1", "Enno Hagenah"), entity("Q2", "Nobody")];
        let first = pipeline.run(&es, ErMode::Static, Exec::Parallel).unwrap();
        assert_eq!(kb.calls(), 2);
        let second = pipeline.run(&es, ErMode::Static, Exec::Sequential).unwrap();
        assert_eq!(kb.calls(), 2);
        assert!(second.records.iter().all(|r| r.cached));
        for (a, b) in first.records.iter().zip(&second.records) {
            assert_eq!(a.outcome, b.outcome);
        }
        let summary = report_enhancement(&second);
        assert_eq!((summary.built, summary.dropped, summary.cached), (1, 1, 2));
        assert_eq!(summary.drop_reasons["not_found"], 1);
        let applied = first.apply(&es);
        assert_eq!(applied.len(), 1);
        assert_eq!(applied[0].er_source, ErSource::Static);
    }
}
