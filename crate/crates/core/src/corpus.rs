//! Event-sequence data model, its JSON-lines serialization, and the
//! normalization rules that turn raw predicate-argument annotations into
//! event tokens.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ParError, Result};

/// Syntactic slot an argument fills relative to its predicate.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Role {
    Subj,
    Dobj,
    /// `prep_<word>`; the word is non-empty and lowercase.
    Prep(String),
}

impl Role {
    /// Rank used for canonical argument order: subj, dobj, then prepositions.
    fn rank(&self) -> u8 {
        match self {
            Role::Subj => 0,
            Role::Dobj => 1,
            Role::Prep(_) => 2,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Subj => f.write_str("subj"),
            Role::Dobj => f.write_str("dobj"),
            Role::Prep(word) => write!(f, "prep_{word}"),
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subj" => Ok(Role::Subj),
            "dobj" => Ok(Role::Dobj),
            _ => match s.strip_prefix("prep_") {
                Some(word)
                    if !word.is_empty()
                        && word == word.to_lowercase()
                        && !word.contains('-') =>
                {
                    Ok(Role::Prep(word.to_string()))
                }
                _ => Err(format!("invalid role {s:?}")),
            },
        }
    }
}

impl TryFrom<String> for Role {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Role> for String {
    fn from(role: Role) -> String {
        role.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArgumentMention {
    pub role: Role,
    pub lemma: String,
    pub entity_id: Option<usize>,
    pub mention_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    #[serde(rename = "pred")]
    pub predicate_lemma: String,
    #[serde(rename = "neg")]
    pub negated: bool,
    pub particle: Option<String>,
    pub args: Vec<ArgumentMention>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub entity_count: usize,
    pub events: Vec<EventRecord>,
}

impl DocumentRecord {
    /// Checks the document-level invariants, returning a description of the
    /// first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut mention_ids = HashSet::new();
        for (ei, event) in self.events.iter().enumerate() {
            if event.predicate_lemma.is_empty() {
                return Err(format!("event {ei}: empty predicate lemma"));
            }
            if event.predicate_lemma != event.predicate_lemma.to_lowercase() {
                return Err(format!("event {ei}: predicate lemma is not lowercase"));
            }
            let mut seen_roles = HashSet::new();
            let mut last_rank = 0;
            for arg in &event.args {
                if arg.lemma.is_empty() {
                    return Err(format!("event {ei}: empty argument lemma"));
                }
                if arg.lemma != arg.lemma.to_lowercase() {
                    return Err(format!("event {ei}: argument lemma {:?} is not lowercase", arg.lemma));
                }
                if !seen_roles.insert(arg.role.clone()) {
                    return Err(format!("event {ei}: duplicate role {}", arg.role));
                }
                if arg.role.rank() < last_rank {
                    return Err(format!("event {ei}: arguments not in canonical role order"));
                }
                last_rank = arg.role.rank();
                if let Some(entity) = arg.entity_id {
                    if entity >= self.entity_count {
                        return Err(format!(
                            "event {ei}: entity_id {entity} >= entity_count {}",
                            self.entity_count
                        ));
                    }
                }
                if !mention_ids.insert(arg.mention_id) {
                    return Err(format!("event {ei}: duplicate mention_id {}", arg.mention_id));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    #[serde(rename = "pred")]
    Predicate,
    #[serde(rename = "arg")]
    Argument,
    #[serde(rename = "target")]
    PlaceholderTarget,
    #[serde(rename = "missing")]
    PlaceholderMissing,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventToken {
    pub surface: String,
    pub kind: TokenKind,
    pub role: Option<Role>,
    pub entity_id: Option<usize>,
    pub mention_id: Option<usize>,
}

pub const TARGET_PREFIX: &str = "TARGET";
pub const MISSING_PREFIX: &str = "MISSING";

impl EventToken {
    pub fn predicate(surface: impl Into<String>) -> Self {
        EventToken {
            surface: surface.into(),
            kind: TokenKind::Predicate,
            role: None,
            entity_id: None,
            mention_id: None,
        }
    }

    pub fn argument(arg: &ArgumentMention) -> Self {
        EventToken {
            surface: format!("{}-{}", arg.lemma, arg.role),
            kind: TokenKind::Argument,
            role: Some(arg.role.clone()),
            entity_id: arg.entity_id,
            mention_id: Some(arg.mention_id),
        }
    }

    pub fn target(role: &Role) -> Self {
        EventToken {
            surface: format!("{TARGET_PREFIX}-{role}"),
            kind: TokenKind::PlaceholderTarget,
            role: Some(role.clone()),
            entity_id: None,
            mention_id: None,
        }
    }

    pub fn missing(role: &Role) -> Self {
        EventToken {
            surface: format!("{MISSING_PREFIX}-{role}"),
            kind: TokenKind::PlaceholderMissing,
            role: Some(role.clone()),
            entity_id: None,
            mention_id: None,
        }
    }

    pub fn is_placeholder(&self) -> bool {
        matches!(
            self.kind,
            TokenKind::PlaceholderTarget | TokenKind::PlaceholderMissing
        )
    }
}

/// Surface form of an event predicate: `not-` marks negation.
pub fn predicate_surface(event: &EventRecord) -> String {
    if event.negated {
        format!("not-{}", event.predicate_lemma)
    } else {
        event.predicate_lemma.clone()
    }
}

/// Predicate token followed by one token per argument, in canonical order.
pub fn event_to_tokens(event: &EventRecord) -> Vec<EventToken> {
    std::iter::once(EventToken::predicate(predicate_surface(event)))
        .chain(event.args.iter().map(EventToken::argument))
        .collect()
}

/// One argument of a raw annotation, labeled with its dependency relation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawArgument {
    /// `subj`/`nsubj`, `nsubjpass`, `dobj`/`obj`, `agent` or `prep_<word>`.
    pub relation: String,
    pub lemma: String,
    pub entity_id: Option<usize>,
    pub mention_id: usize,
}

/// A predicate-argument tuple as produced by an upstream parser.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RawEvent {
    pub predicate: Option<String>,
    pub passive: bool,
    pub negated: bool,
    pub particle: Option<String>,
    pub args: Vec<RawArgument>,
}

/// Lowercases lemmas, folds negation and particles into the predicate and
/// rewrites passive constructions to their active roles.
pub fn normalize_event(raw: &RawEvent, doc_id: &str, event_index: usize) -> Result<EventRecord> {
    let malformed = |message: String| ParError::MalformedEvent {
        doc_id: doc_id.to_string(),
        event_index,
        message,
    };

    let predicate = raw
        .predicate
        .as_deref()
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .ok_or_else(|| malformed("missing predicate lemma".into()))?
        .to_lowercase();
    let predicate_lemma = match raw.particle.as_deref().map(str::trim) {
        Some(particle) if !particle.is_empty() => {
            format!("{predicate}_{}", particle.to_lowercase())
        }
        _ => predicate,
    };

    let mut args = Vec::with_capacity(raw.args.len());
    for arg in &raw.args {
        let relation = arg.relation.to_lowercase();
        let role = match relation.as_str() {
            "subj" | "nsubj" if raw.passive => Role::Dobj,
            "subj" | "nsubj" => Role::Subj,
            "nsubjpass" => Role::Dobj,
            "dobj" | "obj" => Role::Dobj,
            "agent" => Role::Subj,
            "prep_by" if raw.passive => Role::Subj,
            other => other
                .parse::<Role>()
                .map_err(|_| malformed(format!("unknown relation {:?}", arg.relation)))?,
        };
        let lemma = arg.lemma.trim().to_lowercase();
        if lemma.is_empty() {
            return Err(malformed(format!("empty lemma for relation {}", arg.relation)));
        }
        if args.iter().any(|a: &ArgumentMention| a.role == role) {
            return Err(malformed(format!("more than one {role} argument")));
        }
        args.push(ArgumentMention {
            role,
            lemma,
            entity_id: arg.entity_id,
            mention_id: arg.mention_id,
        });
    }
    // stable: prepositions keep their surface order
    args.sort_by_key(|a| a.role.rank());

    Ok(EventRecord {
        predicate_lemma,
        negated: raw.negated,
        particle: raw
            .particle
            .as_deref()
            .map(|p| p.trim().to_lowercase())
            .filter(|p| !p.is_empty()),
        args,
    })
}

/// Streaming reader over a JSON-lines corpus.
pub struct CorpusReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R) -> Self {
        CorpusReader {
            lines: reader.lines(),
            line_no: 0,
        }
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<DocumentRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line_no = self.line_no;
            let line = match line {
                Ok(line) => line,
                Err(e) => {
                    return Some(Err(ParError::Parse {
                        line: line_no,
                        message: e.to_string(),
                    }))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let doc: DocumentRecord = match serde_json::from_str(&line) {
                Ok(doc) => doc,
                Err(e) => {
                    return Some(Err(ParError::Parse {
                        line: line_no,
                        message: e.to_string(),
                    }))
                }
            };
            return Some(match doc.validate() {
                Ok(()) => Ok(doc),
                Err(message) => Err(ParError::Validation {
                    line: line_no,
                    message: format!("document {}: {message}", doc.doc_id),
                }),
            });
        }
    }
}

pub fn read_corpus(path: &Path) -> Result<CorpusReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| ParError::io(path, e))?;
    Ok(CorpusReader::new(BufReader::new(file)))
}

/// Reads and validates a whole corpus file.
pub fn load_corpus(path: &Path) -> Result<Vec<DocumentRecord>> {
    read_corpus(path)?.collect()
}

/// Writes documents in canonical form: compact JSON, one document per line.
pub fn write_corpus<'a, W: Write>(
    docs: impl IntoIterator<Item = &'a DocumentRecord>,
    mut out: W,
) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub const UNKNOWN: &str = "<unk>";

/// Dense token index. Index 0 is [`UNKNOWN`], followed by every placeholder
/// surface, followed by corpus tokens by descending frequency.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    num_placeholders: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from an ordered surface list, as stored on disk.
    pub fn from_surfaces(surfaces: Vec<String>, num_placeholders: usize) -> Result<Self> {
        if surfaces.first().map(String::as_str) != Some(UNKNOWN) {
            return Err(ParError::Config(format!("vocabulary must start with {UNKNOWN}")));
        }
        if num_placeholders + 1 > surfaces.len() {
            return Err(ParError::Config("placeholder count exceeds vocabulary size".into()));
        }
        let index: HashMap<_, _> = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        if index.len() != surfaces.len() {
            return Err(ParError::Config("duplicate surface in vocabulary".into()));
        }
        Ok(Vocabulary {
            surfaces,
            num_placeholders,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    /// Index of `surface`, or 0 when the surface is unknown.
    pub fn lookup(&self, surface: &str) -> usize {
        self.index.get(surface).copied().unwrap_or(0)
    }

    pub fn surface(&self, id: usize) -> &str {
        &self.surfaces[id]
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    pub fn placeholder_ids(&self) -> std::ops::Range<usize> {
        1..1 + self.num_placeholders
    }

    pub fn is_placeholder(&self, id: usize) -> bool {
        self.placeholder_ids().contains(&id)
    }

    /// SHA-256 over the ordered surface list.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.num_placeholders.to_le_bytes());
        for s in &self.surfaces {
            hasher.update(s.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("vocabulary serializes");
        std::fs::write(path, json + "\n").map_err(|e| ParError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ParError::io(path, e))?;
        let raw: Vocabulary = serde_json::from_str(&text).map_err(|e| ParError::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
        Vocabulary::from_surfaces(raw.surfaces, raw.num_placeholders)
    }
}

pub fn build_vocabulary<'a>(
    corpus: impl IntoIterator<Item = &'a DocumentRecord>,
    min_count: usize,
) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut roles = BTreeSet::new();
    for doc in corpus {
        for event in &doc.events {
            for token in event_to_tokens(event) {
                if let Some(role) = &token.role {
                    roles.insert(role.clone());
                }
                *counts.entry(token.surface).or_default() += 1;
            }
        }
    }

    let mut placeholders: Vec<String> = roles
        .iter()
        .flat_map(|r| [EventToken::target(r).surface, EventToken::missing(r).surface])
        .collect();
    placeholders.sort();

    let mut frequent: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(s, c)| *c >= min_count && s != UNKNOWN)
        .collect();
    frequent.sort_by(|(sa, ca), (sb, cb)| cb.cmp(ca).then_with(|| sa.cmp(sb)));

    let num_placeholders = placeholders.len();
    let surfaces = std::iter::once(UNKNOWN.to_string())
        .chain(placeholders)
        .chain(frequent.into_iter().map(|(s, _)| s))
        .collect();
    Vocabulary::from_surfaces(surfaces, num_placeholders).expect("vocabulary surfaces are unique")
}
