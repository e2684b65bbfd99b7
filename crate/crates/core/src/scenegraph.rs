//! Rule-based scene-graph parsing for captions.
//!
//! Captions are read against a role lexicon using the pattern
//! `DET? ADJ* NOUN ((VERB|PREP)+ DET? ADJ* NOUN)*`. A maximal run of
//! VERB/PREP tokens forms one relation span linking the preceding object to
//! the following one. Words outside the lexicon are left unlabeled and are
//! never masking candidates.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::text::TokenSeq;

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        Self { start, end }
    }

    pub fn single(pos: usize) -> Self {
        Self::new(pos, pos + 1)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Noun,
    Adj,
    Verb,
    Prep,
    Det,
    Stop,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Noun => "NOUN",
            Role::Adj => "ADJ",
            Role::Verb => "VERB",
            Role::Prep => "PREP",
            Role::Det => "DET",
            Role::Stop => "STOP",
        }
    }

    fn is_relational(self) -> bool {
        matches!(self, Role::Verb | Role::Prep)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NOUN" => Ok(Role::Noun),
            "ADJ" => Ok(Role::Adj),
            "VERB" => Ok(Role::Verb),
            "PREP" => Ok(Role::Prep),
            "DET" => Ok(Role::Det),
            "STOP" => Ok(Role::Stop),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// Word to grammatical role map. Entries keep insertion order for output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoleLexicon {
    entries: Vec<(String, Role)>,
    index: HashMap<String, usize>,
}

impl RoleLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or overwrites an entry.
    pub fn insert(&mut self, word: &str, role: Role) {
        let word = word.to_lowercase();
        match self.index.get(&word) {
            Some(&i) => self.entries[i].1 = role,
            None => {
                self.index.insert(word.clone(), self.entries.len());
                self.entries.push((word, role));
            }
        }
    }

    pub fn role(&self, word: &str) -> Option<Role> {
        self.index.get(word).map(|&i| self.entries[i].1)
    }

    pub fn entries(&self) -> &[(String, Role)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `word<TAB>role` lines. Blank lines are skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        Self::parse_tsv(text, Path::new("<lexicon>"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_tsv(&text, path)
    }

    fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut lexicon = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: PathBuf::from(origin),
                line: n + 1,
                message,
            };
            let (word, role) = line
                .split_once('\t')
                .ok_or_else(|| err("expected word<TAB>role".into()))?;
            if word.is_empty() || word.contains(char::is_whitespace) {
                return Err(err(format!("bad word {word:?}")));
            }
            let role = role.trim_end().parse::<Role>().map_err(err)?;
            lexicon.insert(word, role);
        }
        Ok(lexicon)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (word, role) in &self.entries {
            out.push_str(word);
            out.push('\t');
            out.push_str(role.as_str());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Attribute {
    pub span: Span,
    /// Index into [`SceneGraph::objects`].
    pub object: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Relation {
    pub span: Span,
    pub subject: usize,
    pub object: usize,
}

/// Objects, attributes and relations of one caption, as token spans.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneGraph {
    pub objects: Vec<Span>,
    pub attributes: Vec<Attribute>,
    pub relations: Vec<Relation>,
}

impl SceneGraph {
    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Every element span, unordered.
    pub fn spans(&self) -> impl Iterator<Item = Span> + '_ {
        self.objects
            .iter()
            .copied()
            .chain(self.attributes.iter().map(|a| a.span))
            .chain(self.relations.iter().map(|r| r.span))
    }

    /// Checks the structural invariants against a caption of `len` tokens.
    pub fn validate(&self, len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let mut spans: Vec<Span> = self.spans().collect();
        for s in &spans {
            if s.is_empty() || s.end > len {
                return bad(format!("span {s:?} out of bounds for length {len}"));
            }
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[0].overlaps(&w[1]) {
                return bad(format!("spans {:?} and {:?} overlap", w[0], w[1]));
            }
        }
        let n = self.objects.len();
        if self.attributes.iter().any(|a| a.object >= n) {
            return bad("attribute references a missing object".into());
        }
        if self.relations.iter().any(|r| r.subject >= n || r.object >= n) {
            return bad("relation references a missing object".into());
        }
        Ok(())
    }
}

/// Parses `caption` against `lexicon`. Total: unknown words stay unlabeled.
pub fn parse_scene_graph(caption: &TokenSeq, lexicon: &RoleLexicon) -> SceneGraph {
    let mut graph = SceneGraph::default();
    let mut pending_attrs: Vec<usize> = Vec::new();
    let mut last_object: Option<usize> = None;
    // A relation run that still needs its object: (span, subject).
    let mut open_relation: Option<(Span, usize)> = None;
    let mut run_start: Option<usize> = None;

    let surfaces = caption.surfaces();
    for (i, word) in surfaces.iter().enumerate() {
        let role = lexicon.role(word);
        if role.is_some_and(Role::is_relational) {
            if run_start.is_none() {
                run_start = Some(i);
                pending_attrs.clear();
            }
            continue;
        }
        if let Some(start) = run_start.take() {
            open_relation = last_object.map(|subject| (Span::new(start, i), subject));
        }
        match role {
            Some(Role::Noun) => {
                let object = graph.objects.len();
                graph.objects.push(Span::single(i));
                for pos in pending_attrs.drain(..) {
                    graph.attributes.push(Attribute {
                        span: Span::single(pos),
                        object,
                    });
                }
                if let Some((span, subject)) = open_relation.take() {
                    graph.relations.push(Relation {
                        span,
                        subject,
                        object,
                    });
                }
                last_object = Some(object);
            }
            Some(Role::Adj) => pending_attrs.push(i),
            _ => {}
        }
    }
    graph
}

/// Token spans eligible for masking, tied to their source caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskCandidateSet {
    pub spans: Vec<Span>,
    pub source: TokenSeq,
}

impl MaskCandidateSet {
    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }
}

/// All object, attribute and relation spans of `graph`, in caption order.
pub fn mask_candidates(graph: &SceneGraph, source: &TokenSeq) -> MaskCandidateSet {
    let mut spans: Vec<Span> = graph.spans().collect();
    spans.sort();
    MaskCandidateSet {
        spans,
        source: source.clone(),
    }
}
