//! Tag normalization, vocabulary construction and multi-hot encoding.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use crate::error::{CoalaError, Result};

const STOPWORDS: &str = include_str!("stopwords.txt");
const SINGULAR_TABLE: &str = include_str!("singular.tsv");

pub const DEFAULT_VOCAB_SIZE: usize = 1000;
/// Tags on more than this fraction of clips are dropped.
pub const MAX_DOC_FRACTION: f64 = 0.70;

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.lines().map(str::trim).filter(|l| !l.is_empty()).collect())
}

fn singular_table() -> &'static HashMap<&'static str, &'static str> {
    static MAP: OnceLock<HashMap<&'static str, &'static str>> = OnceLock::new();
    MAP.get_or_init(|| {
        SINGULAR_TABLE
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .filter_map(|l| l.split_once('\t'))
            .collect()
    })
}

pub fn is_stopword(word: &str) -> bool {
    stopwords().contains(word)
}

/// One application of the plural-to-singular rules.
fn singular_step(w: &str) -> String {
    if let Some(s) = singular_table().get(w) {
        return s.to_string();
    }
    let n = w.chars().count();
    if n > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..w.len() - 3]);
    }
    for suffix in ["sses", "xes", "zzes", "ches", "shes"] {
        if w.ends_with(suffix) && n > suffix.len() {
            return w[..w.len() - 2].to_string();
        }
    }
    let keeps_s = ["ss", "us", "is", "'s"].iter().any(|e| w.ends_with(e));
    if n > 3 && w.ends_with('s') && !keeps_s {
        return w[..w.len() - 1].to_string();
    }
    w.to_string()
}

/// Repeats [`singular_step`] until nothing changes.
pub fn singularize(word: &str) -> String {
    let mut w = word.to_string();
    loop {
        let next = singular_step(&w);
        if next == w {
            return w;
        }
        w = next;
    }
}

/// Lowercases, singularizes and drops stop words. `None` for an empty or
/// stop-word result.
pub fn normalize_tag(raw: &str) -> Option<String> {
    let lower = raw.trim().to_lowercase();
    if lower.is_empty() || is_stopword(&lower) {
        return None;
    }
    let s = singularize(&lower);
    if s.is_empty() || is_stopword(&s) {
        return None;
    }
    Some(s)
}

/// Normalized, deduplicated tags of one clip, in sorted order.
pub fn normalize_all<S: AsRef<str>>(raw: &[S]) -> Vec<String> {
    raw.iter()
        .filter_map(|t| normalize_tag(t.as_ref()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tags: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_entries(entries: Vec<(String, usize)>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, (t, _)) in entries.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CoalaError::Format(format!("duplicate vocabulary tag {t:?}")));
            }
        }
        let (tags, counts) = entries.into_iter().unzip();
        Ok(Vocabulary {
            tags,
            counts,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn doc_frequency(&self) -> &[usize] {
        &self.counts
    }

    pub fn position(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    /// `tag<TAB>count` lines in index order.
    pub fn to_tsv(&self) -> String {
        self.tags
            .iter()
            .zip(&self.counts)
            .map(|(t, c)| format!("{t}\t{c}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (t, c) = line.split_once('\t').ok_or_else(|| {
                CoalaError::Format(format!("vocabulary line {}: expected tag<TAB>count", i + 1))
            })?;
            let c = c.trim().parse().map_err(|_| {
                CoalaError::Format(format!("vocabulary line {}: bad count {c:?}", i + 1))
            })?;
            entries.push((t.to_string(), c));
        }
        if entries.is_empty() {
            return Err(CoalaError::Format("vocabulary file is empty".into()));
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| CoalaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoalaError::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Counts normalized tags per clip, drops those on more than 70% of clips,
/// and keeps the `cap` most frequent (ties broken lexicographically).
pub fn build_vocabulary<S: AsRef<str>>(clips: &[Vec<S>], cap: usize) -> Result<Vocabulary> {
    if clips.is_empty() {
        return Err(CoalaError::Invalid("cannot build a vocabulary from zero clips".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for tags in clips {
        for t in normalize_all(tags) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let n = clips.len() as f64;
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c as f64 / n <= MAX_DOC_FRACTION)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(cap);
    if entries.is_empty() {
        return Err(CoalaError::Invalid(
            "vocabulary is empty after removing tags present on more than 70% of clips".into(),
        ));
    }
    Vocabulary::from_entries(entries)
}

/// Set vocabulary positions of a clip's tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagVector {
    /// Sorted, unique positions of the set bits.
    pub active: Vec<usize>,
    pub classes: usize,
}

impl TagVector {
    pub fn to_dense(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.classes];
        for &i in &self.active {
            v[i] = 1.0;
        }
        v
    }

    pub fn popcount(&self) -> usize {
        self.active.len()
    }
}

/// Multi-hot encoding of in-vocabulary tags; `None` when no tag is known.
pub fn encode<S: AsRef<str>>(tags: &[S], vocab: &Vocabulary) -> Option<TagVector> {
    let active: Vec<usize> = normalize_all(tags)
        .iter()
        .filter_map(|t| vocab.position(t))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    (!active.is_empty()).then_some(TagVector {
        active,
        classes: vocab.len(),
    })
}

/// One manifest line: `clip_path<TAB>tag1,tag2,...`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// As written in the manifest; used as the clip id.
    pub clip: String,
    /// Resolved against the manifest's directory.
    pub path: PathBuf,
    pub tags: Vec<String>,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (clip, tags) = line.split_once('\t').unwrap_or((line, ""));
        if clip.is_empty() {
            return Err(CoalaError::Format(format!("manifest line {}: empty clip path", i + 1)));
        }
        out.push(ManifestEntry {
            clip: clip.to_string(),
            path: base.join(clip),
            tags: tags
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(String::from)
                .collect(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| CoalaError::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

pub fn manifest_text(entries: &[(String, Vec<String>)]) -> String {
    entries
        .iter()
        .map(|(clip, tags)| format!("{clip}\t{}\n", tags.join(",")))
        .collect()
}
