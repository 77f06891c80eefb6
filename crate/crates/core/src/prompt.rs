//! Prompt templates over a word-level synthetic vocabulary.
//!
//! Every template is rendered from `(kind, category, rationale list)` into
//! text and then into a fixed-length token sequence. Rationales inside a
//! prompt are always listed in ascending id order, and the singular/plural
//! surface form follows the number of rationales.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CategoryId = usize;
pub type RationaleId = usize;

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<start>", "<end>"];

/// Template filler words. Capitalised forms are separate tokens so that
/// detokenisation reproduces rendered text exactly.
pub const FILLER_WORDS: [&str; 14] = [
    "There", "there", "This", "this", "is", "are", "a", "photo", "of", "because", "and", "in",
    "the", ".",
];

/// Words that may not occur inside a category or rationale name; they are
/// the separators that make rendering injective.
const RESERVED_IN_NAMES: [&str; 2] = ["and", "because"];

pub const DEFAULT_CONTEXT_LEN: usize = 32;
pub const VOCABULARY_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptKind {
    /// "There is/are {r..} in the photo."
    #[serde(rename = "R")]
    Rationale,
    /// "This is a photo of a {c} because there is {r..}."
    #[serde(rename = "C_GIVEN_R")]
    CategoryGivenRationale,
    /// "This is a photo of a {c}"
    #[serde(rename = "C_ONLY")]
    CategoryOnly,
    /// "There is {r..} because this is a photo of a {c}"
    #[serde(rename = "R_BECAUSE_C")]
    RationaleBecauseCategory,
    /// Rationales conditioned on a category; same surface form as
    /// [`PromptKind::RationaleBecauseCategory`].
    #[serde(rename = "R_GIVEN_C")]
    RationaleGivenCategory,
}

impl PromptKind {
    pub const ALL: [PromptKind; 5] = [
        PromptKind::Rationale,
        PromptKind::CategoryGivenRationale,
        PromptKind::CategoryOnly,
        PromptKind::RationaleBecauseCategory,
        PromptKind::RationaleGivenCategory,
    ];

    pub fn needs_category(self) -> bool {
        !matches!(self, PromptKind::Rationale)
    }

    pub fn needs_rationales(self) -> bool {
        !matches!(self, PromptKind::CategoryOnly)
    }

    pub fn label(self) -> &'static str {
        match self {
            PromptKind::Rationale => "R",
            PromptKind::CategoryGivenRationale => "C_GIVEN_R",
            PromptKind::CategoryOnly => "C_ONLY",
            PromptKind::RationaleBecauseCategory => "R_BECAUSE_C",
            PromptKind::RationaleGivenCategory => "R_GIVEN_C",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VocabularyDoc {
    format_version: u32,
    category_names: Vec<String>,
    rationale_names: Vec<String>,
    words: Vec<String>,
}

/// Category and rationale names plus the word→token table.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "VocabularyDoc", into = "VocabularyDoc")]
pub struct Vocabulary {
    category_names: Vec<String>,
    rationale_names: Vec<String>,
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.category_names == other.category_names
            && self.rationale_names == other.rationale_names
            && self.words == other.words
    }
}

impl From<Vocabulary> for VocabularyDoc {
    fn from(v: Vocabulary) -> Self {
        VocabularyDoc {
            format_version: VOCABULARY_FORMAT_VERSION,
            category_names: v.category_names,
            rationale_names: v.rationale_names,
            words: v.words,
        }
    }
}

impl TryFrom<VocabularyDoc> for Vocabulary {
    type Error = Error;

    fn try_from(doc: VocabularyDoc) -> Result<Self> {
        if doc.format_version != VOCABULARY_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported vocabulary format_version {}",
                doc.format_version
            )));
        }
        Vocabulary::from_parts(doc.category_names, doc.rationale_names, doc.words)
    }
}

impl Vocabulary {
    /// Vocabulary whose token table covers exactly the given names.
    pub fn new(categories: Vec<String>, rationales: Vec<String>) -> Result<Self> {
        let pool: Vec<String> = categories.iter().chain(&rationales).cloned().collect();
        Vocabulary::with_name_pool(categories, rationales, &pool)
    }

    /// Vocabulary whose token table is built from `pool` (a superset of the
    /// names in use). Two vocabularies built from the same pool share token
    /// ids, which is what zero-shot transfer between worlds relies on.
    pub fn with_name_pool(
        categories: Vec<String>,
        rationales: Vec<String>,
        pool: &[String],
    ) -> Result<Self> {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(FILLER_WORDS.iter().map(|s| s.to_string()));
        for name in pool {
            for w in name.split_whitespace() {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        Vocabulary::from_parts(categories, rationales, words)
    }

    fn from_parts(
        category_names: Vec<String>,
        rationale_names: Vec<String>,
        words: Vec<String>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if index.get(*s) != Some(&(i as u32)) {
                return Err(Error::Config(format!("special token {s} must have id {i}")));
            }
        }
        validate_names("category", &category_names, &index)?;
        validate_names("rationale", &rationale_names, &index)?;
        Ok(Vocabulary {
            category_names,
            rationale_names,
            words,
            index,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.category_names
    }

    pub fn rationales(&self) -> &[String] {
        &self.rationale_names
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn n_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn n_rationales(&self) -> usize {
        self.rationale_names.len()
    }

    pub fn token(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("word {word:?} is not in the vocabulary")))
    }

    pub fn category_name(&self, c: CategoryId) -> Result<&str> {
        self.category_names
            .get(c)
            .map(String::as_str)
            .ok_or_else(|| Error::Lookup(format!("unknown category id {c}")))
    }

    pub fn rationale_name(&self, r: RationaleId) -> Result<&str> {
        self.rationale_names
            .get(r)
            .map(String::as_str)
            .ok_or_else(|| Error::Lookup(format!("unknown rationale id {r}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serialises")
    }
}

fn validate_names(what: &str, names: &[String], index: &HashMap<String, u32>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(Error::Config(format!("duplicate {what} name {name:?}")));
        }
        let words: Vec<&str> = name.split_whitespace().collect();
        if words.is_empty() || words.join(" ") != *name {
            return Err(Error::Config(format!(
                "{what} name {name:?} must be non-empty words separated by single spaces"
            )));
        }
        for w in words {
            if RESERVED_IN_NAMES.contains(&w) || w.contains('.') || SPECIALS.contains(&w) {
                return Err(Error::Config(format!(
                    "{what} name {name:?} contains reserved word {w:?}"
                )));
            }
            if !index.contains_key(w) {
                return Err(Error::Lookup(format!(
                    "{what} name {name:?} uses word {w:?} missing from the token table"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub category: Option<CategoryId>,
    pub rationales: Vec<RationaleId>,
    pub text: String,
    pub tokens: Vec<u32>,
}

impl RenderedPrompt {
    /// Number of leading non-pad tokens (start marker through end marker).
    pub fn len(&self) -> usize {
        self.tokens.iter().take_while(|t| **t != PAD).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn active_tokens(&self) -> &[u32] {
        &self.tokens[..self.len()]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    pub truncated: bool,
}

/// Word-level tokenisation: start marker, one id per word (a trailing
/// full stop is its own token), end marker, then padding to `context_len`.
/// Text that does not fit is an error unless `allow_truncate` is set, in
/// which case the result is flagged as truncated.
pub fn tokenize(
    vocab: &Vocabulary,
    text: &str,
    context_len: usize,
    allow_truncate: bool,
) -> Result<Tokenized> {
    if context_len < 2 {
        return Err(Error::Config(format!(
            "context length {context_len} cannot hold start and end markers"
        )));
    }
    let mut ids = vec![START];
    for raw in text.split_whitespace() {
        let (word, stop) = match raw.strip_suffix('.') {
            Some(w) if !w.is_empty() => (w, true),
            _ => (raw, false),
        };
        ids.push(vocab.token(word)?);
        if stop {
            ids.push(vocab.token(".")?);
        }
    }
    let mut truncated = false;
    if ids.len() + 1 > context_len {
        if !allow_truncate {
            return Err(Error::Contract(format!(
                "{} tokens do not fit context length {context_len}: {text:?}",
                ids.len() + 1
            )));
        }
        ids.truncate(context_len - 1);
        truncated = true;
    }
    ids.push(END);
    ids.resize(context_len, PAD);
    Ok(Tokenized { ids, truncated })
}

/// Inverse of [`tokenize`] for untruncated sequences.
pub fn detokenize(vocab: &Vocabulary, ids: &[u32]) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        match id {
            START => continue,
            END | PAD => break,
            _ => {}
        }
        let word = vocab
            .words
            .get(id as usize)
            .ok_or_else(|| Error::Lookup(format!("token id {id} out of range")))?;
        if word != "." && !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    Ok(out)
}

fn join_rationales(vocab: &Vocabulary, rationales: &[RationaleId]) -> Result<String> {
    let names = rationales
        .iter()
        .map(|r| vocab.rationale_name(*r))
        .collect::<Result<Vec<_>>>()?;
    Ok(names.join(" and "))
}

fn canonical_rationales(rationales: &[RationaleId]) -> Result<Vec<RationaleId>> {
    let mut sorted = rationales.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Contract(format!(
            "rationale list {rationales:?} repeats an id"
        )));
    }
    Ok(sorted)
}

/// Render any template. Bindings must match the kind: `Rationale` takes no
/// category and at least one rationale, `CategoryOnly` takes a category and
/// no rationales, every other kind takes both.
pub fn render(
    vocab: &Vocabulary,
    kind: PromptKind,
    category: Option<CategoryId>,
    rationales: &[RationaleId],
    context_len: usize,
) -> Result<RenderedPrompt> {
    if kind.needs_category() != category.is_some() {
        return Err(Error::Contract(format!(
            "{kind} prompt {} a category",
            if kind.needs_category() {
                "needs"
            } else {
                "takes no"
            }
        )));
    }
    if kind.needs_rationales() == rationales.is_empty() {
        return Err(Error::Contract(format!(
            "{kind} prompt {} rationales",
            if kind.needs_rationales() {
                "needs"
            } else {
                "takes no"
            }
        )));
    }
    let rationales = canonical_rationales(rationales)?;
    let verb = if rationales.len() > 1 { "are" } else { "is" };
    let text = match kind {
        PromptKind::Rationale => {
            format!(
                "There {verb} {} in the photo.",
                join_rationales(vocab, &rationales)?
            )
        }
        PromptKind::CategoryGivenRationale => format!(
            "This is a photo of a {} because there is {}.",
            vocab.category_name(category.unwrap_or_default())?,
            join_rationales(vocab, &rationales)?
        ),
        PromptKind::CategoryOnly => format!(
            "This is a photo of a {}",
            vocab.category_name(category.unwrap_or_default())?
        ),
        PromptKind::RationaleBecauseCategory | PromptKind::RationaleGivenCategory => format!(
            "There {verb} {} because this is a photo of a {}",
            join_rationales(vocab, &rationales)?,
            vocab.category_name(category.unwrap_or_default())?
        ),
    };
    let tokens = tokenize(vocab, &text, context_len, false)?.ids;
    Ok(RenderedPrompt {
        kind,
        category,
        rationales,
        text,
        tokens,
    })
}

pub fn render_rationale_prompt(
    vocab: &Vocabulary,
    rationales: &[RationaleId],
    context_len: usize,
) -> Result<RenderedPrompt> {
    render(vocab, PromptKind::Rationale, None, rationales, context_len)
}

pub fn render_category_given_rationales(
    vocab: &Vocabulary,
    category: CategoryId,
    rationales: &[RationaleId],
    context_len: usize,
) -> Result<RenderedPrompt> {
    render(
        vocab,
        PromptKind::CategoryGivenRationale,
        Some(category),
        rationales,
        context_len,
    )
}

/// The prompt list a softmax of the given kind ranges over.
///
/// `Rationale` gives one prompt per rationale set, `CategoryOnly` one per
/// category, and the conditional kinds the full cross product of categories
/// and rationale sets in category-major order.
pub fn enumerate_normalization_set(
    vocab: &Vocabulary,
    kind: PromptKind,
    rationale_sets: &[Vec<RationaleId>],
    context_len: usize,
) -> Result<Vec<RenderedPrompt>> {
    match kind {
        PromptKind::Rationale => rationale_sets
            .iter()
            .map(|s| render(vocab, kind, None, s, context_len))
            .collect(),
        PromptKind::CategoryOnly => (0..vocab.n_categories())
            .map(|c| render(vocab, kind, Some(c), &[], context_len))
            .collect(),
        _ => {
            let mut out = Vec::with_capacity(vocab.n_categories() * rationale_sets.len());
            for c in 0..vocab.n_categories() {
                for s in rationale_sets {
                    out.push(render(vocab, kind, Some(c), s, context_len)?);
                }
            }
            Ok(out)
        }
    }
}
