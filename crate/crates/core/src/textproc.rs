//! Urdu preprocessing pipeline: normalization, cleaning, tokenization,
//! stopword removal, vocabulary construction and id encoding.
//!
//! Cleaning removes URLs, Latin letters, ASCII and Arabic-Indic digits,
//! punctuation (ASCII plus Urdu ۔ ، ؟ ٪ ؛) and control characters. Removed
//! spans are replaced by a space so neighbouring words never fuse, then
//! whitespace runs collapse to single spaces. The zero-width non-joiner
//! (U+200C) is word-internal in Urdu and is kept.

use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;
use unicode_normalization::UnicodeNormalization;

/// Reserved padding id.
pub const PAD_ID: u32 = 0;
/// Reserved out-of-vocabulary id.
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// A raw input document: UTF-8 text plus a binary label
/// (0 = negative/unsatisfied, 1 = positive/satisfied).
#[derive(Debug, Clone, PartialEq)]
pub struct RawDocument {
    pub text: String,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NormalizeOptions {
    /// Strip Arabic combining marks U+064B..=U+065F. Off by default: Urdu
    /// diacritics can be meaning-bearing.
    pub strip_diacritics: bool,
}

const URDU_PUNCTUATION: [char; 5] = ['۔', '،', '؟', '٪', '؛'];

fn is_arabic_diacritic(c: char) -> bool {
    ('\u{064B}'..='\u{065F}').contains(&c)
}

/// Characters the cleaning stage blanks out (URLs are handled separately).
fn is_removable(c: char) -> bool {
    c.is_ascii_alphabetic()
        || c.is_ascii_digit()
        || ('\u{0660}'..='\u{0669}').contains(&c) // Arabic-Indic digits
        || ('\u{06F0}'..='\u{06F9}').contains(&c) // extended (Urdu) digits
        || c.is_ascii_punctuation()
        || URDU_PUNCTUATION.contains(&c)
        || (c.is_control() && !c.is_whitespace())
}

fn url_pattern() -> &'static regex::Regex {
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    // Longest match: everything up to the next whitespace after the prefix.
    RE.get_or_init(|| regex::Regex::new(r"(?i)(?:https?://|www\.)\S*").unwrap())
}

/// Canonical cleaning: NFC composition, URL removal, character-class
/// removal, optional diacritic stripping, whitespace collapse and trim.
///
/// Idempotent: a second application returns its input unchanged.
pub fn normalize(text: &str, opts: &NormalizeOptions) -> String {
    let composed: String = text.nfc().collect();
    let no_urls = url_pattern().replace_all(&composed, " ");
    let filtered: String = no_urls
        .chars()
        .filter_map(|c| {
            if opts.strip_diacritics && is_arabic_diacritic(c) {
                None // deleted outright: marks combine with the letter before
            } else if is_removable(c) {
                Some(' ')
            } else {
                Some(c)
            }
        })
        .collect();
    let mut out = String::with_capacity(filtered.len());
    for word in filtered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Whitespace tokenization of normalized text. U+200C stays word-internal.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Stopword set loaded from a one-token-per-line file; `#` starts a comment.
#[derive(Debug, Clone, Default)]
pub struct StopwordList {
    tokens: HashSet<String>,
}

impl StopwordList {
    pub fn empty() -> Self {
        StopwordList::default()
    }

    pub fn from_tokens<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Self {
        StopwordList {
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }

    pub fn parse(contents: &str) -> Self {
        let tokens = contents
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect();
        StopwordList { tokens }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!("cannot read stopword file: {e}"),
        })?;
        Ok(StopwordList::parse(&contents))
    }

    /// The list shipped with the crate.
    pub fn default_urdu() -> &'static StopwordList {
        static DEFAULT: OnceLock<StopwordList> = OnceLock::new();
        DEFAULT.get_or_init(|| StopwordList::parse(include_str!("../assets/stopwords_ur.txt")))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Order-preserving stopword filter.
pub fn remove_stopwords(tokens: Vec<String>, stoplist: &StopwordList) -> Vec<String> {
    tokens
        .into_iter()
        .filter(|t| !stoplist.contains(t.as_str()))
        .collect()
}

/// The full pipeline: normalize, tokenize, drop stopwords.
pub fn preprocess(text: &str, opts: &NormalizeOptions, stops: &StopwordList) -> Vec<String> {
    remove_stopwords(tokenize(&normalize(text, opts)), stops)
}

/// Token ↔ id mapping with reserved PAD=0 and UNK=1.
///
/// Ids are assigned in descending corpus frequency, ties broken by
/// lexicographic codepoint order, so identical corpora (in any document
/// order) produce identical vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    min_freq: usize,
}

impl Vocabulary {
    /// Count token frequencies over a corpus and admit tokens with
    /// frequency >= `min_freq`.
    pub fn build(corpus: &[Vec<String>], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for doc in corpus {
            for tok in doc {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut admitted: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(_, f)| *f >= min_freq.max(1))
            .collect();
        admitted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token = Vec::with_capacity(admitted.len() + 2);
        id_to_token.push(PAD_TOKEN.to_owned());
        id_to_token.push(UNK_TOKEN.to_owned());
        id_to_token.extend(admitted.iter().map(|(t, _)| (*t).to_owned()));

        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            min_freq,
        })
    }

    /// Rebuild from an id-ordered token list (checkpoint loading).
    pub fn from_id_order(id_to_token: Vec<String>, min_freq: usize) -> Result<Self> {
        if id_to_token.len() < 2
            || id_to_token[PAD_ID as usize] != PAD_TOKEN
            || id_to_token[UNK_ID as usize] != UNK_TOKEN
        {
            return Err(Error::Config(
                "vocabulary must start with the reserved <pad> and <unk> entries".into(),
            ));
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            min_freq,
        })
    }

    /// Total size including the two reserved ids.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Tokens in id order, reserved entries included.
    pub fn id_ordered_tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// A document encoded as a fixed-length id sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedDoc {
    /// Exactly `max_len` ids; positions at and beyond `true_len` are PAD.
    pub ids: Vec<u32>,
    /// Token count before padding (after truncation), always >= 1.
    pub true_len: usize,
    pub label: u8,
}

/// Map tokens to ids (UNK for unknown), truncate to `max_len` keeping the
/// prefix, right-pad with PAD.
pub fn encode(
    tokens: &[String],
    vocab: &Vocabulary,
    max_len: usize,
    label: u8,
) -> Result<TokenizedDoc> {
    assert!(max_len >= 1, "encode: max_len must be >= 1");
    if tokens.is_empty() {
        return Err(Error::EmptyDocument);
    }
    let true_len = tokens.len().min(max_len);
    let mut ids = Vec::with_capacity(max_len);
    for tok in &tokens[..true_len] {
        ids.push(vocab.id_of(tok).unwrap_or(UNK_ID));
    }
    ids.resize(max_len, PAD_ID);
    Ok(TokenizedDoc {
        ids,
        true_len,
        label,
    })
}
