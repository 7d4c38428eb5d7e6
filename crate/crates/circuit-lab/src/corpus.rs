//! Corpus handling: synthetic summarization data with planted salient facts,
//! a word-level tokenizer, training encodings, JSONL ingestion, and splits.
//!
//! The synthetic task is built so that "what should the summary contain" has
//! ground truth: each article is mostly templated filler sentences, plus a
//! few *salient* sentences of the form `update <topic> is <value> .`, and the
//! reference summary restates exactly the salient topic/value pairs in
//! article order. A model can only do well by locating the marked facts and
//! copying them out, which is the behavior the downstream analysis probes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fingerprint::Fnv1a;
use crate::rng::Rng;

/// Special token ids. These occupy the first four ids in every vocabulary.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// The article/summary separator. Its surface form is a single word-level
/// token, mirroring the prompt format "<article> TL;DR: <summary>".
pub const SEP: u32 = 3;

pub const PAD_TEXT: &str = "<pad>";
pub const BOS_TEXT: &str = "<bos>";
pub const EOS_TEXT: &str = "<eos>";
pub const SEP_TEXT: &str = "TL;DR:";

const SPECIAL_COUNT: usize = 4;

/// Marker that opens every salient sentence.
const SALIENT_MARKER: &str = "update";

/// One article/summary pair.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Example {
    pub article: String,
    pub summary: String,
    /// For synthetic data: per-sentence flags marking the salient sentences.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub salient_mask: Option<Vec<bool>>,
}

impl Example {
    pub fn new(article: impl Into<String>, summary: impl Into<String>) -> Self {
        Example {
            article: article.into(),
            summary: summary.into(),
            salient_mask: None,
        }
    }
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    pub sentences_per_article: usize,
    pub salient_per_article: usize,
    /// Size of the generated content vocabulary (topics, values, filler).
    pub vocab_word_count: usize,
    /// Filler-sentence pattern family; 0 and 1 are defined.
    pub template_family: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_examples: 0,
            sentences_per_article: 8,
            salient_per_article: 2,
            vocab_word_count: 400,
            template_family: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(Error::Config("n_examples must be positive".into()));
        }
        if self.salient_per_article == 0 || self.salient_per_article >= self.sentences_per_article
        {
            return Err(Error::Config(format!(
                "salient_per_article ({}) must be in 1..sentences_per_article ({})",
                self.salient_per_article, self.sentences_per_article
            )));
        }
        if self.template_family > 1 {
            return Err(Error::Config(format!(
                "unknown template family {}; families 0 and 1 are defined",
                self.template_family
            )));
        }
        if self.vocab_word_count < 40 {
            return Err(Error::Config(
                "vocab_word_count must be at least 40 to fill the word pools".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic pseudo-word list: CVCV words enumerated by striding through
/// the consonant×vowel×consonant×vowel space with a step coprime to its
/// size, so the list looks varied but never depends on any RNG.
fn word_list(count: usize) -> Vec<String> {
    const CONSONANTS: [char; 17] = [
        'b', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'w', 'z',
    ];
    const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
    let space = CONSONANTS.len() * VOWELS.len(); // 85 CV syllables
    let total = space * space; // 7225 distinct CVCV words
    assert!(count <= total, "at most {total} distinct synthetic words");
    const STRIDE: usize = 1337; // coprime with 7225 = 5² · 17²
    let mut words = Vec::with_capacity(count);
    for k in 0..count {
        let idx = (k * STRIDE) % total;
        let (s1, s2) = (idx / space, idx % space);
        let mut w = String::with_capacity(4);
        w.push(CONSONANTS[s1 / VOWELS.len()]);
        w.push(VOWELS[s1 % VOWELS.len()]);
        w.push(CONSONANTS[s2 / VOWELS.len()]);
        w.push(VOWELS[s2 % VOWELS.len()]);
        words.push(w);
    }
    words
}

/// The content-word pools carved out of the generated word list.
struct Pools {
    topics: Vec<String>,
    values: Vec<String>,
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
}

impl Pools {
    fn build(vocab_word_count: usize) -> Pools {
        let words = word_list(vocab_word_count);
        let n = words.len();
        // 25% topics, 25% values, 20% nouns, 15% verbs, 15% adjectives.
        let b1 = n / 4;
        let b2 = n / 2;
        let b3 = b2 + n / 5;
        let b4 = b3 + (n - b3) / 2;
        Pools {
            topics: words[..b1].to_vec(),
            values: words[b1..b2].to_vec(),
            nouns: words[b2..b3].to_vec(),
            verbs: words[b3..b4].to_vec(),
            adjectives: words[b4..].to_vec(),
        }
    }
}

fn pick<'a>(rng: &mut Rng, pool: &'a [String]) -> &'a str {
    &pool[rng.next_below(pool.len() as u64) as usize]
}

/// Sample `k` distinct indices below `n`, in draw order.
fn sample_distinct(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let c = rng.next_below(n as u64) as usize;
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked
}

/// Generate a synthetic corpus. Deterministic for a given [`SyntheticSpec`]
/// and RNG state; callers wanting a self-describing corpus seed the RNG
/// with `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Vec<Example>> {
    spec.validate()?;
    let pools = Pools::build(spec.vocab_word_count);
    let mut corpus = Vec::with_capacity(spec.n_examples);
    for _ in 0..spec.n_examples {
        corpus.push(generate_example(spec, &pools, rng));
    }
    Ok(corpus)
}

fn generate_example(spec: &SyntheticSpec, pools: &Pools, rng: &mut Rng) -> Example {
    let s = spec.sentences_per_article;
    let mut salient_at = sample_distinct(rng, s, spec.salient_per_article);
    salient_at.sort_unstable();

    // Distinct topics per article; values drawn independently.
    let topic_idx = sample_distinct(rng, pools.topics.len(), spec.salient_per_article);
    let facts: Vec<(&str, &str)> = topic_idx
        .iter()
        .map(|&t| (pools.topics[t].as_str(), pick(rng, &pools.values)))
        .collect();

    let mut article = String::new();
    let mut mask = vec![false; s];
    let mut fact_iter = facts.iter();
    for sentence in 0..s {
        if sentence > 0 {
            article.push(' ');
        }
        if salient_at.contains(&sentence) {
            let (topic, value) = fact_iter.next().expect("one fact per salient slot");
            let _ = write!(article, "{SALIENT_MARKER} {topic} is {value} .");
            mask[sentence] = true;
        } else {
            match spec.template_family {
                0 => {
                    let _ = write!(
                        article,
                        "the {} {} {} the {} .",
                        pick(rng, &pools.adjectives),
                        pick(rng, &pools.nouns),
                        pick(rng, &pools.verbs),
                        pick(rng, &pools.nouns),
                    );
                }
                1 => {
                    let _ = write!(
                        article,
                        "some {} {} {} .",
                        pick(rng, &pools.nouns),
                        pick(rng, &pools.verbs),
                        pick(rng, &pools.adjectives),
                    );
                }
                f => unreachable!("family {f} rejected by validate"),
            }
        }
    }

    let summary = facts
        .iter()
        .flat_map(|(t, v)| [*t, *v])
        .collect::<Vec<_>>()
        .join(" ");

    Example {
        article,
        summary,
        salient_mask: Some(mask),
    }
}

// ---- tokenizer -------------------------------------------------------------

/// Whitespace word-level tokenizer with four reserved specials at ids 0–3.
/// Content ids are assigned by descending corpus frequency, ties broken
/// lexicographically, so vocabularies are deterministic.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Tokenizer {
    /// Build a vocabulary from every article and summary in `corpus`.
    /// `vocab_limit`, when given, bounds the total vocabulary (specials
    /// included); exceeding it is a configuration error.
    pub fn build(corpus: &[Example], vocab_limit: Option<usize>) -> Result<Tokenizer> {
        if corpus.is_empty() {
            return Err(Error::Degenerate("cannot build a tokenizer from an empty corpus".into()));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for ex in corpus {
            for word in ex.article.split_whitespace().chain(ex.summary.split_whitespace()) {
                *freq.entry(word).or_insert(0) += 1;
            }
        }
        freq.retain(|w, _| !is_special_surface(w));
        let mut ordered: Vec<(&str, u64)> = freq.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words: Vec<String> = ordered.into_iter().map(|(w, _)| w.to_string()).collect();
        if let Some(limit) = vocab_limit {
            let total = SPECIAL_COUNT + words.len();
            if total > limit {
                return Err(Error::Config(format!(
                    "vocabulary needs {total} entries but the configured limit is {limit}"
                )));
            }
        }
        Ok(Tokenizer::from_words(words))
    }

    fn from_words(words: Vec<String>) -> Tokenizer {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), (SPECIAL_COUNT + i) as u32))
            .collect();
        Tokenizer { words, ids }
    }

    /// Total vocabulary size including the four specials.
    pub fn vocab_size(&self) -> usize {
        SPECIAL_COUNT + self.words.len()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        match word {
            PAD_TEXT => Some(PAD),
            BOS_TEXT => Some(BOS),
            EOS_TEXT => Some(EOS),
            SEP_TEXT => Some(SEP),
            _ => self.ids.get(word).copied(),
        }
    }

    /// Tokenize whitespace-separated text. Unknown words are an error that
    /// names the offending token.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id_of(w).ok_or_else(|| Error::UnknownToken { token: w.to_string() })
            })
            .collect()
    }

    /// Inverse of [`Tokenizer::encode`]; specials render as their surface
    /// forms, so `decode(encode(s)) == s` for whitespace-normalized `s`.
    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.token_text(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Decode dropping PAD/BOS/EOS/SEP, for scoring generated text.
    pub fn decode_content(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter(|&&t| t >= SPECIAL_COUNT as u32)
            .map(|&t| self.token_text(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn token_text(&self, t: u32) -> &str {
        match t {
            PAD => PAD_TEXT,
            BOS => BOS_TEXT,
            EOS => EOS_TEXT,
            SEP => SEP_TEXT,
            _ => self
                .words
                .get(t as usize - SPECIAL_COUNT)
                .map(String::as_str)
                .unwrap_or("<invalid>"),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TokenizerFile { words: self.words.clone() };
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TokenizerFile =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Ok(Tokenizer::from_words(file.words))
    }
}

fn is_special_surface(w: &str) -> bool {
    matches!(w, PAD_TEXT | BOS_TEXT | EOS_TEXT | SEP_TEXT)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TokenizerFile {
    words: Vec<String>,
}

// ---- training encodings -----------------------------------------------------

/// Default cap on summary tokens inside an encoded example.
pub const SUMMARY_BUDGET: usize = 24;

/// A token sequence with its loss mask.
///
/// Summarization layout (from [`encode_example`]): `[BOS, article…, SEP,
/// summary…, EOS]` with the mask true exactly on summary tokens and EOS.
/// Language-model layout (from [`encode_article_lm`], used for base-model
/// pre-training): `[BOS, article…]` with the mask true after position 0 and
/// no SEP at all.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl EncodedExample {
    /// Number of positions that contribute to the loss.
    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Encode one example in summarization layout with the default
/// [`SUMMARY_BUDGET`]. The article keeps its head when truncated; the
/// article budget is `max_len − summary_budget − 3` (BOS, SEP, EOS).
pub fn encode_example(tok: &Tokenizer, ex: &Example, max_len: usize) -> Result<EncodedExample> {
    encode_example_with_budget(tok, ex, max_len, SUMMARY_BUDGET)
}

/// [`encode_example`] with an explicit summary budget.
pub fn encode_example_with_budget(
    tok: &Tokenizer,
    ex: &Example,
    max_len: usize,
    summary_budget: usize,
) -> Result<EncodedExample> {
    if summary_budget == 0 || max_len < summary_budget + 4 {
        return Err(Error::Config(format!(
            "max_len {max_len} leaves no article room at summary budget {summary_budget}"
        )));
    }
    let article_budget = max_len - summary_budget - 3;
    let mut article = tok.encode(&ex.article)?;
    article.truncate(article_budget);
    let mut summary = tok.encode(&ex.summary)?;
    summary.truncate(summary_budget);
    if article.is_empty() || summary.is_empty() {
        return Err(Error::Degenerate("example with empty article or summary".into()));
    }

    let mut tokens = Vec::with_capacity(article.len() + summary.len() + 3);
    tokens.push(BOS);
    tokens.extend_from_slice(&article);
    tokens.push(SEP);
    let prefix = tokens.len();
    tokens.extend_from_slice(&summary);
    tokens.push(EOS);

    let mut loss_mask = vec![false; tokens.len()];
    for m in &mut loss_mask[prefix..] {
        *m = true;
    }
    debug_assert!(tokens.len() <= max_len);
    Ok(EncodedExample { tokens, loss_mask })
}

/// Encode an article alone as a language-modeling item: `[BOS, article…]`
/// truncated to `max_len`, loss on every position after BOS. Used to give
/// the base model generic next-word competence before any summarization
/// fine-tuning.
pub fn encode_article_lm(tok: &Tokenizer, ex: &Example, max_len: usize) -> Result<EncodedExample> {
    if max_len < 3 {
        return Err(Error::Config("max_len too small for LM encoding".into()));
    }
    let mut article = tok.encode(&ex.article)?;
    article.truncate(max_len - 1);
    if article.is_empty() {
        return Err(Error::Degenerate("example with empty article".into()));
    }
    let mut tokens = Vec::with_capacity(article.len() + 1);
    tokens.push(BOS);
    tokens.extend_from_slice(&article);
    let mut loss_mask = vec![true; tokens.len()];
    loss_mask[0] = false;
    Ok(EncodedExample { tokens, loss_mask })
}

/// Content hash of an encoded corpus. Two trace sets may only be compared
/// when their fingerprints agree, i.e. they were produced from identical
/// token sequences in identical order.
pub fn corpus_fingerprint(items: &[EncodedExample]) -> u64 {
    let mut h = Fnv1a::new();
    h.write_u64(items.len() as u64);
    for item in items {
        h.write_u32(item.tokens.len() as u32);
        for &t in &item.tokens {
            h.write_u32(t);
        }
        for &m in &item.loss_mask {
            h.write(&[m as u8]);
        }
    }
    h.finish()
}

// ---- JSONL ------------------------------------------------------------------

/// Load a JSONL corpus: one `{"article": …, "summary": …}` object per line.
/// Blank lines are ignored; anything else malformed is an error naming the
/// line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if ex.article.trim().is_empty() || ex.summary.trim().is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "article and summary must be non-empty".into(),
            });
        }
        corpus.push(ex);
    }
    Ok(corpus)
}

pub fn save_jsonl(path: &Path, corpus: &[Example]) -> Result<()> {
    let mut out = String::new();
    for ex in corpus {
        let line = serde_json::to_string(ex).map_err(|e| Error::json(path, e))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---- splitting ---------------------------------------------------------------

/// Shuffle and partition into train/val/test by cumulative rounding of the
/// fractions, which makes (10 items, 0.8/0.1/0.1) come out as 8/1/1.
pub fn split<X: Clone>(
    items: &[X],
    fractions: [f64; 3],
    rng: &mut Rng,
) -> Result<(Vec<X>, Vec<X>, Vec<X>)> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
    }
    if fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Config("split fractions must be non-negative".into()));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let b1 = ((fractions[0] * n as f64).round() as usize).min(n);
    let b2 = (((fractions[0] + fractions[1]) * n as f64).round() as usize).clamp(b1, n);
    let take = |range: std::ops::Range<usize>| -> Vec<X> {
        order[range].iter().map(|&i| items[i].clone()).collect()
    };
    Ok((take(0..b1), take(b1..b2), take(b2..n)))
}
