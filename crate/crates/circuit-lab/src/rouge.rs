//! ROUGE-1/2/L scoring and corpus-level model comparison.
//!
//! Scores are computed over case-folded word tokens with no stemming or
//! stopword removal, and the harmonic-mean F1 (β = 1) is the headline
//! aggregate. Corpus evaluation generates a summary per test article with
//! greedy decoding from the `[article] TL;DR:` prompt and macro-averages
//! per-example scores; examples whose generation fails score zero and are
//! reported as warnings rather than aborting the run.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use rayon::prelude::*;

use crate::corpus::{Example, Tokenizer, BOS, SEP, SUMMARY_BUDGET};
use crate::error::{Error, Result};
use crate::model::{generate_greedy, CausalLm};

/// Which ROUGE variant a score belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RougeVariant {
    Rouge1,
    Rouge2,
    RougeL,
}

impl std::fmt::Display for RougeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RougeVariant::Rouge1 => write!(f, "ROUGE-1"),
            RougeVariant::Rouge2 => write!(f, "ROUGE-2"),
            RougeVariant::RougeL => write!(f, "ROUGE-L"),
        }
    }
}

/// Precision / recall / F1 triple for one variant, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RougeScore {
    pub variant: RougeVariant,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn new(variant: RougeVariant, precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore { variant, precision, recall, f1 }
    }

    fn zero(variant: RougeVariant) -> Self {
        RougeScore { variant, precision: 0.0, recall: 0.0, f1: 0.0 }
    }
}

/// Case-folded word tokens: whitespace-split, lowercased. Punctuation that
/// is space-separated (as in the synthetic corpus) stays its own token.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Clipped n-gram overlap. Each candidate n-gram counts at most as often
/// as it occurs in the reference; empty n-gram sets yield zero scores
/// rather than errors.
pub fn rouge_n<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::Config("n-gram order must be at least 1".into()));
    }
    let variant = match n {
        1 => RougeVariant::Rouge1,
        _ => RougeVariant::Rouge2,
    };
    let cand_grams = cand.len().saturating_sub(n - 1);
    let ref_grams = reference.len().saturating_sub(n - 1);
    if cand_grams == 0 || ref_grams == 0 {
        return Ok(RougeScore::zero(variant));
    }
    let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
    for gram in reference.windows(n) {
        *ref_counts.entry(gram).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for gram in cand.windows(n) {
        if let Some(count) = ref_counts.get_mut(gram) {
            if *count > 0 {
                *count -= 1;
                overlap += 1;
            }
        }
    }
    Ok(RougeScore::new(
        variant,
        overlap as f64 / cand_grams as f64,
        overlap as f64 / ref_grams as f64,
    ))
}

/// Longest common subsequence length via the two-row dynamic program.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-L: LCS-based precision `L/|cand|`, recall `L/|ref|`, harmonic F1.
pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> RougeScore {
    if cand.is_empty() || reference.is_empty() {
        return RougeScore::zero(RougeVariant::RougeL);
    }
    let l = lcs_len(cand, reference) as f64;
    RougeScore::new(
        RougeVariant::RougeL,
        l / cand.len() as f64,
        l / reference.len() as f64,
    )
}

/// All three variants for one candidate/reference text pair.
pub fn score_texts(candidate: &str, reference: &str) -> Result<[RougeScore; 3]> {
    let cand = word_tokens(candidate);
    let refr = word_tokens(reference);
    Ok([
        rouge_n(&cand, &refr, 1)?,
        rouge_n(&cand, &refr, 2)?,
        rouge_l(&cand, &refr),
    ])
}

/// Corpus-averaged scores for one model.
#[derive(Debug, Clone)]
pub struct ModelScores {
    pub label: String,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    pub n_examples: usize,
    /// One entry per example whose generation failed (scored as zero).
    pub warnings: Vec<String>,
}

/// Rows of per-model scores plus shared layout helpers.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub rows: Vec<ModelScores>,
}

impl ScoreTable {
    /// CSV: one row per model, all nine precision/recall/F1 columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,rouge1_precision,rouge1_recall,rouge1_f1,\
             rouge2_precision,rouge2_recall,rouge2_f1,\
             rougel_precision,rougel_recall,rougel_f1\n",
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                row.label,
                row.rouge1.precision,
                row.rouge1.recall,
                row.rouge1.f1,
                row.rouge2.precision,
                row.rouge2.recall,
                row.rouge2.f1,
                row.rouge_l.precision,
                row.rouge_l.recall,
                row.rouge_l.f1,
            );
        }
        out
    }

    /// Aligned text table of headline F1 numbers, four decimal places.
    pub fn to_text(&self) -> String {
        let label_width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(["Model".len()])
            .max()
            .unwrap_or(5);
        let mut out = format!(
            "{:<label_width$}  {:>8}  {:>8}  {:>8}\n",
            "Model", "ROUGE-1", "ROUGE-2", "ROUGE-L"
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<label_width$}  {:>8.4}  {:>8.4}  {:>8.4}",
                row.label, row.rouge1.f1, row.rouge2.f1, row.rouge_l.f1
            );
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&ModelScores> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Build the generation prompt `[BOS, article…, SEP]` with the same
/// article truncation the training encoder applies.
pub fn summary_prompt(
    tokenizer: &Tokenizer,
    example: &Example,
    max_len: usize,
) -> Result<Vec<u32>> {
    if max_len < SUMMARY_BUDGET + 4 {
        return Err(Error::Config(format!(
            "context of {max_len} cannot hold an article plus a {SUMMARY_BUDGET}-token summary"
        )));
    }
    let article_budget = max_len - SUMMARY_BUDGET - 3;
    let mut article = tokenizer.encode(&example.article)?;
    article.truncate(article_budget);
    let mut prompt = Vec::with_capacity(article.len() + 2);
    prompt.push(BOS);
    prompt.extend_from_slice(&article);
    prompt.push(SEP);
    Ok(prompt)
}

/// Greedy-generate a summary for each test article and macro-average the
/// scores against the reference summaries. Generation failures score zero
/// and are reported in `warnings`. `max_new` bounds the generated length;
/// use at least [`SUMMARY_BUDGET`] + 1 so full summaries plus the end
/// marker fit.
pub fn evaluate_model<M: CausalLm<f32> + ?Sized>(
    model: &M,
    label: &str,
    test: &[Example],
    tokenizer: &Tokenizer,
    max_new: usize,
) -> Result<ModelScores> {
    if test.is_empty() {
        return Err(Error::Degenerate("evaluation over an empty test corpus".into()));
    }
    let max_len = model.max_seq_len();
    // Parallel per example; scores land in corpus order so the f64
    // aggregation below is deterministic.
    let per_example: Vec<std::result::Result<[RougeScore; 3], String>> = test
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let attempt = || -> Result<[RougeScore; 3]> {
                let prompt = summary_prompt(tokenizer, ex, max_len)?;
                let generated = generate_greedy(model, &prompt, max_new)?;
                let text = tokenizer.decode_content(&generated);
                score_texts(&text, &ex.summary)
            };
            attempt().map_err(|e| format!("example {i}: {e}"))
        })
        .collect();

    let mut sums = [[0.0f64; 3]; 3];
    let mut warnings = Vec::new();
    for result in &per_example {
        match result {
            Ok(scores) => {
                for (v, s) in scores.iter().enumerate() {
                    sums[v][0] += s.precision;
                    sums[v][1] += s.recall;
                    sums[v][2] += s.f1;
                }
            }
            Err(msg) => warnings.push(msg.clone()),
        }
    }
    let n = test.len() as f64;
    let mean = |v: usize, variant: RougeVariant| RougeScore {
        variant,
        precision: sums[v][0] / n,
        recall: sums[v][1] / n,
        f1: sums[v][2] / n,
    };
    Ok(ModelScores {
        label: label.to_string(),
        rouge1: mean(0, RougeVariant::Rouge1),
        rouge2: mean(1, RougeVariant::Rouge2),
        rouge_l: mean(2, RougeVariant::RougeL),
        n_examples: test.len(),
        warnings,
    })
}

/// Evaluate a labeled list of models (e.g. Base / Fine-tuned / LoRA /
/// LoRA-targeted) over the same test corpus.
pub fn evaluate_models(
    models: &[(&str, &dyn CausalLm<f32>)],
    test: &[Example],
    tokenizer: &Tokenizer,
    max_new: usize,
) -> Result<ScoreTable> {
    if models.is_empty() {
        return Err(Error::Contract("evaluate_models needs at least one model".into()));
    }
    let rows = models
        .iter()
        .map(|(label, model)| evaluate_model(*model, label, test, tokenizer, max_new))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;
    use crate::tensor::Tensor;

    fn words(s: &str) -> Vec<String> {
        word_tokens(s)
    }

    #[test]
    fn rouge1_fixture_two_thirds_precision() {
        let s = rouge_n(&words("the cat sat"), &words("the cat"), 1).unwrap();
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.recall, 1.0);
        assert!((s.f1 - 0.8).abs() < 1e-15, "{}", s.f1);
    }

    #[test]
    fn rouge2_fixture_half() {
        let s = rouge_n(&words("a b c"), &words("a b d"), 2).unwrap();
        assert_eq!(s.precision, 0.5);
        assert_eq!(s.recall, 0.5);
        assert_eq!(s.f1, 0.5);
    }

    #[test]
    fn rouge_l_fixture_two_thirds() {
        let s = rouge_l(&words("a c b"), &words("a b c"));
        assert_eq!(lcs_len(&words("a c b"), &words("a b c")), 2);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_sequences_score_one() {
        let x = words("update foo is bar .");
        for n in 1..=2 {
            let s = rouge_n(&x, &x, n).unwrap();
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        let s = rouge_l(&x, &x);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_and_empty_sequences_score_zero() {
        let s = rouge_l(&words("x y"), &words("p q"));
        assert_eq!(s.f1, 0.0);
        // Short sequences have no bigrams: zero score, not an error.
        let s = rouge_n(&words("x"), &words("x"), 2).unwrap();
        assert_eq!(s.f1, 0.0);
        let s = rouge_n::<String>(&[], &words("x"), 1).unwrap();
        assert_eq!(s.f1, 0.0);
        assert!(matches!(rouge_n(&words("x"), &words("x"), 0), Err(Error::Config(_))));
    }

    #[test]
    fn clipping_caps_repeated_candidate_tokens() {
        // "a a a" vs "a": only one 'a' is creditable.
        let s = rouge_n(&words("a a a"), &words("a"), 1).unwrap();
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.recall, 1.0);
        // Reference with two 'a's credits at most two.
        let s = rouge_n(&words("a a a"), &words("a a"), 1).unwrap();
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn case_folding_and_tokenization() {
        assert_eq!(word_tokens("The Cat  SAT ."), vec!["the", "cat", "sat", "."]);
        let s = rouge_n(&words("The CAT"), &words("the cat"), 1).unwrap();
        assert_eq!(s.f1, 1.0);
    }

    /// Textbook full-table LCS, kept deliberately different from the
    /// two-row production code.
    fn lcs_oracle(a: &[u8], b: &[u8]) -> usize {
        let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                table[i][j] = if a[i - 1] == b[j - 1] {
                    table[i - 1][j - 1] + 1
                } else {
                    table[i - 1][j].max(table[i][j - 1])
                };
            }
        }
        table[a.len()][b.len()]
    }

    #[test]
    fn lcs_matches_full_table_oracle_exhaustively_short() {
        // Every pair of sequences up to length 5 over a 3-symbol alphabet.
        let mut seqs: Vec<Vec<u8>> = vec![Vec::new()];
        for len in 1..=5usize {
            let count = 3usize.pow(len as u32);
            for code in 0..count {
                let mut c = code;
                let mut s = Vec::with_capacity(len);
                for _ in 0..len {
                    s.push((c % 3) as u8);
                    c /= 3;
                }
                seqs.push(s);
            }
        }
        for a in &seqs {
            for b in &seqs {
                assert_eq!(lcs_len(a, b), lcs_oracle(a, b), "a={a:?} b={b:?}");
            }
        }
    }

    #[test]
    fn lcs_matches_oracle_on_random_longer_sequences() {
        let mut rng = crate::rng::Rng::new(5);
        for _ in 0..2000 {
            let la = (rng.next_below(12) + 1) as usize;
            let lb = (rng.next_below(12) + 1) as usize;
            let a: Vec<u8> = (0..la).map(|_| (rng.next_below(4)) as u8).collect();
            let b: Vec<u8> = (0..lb).map(|_| (rng.next_below(4)) as u8).collect();
            assert_eq!(lcs_len(&a, &b), lcs_oracle(&a, &b));
        }
    }

    /// Deterministic teacher model: maps every context to a fixed next
    /// token via lookup, emitting one-hot logits rows.
    struct ScriptedLm {
        vocab: usize,
        max_len: usize,
        next: std::collections::HashMap<Vec<u32>, u32>,
    }

    impl ScriptedLm {
        /// Teach the model to continue each prompt with its summary
        /// tokens followed by the end marker.
        fn teaching(pairs: &[(Vec<u32>, Vec<u32>)], vocab: usize, max_len: usize) -> Self {
            let mut next = std::collections::HashMap::new();
            for (prompt, continuation) in pairs {
                let mut ctx = prompt.clone();
                for &t in continuation {
                    next.insert(ctx.clone(), t);
                    ctx.push(t);
                }
            }
            ScriptedLm { vocab, max_len, next }
        }
    }

    impl CausalLm<f32> for ScriptedLm {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn max_seq_len(&self) -> usize {
            self.max_len
        }
        fn logits(&self, tokens: &[u32]) -> Result<Tensor<f32>> {
            if tokens.len() > self.max_len {
                return Err(Error::Length { len: tokens.len(), max: self.max_len });
            }
            let target = self.next.get(tokens).copied().unwrap_or(EOS);
            let mut data = vec![0.0f32; tokens.len() * self.vocab];
            let last = (tokens.len() - 1) * self.vocab;
            data[last + target as usize] = 1.0;
            Tensor::new(data, vec![tokens.len(), self.vocab])
        }
    }

    fn tiny_eval_fixture() -> (Tokenizer, Vec<Example>) {
        let examples = vec![
            Example::new("update foo is bar .", "foo bar"),
            Example::new("the small cat sat .", "cat sat"),
        ];
        let tok = Tokenizer::build(&examples, None).unwrap();
        (tok, examples)
    }

    #[test]
    fn echo_model_scores_one_everywhere() {
        let (tok, examples) = tiny_eval_fixture();
        let max_len = 64;
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = examples
            .iter()
            .map(|ex| {
                let prompt = summary_prompt(&tok, ex, max_len).unwrap();
                let mut cont = tok.encode(&ex.summary).unwrap();
                cont.push(EOS);
                (prompt, cont)
            })
            .collect();
        let model = ScriptedLm::teaching(&pairs, tok.vocab_size(), max_len);
        let scores = evaluate_model(&model, "Echo", &examples, &tok, 16).unwrap();
        assert!(scores.warnings.is_empty(), "{:?}", scores.warnings);
        assert_eq!(scores.rouge1.f1, 1.0);
        assert_eq!(scores.rouge2.f1, 1.0);
        assert_eq!(scores.rouge_l.f1, 1.0);
    }

    #[test]
    fn averaging_matches_per_example_recomputation() {
        let (tok, examples) = tiny_eval_fixture();
        let max_len = 64;
        // Teach only the first example; the second gets bare <eos>.
        let prompt0 = summary_prompt(&tok, &examples[0], max_len).unwrap();
        let mut cont0 = tok.encode(&examples[0].summary).unwrap();
        cont0.push(EOS);
        let model = ScriptedLm::teaching(&[(prompt0, cont0)], tok.vocab_size(), max_len);
        let scores = evaluate_model(&model, "Partial", &examples, &tok, 16).unwrap();

        // Recompute by hand from the model's own generations.
        let mut sum_f1 = [0.0f64; 3];
        for ex in &examples {
            let prompt = summary_prompt(&tok, ex, max_len).unwrap();
            let generated = generate_greedy(&model, &prompt, 16).unwrap();
            let text = tok.decode_content(&generated);
            let s = score_texts(&text, &ex.summary).unwrap();
            for v in 0..3 {
                sum_f1[v] += s[v].f1;
            }
        }
        let n = examples.len() as f64;
        assert!((scores.rouge1.f1 - sum_f1[0] / n).abs() < 1e-12);
        assert!((scores.rouge2.f1 - sum_f1[1] / n).abs() < 1e-12);
        assert!((scores.rouge_l.f1 - sum_f1[2] / n).abs() < 1e-12);
        // Exactly one of two examples echoes: ROUGE-1 mean is 0.5.
        assert_eq!(scores.rouge1.f1, 0.5);
    }

    #[test]
    fn generation_failure_scores_zero_with_warning() {
        let (tok, examples) = tiny_eval_fixture();
        // Context too small to even hold the prompt: every generation
        // fails, nothing aborts.
        let model = ScriptedLm::teaching(&[], tok.vocab_size(), 3);
        let err = evaluate_model(&model, "Tiny", &examples, &tok, 8);
        // max_seq_len 3 < SUMMARY_BUDGET + 4 → prompt construction itself
        // reports a config error per example, recorded as warnings.
        let scores = err.unwrap();
        assert_eq!(scores.warnings.len(), 2);
        assert_eq!(scores.rouge1.f1, 0.0);
        assert_eq!(scores.rouge_l.f1, 0.0);
    }

    #[test]
    fn score_table_formats() {
        let (tok, examples) = tiny_eval_fixture();
        let max_len = 64;
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = examples
            .iter()
            .map(|ex| {
                let prompt = summary_prompt(&tok, ex, max_len).unwrap();
                let mut cont = tok.encode(&ex.summary).unwrap();
                cont.push(EOS);
                (prompt, cont)
            })
            .collect();
        let echo = ScriptedLm::teaching(&pairs, tok.vocab_size(), max_len);
        let silent = ScriptedLm::teaching(&[], tok.vocab_size(), max_len);
        let table = evaluate_models(
            &[("Base", &silent as &dyn CausalLm<f32>), ("Fine-tuned", &echo)],
            &examples,
            &tok,
            16,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.row("Fine-tuned").unwrap().rouge1.f1 > table.row("Base").unwrap().rouge1.f1);
        let csv = table.to_csv();
        assert!(csv.starts_with("model,rouge1_precision"));
        assert_eq!(csv.lines().count(), 3);
        let text = table.to_text();
        assert!(text.contains("ROUGE-1") && text.contains("ROUGE-L"));
        assert!(text.contains("1.0000"), "{text}");
    }
}
