//! Corpus BLEU, ROUGE-L and CIDEr over tokenized stories.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SCALE: f64 = 10.0;

/// A candidate story and its references, each a concatenation of sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> Self {
        let own = |s: &[S]| s.iter().map(|t| t.as_ref().to_string()).collect::<Vec<_>>();
        Self {
            candidate: own(candidate),
            references: references.iter().map(|r| own(r)).collect(),
        }
    }
}

fn check(corpus: &[EvalPair]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    if corpus.iter().any(|p| p.references.is_empty()) {
        return Err(Error::Empty("reference list"));
    }
    Ok(())
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-1 through BLEU-`max_n`.
pub fn bleu(corpus: &[EvalPair], max_n: usize) -> Result<Vec<f64>> {
    check(corpus)?;
    if !(1..=4).contains(&max_n) {
        return Err(Error::Config(format!("BLEU order {max_n} outside 1..=4")));
    }
    let mut matched = vec![0usize; max_n];
    let mut possible = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for pair in corpus {
        let c = pair.candidate.len();
        cand_len += c;
        ref_len += pair
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("non-empty references");
        for n in 1..=max_n {
            let cand = ngrams(&pair.candidate, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &pair.references {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cand {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                possible[n - 1] += k;
            }
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut scores = Vec::with_capacity(max_n);
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 || possible[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / possible[n] as f64).ln();
        }
        scores.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    Ok(scores)
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn rouge_pair(candidate: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over pairs of the best LCS F-measure against any reference.
pub fn rouge_l(corpus: &[EvalPair]) -> Result<f64> {
    check(corpus)?;
    let total: f64 = corpus
        .iter()
        .map(|pair| pair.references.iter().map(|r| rouge_pair(&pair.candidate, r)).fold(0.0, f64::max))
        .sum();
    Ok(total / corpus.len() as f64)
}

fn tfidf<'a>(counts: &HashMap<&'a [String], usize>, idf: &HashMap<&[String], f64>, default_idf: f64) -> (HashMap<&'a [String], f64>, f64) {
    let mut norm = 0.0;
    let vec: HashMap<&[String], f64> = counts
        .iter()
        .map(|(g, k)| {
            let w = *k as f64 * idf.get(g).copied().unwrap_or(default_idf);
            norm += w * w;
            (*g, w)
        })
        .collect();
    (vec, norm.sqrt())
}

/// Consensus score: TF-IDF n-gram cosine averaged over references and n = 1..4, times 10.
///
/// Document frequencies count the pairs whose references contain an n-gram;
/// idf is `ln((N + 1) / max(1, df))` so a one-pair corpus still weighs its n-grams.
pub fn cider(corpus: &[EvalPair]) -> Result<f64> {
    check(corpus)?;
    let n_docs = corpus.len() as f64;
    let default_idf = (n_docs + 1.0).ln();
    let mut total = 0.0;
    let mut per_n: Vec<HashMap<&[String], f64>> = Vec::with_capacity(CIDER_MAX_N);
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for pair in corpus {
            let seen: HashSet<&[String]> = pair.references.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        per_n.push(
            df.into_iter()
                .map(|(g, d)| (g, ((n_docs + 1.0) / d.max(1) as f64).ln()))
                .collect(),
        );
    }
    for pair in corpus {
        let mut score = 0.0;
        for (n, idf) in (1..=CIDER_MAX_N).zip(&per_n) {
            let (cand, cand_norm) = tfidf(&ngrams(&pair.candidate, n), idf, default_idf);
            let mut sum = 0.0;
            for r in &pair.references {
                let (refv, ref_norm) = tfidf(&ngrams(r, n), idf, default_idf);
                if cand_norm == 0.0 || ref_norm == 0.0 {
                    continue;
                }
                let dot: f64 = cand.iter().map(|(g, w)| w * refv.get(g).copied().unwrap_or(0.0)).sum();
                sum += (dot / (cand_norm * ref_norm)).min(1.0);
            }
            score += sum / pair.references.len() as f64;
        }
        total += CIDER_SCALE * score / CIDER_MAX_N as f64;
    }
    Ok(total / n_docs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub bleu: Vec<f64>,
    pub rouge_l: f64,
    pub cider: f64,
    pub corpus_size: usize,
}

impl MetricSummary {
    pub fn compute(corpus: &[EvalPair]) -> Result<Self> {
        Ok(Self {
            bleu: bleu(corpus, 4)?,
            rouge_l: rouge_l(corpus)?,
            cider: cider(corpus)?,
            corpus_size: corpus.len(),
        })
    }

    /// `(name, value)` in reporting order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .bleu
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("BLEU-{}", i + 1), *v))
            .collect();
        rows.push(("ROUGE-L".into(), self.rouge_l));
        rows.push(("CIDEr".into(), self.cider));
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn pair(c: &str, refs: &[&str]) -> EvalPair {
        EvalPair {
            candidate: toks(c),
            references: refs.iter().map(|r| toks(r)).collect(),
        }
    }

    #[test]
    fn bleu_golden() {
        let b = bleu(&[pair("the the the", &["the cat"])], 1).unwrap();
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-15);
        let same = bleu(&[pair("a b c d e", &["a b c d e"])], 4).unwrap();
        assert_eq!(same, vec![1.0; 4]);
        assert_eq!(bleu(&[pair("x y", &["a b"])], 1).unwrap(), vec![0.0]);
        assert!(bleu(&[], 4).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        // 2 of 2 unigrams match, reference length 4.
        let b = bleu(&[pair("a b", &["a b c d"])], 1).unwrap();
        assert!((b[0] - (1.0f64 - 2.0).exp()).abs() < 1e-15);
        // Closest reference length wins.
        let b = bleu(&[pair("a b", &["a b c d", "a b x"])], 1).unwrap();
        assert!((b[0] - (1.0f64 - 1.5).exp()).abs() < 1e-15);
    }

    #[test]
    fn rouge_golden() {
        let r = rouge_l(&[pair("a c d", &["a b c d"])]).unwrap();
        let (p, rec) = (1.0, 0.75);
        let b2 = 1.2f64 * 1.2;
        assert!((r - (1.0 + b2) * p * rec / (rec + b2 * p)).abs() < 1e-9);
        assert_eq!(rouge_l(&[pair("a b c", &["a b c"])]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[pair("", &["a b c"])]).unwrap(), 0.0);
        assert_eq!(lcs_len(&toks("a b c b d a b"), &toks("b d c a b a")), 4);
    }

    #[test]
    fn cider_golden() {
        let c = cider(&[pair("we went to the park today", &["we went to the park today"])]).unwrap();
        assert!((c - 10.0).abs() < 1e-9);
        assert_eq!(cider(&[pair("x y z w", &["a b c d"])]).unwrap(), 0.0);
        // Two pairs: each n-gram of the first reference appears in one document.
        let corpus = [pair("a b c d", &["a b c d"]), pair("e f g h", &["e f g h", "a b"])];
        let c = cider(&corpus).unwrap();
        assert!(c > 0.0 && c <= 10.0);
    }

    #[test]
    fn cider_matches_direct_oracle() {
        let corpus = [pair("a b a c", &["a b c", "b a c"]), pair("c d", &["c d d"])];
        let got = cider(&corpus).unwrap();
        // Oracle for n = 1, 2 only; higher orders contribute zero here except where
        // candidates have no n-grams.
        let df1: HashMap<&str, f64> = [("a", 1.0), ("b", 1.0), ("c", 2.0), ("d", 1.0)].into_iter().collect();
        let idf = |g: &str| (3.0f64 / df1[g]).ln();
        let cos = |x: &[(&str, f64)], y: &[(&str, f64)]| {
            let dot: f64 = x.iter().map(|(g, w)| w * y.iter().find(|(h, _)| h == g).map_or(0.0, |p| p.1)).sum();
            let nx: f64 = x.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            dot / (nx * ny)
        };
        let c1 = [("a", 2.0 * idf("a")), ("b", idf("b")), ("c", idf("c"))];
        let r1 = [("a", idf("a")), ("b", idf("b")), ("c", idf("c"))];
        let uni1 = cos(&c1, &r1);
        // Bigrams: candidate {ab, ba, ac}; refs {ab, bc} and {ba, ac}; each bigram in one doc.
        let w = (3.0f64 / 1.0).ln();
        let bi_a = cos(&[("ab", w), ("ba", w), ("ac", w)], &[("ab", w), ("bc", w)]);
        let bi_b = cos(&[("ab", w), ("ba", w), ("ac", w)], &[("ba", w), ("ac", w)]);
        // Trigrams: candidate {aba, bac}; refs {abc} and {bac}.
        let tri = (0.0 + 1.0 / 2f64.sqrt()) / 2.0;
        let first = 10.0 * (uni1 + (bi_a + bi_b) / 2.0 + tri) / 4.0;
        let c2 = [("c", idf("c")), ("d", idf("d"))];
        let r2 = [("c", idf("c")), ("d", 2.0 * idf("d"))];
        let second = 10.0 * (cos(&c2, &r2) + 1.0 / 2f64.sqrt()) / 4.0;
        assert!((got - (first + second) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn summary_rows() {
        let s = MetricSummary::compute(&[pair("a b c d", &["a b c d"])]).unwrap();
        let names: Vec<String> = s.rows().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr"]);
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..9)
            .prop_map(|v| v.into_iter().map(str::to_string).collect())
    }

    fn corpus() -> impl Strategy<Value = Vec<EvalPair>> {
        prop::collection::vec(
            (sentence(), prop::collection::vec(sentence(), 1..4))
                .prop_map(|(candidate, references)| EvalPair { candidate, references }),
            1..5,
        )
    }

    proptest! {
        #[test]
        fn metrics_are_bounded(c in corpus()) {
            for b in bleu(&c, 4).unwrap() {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            }
            let r = rouge_l(&c).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
            let d = cider(&c).unwrap();
            prop_assert!((0.0..=10.0 + 1e-9).contains(&d));
        }

        #[test]
        fn duplicate_reference_keeps_bleu(c in corpus()) {
            let mut dup = c.clone();
            for p in &mut dup {
                let first = p.references[0].clone();
                p.references.push(first);
            }
            prop_assert_eq!(bleu(&c, 4).unwrap(), bleu(&dup, 4).unwrap());
        }

        #[test]
        fn cider_ignores_reference_order(c in corpus()) {
            let mut rev = c.clone();
            for p in &mut rev {
                p.references.reverse();
            }
            prop_assert!((cider(&c).unwrap() - cider(&rev).unwrap()).abs() < 1e-12);
        }
    }
}
