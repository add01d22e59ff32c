//! Text-generation and scene-graph metrics.
//!
//! All text metrics work on [`normalize`]d tokens. METEOR here is the
//! exact-match variant (no stemming or synonyms); CIDEr has no length
//! penalty or clipping.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scenegen::{EntityClass, Predicate, Triple};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_MAX_N: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalCorpus {
    pub items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn push(&mut self, candidate: impl Into<String>, references: Vec<String>) -> Result<()> {
        if references.is_empty() {
            return Err(Error::Contract("eval item needs at least one reference".into()));
        }
        self.items.push(EvalItem {
            candidate: candidate.into(),
            references,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn nonempty(&self, what: &str) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Contract(format!("{what} needs a nonempty corpus")));
        }
        if self.items.iter().any(|i| i.references.is_empty()) {
            return Err(Error::Contract("eval item needs at least one reference".into()));
        }
        Ok(())
    }
}

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn mean_percent(scores: Vec<f64>) -> f64 {
    100.0 * scores.iter().sum::<f64>() / scores.len() as f64
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

fn rouge_item(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .map(|r| {
            let l = lcs_len(cand, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let rec = l / r.len() as f64;
            let prec = l / cand.len() as f64;
            (1.0 + b2) * rec * prec / (rec + b2 * prec)
        })
        .fold(0.0, f64::max)
}

pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64> {
    corpus.nonempty("rouge_l")?;
    Ok(mean_percent(
        corpus
            .items
            .par_iter()
            .map(|it| {
                let refs: Vec<_> = it.references.iter().map(|r| normalize(r)).collect();
                rouge_item(&normalize(&it.candidate), &refs)
            })
            .collect(),
    ))
}

/// Maximum number of exact unigram matches and, among alignments reaching
/// it, the fewest chunks (runs contiguous in both strings).
pub fn meteor_alignment(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut ref_count: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *ref_count.entry(w).or_default() += 1;
    }
    let mut cand_count: HashMap<&str, usize> = HashMap::new();
    for w in cand {
        *cand_count.entry(w).or_default() += 1;
    }
    // How many occurrences of each word may stay unmatched at max matches.
    let slack: HashMap<&str, usize> = cand_count
        .iter()
        .map(|(&w, &c)| (w, c - c.min(ref_count.get(w).copied().unwrap_or(0))))
        .collect();
    let matches: usize = cand_count
        .iter()
        .map(|(w, &c)| c.min(ref_count.get(w).copied().unwrap_or(0)))
        .sum();
    if matches == 0 {
        return (0, 0);
    }
    let mut search = ChunkSearch {
        cand,
        reference,
        memo: HashMap::new(),
    };
    let mut used = vec![false; reference.len()];
    let mut slack = slack;
    let chunks = search.best(0, &mut used, None, &mut slack);
    (matches, chunks)
}

struct ChunkSearch<'a> {
    cand: &'a [String],
    reference: &'a [String],
    memo: HashMap<(usize, Vec<bool>, Option<usize>), usize>,
}

impl<'a> ChunkSearch<'a> {
    /// Fewest chunks for `cand[i..]` given used reference slots and the
    /// reference position matched by `cand[i-1]`.
    fn best(
        &mut self,
        i: usize,
        used: &mut Vec<bool>,
        prev: Option<usize>,
        slack: &mut HashMap<&'a str, usize>,
    ) -> usize {
        if i == self.cand.len() {
            return 0;
        }
        let key = (i, used.clone(), prev);
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let w = self.cand[i].as_str();
        let mut best = usize::MAX;
        for j in 0..self.reference.len() {
            if used[j] || self.reference[j] != w {
                continue;
            }
            used[j] = true;
            let start = usize::from(prev.is_none_or(|p| p + 1 != j));
            let rest = self.best(i + 1, used, Some(j), slack);
            used[j] = false;
            if rest != usize::MAX {
                best = best.min(start + rest);
            }
        }
        let s = slack.get(w).copied().unwrap_or(0);
        if s > 0 {
            slack.insert(w, s - 1);
            let rest = self.best(i + 1, used, None, slack);
            slack.insert(w, s);
            best = best.min(rest);
        }
        self.memo.insert(key, best);
        best
    }
}

fn meteor_pair(cand: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = meteor_alignment(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

pub fn meteor_simplified(corpus: &EvalCorpus) -> Result<f64> {
    corpus.nonempty("meteor")?;
    Ok(mean_percent(
        corpus
            .items
            .par_iter()
            .map(|it| {
                let c = normalize(&it.candidate);
                it.references
                    .iter()
                    .map(|r| meteor_pair(&c, &normalize(r)))
                    .fold(0.0, f64::max)
            })
            .collect(),
    ))
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, f64> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

fn tfidf_cosine(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>, idf: &dyn Fn(&[String]) -> f64) -> f64 {
    let weight = |m: &BTreeMap<Vec<String>, f64>| -> BTreeMap<Vec<String>, f64> {
        m.iter().map(|(g, c)| (g.clone(), c * idf(g))).collect()
    };
    let (wa, wb) = (weight(a), weight(b));
    let na = wa.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = wb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = wa.iter().filter_map(|(g, x)| wb.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

/// CIDEr over n = 1..4, scaled to [0, 10]. IDF comes from the corpus
/// references and is floored at 0.
pub fn cider(corpus: &EvalCorpus) -> Result<f64> {
    corpus.nonempty("cider")?;
    if corpus.len() < 2 {
        return Err(Error::Contract("cider needs at least 2 corpus items".into()));
    }
    let n_items = corpus.len() as f64;
    let norm: Vec<(Vec<String>, Vec<Vec<String>>)> = corpus
        .items
        .iter()
        .map(|it| (normalize(&it.candidate), it.references.iter().map(|r| normalize(r)).collect()))
        .collect();
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for (_, refs) in &norm {
        let mut seen = HashSet::new();
        for r in refs {
            for n in 1..=CIDER_MAX_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_default() += 1;
        }
    }
    let idf = |g: &[String]| (n_items / (1.0 + df.get(g).copied().unwrap_or(0) as f64)).ln().max(0.0);
    let scores: Vec<f64> = norm
        .par_iter()
        .map(|(c, refs)| {
            let per_n: f64 = (1..=CIDER_MAX_N)
                .map(|n| {
                    let cv = ngram_counts(c, n);
                    refs.iter().map(|r| tfidf_cosine(&cv, &ngram_counts(r, n), &idf)).sum::<f64>() / refs.len() as f64
                })
                .sum();
            10.0 * per_n / CIDER_MAX_N as f64
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn em_at_1(corpus: &EvalCorpus) -> Result<f64> {
    corpus.nonempty("em_at_1")?;
    Ok(mean_percent(
        corpus
            .items
            .iter()
            .map(|it| {
                let c = normalize(&it.candidate);
                f64::from(u8::from(it.references.iter().any(|r| normalize(r) == c)))
            })
            .collect(),
    ))
}

/// Parsed scene-graph answer. Malformed segments count as wrong
/// predictions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedTriples {
    pub triples: Vec<Triple>,
    pub malformed: usize,
}

impl ParsedTriples {
    pub fn predicted(&self) -> usize {
        self.triples.len() + self.malformed
    }
}

pub fn parse_triples(answer: &str) -> ParsedTriples {
    let mut out = ParsedTriples::default();
    for seg in answer.split(';') {
        let seg = seg.trim();
        if seg.is_empty() {
            continue;
        }
        let fields: Vec<&str> = seg.split('|').map(str::trim).collect();
        let parsed = match fields[..] {
            [s, p, o] => (|| {
                Some(Triple::new(
                    EntityClass::from_name(s)?,
                    Predicate::from_name(p)?,
                    EntityClass::from_name(o)?,
                ))
            })(),
            _ => None,
        };
        match parsed {
            Some(t) => out.triples.push(t),
            None => out.malformed += 1,
        }
    }
    out
}

/// Triple counts for precision and recall.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SggCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SggCounts {
    pub fn of(predicted: &ParsedTriples, gold: &[Triple]) -> Self {
        let gold: HashSet<&Triple> = gold.iter().collect();
        let mut hit = HashSet::new();
        let correct = predicted
            .triples
            .iter()
            .filter(|t| gold.contains(t) && hit.insert(**t))
            .count();
        Self {
            correct,
            predicted: predicted.predicted(),
            gold: gold.len(),
        }
    }

    pub fn add(self, o: Self) -> Self {
        Self {
            correct: self.correct + o.correct,
            predicted: self.predicted + o.predicted,
            gold: self.gold + o.gold,
        }
    }

    /// `(P, R, F1)` in percent.
    pub fn prf(&self) -> (f64, f64, f64) {
        let p = match (self.predicted, self.gold) {
            (0, 0) => 100.0,
            (0, _) => 0.0,
            (n, _) => 100.0 * self.correct as f64 / n as f64,
        };
        let r = if self.gold == 0 {
            100.0
        } else {
            100.0 * self.correct as f64 / self.gold as f64
        };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

pub fn sgg_prf(predicted: &ParsedTriples, gold: &[Triple]) -> (f64, f64, f64) {
    SggCounts::of(predicted, gold).prf()
}

/// Pooled over items (micro average).
pub fn sgg_corpus(items: &[(ParsedTriples, Vec<Triple>)]) -> (f64, f64, f64) {
    items
        .iter()
        .map(|(p, g)| SggCounts::of(p, g))
        .fold(SggCounts::default(), SggCounts::add)
        .prf()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rouge_l: Option<f64>,
    pub meteor: Option<f64>,
    pub cider: Option<f64>,
    pub em_at_1: Option<f64>,
    pub sgg_p: Option<f64>,
    pub sgg_r: Option<f64>,
    pub sgg_f1: Option<f64>,
    pub qa_items: usize,
    pub sgg_items: usize,
    /// Extra `key, value` lines (run configuration).
    pub echo: Vec<(String, String)>,
}

impl MetricReport {
    pub fn from_qa(&mut self, corpus: &EvalCorpus) -> Result<()> {
        self.rouge_l = Some(rouge_l(corpus)?);
        self.meteor = Some(meteor_simplified(corpus)?);
        self.cider = Some(if corpus.len() >= 2 { cider(corpus)? } else { 0.0 });
        self.em_at_1 = Some(em_at_1(corpus)?);
        self.qa_items = corpus.len();
        Ok(())
    }

    pub fn from_sgg(&mut self, items: &[(ParsedTriples, Vec<Triple>)]) {
        let (p, r, f) = sgg_corpus(items);
        self.sgg_p = Some(p);
        self.sgg_r = Some(r);
        self.sgg_f1 = Some(f);
        self.sgg_items = items.len();
    }

    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        [
            ("rouge_l", self.rouge_l),
            ("meteor_simplified", self.meteor),
            ("cider", self.cider),
            ("em_at_1", self.em_at_1),
            ("sgg_p", self.sgg_p),
            ("sgg_r", self.sgg_r),
            ("sgg_f1", self.sgg_f1),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows().into_iter().find(|(k, _)| *k == metric).map(|(_, v)| v)
    }

    /// Metric config block (`# key\tvalue`), then `metric\tvalue` rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("# {k}\t{v}\n"));
        line("metric.rouge_beta", ROUGE_BETA.to_string());
        line("metric.cider_ngrams", format!("1..{CIDER_MAX_N}"));
        line("metric.cider_variant", "tf-idf cosine, no length penalty, idf floored at 0".into());
        line("metric.meteor_variant", "exact unigram matches only, not comparable to full METEOR".into());
        line("metric.normalization", "lowercase, strip ascii punctuation, split on whitespace".into());
        line("metric.sgg", "micro over items, duplicate triples count as wrong".into());
        line("count.qa_items", self.qa_items.to_string());
        line("count.sgg_items", self.sgg_items.to_string());
        for (k, v) in &self.echo {
            line(k, v.clone());
        }
        s.push_str("metric\tvalue\n");
        for (k, v) in self.rows() {
            s.push_str(&format!("{k}\t{v:.6}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corpus(items: &[(&str, &[&str])]) -> EvalCorpus {
        let mut c = EvalCorpus::default();
        for (cand, refs) in items {
            c.push(*cand, refs.iter().map(|s| s.to_string()).collect()).unwrap();
        }
        c
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize("The Patient, lies."), vec!["the", "patient", "lies"]);
        assert!(normalize("").is_empty());
    }

    #[test]
    fn rouge_hand_cases() {
        let c = corpus(&[("the patient lies on table", &["the patient is on the table"])]);
        assert!((rouge_l(&c).unwrap() - 71.56).abs() < 1e-2);
        let c = corpus(&[("a b c", &["a b c"])]);
        assert_eq!(rouge_l(&c).unwrap(), 100.0);
        let c = corpus(&[("a b", &["c d"])]);
        assert_eq!(rouge_l(&c).unwrap(), 0.0);
        let c = corpus(&[("", &[""])]);
        assert_eq!(rouge_l(&c).unwrap(), 0.0);
        assert!(rouge_l(&EvalCorpus::default()).is_err());
    }

    #[test]
    fn meteor_hand_cases() {
        let c = corpus(&[("a b c d", &["a b c d"])]);
        assert!((meteor_simplified(&c).unwrap() - 100.0 * (1.0 - 0.5 / 64.0)).abs() < 1e-9);
        let c = corpus(&[("word", &["word"])]);
        assert!((meteor_simplified(&c).unwrap() - 50.0).abs() < 1e-12);
        let c = corpus(&[("x y", &["a b"])]);
        assert_eq!(meteor_simplified(&c).unwrap(), 0.0);
        // "a b" reused: best alignment keeps the contiguous pair.
        assert_eq!(meteor_alignment(&toks("a b a"), &toks("c a b")), (2, 1));
    }

    #[test]
    fn em_cases() {
        let c = corpus(&[("ON TOP OF the table.", &["on top of the table"])]);
        assert_eq!(em_at_1(&c).unwrap(), 100.0);
        let c = corpus(&[("on top of the table x", &["on top of the table"])]);
        assert_eq!(em_at_1(&c).unwrap(), 0.0);
        let c = corpus(&[("", &["yes"])]);
        assert_eq!(em_at_1(&c).unwrap(), 0.0);
    }

    #[test]
    fn cider_edge_cases() {
        let c = corpus(&[("a b", &["a b"])]);
        assert!(matches!(cider(&c), Err(Error::Contract(_))));
        let c = corpus(&[("x y", &["a b"]), ("z", &["c d"])]);
        assert_eq!(cider(&c).unwrap(), 0.0);
    }

    #[test]
    fn sgg_cases() {
        let gold = parse_triples(
            "patient|on_top_of|operating_table; nurse|next_to|instrument_tray; surgeon|left_of|nurse; nurse|right_of|surgeon",
        );
        assert_eq!(gold.triples.len(), 4);
        assert_eq!(sgg_prf(&gold, &gold.triples), (100.0, 100.0, 100.0));
        let mut pred = gold.clone();
        pred.triples.push(Triple::new(EntityClass::Monitor, Predicate::Behind, EntityClass::Nurse));
        let (p, r, f) = sgg_prf(&pred, &gold.triples);
        assert!((p - 80.0).abs() < 1e-9 && (r - 100.0).abs() < 1e-9 && (f - 88.888_888_888_9).abs() < 1e-6);
        assert_eq!(sgg_prf(&ParsedTriples::default(), &gold.triples), (0.0, 0.0, 0.0));
        assert_eq!(sgg_prf(&ParsedTriples::default(), &[]), (100.0, 100.0, 100.0));

        let junk = parse_triples("garbage segment");
        assert_eq!((junk.triples.len(), junk.malformed), (0, 1));
        assert_eq!(parse_triples(""), ParsedTriples::default());
        let dup = parse_triples("patient|on_top_of|operating_table; patient|on_top_of|operating_table");
        let (p, r, _) = sgg_prf(&dup, &gold.triples[..1]);
        assert_eq!((p, r), (50.0, 100.0));
    }

    // ---- brute-force oracles ----

    fn lcs_rec(a: &[String], b: &[String]) -> usize {
        match (a.split_first(), b.split_first()) {
            (Some((x, ra)), Some((y, rb))) => {
                if x == y {
                    1 + lcs_rec(ra, rb)
                } else {
                    lcs_rec(ra, b).max(lcs_rec(a, rb))
                }
            }
            _ => 0,
        }
    }

    fn rouge_oracle(c: &EvalCorpus) -> f64 {
        let mut total = 0.0;
        for it in &c.items {
            let cand = normalize(&it.candidate);
            let mut best: f64 = 0.0;
            for r in &it.references {
                let r = normalize(r);
                let l = lcs_rec(&cand, &r) as f64;
                if l > 0.0 {
                    let (rec, prec) = (l / r.len() as f64, l / cand.len() as f64);
                    best = best.max(2.44 * rec * prec / (rec + 1.44 * prec));
                }
            }
            total += best;
        }
        100.0 * total / c.len() as f64
    }

    /// Enumerates every partial injective map cand -> ref over equal words.
    fn alignments(c: &[String], r: &[String], i: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if i == c.len() {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        alignments(c, r, i + 1, used, cur, out);
        cur.pop();
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                cur.push(Some(j));
                alignments(c, r, i + 1, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }

    fn meteor_oracle_pair(c: &[String], r: &[String]) -> f64 {
        let mut all = Vec::new();
        alignments(c, r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut all);
        let mut best: Option<(usize, usize)> = None;
        for a in &all {
            let m = a.iter().flatten().count();
            let mut chunks = 0;
            let mut prev: Option<usize> = None;
            for x in a {
                match x {
                    Some(j) => {
                        if prev.map_or(true, |p| p + 1 != *j) {
                            chunks += 1;
                        }
                        prev = Some(*j);
                    }
                    None => prev = None,
                }
            }
            let better = match best {
                None => true,
                Some((bm, bc)) => m > bm || (m == bm && chunks < bc),
            };
            if better {
                best = Some((m, chunks));
            }
        }
        let (m, ch) = best.unwrap();
        if m == 0 {
            return 0.0;
        }
        let p = m as f64 / c.len() as f64;
        let rr = m as f64 / r.len() as f64;
        10.0 * p * rr / (rr + 9.0 * p) * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3))
    }

    fn meteor_oracle(c: &EvalCorpus) -> f64 {
        let s: f64 = c
            .items
            .iter()
            .map(|it| {
                it.references
                    .iter()
                    .map(|r| meteor_oracle_pair(&normalize(&it.candidate), &normalize(r)))
                    .fold(0.0, f64::max)
            })
            .sum();
        100.0 * s / c.len() as f64
    }

    /// Explicit vectors over the union of every n-gram in the corpus.
    fn cider_oracle(c: &EvalCorpus) -> f64 {
        let n_items = c.len() as f64;
        let grams = |t: &[String], n: usize| -> Vec<Vec<String>> {
            if t.len() < n {
                vec![]
            } else {
                (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
            }
        };
        let mut total = 0.0;
        for it in &c.items {
            let cand = normalize(&it.candidate);
            let refs: Vec<Vec<String>> = it.references.iter().map(|r| normalize(r)).collect();
            let mut item = 0.0;
            for n in 1..=4 {
                let mut space: Vec<Vec<String>> = Vec::new();
                for other in &c.items {
                    for s in std::iter::once(&other.candidate).chain(&other.references) {
                        for g in grams(&normalize(s), n) {
                            if !space.contains(&g) {
                                space.push(g);
                            }
                        }
                    }
                }
                let idf: Vec<f64> = space
                    .iter()
                    .map(|g| {
                        let df = c
                            .items
                            .iter()
                            .filter(|o| o.references.iter().any(|r| grams(&normalize(r), n).contains(g)))
                            .count();
                        (n_items / (1.0 + df as f64)).ln().max(0.0)
                    })
                    .collect();
                let vec_of = |t: &[String]| -> Vec<f64> {
                    let gs = grams(t, n);
                    space
                        .iter()
                        .zip(&idf)
                        .map(|(g, w)| gs.iter().filter(|x| *x == g).count() as f64 * w)
                        .collect()
                };
                let cv = vec_of(&cand);
                let mut s = 0.0;
                for r in &refs {
                    let rv = vec_of(r);
                    let dot: f64 = cv.iter().zip(&rv).map(|(a, b)| a * b).sum();
                    let na = cv.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nb = rv.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if na > 0.0 && nb > 0.0 {
                        s += dot / (na * nb);
                    }
                }
                item += s / refs.len() as f64;
            }
            total += 10.0 * item / 4.0;
        }
        total / n_items
    }

    fn em_oracle(c: &EvalCorpus) -> f64 {
        let hits = c
            .items
            .iter()
            .filter(|it| it.references.iter().any(|r| normalize(r).join(" ") == normalize(&it.candidate).join(" ")))
            .count();
        100.0 * hits as f64 / c.len() as f64
    }

    fn random_corpus(rng: &mut ChaCha8Rng) -> EvalCorpus {
        let words = ["the", "patient", "is", "on", "table", "nurse", "left", "of", "a"];
        let sent = |rng: &mut ChaCha8Rng| -> String {
            let n = rng.gen_range(0..=7);
            (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        };
        let mut c = EvalCorpus::default();
        for _ in 0..rng.gen_range(2..=20) {
            let cand = sent(rng);
            let refs = (0..rng.gen_range(1..=3)).map(|_| sent(rng)).collect();
            c.push(cand, refs).unwrap();
        }
        c
    }

    #[test]
    fn text_metrics_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let c = random_corpus(&mut rng);
            assert!((rouge_l(&c).unwrap() - rouge_oracle(&c)).abs() < 1e-9);
            assert!((meteor_simplified(&c).unwrap() - meteor_oracle(&c)).abs() < 1e-9);
            assert!((cider(&c).unwrap() - cider_oracle(&c)).abs() < 1e-9);
            assert!((em_at_1(&c).unwrap() - em_oracle(&c)).abs() < 1e-9);
        }
    }

    fn sgg_oracle(pred: &[Option<Triple>], gold: &[Triple]) -> (f64, f64, f64) {
        let mut gold_set: Vec<Triple> = gold.to_vec();
        gold_set.sort();
        gold_set.dedup();
        let mut claimed = vec![false; gold_set.len()];
        let mut correct = 0;
        for t in pred.iter().flatten() {
            if let Some(i) = gold_set.iter().position(|g| g == t) {
                if !claimed[i] {
                    claimed[i] = true;
                    correct += 1;
                }
            }
        }
        let np = pred.len() as f64;
        let ng = gold_set.len() as f64;
        let p = if np == 0.0 { if ng == 0.0 { 100.0 } else { 0.0 } } else { 100.0 * correct as f64 / np };
        let r = if ng == 0.0 { 100.0 } else { 100.0 * correct as f64 / ng };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }

    #[test]
    fn sgg_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rand_triple = |rng: &mut ChaCha8Rng| {
            Triple::new(
                EntityClass::ALL[rng.gen_range(1..4)],
                Predicate::ALL[rng.gen_range(0..3)],
                EntityClass::ALL[rng.gen_range(1..4)],
            )
        };
        for _ in 0..50 {
            let gold: Vec<Triple> = (0..rng.gen_range(0..6)).map(|_| rand_triple(&mut rng)).collect();
            let mut gold_set = gold.clone();
            gold_set.sort();
            gold_set.dedup();
            let pred: Vec<Option<Triple>> = (0..rng.gen_range(0..8))
                .map(|_| rng.gen_bool(0.8).then(|| rand_triple(&mut rng)))
                .collect();
            let text = pred
                .iter()
                .map(|t| t.map_or("bad|segment".to_string(), |t| t.to_text()))
                .collect::<Vec<_>>()
                .join("; ");
            let got = sgg_prf(&parse_triples(&text), &gold_set);
            let want = sgg_oracle(&pred, &gold_set);
            assert!((got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9 && (got.2 - want.2).abs() < 1e-9);
        }
    }

    #[test]
    fn report_layout() {
        let mut r = MetricReport::default();
        r.from_qa(&corpus(&[("yes", &["yes"]), ("no", &["yes"])])).unwrap();
        r.echo.push(("config.seed".into(), "0".into()));
        let s = r.to_tsv();
        assert!(s.contains("# metric.rouge_beta\t1.2\n"));
        assert!(s.contains("# config.seed\t0\n"));
        assert!(s.contains("em_at_1\t50.000000\n"));
        assert!(!s.contains("sgg_f1"));
    }

    proptest! {
        #[test]
        fn normalize_idempotent(s in "[a-zA-Z ,.?!;|_-]{0,30}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once.join(" ")), once);
        }

        #[test]
        fn metrics_bounded_and_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_corpus(&mut rng);
            let mut rev = c.clone();
            rev.items.reverse();
            for f in [rouge_l, meteor_simplified, em_at_1] {
                let v = f(&c).unwrap();
                prop_assert!((0.0..=100.0).contains(&v));
                prop_assert!((v - f(&rev).unwrap()).abs() < 1e-9);
            }
            let v = cider(&c).unwrap();
            prop_assert!((0.0..=10.0).contains(&v));
            prop_assert!((v - cider(&rev).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn identical_corpus_maximizes(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = random_corpus(&mut rng);
            for it in &mut c.items {
                it.candidate = format!("{} w", it.references[0]);
                it.references = vec![it.candidate.clone()];
            }
            prop_assert_eq!(rouge_l(&c).unwrap(), 100.0);
            prop_assert_eq!(em_at_1(&c).unwrap(), 100.0);
        }
    }
}
