//! Scratch reference implementations of the metrics, written for clarity
//! rather than speed. Shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if !ch.is_ascii_punctuation() {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Longest common subsequence by plain recursion.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ar)), Some((y, br))) => {
            if x == y {
                1 + lcs(ar, br)
            } else {
                lcs(ar, b).max(lcs(a, br))
            }
        }
        _ => 0,
    }
}

pub fn rouge(cand: &str, refs: &[String]) -> f64 {
    let c = words(cand);
    let mut best = 0.0f64;
    for r in refs {
        let r = words(r);
        let l = lcs(&c, &r) as f64;
        if l == 0.0 {
            continue;
        }
        let (rec, prec) = (l / r.len() as f64, l / c.len() as f64);
        let b2 = 1.2f64 * 1.2;
        best = best.max((1.0 + b2) * prec * rec / (rec + b2 * prec));
    }
    best
}

/// Every alignment: each candidate token either stays unmatched or takes a
/// free reference slot holding the same word. Returns (matches, chunks) of
/// the best one: most matches, then fewest chunks.
pub fn meteor_align(c: &[String], r: &[String]) -> (usize, usize) {
    fn go(i: usize, c: &[String], r: &[String], used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == c.len() {
            let m = pairs.len();
            let mut chunks = 0;
            for (k, &(ci, rj)) in pairs.iter().enumerate() {
                let cont = k > 0 && pairs[k - 1].0 + 1 == ci && pairs[k - 1].1 + 1 == rj;
                if !cont {
                    chunks += 1;
                }
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        go(i + 1, c, r, used, pairs, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                pairs.push((i, j));
                go(i + 1, c, r, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    go(0, c, r, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    best
}

pub fn meteor(cand: &str, refs: &[String]) -> f64 {
    let c = words(cand);
    refs.iter()
        .map(|r| {
            let r = words(r);
            let (m, ch) = meteor_align(&c, &r);
            if m == 0 {
                return 0.0;
            }
            let (p, rc) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
            let f = 10.0 * p * rc / (rc + 9.0 * p);
            f * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3))
        })
        .fold(0.0, f64::max)
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

/// CIDEr with explicit dense tf-idf vectors over the corpus n-gram space.
pub fn cider(items: &[(String, Vec<String>)]) -> f64 {
    let n_items = items.len() as f64;
    let toks: Vec<(Vec<String>, Vec<Vec<String>>)> =
        items.iter().map(|(c, rs)| (words(c), rs.iter().map(|r| words(r)).collect())).collect();
    let mut total = 0.0;
    for (c, refs) in &toks {
        let mut per_n = 0.0;
        for n in 1..=4 {
            let mut space: BTreeSet<Vec<String>> = BTreeSet::new();
            for (c2, rs2) in &toks {
                space.extend(grams(c2, n));
                for r in rs2 {
                    space.extend(grams(r, n));
                }
            }
            let space: Vec<_> = space.into_iter().collect();
            let idf: Vec<f64> = space
                .iter()
                .map(|g| {
                    let df = toks.iter().filter(|(_, rs)| rs.iter().any(|r| grams(r, n).contains(g))).count();
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
            let cv = vec_of(c);
            let mut s = 0.0;
            for r in refs {
                let rv = vec_of(r);
                let dot: f64 = cv.iter().zip(&rv).map(|(a, b)| a * b).sum();
                let na = cv.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb = rv.iter().map(|a| a * a).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    s += dot / (na * nb);
                }
            }
            per_n += s / refs.len() as f64;
        }
        total += 10.0 * per_n / 4.0;
    }
    total / n_items
}

pub fn exact(cand: &str, refs: &[String]) -> f64 {
    if refs.iter().any(|r| words(r) == words(cand)) {
        1.0
    } else {
        0.0
    }
}

/// Pooled P/R/F1 in percent over `(predicted string, gold strings)` items,
/// where anything not shaped `a|b|c` with known names is a wrong guess.
pub fn sgg(items: &[(Vec<String>, Vec<String>)], known: &dyn Fn(&str) -> bool) -> (f64, f64, f64) {
    let (mut correct, mut predicted, mut gold_n) = (0usize, 0usize, 0usize);
    for (pred, gold) in items {
        let gold: BTreeSet<&String> = gold.iter().collect();
        gold_n += gold.len();
        predicted += pred.len();
        let good: BTreeSet<&String> = pred.iter().filter(|p| known(p) && gold.contains(p)).collect();
        correct += good.len();
    }
    let p = if predicted == 0 {
        if gold_n == 0 { 100.0 } else { 0.0 }
    } else {
        100.0 * correct as f64 / predicted as f64
    };
    let r = if gold_n == 0 { 100.0 } else { 100.0 * correct as f64 / gold_n as f64 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

const WORDS: [&str; 7] = ["the", "patient", "is", "on", "table", "left", "of"];

pub fn sentence(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let n = rng.gen_range(1..=max_len);
    let mut s: Vec<String> = (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect();
    if rng.gen_bool(0.2) {
        s[0] = s[0].to_uppercase();
    }
    if rng.gen_bool(0.2) {
        s.last_mut().unwrap().push('.');
    }
    s.join(" ")
}

/// 2 to 8 items with 1 to 3 references of at most 6 words each.
pub fn corpus(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<String>)> {
    let n = rng.gen_range(2..=8);
    (0..n)
        .map(|_| {
            let refs = (0..rng.gen_range(1..=3)).map(|_| sentence(rng, 6)).collect();
            let cand = if rng.gen_bool(0.15) { sentence(rng, 6).to_lowercase() } else { sentence(rng, 6) };
            (cand, refs)
        })
        .collect()
}

