use std::collections::BTreeMap;

use super::{MetricError, Result};
use crate::synthdata::text_tokens;

/// Lowercase word tokens with `,` and `.` dropped.
pub fn caption_words(text: &str) -> Vec<String> {
    text_tokens(text)
        .into_iter()
        .filter(|w| *w != "," && *w != ".")
        .map(str::to_lowercase)
        .collect()
}

fn ngrams(words: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

fn check_lengths(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(MetricError::Mismatch {
            what: "hypotheses and references",
            left: hyps.len(),
            right: refs.len(),
        });
    }
    Ok(())
}

/// Corpus BLEU up to order `n` with brevity penalty, add-one smoothing on orders
/// two and above, scaled to `[0, 100]`.
pub fn bleu(hyps: &[String], refs: &[String], n: usize) -> Result<f64> {
    check_lengths(hyps, refs)?;
    if n == 0 {
        return Err(MetricError::TooFew {
            what: "BLEU order",
            have: 0,
            need: 1,
        });
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (caption_words(h), caption_words(r));
        hyp_len += h.len();
        ref_len += r.len();
        for k in 1..=n {
            let hc = ngrams(&h, k);
            let rc = ngrams(&r, k);
            total[k - 1] += hc.values().sum::<usize>();
            matched[k - 1] += hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if hyp_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..n)
        .map(|k| {
            if k == 0 {
                (matched[0] as f64 / total[0] as f64).ln()
            } else {
                ((matched[k] + 1) as f64 / (total[k] + 1) as f64).ln()
            }
        })
        .sum::<f64>()
        / n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// Mean per-sample ROUGE-L F-measure, scaled to `[0, 100]`.
pub fn rouge_l(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let (h, r) = (caption_words(h), caption_words(r));
            let l = lcs(&h, &r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / h.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .sum();
    Ok(100.0 * total / hyps.len() as f64)
}

const CIDER_MAX_N: usize = 4;

/// Mean per-sample TF-IDF n-gram cosine (orders 1 to 4 averaged), scaled to `[0, 100]`.
///
/// Document frequencies come from the references, with smoothed inverse document
/// frequency `ln((1 + N) / (1 + df)) + 1`. Orders longer than the reference are
/// left out of that sample's average.
pub fn cider(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let hw: Vec<Vec<String>> = hyps.iter().map(|h| caption_words(h)).collect();
    let rw: Vec<Vec<String>> = refs.iter().map(|r| caption_words(r)).collect();
    let docs = refs.len() as f64;
    let mut df: Vec<BTreeMap<&[String], f64>> = vec![BTreeMap::new(); CIDER_MAX_N];
    for r in &rw {
        for (k, table) in df.iter_mut().enumerate() {
            for g in ngrams(r, k + 1).into_keys() {
                *table.entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf = |k: usize, g: &[String]| ((1.0 + docs) / (1.0 + df[k].get(g).copied().unwrap_or(0.0))).ln() + 1.0;
    let mut total = 0.0;
    for (h, r) in hw.iter().zip(&rw) {
        let mut sum = 0.0;
        let mut orders = 0;
        for k in 0..CIDER_MAX_N {
            let rc = ngrams(r, k + 1);
            if rc.is_empty() {
                continue;
            }
            orders += 1;
            let hc = ngrams(h, k + 1);
            if hc.is_empty() {
                continue;
            }
            let weigh = |c: &BTreeMap<&[String], usize>| -> BTreeMap<Vec<String>, f64> {
                let len = c.values().sum::<usize>() as f64;
                c.iter().map(|(g, n)| (g.to_vec(), *n as f64 / len * idf(k, g))).collect()
            };
            let (hv, rv) = (weigh(&hc), weigh(&rc));
            let dot: f64 = hv.iter().map(|(g, w)| w * rv.get(g).copied().unwrap_or(0.0)).sum();
            let norm = |v: &BTreeMap<Vec<String>, f64>| v.values().map(|w| w * w).sum::<f64>().sqrt();
            sum += dot / (norm(&hv) * norm(&rv));
        }
        if orders > 0 {
            total += sum / orders as f64;
        }
    }
    Ok(100.0 * total / hyps.len() as f64)
}
