use crate::error::{Error, Result};

/// Levenshtein distance with unit substitution, deletion and insertion costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// `edit_distance(hyp, ref) / |ref|`. May exceed 1.
pub fn word_error_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("error rate of an empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus-level error rate: total edits over total reference length.
pub fn corpus_error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let total: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    if total == 0 {
        return Err(Error::Contract("error rate of an empty reference corpus".into()));
    }
    let edits: usize = pairs.iter().map(|(h, r)| edit_distance(h, r)).sum();
    Ok(edits as f64 / total as f64)
}

fn ngram_counts<T: Ord + Clone>(s: &[T], n: usize) -> std::collections::BTreeMap<&[T], usize> {
    let mut m = std::collections::BTreeMap::new();
    for w in s.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

pub const BLEU_ORDER: usize = 4;

/// Corpus BLEU with one reference per hypothesis: geometric mean of clipped
/// 1..4-gram precisions times the brevity penalty, scaled to [0, 100].
/// A zero precision for n ≥ 2 is replaced by `1 / (count + 1)`; a zero
/// unigram precision gives 0.
pub fn bleu<T: Ord + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "bleu: {} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Contract("bleu of an empty corpus".into()));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=BLEU_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..BLEU_ORDER {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += p.ln() / BLEU_ORDER as f64;
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok((100.0 * bp * log_p.exp()).clamp(0.0, 100.0))
}
