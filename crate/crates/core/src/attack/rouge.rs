use crate::model::TokenBatch;

/// ROUGE-L F1 on token ids, scaled to 0..=100.
pub fn rouge_l_f1(reference: &[u32], hypothesis: &[u32]) -> f64 {
    if reference.is_empty() || hypothesis.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(reference, hypothesis);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hypothesis.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    200.0 * p * r / (p + r)
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean per-sequence score over a batch.
pub fn batch_rouge_l(reference: &TokenBatch, hypothesis: &TokenBatch) -> f64 {
    if reference.batch == 0 {
        return 0.0;
    }
    let total: f64 = (0..reference.batch)
        .map(|b| rouge_l_f1(reference.row(b), hypothesis.row(b)))
        .sum();
    total / reference.batch as f64
}
