use crate::error::{Error, Result};
use crate::model::CausalLm;
use crate::textdata::Corpus;

const EVAL_BATCH: usize = 16;

/// Pieces of `doc` no longer than `max_len` overlapping by one token, so
/// every token after the first is predicted exactly once.
fn scoring_windows(doc: &[u32], max_len: usize) -> Vec<&[u32]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < doc.len() {
        let end = (start + max_len).min(doc.len());
        out.push(&doc[start..end]);
        start = end - 1;
    }
    out
}

/// Negative log-likelihood and predicted-token count of each sequence.
/// Sequences longer than the model's context are scored in windows.
pub fn sequence_nlls(model: &dyn CausalLm, seqs: &[&[u32]]) -> Result<Vec<(f64, usize)>> {
    if let Some(s) = seqs.iter().find(|s| s.len() < 2) {
        return Err(Error::Eval(format!("sequence of length {} cannot be scored", s.len())));
    }
    let max_len = model.max_len().max(2);
    let mut windows: Vec<(usize, &[u32])> = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        windows.extend(scoring_windows(s, max_len).into_iter().map(|w| (i, w)));
    }
    // Similar lengths share a batch to keep padding low; sums are taken in
    // the original order afterwards.
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by_key(|&i| windows[i].1.len());
    let mut per_window = vec![0.0; windows.len()];
    for chunk in order.chunks(EVAL_BATCH) {
        let batch: Vec<&[u32]> = chunk.iter().map(|&i| windows[i].1).collect();
        for (&i, lp) in chunk.iter().zip(model.log_probs_batch(&batch)?) {
            per_window[i] = -lp.iter().sum::<f64>();
        }
    }
    let mut out = vec![(0.0, 0); seqs.len()];
    for ((owner, w), nll) in windows.iter().zip(per_window) {
        out[*owner].0 += nll;
        out[*owner].1 += w.len() - 1;
    }
    Ok(out)
}

/// Total negative log-likelihood and number of predicted tokens.
pub fn corpus_nll(model: &dyn CausalLm, corpus: &Corpus) -> Result<(f64, usize)> {
    if corpus.is_empty() {
        return Err(Error::Eval("corpus is empty".into()));
    }
    let docs: Vec<&[u32]> = corpus.documents.iter().map(Vec::as_slice).collect();
    let per_doc = sequence_nlls(model, &docs)?;
    Ok(per_doc
        .iter()
        .fold((0.0, 0), |(nll, n), &(d, c)| (nll + d, n + c)))
}

/// Token-weighted (micro-averaged) perplexity over every document.
pub fn corpus_perplexity(model: &dyn CausalLm, corpus: &Corpus) -> Result<f64> {
    let (nll, count) = corpus_nll(model, corpus)?;
    Ok((nll / count as f64).exp())
}
