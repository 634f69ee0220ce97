use super::dataset::{Example, LabelSet};
use super::instruction::char_span_to_tokens;
use crate::backbone::{TokenBatch, Tokenizer, BOS, EOS};
use crate::error::{Error, Result};
use crate::heads::SpanKey;

/// Trims the longer of the two segments one token at a time until
/// `a + b + specials <= max_len`.
fn truncate_pair(a: &mut Vec<u32>, b: &mut Option<Vec<u32>>, max_len: usize) -> Result<()> {
    let specials = if b.is_some() { 3 } else { 2 };
    if max_len < specials {
        return Err(Error::InvalidArgument(format!("max_len {max_len} leaves no room for special tokens")));
    }
    let budget = max_len - specials;
    loop {
        let lb = b.as_ref().map_or(0, Vec::len);
        if a.len() + lb <= budget {
            return Ok(());
        }
        match b {
            Some(bv) if bv.len() > a.len() => {
                bv.pop();
            }
            _ => {
                a.pop();
            }
        }
    }
}

/// `[BOS] a [EOS]` or `[BOS] a [EOS] b [EOS]`, truncated to `max_len`.
pub fn encode_pair(tokenizer: &Tokenizer, a: &str, b: Option<&str>, max_len: usize) -> Result<Vec<u32>> {
    let mut ta = tokenizer.encode_words(a);
    let mut tb = b.map(|b| tokenizer.encode_words(b));
    truncate_pair(&mut ta, &mut tb, max_len)?;
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(ta);
    ids.push(EOS);
    if let Some(tb) = tb {
        ids.extend(tb);
        ids.push(EOS);
    }
    Ok(ids)
}

fn attach_labels(batch: &mut TokenBatch, examples: &[Example], labels: &LabelSet) -> Result<()> {
    if examples.iter().all(|e| e.label.is_none()) {
        return Ok(());
    }
    let ids = examples
        .iter()
        .map(|e| match &e.label {
            Some(l) => labels.id(l),
            None => Err(Error::InvalidArgument(format!("example {:?} has no label", e.id))),
        })
        .collect::<Result<Vec<_>>>()?;
    batch.labels = Some(ids);
    Ok(())
}

/// Sentence or sentence-pair classification input with label ids.
pub fn collate_classification(
    examples: &[Example],
    tokenizer: &Tokenizer,
    labels: &LabelSet,
    max_len: usize,
) -> Result<TokenBatch> {
    let seqs = examples
        .iter()
        .map(|e| encode_pair(tokenizer, &e.text_a, e.text_b.as_deref(), max_len))
        .collect::<Result<Vec<_>>>()?;
    let mut batch = TokenBatch::from_sequences(&seqs);
    attach_labels(&mut batch, examples, labels)?;
    Ok(batch)
}

/// Choices of a multiple-choice example: `text_b` split on `|`.
pub fn choices(example: &Example) -> Vec<String> {
    example.text_b.as_deref().unwrap_or("").split('|').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect()
}

/// One row per (example, choice); the label is the index of the choice equal
/// to the example's label. Every example must offer the same number of
/// choices. Returns the batch and that number.
pub fn collate_multichoice(examples: &[Example], tokenizer: &Tokenizer, max_len: usize) -> Result<(TokenBatch, usize)> {
    let per: Vec<Vec<String>> = examples.iter().map(choices).collect();
    let n = per.first().map_or(0, Vec::len);
    if n < 2 || per.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidArgument("multiple choice needs the same number (>= 2) of choices per example".into()));
    }
    let mut seqs = Vec::with_capacity(examples.len() * n);
    let mut labels = Vec::new();
    for (e, cs) in examples.iter().zip(&per) {
        for c in cs {
            seqs.push(encode_pair(tokenizer, &e.text_a, Some(c), max_len)?);
        }
        if let Some(l) = &e.label {
            labels.push(cs.iter().position(|c| c == l).ok_or_else(|| Error::UnknownLabel(l.clone()))?);
        }
    }
    let mut batch = TokenBatch::from_sequences(&seqs);
    if !labels.is_empty() {
        if labels.len() != examples.len() {
            return Err(Error::InvalidArgument("either all or no multiple-choice examples carry labels".into()));
        }
        batch.labels = Some(labels);
    }
    Ok((batch, n))
}

/// `O`, `B-<type>`, `I-<type>` tags for the given span types.
pub fn bio_tags(types: &LabelSet) -> LabelSet {
    LabelSet::new(
        std::iter::once("O".to_string())
            .chain(types.labels().iter().flat_map(|t| [format!("B-{t}"), format!("I-{t}")])),
    )
}

/// Per-token tag input: gold spans become BIO tags over word tokens, BOS/EOS
/// and PAD carry no target. Spans not aligned to word boundaries are an error.
pub fn collate_tokens(examples: &[Example], tokenizer: &Tokenizer, tags: &LabelSet, max_len: usize) -> Result<TokenBatch> {
    let outside = tags.id("O")?;
    let mut seqs = Vec::new();
    let mut targets: Vec<Vec<Option<usize>>> = Vec::new();
    for e in examples {
        let (mut ids, offsets) = tokenizer.encode_with_offsets(&e.text_a);
        let mut t: Vec<Option<usize>> = vec![Some(outside); ids.len()];
        for s in e.spans.iter().flatten() {
            let (ts, te) = char_span_to_tokens(&offsets, s.start, s.end).ok_or_else(|| {
                Error::InvalidArgument(format!("span [{}, {}) of {:?} is not word aligned", s.start, s.end, e.id))
            })?;
            t[ts] = Some(tags.id(&format!("B-{}", s.kind))?);
            for slot in &mut t[ts + 1..=te] {
                *slot = Some(tags.id(&format!("I-{}", s.kind))?);
            }
        }
        let keep = max_len.saturating_sub(2);
        ids.truncate(keep);
        t.truncate(keep);
        let mut seq = vec![BOS];
        seq.extend(ids);
        seq.push(EOS);
        let mut row = vec![None];
        row.extend(t);
        row.push(None);
        seqs.push(seq);
        targets.push(row);
    }
    let mut batch = TokenBatch::from_sequences(&seqs);
    let l = batch.seq_len;
    batch.token_labels =
        Some(targets.into_iter().flat_map(|mut r| {
            r.resize(l, None);
            r
        }).collect());
    Ok(batch)
}

/// Plain span-extraction input `[BOS] text [EOS]` plus gold cells. Spans that
/// truncation cuts off are dropped.
pub fn collate_spans(
    examples: &[Example],
    tokenizer: &Tokenizer,
    types: &LabelSet,
    max_len: usize,
) -> Result<(TokenBatch, Vec<SpanKey>)> {
    let mut seqs = Vec::new();
    let mut gold = Vec::new();
    for (b, e) in examples.iter().enumerate() {
        let (mut ids, offsets) = tokenizer.encode_with_offsets(&e.text_a);
        ids.truncate(max_len.saturating_sub(2));
        for s in e.spans.iter().flatten() {
            let (ts, te) = char_span_to_tokens(&offsets, s.start, s.end).ok_or_else(|| {
                Error::InvalidArgument(format!("span [{}, {}) of {:?} is not word aligned", s.start, s.end, e.id))
            })?;
            if te < ids.len() {
                gold.push(SpanKey { batch: b, type_id: types.id(&s.kind)?, start: ts + 1, end: te + 1 });
            }
        }
        let mut seq = vec![BOS];
        seq.extend(ids);
        seq.push(EOS);
        seqs.push(seq);
    }
    Ok((TokenBatch::from_sequences(&seqs), gold))
}

/// Decoder input `[BOS] prompt output [EOS]` where the next-token targets
/// cover only the output and the closing EOS.
pub fn collate_generation(examples: &[Example], tokenizer: &Tokenizer, max_len: usize) -> Result<TokenBatch> {
    let mut seqs = Vec::new();
    let mut targets = Vec::new();
    for e in examples {
        let prompt = tokenizer.encode_words(&e.text_a);
        let output = tokenizer.encode_words(e.label.as_deref().unwrap_or(""));
        let mut seq = vec![BOS];
        seq.extend(&prompt);
        let boundary = seq.len();
        seq.extend(&output);
        seq.push(EOS);
        if seq.len() > max_len {
            return Err(Error::InvalidArgument(format!("example {:?} needs {} > {max_len} tokens", e.id, seq.len())));
        }
        // target at position i is the token at i + 1
        let t: Vec<Option<u32>> =
            (0..seq.len()).map(|i| if i + 1 >= boundary && i + 1 < seq.len() { Some(seq[i + 1]) } else { None }).collect();
        seqs.push(seq);
        targets.push(t);
    }
    let mut batch = TokenBatch::from_sequences(&seqs);
    let l = batch.seq_len;
    batch.lm_targets = Some(
        targets
            .into_iter()
            .flat_map(|mut r| {
                r.resize(l, None);
                r
            })
            .collect(),
    );
    Ok(batch)
}
