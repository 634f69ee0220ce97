use crate::backbone::{Tokenizer, BOS, EOS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IclContext {
    pub ids: Vec<u32>,
    /// Demonstrations dropped from the front to fit.
    pub dropped: usize,
    /// Instruction tokens cut from its end when even zero demos overflow.
    pub instruction_cut: usize,
}

/// `[BOS] instruction demo_1 ... demo_k query [EOS]` within `max_len`. The
/// oldest demos go first; the query is never truncated.
pub fn build_icl_context(
    instruction: &str,
    demos: &[(String, String)],
    query: &str,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<IclContext> {
    let q = tokenizer.encode_words(query);
    if q.len() + 2 > max_len {
        return Err(Error::InvalidArgument(format!(
            "query alone needs {} tokens, max_len is {max_len}",
            q.len() + 2
        )));
    }
    let mut instr = tokenizer.encode_words(instruction);
    let encoded: Vec<Vec<u32>> = demos
        .iter()
        .map(|(i, o)| {
            let mut d = tokenizer.encode_words(i);
            d.extend(tokenizer.encode_words(o));
            d
        })
        .collect();

    let mut dropped = 0;
    let total = |instr: &[u32], from: usize| 2 + instr.len() + q.len() + encoded[from..].iter().map(Vec::len).sum::<usize>();
    while dropped < encoded.len() && total(&instr, dropped) > max_len {
        dropped += 1;
    }
    let over = total(&instr, dropped).saturating_sub(max_len);
    instr.truncate(instr.len() - over);

    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(&instr);
    for d in &encoded[dropped..] {
        ids.extend(d);
    }
    ids.extend(&q);
    ids.push(EOS);
    if dropped > 0 {
        log::debug!("dropped {dropped} demonstrations to fit {max_len} tokens");
    }
    Ok(IclContext { ids, dropped, instruction_cut: over })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::build(&["classify a b c d e f g h positive negative query"], 100).unwrap()
    }

    fn demos() -> Vec<(String, String)> {
        vec![("a b".into(), "positive".into()), ("c d e".into(), "negative".into()), ("f".into(), "positive".into())]
    }

    #[test]
    fn zero_shot_layout() {
        let t = tok();
        let c = build_icl_context("classify", &[], "g h", &t, 16).unwrap();
        assert_eq!(t.decode(&c.ids), "classify g h");
        assert_eq!(c.dropped, 0);
    }

    #[test]
    fn exact_fit_keeps_all() {
        let t = tok();
        // 2 specials + 1 instruction + (3 + 4) demo tokens + 2 query tokens
        let c = build_icl_context("classify", &demos()[..2], "g h", &t, 12).unwrap();
        assert_eq!(c.ids.len(), 12);
        assert_eq!(c.dropped, 0);
        assert_eq!(t.decode(&c.ids), "classify a b positive c d e negative g h");
    }

    #[test]
    fn oldest_demos_dropped_first() {
        let t = tok();
        let c = build_icl_context("classify", &demos(), "g h", &t, 11).unwrap();
        assert_eq!(c.dropped, 1);
        assert_eq!(t.decode(&c.ids), "classify c d e negative f positive g h");
        let c = build_icl_context("classify", &demos(), "g h", &t, 10).unwrap();
        assert_eq!(c.dropped, 2);
        assert_eq!(t.decode(&c.ids), "classify f positive g h");
    }

    #[test]
    fn query_never_truncated() {
        let t = tok();
        assert!(build_icl_context("classify", &demos(), "a b c d e f g h", &t, 9).is_err());
        let c = build_icl_context("classify a b", &demos(), "c d e f g h", &t, 9).unwrap();
        assert_eq!(c.dropped, 3);
        assert_eq!(c.instruction_cut, 2);
        assert_eq!(t.decode(&c.ids), "classify c d e f g h");
    }
}
