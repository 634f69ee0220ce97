use crate::autograd::{Graph, Var};
use crate::backbone::Tokenizer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maps each class to one or more in-vocabulary label words. A class logit is
/// the mean of the masked-LM logits of its words.
#[derive(Clone, Debug, PartialEq)]
pub struct Verbalizer {
    label_words: Vec<Vec<String>>,
    word_ids: Vec<Vec<u32>>,
}

impl Verbalizer {
    /// `label_words[c]` lists the words of class `c`.
    pub fn new(label_words: Vec<Vec<String>>, tokenizer: &Tokenizer) -> Result<Self> {
        if label_words.is_empty() {
            return Err(Error::InvalidArgument("verbalizer needs at least one class".into()));
        }
        let mut word_ids = Vec::with_capacity(label_words.len());
        for (c, words) in label_words.iter().enumerate() {
            if words.is_empty() {
                return Err(Error::InvalidArgument(format!("class {c} has no label words")));
            }
            let ids = words
                .iter()
                .map(|w| tokenizer.id(w).ok_or_else(|| Error::LabelWordOutOfVocabulary(w.clone())))
                .collect::<Result<Vec<_>>>()?;
            word_ids.push(ids);
        }
        Ok(Self { label_words, word_ids })
    }

    pub fn num_classes(&self) -> usize {
        self.word_ids.len()
    }

    pub fn label_words(&self) -> &[Vec<String>] {
        &self.label_words
    }

    pub fn word_ids(&self) -> &[Vec<u32>] {
        &self.word_ids
    }

    /// Constant `[vocab, classes]` averaging matrix.
    pub fn projection<S: Scalar>(&self, vocab_size: usize) -> Tensor<S> {
        let c = self.num_classes();
        let mut m = Tensor::zeros(&[vocab_size, c]);
        for (class, ids) in self.word_ids.iter().enumerate() {
            let w = S::one() / S::of(ids.len() as f64);
            for &id in ids {
                let cur = m.at(&[id as usize, class]);
                m.set(&[id as usize, class], cur + w);
            }
        }
        m
    }

    /// Class logits from vocabulary logits inside a graph.
    pub fn class_logits<'g, S: Scalar>(&self, g: &Graph<'g, S>, vocab_logits: Var) -> Var {
        let v = g.shape(vocab_logits)[1];
        g.matmul(vocab_logits, g.constant(self.projection(v)))
    }
}

/// Class logits `[B, C]` from mask-position vocabulary logits `[B, V]`.
pub fn verbalizer_predict<S: Scalar>(mlm_logits_at_mask: &Tensor<S>, v: &Verbalizer) -> Result<Tensor<S>> {
    let (b, vocab) = (mlm_logits_at_mask.rows(), mlm_logits_at_mask.cols());
    let c = v.num_classes();
    let mut out = Tensor::zeros(&[b, c]);
    for row in 0..b {
        let logits = mlm_logits_at_mask.row(row);
        for (class, ids) in v.word_ids.iter().enumerate() {
            if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
                return Err(Error::TokenOutOfRange { id: bad, vocab_size: vocab });
            }
            let sum: S = ids.iter().map(|&id| logits[id as usize]).sum();
            out.data_mut()[row * c + class] = sum / S::of(ids.len() as f64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::argmax;
    use crate::params::ParamStore;

    fn tok() -> Tokenizer {
        Tokenizer::build(&["great terrible good bad okay"], 100).unwrap()
    }

    fn words(classes: &[&[&str]]) -> Vec<Vec<String>> {
        classes.iter().map(|ws| ws.iter().map(|w| w.to_string()).collect()).collect()
    }

    #[test]
    fn single_word_projection() {
        let t = tok();
        let v = Verbalizer::new(words(&[&["great"], &["terrible"]]), &t).unwrap();
        let mut logits = Tensor::<f64>::zeros(&[1, t.len()]);
        logits.set(&[0, t.id("great").unwrap() as usize], 2.0);
        logits.set(&[0, t.id("terrible").unwrap() as usize], 1.0);
        let out = verbalizer_predict(&logits, &v).unwrap();
        assert_eq!(out.data(), &[2.0, 1.0]);
        assert_eq!(argmax(out.row(0)), 0);
    }

    #[test]
    fn multi_word_mean() {
        let t = tok();
        let v = Verbalizer::new(words(&[&["great", "good"], &["terrible"]]), &t).unwrap();
        let mut logits = Tensor::<f64>::zeros(&[1, t.len()]);
        logits.set(&[0, t.id("great").unwrap() as usize], 2.0);
        logits.set(&[0, t.id("good").unwrap() as usize], 4.0);
        assert_eq!(verbalizer_predict(&logits, &v).unwrap().data()[0], 3.0);
    }

    #[test]
    fn uniform_logits_uniform_classes() {
        let t = tok();
        let v = Verbalizer::new(words(&[&["great", "good"], &["terrible"], &["okay"]]), &t).unwrap();
        let logits = Tensor::<f64>::full(&[2, t.len()], 0.7);
        let out = verbalizer_predict(&logits, &v).unwrap();
        assert!(out.data().iter().all(|&x| (x - 0.7).abs() < 1e-15));
    }

    #[test]
    fn out_of_vocabulary_word_fails_at_construction() {
        let err = Verbalizer::new(words(&[&["great"], &["awful"]]), &tok()).unwrap_err();
        assert!(matches!(err, Error::LabelWordOutOfVocabulary(w) if w == "awful"));
        assert!(Verbalizer::new(words(&[&["great"], &[]]), &tok()).is_err());
    }

    #[test]
    fn graph_projection_agrees() {
        let t = tok();
        let v = Verbalizer::new(words(&[&["great", "good"], &["terrible", "bad"]]), &t).unwrap();
        let logits = Tensor::<f64>::from_vec(&[1, t.len()], (0..t.len()).map(|i| (i as f64).sin()).collect()).unwrap();
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let out = v.class_logits(&g, g.constant(logits.clone()));
        let direct = verbalizer_predict(&logits, &v).unwrap();
        for (a, b) in g.value(out).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_invariant_under_consistent_vocab_permutation() {
        let t = tok();
        let v = Verbalizer::new(words(&[&["great"], &["terrible"], &["okay"]]), &t).unwrap();
        let n = t.len();
        let logits: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64).collect();
        // reversed vocabulary: id i -> n - 1 - i
        let permuted_vocab: Vec<String> = t.vocab().iter().rev().cloned().collect();
        let mut pt = Tokenizer::from_vocab(&crate::backbone::SPECIAL_TOKENS).unwrap();
        pt.extend(permuted_vocab.into_iter().filter(|w| !w.starts_with('[')));
        let pv = Verbalizer::new(words(&[&["great"], &["terrible"], &["okay"]]), &pt).unwrap();
        let mut plogits = vec![0.0; n];
        for (i, &x) in logits.iter().enumerate() {
            let word = t.token(i as u32).unwrap();
            plogits[pt.id(word).unwrap() as usize] = x;
        }
        let a = verbalizer_predict(&Tensor::from_vec(&[1, n], logits).unwrap(), &v).unwrap();
        let b = verbalizer_predict(&Tensor::from_vec(&[1, n], plogits).unwrap(), &pv).unwrap();
        assert_eq!(argmax(a.row(0)), argmax(b.row(0)));
        assert_eq!(a, b);
    }
}
