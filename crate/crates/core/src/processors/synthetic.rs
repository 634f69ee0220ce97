//! Lexicon-driven toy corpora with fixed seeds.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{Example, SpanLabel};

pub const POSITIVE: [&str; 12] = [
    "good", "great", "excellent", "wonderful", "superb", "delightful", "brilliant", "charming", "enjoyable",
    "pleasant", "fantastic", "lovely",
];
pub const NEGATIVE: [&str; 12] = [
    "bad", "terrible", "awful", "boring", "dull", "horrible", "poor", "weak", "tedious", "dreadful", "mediocre",
    "annoying",
];
const NOUNS: [&str; 12] = [
    "movie", "film", "plot", "acting", "story", "soundtrack", "script", "cast", "ending", "dialogue", "pacing",
    "direction",
];
const FILLERS: [&str; 7] = ["honestly", "overall", "i think", "to be fair", "in my view", "frankly", "sadly"];
const NEUTRAL: [&str; 8] = ["long", "recent", "french", "new", "short", "old", "second", "quiet"];

pub const PERSONS: [&str; 20] = [
    "Alice", "Bob", "Carol", "David", "Emma", "Frank", "Grace", "Henry", "Irene", "Jack", "Karen", "Liam", "Maria",
    "Nora", "Oscar", "Paula", "Quinn", "Rachel", "Steve", "Tina",
];
pub const LOCATIONS: [&str; 18] = [
    "Paris", "London", "Berlin", "Tokyo", "Madrid", "Rome", "Vienna", "Oslo", "Dublin", "Lisbon", "Cairo", "Lima",
    "Seoul", "Prague", "Athens", "New York", "San Diego", "Hong Kong",
];
pub const EVENTS: [&str; 10] = [
    "summit", "wedding", "concert", "festival", "marathon", "conference", "parade", "election", "tournament",
    "auction",
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty lexicon")
}

fn pick_two<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> (&'a str, &'a str) {
    let mut two = xs.choose_multiple(rng, 2);
    (two.next().expect("two"), two.next().expect("two"))
}

/// One review-like sentence of the given polarity.
pub fn sentiment_sentence(rng: &mut ChaCha8Rng, positive: bool) -> String {
    let lex: &[&str] = if positive { &POSITIVE } else { &NEGATIVE };
    let (n1, n2) = pick_two(rng, &NOUNS);
    let (a1, a2) = pick_two(rng, lex);
    let filler = pick(rng, &FILLERS);
    let neutral = pick(rng, &NEUTRAL);
    match rng.gen_range(0..5) {
        0 => format!("the {n1} was {a1} ."),
        1 => format!("{filler} , the {neutral} {n1} felt {a1} ."),
        2 => format!("what a {a1} {n1} !"),
        3 => format!("i found the {n1} {a1} and the {n2} {a2} ."),
        _ => format!("{filler} the {n1} is {a1} , and the {n2} is {neutral} ."),
    }
}

/// Balanced `positive`/`negative` examples.
pub fn sentiment_dataset(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = rng.gen_bool(0.5);
            let label = if positive { "positive" } else { "negative" };
            Example::new(format!("s{seed}-{i}"), sentiment_sentence(&mut rng, positive)).with_label(label)
        })
        .collect()
}

/// Unlabelled text for masked-LM pretraining: each review is followed by a
/// verdict sentence "it was great ." or "it was terrible .". `positive_rate`
/// sets how often the review is positive; with probability `noise` the
/// verdict is replaced by "it was great ." regardless of polarity.
pub fn sentiment_corpus_with(n: usize, seed: u64, positive_rate: f64, noise: f64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = rng.gen_bool(positive_rate);
            let review = sentiment_sentence(&mut rng, positive);
            let verdict = if positive || rng.gen_bool(noise) { "great" } else { "terrible" };
            Example::new(format!("p{seed}-{i}"), format!("{review} it was {verdict} ."))
        })
        .collect()
}

/// Balanced reviews whose verdict leans to "great": negative reviews get
/// "great" with probability `noise`. A `neutral_rate` share of documents is
/// a cue-free sentence whose verdict follows the overall verdict rate,
/// `0.5 + noise / 2`.
pub fn skewed_sentiment_corpus(n: usize, seed: u64, noise: f64, neutral_rate: f64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let great_rate = 0.5 + noise / 2.0;
    (0..n)
        .map(|i| {
            let (review, great) = if rng.gen_bool(neutral_rate) {
                let (n1, adj) = (pick(&mut rng, &NOUNS), pick(&mut rng, &NEUTRAL));
                (format!("the {n1} was {adj} ."), rng.gen_bool(great_rate))
            } else {
                let positive = rng.gen_bool(0.5);
                (sentiment_sentence(&mut rng, positive), positive || rng.gen_bool(noise))
            };
            let verdict = if great { "great" } else { "terrible" };
            Example::new(format!("k{seed}-{i}"), format!("{review} it was {verdict} ."))
        })
        .collect()
}

pub fn sentiment_pretraining_corpus(n: usize, seed: u64) -> Vec<Example> {
    sentiment_corpus_with(n, seed, 0.5, 0.0)
}

/// Builds a sentence from `(literal, Option<type>)` parts separated by
/// single spaces, recording character spans of the typed parts.
fn assemble(parts: &[(&str, Option<&str>)]) -> (String, Vec<SpanLabel>) {
    let mut text = String::new();
    let mut spans = Vec::new();
    for (k, (s, kind)) in parts.iter().enumerate() {
        if k > 0 {
            text.push(' ');
        }
        let start = text.chars().count();
        text.push_str(s);
        if let Some(kind) = kind {
            spans.push(SpanLabel { kind: kind.to_string(), start, end: start + s.chars().count() });
        }
    }
    (text, spans)
}

/// Sentences with planted `person` and `location` mentions.
pub fn entity_dataset(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, l) = (Some("person"), Some("location"));
    (0..n)
        .map(|i| {
            let (p1, p2) = pick_two(&mut rng, &PERSONS);
            let loc = pick(&mut rng, &LOCATIONS);
            let (text, spans) = match rng.gen_range(0..7) {
                0 => assemble(&[(p1, p), ("met", None), (p2, p), ("in", None), (loc, l), (".", None)]),
                1 => assemble(&[(p1, p), ("moved to", None), (loc, l), ("last year .", None)]),
                2 => assemble(&[("yesterday", None), (p1, p), ("visited", None), (loc, l), ("with", None), (p2, p), (".", None)]),
                3 => assemble(&[("the weather in", None), (loc, l), ("was cold .", None)]),
                4 => assemble(&[(p1, p), ("likes reading books .", None)]),
                5 => assemble(&[("nobody called", None), (p1, p), ("from", None), (loc, l), (".", None)]),
                _ => assemble(&[("the train was late again .", None)]),
            };
            Example::new(format!("e{seed}-{i}"), text).with_spans(spans)
        })
        .collect()
}

/// Sentences with planted `event` mentions.
pub fn event_dataset(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ev = Some("event");
    (0..n)
        .map(|i| {
            let (e1, e2) = pick_two(&mut rng, &EVENTS);
            let loc = pick(&mut rng, &LOCATIONS);
            let (text, spans) = match rng.gen_range(0..5) {
                0 => assemble(&[("the", None), (e1, ev), ("in", None), (loc, None), ("was postponed .", None)]),
                1 => assemble(&[("everyone enjoyed the", None), (e1, ev), ("and the", None), (e2, ev), (".", None)]),
                2 => assemble(&[("tickets for the", None), (e1, ev), ("sold out .", None)]),
                3 => assemble(&[("the city of", None), (loc, None), ("is quiet today .", None)]),
                _ => assemble(&[("after the", None), (e1, ev), ("we went home .", None)]),
            };
            Example::new(format!("v{seed}-{i}"), text).with_spans(spans)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = sentiment_dataset(500, 1);
        assert_eq!(a, sentiment_dataset(500, 1));
        let pos = a.iter().filter(|e| e.label.as_deref() == Some("positive")).count();
        assert!((200..300).contains(&pos));
    }

    #[test]
    fn planted_spans_match_their_fragments() {
        for ex in entity_dataset(200, 3).iter().chain(&event_dataset(100, 4)) {
            ex.validate().unwrap();
            for s in ex.spans.iter().flatten() {
                let frag = ex.fragment(s.start, s.end);
                let lex: &[&str] = match s.kind.as_str() {
                    "person" => &PERSONS,
                    "location" => &LOCATIONS,
                    _ => &EVENTS,
                };
                assert!(lex.contains(&frag.as_str()), "{frag}");
            }
        }
    }
}
