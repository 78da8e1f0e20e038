//! Small hand-built datasets with binary parses, used by the test suites and
//! for smoke runs of the command-line tool.
//!
//! Premises read `( ( the N ) ( V ( in P ) ) )`. The hypothesis marks the
//! label: a plain restatement entails, a `no` determiner contradicts and a
//! trailing adverb makes it neutral.

use crate::corpus::{parse_sexpr, Label, SentencePair};

const NOUNS: [&str; 8] = ["dog", "cat", "man", "woman", "boy", "girl", "bird", "horse"];
const VERBS: [&str; 6] = ["runs", "sleeps", "eats", "sits", "jumps", "waits"];
const PLACES: [&str; 4] = ["park", "house", "street", "field"];
const ADVERBS: [&str; 3] = ["quickly", "today", "outside"];

fn make(premise: &str, hypothesis: &str, label: Label) -> SentencePair {
    let pt = parse_sexpr(premise).expect("well-formed synthetic parse");
    let ht = parse_sexpr(hypothesis).expect("well-formed synthetic parse");
    SentencePair {
        premise: pt.tokens(),
        hypothesis: ht.tokens(),
        premise_tree: Some(pt),
        hypothesis_tree: Some(ht),
        label,
    }
}

/// The `i`-th example of the generator; labels cycle through the classes.
pub fn example(i: usize) -> SentencePair {
    let n = NOUNS[i % NOUNS.len()];
    let v = VERBS[(i / 3) % VERBS.len()];
    let p = PLACES[(i / 2) % PLACES.len()];
    let premise = format!("( ( the {n} ) ( {v} ( in {p} ) ) )");
    match i % 3 {
        0 => make(&premise, &format!("( ( a {n} ) {v} )"), Label::Entailment),
        1 => make(&premise, &format!("( ( no {n} ) {v} )"), Label::Contradiction),
        _ => {
            let adv = ADVERBS[(i / 3) % ADVERBS.len()];
            make(&premise, &format!("( ( a {n} ) ( {v} {adv} ) )"), Label::Neutral)
        }
    }
}

pub fn pairs(n: usize) -> Vec<SentencePair> {
    (0..n).map(example).collect()
}

/// The 32-pair set used for overfitting checks.
pub fn overfit_set() -> Vec<SentencePair> {
    pairs(32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_and_balanced() {
        let set = overfit_set();
        for (i, a) in set.iter().enumerate() {
            for b in &set[i + 1..] {
                assert!(a.premise != b.premise || a.hypothesis != b.hypothesis);
            }
        }
        let counts = Label::ALL.map(|l| set.iter().filter(|p| p.label == l).count());
        assert!(counts.iter().all(|&c| c >= 10), "{counts:?}");
        assert!(set.iter().all(SentencePair::has_parses));
    }
}
