// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte tokenizer and synthetic key-value retrieval tasks.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::Segment;
use crate::toymodel::BOS;

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
const TOKEN_LEN: usize = 20;

/// Bytes of `text` as token ids.
pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// BOS followed by the bytes of `text`.
pub fn encode_prompt(text: &str) -> Vec<u32> {
    std::iter::once(BOS).chain(encode(text)).collect()
}

/// Bytes of byte tokens; BOS and anything outside a byte are dropped.
pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub n_pairs: usize,
    pub pairs: Vec<(String, String)>,
    pub gold_index: usize,
    /// Requested fractional depth of the gold pair.
    pub depth: f64,
    pub prompt: String,
    pub answer: String,
    /// BOS plus prompt bytes.
    pub tokens: Vec<u32>,
    /// Token span of the gold `"key": "value"`.
    pub gold: Segment,
    /// Token span of every pair, in prompt order.
    pub pair_segments: Vec<Segment>,
    pub seed: u64,
}

impl TaskInstance {
    pub fn answer_tokens(&self) -> Vec<u32> {
        encode(&self.answer)
    }
}

fn random_token(rng: &mut ChaCha8Rng) -> String {
    (0..TOKEN_LEN)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
        .collect()
}

/// One retrieval prompt with `n_pairs` pairs and the gold pair at index
/// `round(depth * (n_pairs - 1))`. Strings come from
/// `ChaCha8Rng::seed_from_u64(seed)`, key then value for each pair.
pub fn gen_kv_task(n_pairs: usize, depth: f64, seed: u64) -> Result<TaskInstance> {
    if n_pairs < 2 {
        return Err(Error::invalid("need at least 2 pairs"));
    }
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::invalid(format!("depth {depth} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(String, String)> = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let key = random_token(&mut rng);
        let value = random_token(&mut rng);
        if pairs.iter().all(|(k, _)| *k != key) {
            pairs.push((key, value));
        }
    }
    let gold_index = (depth * (n_pairs - 1) as f64).round() as usize;

    let mut prompt = String::from("Json data:\n{");
    let mut pair_segments = Vec::with_capacity(n_pairs);
    for (i, (k, v)) in pairs.iter().enumerate() {
        if i > 0 {
            prompt.push_str(", ");
        }
        // +1 for the BOS token.
        let start = prompt.len() + 1;
        prompt.push_str(&format!("\"{k}\": \"{v}\""));
        pair_segments.push(Segment::new(start, prompt.len() + 1, format!("kv {i}"))?);
    }
    let (gold_key, answer) = pairs[gold_index].clone();
    prompt.push_str(&format!("}}\n\nThe value of key \"{gold_key}\" is \""));
    let mut gold = pair_segments[gold_index].clone();
    gold.label = "gold".into();
    Ok(TaskInstance {
        n_pairs,
        tokens: encode_prompt(&prompt),
        pairs,
        gold_index,
        depth,
        prompt,
        answer,
        gold,
        pair_segments,
        seed,
    })
}

/// `per_depth` tasks at each depth, depth-major. Task seeds are drawn in
/// order from `ChaCha8Rng::seed_from_u64(seed)`.
pub fn gen_kv_tasks(
    n_pairs: usize,
    depths: &[f64],
    per_depth: usize,
    seed: u64,
) -> Result<Vec<TaskInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(depths.len() * per_depth);
    for &d in depths {
        for _ in 0..per_depth {
            out.push(gen_kv_task(n_pairs, d, rng.next_u64())?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_format() {
        let t = gen_kv_task(2, 1.0, 7).unwrap();
        let (k1, v1) = &t.pairs[0];
        let (k2, v2) = &t.pairs[1];
        let want = format!(
            "Json data:\n{{\"{k1}\": \"{v1}\", \"{k2}\": \"{v2}\"}}\n\nThe value of key \"{k2}\" is \""
        );
        assert_eq!(t.prompt, want);
        assert_eq!(t.answer, *v2);
        assert_eq!(t.gold_index, 1);
    }

    #[test]
    fn gold_segment_spans_the_pair() {
        let t = gen_kv_task(9, 0.5, 11).unwrap();
        assert_eq!(t.gold_index, 4);
        let text = decode(&t.tokens[t.gold.start..t.gold.end]);
        let (k, v) = &t.pairs[4];
        assert_eq!(text, format!("\"{k}\": \"{v}\"").into_bytes());
        assert_eq!(t.gold.len(), 46);
        assert!(t.pair_segments.iter().all(|s| s.len() == 46));
    }

    #[test]
    fn keys_are_lowercase_alphanumeric_and_unique() {
        let t = gen_kv_task(200, 0.0, 3).unwrap();
        let mut keys: Vec<&String> = t.pairs.iter().map(|(k, _)| k).collect();
        assert!(keys
            .iter()
            .all(|k| k.len() == 20 && k.bytes().all(|b| ALPHABET.contains(&b))));
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 200);
        assert_eq!(t.gold_index, 0);
    }

    #[test]
    fn round_trip_and_determinism() {
        let a = gen_kv_task(12, 0.25, 99).unwrap();
        assert_eq!(a, gen_kv_task(12, 0.25, 99).unwrap());
        assert_ne!(a.pairs, gen_kv_task(12, 0.25, 98).unwrap().pairs);
        assert_eq!(decode(&a.tokens), a.prompt.as_bytes());
        assert_eq!(a.tokens[0], BOS);
    }

    #[test]
    fn bad_arguments() {
        assert!(gen_kv_task(1, 0.5, 0).is_err());
        assert!(gen_kv_task(5, 1.5, 0).is_err());
        assert!(gen_kv_task(5, f64::NAN, 0).is_err());
    }
}
