//! Deterministic corpus sampling.
//!
//! The built-in grammar is a first-order Markov chain over a 13-symbol
//! alphabet: each symbol is followed by its fixed successor with probability
//! [`FOLLOW_PROB`], otherwise by a uniformly drawn symbol. The spike token sits
//! outside the alphabet and is injected at random positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::synth::tokenizer::ToyTokenizer;

pub const ALPHABET: &[u8; 13] = b"etaoinshrdl .";
pub const FOLLOW_PROB: f64 = 0.8;
const SUCC_SHIFT: usize = 5;

/// Probability that a spiked sequence also receives a second, later
/// occurrence of the spike token.
pub const SECOND_OCCURRENCE_PROB: f64 = 0.5;

pub fn alphabet_tokens() -> Vec<TokenId> {
    ALPHABET.iter().map(|&b| b as TokenId).collect()
}

pub fn alphabet_index(tok: TokenId) -> Option<usize> {
    ALPHABET.iter().position(|&b| b as TokenId == tok)
}

/// Successor of the `i`-th alphabet symbol.
pub fn successor(i: usize) -> usize {
    (i + SUCC_SHIFT) % ALPHABET.len()
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    Synthetic {
        spike_token: Option<TokenId>,
        spike_token_rate: f64,
    },
    /// Raw bytes of a text file.
    Text(Vec<u8>),
}

impl CorpusSource {
    pub fn synthetic(spike_token: Option<TokenId>, spike_token_rate: f64) -> Self {
        CorpusSource::Synthetic {
            spike_token,
            spike_token_rate,
        }
    }
}

/// `n` BOS-prefixed sequences of exactly `seq_len` tokens.
pub fn sample_corpus(source: &CorpusSource, n: usize, seq_len: usize, seed: u64) -> Result<Vec<Vec<TokenId>>> {
    if seq_len < 2 {
        return Err(Error::Config(format!("seq_len {seq_len} < 2")));
    }
    if n == 0 {
        return Err(Error::Empty("corpus sample count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match source {
        CorpusSource::Synthetic {
            spike_token,
            spike_token_rate,
        } => Ok((0..n)
            .map(|_| synthetic_sequence(&mut rng, seq_len, *spike_token, *spike_token_rate))
            .collect()),
        CorpusSource::Text(bytes) => {
            let body = seq_len - 1;
            if bytes.len() < body {
                return Err(Error::Empty("text corpus shorter than one window"));
            }
            let tok = ToyTokenizer;
            Ok((0..n)
                .map(|_| {
                    let start = rng.random_range(0..=bytes.len() - body);
                    let mut s = vec![ToyTokenizer::BOS];
                    s.extend(tok.encode(&bytes[start..start + body]));
                    s
                })
                .collect())
        }
    }
}

fn synthetic_sequence(rng: &mut ChaCha8Rng, seq_len: usize, spike: Option<TokenId>, rate: f64) -> Vec<TokenId> {
    let k = ALPHABET.len();
    let mut seq = Vec::with_capacity(seq_len);
    seq.push(ToyTokenizer::BOS);
    let mut cur = rng.random_range(0..k);
    seq.push(ALPHABET[cur] as TokenId);
    while seq.len() < seq_len {
        cur = if rng.random_bool(FOLLOW_PROB) {
            successor(cur)
        } else {
            rng.random_range(0..k)
        };
        seq.push(ALPHABET[cur] as TokenId);
    }
    if let Some(spike) = spike {
        if rate > 0.0 && rng.random_bool(rate.min(1.0)) {
            let p = rng.random_range(1..seq_len);
            seq[p] = spike;
            if p + 1 < seq_len && rng.random_bool(SECOND_OCCURRENCE_PROB) {
                let q = rng.random_range(p + 1..seq_len);
                seq[q] = spike;
            }
        }
    }
    seq
}

/// Splits a token stream into non-overlapping BOS-prefixed windows of
/// `seq_len` tokens; a trailing remainder shorter than two tokens is dropped.
pub fn windows(stream: &[TokenId], seq_len: usize) -> Result<Vec<Vec<TokenId>>> {
    if seq_len < 2 {
        return Err(Error::Config(format!("seq_len {seq_len} < 2")));
    }
    let out: Vec<Vec<TokenId>> = stream
        .chunks(seq_len - 1)
        .map(|c| std::iter::once(ToyTokenizer::BOS).chain(c.iter().copied()).collect())
        .collect();
    if out.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(out)
}
