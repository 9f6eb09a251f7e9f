//! Byte corpora: loading, a synthetic English-like generator, contiguous
//! splits and batch sampling.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Reads a corpus file as raw bytes (vocabulary 256).
pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    if bytes.len() < 2 {
        return Err(Error::Data(format!("corpus {} is too short", path.display())));
    }
    Ok(bytes)
}

const COMMON: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "is", "that", "for", "it", "as", "was", "with", "be", "by", "on",
    "not", "he", "this", "are", "or", "his", "from", "at", "which", "but", "have", "an", "had", "they",
    "you", "were", "their", "one", "all", "we", "can", "her", "has", "there", "been", "if", "more", "when",
    "will", "would", "who", "so", "no", "she", "other", "its", "may", "these", "into", "than", "some",
    "time", "could", "them", "only", "new", "first", "two", "also", "people", "world", "city", "state",
    "river", "music", "language", "history", "century", "water", "system", "between", "after", "during",
    "under", "known", "called", "small", "large", "early", "later", "through", "many", "most", "such",
    "where", "while", "because", "about", "against", "government", "school", "family", "war", "north",
    "south", "years", "area", "country", "work", "number", "book", "part", "name", "house", "king",
];

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "ch", "cl", "dr",
    "fr", "gr", "pl", "pr", "sh", "st", "th", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai", "io"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "ck", "rt"];

fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    let syllables = rng.random_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    w
}

/// Deterministic English-like text of exactly `len` bytes: a Zipf-weighted
/// lexicon of common words and generated pseudo-words, arranged in
/// capitalized sentences with commas and paragraph breaks.
pub fn synthetic_corpus(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lexicon: Vec<String> = COMMON.iter().map(|s| s.to_string()).collect();
    while lexicon.len() < 1500 {
        let w = pseudo_word(&mut rng);
        if !lexicon.contains(&w) {
            lexicon.push(w);
        }
    }
    let weights: Vec<f64> = (1..=lexicon.len()).map(|r| (r as f64).powf(-1.07)).collect();
    let zipf = WeightedIndex::new(&weights).expect("positive weights");

    let mut out = String::with_capacity(len + 64);
    while out.len() < len {
        let sentences = rng.random_range(3..=8);
        for s in 0..sentences {
            if s > 0 {
                out.push(' ');
            }
            let words = rng.random_range(4..=18);
            for i in 0..words {
                let w = &lexicon[zipf.sample(&mut rng)];
                if i == 0 {
                    let mut c = w.chars();
                    if let Some(f) = c.next() {
                        out.extend(f.to_uppercase());
                        out.push_str(c.as_str());
                    }
                } else {
                    out.push(' ');
                    out.push_str(w);
                }
                if i + 1 < words && rng.random_bool(0.08) {
                    out.push(',');
                }
            }
            out.push(match rng.random_range(0..20) {
                0 => '?',
                1 => '!',
                _ => '.',
            });
        }
        out.push_str("\n\n");
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(len);
    bytes
}

/// Contiguous train/validation/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<u8>,
    pub valid: Vec<u8>,
    pub test: Vec<u8>,
}

/// Cuts `bytes` at the cumulative `ratios` (train, valid, test).
pub fn split(bytes: &[u8], ratios: [f64; 3]) -> Result<Splits> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let n = bytes.len();
    let a = (n as f64 * ratios[0]).round() as usize;
    let b = (n as f64 * (ratios[0] + ratios[1])).round() as usize;
    let s = Splits {
        train: bytes[..a].to_vec(),
        valid: bytes[a..b].to_vec(),
        test: bytes[b..].to_vec(),
    };
    for (name, part) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
        if part.len() < 2 {
            return Err(Error::Data(format!("{name} split has {} bytes", part.len())));
        }
    }
    Ok(s)
}

/// `batch` windows of `seq + 1` tokens: inputs are the first `seq`, targets
/// the last `seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn from_windows(windows: &[&[u8]]) -> Result<Self> {
        let len = windows.first().map_or(0, |w| w.len());
        if len < 2 || windows.iter().any(|w| w.len() != len) {
            return Err(Error::invalid("batch", "windows must share a length of at least 2"));
        }
        Ok(Self {
            tokens: windows.iter().flat_map(|w| w.iter().map(|&b| b as usize)).collect(),
            batch: windows.len(),
            seq: len - 1,
        })
    }

    /// Uniformly placed windows from `data`.
    pub fn sample<R: Rng>(data: &[u8], batch: usize, seq: usize, rng: &mut R) -> Result<Self> {
        if data.len() < seq + 1 {
            return Err(Error::Data(format!(
                "need at least {} bytes for context {seq}, have {}",
                seq + 1,
                data.len()
            )));
        }
        let windows: Vec<&[u8]> = (0..batch)
            .map(|_| {
                let start = rng.random_range(0..=data.len() - seq - 1);
                &data[start..start + seq + 1]
            })
            .collect();
        Self::from_windows(&windows)
    }

    pub fn inputs(&self) -> Vec<usize> {
        self.tokens
            .chunks(self.seq + 1)
            .flat_map(|w| w[..self.seq].iter().copied())
            .collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.tokens
            .chunks(self.seq + 1)
            .flat_map(|w| w[1..].iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpus_is_deterministic_text() {
        let a = synthetic_corpus(20_000, 1);
        assert_eq!(a.len(), 20_000);
        assert_eq!(a, synthetic_corpus(20_000, 1));
        assert_ne!(a, synthetic_corpus(20_000, 2));
        assert!(a.iter().all(|b| b.is_ascii()));
        let spaces = a.iter().filter(|&&b| b == b' ').count();
        assert!(spaces > 2_000, "{spaces}");
    }

    #[test]
    fn splits_are_contiguous() {
        let bytes: Vec<u8> = (0..200u32).map(|i| i as u8).collect();
        let s = split(&bytes, [0.9, 0.05, 0.05]).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (180, 10, 10));
        assert_eq!([s.train, s.valid, s.test].concat(), bytes);
        assert!(split(&bytes, [0.9, 0.05, 0.1]).is_err());
    }

    #[test]
    fn batch_inputs_and_targets_are_shifted() {
        let b = Batch::from_windows(&[b"abcd", b"wxyz"]).unwrap();
        assert_eq!(b.seq, 3);
        let s = |v: &[usize]| v.iter().map(|&c| c as u8 as char).collect::<String>();
        assert_eq!(s(&b.inputs()), "abcwxy");
        assert_eq!(s(&b.targets()), "bcdxyz");
    }
}
