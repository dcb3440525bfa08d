//! Byte-level corpora: windowing, train/held-out split and synthetic text.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Every tenth window (index ≡ 9 mod 10) is held out.
pub const HELDOUT_EVERY: usize = 10;

/// Fixed-length byte windows split into train and held-out sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub window: usize,
    pub train: Vec<Vec<usize>>,
    pub heldout: Vec<Vec<usize>>,
}

impl Corpus {
    /// Splits `bytes` into non-overlapping windows of `window` tokens,
    /// dropping the incomplete tail.
    pub fn from_bytes(bytes: &[u8], window: usize) -> Result<Self> {
        if window < 2 {
            return Err(Error::config("context_length", "windows need at least 2 tokens"));
        }
        if bytes.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        let mut train = Vec::new();
        let mut heldout = Vec::new();
        for (i, chunk) in bytes.chunks_exact(window).enumerate() {
            let toks: Vec<usize> = chunk.iter().map(|&b| b as usize).collect();
            if i % HELDOUT_EVERY == HELDOUT_EVERY - 1 {
                heldout.push(toks);
            } else {
                train.push(toks);
            }
        }
        if train.is_empty() {
            return Err(Error::invalid(format!(
                "corpus of {} bytes holds no full window of {window}",
                bytes.len()
            )));
        }
        Ok(Corpus { window, train, heldout })
    }

    pub fn num_windows(&self) -> usize {
        self.train.len() + self.heldout.len()
    }

    /// Deterministic prefix holding `⌊fraction·N⌋` training windows (at least one).
    pub fn train_prefix(&self, fraction: f64) -> &[Vec<usize>] {
        let n = ((fraction * self.train.len() as f64 + 1e-9).floor() as usize).clamp(1, self.train.len());
        &self.train[..n]
    }

    /// SHA-256 of the held-out windows, hex encoded.
    pub fn heldout_hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.heldout {
            let bytes: Vec<u8> = w.iter().map(|&t| t as u8).collect();
            h.update(&bytes);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Inputs and next-token targets of each window.
pub fn shift(windows: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    windows
        .iter()
        .map(|w| (w[..w.len() - 1].to_vec(), w[1..].to_vec()))
        .unzip()
}

/// Reads a UTF-8 text file and windows its bytes.
pub fn ingest_corpus(path: &Path, window: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    std::str::from_utf8(&bytes).map_err(|e| Error::Spec {
        path: path.to_path_buf(),
        message: format!("not UTF-8 text: {e}"),
    })?;
    if bytes.is_empty() {
        return Err(Error::Spec {
            path: path.to_path_buf(),
            message: "corpus file is empty".into(),
        });
    }
    Corpus::from_bytes(&bytes, window)
}

/// Seeded generators for two disjoint text domains.
///
/// Domain A is narrative prose mixing four topics. Domain B is a terse
/// harbour log about sailing only, with its own line format. Both share the
/// alphabet and much of the vocabulary, so a model fitted on A transfers
/// partially to B.
pub mod synthetic {
    use super::*;

    const TOPICS: [Topic; 4] = [
        Topic {
            nouns: &["fox", "heron", "badger", "otter", "wren", "stag", "hare", "owl"],
            verbs: &["watches", "follows", "hides from", "circles", "chases", "greets"],
            places: &["meadow", "hedge", "burrow", "riverbank", "thicket", "glade"],
            adjs: &["quiet", "grey", "young", "wary", "sleek", "old"],
        },
        Topic {
            nouns: &["baker", "stew", "loaf", "pepper", "kettle", "onion", "butter", "cook"],
            verbs: &["stirs", "slices", "tastes", "seasons", "warms", "serves"],
            places: &["kitchen", "oven", "pantry", "market", "table", "hearth"],
            adjs: &["warm", "salty", "fresh", "golden", "thick", "sweet"],
        },
        Topic {
            nouns: &["sailor", "mast", "anchor", "rope", "captain", "hull", "sail", "tide"],
            verbs: &["hauls", "trims", "ties", "lowers", "checks", "mends"],
            places: &["harbour", "deck", "shore", "jetty", "bay", "channel"],
            adjs: &["salt", "wet", "taut", "steady", "windward", "weathered"],
        },
        Topic {
            nouns: &["engine", "gear", "lever", "valve", "piston", "wheel", "spring", "clock"],
            verbs: &["turns", "drives", "locks", "oils", "tests", "repairs"],
            places: &["workshop", "factory", "shed", "engine room", "yard", "mill"],
            adjs: &["rusty", "heavy", "polished", "small", "brass", "noisy"],
        },
    ];

    const SAILING: usize = 2;

    struct Topic {
        nouns: &'static [&'static str],
        verbs: &'static [&'static str],
        places: &'static [&'static str],
        adjs: &'static [&'static str],
    }

    fn pick<'a, R: Rng>(rng: &mut R, xs: &'a [&'a str]) -> &'a str {
        xs.choose(rng).expect("non-empty word list")
    }

    fn narrative_sentence<R: Rng>(rng: &mut R, t: &Topic) -> String {
        let subject = format!("the {} {}", pick(rng, t.adjs), pick(rng, t.nouns));
        match rng.random_range(0..3) {
            0 => format!(
                "{} {} the {} near the {}.",
                capitalize(&subject),
                pick(rng, t.verbs),
                pick(rng, t.nouns),
                pick(rng, t.places)
            ),
            1 => format!(
                "In the {}, {} {} the {}.",
                pick(rng, t.places),
                subject,
                pick(rng, t.verbs),
                pick(rng, t.nouns)
            ),
            _ => format!(
                "{} {} and then {} the {} {}.",
                capitalize(&subject),
                pick(rng, t.verbs),
                pick(rng, t.verbs),
                pick(rng, t.adjs),
                pick(rng, t.nouns)
            ),
        }
    }

    fn capitalize(s: &str) -> String {
        let mut c = s.chars();
        match c.next() {
            Some(f) => f.to_uppercase().chain(c).collect(),
            None => String::new(),
        }
    }

    /// Narrative prose over all four topics, roughly `n_bytes` long.
    pub fn domain_a(n_bytes: usize, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = String::with_capacity(n_bytes + 128);
        while out.len() < n_bytes {
            let topic = &TOPICS[rng.random_range(0..TOPICS.len())];
            for _ in 0..rng.random_range(2..5) {
                out.push_str(&narrative_sentence(&mut rng, topic));
                out.push(' ');
            }
            out.push('\n');
        }
        out.truncate(n_bytes);
        out
    }

    /// Harbour log lines about sailing, roughly `n_bytes` long.
    pub fn domain_b(n_bytes: usize, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b0b0);
        let t = &TOPICS[SAILING];
        let mut out = String::with_capacity(n_bytes + 128);
        while out.len() < n_bytes {
            let line = match rng.random_range(0..3) {
                0 => format!(
                    "log: {} {} the {} at the {}.\n",
                    pick(&mut rng, t.nouns),
                    pick(&mut rng, t.verbs),
                    pick(&mut rng, t.nouns),
                    pick(&mut rng, t.places)
                ),
                1 => format!(
                    "log: {} {}, {} {}.\n",
                    pick(&mut rng, t.adjs),
                    pick(&mut rng, t.nouns),
                    pick(&mut rng, t.adjs),
                    pick(&mut rng, t.places)
                ),
                _ => format!(
                    "log: the {} {} the {} {}.\n",
                    pick(&mut rng, t.nouns),
                    pick(&mut rng, t.verbs),
                    pick(&mut rng, t.adjs),
                    pick(&mut rng, t.nouns)
                ),
            };
            out.push_str(&line);
        }
        out.truncate(n_bytes);
        out
    }
}
