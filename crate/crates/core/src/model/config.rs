use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// Defaults are sized for a single CPU core: `d = 64` with 6 temporal layers,
/// 8 heads and 32 frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared embedding width.
    pub d: usize,
    /// Temporal transformer blocks in the video branch, each followed by a
    /// stride-2 convolution.
    pub layers: usize,
    pub heads: usize,
    pub n_frames: usize,
    /// Width of the precomputed per-frame features.
    pub d_in: usize,
    pub text_layers: usize,
    /// Vocabulary size including the reserved UNK id 0.
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub tau_init: f64,
    /// FFN hidden width as a multiple of `d`.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 6,
            heads: 8,
            n_frames: 32,
            d_in: 32,
            text_layers: 2,
            vocab_size: 1,
            max_tokens: 64,
            tau_init: 0.07,
            ffn_mult: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("n_frames", self.n_frames),
            ("d_in", self.d_in),
            ("text_layers", self.text_layers),
            ("vocab_size", self.vocab_size),
            ("max_tokens", self.max_tokens),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::Config("tau_init must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Temporal length after each video block (index 0 is the input length).
    pub fn length_schedule(&self) -> Vec<usize> {
        let mut lens = vec![self.n_frames];
        let mut len = self.n_frames;
        for _ in 0..self.layers {
            len = crate::autodiff::conv1d_out_len(len, 3, 2, 1).expect("pad 1 keeps length >= 1");
            lens.push(len);
        }
        lens
    }

    /// `key = value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "n_frames = {}", self.n_frames);
        let _ = writeln!(s, "d_in = {}", self.d_in);
        let _ = writeln!(s, "text_layers = {}", self.text_layers);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "max_tokens = {}", self.max_tokens);
        let _ = writeln!(s, "tau_init = {:?}", self.tau_init);
        let _ = writeln!(s, "ffn_mult = {}", self.ffn_mult);
        s
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = map
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Config(format!("bad value for `{key}`: {raw}")))
        }
        let cfg = Self {
            d: get(map, "d")?,
            layers: get(map, "layers")?,
            heads: get(map, "heads")?,
            n_frames: get(map, "n_frames")?,
            d_in: get(map, "d_in")?,
            text_layers: get(map, "text_layers")?,
            vocab_size: get(map, "vocab_size")?,
            max_tokens: get(map, "max_tokens")?,
            tau_init: get(map, "tau_init")?,
            ffn_mult: get(map, "ffn_mult")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key = value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        map.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(map)
}
