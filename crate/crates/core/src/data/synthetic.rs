//! Seeded generator for compositional topic/detail corpora.
//!
//! Every vocabulary word is bound to a latent unit vector. A topic is a set of
//! topic words and each of its details is a set of detail words; a video's
//! frames scatter around `u_t + v_tk` where `u_t` and `v_tk` are the normalized
//! sums of those latents. The coarse query names only the topic, so it cannot
//! tell a topic's details apart; the refined query adds the detail words.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, ManifestEntry, VideoRecord};
use crate::autodiff::Tensor;
use crate::data::features::encode_features;
use crate::data::triplets::{triplets_to_jsonl, TripletRecord};
use crate::error::{Error, Result};
use crate::model::normalize_words;

const TOPIC_WORDS: &[&str] = &[
    "squat", "lunge", "plank", "stretch", "shoulder", "knee", "hip", "ankle", "wrist", "neck",
    "spine", "balance", "breathing", "massage", "bandage", "posture", "bridge", "rotation",
    "press", "curl", "walk", "step", "roll", "splint",
];

const DETAIL_WORDS: &[&str] = &[
    "seated", "standing", "supine", "prone", "wall", "chair", "band", "towel", "beginner",
    "elderly", "slow", "assisted", "unilateral", "pregnant", "postoperative", "child",
];

/// Shape and seed of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_topics: usize,
    pub details_per_topic: usize,
    pub videos_per_detail: usize,
    pub d_in: usize,
    pub n_frames: usize,
    pub noise_sigma: f64,
    /// Size of the word pool topics draw from.
    pub topic_vocab: usize,
    pub words_per_topic: usize,
    /// Size of the word pool details draw from. Ignored with `shared_words`.
    pub detail_vocab: usize,
    pub words_per_detail: usize,
    /// Draw details from the topic pool (excluding the topic's own words), so
    /// every word can act as a topic word in one place and a detail elsewhere.
    pub shared_words: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_topics: 20,
            details_per_topic: 5,
            videos_per_detail: 3,
            d_in: 32,
            n_frames: 32,
            noise_sigma: 0.3,
            topic_vocab: 12,
            words_per_topic: 3,
            detail_vocab: 10,
            words_per_detail: 1,
            shared_words: false,
            seed: 0,
        }
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_topics == 0 || self.videos_per_detail == 0 {
            return bad("n_topics and videos_per_detail must be positive".into());
        }
        if self.details_per_topic < 2 {
            return bad(format!(
                "details_per_topic = {} but at least 2 are needed for refinement to matter",
                self.details_per_topic
            ));
        }
        if self.d_in == 0 || self.n_frames == 0 {
            return bad("d_in and n_frames must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma = {} must be finite and >= 0", self.noise_sigma));
        }
        if self.words_per_topic == 0 || self.words_per_detail == 0 {
            return bad("words_per_topic and words_per_detail must be positive".into());
        }
        if binomial(self.topic_vocab, self.words_per_topic) < self.n_topics as u128 {
            return bad(format!(
                "{} topic words taken {} at a time cannot name {} distinct topics",
                self.topic_vocab, self.words_per_topic, self.n_topics
            ));
        }
        let detail_pool = self.detail_pool();
        if binomial(detail_pool, self.words_per_detail) < self.details_per_topic as u128 {
            return bad(format!(
                "{detail_pool} detail words taken {} at a time cannot name {} distinct details",
                self.words_per_detail, self.details_per_topic
            ));
        }
        Ok(())
    }

    /// Words available to one topic's details.
    fn detail_pool(&self) -> usize {
        if self.shared_words {
            self.topic_vocab.saturating_sub(self.words_per_topic)
        } else {
            self.detail_vocab
        }
    }

    pub fn n_videos(&self) -> usize {
        self.n_topics * self.details_per_topic * self.videos_per_detail
    }
}

/// Words and latents behind one topic.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicInfo {
    pub words: Vec<String>,
    pub details: Vec<Vec<String>>,
    pub latent: Vec<f64>,
    pub detail_latents: Vec<Vec<f64>>,
}

/// Generated corpus plus the latent ground truth used to build it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub corpus: Corpus,
    pub topics: Vec<TopicInfo>,
    pub word_latents: BTreeMap<String, Vec<f64>>,
}

fn vocabulary(names: &[&str], n: usize, prefix: &str) -> Vec<String> {
    (0..n)
        .map(|i| match names.get(i) {
            Some(w) => (*w).to_owned(),
            None => format!("{prefix}{i}"),
        })
        .collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Unit latents, mutually orthogonal for as many words as the width allows.
fn latents(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut v = gaussian(rng, dim);
        if i < dim {
            for prev in &out[..i] {
                let p: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(prev).for_each(|(a, b)| *a -= p * b);
            }
        }
        out.push(normalized(v));
    }
    out
}

fn sum_latents(words: &[usize], table: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for &w in words {
        acc.iter_mut().zip(&table[w]).for_each(|(a, b)| *a += b);
    }
    normalized(acc)
}

/// Draws `count` distinct sorted `k`-subsets of `0..n`.
fn distinct_subsets(rng: &mut ChaCha8Rng, n: usize, k: usize, count: usize) -> Vec<Vec<usize>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut s = sample(rng, n, k).into_vec();
        s.sort_unstable();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

pub fn video_id(topic: usize, detail: usize, take: usize) -> String {
    format!("v{topic:03}_{detail:02}_{take:02}")
}

pub fn source_id(topic: usize) -> String {
    format!("src{topic:03}")
}

/// Builds the corpus in memory. Same spec, same corpus, down to the bytes.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (names, table, detail_base) = if spec.shared_words {
        let pool: Vec<&str> = TOPIC_WORDS.iter().chain(DETAIL_WORDS).copied().collect();
        let names = vocabulary(&pool, spec.topic_vocab, "word");
        (names, latents(&mut rng, spec.topic_vocab, spec.d_in), 0)
    } else {
        let mut names = vocabulary(TOPIC_WORDS, spec.topic_vocab, "topic");
        names.extend(vocabulary(DETAIL_WORDS, spec.detail_vocab, "detail"));
        (names, latents(&mut rng, spec.topic_vocab + spec.detail_vocab, spec.d_in), spec.topic_vocab)
    };
    let word_latents: BTreeMap<String, Vec<f64>> = names.iter().cloned().zip(table.iter().cloned()).collect();

    let topic_sets = distinct_subsets(&mut rng, spec.topic_vocab, spec.words_per_topic, spec.n_topics);
    let mut topics = Vec::with_capacity(spec.n_topics);
    for set in &topic_sets {
        // Candidate detail words, as indices into `names`/`table`.
        let pool: Vec<usize> = if spec.shared_words {
            (0..spec.topic_vocab).filter(|w| !set.contains(w)).collect()
        } else {
            (detail_base..detail_base + spec.detail_vocab).collect()
        };
        let detail_sets: Vec<Vec<usize>> =
            distinct_subsets(&mut rng, pool.len(), spec.words_per_detail, spec.details_per_topic)
                .into_iter()
                .map(|d| d.into_iter().map(|i| pool[i]).collect())
                .collect();
        topics.push(TopicInfo {
            words: set.iter().map(|&i| names[i].clone()).collect(),
            latent: sum_latents(set, &table, spec.d_in),
            detail_latents: detail_sets.iter().map(|d| sum_latents(d, &table, spec.d_in)).collect(),
            details: detail_sets
                .iter()
                .map(|d| d.iter().map(|&i| names[i].clone()).collect())
                .collect(),
        });
    }

    let mut videos = Vec::with_capacity(spec.n_videos());
    let mut triplets = Vec::with_capacity(spec.n_videos());
    for (t, topic) in topics.iter().enumerate() {
        let q1 = topic.words.join(" ");
        for (k, detail) in topic.details.iter().enumerate() {
            let q2 = format!("{q1} {}", detail.join(" "));
            let centre: Vec<f64> = topic
                .latent
                .iter()
                .zip(&topic.detail_latents[k])
                .map(|(a, b)| a + b)
                .collect();
            for j in 0..spec.videos_per_detail {
                let mut data = Vec::with_capacity(spec.n_frames * spec.d_in);
                for _ in 0..spec.n_frames {
                    for &c in &centre {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        // Features live on disk as f32; generate them at that precision.
                        data.push((c + spec.noise_sigma * z) as f32 as f64);
                    }
                }
                let id = video_id(t, k, j);
                videos.push(VideoRecord {
                    video_id: id.clone(),
                    source_id: source_id(t),
                    frames: Tensor::new([spec.n_frames, spec.d_in], data)?,
                });
                triplets.push(TripletRecord {
                    id: format!("q{t:03}_{k:02}_{j:02}"),
                    video_id: id,
                    q1: q1.clone(),
                    d_v: format!("{} demonstration of {q1}", detail.join(" ")),
                    q2: q2.clone(),
                    source_id: source_id(t),
                });
            }
        }
    }

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        corpus: Corpus::new(triplets, videos)?,
        topics,
        word_latents,
    })
}

impl SyntheticCorpus {
    /// Normalized sum of the latents of the known words in `text`.
    pub fn oracle_text_embedding(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.spec.d_in];
        for w in normalize_words(text) {
            if let Some(v) = self.word_latents.get(&w) {
                acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
        }
        normalized(acc)
    }

    /// Normalized mean frame.
    pub fn oracle_video_embedding(frames: &Tensor) -> Vec<f64> {
        let mut acc = vec![0.0; frames.cols()];
        for r in 0..frames.rows() {
            acc.iter_mut().zip(frames.row(r)).for_each(|(a, b)| *a += b);
        }
        normalized(acc)
    }

    /// Writes `triplets.jsonl`, `manifest.jsonl` and `features/<video_id>.mhvf`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_corpus(&self.corpus, dir)
    }
}

pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut manifest = String::new();
    for v in corpus.videos() {
        let rel = format!("features/{}.mhvf", v.video_id);
        let path = dir.join(&rel);
        std::fs::write(&path, encode_features(&v.frames)).map_err(|e| Error::io(&path, e))?;
        let entry = ManifestEntry {
            video_id: v.video_id.clone(),
            feature_path: rel,
            source_id: v.source_id.clone(),
        };
        manifest.push_str(&serde_json::to_string(&entry).expect("manifest serializes"));
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("triplets.jsonl");
    std::fs::write(&path, triplets_to_jsonl(corpus.triplets())).map_err(|e| Error::io(&path, e))
}
