use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};

/// Fraction of videos held out for testing.
pub const TEST_FRACTION: f64 = 0.2;
/// Allowed deviation of the realized test fraction, in fraction-of-corpus units.
pub const SPLIT_TOLERANCE: f64 = 0.05;

/// Video ids on each side of a source-grouped split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// Moves whole source groups into the test side, in seeded random order, until
/// it holds at least 20% of the videos. Groups that would push it past 25% are
/// skipped; a split that cannot land within 15–25% is an error.
pub fn grouped_split(corpus: &Corpus, seed: u64) -> Result<Split> {
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for v in corpus.videos() {
        groups.entry(&v.source_id).or_default().push(&v.video_id);
    }
    if groups.len() < 2 {
        return Err(Error::Split(format!(
            "{} source group(s); need at least 2 so that no source crosses the split",
            groups.len()
        )));
    }
    let n = corpus.videos().len() as f64;
    let target = TEST_FRACTION * n;
    let upper = (TEST_FRACTION + SPLIT_TOLERANCE) * n;
    let lower = (TEST_FRACTION - SPLIT_TOLERANCE) * n;

    let mut order: Vec<&str> = groups.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test_sources = BTreeSet::new();
    let mut size = 0usize;
    for src in order {
        if size as f64 >= target {
            break;
        }
        let g = groups[src].len();
        if (size + g) as f64 <= upper + 1e-9 && test_sources.len() + 1 < groups.len() {
            test_sources.insert(src);
            size += g;
        }
    }
    if (size as f64) < lower - 1e-9 || size == 0 {
        return Err(Error::Split(format!(
            "source groups are too coarse: best test side holds {size} of {n} videos"
        )));
    }
    let (mut train, mut test) = (BTreeSet::new(), BTreeSet::new());
    for (src, ids) in &groups {
        let side = if test_sources.contains(src) { &mut test } else { &mut train };
        side.extend(ids.iter().map(|s| s.to_string()));
    }
    Ok(Split { train, test })
}
