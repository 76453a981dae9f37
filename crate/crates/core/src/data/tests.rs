use std::collections::BTreeMap;
use std::path::Path;

use super::*;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_topics: 5,
        details_per_topic: 4,
        videos_per_detail: 3,
        n_frames: 8,
        seed,
        ..SyntheticSpec::default()
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn counts_match_the_requested_shape() {
    let g = generate_synthetic_corpus(&small_spec(0)).unwrap();
    assert_eq!(g.corpus.videos().len(), 60);
    assert_eq!(g.corpus.triplets().len(), 60);
    assert_eq!(g.corpus.sources().len(), 5);
    assert_eq!(g.corpus.frame_shape(), Some((8, 32)));
    let t = &g.corpus.triplets()[0];
    assert!(t.q2.starts_with(&t.q1) && t.q2.len() > t.q1.len());
}

#[test]
fn single_detail_is_rejected() {
    let spec = SyntheticSpec {
        details_per_topic: 1,
        ..small_spec(0)
    };
    assert!(matches!(generate_synthetic_corpus(&spec), Err(Error::Config(_))));
}

#[test]
fn generation_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic_corpus(&small_spec(7)).unwrap().write(a.path()).unwrap();
    generate_synthetic_corpus(&small_spec(7)).unwrap().write(b.path()).unwrap();
    let (x, y) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(x.len(), 62);
    assert_eq!(x, y);

    let c = tempfile::tempdir().unwrap();
    generate_synthetic_corpus(&small_spec(8)).unwrap().write(c.path()).unwrap();
    assert_ne!(x, dir_bytes(c.path()));
}

#[test]
fn written_corpus_loads_back_identically() {
    let g = generate_synthetic_corpus(&small_spec(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    g.write(dir.path()).unwrap();
    assert_eq!(Corpus::load(dir.path()).unwrap(), g.corpus);
}

/// Nearest-neighbour retrieval with the latent oracle encoder. The refined
/// query should single out its detail group; the coarse one ties within topic.
#[test]
fn refined_query_disambiguates_under_the_oracle_encoder() {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        ..small_spec(3)
    };
    let g = generate_synthetic_corpus(&spec).unwrap();
    let vids: Vec<(String, Vec<f64>)> = g
        .corpus
        .videos()
        .iter()
        .map(|v| (v.video_id.clone(), SyntheticCorpus::oracle_video_embedding(&v.frames)))
        .collect();
    let group = |id: &str| id[..7].to_owned();
    let topic = |id: &str| id[..4].to_owned();

    let (mut m1, mut m2, mut hit1, mut hit2) = (0.0, 0.0, 0usize, 0usize);
    for t in g.corpus.triplets() {
        let truth = &vids.iter().find(|(id, _)| *id == t.video_id).unwrap().1;
        for (q, margin, hits) in [(&t.q1, &mut m1, &mut hit1), (&t.q2, &mut m2, &mut hit2)] {
            let z = g.oracle_text_embedding(q);
            let own = cosine(&z, truth);
            let best_other = vids
                .iter()
                .filter(|(id, _)| topic(id) == topic(&t.video_id) && group(id) != group(&t.video_id))
                .map(|(_, v)| cosine(&z, v))
                .fold(f64::NEG_INFINITY, f64::max);
            *margin += own - best_other;
            let top = vids
                .iter()
                .max_by(|a, b| cosine(&z, &a.1).total_cmp(&cosine(&z, &b.1)))
                .unwrap();
            if group(&top.0) == group(&t.video_id) {
                *hits += 1;
            }
        }
    }
    let n = g.corpus.triplets().len() as f64;
    assert!((m1 / n).abs() < 1e-6, "coarse margin {}", m1 / n);
    assert!(m2 / n > 0.1, "refined margin {}", m2 / n);
    assert_eq!(hit2, g.corpus.triplets().len());
    assert!(hit1 < hit2);
}

#[test]
fn fresh_corpus_validates_clean() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_corpus(&small_spec(2)).unwrap().write(dir.path()).unwrap();
    let r = validate_corpus(dir.path());
    assert!(r.is_clean(), "{:?}", r.violations);
    assert_eq!((r.videos, r.triplets, r.sources), (60, 60, 5));
    assert_eq!(r.frame_shape, Some((8, 32)));
}

#[test]
fn deleted_feature_file_is_one_dangling_reference() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_corpus(&small_spec(2)).unwrap().write(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("features/v001_02_00.mhvf")).unwrap();
    let r = validate_corpus(dir.path());
    assert_eq!(r.violations.len(), 1, "{:?}", r.violations);
    assert_eq!(r.violations[0].kind, ViolationKind::DanglingReference);
    assert!(matches!(
        Corpus::load(dir.path()),
        Err(Error::MissingFeatures(ids)) if ids == ["v001_02_00"]
    ));
}

#[test]
fn corrupted_header_is_one_format_violation() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_corpus(&small_spec(2)).unwrap().write(dir.path()).unwrap();
    let path = dir.path().join("features/v000_00_01.mhvf");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, bytes).unwrap();
    let r = validate_corpus(dir.path());
    assert_eq!(r.violations.len(), 1, "{:?}", r.violations);
    assert_eq!(r.violations[0].kind, ViolationKind::Format);
    assert!(r.violations[0].path.ends_with("v000_00_01.mhvf"));
}

#[test]
fn single_source_is_a_split_violation() {
    let spec = SyntheticSpec {
        n_topics: 1,
        ..small_spec(0)
    };
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_corpus(&spec).unwrap().write(dir.path()).unwrap();
    let r = validate_corpus(dir.path());
    assert_eq!(r.violations.len(), 1);
    assert_eq!(r.violations[0].kind, ViolationKind::SplitFeasibility);
}
