use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use datr_core::data::{generate_synthetic_corpus, SyntheticSpec};
use datr_core::model::{Datr, FusionMode, ModelConfig, Vocab};
use datr_core::retrieval::{
    brute_force_top_k, run_pipeline, stage1_from_embedding, stage1_retrieve, EmbeddingIndex, PipelineConfig,
    SessionState,
};

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random unit rows; about one row in ten duplicates an earlier one so that
/// exact score ties are exercised.
fn random_index(n: usize, d: usize, seed: u64) -> EmbeddingIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let row = if i > 0 && rng.random_bool(0.1) {
            rows[rng.random_range(0..i)].clone()
        } else {
            unit(&mut rng, d)
        };
        rows.push(row);
    }
    let ids = (0..n).map(|i| format!("vid{:05}", (i * 7919) % 100_000)).collect();
    EmbeddingIndex::new(ids, rows.concat(), d, [0; 32]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn top_k_matches_full_sort(n in 1usize..=2000, d in 1usize..=64, k in 1usize..=2100, seed in any::<u64>()) {
        let index = random_index(n, d, seed);
        let q = unit(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), d);
        let got: Vec<String> = stage1_from_embedding(&index, &q, k).unwrap().ids().map(str::to_owned).collect();
        prop_assert_eq!(got, brute_force_top_k(&index, &q, k));
    }
}

#[test]
fn thousand_rows_top_hundred() {
    for seed in 0..5 {
        let index = random_index(1000, 64, seed);
        let q = unit(&mut ChaCha8Rng::seed_from_u64(99 + seed), 64);
        let list = stage1_from_embedding(&index, &q, 100).unwrap();
        assert_eq!(list.len(), 100);
        let got: Vec<&str> = list.ids().collect();
        assert_eq!(got, brute_force_top_k(&index, &q, 100));
        assert!(list.entries.windows(2).all(|w| w[0].stage1_score >= w[1].stage1_score));
    }
}

fn small_model(corpus: &datr_core::data::Corpus) -> Datr {
    let config = ModelConfig {
        d: 16,
        layers: 2,
        heads: 2,
        n_frames: 8,
        d_in: 8,
        text_layers: 1,
        ..ModelConfig::default()
    };
    let vocab = Vocab::from_texts(corpus.triplets().iter().map(|t| t.q2.as_str()));
    Datr::new(config, vocab, 1).unwrap()
}

fn small_corpus() -> datr_core::data::Corpus {
    let spec = SyntheticSpec {
        n_topics: 10,
        details_per_topic: 5,
        videos_per_detail: 2,
        d_in: 8,
        n_frames: 8,
        ..SyntheticSpec::default()
    };
    generate_synthetic_corpus(&spec).unwrap().corpus
}

#[test]
fn index_rows_are_stacked_video_embeddings() {
    let corpus = small_corpus();
    assert_eq!(corpus.videos().len(), 100);
    let model = small_model(&corpus);
    let index = EmbeddingIndex::build(corpus.videos(), &model).unwrap();
    assert_eq!(index.checkpoint_digest(), &model.digest());
    let stacked: Vec<f64> = corpus
        .videos()
        .iter()
        .flat_map(|v| model.encode_video(&v.frames).unwrap())
        .collect();
    assert_eq!(index.matrix(), stacked.as_slice());
    let ids: Vec<&str> = corpus.videos().iter().map(|v| v.video_id.as_str()).collect();
    assert_eq!(index.ids(), ids.as_slice());
}

#[test]
fn two_turn_session_matches_composed_oracle() {
    let corpus = small_corpus();
    let model = small_model(&corpus);
    let index = EmbeddingIndex::build(corpus.videos(), &model).unwrap();
    for fusion in FusionMode::ALL {
        let config = PipelineConfig {
            k: 30,
            m: 10,
            stage2: true,
            fusion,
        };
        for t in corpus.triplets().iter().step_by(17) {
            let mut session = SessionState::new("s");
            let first = run_pipeline(&mut session, &t.q1, &model, &index, &config).unwrap();
            let stage1 = stage1_retrieve(&model, &index, &t.q1, config.k).unwrap();
            assert_eq!(first, stage1.head(config.m));

            let second = run_pipeline(&mut session, &t.q2, &model, &index, &config).unwrap();
            let zf = model
                .fuse(&model.encode_text(&t.q1).unwrap(), &model.encode_text(&t.q2).unwrap(), fusion)
                .unwrap();
            let mut want: Vec<(f64, f64, String)> = stage1
                .entries
                .iter()
                .map(|e| {
                    let s2 = model.rerank_score(&zf, index.embedding(&e.video_id).unwrap()).unwrap();
                    (s2, e.stage1_score, e.video_id.clone())
                })
                .collect();
            want.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then_with(|| a.2.cmp(&b.2)));
            let want: Vec<String> = want.into_iter().take(config.m).map(|w| w.2).collect();
            let got: Vec<String> = second.ids().map(str::to_owned).collect();
            assert_eq!(got, want);
            assert!(second.ids().all(|id| stage1.ids().any(|c| c == id)));
        }
    }
}
