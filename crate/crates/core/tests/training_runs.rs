use datr_core::data::{generate_synthetic_corpus, Corpus, SyntheticSpec};
use datr_core::evaluation::grouped_split;
use datr_core::model::{Datr, ModelConfig, Vocab, STAGE1_PREFIXES};
use datr_core::training::{train_stage1, train_stage2, TrainConfig};

fn spearman(ys: &[f64]) -> f64 {
    let n = ys.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ys[a].total_cmp(&ys[b]));
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && ys[order[j + 1]] == ys[order[i]] {
            j += 1;
        }
        for &o in &order[i..=j] {
            rank[o] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    let mean = (n - 1) as f64 / 2.0;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (x, ry) in rank.iter().enumerate() {
        let (dx, dy) = (x as f64 - mean, ry - mean);
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    cov / (vx * vy).sqrt()
}

fn setup() -> (Datr, Corpus, Corpus) {
    let generated = generate_synthetic_corpus(&SyntheticSpec::default()).unwrap();
    let corpus = generated.corpus;
    let split = grouped_split(&corpus, 0).unwrap();
    let config = ModelConfig {
        d: 32,
        layers: 3,
        heads: 4,
        text_layers: 1,
        ..ModelConfig::default()
    };
    let vocab = Vocab::from_texts(corpus.triplets().iter().flat_map(|t| [t.q1.as_str(), t.q2.as_str()]));
    let model = Datr::new(config, vocab, 0).unwrap();
    (model, corpus.subset(&split.train), corpus.subset(&split.test))
}

#[test]
fn stage1_then_stage2_on_the_synthetic_corpus() {
    let (mut model, train, heldout) = setup();
    let report = train_stage1(&mut model, &train, Some(&heldout), &TrainConfig::default()).unwrap();
    assert_eq!(report.loss_curve.len(), 30);
    assert!(report.final_loss() < report.initial_loss, "{report:?}");
    let heldout_curve = &report.heldout_curve;
    assert!(heldout_curve.last() < heldout_curve.first(), "{heldout_curve:?}");
    assert!(report.loss_curve.iter().all(|l| l.is_finite()));

    let frozen: Vec<_> = model
        .params()
        .iter()
        .filter(|(n, _)| STAGE1_PREFIXES.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.to_owned(), t.clone()))
        .collect();
    let report = train_stage2(&mut model, &train, &TrainConfig::default()).unwrap();
    let gap = &report.score_gap_curve;
    assert_eq!(gap.len(), 31);
    let rho = spearman(gap);
    assert!(rho > 0.0, "score gap curve {gap:?} has Spearman {rho}");
    assert!(gap.last() > gap.first());
    for (name, value) in frozen {
        assert_eq!(model.params().by_name(&name), Some(&value), "{name} moved in stage II");
    }
}
