//! The model's tape-built forward passes against a plain-loop re-derivation
//! that reads every weight by name.

use datr_core::autodiff::Tensor;
use datr_core::model::{Datr, FusionMode, ModelConfig, Vocab};

type Mat = Vec<Vec<f64>>;

struct Reference<'m> {
    model: &'m Datr,
}

impl Reference<'_> {
    fn tensor(&self, name: &str) -> &Tensor {
        self.model
            .params()
            .by_name(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
    }

    fn weight(&self, name: &str) -> Mat {
        let t = self.tensor(name);
        let cols = t.shape()[1];
        t.data().chunks(cols).map(<[f64]>::to_vec).collect()
    }

    fn vector(&self, name: &str) -> Vec<f64> {
        self.tensor(name).data().to_vec()
    }

    fn linear(&self, x: &Mat, name: &str) -> Mat {
        let w = self.weight(&format!("{name}.w"));
        let b = self.vector(&format!("{name}.b"));
        x.iter()
            .map(|row| {
                (0..b.len())
                    .map(|j| b[j] + row.iter().zip(&w).map(|(xi, wi)| xi * wi[j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn mlp(&self, x: &Mat, name: &str) -> Mat {
        let h = relu(self.linear(x, &format!("{name}.l1")));
        self.linear(&h, &format!("{name}.l2"))
    }

    fn layer_norm(&self, x: &Mat, name: &str) -> Mat {
        let g = self.vector(&format!("{name}.gamma"));
        let b = self.vector(&format!("{name}.beta"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-5).sqrt();
                row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
            })
            .collect()
    }

    fn attention(&self, h: &Mat, name: &str) -> Mat {
        let heads = self.model.config().heads;
        let proj = |suffix: &str| matmul(h, &self.weight(&format!("{name}.attn.{suffix}")));
        let (q, k, v) = (proj("wq"), proj("wk"), proj("wv"));
        let d = h[0].len();
        let dh = d / heads;
        let t = h.len();
        let mut out = vec![vec![0.0; d]; t];
        for head in 0..heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    out[i][c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        matmul(&out, &self.weight(&format!("{name}.attn.wo")))
    }

    fn block(&self, x: &Mat, name: &str) -> Mat {
        let a = self.attention(&self.layer_norm(x, &format!("{name}.ln1")), name);
        let x = add(x, &a);
        let h = self.layer_norm(&x, &format!("{name}.ln2"));
        let f = self.linear(&relu(self.linear(&h, &format!("{name}.ffn1"))), &format!("{name}.ffn2"));
        add(&x, &f)
    }

    fn conv(&self, x: &Mat, layer: usize) -> Mat {
        let kernel = self.tensor(&format!("video.conv{layer}.kernel"));
        let bias = self.vector(&format!("video.conv{layer}.b"));
        let [k, d_in, d_out] = *kernel.shape() else { unreachable!() };
        let out_len = (x.len() + 2 - k) / 2 + 1;
        (0..out_len)
            .map(|t| {
                (0..d_out)
                    .map(|o| {
                        let mut s = bias[o];
                        for j in 0..k {
                            let src = (2 * t + j) as isize - 1;
                            if src < 0 || src as usize >= x.len() {
                                continue;
                            }
                            for c in 0..d_in {
                                s += x[src as usize][c] * kernel.data()[(j * d_in + c) * d_out + o];
                            }
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    fn encode_text(&self, text: &str) -> Vec<f64> {
        let tokens = self.model.tokenize(text);
        let tok = self.weight("text.tok_emb");
        let pos = self.weight("text.pos_emb");
        let mut h: Mat = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| tok[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
            .collect();
        for l in 0..self.model.config().text_layers {
            h = self.block(&h, &format!("text.block{l}"));
        }
        let pooled = vec![mean_rows(&h)];
        normalize(&self.mlp(&pooled, "text.adapter")[0])
    }

    fn encode_video(&self, frames: &Tensor) -> Vec<f64> {
        let x: Mat = frames.data().chunks(frames.shape()[1]).map(<[f64]>::to_vec).collect();
        let mut h = self.linear(&x, "video.proj");
        for l in 0..self.model.config().layers {
            h = self.block(&h, &format!("video.block{l}"));
            h = self.conv(&h, l);
        }
        normalize(&mean_rows(&h))
    }

    fn fuse(&self, z1: &[f64], z2: &[f64], mode: FusionMode) -> Vec<f64> {
        let sum: Vec<f64> = z1.iter().zip(z2).map(|(a, b)| a + b).collect();
        let prod: Vec<f64> = z1.iter().zip(z2).map(|(a, b)| a * b).collect();
        let zero = vec![0.0; z1.len()];
        let (sum, prod) = match mode {
            FusionMode::Full => (sum, prod),
            FusionMode::Add => (sum, zero),
            FusionMode::Mul => (zero, prod),
        };
        let x = [z1, z2, &sum, &prod].concat();
        self.mlp(&vec![x], "fusion").remove(0)
    }

    fn rerank(&self, zf: &[f64], zv: &[f64]) -> f64 {
        let prod: Vec<f64> = zf.iter().zip(zv).map(|(a, b)| a * b).collect();
        let h = relu(self.linear(&vec![[zf, zv, &prod].concat()], "rerank.phi"));
        self.linear(&h, "rerank.head")[0][0]
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn relu(x: Mat) -> Mat {
    x.into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

fn mean_rows(x: &Mat) -> Vec<f64> {
    (0..x[0].len())
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64)
        .collect()
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn assert_close(got: &[f64], want: &[f64], what: &str) {
    assert_eq!(got.len(), want.len(), "{what}");
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-10, "{what}: {got:?} vs {want:?}");
    }
}

fn model(seed: u64) -> Datr {
    let config = ModelConfig {
        d: 16,
        layers: 3,
        heads: 4,
        n_frames: 8,
        d_in: 6,
        text_layers: 2,
        max_tokens: 8,
        ..ModelConfig::default()
    };
    Datr::new(config, Vocab::from_words(["vertigo", "epley", "left", "right", "seated"]), seed).unwrap()
}

fn frames(seed: u64) -> Tensor {
    let data = (0..8 * 6)
        .map(|i| ((i as u64 * 7919 + seed * 104729) % 2000) as f64 / 1000.0 - 1.0)
        .collect();
    Tensor::new([8, 6], data).unwrap()
}

#[test]
fn text_encoder_matches_reference() {
    for seed in 0..3 {
        let m = model(seed);
        let r = Reference { model: &m };
        for text in ["vertigo", "epley left seated", "unknown words here", "right right right"] {
            assert_close(&m.encode_text(text).unwrap(), &r.encode_text(text), text);
        }
    }
}

#[test]
fn video_encoder_matches_reference() {
    for seed in 0..3 {
        let m = model(seed);
        let r = Reference { model: &m };
        for f in 0..3 {
            assert_close(&m.encode_video(&frames(f)).unwrap(), &r.encode_video(&frames(f)), "video");
        }
    }
}

#[test]
fn fusion_and_rerank_match_reference() {
    let m = model(4);
    let r = Reference { model: &m };
    let z1 = m.encode_text("vertigo epley").unwrap();
    let z2 = m.encode_text("epley left").unwrap();
    let zv = m.encode_video(&frames(2)).unwrap();
    for mode in FusionMode::ALL {
        let zf = m.fuse(&z1, &z2, mode).unwrap();
        assert_close(&zf, &r.fuse(&z1, &z2, mode), "fuse");
        let s = m.rerank_score(&zf, &zv).unwrap();
        assert!((s - r.rerank(&zf, &zv)).abs() < 1e-10);
    }
}
