//! Straight-line reference implementation of the forward pass, kept
//! independent of the library's runtime: per-position loops, f64
//! accumulators, and no shared helper code. The production pass must match
//! it to float tolerance on fixture models.

use quanterr_core::fixture::{self, CorpusSpec, FixtureSpec};
use quanterr_core::runtime::{forward, nll, TapSpec};
use quanterr_core::weights::ModelWeights;

/// One token position's state, `d` floats.
type Vecf = Vec<f32>;

fn ref_rmsnorm(x: &[f32], gamma: &[f32], eps: f32) -> Vecf {
    let ms: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps as f64).sqrt();
    x.iter()
        .zip(gamma)
        .map(|(&v, &g)| ((v as f64) * inv * (g as f64)) as f32)
        .collect()
}

fn ref_matvec(w: &quanterr_core::Matrix, x: &[f32]) -> Vecf {
    (0..w.rows())
        .map(|r| {
            let mut acc = 0.0f64;
            for (c, &xv) in x.iter().enumerate() {
                acc += w.get(r, c) as f64 * xv as f64;
            }
            acc as f32
        })
        .collect()
}

fn ref_rope(head: &mut [f32], pos: usize) {
    let dh = head.len();
    for i in 0..dh / 2 {
        let theta = (10000.0f64).powf(-2.0 * i as f64 / dh as f64);
        let angle = pos as f64 * theta;
        let (s, c) = angle.sin_cos();
        let a = head[2 * i] as f64;
        let b = head[2 * i + 1] as f64;
        head[2 * i] = (a * c - b * s) as f32;
        head[2 * i + 1] = (a * s + b * c) as f32;
    }
}

fn ref_silu(x: f32) -> f32 {
    let xf = x as f64;
    (xf / (1.0 + (-xf).exp())) as f32
}

/// Full-sequence logits, one Vec per position.
fn ref_forward(model: &ModelWeights, tokens: &[u32]) -> Vec<Vecf> {
    let cfg = model.config();
    let (d, dh, nh) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
    let t_len = tokens.len();

    let mut z: Vec<Vecf> = tokens
        .iter()
        .map(|&t| model.embed.row(t as usize).to_vec())
        .collect();

    for layer in &model.layers {
        // Attention.
        let h1: Vec<Vecf> = z
            .iter()
            .map(|x| ref_rmsnorm(x, &layer.ln1, cfg.rms_eps))
            .collect();
        let mut q: Vec<Vecf> = h1.iter().map(|x| ref_matvec(&layer.w_q, x)).collect();
        let mut k: Vec<Vecf> = h1.iter().map(|x| ref_matvec(&layer.w_k, x)).collect();
        let v: Vec<Vecf> = h1.iter().map(|x| ref_matvec(&layer.w_v, x)).collect();
        for t in 0..t_len {
            for h in 0..nh {
                ref_rope(&mut q[t][h * dh..(h + 1) * dh], t);
                ref_rope(&mut k[t][h * dh..(h + 1) * dh], t);
            }
        }

        let mut r = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut mix = vec![0.0f32; d];
            for h in 0..nh {
                // Scores over positions <= t, softmax in f64.
                let mut scores = Vec::with_capacity(t + 1);
                for s in 0..=t {
                    let mut dot = 0.0f64;
                    for i in 0..dh {
                        dot += q[t][h * dh + i] as f64 * k[s][h * dh + i] as f64;
                    }
                    scores.push(dot / (dh as f64).sqrt());
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&x| (x - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (s, &e) in exps.iter().enumerate() {
                    let w = e / sum;
                    for i in 0..dh {
                        mix[h * dh + i] += (w * v[s][h * dh + i] as f64) as f32;
                    }
                }
            }
            let attn_out = ref_matvec(&layer.w_o, &mix);
            let rt: Vecf = z[t].iter().zip(&attn_out).map(|(a, b)| a + b).collect();
            r.push(rt);
        }

        // GLU MLP.
        let mut z_next = Vec::with_capacity(t_len);
        for rt in &r {
            let h2 = ref_rmsnorm(rt, &layer.ln2, cfg.rms_eps);
            let gate: Vecf = ref_matvec(&layer.w_gate, &h2)
                .into_iter()
                .map(ref_silu)
                .collect();
            let up = ref_matvec(&layer.w_up, &h2);
            let glu: Vecf = gate.iter().zip(&up).map(|(g, u)| g * u).collect();
            let down = ref_matvec(&layer.w_down, &glu);
            z_next.push(rt.iter().zip(&down).map(|(a, b)| a + b).collect());
        }
        z = z_next;
    }

    z.iter()
        .map(|x| {
            let h = ref_rmsnorm(x, &model.final_norm, cfg.rms_eps);
            ref_matvec(&model.unembed, &h)
        })
        .collect()
}

fn ref_nll(logits: &[Vecf], tokens: &[u32]) -> f64 {
    let mut total = 0.0f64;
    for t in 1..tokens.len() {
        let row = &logits[t - 1];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
        total -= row[tokens[t] as usize] as f64 - lse;
    }
    total / (tokens.len() - 1) as f64
}

#[test]
fn logits_match_reference_on_fixture() {
    let model = fixture::generate(&FixtureSpec::small(), 42);
    let tokens = [0u32, 1, 2, 3];
    let expect = ref_forward(&model, &tokens);
    let got = forward(&model, &tokens, &TapSpec::none(), None).unwrap();
    for (t, row) in expect.iter().enumerate() {
        for (c, &e) in row.iter().enumerate() {
            let g = got.logits.get(t, c);
            assert!(
                (g - e).abs() < 1e-5 * (1.0 + e.abs()),
                "pos {t} logit {c}: {g} vs {e}"
            );
        }
    }
}

#[test]
fn logits_match_reference_across_seeds_and_docs() {
    for seed in [1u64, 7, 99] {
        let model = fixture::generate(&FixtureSpec::tiny(), seed);
        let corpus = fixture::sample_corpus(&CorpusSpec::new(32, 3, 10), seed);
        for doc in corpus.documents() {
            let expect = ref_forward(&model, &doc.tokens);
            let got = forward(&model, &doc.tokens, &TapSpec::none(), None).unwrap();
            for (t, row) in expect.iter().enumerate() {
                for (c, &e) in row.iter().enumerate() {
                    let g = got.logits.get(t, c);
                    assert!(
                        (g - e).abs() < 1e-4 * (1.0 + e.abs()),
                        "seed {seed} pos {t} logit {c}: {g} vs {e}"
                    );
                }
            }
        }
    }
}

#[test]
fn nll_matches_reference_oracle() {
    let model = fixture::generate(&FixtureSpec::small(), 42);
    let corpus = fixture::sample_corpus(&CorpusSpec::new(256, 4, 16), 42);
    for doc in corpus.documents() {
        let got = nll(&model, &doc.tokens).unwrap();
        let expect = ref_nll(&ref_forward(&model, &doc.tokens), &doc.tokens);
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }
}
