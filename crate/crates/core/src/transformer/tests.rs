use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::routing::OrderSet;

fn config(d: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        src_vocab: 7,
        tgt_vocab: 6,
        d_model: d,
        d_ff: 2 * d,
        heads,
        layers,
        dropout: 0.0,
        max_len: 12,
        positional: PositionalEncoding::Sinusoidal,
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, TransformerParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = TransformerParams::init(cfg, &mut store, &mut rng).unwrap();
    (store, params)
}

fn set(store: &mut ParamStore<f64>, id: ParamId, data: &[f64]) {
    store.value_mut(id).data_mut().copy_from_slice(data);
}

fn input(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> Var {
    g.constant(Tensor::from_f64(shape.to_vec(), data).unwrap()).unwrap()
}

// ---- scalar oracles ---------------------------------------------------

fn mat(x: &[f64], rows: usize, w: &[f64], cols: usize) -> Vec<f64> {
    let k = w.len() / cols;
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            for p in 0..k {
                out[i * cols + j] += x[i * k + p] * w[p * cols + j];
            }
        }
    }
    out
}

fn layer_norm_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        out.extend(row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()));
    }
    out
}

/// Single-head attention over explicit loops, then residual + norm.
fn attention_oracle(x: &[f64], mem: &[f64], d: usize, w: [&[f64]; 4], allowed: impl Fn(usize, usize) -> bool) -> Vec<f64> {
    let tq = x.len() / d;
    let tk = mem.len() / d;
    let q = mat(x, tq, w[0], d);
    let k = mat(mem, tk, w[1], d);
    let v = mat(mem, tk, w[2], d);
    let mut ctx = vec![0.0; tq * d];
    for i in 0..tq {
        let mut scores = Vec::new();
        for j in 0..tk {
            if allowed(i, j) {
                let s: f64 = (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum();
                scores.push((j, s / (d as f64).sqrt()));
            }
        }
        let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
        for &(j, s) in &scores {
            let a = (s - max).exp() / z;
            for c in 0..d {
                ctx[i * d + c] += a * v[j * d + c];
            }
        }
    }
    let out = mat(&ctx, tq, w[3], d);
    let sum: Vec<f64> = x.iter().zip(&out).map(|(a, b)| a + b).collect();
    layer_norm_rows(&sum, d)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

// ---- self-attention ----------------------------------------------------

#[test]
fn single_position_attends_only_to_itself() {
    let cfg = config(4, 2, 1);
    let (store, params) = build(&cfg, 1);
    let ctx = Ctx::new(&store, &cfg);
    let x = [0.3, -1.2, 0.8, 0.1];
    let mut g = Graph::new();
    let xv = input(&mut g, &[1, 1, 4], &x);
    let y = ctx.self_attention_layer(&mut g, &params.encoder[0].sa, xv, &[true], true).unwrap();

    // With one position the attention weight is 1, so the branch is x Wv Wo.
    let sa = &params.encoder[0].sa;
    let v = mat(&x, 1, store.value(sa.wv).data(), 4);
    let o = mat(&v, 1, store.value(sa.wo).data(), 4);
    let sum: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    assert_close(g.value(y).data(), &layer_norm_rows(&sum, 4), 1e-12);
}

#[test]
fn fully_masked_neighbours_reduce_to_single_position() {
    let cfg = config(4, 2, 1);
    let (store, params) = build(&cfg, 2);
    let ctx = Ctx::new(&store, &cfg);
    let x = [0.3, -1.2, 0.8, 0.1, -0.5, 0.9, 0.0, 2.0];
    let sa = &params.encoder[0].sa;

    let mut g = Graph::new();
    let xv = input(&mut g, &[2, 1, 4], &x);
    // Two single-position sequences as a batch.
    let alone = ctx.self_attention_layer(&mut g, sa, xv, &[true, true], false).unwrap();
    // The same two positions as one sequence where each key is padding to
    // the other query.
    let joint = input(&mut g, &[1, 2, 4], &x);
    let masked = ctx.self_attention_layer(&mut g, sa, joint, &[false, false], false).unwrap();
    assert_close(g.value(alone).data(), g.value(masked).data(), 1e-12);
}

#[test]
fn two_position_hand_case_matches_oracle() {
    let mut cfg = config(2, 1, 1);
    cfg.d_ff = 2;
    let (mut store, params) = build(&cfg, 3);
    let sa = params.encoder[0].sa.clone();
    let wq = [0.5, -0.2, 0.3, 0.9];
    let wk = [-0.4, 0.6, 0.1, 0.2];
    let wv = [1.0, 0.5, -0.5, 0.25];
    let wo = [0.7, 0.0, -0.3, 1.1];
    set(&mut store, sa.wq, &wq);
    set(&mut store, sa.wk, &wk);
    set(&mut store, sa.wv, &wv);
    set(&mut store, sa.wo, &wo);
    let ctx = Ctx::new(&store, &cfg);
    let x = [0.2, -0.7, 1.5, 0.4];
    for causal in [false, true] {
        let mut g = Graph::new();
        let xv = input(&mut g, &[1, 2, 2], &x);
        let y = ctx.self_attention_layer(&mut g, &sa, xv, &[true, true], causal).unwrap();
        let want = attention_oracle(&x, &x, 2, [&wq, &wk, &wv, &wo], |i, j| !causal || j <= i);
        assert_close(g.value(y).data(), &want, 1e-5);
    }
}

#[test]
fn heads_must_divide_model_width() {
    let mut cfg = config(6, 4, 1);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.heads = 3;
    assert!(cfg.validate().is_ok());
}

// ---- cross-attention -----------------------------------------------------

#[test]
fn single_memory_state_gets_full_weight() {
    let cfg = config(4, 2, 1);
    let (store, params) = build(&cfg, 4);
    let ctx = Ctx::new(&store, &cfg);
    let ed = params.decoder[0].ed.clone().unwrap();
    let x = [0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.0];
    let m = [0.9, -0.1, 0.3, 0.6];
    let mut g = Graph::new();
    let xv = input(&mut g, &[1, 2, 4], &x);
    let h = input(&mut g, &[1, 1, 4], &m);
    let memory = EncoderStates {
        h,
        keep: vec![true],
        batch: 1,
        len: 1,
    };
    let y = ctx.cross_attention_layer(&mut g, &ed, xv, &memory).unwrap();
    let v = mat(&m, 1, store.value(ed.wv).data(), 4);
    let o = mat(&v, 1, store.value(ed.wo).data(), 4);
    let mut sum = x.to_vec();
    for (i, s) in sum.iter_mut().enumerate() {
        *s += o[i % 4];
    }
    assert_close(g.value(y).data(), &layer_norm_rows(&sum, 4), 1e-12);
}

#[test]
fn zero_memory_passes_input_through_norm() {
    let cfg = config(4, 2, 1);
    let (store, params) = build(&cfg, 5);
    let ctx = Ctx::new(&store, &cfg);
    let ed = params.decoder[0].ed.clone().unwrap();
    let x = [0.1, 0.2, -0.3, 0.4];
    let mut g = Graph::new();
    let xv = input(&mut g, &[1, 1, 4], &x);
    let h = input(&mut g, &[1, 3, 4], &[0.0; 12]);
    let memory = EncoderStates {
        h,
        keep: vec![true; 3],
        batch: 1,
        len: 3,
    };
    let y = ctx.cross_attention_layer(&mut g, &ed, xv, &memory).unwrap();
    assert_close(g.value(y).data(), &layer_norm_rows(&x, 4), 1e-12);
}

#[test]
fn cross_attention_hand_case_matches_oracle() {
    let cfg = config(2, 1, 1);
    let (mut store, params) = build(&cfg, 6);
    let ed = params.decoder[0].ed.clone().unwrap();
    let w = [[0.2, 0.4, -0.6, 0.8], [0.3, -0.3, 0.5, 0.1], [0.9, 0.2, 0.0, -0.7], [-0.2, 0.6, 0.4, 0.3]];
    set(&mut store, ed.wq, &w[0]);
    set(&mut store, ed.wk, &w[1]);
    set(&mut store, ed.wv, &w[2]);
    set(&mut store, ed.wo, &w[3]);
    let ctx = Ctx::new(&store, &cfg);
    let x = [0.5, -0.5, 1.0, 0.25];
    let m = [0.3, 0.8, -1.2, 0.4];
    let mut g = Graph::new();
    let xv = input(&mut g, &[1, 2, 2], &x);
    let h = input(&mut g, &[1, 2, 2], &m);
    let memory = EncoderStates {
        h,
        keep: vec![true, true],
        batch: 1,
        len: 2,
    };
    let y = ctx.cross_attention_layer(&mut g, &ed, xv, &memory).unwrap();
    let want = attention_oracle(&x, &m, 2, [&w[0], &w[1], &w[2], &w[3]], |_, _| true);
    assert_close(g.value(y).data(), &want, 1e-5);
}

#[test]
fn fully_padded_memory_is_an_error() {
    let cfg = config(4, 2, 1);
    let (store, params) = build(&cfg, 7);
    let ctx = Ctx::new(&store, &cfg);
    let ed = params.decoder[0].ed.clone().unwrap();
    let mut g = Graph::new();
    let xv = input(&mut g, &[1, 1, 4], &[0.1; 4]);
    let h = input(&mut g, &[1, 2, 4], &[0.3; 8]);
    let memory = EncoderStates {
        h,
        keep: vec![false, false],
        batch: 1,
        len: 2,
    };
    assert!(matches!(
        ctx.cross_attention_layer(&mut g, &ed, xv, &memory),
        Err(Error::EmptyMemory(0))
    ));
}

// ---- feed-forward ----------------------------------------------------------

#[test]
fn zero_feed_forward_is_plain_norm() {
    let cfg = config(4, 2, 1);
    let (mut store, params) = build(&cfg, 8);
    let ff = params.encoder[0].ff.clone();
    let zeros_w1 = vec![0.0; store.value(ff.w1).numel()];
    let zeros_w2 = vec![0.0; store.value(ff.w2).numel()];
    set(&mut store, ff.w1, &zeros_w1);
    set(&mut store, ff.w2, &zeros_w2);
    let ctx = Ctx::new(&store, &cfg);
    let x = [1.0, 2.0, 0.5, -1.0, 0.0, 0.3, 0.2, 0.1];
    let mut g = Graph::new();
    let xv = input(&mut g, &[1, 2, 4], &x);
    let y = ctx.feed_forward_layer(&mut g, &ff, xv).unwrap();
    assert_close(g.value(y).data(), &layer_norm_rows(&x, 4), 1e-12);
}

#[test]
fn dead_relu_leaves_only_output_bias() {
    let cfg = config(4, 2, 1);
    let (mut store, params) = build(&cfg, 9);
    let ff = params.encoder[0].ff.clone();
    let b1 = vec![-100.0; cfg.d_ff];
    let b2 = [0.5, -0.25, 0.0, 1.0];
    set(&mut store, ff.b1, &b1);
    set(&mut store, ff.b2, &b2);
    let ctx = Ctx::new(&store, &cfg);
    let x = [0.1, 0.2, 0.3, 0.4];
    let mut g = Graph::new();
    let xv = input(&mut g, &[1, 1, 4], &x);
    let y = ctx.feed_forward_layer(&mut g, &ff, xv).unwrap();
    let sum: Vec<f64> = x.iter().zip(b2).map(|(a, b)| a + b).collect();
    assert_close(g.value(y).data(), &layer_norm_rows(&sum, 4), 1e-12);
}

#[test]
fn feed_forward_matches_scalar_oracle() {
    let cfg = config(4, 2, 1);
    let (store, params) = build(&cfg, 10);
    let ff = params.encoder[0].ff.clone();
    let ctx = Ctx::new(&store, &cfg);
    let x = [0.7, -0.4, 0.2, 1.3, -0.9, 0.05, 0.6, -0.2];
    let mut g = Graph::new();
    let xv = input(&mut g, &[1, 2, 4], &x);
    let y = ctx.feed_forward_layer(&mut g, &ff, xv).unwrap();

    let mut h = mat(&x, 2, store.value(ff.w1).data(), cfg.d_ff);
    for (i, v) in h.iter_mut().enumerate() {
        *v = (*v + store.value(ff.b1).data()[i % cfg.d_ff]).max(0.0);
    }
    let o = mat(&h, 2, store.value(ff.w2).data(), 4);
    let sum: Vec<f64> = (0..8).map(|i| x[i] + o[i] + store.value(ff.b2).data()[i % 4]).collect();
    assert_close(g.value(y).data(), &layer_norm_rows(&sum, 4), 1e-5);
}

// ---- blocks ----------------------------------------------------------------

#[test]
fn encoder_block_is_composition_in_order() {
    let cfg = config(4, 2, 1);
    let (store, params) = build(&cfg, 11);
    let ctx = Ctx::new(&store, &cfg);
    let block = &params.encoder[0];
    let x = [0.3, 0.1, -0.2, 0.9, 1.1, -0.6, 0.0, 0.4];
    let keep = [true, true];
    let order = OrderSet::encoder_order(1).unwrap();
    let mut g = Graph::new();
    let xv = input(&mut g, &[1, 2, 4], &x);
    let via_block = ctx.apply_block(&mut g, block, xv, &keep, false, None, &order).unwrap();
    let sa = ctx.self_attention_layer(&mut g, &block.sa, xv, &keep, false).unwrap();
    let manual = ctx.feed_forward_layer(&mut g, &block.ff, sa).unwrap();
    assert_eq!(g.value(via_block).data(), g.value(manual).data());
}

#[test]
fn single_layer_order_is_that_layer() {
    let cfg = config(4, 2, 1);
    let (store, params) = build(&cfg, 12);
    let ctx = Ctx::new(&store, &cfg);
    let block = &params.encoder[0];
    let order = LayerOrder::new(vec![LayerKind::FF]).unwrap();
    let mut g = Graph::new();
    let xv = input(&mut g, &[1, 1, 4], &[0.5, 0.1, -0.3, 0.2]);
    let a = ctx.apply_block(&mut g, block, xv, &[true], false, None, &order).unwrap();
    let b = ctx.feed_forward_layer(&mut g, &block.ff, xv).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
}

#[test]
fn cross_attention_without_memory_is_an_error() {
    let cfg = config(4, 2, 1);
    let (store, params) = build(&cfg, 13);
    let ctx = Ctx::new(&store, &cfg);
    let order = OrderSet::decoder_order(1).unwrap();
    let mut g = Graph::new();
    let xv = input(&mut g, &[1, 1, 4], &[0.5, 0.1, -0.3, 0.2]);
    assert!(matches!(
        ctx.apply_block(&mut g, &params.decoder[0], xv, &[true], true, None, &order),
        Err(Error::MissingMemory)
    ));
}

#[test]
fn decoder_orders_are_not_interchangeable() {
    let cfg = config(8, 2, 2);
    let (store, params) = build(&cfg, 14);
    let ctx = Ctx::new(&store, &cfg);
    let src = TokenBatch::new(vec![3, 4, 5, 6], 1, 4, 0).unwrap();
    let tgt = TokenBatch::new(vec![1, 3, 5], 1, 3, 0).unwrap();
    let mut outputs = Vec::new();
    for code in 1..=6 {
        let mut g = Graph::new();
        let (_, memory) = ctx.encode(&mut g, &params, &src, &OrderSet::encoder_order(1).unwrap()).unwrap();
        let logits = ctx
            .decode_forward(&mut g, &params, &tgt, &memory, &OrderSet::decoder_order(code).unwrap())
            .unwrap();
        outputs.push(g.value(logits).to_f64_vec());
    }
    let mut max_gap: f64 = 0.0;
    for i in 0..6 {
        for j in i + 1..6 {
            let gap = outputs[i]
                .iter()
                .zip(&outputs[j])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            max_gap = max_gap.max(gap);
        }
    }
    assert!(max_gap > 1e-3, "max gap {max_gap}");
}

// ---- stacks ------------------------------------------------------------------

#[test]
fn zero_blocks_encode_to_embeddings() {
    let cfg = config(4, 2, 0);
    let (store, params) = build(&cfg, 15);
    let ctx = Ctx::new(&store, &cfg);
    let src = TokenBatch::new(vec![2, 5, 1], 1, 3, 0).unwrap();
    let mut g = Graph::new();
    let (embedded, states) = ctx.encode(&mut g, &params, &src, &OrderSet::encoder_order(1).unwrap()).unwrap();
    assert_eq!(g.value(embedded).data(), g.value(states.h).data());
}

#[test]
fn encoding_is_deterministic() {
    let cfg = ModelConfig {
        dropout: 0.1,
        ..config(8, 2, 2)
    };
    let (store, params) = build(&cfg, 16);
    let ctx = Ctx::new(&store, &cfg);
    let src = TokenBatch::new(vec![2, 5, 1, 3], 2, 2, 0).unwrap();
    let run = || {
        let mut g = Graph::new().with_dropout(9, 4);
        let (_, s) = ctx.encode(&mut g, &params, &src, &OrderSet::encoder_order(2).unwrap()).unwrap();
        g.value(s.h).data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn over_long_sequences_are_rejected() {
    let cfg = config(4, 2, 1);
    let (store, params) = build(&cfg, 17);
    let ctx = Ctx::new(&store, &cfg);
    let src = TokenBatch::new(vec![3; 13], 1, 13, 0).unwrap();
    let mut g = Graph::new();
    assert!(matches!(
        ctx.encode(&mut g, &params, &src, &OrderSet::encoder_order(1).unwrap()),
        Err(Error::SequenceTooLong { len: 13, max: 12 })
    ));
}

#[test]
fn decoder_is_causal_and_shaped() {
    let cfg = config(8, 2, 2);
    let (store, params) = build(&cfg, 18);
    let ctx = Ctx::new(&store, &cfg);
    let src = TokenBatch::new(vec![3, 4, 5, 0], 1, 4, 0).unwrap();
    let base = vec![1, 3, 4, 5, 2];
    for code in 1..=6 {
        let order = OrderSet::decoder_order(code).unwrap();
        let logits_for = |tokens: &[usize]| {
            let mut g = Graph::new();
            let (_, memory) = ctx.encode(&mut g, &params, &src, &OrderSet::encoder_order(1).unwrap()).unwrap();
            let tgt = TokenBatch::new(tokens.to_vec(), 1, tokens.len(), 0).unwrap();
            let l = ctx.decode_forward(&mut g, &params, &tgt, &memory, &order).unwrap();
            assert_eq!(g.shape(l), &[1, tokens.len(), cfg.tgt_vocab]);
            g.value(l).data().to_vec()
        };
        let reference = logits_for(&base);
        for t in 0..base.len() - 1 {
            let mut perturbed = base.clone();
            for p in perturbed.iter_mut().skip(t + 1) {
                *p = (*p + 1) % cfg.tgt_vocab;
            }
            let changed = logits_for(&perturbed);
            let v = cfg.tgt_vocab;
            assert_eq!(&reference[..(t + 1) * v], &changed[..(t + 1) * v], "order {code}, t {t}");
        }
    }
}
