use super::*;
use crate::autograd::Tape;
use ndarray::{s, Array2};
use rand::{Rng as _, SeedableRng};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_size: 16,
        encoder_layers: 1,
        attention_heads: 2,
        dropout: 0.0,
        query_embed_dim: 8,
        max_span_length: None,
        qgh_kernel: 3,
        conv_kernel: 3,
        positional_encoding: true,
    }
}

fn dims(clips: usize) -> ModelDims {
    ModelDims {
        vocab_size: 10,
        cheap_width: 3,
        expensive_width: 4,
        clips,
    }
}

fn build(config: &ModelConfig, clips: usize, seed: u64) -> (Localizer, Parameters) {
    let mut params = Parameters::new();
    let mut rng = Rng::seed_from_u64(seed);
    let model = Localizer::new(config, dims(clips), &mut params, &mut rng).unwrap();
    (model, params)
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

fn eval_ctx() -> Ctx {
    Ctx::eval(Rng::seed_from_u64(0))
}

#[test]
fn query_encoding_rows_follow_tokens() {
    let (model, params) = build(&tiny_config(), 8, 1);
    let mut tape = Tape::new();
    let a = model.encode_query(&mut tape, &params, &[1, 4, 7, 2]).unwrap();
    let b = model.encode_query(&mut tape, &params, &[1, 4, 7, 2]).unwrap();
    let p = model.encode_query(&mut tape, &params, &[2, 7, 4, 1]).unwrap();
    assert_eq!(tape.shape(a), (4, 8));
    assert_eq!(tape.value(a), tape.value(b));
    for (i, j) in [(0, 3), (1, 2), (2, 1), (3, 0)] {
        assert_eq!(tape.value(a).row(i), tape.value(p).row(j));
    }
    assert_eq!(
        model.encode_query(&mut tape, &params, &[10]).unwrap_err(),
        ModelError::OutOfVocabulary { token: 10, vocab: 10 }
    );
}

#[test]
fn encoder_shapes_and_zero_expensive_block() {
    let (model, params) = build(&tiny_config(), 8, 2);
    let mut tape = Tape::new();
    let q = model.encode_query(&mut tape, &params, &[0, 1, 2, 3]).unwrap();
    let mut visual = random_matrix(8, 7, 3);
    visual.slice_mut(s![.., 3..]).fill(0.0);
    let v = tape.constant(visual);
    let c = model.cross_modal_encode(&mut tape, &params, v, q, &mut eval_ctx()).unwrap();
    assert_eq!(tape.shape(c), (8, 16));
    assert!(tape.value(c).iter().all(|x| x.is_finite()));

    let wrong = tape.constant(Array2::zeros((8, 6)));
    assert!(matches!(
        model.cross_modal_encode(&mut tape, &params, wrong, q, &mut eval_ctx()),
        Err(ModelError::DimensionMismatch(_))
    ));
}

#[test]
fn row_independence_without_mixing_weights() {
    let config = ModelConfig {
        attention_heads: 1,
        ..tiny_config()
    };
    let (model, mut params) = build(&config, 8, 4);
    // silence every path that mixes clips: attention output, local conv, query-to-context
    let block = &model.encoder[0];
    for id in [block.attn.out.w, block.attn.out.b.unwrap()] {
        params.value_mut(id).fill(0.0);
    }
    let (_, conv) = block.conv.as_ref().unwrap();
    for &tap in &conv.taps {
        params.value_mut(tap).fill(0.0);
    }
    params.value_mut(model.cqa.proj.w).slice_mut(s![48..64, ..]).fill(0.0);

    let a = random_matrix(8, 7, 5);
    let mut b = a.clone();
    for j in 0..7 {
        b[[3, j]] += 0.5;
    }
    let run = |visual: Array2<f64>| {
        let mut tape = Tape::new();
        let q = model.encode_query(&mut tape, &params, &[1, 2, 3]).unwrap();
        let v = tape.constant(visual);
        let c = model.cross_modal_encode(&mut tape, &params, v, q, &mut eval_ctx()).unwrap();
        tape.value(c).clone()
    };
    let (ca, cb) = (run(a), run(b));
    for l in 0..8 {
        let differs = ca.row(l).iter().zip(cb.row(l).iter()).any(|(x, y)| x != y);
        assert_eq!(differs, l == 3, "row {l}");
    }
}

#[test]
fn highlight_reweighting() {
    let mut tape = Tape::new();
    let c = tape.constant(random_matrix(5, 4, 6));
    let ones = tape.constant(Array2::ones((5, 1)));
    let halves = tape.constant(Array2::from_elem((5, 1), 0.5));
    let r1 = Localizer::reweight(&mut tape, c, ones);
    let r2 = Localizer::reweight(&mut tape, c, halves);
    assert_eq!(tape.value(r1), tape.value(c));
    assert_eq!(tape.value(r2), &(tape.value(c) * 0.5));

    let (model, mut params) = build(&tiny_config(), 5, 7);
    for &tap in &model.highlight.taps {
        params.value_mut(tap).fill(0.0);
    }
    let c16 = tape.constant(random_matrix(5, 16, 8));
    let h = model.qgh_scores(&mut tape, &params, c16);
    assert!(tape.value(h).iter().all(|&x| x == 0.5));
}

#[test]
fn span_outputs_normalize() {
    for clips in [1usize, 9] {
        let (model, params) = build(&tiny_config(), clips, 9);
        let mut tape = Tape::new();
        let x = tape.constant(random_matrix(clips, 16, 10));
        let (ps, pe) = model.span_predict(&mut tape, &params, x, &mut eval_ctx());
        for v in [ps, pe] {
            let total: f64 = tape.value(v).iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
        if clips == 1 {
            assert_eq!(tape.value(ps)[[0, 0]], 0.0);
            assert_eq!(tape.value(pe)[[0, 0]], 0.0);
        }
    }
}

#[test]
fn span_predictor_equivariance_depends_on_positions() {
    let perm = [3usize, 0, 5, 1, 4, 2];
    for positional in [false, true] {
        let config = ModelConfig {
            positional_encoding: positional,
            ..tiny_config()
        };
        let (model, params) = build(&config, 6, 11);
        let x = random_matrix(6, 16, 12);
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.row_mut(dst).assign(&x.row(src));
        }
        let run = |input: Array2<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(input);
            let (ps, _) = model.span_predict(&mut tape, &params, v, &mut eval_ctx());
            tape.value(ps).clone()
        };
        let (a, b) = (run(x), run(xp));
        let equivariant = perm
            .iter()
            .enumerate()
            .all(|(dst, &src)| (a[[0, src]] - b[[0, dst]]).abs() < 1e-10);
        assert_eq!(equivariant, !positional);
    }
}

#[test]
fn end_to_end_parameter_gradients_match_finite_differences() {
    let config = ModelConfig {
        conv_kernel: 3,
        ..tiny_config()
    };
    let clips = 6;
    let (model, params) = build(&config, clips, 13);
    let visual = random_matrix(clips, 7, 14);
    let tokens = [2u32, 5, 9];
    let objective = |p: &Parameters| {
        let mut tape = Tape::new();
        let q = model.encode_query(&mut tape, p, &tokens).unwrap();
        let v = tape.constant(visual.clone());
        let c = model.cross_modal_encode(&mut tape, p, v, q, &mut eval_ctx()).unwrap();
        let out = model.localize(&mut tape, p, c, &mut eval_ctx());
        let s = tape.pick(out.start_logp, 0, 1);
        let e = tape.pick(out.end_logp, 0, 3);
        let h = tape.log(out.highlight);
        let h = tape.mean(h);
        let t = tape.add(s, e);
        let total = tape.add(t, h);
        (tape.scalar(total), tape, total)
    };
    let (_, tape, total) = objective(&params);
    let grads = tape.backward(&[(total, 1.0)]);
    let h = 1e-6;
    let mut checked = 0;
    for (id, name, value) in params.iter() {
        let g = grads.param(id).unwrap_or_else(|| panic!("no gradient for {name}"));
        // probe a few entries per tensor
        for flat in [0, value.len() / 2, value.len() - 1] {
            let (r, c) = (flat / value.ncols(), flat % value.ncols());
            let mut plus = params.clone();
            plus.value_mut(id)[[r, c]] += h;
            let mut minus = params.clone();
            minus.value_mut(id)[[r, c]] -= h;
            let fd = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
            let an = g[[r, c]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel < 1e-4, "{name}[{r},{c}]: fd={fd} analytic={an} rel={rel}");
            checked += 1;
        }
    }
    assert!(checked > 50);
}
