use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{finite_diff_check, GradCheckOptions};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn micro_config() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        in_channels: 3,
        patch_size: 4,
        embed_dim: 8,
        depths: vec![2, 2],
        num_heads: vec![1, 2],
        window_size: 2,
        mlp_ratio: 2,
    }
}

fn set(store: &mut ParamStore, name: &str, f: impl Fn(usize) -> f64) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let v = store.value_mut(id);
    for (i, x) in v.data_mut().iter_mut().enumerate() {
        *x = f(i);
    }
}

#[test]
fn config_validation() {
    assert!(BackboneConfig::default().validate().is_ok());
    let mut c = BackboneConfig::default();
    c.image_size = 62;
    assert!(c.validate().is_err());
    let mut c = BackboneConfig::default();
    c.window_size = 3;
    assert!(c.validate().is_err());
    let mut c = BackboneConfig::default();
    c.num_heads = vec![1, 3, 4, 8];
    assert!(c.validate().is_err());
    let mut c = BackboneConfig::default();
    c.depths = vec![2, 0, 2, 2];
    assert!(c.validate().is_err());
}

#[test]
fn patch_embedding_examples() {
    let mut store = ParamStore::new();
    let cfg = BackboneConfig::default();
    let bb = Backbone::new(&mut ParamBuilder::new(&mut store, 1, 0.02), &cfg).unwrap();
    let g = Graph::new();
    let img = g.constant(random(&[1, 64, 64, 3], 2));
    assert_eq!(bb.embed.forward(&g, &store, img).unwrap().shape(), vec![1, 16, 16, 16]);

    let zero = g.constant(Tensor::zeros(&[1, 64, 64, 3]));
    let z = bb.embed.forward(&g, &store, zero).unwrap().value();
    assert!(z.data().iter().all(|&v| v == 0.0));

    let constant = g.constant(Tensor::full(&[1, 64, 64, 3], 0.37));
    let tokens = bb.embed.forward(&g, &store, constant).unwrap().value();
    let first = &tokens.data()[..16];
    assert!(tokens.data().chunks(16).all(|t| t == first));

    let bad = g.constant(Tensor::zeros(&[1, 62, 62, 3]));
    assert!(matches!(bb.embed.forward(&g, &store, bad), Err(Error::Config(_))));
}

#[test]
fn window_partition_examples() {
    let g = Graph::new();
    let x = g.constant(random(&[1, 8, 8, 3], 3));
    let w = window_partition(x, 2).unwrap();
    assert_eq!(w.shape(), vec![16, 4, 3]);
    // Window 1 is the second window of the first row; its first token is (0, 2).
    let v = w.value();
    assert_eq!(v.at(&[1, 0, 0]), x.value().at(&[0, 0, 2, 0]));
    assert_eq!(v.at(&[1, 3, 2]), x.value().at(&[0, 1, 3, 2]));
    assert_eq!(v.at(&[4, 0, 1]), x.value().at(&[0, 2, 0, 1]));

    let small = g.constant(random(&[1, 2, 2, 5], 4));
    let one = window_partition(small, 2).unwrap();
    assert_eq!(one.shape(), vec![1, 4, 5]);
    let back = window_reverse(one, 2, 2, 2).unwrap();
    assert!(back.value().bitwise_eq(&small.value()));

    assert!(matches!(window_partition(x, 3), Err(Error::Config(_))));
    let wrong = g.constant(Tensor::zeros(&[3, 4, 3]));
    assert!(window_reverse(wrong, 8, 8, 2).is_err());
}

#[test]
fn window_reverse_detects_window_order() {
    let g = Graph::new();
    let x = g.constant(random(&[1, 4, 4, 2], 5));
    let windows = window_partition(x, 2).unwrap();
    let parts = windows.split(0, &[1, 1, 1, 1]).unwrap();
    let swapped = crate::tensor::concat(&[parts[1], parts[0], parts[2], parts[3]], 0).unwrap();
    let back = window_reverse(swapped, 4, 4, 2).unwrap();
    assert!(!back.value().bitwise_eq(&x.value()));
}

#[test]
fn cyclic_shift_examples() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64));
    let shifted = cyclic_shift(x, -1, -1).unwrap().value();
    assert_eq!(shifted.at(&[0, 3, 3, 0]), 0.0);
    assert_eq!(shifted.at(&[0, 0, 0, 0]), x.value().at(&[0, 1, 1, 0]));
    let same = cyclic_shift(x, 0, 0).unwrap();
    assert!(same.value().bitwise_eq(&x.value()));
    let back = cyclic_shift(cyclic_shift(x, -1, -1).unwrap(), 1, 1).unwrap();
    assert!(back.value().bitwise_eq(&x.value()));
}

/// Independent oracle: after rolling by −shift, token (i, j) came from a
/// wrapped-around position iff i ≥ H − shift (resp. j ≥ W − shift). Two
/// tokens in a window may attend iff their wrap status agrees on both axes.
fn brute_force_mask(h: usize, wd: usize, w: usize, shift: usize) -> Vec<bool> {
    let mut allowed = Vec::new();
    for wy in 0..h / w {
        for wx in 0..wd / w {
            let tokens: Vec<(bool, bool)> = (0..w * w)
                .map(|t| (wy * w + t / w >= h - shift, wx * w + t % w >= wd - shift))
                .collect();
            for a in &tokens {
                for b in &tokens {
                    allowed.push(a == b);
                }
            }
        }
    }
    allowed
}

#[test]
fn shifted_mask_matches_region_oracle() {
    let zero = shifted_attention_mask(4, 4, 2, 0).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));

    let mask = shifted_attention_mask(4, 4, 2, 1).unwrap();
    assert_eq!(mask.shape(), &[4, 4, 4]);
    let corner = &mask.data()[3 * 16..4 * 16];
    let zeros: Vec<usize> = (0..16).filter(|&i| corner[i] == 0.0).collect();
    assert_eq!(zeros, vec![0, 5, 10, 15]);

    for (h, w, s) in [(4, 2, 1), (8, 2, 1), (8, 4, 2), (8, 4, 1), (12, 4, 3)] {
        let mask = shifted_attention_mask(h, h, w, s).unwrap();
        let oracle = brute_force_mask(h, h, w, s);
        for (m, ok) in mask.data().iter().zip(oracle) {
            assert_eq!(*m == 0.0, ok, "h={h} w={w} s={s}");
        }
    }
    assert!(matches!(shifted_attention_mask(4, 4, 2, 2), Err(Error::Config(_))));
}

#[test]
fn masked_softmax_rows_sum_to_one() {
    let mask = shifted_attention_mask(8, 8, 4, 2).unwrap();
    let g = Graph::new();
    let logits = g.constant(random(mask.shape(), 6));
    let p = logits.add(g.constant(mask)).unwrap().softmax(2).unwrap().value();
    for row in p.data().chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

fn attention(dim: usize, heads: usize, window: usize, seed: u64) -> (ParamStore, WindowAttention) {
    let mut store = ParamStore::new();
    let attn = WindowAttention::new(
        &mut ParamBuilder::new(&mut store, seed, 0.3),
        "attn",
        dim,
        heads,
        window,
    )
    .unwrap();
    (store, attn)
}

#[test]
fn uniform_attention_averages_values() {
    let (mut store, attn) = attention(3, 1, 2, 7);
    // Zero Q columns; V columns and output projection are identities.
    set(&mut store, "attn.qkv.weight", |i| {
        let (r, c) = (i / 9, i % 9);
        if c >= 6 {
            if c - 6 == r {
                1.0
            } else {
                0.0
            }
        } else if c < 3 {
            0.0
        } else {
            0.5
        }
    });
    set(&mut store, "attn.proj.weight", |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let g = Graph::new();
    let x = g.constant(random(&[2, 4, 3], 8));
    let out = attn.forward(&g, &store, x, None).unwrap().value();
    let xv = x.value();
    for w in 0..2 {
        for c in 0..3 {
            let mean = (0..4).map(|t| xv.at(&[w, t, c])).sum::<f64>() / 4.0;
            for t in 0..4 {
                assert!((out.at(&[w, t, c]) - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_token_window_passes_values_through() {
    let (store, attn) = attention(4, 2, 1, 9);
    let g = Graph::new();
    let x = g.constant(random(&[5, 1, 4], 10));
    let out = attn.forward(&g, &store, x, None).unwrap().value();
    // With one token the attention weight is 1: output = proj(V-projection(x)).
    let v = attn.qkv.forward(&g, &store, x).unwrap().slice(2, 8, 4).unwrap();
    let expect = attn.proj.forward(&g, &store, v).unwrap().value();
    assert!(out.max_abs_diff(&expect) < 1e-14);
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut store = ParamStore::new();
    let r = WindowAttention::new(&mut ParamBuilder::new(&mut store, 0, 0.02), "a", 6, 4, 2);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn attention_gradients_match_finite_differences() {
    let (mut store, attn) = attention(4, 2, 2, 11);
    set(&mut store, "attn.rel_pos_bias", |i| 0.1 * i as f64 - 0.5);
    let x = random(&[4, 4, 4], 12);
    let mask = shifted_attention_mask(4, 4, 2, 1).unwrap();
    let report = finite_diff_check(
        &mut store,
        |g, s| {
            let y = attn.forward(g, s, g.constant(x.clone()), Some(&mask))?;
            let w = g.constant(random(&y.shape(), 13));
            Ok(y.mul(w)?.sum())
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn window_attention_is_window_local() {
    let (store, attn) = attention(4, 2, 2, 14);
    let base = random(&[3, 4, 4], 15);
    let mut perturbed = base.clone();
    perturbed.data_mut()[16 + 5] += 0.75;
    let g = Graph::new();
    let a = attn.forward(&g, &store, g.constant(base), None).unwrap().value();
    let b = attn.forward(&g, &store, g.constant(perturbed), None).unwrap().value();
    for w in [0, 2] {
        let span = w * 16..(w + 1) * 16;
        assert!(a.data()[span.clone()]
            .iter()
            .zip(&b.data()[span])
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_ne!(a.data()[16..32], b.data()[16..32]);
}

fn block(shifted: bool, side: usize, seed: u64) -> (ParamStore, SwinBlock) {
    let mut store = ParamStore::new();
    let blk = SwinBlock::new(
        &mut ParamBuilder::new(&mut store, seed, 0.2),
        "blk",
        16,
        2,
        side,
        2,
        4,
        shifted,
    )
    .unwrap();
    (store, blk)
}

#[test]
fn zeroed_output_layers_make_block_identity() {
    let (mut store, blk) = block(true, 16, 16);
    for name in ["blk.attn.proj.weight", "blk.attn.proj.bias", "blk.mlp.fc2.weight", "blk.mlp.fc2.bias"] {
        set(&mut store, name, |_| 0.0);
    }
    let g = Graph::new();
    let x = g.constant(random(&[1, 16, 16, 16], 17));
    let y = blk.forward(&g, &store, x).unwrap();
    assert_eq!(y.shape(), vec![1, 16, 16, 16]);
    assert!(y.value().bitwise_eq(&x.value()));
}

#[test]
fn shifted_block_on_constant_map_matches_unshifted() {
    let (mut s1, plain) = block(false, 4, 18);
    let (mut s2, shifted) = block(true, 4, 18);
    assert!(shifted.is_shifted() && !plain.is_shifted());
    for s in [&mut s1, &mut s2] {
        set(s, "blk.norm1.bias", |i| 0.1 * i as f64 - 0.4);
        set(s, "blk.attn.rel_pos_bias", |i| 0.05 * i as f64);
    }
    let g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 4, 4, 16], 0.3));
    let a = plain.forward(&g, &s1, x).unwrap().value();
    let b = shifted.forward(&g, &s2, x).unwrap().value();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn single_window_map_does_not_shift() {
    let (_, blk) = block(true, 2, 19);
    assert!(!blk.is_shifted());
}

#[test]
fn patch_merge_examples() {
    let mut store = ParamStore::new();
    let merge = PatchMerge::new(&mut ParamBuilder::new(&mut store, 20, 0.1), "m", 16).unwrap();
    let g = Graph::new();
    let x = g.constant(random(&[1, 8, 8, 16], 21));
    assert_eq!(merge.forward(&g, &store, x).unwrap().shape(), vec![1, 4, 4, 32]);

    let c = g.constant(Tensor::from_fn(&[1, 8, 8, 16], |i| (i % 16) as f64));
    let y = merge.forward(&g, &store, c).unwrap().value();
    let first = y.data()[..32].to_vec();
    assert!(y.data().chunks(32).all(|t| t == first.as_slice()));

    let odd = g.constant(Tensor::zeros(&[1, 3, 4, 16]));
    assert!(matches!(merge.forward(&g, &store, odd), Err(Error::Config(_))));
}

#[test]
fn patch_merge_gradient() {
    let mut store = ParamStore::new();
    let merge = PatchMerge::new(&mut ParamBuilder::new(&mut store, 22, 0.3), "m", 3).unwrap();
    set(&mut store, "m.norm.bias", |i| 0.01 * i as f64);
    let x = random(&[2, 4, 4, 3], 23);
    let report = finite_diff_check(
        &mut store,
        |g, s| {
            let y = merge.forward(g, s, g.constant(x.clone()))?;
            let w = g.constant(random(&y.shape(), 24));
            Ok(y.mul(w)?.sum())
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn default_backbone_stage_shapes_and_determinism() {
    let cfg = BackboneConfig::default();
    let build = || {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut ParamBuilder::new(&mut store, 42, 0.02), &cfg).unwrap();
        (store, bb)
    };
    let (store, bb) = build();
    let img = random(&[2, 64, 64, 3], 25);
    let g = Graph::new();
    let out = bb.forward(&g, &store, g.constant(img.clone())).unwrap();
    let shapes: Vec<Vec<usize>> = out.stage_maps.iter().map(|m| m.shape()).collect();
    assert_eq!(
        shapes,
        vec![vec![2, 16, 16, 16], vec![2, 8, 8, 32], vec![2, 4, 4, 64], vec![2, 2, 2, 128]]
    );
    for (s, m) in out.stage_maps.iter().enumerate() {
        let side = cfg.stage_side(s);
        assert_eq!(m.shape()[1..], [side, side, cfg.stage_dim(s)]);
    }

    let (store2, bb2) = build();
    let g2 = Graph::new();
    let out2 = bb2.forward(&g2, &store2, g2.constant(img)).unwrap();
    assert!(out.last().value().bitwise_eq(&out2.last().value()));
}

#[test]
fn every_backbone_parameter_receives_gradient() {
    let cfg = micro_config();
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut ParamBuilder::new(&mut store, 26, 0.02), &cfg).unwrap();
    let g = Graph::new();
    let out = bb.forward(&g, &store, g.constant(random(&[2, 16, 16, 3], 27))).unwrap();
    let last = out.last();
    let w = g.constant(random(&last.shape(), 28));
    let loss = last.mul(w).unwrap().sum();
    g.backward(loss, &mut store).unwrap();
    for p in store.iter() {
        assert!(p.grad.data().iter().any(|&v| v != 0.0), "{} got no gradient", p.name);
    }
}

#[test]
fn micro_backbone_gradients_match_finite_differences() {
    let cfg = micro_config();
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut ParamBuilder::new(&mut store, 29, 0.2), &cfg).unwrap();
    let img = random(&[1, 16, 16, 3], 30);
    let report = finite_diff_check(
        &mut store,
        |g, s| {
            let out = bb.forward(g, s, g.constant(img.clone()))?;
            let mut total: Option<Var<'_>> = None;
            for (i, m) in out.stage_maps.iter().enumerate() {
                let w = g.constant(random(&m.shape(), 31 + i as u64));
                let term = m.mul(w)?.sum();
                total = Some(match total {
                    Some(t) => t.add(term)?,
                    None => term,
                });
            }
            Ok(total.expect("stages"))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_and_shift_round_trips(seed in any::<u64>(), b in 1usize..3, k in 1usize..4, shift in -3isize..4) {
        let side = 2 * k;
        let g = Graph::new();
        let x = g.constant(random(&[b, side, side, 3], seed));
        let back = window_reverse(window_partition(x, 2).unwrap(), side, side, 2).unwrap();
        prop_assert!(back.value().bitwise_eq(&x.value()));
        let rolled = cyclic_shift(cyclic_shift(x, shift, -shift).unwrap(), -shift, shift).unwrap();
        prop_assert!(rolled.value().bitwise_eq(&x.value()));
    }
}
