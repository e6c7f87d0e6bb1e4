use piclick_core::click::{encode_clicks_disk, ClickEmbeddings};
use piclick_core::model::{argmax_first, FeatureMap, QueryState};
use piclick_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        decoder_layers: 3,
        ..ModelConfig::default()
    }
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![3, h, w], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn zero_inputs_give_finite_features_with_expected_shapes() {
    let m = PiClickF64::new(small_config()).unwrap();
    let img = Tensor::zeros(vec![3, 64, 64]);
    let disk = encode_clicks_disk(&[], 64, 64, 5).unwrap();
    let prev = Tensor::zeros(vec![64, 64]);
    let fb = m.encode_image(&img, &disk, &prev).unwrap();
    let sizes: Vec<_> = fb.pyramid.iter().map(|f| (f.height, f.width)).collect();
    assert_eq!(sizes, vec![(2, 2), (4, 4), (8, 8)]);
    assert_eq!((fb.mask_feature.height, fb.mask_feature.width), (16, 16));
    for f in fb.pyramid.iter().chain([&fb.mask_feature]) {
        assert_eq!(f.channels(), 32);
        assert!(f.data.all_finite());
    }
}

#[test]
fn wide_decoder_shapes_follow_strides() {
    let cfg = ModelConfig {
        hidden_dim: 64,
        decoder_layers: 1,
        ..ModelConfig::default()
    };
    let m = PiClickF32::new(cfg).unwrap();
    let img = Tensor::zeros(vec![3, 64, 64]);
    let disk = encode_clicks_disk(&[Click::positive(3, 3, 0)], 64, 64, 5).unwrap();
    let fb = m.encode_image(&img, &disk, &Tensor::zeros(vec![64, 64])).unwrap();
    let shapes: Vec<_> = fb
        .pyramid
        .iter()
        .map(|f| (f.channels(), f.height, f.width))
        .collect();
    // 64 / 32, 64 / 16, 64 / 8 and 64 / 4
    assert_eq!(shapes, vec![(64, 2, 2), (64, 4, 4), (64, 8, 8)]);
    let mf = &fb.mask_feature;
    assert_eq!((mf.channels(), mf.height, mf.width), (64, 16, 16));
}

#[test]
fn odd_sizes_are_padded_and_cropped() {
    let m = PiClickF64::new(small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&mut rng, 40, 70);
    let disk = encode_clicks_disk(&[], 40, 70, 5).unwrap();
    let fb = m.encode_image(&img, &disk, &Tensor::zeros(vec![40, 70])).unwrap();
    // padded to 64 × 96
    assert_eq!((fb.pyramid[0].height, fb.pyramid[0].width), (2, 3));
    assert_eq!((fb.mask_feature.height, fb.mask_feature.width), (16, 24));
    let p = m
        .forward(&img, &[Click::positive(69, 39, 0)], &Tensor::zeros(vec![40, 70]))
        .unwrap();
    assert_eq!(p.mask_logits.shape(), &[7, 40, 70]);
}

#[test]
fn encoding_is_deterministic() {
    let m = PiClickF32::new(small_config()).unwrap();
    let img = Tensor::from_fn(vec![3, 64, 64], |i| (i % 17) as f32 / 17.0);
    let disk = encode_clicks_disk(&[Click::positive(10, 20, 0)], 64, 64, 5).unwrap();
    let prev = Tensor::zeros(vec![64, 64]);
    let a = m.encode_image(&img, &disk, &prev).unwrap();
    let b = m.encode_image(&img, &disk, &prev).unwrap();
    assert_eq!(a, b);
}

#[test]
fn size_mismatch_is_rejected() {
    let m = PiClickF32::new(small_config()).unwrap();
    let img = Tensor::zeros(vec![3, 64, 64]);
    let disk = encode_clicks_disk(&[], 32, 32, 5).unwrap();
    assert!(matches!(
        m.encode_image(&img, &disk, &Tensor::zeros(vec![64, 64])),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        m.forward(&img, &[Click::positive(1, 1, 0)], &Tensor::zeros(vec![32, 64])),
        Err(Error::Shape(_))
    ));
}

fn layer_inputs(m: &PiClickF64, rng: &mut ChaCha8Rng) -> (QueryState<f64>, FeatureMap<f64>, ClickEmbeddings<f64>) {
    let d = m.hidden_dim();
    let state = QueryState {
        features: Tensor::from_fn(vec![m.num_queries(), d], |_| rng.gen_range(-1.0..1.0)),
        layer_index: 0,
    };
    let level = FeatureMap {
        height: 2,
        width: 2,
        data: Tensor::from_fn(vec![4, d], |_| rng.gen_range(-1.0..1.0)),
    };
    let clicks = [Click::positive(5, 9, 0), Click::negative(40, 2, 1)];
    let embeds = m.click_embeddings(&clicks, 64, 64).unwrap();
    (state, level, embeds)
}

#[test]
fn all_ones_previous_mask_leaves_attention_unmasked() {
    let m = PiClickF64::new(small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (state, level, embeds) = layer_inputs(&m, &mut rng);
    let n = m.num_queries();
    let sure = m
        .decoder_layer(&state, &level, &embeds, &Tensor::full(vec![n, 2, 2], 6.0))
        .unwrap();
    let barely = m
        .decoder_layer(&state, &level, &embeds, &Tensor::full(vec![n, 2, 2], 0.01))
        .unwrap();
    assert!(sure.allowed.iter().all(|a| *a));
    assert!(sure.attention.iter().all(|p| *p > 0.0));
    assert_eq!(sure.state, barely.state);
    assert_eq!(sure.state.layer_index, 1);
}

#[test]
fn empty_previous_mask_restricts_query_to_clicks() {
    let m = PiClickF64::new(small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (state, level, embeds) = layer_inputs(&m, &mut rng);
    let n = m.num_queries();
    let mut prev = Tensor::full(vec![n, 2, 2], 1.0);
    for v in &mut prev.data_mut()[3 * 4..4 * 4] {
        *v = -2.0;
    }
    let out = m.decoder_layer(&state, &level, &embeds, &prev).unwrap();
    let cols = 4 + 2;
    let heads = m.config().num_heads;
    for h in 0..heads {
        for q in 0..n {
            let row = &out.attention[(h * n + q) * cols..(h * n + q + 1) * cols];
            if q == 3 {
                assert!(row[..4].iter().all(|p| *p == 0.0));
                assert!((row[4] + row[5] - 1.0).abs() < 1e-12);
                assert!(row[4] > 0.0 && row[5] > 0.0);
            } else {
                assert!(row.iter().all(|p| *p > 0.0));
            }
        }
    }
}

fn tiny_attention_model() -> PiClickF64 {
    let cfg = ModelConfig {
        num_queries: 1,
        hidden_dim: 2,
        num_heads: 1,
        decoder_layers: 1,
        ..ModelConfig::default()
    };
    let mut m = PiClickF64::new(cfg).unwrap();
    let p = m.params_mut();
    for proj in ["q", "k", "v"] {
        p.set(&format!("decoder.layer0.cross.{proj}.weight"), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        p.set(&format!("decoder.layer0.cross.{proj}.bias"), vec![0.0, 0.0]).unwrap();
    }
    p.set("decoder.query_pos", vec![0.0, 0.0]).unwrap();
    p.set("decoder.level_embed0", vec![0.0, 0.0]).unwrap();
    m
}

#[test]
fn one_spatial_one_click_attention_by_hand() {
    let m = tiny_attention_model();
    let state = QueryState {
        features: Tensor::new(vec![1, 2], vec![1.0, 0.0]),
        layer_index: 0,
    };
    // A 1×1 grid sits at the origin: its sine encoding is all zeros at width 2.
    let level = FeatureMap {
        height: 1,
        width: 1,
        data: Tensor::new(vec![1, 2], vec![2.0, 0.0]),
    };
    let click = ClickEmbeddings {
        matrix: Tensor::new(vec![1, 2], vec![0.0, 3.0]),
    };
    let out = m
        .decoder_layer(&state, &level, &click, &Tensor::full(vec![1, 1, 1], 1.0))
        .unwrap();
    // scores q·k / sqrt(2) = [2/sqrt(2), 0]
    let s = 2.0f64.sqrt();
    let p0 = s.exp() / (s.exp() + 1.0);
    let p1 = 1.0 / (s.exp() + 1.0);
    assert!((out.attention[0] - p0).abs() < 1e-12);
    assert!((out.attention[1] - p1).abs() < 1e-12);
    let want = [2.0 * p0, 3.0 * p1];
    for (a, b) in out.attended.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }

    let masked = m
        .decoder_layer(&state, &level, &click, &Tensor::full(vec![1, 1, 1], -1.0))
        .unwrap();
    assert_eq!(masked.attention, vec![0.0, 1.0]);
    assert_eq!(masked.attended.data(), &[0.0, 3.0]);
}

fn set_head_output(m: &mut PiClickF64, bias: Vec<f64>) {
    let d = m.hidden_dim();
    let p = m.params_mut();
    p.set("heads.mask.2.weight", vec![0.0; d * d]).unwrap();
    p.set("heads.mask.2.bias", bias).unwrap();
}

fn features(m: &PiClickF64, seed: u64) -> model::FeatureBundle<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = random_image(&mut rng, 64, 64);
    let disk = encode_clicks_disk(&[Click::positive(30, 30, 0)], 64, 64, 5).unwrap();
    m.encode_image(&img, &disk, &Tensor::zeros(vec![64, 64])).unwrap()
}

#[test]
fn zero_mask_embedding_gives_zero_logits() {
    let mut m = PiClickF64::new(small_config()).unwrap();
    set_head_output(&mut m, vec![0.0; 32]);
    let fb = features(&m, 4);
    let logits = m.mask_head(&m.initial_state(), &fb.mask_feature).unwrap();
    assert_eq!(logits.shape(), &[7, 64, 64]);
    assert!(logits.data().iter().all(|v| *v == 0.0));
}

#[test]
fn one_hot_mask_embedding_selects_a_channel() {
    let mut m = PiClickF64::new(small_config()).unwrap();
    let k = 5;
    let mut e = vec![0.0; 32];
    e[k] = 1.0;
    set_head_output(&mut m, e);
    let fb = features(&m, 5);
    let mf = &fb.mask_feature;
    let low = m.mask_head_low(&m.initial_state(), mf).unwrap();
    for q in 0..7 {
        for y in 0..mf.height {
            for x in 0..mf.width {
                let got = low.data()[(q * mf.height + y) * mf.width + x];
                assert_eq!(got, mf.at(x, y, k));
            }
        }
    }
}

#[test]
fn mask_head_matches_per_pixel_loop() {
    let m = PiClickF64::new(small_config()).unwrap();
    let fb = features(&m, 6);
    let mf = &fb.mask_feature;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let state = QueryState {
        features: Tensor::from_fn(vec![7, 32], |_| rng.gen_range(-2.0..2.0)),
        layer_index: 9,
    };
    let emb = m.mask_embedding(&state).unwrap();
    let low = m.mask_head_low(&state, mf).unwrap();
    let mut worst: f64 = 0.0;
    for q in 0..7 {
        for y in 0..mf.height {
            for x in 0..mf.width {
                let mut acc = 0.0;
                for c in 0..32 {
                    acc += mf.at(x, y, c) * emb.row(q)[c];
                }
                let got = low.data()[(q * mf.height + y) * mf.width + x];
                worst = worst.max((got - acc).abs());
            }
        }
    }
    assert!(worst <= 1e-9, "max deviation {worst}");
}

#[test]
fn score_heads_at_zero_features_are_one_half() {
    let m = PiClickF64::new(small_config()).unwrap();
    let state = QueryState {
        features: Tensor::zeros(vec![7, 32]),
        layer_index: 3,
    };
    let (conf, iou) = m.trm_heads(&state).unwrap();
    assert!(conf.iter().chain(&iou).all(|v| *v == 0.5));
}

#[test]
fn score_heads_stay_inside_unit_interval() {
    let m = PiClickF64::new(small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let state = QueryState {
            features: Tensor::from_fn(vec![7, 32], |_| rng.gen_range(-50.0..50.0)),
            layer_index: 3,
        };
        let (conf, iou) = m.trm_heads(&state).unwrap();
        assert!(conf.iter().chain(&iou).all(|v| *v > 0.0 && *v < 1.0));
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn two_unit_score_head_by_hand() {
    let cfg = ModelConfig {
        num_queries: 1,
        hidden_dim: 2,
        num_heads: 1,
        decoder_layers: 1,
        ..ModelConfig::default()
    };
    let mut m = PiClickF64::new(cfg).unwrap();
    {
        let p = m.params_mut();
        p.set("heads.conf.0.weight", vec![1.0, 0.5, -0.5, 2.0]).unwrap();
        p.set("heads.conf.0.bias", vec![0.1, -0.2]).unwrap();
        p.set("heads.conf.1.weight", vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        p.set("heads.conf.1.bias", vec![0.0, 0.3]).unwrap();
        p.set("heads.conf.2.weight", vec![0.7, -1.1]).unwrap();
        p.set("heads.conf.2.bias", vec![0.05]).unwrap();
    }
    let state = QueryState {
        features: Tensor::new(vec![1, 2], vec![3.0, 1.0]),
        layer_index: 1,
    };
    // normalisation: mean 2, variance 1
    let r = 1.0 / (1.0f64 + 1e-5).sqrt();
    let x = [r, -r];
    let h0 = [gelu(x[0] * 1.0 + x[1] * -0.5 + 0.1), gelu(x[0] * 0.5 + x[1] * 2.0 - 0.2)];
    let h1 = [gelu(h0[0]), gelu(h0[1] + 0.3)];
    let out = 0.7 * h1[0] - 1.1 * h1[1] + 0.05;
    let want = 1.0 / (1.0 + (-out).exp());
    let (conf, _) = m.trm_heads(&state).unwrap();
    assert!((conf[0] - want).abs() < 1e-12, "{} vs {want}", conf[0]);
}

#[test]
fn forward_returns_configured_proposal_count() {
    let m = PiClickF32::new(ModelConfig::default()).unwrap();
    let img = Tensor::zeros(vec![3, 64, 64]);
    let p = m
        .forward(&img, &[Click::positive(32, 32, 0)], &Tensor::zeros(vec![64, 64]))
        .unwrap();
    assert_eq!(p.len(), 7);
    assert_eq!(p.mask_logits.shape(), &[7, 64, 64]);
    assert!(p.conf.iter().chain(&p.iou_pred).all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn forward_is_deterministic() {
    let m = PiClickF32::new(small_config()).unwrap();
    let img = Tensor::from_fn(vec![3, 64, 64], |i| ((i * 31) % 7) as f32 / 7.0);
    let clicks = [Click::positive(12, 40, 0), Click::negative(50, 3, 1)];
    let prev = Tensor::from_fn(vec![64, 64], |i| (i % 2) as f32);
    let a = m.forward(&img, &clicks, &prev).unwrap();
    let b = m.forward(&img, &clicks, &prev).unwrap();
    assert_eq!(a, b);
}

#[test]
fn click_order_does_not_change_proposals() {
    let m = PiClickF64::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = random_image(&mut rng, 64, 64);
    let prev = Tensor::from_fn(vec![64, 64], |_| rng.gen_range(0.0..1.0));
    let clicks = [
        Click::positive(20, 20, 0),
        Click::negative(50, 10, 1),
        Click::positive(33, 41, 2),
        Click::negative(3, 60, 3),
    ];
    let reordered: Vec<Click> = [2usize, 0, 3, 1]
        .iter()
        .enumerate()
        .map(|(o, &i)| Click { order: o, ..clicks[i] })
        .collect();
    let a = m.forward(&img, &clicks, &prev).unwrap();
    let b = m.forward(&img, &reordered, &prev).unwrap();
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-3);
    let worst = a
        .mask_logits
        .data()
        .iter()
        .zip(b.mask_logits.data())
        .chain(a.conf.iter().zip(&b.conf))
        .chain(a.iou_pred.iter().zip(&b.iou_pred))
        .map(|(x, y)| rel(*x, *y))
        .fold(0.0, f64::max);
    assert!(worst <= 1e-5, "relative deviation {worst}");
}

#[test]
fn masked_positions_get_no_attention_mass() {
    let m = PiClickF64::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let img = random_image(&mut rng, 64, 64);
    let clicks = [Click::positive(20, 30, 0), Click::negative(60, 60, 1)];
    let tr = m.trace(&img, &clicks, &Tensor::zeros(vec![64, 64]), None).unwrap();
    let n = 7;
    let heads = m.config().num_heads;
    let mut masked_seen = 0;
    for (allowed, raw) in tr.attention_masks.iter().zip(&tr.cross_attention) {
        let probs = tr.ctx.tape.attention_probs(*raw).unwrap();
        let cols = allowed.len() / n;
        for h in 0..heads {
            for q in 0..n {
                let row = &probs[(h * n + q) * cols..(h * n + q + 1) * cols];
                let mut masked_mass = 0.0;
                for (j, p) in row.iter().enumerate() {
                    if !allowed[q * cols + j] {
                        masked_mass += p;
                        masked_seen += 1;
                    }
                }
                assert!(masked_mass <= 1e-12);
                assert!(row[cols - 2..].iter().all(|p| *p > 0.0));
            }
        }
    }
    assert!(masked_seen > 0, "random weights should mask something");
}

#[test]
fn frozen_masks_reproduce_the_free_forward() {
    let m = PiClickF64::new(small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_image(&mut rng, 32, 32);
    let clicks = [Click::positive(10, 10, 0)];
    let prev = Tensor::zeros(vec![32, 32]);
    let free = m.trace(&img, &clicks, &prev, None).unwrap();
    let frozen = m
        .trace(&img, &clicks, &prev, Some(&free.attention_masks))
        .unwrap();
    assert_eq!(free.proposals(), frozen.proposals());
}

#[test]
fn forward_needs_a_click() {
    let m = PiClickF32::new(small_config()).unwrap();
    let r = m.forward(&Tensor::zeros(vec![3, 64, 64]), &[], &Tensor::zeros(vec![64, 64]));
    assert!(matches!(r, Err(Error::InvalidInput(_))));
    let r = m.forward(
        &Tensor::zeros(vec![3, 64, 64]),
        &[Click::positive(64, 0, 0)],
        &Tensor::zeros(vec![64, 64]),
    );
    assert!(matches!(r, Err(Error::ClickOutOfBounds { x: 64, .. })));
}

#[test]
fn type_embeddings_differ_by_polarity_only() {
    let m = PiClickF64::new(small_config()).unwrap();
    let (ep, en) = m.click_type_embeddings();
    let e = m
        .click_embeddings(&[Click::positive(7, 9, 0), Click::negative(7, 9, 1)], 64, 64)
        .unwrap();
    for j in 0..32 {
        let diff = e.matrix.row(0)[j] - e.matrix.row(1)[j];
        assert!((diff - (ep[j] - en[j])).abs() <= 1e-12);
    }
    // at the origin the encoding is exactly 0 or 1, so no rounding intervenes
    let e = m
        .click_embeddings(&[Click::positive(0, 0, 0), Click::negative(0, 0, 1)], 64, 64)
        .unwrap();
    for j in 0..32 {
        let pe = if j % 2 == 0 { 0.0 } else { 1.0 };
        assert_eq!(e.matrix.row(0)[j], pe + ep[j]);
        assert_eq!(e.matrix.row(1)[j], pe + en[j]);
    }
}

fn proposals(conf: Vec<f64>, iou: Vec<f64>) -> Proposals<f64> {
    let n = conf.len();
    Proposals {
        mask_logits: Tensor::zeros(vec![n, 1, 1]),
        conf,
        iou_pred: iou,
    }
}

#[test]
fn select_mask_examples() {
    assert_eq!(select_mask(&proposals(vec![1.0, 1.0], vec![0.3, 0.7])).unwrap().0, 1);
    assert_eq!(select_mask(&proposals(vec![0.5, 0.5], vec![0.4, 0.4])).unwrap().0, 0);
    let (i, s) = select_mask(&proposals(vec![0.9, 0.2, 0.6], vec![0.5, 0.9, 0.8])).unwrap();
    assert_eq!(i, 2);
    assert!((s - 0.48).abs() < 1e-12);
    assert!(matches!(
        select_mask(&proposals(vec![], vec![])),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn select_mask_matches_brute_force_and_ignores_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.gen_range(1..10);
        // coarse grid so ties occur
        let conf: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
        let iou: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
        let (i, _) = select_mask(&proposals(conf.clone(), iou.clone())).unwrap();
        let prod: Vec<f64> = conf.iter().zip(&iou).map(|(a, b)| a * b).collect();
        let best = prod.iter().cloned().fold(f64::MIN, f64::max);
        let brute = prod.iter().position(|p| *p == best).unwrap();
        assert_eq!(i, brute);
        let k: f64 = rng.gen_range(0.1..10.0);
        let scaled = argmax_first(&prod.iter().map(|p| p * k).collect::<Vec<_>>()).unwrap();
        assert_eq!(scaled.0, i);
    }
}

#[test]
fn params_roundtrip_through_store() {
    let m = PiClickF32::new(small_config()).unwrap();
    let copy = PiClickF32::from_params(small_config(), m.params().clone()).unwrap();
    assert_eq!(copy.params().fingerprint(), m.params().fingerprint());
    let other = ModelConfig {
        hidden_dim: 16,
        ..small_config()
    };
    assert!(matches!(
        PiClickF32::from_params(other, m.params().clone()),
        Err(Error::Checkpoint(_))
    ));
}
