use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use microsegnet::config::{ModelConfig, StemMode};
use microsegnet::domain::{clamp_prob, BinaryMask, Image2D, Spacing};
use microsegnet::hard_region::build_weight_map;
use microsegnet::losses::{logit_grad, ScaleTargets, SCALE_COEFFICIENTS};
use microsegnet::model::{MicroSegNet, TokenSequence};
use microsegnet::nn::{Module, Tensor};

fn image(seed: u64, n: usize) -> Image2D {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..n * n).map(|_| r.random_range(0.0f32..1.0)).collect();
    Image2D::new(n, n, px, Spacing::default(), "img", 0).unwrap()
}

fn small(input_size: usize) -> ModelConfig {
    ModelConfig {
        input_size,
        ..ModelConfig::tiny()
    }
}

/// Parameter count from the layer shapes alone.
fn count_from_config(c: &ModelConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
    let block = |i: usize, o: usize| conv(i, o, 3) + 2 * o; // conv + group norm
    let [s1, s2, s3] = c.stem_widths();
    let stem = block(1, s1) + block(s1, s1) + block(s1, s2) + block(s2, s2) + block(s2, s3) + block(s3, s3);
    let (d, m, n) = (c.embed_dim, c.mlp_dim(), c.num_tokens());
    let patch_in = match c.stem {
        StemMode::Hybrid => s3 * 4,
        StemMode::Pure => c.patch_size * c.patch_size,
    };
    let embed = patch_in * d + n * d;
    let layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
    let [more, b1, b2, b3, b4] = c.decoder_widths();
    let decoder = block(d, more) + block(more + s3, b1) + block(b1 + s2, b2) + block(b2 + s1, b3) + block(b3, b4);
    let heads = conv(b1, 1, 1) + conv(b2, 1, 1) + conv(b3, 1, 1) + conv(b4, 1, 1);
    stem + embed + c.num_layers * layer + decoder + heads
}

#[test]
fn parameter_count_matches_shape_arithmetic() {
    for cfg in [ModelConfig::tiny(), ModelConfig { stem: StemMode::Pure, ..ModelConfig::tiny() }] {
        let m = MicroSegNet::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(m.num_params(), count_from_config(&cfg));
    }
    assert_eq!(count_from_config(&ModelConfig::tiny()), 1_515_236);
}

#[test]
fn same_config_same_shapes_and_seed_determinism() {
    let a = MicroSegNet::<f32>::new(&small(64), 3).unwrap();
    let b = MicroSegNet::<f32>::new(&small(64), 3).unwrap();
    let c = MicroSegNet::<f32>::new(&small(64), 4).unwrap();
    let shapes = |m: &MicroSegNet<f32>| m.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect::<Vec<_>>();
    assert_eq!(shapes(&a), shapes(&c));
    assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.value == y.value));
    assert!(a.params().iter().zip(c.params()).any(|(x, y)| x.value != y.value));
    let img = image(1, 64);
    assert_eq!(a.forward(&img, true).unwrap(), a.forward(&img, true).unwrap());
}

#[test]
fn doubled_input_doubles_skip_sides() {
    let m = MicroSegNet::<f32>::new(&small(448), 0).unwrap();
    let out = m.conv_stem(&MicroSegNet::<f32>::input_tensor(&image(2, 448))).unwrap();
    let sides: Vec<usize> = out.skips.iter().map(|s| s.chw().1).collect();
    assert_eq!(sides, [224, 112, 56]);
    assert!(m.conv_stem(&Tensor::zeros(&[1, 100, 100])).is_err());
}

#[test]
fn different_images_give_different_tokens() {
    let m = MicroSegNet::<f32>::new(&small(64), 0).unwrap();
    let tok = |seed| {
        let x = MicroSegNet::<f32>::input_tensor(&image(seed, 64));
        m.patch_embed(m.conv_stem(&x).unwrap().deep()).unwrap()
    };
    assert_ne!(tok(1).tokens, tok(2).tokens);
    assert_eq!(tok(1).tokens.rc(), (16, 128));
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let mut m = MicroSegNet::<f32>::new(&small(64), 5).unwrap().cast::<f64>();
    m.embed.pos.value.iter_mut().for_each(|v| *v = 0.0);
    let (n, d) = (16, 128);
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let z: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let permute = |t: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&i| t[i * d..(i + 1) * d].to_vec()).collect() };
    let seq = |v: Vec<f64>| TokenSequence {
        tokens: Tensor::from_vec(&[n, d], v),
        grid: (4, 4),
    };
    let a = m.transformer_encoder(&seq(permute(&z))).unwrap();
    let b = permute(&m.transformer_encoder(&seq(z)).unwrap().tokens.data);
    let err = a.tokens.data.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "max deviation {err}");
}

#[test]
fn saturated_head_bias_gives_one_minus_eps() {
    let mut m = MicroSegNet::<f32>::new(&small(64), 0).unwrap();
    for h in m.decoder.heads.iter_mut() {
        h.bias.value.iter_mut().for_each(|b| *b = 50.0);
    }
    let p = m.forward(&image(3, 64), true).unwrap();
    let top = clamp_prob(1.0);
    for map in [Some(&p.p1), p.p2.as_ref(), p.p3.as_ref(), p.p4.as_ref()] {
        assert!(map.unwrap().probs.iter().all(|&v| v == top));
    }
}

#[test]
fn batch_items_are_independent() {
    let m = MicroSegNet::<f32>::new(&small(64), 0).unwrap();
    let (a, b) = (image(10, 64), image(11, 64));
    let mut b2 = b.clone();
    b2.pixels[100] += 0.5;
    let one = m.forward_batch(&[a.clone(), b], true).unwrap();
    let two = m.forward_batch(&[a, b2], true).unwrap();
    assert_eq!(one[0], two[0]);
    assert_ne!(one[1], two[1]);
}

#[test]
fn every_parameter_group_gets_a_finite_nonzero_gradient() {
    for stem in [StemMode::Hybrid, StemMode::Pure] {
        let cfg = ModelConfig { stem, ..small(64) };
        let mut m = MicroSegNet::<f32>::new(&cfg, 1).unwrap();
        let y = BinaryMask::from_fn(64, 64, Spacing::default(), |r, c| (r as i64 - 30).pow(2) + (c as i64 - 34).pow(2) < 300);
        let hard = BinaryMask::from_fn(64, 64, Spacing::default(), |r, _| r % 9 == 0);
        let w = build_weight_map(&hard, 12.0, 1.0).unwrap();
        let t = ScaleTargets::from_mask(&y).unwrap();
        let x = MicroSegNet::<f32>::input_tensor(&image(4, 64));
        let (logits, cache) = m.forward_train(&x, true).unwrap();
        let targets = [&t.y1, &t.y2, &t.y3, &t.y4];
        let dl = std::array::from_fn(|k| {
            let z = logits[k].as_ref().unwrap();
            let s: Vec<f64> = z.data.iter().map(|&v| 1.0 / (1.0 + (-f64::from(v)).exp())).collect();
            let g = logit_grad(&s, targets[k], (k == 0).then_some(&w), SCALE_COEFFICIENTS[k]);
            Some(Tensor::from_vec(&z.shape, g.into_iter().map(|v| v as f32).collect()))
        });
        m.backward(&cache, &dl);
        for p in m.params() {
            assert!(p.grad.iter().all(|g| g.is_finite()), "{} has a non-finite gradient", p.name);
        }
        let group_norm = |prefix: &str| -> f64 {
            m.params()
                .iter()
                .filter(|p| p.name.starts_with(prefix))
                .flat_map(|p| p.grad.iter())
                .map(|&g| f64::from(g).powi(2))
                .sum()
        };
        for prefix in ["stem", "embed", "encoder", "decoder", "head"] {
            assert!(group_norm(prefix) > 0.0, "{stem:?}: no gradient reaches {prefix}");
        }
    }
}
