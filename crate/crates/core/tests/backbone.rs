mod common;

use common::*;
use stan_core::backbone::{downsample, window_attention_block};
use stan_core::config::{BackboneConfig, ModelConfig};
use stan_core::gradcheck::check_params;
use stan_core::model::StanModel;
use stan_core::params::Ctx;
use stan_core::tensor::Tensor;

#[test]
fn patch_embed_shape_and_zero_image() {
    let (model, store) = desk();
    let mut ctx = Ctx::new(&store, false);
    let img = ctx.input(&Tensor::zeros(vec![3, 32, 32]).unwrap()).unwrap();
    let out = model.backbone.patch_embed(&mut ctx, img).unwrap();
    let v = ctx.g.value(out);
    assert_eq!(v.shape(), [16, 8, 8]);
    let bias = store.get(model.backbone.patch_bias).data();
    for c in 0..16 {
        assert!(v.data()[c * 64..(c + 1) * 64].iter().all(|&x| x == bias[c]));
    }
}

#[test]
fn patch_embed_matches_flatten_and_matmul() {
    let (model, store) = desk();
    let image = rand_tensor(&[3, 32, 32], 1);
    let mut ctx = Ctx::new(&store, false);
    let img = ctx.input(&image).unwrap();
    let out = model.backbone.patch_embed(&mut ctx, img).unwrap();
    let got = ctx.g.value(out).clone();
    let w = store.get(model.backbone.patch_weight).data();
    let b = store.get(model.backbone.patch_bias).data();
    let mut want = vec![0.0; 16 * 64];
    for py in 0..8 {
        for px in 0..8 {
            // Flatten the patch in (channel, row, col) order and project.
            let patch: Vec<f64> = (0..3)
                .flat_map(|c| (0..4).flat_map(move |y| (0..4).map(move |x| (c, y, x))))
                .map(|(c, y, x)| image.data()[(c * 32 + py * 4 + y) * 32 + px * 4 + x] as f64)
                .collect();
            for co in 0..16 {
                let s: f64 = patch.iter().enumerate().map(|(i, v)| v * w[co * 48 + i] as f64).sum();
                want[co * 64 + py * 8 + px] = s + b[co] as f64;
            }
        }
    }
    assert!(max_diff(got.data(), &want) < 1e-6);
}

#[test]
fn rejects_wrong_image_size() {
    let (model, store) = desk();
    let mut ctx = Ctx::new(&store, false);
    let img = ctx.input(&Tensor::zeros(vec![3, 30, 30]).unwrap()).unwrap();
    assert!(model.backbone.patch_embed(&mut ctx, img).is_err());
}

#[test]
fn single_token_windows_attend_to_themselves() {
    let (model, store) = desk();
    let block = &model.backbone.stages[1][0];
    let x = rand_tensor(&[32, 4, 4], 2);
    let mut ctx = Ctx::new(&store, false);
    let xv = ctx.input(&x).unwrap();
    let o = window_attention_block(&mut ctx, block, xv, 1).unwrap();
    let a = ctx.g.value(o.attention);
    assert_eq!(a.shape(), [16 * 2, 1, 1]);
    assert!(a.data().iter().all(|&w| w == 1.0));
}

#[test]
fn attention_rows_sum_to_one() {
    let (model, store) = desk();
    let x = rand_tensor(&[3, 32, 32], 3);
    let mut ctx = Ctx::new(&store, false);
    let xv = ctx.input(&x).unwrap();
    let out = model.backbone.forward(&mut ctx, xv).unwrap();
    assert_eq!(out.attention.len(), 5);
    for &a in &out.attention {
        let t = ctx.g.value(a);
        let n = *t.shape().last().unwrap();
        for row in t.data().chunks(n) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
        }
    }
}

#[test]
fn four_token_window_matches_brute_force() {
    let (model, store) = tiny();
    // Stage 4 of the tiny config: 16 channels, 2 heads, 2×2 grid.
    let block = &model.backbone.stages[3][0];
    let (c, heads, dh) = (16, 2, 8);
    let x = rand_tensor(&[c, 2, 2], 4);
    let mut ctx = Ctx::new(&store, false);
    let xv = ctx.input(&x).unwrap();
    let o = window_attention_block(&mut ctx, block, xv, 2).unwrap();
    let got = ctx.g.value(o.out).clone();

    let tokens: Vec<f64> = (0..4).flat_map(|t| (0..c).map(move |ch| (t, ch))).map(|(t, ch)| x.data()[ch * 4 + t] as f64).collect();
    let p = |id| store.get(id).data();
    let qkv = affine(&tokens, 4, p(block.qkv.w), p(block.qkv.b), 3 * c);
    let mut mixed = vec![0.0; 4 * c];
    for h in 0..heads {
        for i in 0..4 {
            let scores: Vec<f64> = (0..4)
                .map(|j| {
                    (0..dh).map(|d| qkv[i * 3 * c + h * dh + d] * qkv[j * 3 * c + c + h * dh + d]).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let w = softmax(&scores);
            for d in 0..dh {
                mixed[i * c + h * dh + d] = (0..4).map(|j| w[j] * qkv[j * 3 * c + 2 * c + h * dh + d]).sum();
            }
        }
    }
    let attn = affine(&mixed, 4, p(block.proj.w), p(block.proj.b), c);
    let x1: Vec<f64> = tokens.iter().zip(&attn).map(|(a, b)| a + b).collect();
    let hidden: Vec<f64> = affine(&x1, 4, p(block.fc1.w), p(block.fc1.b), 2 * c).into_iter().map(gelu).collect();
    let mlp = affine(&hidden, 4, p(block.fc2.w), p(block.fc2.b), c);
    let out_tokens: Vec<f64> = x1.iter().zip(&mlp).map(|(a, b)| a + b).collect();
    let want: Vec<f64> = (0..c).flat_map(|ch| (0..4).map(move |t| (t, ch))).map(|(t, ch)| out_tokens[t * c + ch]).collect();
    assert!(max_diff(got.data(), &want) < 1e-5);
}

#[test]
fn window_must_divide_grid() {
    let (model, store) = desk();
    let block = &model.backbone.stages[0][0];
    let mut ctx = Ctx::new(&store, false);
    let xv = ctx.input(&rand_tensor(&[16, 8, 8], 5)).unwrap();
    assert!(window_attention_block(&mut ctx, block, xv, 3).is_err());
}

#[test]
fn downsample_shapes_zero_input_and_oracle() {
    let (model, store) = desk();
    let merge = &model.backbone.merges[0];
    let mut ctx = Ctx::new(&store, false);
    let z = ctx.input(&Tensor::zeros(vec![16, 4, 4]).unwrap()).unwrap();
    let out = downsample(&mut ctx, merge, z).unwrap();
    let v = ctx.g.value(out).clone();
    assert_eq!(v.shape(), [32, 2, 2]);
    let b = store.get(merge.b).data();
    for c in 0..32 {
        assert!(v.data()[c * 4..(c + 1) * 4].iter().all(|&x| x == b[c]));
    }

    let x = rand_tensor(&[16, 4, 4], 6);
    let xv = ctx.input(&x).unwrap();
    let out = downsample(&mut ctx, merge, xv).unwrap();
    let got = ctx.g.value(out).clone();
    let mut rows = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                for c in 0..16 {
                    rows.push(x.data()[(c * 4 + 2 * i + dy) * 4 + 2 * j + dx] as f64);
                }
            }
        }
    }
    let proj = affine(&rows, 4, store.get(merge.w).data(), b, 32);
    let want: Vec<f64> = (0..32).flat_map(|c| (0..4).map(move |t| (t, c))).map(|(t, c)| proj[t * 32 + c]).collect();
    assert!(max_diff(got.data(), &want) < 1e-6);

    let odd = ctx.input(&Tensor::zeros(vec![16, 3, 3]).unwrap()).unwrap();
    assert!(downsample(&mut ctx, merge, odd).is_err());
}

#[test]
fn desk_pyramid_shapes_and_logit_width() {
    for k in [2, 4, 7] {
        let mut cfg = ModelConfig::default();
        cfg.backbone.num_known_classes = k;
        let (model, store) = StanModel::new(&cfg, 1).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.input(&rand_tensor(&[3, 32, 32], 7)).unwrap();
        let out = model.backbone.forward(&mut ctx, x).unwrap();
        let shapes: Vec<Vec<usize>> = out.pyramid.maps.iter().map(|&m| ctx.g.shape(m).to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 8, 8], vec![32, 4, 4], vec![64, 2, 2], vec![128, 1, 1]]);
        assert_eq!(ctx.g.shape(out.logits), [1, k]);
    }
}

#[test]
fn forward_is_deterministic() {
    let (model, store) = desk();
    let x = rand_tensor(&[3, 32, 32], 8);
    let a = model.infer(&store, &x).unwrap();
    let b = model.infer(&store, &x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_validation() {
    let mut b = BackboneConfig::default();
    b.image_size = 36;
    assert!(b.validate().is_err());
    let mut b = BackboneConfig::default();
    b.stage_channels = [16, 32, 48, 96];
    assert!(b.validate().is_err());
    let mut b = BackboneConfig::default();
    b.num_heads = [3, 2, 4, 4];
    assert!(b.validate().is_err());
}

#[test]
fn whole_backbone_gradient_check() {
    let (model, store) = tiny();
    let mut store = store.cast::<f64>();
    let image = rand_tensor(&[3, 16, 16], 9);
    let report = check_params(
        &mut store,
        |n| n.starts_with("backbone."),
        |ctx| {
            let x = ctx.input(&image)?;
            let out = model.backbone.forward(ctx, x)?;
            Ok(ctx.g.cross_entropy(out.logits, &[1])?)
        },
        1e-6,
        1e-6,
        false,
    )
    .unwrap();
    assert!(report.checked() > 1000);
    assert!(report.max_rel_error() < 5e-3, "{report:?}");
}
