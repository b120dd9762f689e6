//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Positional arguments `c1` .. `c10` select criteria.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stan_core::ablation::{run_ablation, AblationGrid, AblationRow};
use stan_core::backbone::FeaturePyramid;
use stan_core::config::{AggregationMode, ModelConfig, RunConfig};
use stan_core::gradcheck::{sweep, SweepOptions};
use stan_core::head::{predict, Prediction};
use stan_core::io::checkpoint::Checkpoint;
use stan_core::io::synthetic::{generate_synthetic, SyntheticSpec};
use stan_core::io::{scores_csv, tensor_file};
use stan_core::metrics::{acc, auroc, macro_f1, oscr, ScoredSample};
use stan_core::model::StanModel;
use stan_core::params::{Ctx, ParamStore};
use stan_core::run::{train_accuracy, train_run};
use stan_core::stfl::ForgetBlock;
use stan_core::tensor::{grad_check, GradCheckConfig, Graph, Tensor, Var};
use stan_core::train::{epoch_means, train};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0f32..1.0) * scale).unwrap()
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("c1", "gradient integrity", c1_gradients),
        ("c2", "forget-gate contract", c2_forget_gate),
        ("c3", "shape invariants", c3_shapes),
        ("c4", "SFSO dependency direction", c4_dependency),
        ("c5", "metric oracles", c5_metrics),
        ("c6", "inference rule", c6_inference),
        ("c7", "overfit smoke test", c7_overfit),
        ("c8", "ablation trend", c8_ablation),
        ("c9", "format golden files", c9_golden),
        ("c10", "determinism", c10_determinism),
    ];
    if std::env::args().any(|a| a == "--list") {
        for (id, _, _) in criteria {
            println!("{id}: test");
        }
        return;
    }
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {:>2} {name}: PASS ({d}; {secs:.1}s)", &id[1..]),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({d}; {secs:.1}s)", &id[1..]);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// 1. Full-model finite-difference sweep plus every primitive on its own.

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let report = sweep(&ModelConfig::tiny(), &SweepOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = report.max_rel_error();
    let modules = report.modules.iter().map(|m| m.module.as_str()).collect::<Vec<_>>().join(",");
    let primitive = primitive_worst();
    check(
        worst < 5e-3 && elapsed < Duration::from_secs(600) && primitive < 1e-3,
        format!(
            "full model worst {worst:.2e} over {} elements [{modules}] in {:.0}s; primitives worst {primitive:.2e}",
            report.checked(),
            elapsed.as_secs_f64()
        ),
    )
}

fn primitive_worst() -> f64 {
    type Op = fn(&mut Graph<f64>, &[Var]) -> Result<Var, stan_core::tensor::TensorError>;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut r = |s: &[usize]| Tensor::from_fn(s.to_vec(), |_| rng.gen_range(-1.0f64..1.0)).unwrap();
    let cases: Vec<(Op, Vec<Tensor<f64>>)> = vec![
        (|g, v| g.matmul(v[0], v[1]), vec![r(&[3, 4]), r(&[4, 2])]),
        (|g, v| g.bmm(v[0], v[1]), vec![r(&[2, 3, 4]), r(&[2, 4, 2])]),
        (|g, v| g.add(v[0], v[1]), vec![r(&[2, 3]), r(&[2, 3])]),
        (|g, v| g.sub(v[0], v[1]), vec![r(&[2, 3]), r(&[2, 3])]),
        (|g, v| g.mul(v[0], v[1]), vec![r(&[2, 3]), r(&[2, 3])]),
        (|g, v| g.scale(v[0], 0.7), vec![r(&[2, 3])]),
        (|g, v| g.add_bias(v[0], v[1]), vec![r(&[3, 4]), r(&[4])]),
        (|g, v| g.add_channel_bias(v[0], v[1]), vec![r(&[3, 2, 2]), r(&[3])]),
        (|g, v| g.linear(v[0], v[1], v[2]), vec![r(&[2, 4]), r(&[4, 3]), r(&[3])]),
        (|g, v| g.sigmoid(v[0]), vec![r(&[2, 4])]),
        (|g, v| g.tanh(v[0]), vec![r(&[2, 4])]),
        (|g, v| g.gelu(v[0]), vec![r(&[2, 4])]),
        (|g, v| g.softmax(v[0]), vec![r(&[2, 4])]),
        (|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), vec![r(&[3, 5]), r(&[5]), r(&[5])]),
        (|g, v| g.sum(v[0]), vec![r(&[2, 3])]),
        (|g, v| g.mean(v[0]), vec![r(&[2, 3])]),
        (|g, v| g.mean_trailing(v[0]), vec![r(&[2, 3, 4])]),
        (|g, v| g.global_avg_pool(v[0]), vec![r(&[3, 2, 4])]),
        (|g, v| g.concat(&[v[0], v[1]], 0), vec![r(&[2, 3]), r(&[1, 3])]),
        (|g, v| g.gather(v[0], vec![3, 0, 0, 5, 2], vec![5]), vec![r(&[2, 3])]),
        (|g, v| g.reshape(v[0], vec![3, 2]), vec![r(&[2, 3])]),
        (|g, v| g.transpose(v[0]), vec![r(&[2, 3])]),
        (|g, v| g.rows(v[0], 1, 2), vec![r(&[4, 3])]),
        (|g, v| g.conv2d(v[0], v[1], 2, 1), vec![r(&[2, 5, 4]), r(&[3, 2, 3, 3])]),
        (|g, v| g.cross_entropy(v[0], &[0, 3, 1]), vec![r(&[3, 4])]),
    ];
    let cfg = GradCheckConfig::new(1e-6, 1e-3).with_floor(1e-3);
    let mut worst: f64 = 0.0;
    for (op, xs) in cases {
        // Project onto fixed weights so every output element matters.
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let out = op(g, v)?;
            let n = g.value(out).numel();
            let w = Tensor::from_fn(g.shape(out).to_vec(), |i| 0.3 + (i as f64 * 0.37) % 1.0 - 0.5 * ((i % 2) as f64))?;
            debug_assert_eq!(w.numel(), n);
            let w = g.constant(w)?;
            let p = g.mul(out, w)?;
            g.sum(p)
        };
        let rep = grad_check(f, &xs, &cfg).expect("primitive check runs");
        worst = worst.max(rep.max_rel_error);
    }
    // Max-pool and relu on inputs kept away from ties and the kink.
    let mut vals: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64 * 0.05 - 0.8).collect();
    vals.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let pooled = grad_check(
        |g, v| {
            let p = g.maxpool2d(v[0], 2, 2)?;
            let q = g.mul(p, p)?;
            g.sum(q)
        },
        &[Tensor::new(vec![2, 4, 4], vals.clone()).unwrap()],
        &cfg,
    )
    .expect("maxpool check runs");
    let relu_in: Vec<f64> = vals.iter().map(|v| if v.abs() < 0.05 { 0.5 } else { *v }).collect();
    let relu = grad_check(
        |g, v| {
            let p = g.relu(v[0])?;
            let q = g.mul(p, p)?;
            g.sum(q)
        },
        &[Tensor::new(vec![32], relu_in).unwrap()],
        &cfg,
    )
    .expect("relu check runs");
    worst.max(pooled.max_rel_error).max(relu.max_rel_error)
}

// 2. Every CA mask element lies strictly in (0, 1); zero mask weights give 0.5.

fn c2_forget_gate() -> Outcome {
    let cfg = ModelConfig::default();
    let (model, mut store) = StanModel::new(&cfg, 21).unwrap();
    let ca = match &model.stfl.as_ref().unwrap().forget {
        ForgetBlock::ContextAware(ca) => ca.clone(),
        ForgetBlock::Plain(_) => return Err("default model has no CA gate".into()),
    };
    let dims = cfg.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut inputs = Vec::new();
    for i in 0..1000 {
        let scale = [0.01f32, 0.1, 1.0, 10.0, 100.0][i % 5];
        inputs.push((
            rand_tensor(&mut rng, &[1, dims.hidden], scale),
            rand_tensor(&mut rng, &[1, dims.common_channels], scale),
            rand_tensor(&mut rng, &[dims.common_channels, dims.common_side, dims.common_side], scale),
        ));
    }
    let masks = |store: &ParamStore<f32>| -> Vec<Vec<f32>> {
        inputs
            .iter()
            .map(|(h, x, m)| {
                let mut ctx = Ctx::new(store, false);
                let (h, x, m) = (ctx.input(h).unwrap(), ctx.input(x).unwrap(), ctx.input(m).unwrap());
                let out = ca.forget_mask(&mut ctx, h, x, m).unwrap();
                ctx.g.value(out).data().to_vec()
            })
            .collect()
    };
    let all = masks(&store);
    let inside = all.iter().flatten().all(|&v| v > 0.0 && v < 1.0);
    let (lo, hi) = all.iter().flatten().fold((1.0f32, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    for id in [ca.mask.w, ca.mask.b] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let half = masks(&store).iter().flatten().all(|&v| v == 0.5);
    check(
        inside && half && all.len() == 1000,
        format!("1000 passes, mask range [{lo:.3e}, {hi:.7}], zero W_m/b_m exactly 0.5: {half}"),
    )
}

// 3. Shapes across random valid configurations.

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    let patch = [1, 2][rng.gen_range(0..2)];
    let grid = [8, 16][rng.gen_range(0..2)];
    let base = [2, 4, 8][rng.gen_range(0..3)];
    let b = &mut cfg.backbone;
    b.patch_size = patch;
    b.image_size = patch * grid;
    b.stage_channels = [base, 2 * base, 4 * base, 8 * base];
    b.stage_depths = [rng.gen_range(1..3), 1, rng.gen_range(1..3), 1];
    b.window_size = [1, 2, 4][rng.gen_range(0..3)];
    b.num_heads = [1, 1, 2, 2];
    b.num_known_classes = rng.gen_range(2..7);
    b.mlp_ratio = rng.gen_range(1..4);
    cfg.sfso.common_channels = Some(rng.gen_range(2..9));
    cfg.sfso.common_side = Some([1, grid / 8][rng.gen_range(0..2)]);
    cfg.sfso.kernel = [1, 3][rng.gen_range(0..2)];
    cfg.stfl.hidden_size = Some(rng.gen_range(2..9));
    cfg.ca.hidden_size = Some(rng.gen_range(2..9));
    cfg
}

fn c3_shapes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..10 {
        let cfg = random_config(&mut rng);
        let (model, store) = StanModel::new(&cfg, i).map_err(|e| format!("config {i}: {e}"))?;
        let b = &cfg.backbone;
        let img = rand_tensor(&mut rng, &[3, b.image_size, b.image_size], 1.0);
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.input(&img).unwrap();
        let out = model.forward_sample(&mut ctx, x).map_err(|e| format!("config {i}: {e}"))?;
        let shapes: Vec<Vec<usize>> = out.pyramid.maps.iter().map(|&m| ctx.g.shape(m).to_vec()).collect();
        let side = b.image_size / b.patch_size;
        for (l, s) in shapes.iter().enumerate() {
            let want = vec![b.stage_channels[0] << l, side >> l, side >> l];
            if *s != want || (l > 0 && (s[0] != 2 * shapes[l - 1][0] || 2 * s[1] != shapes[l - 1][1])) {
                return Err(format!("config {i}: level {} shape {s:?}, expected {want:?}", l + 1));
            }
        }
        let d = cfg.dims();
        let seq = out.sequence.ok_or("missing SFSO output")?;
        let first = ctx.g.shape(seq.maps[0]).to_vec();
        if first != [d.common_channels, d.common_side, d.common_side]
            || seq.maps.iter().any(|&m| ctx.g.shape(m) != first.as_slice())
        {
            return Err(format!("config {i}: SFSO outputs not all {first:?}"));
        }
        let h = out.stfl.as_ref().ok_or("missing STFL output")?.last();
        if ctx.g.shape(h) != [1, d.hidden] {
            return Err(format!("config {i}: STFL output {:?}, expected [1, {}]", ctx.g.shape(h), d.hidden));
        }
        let logits = out.logits_st.ok_or("missing C_ST logits")?;
        if ctx.g.shape(logits) != [1, b.num_known_classes] {
            return Err(format!("config {i}: C_ST logits {:?}", ctx.g.shape(logits)));
        }
    }
    Ok("10 random configurations".into())
}

// 4. Perturbing pyramid level 4 moves every output; level 1 only output 1.

fn c4_dependency() -> Outcome {
    let (model, store) = StanModel::new(&ModelConfig::default(), 41).unwrap();
    let sfso = model.sfso.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let levels: Vec<Tensor<f32>> = [[16, 8, 8], [32, 4, 4], [64, 2, 2], [128, 1, 1]]
        .iter()
        .map(|s| rand_tensor(&mut rng, s, 1.0))
        .collect();
    let run = |levels: &[Tensor<f32>]| -> Vec<Vec<f32>> {
        let mut ctx = Ctx::new(&store, false);
        let v: Vec<Var> = levels.iter().map(|m| ctx.input(m).unwrap()).collect();
        let seq = sfso.forward(&mut ctx, &FeaturePyramid { maps: [v[0], v[1], v[2], v[3]] }).unwrap();
        seq.maps.iter().map(|&m| ctx.g.value(m).data().to_vec()).collect()
    };
    let base = run(&levels);
    let changed = |a: &[f32], b: &[f32]| a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-6);
    let mut top = levels.clone();
    top[3] = top[3].map(|v| v + 0.5);
    let after_top = run(&top);
    let mut bottom = levels.clone();
    bottom[0] = bottom[0].map(|v| v + 0.5);
    let after_bottom = run(&bottom);
    let top_moves: Vec<bool> = (0..4).map(|t| changed(&base[t], &after_top[t])).collect();
    let bottom_moves: Vec<bool> = (0..4).map(|t| base[t] != after_bottom[t]).collect();
    check(
        top_moves == [true; 4] && bottom_moves == [true, false, false, false],
        format!("level 4 perturbation moves {top_moves:?}; level 1 perturbation moves {bottom_moves:?}"),
    )
}

// 5. Metrics against brute-force oracles.

fn pairwise_auroc(k: &[f64], u: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in k {
        for &b in u {
            s += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (k.len() * u.len()) as f64
}

fn sweep_oscr(k: &[ScoredSample], u: &[f64]) -> f64 {
    let mut ts: Vec<f64> = k.iter().map(|s| s.score).chain(u.iter().copied()).collect();
    ts.push(f64::NEG_INFINITY);
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let ccr = k.iter().filter(|s| s.true_label == Some(s.predicted_known_label) && s.score > t).count();
            let fp = u.iter().filter(|&&s| s > t).count();
            (fp as f64 / u.len() as f64, ccr as f64 / k.len() as f64)
        })
        .collect();
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

fn confusion_f1(d: &[(Option<usize>, Prediction)], k: usize) -> f64 {
    let idx = |o: Option<usize>| o.unwrap_or(k);
    let mut m = vec![vec![0usize; k + 1]; k + 1];
    for &(t, p) in d {
        let p = match p {
            Prediction::Known(c) => Some(c),
            Prediction::Unknown => None,
        };
        m[idx(t)][idx(p)] += 1;
    }
    (0..=k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let pred: f64 = (0..=k).map(|r| m[r][c] as f64).sum();
            let act: f64 = m[c].iter().map(|&v| v as f64).sum();
            let p = if pred > 0.0 { tp / pred } else { 0.0 };
            let r = if act > 0.0 { tp / act } else { 0.0 };
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / (k + 1) as f64
}

fn c5_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let (mut e_auroc, mut e_oscr, mut e_f1): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..200 {
        let nk = rng.gen_range(1..30);
        let nu = rng.gen_range(1..30);
        // Coarse grid so ties are frequent.
        let ks: Vec<ScoredSample> = (0..nk)
            .map(|_| ScoredSample {
                score: rng.gen_range(0..15) as f64 * 0.25,
                true_label: Some(rng.gen_range(0..4)),
                predicted_known_label: rng.gen_range(0..4),
            })
            .collect();
        let us: Vec<f64> = (0..nu).map(|_| rng.gen_range(0..15) as f64 * 0.25).collect();
        let kscores: Vec<f64> = ks.iter().map(|s| s.score).collect();
        e_auroc = e_auroc.max((auroc(&kscores, &us).unwrap() - pairwise_auroc(&kscores, &us)).abs());
        e_oscr = e_oscr.max((oscr(&ks, &us).unwrap().0 - sweep_oscr(&ks, &us)).abs());
        let d: Vec<(Option<usize>, Prediction)> = (0..nk + nu)
            .map(|_| {
                let t = if rng.gen_bool(0.3) { None } else { Some(rng.gen_range(0..4)) };
                let p = if rng.gen_bool(0.3) { Prediction::Unknown } else { Prediction::Known(rng.gen_range(0..4)) };
                (t, p)
            })
            .collect();
        e_f1 = e_f1.max((macro_f1(&d, 4).unwrap() - confusion_f1(&d, 4)).abs());
    }
    let perfect_known: Vec<ScoredSample> = (0..6)
        .map(|i| ScoredSample {
            score: 5.0 + i as f64,
            true_label: Some(i % 3),
            predicted_known_label: i % 3,
        })
        .collect();
    let perfect_unknown = [0.5, 1.0, 4.9];
    let ks: Vec<f64> = perfect_known.iter().map(|s| s.score).collect();
    let decisions: Vec<(Option<usize>, Prediction)> = (0..3)
        .map(|c| (Some(c), Prediction::Known(c)))
        .chain([(None, Prediction::Unknown)])
        .collect();
    let perfect = [
        auroc(&ks, &perfect_unknown).unwrap(),
        oscr(&perfect_known, &perfect_unknown).unwrap().0,
        macro_f1(&decisions, 3).unwrap(),
        acc(&perfect_known).unwrap(),
    ];
    check(
        e_auroc < 1e-9 && e_oscr < 1e-9 && e_f1 < 1e-9 && perfect == [1.0; 4],
        format!(
            "200 instances each: AUROC err {e_auroc:.1e}, OSCR err {e_oscr:.1e}, macro-F1 err {e_f1:.1e}; perfect cases {perfect:?}"
        ),
    )
}

// 6. Thresholded max-logit decisions.

fn c6_inference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut boundary = 0;
    for i in 0..1000 {
        let k = rng.gen_range(1..8);
        let logits: Vec<f32> = (0..k).map(|_| rng.gen_range(-8..8) as f32 * 0.5).collect();
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let theta = match i % 4 {
            0 => {
                boundary += 1;
                max as f64
            }
            1 => rng.gen_range(-4.0..4.0),
            2 => [f64::INFINITY, f64::NEG_INFINITY][rng.gen_range(0..2)],
            _ => max as f64 + [-1e-6, 1e-6][rng.gen_range(0..2)],
        };
        let first_max = logits.iter().position(|&v| v == max).unwrap();
        let want = if (max as f64) > theta { Prediction::Known(first_max) } else { Prediction::Unknown };
        let got = predict(&logits, theta).map_err(|e| e.to_string())?;
        if got.predicted != want || got.score != max as f64 {
            return Err(format!("case {i}: logits {logits:?}, theta {theta}: got {got:?}, expected {want:?}"));
        }
    }
    Ok(format!("1000 logit/threshold pairs, {boundary} with score == theta"))
}

// 7. Overfitting 64 samples, and early loss decrease for three lambdas.

fn overfit_spec() -> SyntheticSpec {
    SyntheticSpec {
        name: "overfit".into(),
        known_classes: 4,
        unknown_classes: 0,
        per_class: 16,
        val_per_class: 0,
        test_per_class: 0,
        image_side: 32,
        similarity: 0.5,
        noise: 0.1,
        seed: 71,
    }
}

fn c7_overfit() -> Outcome {
    let ds = generate_synthetic(&overfit_spec()).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.optimizer.epochs = 300;
    cfg.optimizer.stop_at_train_acc = Some(0.99);
    cfg.seed = 72;
    let start = Instant::now();
    let run = train_run(&cfg, &ds).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let train_acc = train_accuracy(&run.model, &run.store, &ds.train).map_err(|e| e.to_string())?;
    let epochs = epoch_means(&run.history).len();

    let mut decreasing = Vec::new();
    for lambda in [0.1, 1.0, 10.0] {
        let (model, mut store) = StanModel::new(&cfg.model(), 73).unwrap();
        let mut opt = cfg.optimizer.clone();
        opt.epochs = 10;
        opt.stop_at_train_acc = None;
        let loss = stan_core::config::LossConfig { lambda };
        let history = train(&model, &mut store, &ds.train, &opt, &loss, 74).map_err(|e| e.to_string())?;
        let means = epoch_means(&history);
        decreasing.push(means.len() == 10 && means.windows(2).all(|w| w[1] < w[0]));
    }
    check(
        train_acc >= 0.99 && elapsed < Duration::from_secs(900) && decreasing == [true; 3],
        format!(
            "train ACC {train_acc:.3} after {epochs} epochs in {:.0}s; epoch-mean loss strictly decreasing for lambda 0.1/1/10: {decreasing:?}",
            elapsed.as_secs_f64()
        ),
    )
}

// 8. Ablation trend on the hard synthetic benchmark, median of 5 seeds.

fn c8_ablation() -> Outcome {
    let spec = SyntheticSpec {
        name: "hard".into(),
        known_classes: 4,
        unknown_classes: 2,
        per_class: 16,
        val_per_class: 0,
        test_per_class: 32,
        image_side: 32,
        similarity: 0.7,
        noise: 0.1,
        seed: 7,
    };
    let ds = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let mut base = RunConfig::default();
    base.optimizer.epochs = 300;
    base.optimizer.stop_at_train_acc = Some(0.99);
    let row = |name: &str, sfso, stfl, ca, mode| AblationRow {
        name: name.into(),
        sfso,
        stfl,
        ca,
        aggregation_mode: mode,
    };
    let grid = AblationGrid {
        rows: vec![
            row("backbone", false, false, false, AggregationMode::Stan),
            row("module1_agg", true, true, true, AggregationMode::Module1Agg),
            row("module2_agg", true, true, true, AggregationMode::Module2Agg),
            row("module3_agg", true, true, true, AggregationMode::Module3Agg),
            row("stan", true, true, true, AggregationMode::Stan),
        ],
        seeds: Some(vec![1, 2, 3, 4, 5]),
    };
    let start = Instant::now();
    let results = run_ablation(&base, &grid, &ds, 1, &mut |row, r| {
        println!(
            "  {:<12} seed {} acc {:.3} auroc {:.3} oscr {:.3}",
            row.name, r.seed, r.acc, r.auroc, r.oscr
        );
    })
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let med: Vec<(String, f64)> = results.iter().map(|r| (r.row.name.clone(), r.auroc)).collect();
    let stan = med.last().unwrap().1;
    let beaten: Vec<&str> = med[..4].iter().filter(|(_, a)| *a > stan).map(|(n, _)| n.as_str()).collect();
    let table = med.iter().map(|(n, a)| format!("{n} {a:.3}")).collect::<Vec<_>>().join(", ");
    check(
        beaten.is_empty() && elapsed < Duration::from_secs(7200),
        format!(
            "median AUROC {table}; rows above stan: {beaten:?}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

// 9. Committed byte fixtures.

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn c9_golden() -> Outcome {
    let dir = fixtures();
    let read = |n: &str| fs::read(dir.join(n)).map_err(|e| format!("{n}: {e}"));
    let t_bytes = read("tensor.stan")?;
    let t = tensor_file::decode(&t_bytes, "tensor.stan").map_err(|e| e.to_string())?;
    let c_bytes = read("checkpoint.stck")?;
    let c = Checkpoint::decode(&c_bytes, "checkpoint.stck").map_err(|e| e.to_string())?;
    let s_bytes = read("scores.csv")?;
    let s = scores_csv::decode(&s_bytes, "scores.csv").map_err(|e| e.to_string())?;
    let same = [
        tensor_file::encode(&t).unwrap() == t_bytes,
        c.encode().unwrap() == c_bytes,
        scores_csv::encode(&s).unwrap() == s_bytes,
    ];
    check(
        same == [true; 3],
        format!("tensor/checkpoint/score-CSV re-encode identical: {same:?}"),
    )
}

// 10. Bitwise-identical checkpoints and reports through the command-line entry point.

fn stan(args: &[&str]) -> Result<(), String> {
    let argv = std::iter::once("stan").chain(args.iter().copied());
    if stan_cli::main_with_args(argv) == ExitCode::SUCCESS {
        Ok(())
    } else {
        Err(format!("stan {} failed", args.join(" ")))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let config = root.join("run.json");
    fs::write(
        &config,
        r#"{
  "optimizer": { "epochs": 2 },
  "data": { "synthetic": {
    "known_classes": 4, "unknown_classes": 2, "per_class": 4, "val_per_class": 4,
    "test_per_class": 4, "image_side": 32, "similarity": 0.5, "seed": 101
  } },
  "seed": 102
}"#,
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (root.join("a.stck"), root.join("b.stck"));
    stan(&["train", "--config", p(&config), "--out", p(&a)])?;
    stan(&["train", "--config", p(&config), "--out", p(&b)])?;
    let ckpt_same = fs::read(&a).unwrap() == fs::read(&b).unwrap();
    let (ea, eb) = (root.join("ea"), root.join("eb"));
    stan(&["eval", "--config", p(&config), "--ckpt", p(&a), "--calibrate", "--out", p(&ea)])?;
    stan(&["eval", "--config", p(&config), "--ckpt", p(&a), "--calibrate", "--out", p(&eb)])?;
    let report_same = fs::read(ea.join("report.json")).unwrap() == fs::read(eb.join("report.json")).unwrap();
    let scores_same = fs::read(ea.join("scores.csv")).unwrap() == fs::read(eb.join("scores.csv")).unwrap();
    check(
        ckpt_same && report_same && scores_same,
        format!("checkpoints identical: {ckpt_same}; reports identical: {report_same}; score CSVs identical: {scores_same}"),
    )
}
