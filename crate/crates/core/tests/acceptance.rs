//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{kernel_gradient_errors, random_patch_set, random_sparse_frame, vit_gradient_errors};
use evpatch::bench::{preprocess_timed, run_bench};
use evpatch::cost_model::{cost_report, crossover_n, mlp_flops, model_macs, msa_flops, reconcile, CountingMode};
use evpatch::events_io::{read_binary, synth_recording, write_binary, SynthCorpus};
use evpatch::patches::select_active;
use evpatch::train::{evaluate, fit, AdamWConfig, Dataset, Trainer};
use evpatch::vit::{load_checkpoint, save_checkpoint, ForwardProfile};
use evpatch::voxel::{build_voxel_grid, Preprocess};
use evpatch::{
    Event, EventRecording, PatchSet, Polarity, ShapeClass, Tensor2D, ThresholdMode, TrainConfig, ViTConfig,
    VisionTransformer,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy_prep() -> Preprocess {
    let c = ViTConfig::toy();
    Preprocess {
        channels: c.channels,
        frame_height: c.frame_height,
        frame_width: c.frame_width,
    }
}

fn c1_coefficients() -> Outcome {
    let cfg = ViTConfig::base();
    let (f1, f2) = (msa_flops(1, &cfg), msa_flops(2, &cfg));
    let quad = (f2 - 2 * f1) / 2;
    let lin = f1 - quad;
    let mlp = mlp_flops(1, &cfg);
    let ok = quad == 3108 && lin == 4_718_592 && mlp == 9_437_184 && (0..50).all(|n| msa_flops(n, &cfg) == quad * n * n + lin * n);
    check(ok, format!("msa = {quad}·n² + {lin}·n, mlp = {mlp}·n"))
}

fn c2_crossover() -> Outcome {
    let cfg = ViTConfig::base();
    let c = crossover_n(&cfg);
    let dominated = (1..=1518).all(|n| mlp_flops(n, &cfg) > msa_flops(n, &cfg));
    let crosses = msa_flops(1519, &cfg) >= mlp_flops(1519, &cfg);
    check(c == 1519 && dominated && crosses, format!("crossover_n = {c}, mlp dominates 1..1518: {dominated}"))
}

fn c3_mac_ratio() -> Outcome {
    let cfg = ViTConfig::base();
    let r = model_macs(90, &cfg, CountingMode::Encoder) / model_macs(180, &cfg, CountingMode::Encoder);
    check((r - 0.4905).abs() <= 0.0005, format!("macs(90)/macs(180) = {r:.5}"))
}

fn c4_dense_macs() -> Outcome {
    let cfg = ViTConfig::base();
    let encoder = model_macs(180, &cfg, CountingMode::Encoder);
    let full = model_macs(180, &cfg, CountingMode::Full);
    check(
        (14.6e9..=16.7e9).contains(&encoder),
        format!("encoder mode {:.3}G, full mode {:.3}G", encoder / 1e9, full / 1e9),
    )
}

fn c5_reconciliation() -> Outcome {
    let cfg = ViTConfig::toy();
    let model = VisionTransformer::init(cfg, 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for n in [1usize, 10, 50] {
        let mut profile = ForwardProfile::default();
        model
            .forward(&random_patch_set(&mut rng, &cfg, n), &mut profile)
            .map_err(|e| e.to_string())?;
        let rec = reconcile(&cost_report(n as u64, &cfg, CountingMode::Full), &profile).map_err(|e| e.to_string())?;
        worst = worst.max(rec.max_rel_error());
    }
    check(worst < 0.01, format!("max relative error {worst:.2e} over n in {{1, 10, 50}}"))
}

fn c6_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let class = ShapeClass::from_index(rng.gen_range(0..3)).unwrap();
        let w = rng.gen_range(32..=240);
        let h = rng.gen_range(32..=180);
        let dur = rng.gen_range(1_000..=100_000);
        let rate = rng.gen_range(1_000.0..500_000.0);
        let rec = synth_recording(class, rng.gen(), w, h, dur, rate).map_err(|e| e.to_string())?;
        let channels = rng.gen_range(2..=12);
        let g = build_voxel_grid(&rec, channels).map_err(|e| e.to_string())?;
        worst = worst.max((g.sum() - rec.polarity_sum() as f64).abs());
    }
    check(worst <= 1e-6, format!("200 recordings, max |mass - Σp| = {worst:.2e}"))
}

fn c7_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut kernel_worst = 0.0f64;
    for _ in 0..20 {
        for (_, e) in kernel_gradient_errors(&mut rng) {
            kernel_worst = kernel_worst.max(e);
        }
    }
    let errs = vit_gradient_errors(&mut rng, ViTConfig::toy(), 3, None);
    let (name, model_worst) = errs
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default();
    let ok = kernel_worst < 1e-4 && model_worst < 1e-4;
    check(
        ok,
        format!(
            "kernels {kernel_worst:.2e}, full model {model_worst:.2e} ({name}) over all {} tensors",
            errs.len()
        ),
    )
}

fn c8_equivalence() -> Outcome {
    let cfg = ViTConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut dense_gap, mut perm_gap) = (0.0f64, 0.0f64);
    for i in 0..20 {
        let model = VisionTransformer::init(cfg, 800 + i).map_err(|e| e.to_string())?;
        let keep = rng.gen_range(0.1..0.9);
        let frame = random_sparse_frame(&mut rng, &cfg, keep);
        let set = select_active(&frame, cfg.patch_size, 0.0).map_err(|e| e.to_string())?;
        let sparse = model.forward(&set, &mut ForwardProfile::default()).map_err(|e| e.to_string())?;
        let dense = model.forward_dense(&frame, &mut ForwardProfile::default()).map_err(|e| e.to_string())?;
        for (a, b) in sparse.iter().zip(&dense) {
            dense_gap = dense_gap.max((a - b).abs());
        }

        let active = select_active(&frame, cfg.patch_size, 0.35).map_err(|e| e.to_string())?;
        if active.is_empty() {
            continue;
        }
        let n = active.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let vectors = Tensor2D::from_fn(n, active.vectors().cols(), |r, c| active.vectors().get(order[r], c));
        let positions = order.iter().map(|&j| active.positions()[j]).collect();
        let shuffled = PatchSet::unordered(vectors, positions, *active.grid()).ok_or("bad permutation")?;
        let a = model.forward(&active, &mut ForwardProfile::default()).map_err(|e| e.to_string())?;
        let b = model.forward(&shuffled, &mut ForwardProfile::default()).map_err(|e| e.to_string())?;
        for (x, y) in a.iter().zip(&b) {
            perm_gap = perm_gap.max((x - y).abs());
        }
    }
    check(
        dense_gap <= 1e-12 && perm_gap <= 1e-9,
        format!("dense gap {dense_gap:.2e}, permutation gap {perm_gap:.2e}"),
    )
}

struct ToyData {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn toy_data() -> Result<ToyData, String> {
    let prep = toy_prep();
    let mk = |per_class, seed| -> Result<Dataset, String> {
        let recs = SynthCorpus::toy(per_class, seed).generate().map_err(|e| e.to_string())?;
        Dataset::from_recordings(&recs, &prep, 3).map_err(|e| e.to_string())
    };
    Ok(ToyData {
        train: mk(40, 11)?,
        test: mk(20, 22)?,
        val: mk(20, 33)?,
    })
}

/// Trains with best-validation selection and returns the number of correct
/// train and test predictions at `eval_threshold`.
fn train_run(data: &ToyData, mode: ThresholdMode, eval_threshold: f64, seed: u64) -> Result<(usize, usize), String> {
    let cfg = TrainConfig {
        epochs: 50,
        optimizer: AdamWConfig {
            lr: 1e-4,
            ..AdamWConfig::default()
        },
        threshold_mode: mode,
        seed,
        augment: true,
    };
    let model = VisionTransformer::init(ViTConfig::toy(), seed).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, cfg).map_err(|e| e.to_string())?;
    let out = fit::<Vec<u8>>(&mut trainer, &data.train, Some(&data.val), eval_threshold, None).map_err(|e| e.to_string())?;
    let correct = |d: &Dataset| -> Result<usize, String> {
        let acc = evaluate(&out.model, d, eval_threshold).map_err(|e| e.to_string())?.accuracy;
        Ok((acc * d.len() as f64).round() as usize)
    };
    Ok((correct(&data.train)?, correct(&data.test)?))
}

fn c9_training() -> Outcome {
    let data = toy_data()?;
    let (n_train, n_test) = (data.train.len(), data.test.len());
    let seeds = [1u64, 2, 3];
    let mut lines = Vec::new();
    let (mut dense_sum, mut mixed_sum) = (0usize, 0usize);
    let mut floors_ok = true;
    for &seed in &seeds {
        let (dtr, dte) = train_run(&data, ThresholdMode::Fixed(0.0), 0.0, seed)?;
        let (_, mte) = train_run(&data, ThresholdMode::mixed(), 0.35, seed)?;
        floors_ok &= 10 * dtr >= 9 * n_train && 10 * dte >= 7 * n_test;
        dense_sum += dte;
        mixed_sum += mte;
        lines.push(format!("seed {seed}: dense train {dtr}/{n_train} test {dte}/{n_test}, mixed@0.35 test {mte}/{n_test}"));
    }
    // Mean accuracies within 5 points, compared in integer counts.
    let total = seeds.len() * n_test;
    let close = 20 * dense_sum.abs_diff(mixed_sum) <= total;
    lines.push(format!(
        "mean test accuracy dense {:.3}, mixed@0.35 {:.3}",
        dense_sum as f64 / total as f64,
        mixed_sum as f64 / total as f64
    ));
    check(floors_ok && close, lines.join("; "))
}

fn c10_throughput() -> Outcome {
    let cfg = ViTConfig::base();
    let recs = SynthCorpus::bench(1, 0).generate().map_err(|e| e.to_string())?;
    let prep = Preprocess {
        channels: cfg.channels,
        frame_height: cfg.frame_height,
        frame_width: cfg.frame_width,
    };
    let (frames, _) = preprocess_timed(&recs, &prep).map_err(|e| e.to_string())?;
    let model = VisionTransformer::init(cfg, 10).map_err(|e| e.to_string())?;
    let dense = run_bench(&model, &frames, 0.0, 3).map_err(|e| e.to_string())?;
    let sparse = run_bench(&model, &frames, 0.35, 3).map_err(|e| e.to_string())?;
    let speedup = sparse.median_fps / dense.median_fps;
    let frac = sparse.mean_active_fraction;
    check(
        speedup >= 1.3 && (0.4..=0.6).contains(&frac),
        format!(
            "active fraction {frac:.3}, {:.3} fps vs {:.3} fps, speedup {speedup:.2}x",
            sparse.median_fps, dense.median_fps
        ),
    )
}

fn c11_monotonicity() -> Outcome {
    let thresholds: Vec<f64> = (0..=14).map(|i| i as f64 * 0.05).collect();
    let toy = ViTConfig::toy();
    let prep = toy_prep();
    let mut recs = SynthCorpus::toy(40, 11).generate().map_err(|e| e.to_string())?;
    recs.extend(SynthCorpus::toy(20, 22).generate().map_err(|e| e.to_string())?);
    let mut checked = 0;
    for rec in &recs {
        let frame = prep.normalized_frame(rec).map_err(|e| e.to_string())?;
        let mut prev = usize::MAX;
        for &t in &thresholds {
            let n = select_active(&frame, toy.patch_size, t).map_err(|e| e.to_string())?.len();
            if n > prev {
                return Err(format!("count rose from {prev} to {n} at threshold {t}"));
            }
            prev = n;
        }
        checked += 1;
    }
    check(true, format!("{checked} recordings × {} thresholds", thresholds.len()))
}

fn random_recording<R: Rng>(rng: &mut R) -> EventRecording {
    let (w, h) = (rng.gen_range(1..=640u16), rng.gen_range(1..=480u16));
    let n = rng.gen_range(0..500);
    let mut t = 0u64;
    let events = (0..n)
        .map(|_| {
            t += rng.gen_range(0..1000);
            Event {
                x: rng.gen_range(0..w),
                y: rng.gen_range(0..h),
                t,
                p: if rng.gen() { Polarity::Positive } else { Polarity::Negative },
            }
        })
        .collect();
    EventRecording::new(events, w, h, None).unwrap()
}

fn c12_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..100 {
        let rec = random_recording(&mut rng);
        let bytes = write_binary(&rec);
        if read_binary(&bytes).map_err(|e| e.to_string())? != rec || write_binary(&rec) != bytes {
            return Err(format!("EVT1 trial {i} differs"));
        }
    }
    for i in 0..100 {
        let toy = ViTConfig::toy();
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let cfg = ViTConfig {
            layers: rng.gen_range(1..=3),
            heads,
            head_dim: toy.dim / heads,
            num_classes: rng.gen_range(2..=10),
            ..toy
        };
        let model = VisionTransformer::init(cfg, rng.gen()).map_err(|e| e.to_string())?;
        let bytes = save_checkpoint(&cfg, model.params()).map_err(|e| e.to_string())?;
        let (c2, p2) = load_checkpoint(&bytes).map_err(|e| e.to_string())?;
        let same = c2 == cfg
            && model
                .params()
                .tensors()
                .iter()
                .zip(p2.tensors())
                .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        if !same || save_checkpoint(&c2, &p2).map_err(|e| e.to_string())? != bytes {
            return Err(format!("VITC trial {i} differs"));
        }
    }
    check(true, "100 EVT1 and 100 VITC trials bit-exact".into())
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { id: 1, name: "FLOPs coefficients", budget: secs(1), run: c1_coefficients },
        Criterion { id: 2, name: "attention/MLP crossover", budget: secs(1), run: c2_crossover },
        Criterion { id: 3, name: "MACs at half the patches", budget: secs(1), run: c3_mac_ratio },
        Criterion { id: 4, name: "dense MACs magnitude", budget: secs(1), run: c4_dense_macs },
        Criterion { id: 5, name: "analytic vs counted operations", budget: secs(10), run: c5_reconciliation },
        Criterion { id: 6, name: "voxel conservation", budget: secs(10), run: c6_conservation },
        Criterion { id: 7, name: "gradient checks", budget: secs(60), run: c7_gradients },
        Criterion { id: 8, name: "sparse/dense equivalence", budget: secs(10), run: c8_equivalence },
        Criterion { id: 9, name: "toy training", budget: secs(600), run: c9_training },
        Criterion { id: 10, name: "throughput at threshold 0.35", budget: secs(300), run: c10_throughput },
        Criterion { id: 11, name: "selection monotonicity", budget: secs(10), run: c11_monotonicity },
        Criterion { id: 12, name: "format round-trips", budget: secs(10), run: c12_round_trips },
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; exceeded {}s budget", c.budget.as_secs())),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:>2} {:<32} {:>8.2}s  {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
    }
    println!("{} failed", failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
