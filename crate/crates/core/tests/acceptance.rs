//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Runs without the libtest harness so the PASS/FAIL lines are always
//! printed; the process exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssca::attribution::{
    audit_greedy, brute_force_best_set, counterfactual_utility, greedy_counterfactual,
    select_counter_target, SearchConfig, UtilityWeights,
};
use ssca::augment::{build_donor_pool, Guidance};
use ssca::imaging::{
    composite, mask_delete, mask_insert, partition_grid, Baseline, Image, RegionGrid, RegionMask,
};
use ssca::pipeline::{
    corrupt_split, evaluate, evaluate_corruptions, flip_rate, train_erm, train_ssca, EvalReport,
    NoopObserver, SscaConfig, TrainConfig,
};
use ssca::scorer::{
    FnScorer, MockAreaScorer, MockRegionWeightScorer, ScoreVector, Scorer, ScorerInfo,
};
use ssca::testbed::{generate, CorruptionSpec, Dataset, ShortcutDatasetConfig, SplitName};
use ssca::tinynet::{Arch, LayerParams, TinyNetParams};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs() < limit_s, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn random_image(h: usize, w: usize, c: usize, lo: f32, rng: &mut ChaCha8Rng) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(lo..1.0)).collect()).unwrap()
}

/// Smooth, non-modular three-class scorer over a random pixel weighting.
fn logistic_scorer(h: usize, w: usize, c: usize, seed: u64) -> impl Scorer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let info = ScorerInfo {
        num_classes: 3,
        expected_height: h,
        expected_width: w,
        expected_channels: c,
    };
    FnScorer::new(info, move |img: &Image| {
        let z: f64 = img.data().iter().zip(&weights).map(|(&v, &w)| f64::from(v) * w).sum();
        ScoreVector::from_logits(vec![z, -z, 0.3 * z * z]).unwrap()
    })
}

/// Weights in multiples of 1/1024 summing to exactly 1, so modular utilities
/// carry no rounding and brute-force comparisons can be exact.
fn dyadic_weights(m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cuts: Vec<u32> = (0..m - 1).map(|_| rng.random_range(0..=1024)).collect();
    cuts.sort_unstable();
    let mut prev = 0;
    let mut out = Vec::with_capacity(m);
    for c in cuts.into_iter().chain([1024]) {
        out.push(f64::from(c - prev) / 1024.0);
        prev = c;
    }
    out
}

fn greedy_correctness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut steps = 0;
    let net = TinyNetParams::init(Arch::default_for(16, 16, 3, 4), 3).unwrap();
    for i in 0..200u64 {
        let (result, audit) = if i % 2 == 0 {
            let img = random_image(16, 16, 3, 0.0, &mut rng);
            let sv = net.score_batch(std::slice::from_ref(&img)).unwrap().remove(0);
            let y_gt = (i as usize / 2) % 4;
            let y_cf = select_counter_target(&sv, y_gt).unwrap();
            let cfg = SearchConfig {
                grid_rows: 4,
                grid_cols: 4,
                tau_cf: rng.random_range(0.3..=1.0),
                ..SearchConfig::default()
            };
            let r = greedy_counterfactual(&net, &img, y_gt, y_cf, &cfg).unwrap();
            let a = audit_greedy(&net, &img, &r).unwrap();
            (r, a)
        } else {
            let s = logistic_scorer(6, 6, 1, i);
            let img = random_image(6, 6, 1, 0.0, &mut rng);
            let cfg = SearchConfig {
                grid_rows: 3,
                grid_cols: 3,
                budget_k: Some(rng.random_range(1..=9)),
                tau_cf: rng.random_range(0.0..=1.0),
                weights: UtilityWeights {
                    lambda1: rng.random_range(0.0..3.0),
                    lambda2: rng.random_range(0.1..3.0),
                },
                ..SearchConfig::default()
            };
            let r = greedy_counterfactual(&s, &img, 0, 1, &cfg).unwrap();
            let a = audit_greedy(&s, &img, &r).unwrap();
            (r, a)
        };
        steps += result.steps.len();
        ensure(audit.is_none(), || format!("search {i}: step {audit:?} is beaten by another candidate"))?;
    }

    let mut brute = 0;
    for gh in 1..=3usize {
        for gw in 1..=3usize {
            let m = gh * gw;
            if m < 2 {
                continue;
            }
            for _ in 0..6 {
                let weights = dyadic_weights(m, &mut rng);
                let grid = partition_grid(6, 6, gh, gw).unwrap();
                let s = MockRegionWeightScorer::simple(grid.clone(), weights.clone(), 1).unwrap();
                let grid = Arc::new(grid);
                let img = Image::filled(6, 6, 1, 0.5).unwrap();
                let cfg = SearchConfig {
                    grid_rows: gh,
                    grid_cols: gw,
                    budget_k: Some(m),
                    tau_cf: 1.0,
                    ..SearchConfig::default()
                };
                let r = greedy_counterfactual(&s, &img, 0, 1, &cfg).unwrap();
                for k in 1..=m {
                    let (set, f) = brute_force_best_set(
                        &s,
                        &img,
                        Arc::clone(&grid),
                        0,
                        1,
                        &UtilityWeights::default(),
                        &Baseline::zero(),
                        k,
                    )
                    .unwrap();
                    let mut prefix = r.ordered_regions[..k].to_vec();
                    prefix.sort_unstable();
                    ensure(prefix == set && r.steps[k - 1].utility == f, || {
                        format!("{gh}x{gw} weights {weights:?}: prefix {prefix:?} vs optimum {set:?} at k={k}")
                    })?;
                    brute += 1;
                }
            }
        }
    }
    within(t.elapsed(), 30)?;
    Ok(format!(
        "200 searches, {steps} audited steps, {brute} brute-force prefixes exact ({:.1}s)",
        t.elapsed().as_secs_f64()
    ))
}

fn utility_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = UtilityWeights::default();
    let img = random_image(12, 12, 3, 0.05, &mut rng);
    let scorer = MockAreaScorer::new(0, 1, (12, 12, 3), Baseline::zero()).unwrap();
    let grid = Arc::new(partition_grid(12, 12, 4, 4).unwrap());
    let (empty, _) =
        counterfactual_utility(&scorer, &img, &RegionMask::empty(Arc::clone(&grid)), 0, 1, &w, &Baseline::zero())
            .unwrap();
    let (full, _) =
        counterfactual_utility(&scorer, &img, &RegionMask::full(Arc::clone(&grid)), 0, 1, &w, &Baseline::zero())
            .unwrap();
    ensure(empty == 0.0, || format!("F(empty) = {empty}"))?;
    let expect = 2.0 * (w.lambda1 + w.lambda2);
    ensure(full == expect, || format!("F(V) = {full}, expected {expect}"))?;

    let mut worst = 0.0f64;
    let mut records = 0;
    for seed in 0..50u64 {
        let s = logistic_scorer(8, 8, 1, 100 + seed);
        let img = random_image(8, 8, 1, 0.0, &mut rng);
        let cfg = SearchConfig {
            grid_rows: 4,
            grid_cols: 4,
            budget_k: Some(8),
            tau_cf: 1.0,
            weights: UtilityWeights {
                lambda1: rng.random_range(0.0..2.0),
                lambda2: rng.random_range(0.1..2.0),
            },
            ..SearchConfig::default()
        };
        let r = greedy_counterfactual(&s, &img, 0, 1, &cfg).unwrap();
        for st in &r.steps {
            let c = st.confidences;
            let by_hand = cfg.weights.lambda1 * c.f_cf_del
                + cfg.weights.lambda1 * (1.0 - c.f_cf_ins)
                + cfg.weights.lambda2 * (1.0 - c.f_gt_del)
                + cfg.weights.lambda2 * c.f_gt_ins;
            worst = worst.max((st.utility - by_hand).abs());
            worst = worst.max((st.utility - st.recompute_utility(&cfg.weights)).abs());
            records += 1;
        }
    }
    ensure(worst <= 1e-12, || format!("step total differs from its confidences by {worst:e}"))?;
    Ok(format!("F(empty)=0, F(V)={full}; {records} step records within {worst:e}"))
}

fn fd_relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    // The default recipe ends in a global mean pool, so its parameter count
    // does not depend on the input size; a small input keeps this fast.
    let arch = Arch::default_for(16, 16, 3, 4);
    let net = TinyNetParams::init(arch.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for batch_id in 0..3 {
        let batch: Vec<Image> = (0..2).map(|_| random_image(16, 16, 3, 0.0, &mut rng)).collect();
        let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..4)).collect();
        let analytic = net.backward(&batch, &labels).unwrap().flat();
        let layers = net.layers().to_vec();
        let loss_with = |l: usize, bias: bool, j: usize, delta: f64| {
            let mut ls: Vec<LayerParams> = layers.clone();
            if bias {
                ls[l].bias[j] += delta;
            } else {
                ls[l].weight[j] += delta;
            }
            TinyNetParams::from_parts(arch.clone(), ls, 11)
                .unwrap()
                .mean_loss(&batch, &labels)
                .unwrap()
        };
        let mut idx = 0;
        for (l, p) in layers.iter().enumerate() {
            for (bias, len) in [(false, p.weight.len()), (true, p.bias.len())] {
                for j in 0..len {
                    let numeric = (loss_with(l, bias, j, h) - loss_with(l, bias, j, -h)) / (2.0 * h);
                    let rel = fd_relative_error(analytic[idx], numeric);
                    ensure(rel < 1e-4, || {
                        format!(
                            "batch {batch_id} param {idx}: analytic {} numeric {numeric} (rel {rel:e})",
                            analytic[idx]
                        )
                    })?;
                    worst = worst.max(rel);
                    idx += 1;
                    checked += 1;
                }
            }
        }
        ensure(idx == net.param_count(), || format!("checked {idx} of {} parameters", net.param_count()))?;
    }
    within(t.elapsed(), 60)?;
    Ok(format!(
        "{checked} parameter checks over 3 batches, max relative error {worst:.2e} ({:.1}s)",
        t.elapsed().as_secs_f64()
    ))
}

fn masking_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let h = rng.random_range(1..=24);
        let w = rng.random_range(1..=24);
        let c = rng.random_range(1..=4);
        let gh = rng.random_range(1..=h.min(8));
        let gw = rng.random_range(1..=w.min(8));
        let grid: Arc<RegionGrid> = Arc::new(partition_grid(h, w, gh, gw).unwrap());
        let img = random_image(h, w, c, 0.0, &mut rng);
        let donor = random_image(h, w, c, 0.0, &mut rng);
        let ids: Vec<usize> = (0..grid.len()).filter(|_| rng.random_bool(0.4)).collect();
        let mask = RegionMask::from_ids(Arc::clone(&grid), ids).unwrap();
        let zero = Baseline::zero();
        let fail = |what: &str| format!("case {case} ({h}x{w}x{c}, grid {gh}x{gw}): {what}");

        ensure(composite(&img, &donor, &RegionMask::empty(Arc::clone(&grid))).unwrap() == img, || {
            fail("composite with an empty mask changed the image")
        })?;
        ensure(composite(&img, &donor, &RegionMask::full(Arc::clone(&grid))).unwrap() == donor, || {
            fail("composite with a full mask is not the donor")
        })?;
        let del = mask_delete(&img, &mask, &zero).unwrap();
        let ins = mask_insert(&img, &mask, &zero).unwrap();
        let sum_ok = del.data().iter().zip(ins.data()).zip(img.data()).all(|((a, b), v)| a + b == *v);
        ensure(sum_ok, || fail("delete + insert differs from the image"))?;

        let base = Baseline::per_channel((0..c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let del_b = mask_delete(&img, &mask, &base).unwrap();
        let ins_b = mask_insert(&img, &mask, &base).unwrap();
        let mixed = composite(&img, &donor, &mask).unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = mask.contains(grid.cell_of(y, x).unwrap());
                for ch in 0..c {
                    let (v, d, b) = (img.get(y, x, ch), donor.get(y, x, ch), base.value(ch));
                    let ok = if inside {
                        mixed.get(y, x, ch) == d && del_b.get(y, x, ch) == b && ins_b.get(y, x, ch) == v
                    } else {
                        mixed.get(y, x, ch) == v && del_b.get(y, x, ch) == v && ins_b.get(y, x, ch) == b
                    };
                    ensure(ok, || fail(&format!("pixel ({y}, {x}, {ch}) has the wrong source")))?;
                }
            }
        }
    }
    Ok("1000 random instances: empty/full composite, complementarity, provenance exact".into())
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ssca"));
    cmd.env_remove("SSCA_THREADS");
    cmd
}

fn run_cli(cwd: &Path, args: &[&str]) -> Result<String, String> {
    let out = bin().args(args).current_dir(cwd).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// A reduced testbed so the command-line checks stay quick.
const SMALL_RUN: &str = r#"{
  "version": 1,
  "dataset": {"train_per_class": 40, "test_per_class": 20, "donor_count": 16, "part_contrast": 0.6, "seed": 21},
  "train": {"epochs": 10, "learning_rate": 0.01, "seed": 8},
  "ssca": {"warmup_epochs": 1}
}"#;

fn degeneracy_equivalence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    std::fs::write(d.join("run.json"), SMALL_RUN).unwrap();
    run_cli(d, &["gen-data", "-c", "run.json", "-o", "data"])?;
    let erm = run_cli(d, &["train", "-c", "run.json", "--mode", "erm", "--data", "data", "-o", "erm"])?;
    let ssca = run_cli(
        d,
        &["train", "-c", "run.json", "--mode", "ssca", "--data", "data", "-o", "ssca", "--tau-aug", "1.0"],
    )?;
    let a = std::fs::read(d.join("erm/params.bin")).unwrap();
    let b = std::fs::read(d.join("ssca/params.bin")).unwrap();
    ensure(a == b && erm == ssca, || format!("params differ: erm {erm}, ssca {ssca}"))?;
    let mined = run_cli(
        d,
        &["train", "-c", "run.json", "--mode", "ssca", "--data", "data", "-o", "mined", "--tau-aug", "0"],
    )?;
    ensure(mined != erm, || "mining with tau_aug = 0 left the parameters unchanged".into())?;
    Ok(format!("params.bin bit-identical ({} bytes, sha256 {})", a.len(), &erm[..12]))
}

fn default_testbed(seed: u64) -> (ShortcutDatasetConfig, Dataset) {
    let cfg = ShortcutDatasetConfig {
        seed,
        ..ShortcutDatasetConfig::default()
    };
    assert_eq!(cfg.num_classes, 4);
    assert_eq!(cfg.p_spurious, 0.95);
    assert_eq!(cfg.train_per_class * cfg.num_classes, 2000);
    let ds = generate(&cfg).unwrap();
    (cfg, ds)
}

fn accuracy(net: &TinyNetParams, ds: &Dataset, split: SplitName) -> f64 {
    let s = ds.split(split);
    evaluate(net, &s.images, &s.labels).unwrap()
}

/// Smallest mean OOD-decorrelated gain of SS-CA over ERM accepted, in
/// accuracy points. Only the direction is required until a positive
/// five-seed measurement exists to pin a margin below.
const OOD_GAIN_FLOOR: f64 = 0.0;

fn closed_loop_debiasing() -> Outcome {
    let mut rows = Vec::new();
    let mut slowest = 0.0f64;
    for seed in 0..5u64 {
        let t = Instant::now();
        let (cfg, ds) = default_testbed(seed);
        let (h, w, c) = cfg.image_dims();
        let arch = Arch::default_for(h, w, c, cfg.num_classes);
        let tc = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let train = ds.split(SplitName::Train);
        let erm = train_erm(train, &arch, &tc, &mut NoopObserver).unwrap();
        let pool = build_donor_pool(ds.donors.clone(), seed).unwrap();
        let ssca = train_ssca(train, &arch, &tc, &SscaConfig::default(), &pool, &mut NoopObserver).unwrap();
        let row = [
            accuracy(&erm.params, &ds, SplitName::TestId),
            accuracy(&erm.params, &ds, SplitName::TestOodDecorrelated),
            accuracy(&ssca.params, &ds, SplitName::TestId),
            accuracy(&ssca.params, &ds, SplitName::TestOodDecorrelated),
        ];
        let secs = t.elapsed().as_secs_f64();
        slowest = slowest.max(secs);
        println!(
            "    seed {seed}: ERM id {:.2} ood {:.2} | SS-CA id {:.2} ood {:.2} ({secs:.0}s)",
            row[0], row[1], row[2], row[3]
        );
        rows.push(row);
    }
    let mean = |i: usize| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64;
    let (erm_id, erm_ood, ss_id, ss_ood) = (mean(0), mean(1), mean(2), mean(3));
    let summary = format!(
        "mean ERM id {erm_id:.2} ood {erm_ood:.2} | SS-CA id {ss_id:.2} ood {ss_ood:.2}; \
         ood gain {:+.2}, id change {:+.2}; slowest seed {slowest:.0}s",
        ss_ood - erm_ood,
        ss_id - erm_id
    );
    ensure(ss_ood > erm_ood && ss_ood - erm_ood >= OOD_GAIN_FLOOR, || {
        format!("OOD-decorrelated gain below floor {OOD_GAIN_FLOOR}: {summary}")
    })?;
    ensure(ss_id >= erm_id - 1.0, || format!("ID regression above 1 point: {summary}"))?;
    Ok(summary)
}

fn flip_behavior() -> Outcome {
    let (cfg, ds) = default_testbed(0);
    let (h, w, c) = cfg.image_dims();
    let arch = Arch::default_for(h, w, c, cfg.num_classes);
    let erm = train_erm(ds.split(SplitName::Train), &arch, &TrainConfig::default(), &mut NoopObserver).unwrap();
    let test = ds.split(SplitName::TestId);
    let search = SearchConfig::default();
    ensure(search.budget().unwrap() == 13, || "default budget is not ceil(49 / 4)".into())?;
    let greedy = flip_rate(&erm.params, &test.images, &test.labels, &search, 200, 0, Guidance::Counterfactual)
        .unwrap();
    let random =
        flip_rate(&erm.params, &test.images, &test.labels, &search, 200, 0, Guidance::Random).unwrap();
    ensure(greedy.n == 200 && random.n == 200, || format!("only {} correctly classified images", greedy.n))?;
    ensure(greedy.indices == random.indices, || "strategies saw different images".into())?;
    let (g, r) = (greedy.ci95.unwrap(), random.ci95.unwrap());
    let summary = format!(
        "greedy {:.3} [{:.3}, {:.3}] vs random {:.3} [{:.3}, {:.3}] over 200 images",
        greedy.rate.unwrap(),
        g[0],
        g[1],
        random.rate.unwrap(),
        r[0],
        r[1]
    );
    ensure(g[0] > r[1], || format!("intervals overlap: {summary}"))?;
    Ok(summary)
}

fn corruption_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    std::fs::write(d.join("run.json"), SMALL_RUN).unwrap();
    run_cli(d, &["gen-data", "-c", "run.json", "-o", "data"])?;
    run_cli(d, &["train", "-c", "run.json", "--mode", "erm", "--data", "data", "-o", "a"])?;
    run_cli(d, &["train", "-c", "run.json", "--mode", "erm", "--data", "data", "-o", "b", "--seed", "9"])?;
    run_cli(d, &["eval", "-c", "run.json", "--params", "a/params.bin", "--data", "data", "-o", "a.json"])?;
    run_cli(d, &["eval", "-c", "run.json", "--params", "b/params.bin", "--data", "data", "-o", "b.json"])?;
    let read = |name: &str| -> EvalReport { serde_json::from_slice(&std::fs::read(d.join(name)).unwrap()).unwrap() };
    let (a, b) = (read("a.json"), read("b.json"));
    let names: Vec<&str> = a.corruptions.keys().map(String::as_str).collect();
    let mut expected = vec![
        "brightness",
        "contrast",
        "gaussian_blur",
        "gaussian_noise",
        "horizontal_flip",
        "vertical_flip",
    ];
    expected.sort_unstable();
    ensure(names == expected, || format!("corruption metrics {names:?}"))?;
    ensure(a.corruptions.keys().eq(b.corruptions.keys()), || "models report different corruptions".into())?;
    ensure(a.seeds[2] == b.seeds[2] && a.params_hash != b.params_hash, || {
        format!("corruption seeds {} vs {}", a.seeds[2], b.seeds[2])
    })?;

    // Same seed, same corrupted inputs, whichever model is evaluated.
    let (ds, _) = ssca::testbed::load_dataset(&d.join("data")).unwrap();
    let test = ds.split(SplitName::TestId);
    for spec in CorruptionSpec::defaults() {
        ensure(corrupt_split(&test.images, &spec, a.seeds[2]) == corrupt_split(&test.images, &spec, b.seeds[2]), || {
            format!("{} inputs differ between paired runs", spec.name())
        })?;
    }

    let net = ssca::tinynet::io::load_params(&d.join("a/params.bin")).unwrap();
    let clean = evaluate(&net, &test.images, &test.labels).unwrap();
    let identities = [
        CorruptionSpec::GaussianNoise { sigma: 0.0 },
        CorruptionSpec::GaussianBlur { sigma: 0.0 },
        CorruptionSpec::Brightness { delta: 0.0 },
        CorruptionSpec::Contrast { factor: 1.0 },
    ];
    for row in evaluate_corruptions(&net, &test.images, &test.labels, &identities, 5).unwrap() {
        ensure(row.accuracy == clean, || format!("identity {} gives {} vs clean {clean}", row.name, row.accuracy))?;
    }
    ensure(a.splits["test_id"] == clean, || "report clean accuracy differs from recomputation".into())?;
    ensure(clean > 50.0, || format!("clean accuracy {clean} is too close to chance to be informative"))?;
    Ok(format!("six metrics, paired seed {}, identities equal clean {clean:.2}", a.seeds[2]))
}

fn end_to_end_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    std::fs::write(d.join("run.json"), SMALL_RUN).unwrap();
    let artifacts = ["data/meta.json", "model/params.bin", "model/train.json", "model/loss.csv", "report.json"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let data_hash = run_cli(d, &["gen-data", "-c", "run.json", "-o", "data"])?;
        let params_hash = run_cli(
            d,
            &["train", "-c", "run.json", "--mode", "ssca", "--data", "data", "-o", "model", "--tau-aug", "0"],
        )?;
        run_cli(
            d,
            &["eval", "-c", "run.json", "--params", "model/params.bin", "--data", "data", "-o", "report.json", "--flip-rate", "8"],
        )?;
        let bytes: Vec<Vec<u8>> = artifacts.iter().map(|p| std::fs::read(d.join(p)).unwrap()).collect();
        runs.push((data_hash, params_hash, bytes));
    }
    let manifest: ssca::cli::TrainManifest =
        serde_json::from_slice(&std::fs::read(d.join("model/train.json")).unwrap()).unwrap();
    ensure(manifest.mining.kept > 0, || "no refilled samples were trained on".into())?;
    ensure(runs[0].0 == runs[1].0, || "dataset hashes differ".into())?;
    ensure(runs[0].1 == runs[1].1, || "parameter hashes differ".into())?;
    for (i, name) in artifacts.iter().enumerate() {
        ensure(runs[0].2[i] == runs[1].2[i], || format!("{name} differs between runs"))?;
    }
    Ok(format!("dataset {}, params {}, {} artifacts byte-identical", &runs[0].0[..12], &runs[0].1[..12], artifacts.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 greedy correctness", greedy_correctness),
        ("2 utility arithmetic", utility_arithmetic),
        ("3 gradient check", gradient_check),
        ("4 masking identities", masking_identities),
        ("5 degeneracy equivalence", degeneracy_equivalence),
        ("6 closed-loop debiasing", closed_loop_debiasing),
        ("7 flip behavior", flip_behavior),
        ("8 corruption harness", corruption_harness),
        ("9 end-to-end reproducibility", end_to_end_reproducibility),
    ];
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = 0;
    for (name, check) in criteria {
        if let Some(sel) = &only {
            if !sel.split(',').any(|s| name.starts_with(s.trim())) {
                continue;
            }
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
