//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Tolerances and workload sizes are fixed constants below.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use skinnet::checkpoint::Checkpoint;
use skinnet::datasets::{class_weights_from_counts, synth_sample, Label, Manifest, Split};
use skinnet::imaging::{normalize, BinaryMask, RgbImage};
use skinnet::metrics::{dice, jaccard, MetricsReport};
use skinnet::param::tensor_checksum;
use skinnet::recnet::{Phase, RecConfig};
use skinnet::segnet::SegConfig;
use skinnet::training::{sgd_step, LearningRates, OptimizerState};
use skinnet::{gradsuite, imaging, rng, Group, RecModel32, SegModel32, Tape, Tensor32};

const GRAD_INPUTS_PER_CASE: usize = 5;
const GRAD_MAX_RUNTIME: Duration = Duration::from_secs(120);
const FREEZE_STEPS: usize = 5;
const FREEZE_MOMENTUM: f64 = 0.9;
const NORM_IMAGES: usize = 100;
const NORM_MEAN_TOL: f64 = 1e-5;
const NORM_STD_TOL: f64 = 1e-4;
const SHAPE_SIZES: usize = 50;
const METRIC_PAIRS: usize = 1000;
const DICE_IDENTITY_TOL: f64 = 1e-9;
const SEG_SEED: u64 = 7;
const SEG_TRAIN: usize = 200;
const SEG_VAL: usize = 40;
const SEG_EPOCHS: usize = 10;
const SEG_MIN_JACCARD: f64 = 0.80;
const SEG_RUNTIME_TARGET: Duration = Duration::from_secs(15 * 60);
const PRETRAIN_SEED: u64 = 11;
const CLS_SEED: u64 = 17;
const CLS_TRAIN: usize = 300;
const CLS_VAL: usize = 60;
const CLS_EPOCHS: usize = 5;
const CLS_MIN_ACCURACY: f64 = 0.90;
const CLS_PHASE2_SLACK: f64 = 0.02;
const WEIGHT_TOL: f64 = 1e-4;

type Outcome = Result<String, String>;

struct Suite {
    failures: usize,
}

impl Suite {
    fn report(&mut self, id: usize, title: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("PASS [{id}] {title}: {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL [{id}] {title}: {detail}");
            }
        }
    }
}

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs the CLI in-process and returns its stdout.
fn cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut argv = vec!["skinnet"];
    argv.extend_from_slice(args);
    let code = skinnet_cli::run_with_output(argv, &mut out);
    let text = String::from_utf8(out).map_err(|e| e.to_string())?;
    if code != 0 {
        return Err(format!("`skinnet {}` exited with {code}", args.join(" ")));
    }
    Ok(text)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

// 1 -------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let results = gradsuite::run(2024, GRAD_INPUTS_PER_CASE).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("non-empty suite");
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| format!("{}@{}", r.name, r.seed)).collect();
    let cases = results.len() / GRAD_INPUTS_PER_CASE;
    ensure(
        failed.is_empty() && elapsed < GRAD_MAX_RUNTIME,
        format!(
            "{cases} cases x {GRAD_INPUTS_PER_CASE} inputs, worst {} = {:.2e} (tol {:.0e}), {:.1}s (limit {}s){}",
            worst.name,
            worst.max_rel_error,
            gradsuite::TOLERANCE,
            elapsed.as_secs_f64(),
            GRAD_MAX_RUNTIME.as_secs(),
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(" ")) }
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn freeze_semantics() -> Outcome {
    let mut rec = RecModel32::build(RecConfig::default(), 5).map_err(|e| e.to_string())?;
    let batch = 4;
    let mut fulls = Vec::new();
    let mut crops = Vec::new();
    let mut labels = Vec::new();
    for i in 0..batch {
        let label = Label::ALL[i % 3];
        let sample = synth_sample(5, i as u64, label, skinnet::INPUT_SIZE);
        let crop = imaging::crop_from_mask(&sample.image, &sample.mask, imaging::DEFAULT_PAD_FRAC).map_err(|e| e.to_string())?;
        fulls.extend(imaging::preprocess(&sample.image, skinnet::INPUT_SIZE).data);
        crops.extend(imaging::preprocess(&crop, skinnet::INPUT_SIZE).data);
        labels.push(label.index());
    }
    let shape = vec![batch, 3, skinnet::INPUT_SIZE, skinnet::INPUT_SIZE];
    let full = Tensor32::new(shape.clone(), fulls).map_err(|e| e.to_string())?;
    let crop = Tensor32::new(shape, crops).map_err(|e| e.to_string())?;
    let lrs = LearningRates([1e-2, 1e-2, 1e-2, 1e-2]);

    let run = |rec: &mut RecModel32, phase: Phase| -> Result<(), String> {
        rec.set_phase(phase);
        let mut state = OptimizerState::new();
        for _ in 0..FREEZE_STEPS {
            let tape = Tape::new();
            let bound = rec.params().bind(&tape);
            let logits = rec
                .forward_logits(&bound, tape.constant(full.clone()), tape.constant(crop.clone()))
                .map_err(|e| e.to_string())?;
            let loss = logits.softmax_cross_entropy(&labels, &[1.0, 1.0, 1.0]).map_err(|e| e.to_string())?;
            tape.backward(loss).map_err(|e| e.to_string())?;
            rec.params_mut().accumulate_grads(&bound);
            sgd_step(rec.params_mut(), &mut state, &lrs, FREEZE_MOMENTUM).map_err(|e| e.to_string())?;
        }
        Ok(())
    };
    let snapshot = |rec: &RecModel32| rec.params().iter().map(|p| tensor_checksum(&p.tensor)).collect::<Vec<_>>();
    let last_two = |name: &str| {
        let n = RecConfig::default().num_blocks;
        name.contains(&format!(".block{}.", n - 1)) || name.contains(&format!(".block{}.", n - 2))
    };

    let before = snapshot(&rec);
    run(&mut rec, Phase::HeadOnly)?;
    let after1 = snapshot(&rec);
    let mut backbone_changed = 0;
    let mut head_changed = 0;
    for ((p, a), b) in rec.params().iter().zip(&before).zip(&after1) {
        match (p.group, a == b) {
            (Group::Head, false) => head_changed += 1,
            (g, false) if g.is_backbone() => backbone_changed += 1,
            _ => {}
        }
    }

    run(&mut rec, Phase::FineTuneLastTwo)?;
    let after2 = snapshot(&rec);
    let mut outside_changed = 0;
    let mut tuned_changed = 0;
    for ((p, a), b) in rec.params().iter().zip(&after1).zip(&after2) {
        let tunable = p.group == Group::Head || last_two(&p.name);
        match (tunable, a == b) {
            (false, false) => outside_changed += 1,
            (true, false) if p.group.is_backbone() => tuned_changed += 1,
            _ => {}
        }
    }
    ensure(
        backbone_changed == 0 && head_changed > 0 && outside_changed == 0 && tuned_changed > 0,
        format!(
            "phase 1 ({FREEZE_STEPS} steps, momentum {FREEZE_MOMENTUM}): {backbone_changed} backbone tensors changed, \
             {head_changed} head tensors changed; phase 2: {outside_changed} tensors outside head+last-two blocks changed, \
             {tuned_changed} last-two-block tensors changed"
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn normalization() -> Outcome {
    let mut rng = rng::stream(3, 0);
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for _ in 0..NORM_IMAGES {
        let (h, w) = (rng.gen_range(1..=64), rng.gen_range(2..=64));
        let mut px: Vec<u8> = (0..h * w * 3).map(|_| rng.gen()).collect();
        if px.iter().all(|&v| v == px[0]) {
            px[0] = px[0].wrapping_add(1);
        }
        let n = normalize(&RgbImage::new(h, w, px).map_err(|e| e.to_string())?);
        let (mean, std) = n.mean_std();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }
    let constant = normalize(&RgbImage::filled(9, 7, [120, 120, 120]));
    let zeros = constant.data.iter().all(|&v| v == 0.0);
    ensure(
        worst_mean <= NORM_MEAN_TOL && worst_std <= NORM_STD_TOL && zeros,
        format!(
            "{NORM_IMAGES} random images: max |mean| {worst_mean:.2e} (tol {NORM_MEAN_TOL:.0e}), \
             max |std-1| {worst_std:.2e} (tol {NORM_STD_TOL:.0e}); constant image all zeros: {zeros}"
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn shape_contract() -> Outcome {
    let model = SegModel32::build(SegConfig::default(), 1).map_err(|e| e.to_string())?;
    let mut rng = rng::stream(4, 0);
    let mut sizes = vec![(150, 150)];
    while sizes.len() < SHAPE_SIZES {
        sizes.push((rng.gen_range(16..=200), rng.gen_range(16..=200)));
    }
    let mut bad = Vec::new();
    for &(h, w) in &sizes {
        let x = Tensor32::zeros(vec![1, 3, h, w]);
        let y = model.infer(&x).map_err(|e| e.to_string())?;
        if y.shape() != [1, 1, h, w] {
            bad.push(format!("{h}x{w}->{:?}", y.shape()));
        }
    }
    ensure(bad.is_empty(), format!("{} sizes in [16,200] incl. 150x150, mismatches: {bad:?}", sizes.len()))
}

// 5 -------------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let mut rng = rng::stream(5, 0);
    let mut count_mismatch = 0;
    let mut worst_identity: f64 = 0.0;
    for _ in 0..METRIC_PAIRS {
        let (h, w) = (rng.gen_range(1..=24), rng.gen_range(1..=24));
        let (pa, pb) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let a = BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen_bool(pa)).collect()).map_err(|e| e.to_string())?;
        let b = BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen_bool(pb)).collect()).map_err(|e| e.to_string())?;
        let (mut inter, mut uni, mut na, mut nb) = (0usize, 0usize, 0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (a.get(y, x), b.get(y, x));
                inter += (u && v) as usize;
                uni += (u || v) as usize;
                na += u as usize;
                nb += v as usize;
            }
        }
        let j_ref = if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
        let d_ref = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        let (j, d) = (jaccard(&a, &b).map_err(|e| e.to_string())?, dice(&a, &b).map_err(|e| e.to_string())?);
        if j != j_ref || d != d_ref || j != jaccard(&b, &a).map_err(|e| e.to_string())? {
            count_mismatch += 1;
        }
        worst_identity = worst_identity.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    ensure(
        count_mismatch == 0 && worst_identity <= DICE_IDENTITY_TOL,
        format!(
            "{METRIC_PAIRS} random pairs: {count_mismatch} differ from pixel counting; \
             max |D-2J/(1+J)| {worst_identity:.1e} (tol {DICE_IDENTITY_TOL:.0e})"
        ),
    )
}

// 6 -------------------------------------------------------------------------

fn segmentation_benchmark(root: &Path) -> Outcome {
    let data = root.join("seg");
    let model = root.join("seg.skcn");
    let manifest = data.join("manifest.jsonl");
    let seed = SEG_SEED.to_string();
    cli(&["gen-synth", "--seed", &seed, "--out", s(&data), "--count", &SEG_TRAIN.to_string(), "--val", &SEG_VAL.to_string()])?;
    let t = Instant::now();
    let epochs = SEG_EPOCHS.to_string();
    cli(&["train-seg", "--seed", &seed, "--manifest", s(&manifest), "--out", s(&model), "--epochs", &epochs])?;
    let elapsed = t.elapsed();
    let out = cli(&["eval-seg", "--seg-model", s(&model), "--manifest", s(&manifest), "--split", "val"])?;
    let report: MetricsReport = serde_json::from_str(out.trim()).map_err(|e| e.to_string())?;
    let j = report.segmentation.ok_or("no segmentation report")?.mean_jaccard;
    ensure(
        j >= SEG_MIN_JACCARD && elapsed < SEG_RUNTIME_TARGET,
        format!(
            "seed {SEG_SEED}, {SEG_TRAIN}/{SEG_VAL} images, {SEG_EPOCHS} epochs: mean val Jaccard {j:.4} (min {SEG_MIN_JACCARD}), \
             training {:.0}s (target {}s)",
            elapsed.as_secs_f64(),
            SEG_RUNTIME_TARGET.as_secs()
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn accuracy(out: &str) -> Result<f64, String> {
    let r: MetricsReport = serde_json::from_str(out.trim()).map_err(|e| e.to_string())?;
    Ok(r.classification.ok_or("no classification report")?.accuracy)
}

fn classification_benchmark(root: &Path) -> Outcome {
    let seg = root.join("seg.skcn");
    if !seg.exists() {
        return Err("segmentation model from criterion 6 is missing".into());
    }
    let pre = root.join("pretrain");
    let data = root.join("cls");
    let (backbone, p1, p2) = (root.join("backbone.skcn"), root.join("phase1.skcn"), root.join("phase2.skcn"));
    let (train, val, epochs) = (CLS_TRAIN.to_string(), CLS_VAL.to_string(), CLS_EPOCHS.to_string());
    let manifest = data.join("manifest.jsonl");
    let pre_seed = PRETRAIN_SEED.to_string();
    let seed = CLS_SEED.to_string();
    cli(&["gen-synth", "--seed", &pre_seed, "--out", s(&pre), "--count", &train, "--val", &val])?;
    cli(&["gen-synth", "--seed", &seed, "--out", s(&data), "--count", &train, "--val", &val])?;
    let pre_manifest = pre.join("manifest.jsonl");
    cli(&[
        "pretrain-backbone", "--seed", &pre_seed, "--manifest", s(&pre_manifest), "--seg-model", s(&seg),
        "--out", s(&backbone), "--epochs", &epochs,
    ])?;
    cli(&[
        "train-cls", "--seed", &seed, "--manifest", s(&manifest), "--seg-model", s(&seg), "--phase", "1",
        "--init-backbone", s(&backbone), "--out", s(&p1), "--epochs", &epochs,
    ])?;
    let eval = |model: &Path| {
        cli(&["eval-cls", "--seg-model", s(&seg), "--rec-model", s(model), "--manifest", s(&manifest), "--split", "val"])
    };
    let acc1 = accuracy(&eval(&p1)?)?;
    cli(&[
        "train-cls", "--seed", &seed, "--manifest", s(&manifest), "--seg-model", s(&seg), "--phase", "2",
        "--rec-model", s(&p1), "--out", s(&p2), "--epochs", &epochs,
    ])?;
    let acc2 = accuracy(&eval(&p2)?)?;
    ensure(
        acc2 >= CLS_MIN_ACCURACY && acc2 >= acc1 - CLS_PHASE2_SLACK,
        format!(
            "{CLS_TRAIN}/{CLS_VAL} images, pre-train on seed {PRETRAIN_SEED}, {CLS_EPOCHS} epochs per stage: \
             phase-1 val accuracy {acc1:.4}, phase-2 val accuracy {acc2:.4} (min {CLS_MIN_ACCURACY}, \
             phase 2 ≥ phase 1 − {CLS_PHASE2_SLACK})"
        ),
    )
}

// 8 -------------------------------------------------------------------------

/// Small end-to-end pipeline; returns checkpoint bytes and classify output.
fn pipeline_run(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let config = dir.join("small.toml");
    std::fs::write(&config, "seg_base_filters = 4\nrec_head_units = 64\nepochs = 1\n").map_err(|e| e.to_string())?;
    let data = dir.join("data");
    let m = data.join("manifest.jsonl");
    let (seg, bb, p1, p2) = (dir.join("seg.skcn"), dir.join("bb.skcn"), dir.join("p1.skcn"), dir.join("p2.skcn"));
    let c = s(&config);
    cli(&["gen-synth", "--seed", "3", "--config", c, "--out", s(&data), "--count", "24", "--val", "6"])?;
    cli(&["train-seg", "--seed", "3", "--config", c, "--manifest", s(&m), "--out", s(&seg)])?;
    cli(&["pretrain-backbone", "--seed", "3", "--config", c, "--manifest", s(&m), "--seg-model", s(&seg), "--out", s(&bb)])?;
    cli(&[
        "train-cls", "--seed", "3", "--config", c, "--manifest", s(&m), "--seg-model", s(&seg), "--phase", "1",
        "--init-backbone", s(&bb), "--out", s(&p1),
    ])?;
    cli(&[
        "train-cls", "--seed", "3", "--config", c, "--manifest", s(&m), "--seg-model", s(&seg), "--phase", "2",
        "--rec-model", s(&p1), "--out", s(&p2),
    ])?;
    let manifest = Manifest::load(&m).map_err(|e| e.to_string())?;
    let image = manifest.resolve(&manifest.split(Split::Val)[0].image);
    let classify = cli(&["classify", "--seg-model", s(&seg), "--rec-model", s(&p2), "--image", s(&image)])?;
    let mut blobs = Vec::new();
    for p in [&seg, &bb, &p1, &p2] {
        blobs.push(std::fs::read(p).map_err(|e| e.to_string())?);
    }
    blobs.push(classify.into_bytes());
    Ok(blobs)
}

fn determinism(root: &Path) -> Outcome {
    let a = pipeline_run(&root.join("det_a"))?;
    let b = pipeline_run(&root.join("det_b"))?;
    let names = ["seg", "backbone", "phase1", "phase2", "classify output"];
    let differing: Vec<_> = names.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(n, _)| *n).collect();
    ensure(
        differing.is_empty(),
        format!(
            "two seeded runs (gen-synth → train-seg → pretrain → phase 1 → phase 2 → classify): {} artifacts compared, differing: {differing:?}",
            names.len()
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn checkpoint_round_trip(root: &Path) -> Outcome {
    let seg = SegModel32::build(SegConfig::default(), 9).map_err(|e| e.to_string())?;
    let rec = RecModel32::build(RecConfig::default(), 9).map_err(|e| e.to_string())?;
    let (sp, rp) = (root.join("rt_seg.skcn"), root.join("rt_rec.skcn"));
    seg.checkpoint().save(&sp).map_err(|e| e.to_string())?;
    rec.checkpoint().save(&rp).map_err(|e| e.to_string())?;
    let seg2 = SegModel32::from_checkpoint(&Checkpoint::load(&sp).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let rec2 = RecModel32::from_checkpoint(&Checkpoint::load(&rp).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let tensors_equal = seg.params().checksums() == seg2.params().checksums()
        && rec.params().checksums() == rec2.params().checksums()
        && seg.params().iter().zip(seg2.params().iter()).all(|(a, b)| a.tensor == b.tensor)
        && rec.params().iter().zip(rec2.params().iter()).all(|(a, b)| a.tensor == b.tensor);
    let sample = synth_sample(9, 0, Label::Nevus, skinnet::INPUT_SIZE);
    let x = imaging::preprocess(&sample.image, skinnet::INPUT_SIZE)
        .to_tensor::<f32>()
        .reshape(vec![1, 3, skinnet::INPUT_SIZE, skinnet::INPUT_SIZE])
        .map_err(|e| e.to_string())?;
    let seg_same = seg.infer(&x).map_err(|e| e.to_string())? == seg2.infer(&x).map_err(|e| e.to_string())?;
    let rec_same = rec.infer(&x, &x).map_err(|e| e.to_string())? == rec2.infer(&x, &x).map_err(|e| e.to_string())?;
    ensure(
        tensors_equal && seg_same && rec_same,
        format!(
            "{} + {} tensors bit-identical: {tensors_equal}; forward outputs identical: seg {seg_same}, rec {rec_same}",
            seg.params().len(),
            rec.params().len()
        ),
    )
}

// 10 ------------------------------------------------------------------------

fn class_weights() -> Outcome {
    let w = class_weights_from_counts([374, 1372, 254]).map_err(|e| e.to_string())?;
    let expected = [1.7825, 0.4859, 2.6247];
    let err = w.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(
        err <= WEIGHT_TOL,
        format!("counts 374/1372/254 → ({:.4}, {:.4}, {:.4}), max deviation {err:.1e} (tol {WEIGHT_TOL:.0e})", w[0], w[1], w[2]),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let mut suite = Suite { failures: 0 };
    suite.report(1, "gradient suite", gradient_suite());
    suite.report(2, "freeze semantics", freeze_semantics());
    suite.report(3, "normalization", normalization());
    suite.report(4, "segmentation shape contract", shape_contract());
    suite.report(5, "metric oracles", metric_oracles());
    suite.report(6, "synthetic segmentation benchmark", segmentation_benchmark(root));
    suite.report(7, "synthetic classification benchmark", classification_benchmark(root));
    suite.report(8, "determinism", determinism(root));
    suite.report(9, "checkpoint round-trip", checkpoint_round_trip(root));
    suite.report(10, "class weights", class_weights());
    println!("acceptance: {} of 10 criteria passed", 10 - suite.failures);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
