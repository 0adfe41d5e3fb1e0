//! `skinnet` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or model error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use skinnet::checkpoint::Checkpoint;
use skinnet::datasets::{gen_synthetic, Manifest, Split, SynthSpec};
use skinnet::imaging;
use skinnet::recnet::{Branch, Phase, RecConfig};
use skinnet::segnet::SegConfig;
use skinnet::training::{self, EpochRecord, SegLoss, TrainConfig};
use skinnet::{gradsuite, pipeline, RecModel32, SegModel32};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "skinnet", version, about = "Lesion segmentation and three-class classification")]
struct Cli {
    /// Seed for every random choice (initialization, shuffling, generation).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat TOML file with model and training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic lesion corpus (images, masks, manifest.jsonl).
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        /// Training images.
        #[arg(long)]
        count: usize,
        /// Validation images [default: count / 5].
        #[arg(long)]
        val: Option<usize>,
        #[arg(long, default_value_t = 0)]
        test: usize,
        #[arg(long, default_value_t = skinnet::INPUT_SIZE)]
        size: usize,
    },
    /// Train the segmentation network.
    TrainSeg {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a whole classifier and save its backbones for --init-backbone.
    PretrainBackbone {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seg_model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the classifier: phase 1 = head only, phase 2 = head + last two blocks.
    TrainCls {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seg_model: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        #[arg(long)]
        out: PathBuf,
        /// Backbone checkpoint loaded into both branches before training.
        #[arg(long)]
        init_backbone: Option<PathBuf>,
        /// Classifier to continue from (e.g. the phase-1 result).
        #[arg(long)]
        rec_model: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the predicted lesion mask of one image as PNG.
    PredictMask {
        #[arg(long)]
        seg_model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment, crop and classify one image; prints one JSON record.
    Classify {
        #[arg(long)]
        seg_model: PathBuf,
        #[arg(long)]
        rec_model: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Jaccard / Dice of the segmentation model on a split.
    EvalSeg {
        #[arg(long)]
        seg_model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Accuracy and confusion matrix of the full pipeline on a split.
    EvalCls {
        #[arg(long)]
        seg_model: PathBuf,
        #[arg(long)]
        rec_model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Run the 64-bit gradient-check suite.
    GradCheck {
        /// Seeded inputs per case.
        #[arg(long, default_value_t = 5)]
        inputs: usize,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Also append epoch records to this file.
    #[arg(long)]
    history: Option<PathBuf>,
}

/// Settings accepted in the `--config` file; everything is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seg_depth: Option<usize>,
    pub seg_base_filters: Option<usize>,
    pub rec_stem_filters: Option<usize>,
    pub rec_num_blocks: Option<usize>,
    pub rec_block_width: Option<usize>,
    pub rec_head_units: Option<usize>,
    pub rec_share_backbones: Option<bool>,
    pub lr_seg: Option<f64>,
    pub lr_head: Option<f64>,
    pub lr_finetune: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub class_weighting: Option<bool>,
    pub loss: Option<SegLoss>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn seg(&self) -> SegConfig {
        let d = SegConfig::default();
        SegConfig {
            depth: self.seg_depth.unwrap_or(d.depth),
            base_filters: self.seg_base_filters.unwrap_or(d.base_filters),
            ..d
        }
    }

    pub fn rec(&self) -> RecConfig {
        let d = RecConfig::default();
        RecConfig {
            stem_filters: self.rec_stem_filters.unwrap_or(d.stem_filters),
            num_blocks: self.rec_num_blocks.unwrap_or(d.num_blocks),
            block_width: self.rec_block_width.unwrap_or(d.block_width),
            head_units: self.rec_head_units.unwrap_or(d.head_units),
            share_backbones: self.rec_share_backbones.unwrap_or(d.share_backbones),
            ..d
        }
    }

    pub fn train(&self, seed: u64, epochs: Option<usize>) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            lr_seg: self.lr_seg.unwrap_or(d.lr_seg),
            lr_head: self.lr_head.unwrap_or(d.lr_head),
            lr_finetune: self.lr_finetune.or(d.lr_finetune),
            momentum: self.momentum.unwrap_or(d.momentum),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: epochs.or(self.epochs).unwrap_or(d.epochs),
            seed,
            class_weighting: self.class_weighting.unwrap_or(d.class_weighting),
            loss: self.loss.unwrap_or(d.loss),
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code. Command output goes to stdout, diagnostics to stderr.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    run_with_output(argv, &mut stdout.lock())
}

/// Like [`run_command`] with command output written to `out`.
pub fn run_with_output<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}

/// Prints epoch records to `out` and, optionally, a history file.
struct HistorySink<'a> {
    out: &'a mut dyn Write,
    file: Option<BufWriter<File>>,
    error: Option<std::io::Error>,
}

impl<'a> HistorySink<'a> {
    fn new(out: &'a mut dyn Write, path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => Some(BufWriter::new(
                File::create(p).with_context(|| format!("creating history file {}", p.display()))?,
            )),
            None => None,
        };
        Ok(Self { out, file, error: None })
    }

    fn record(&mut self, r: &EpochRecord) {
        let line = r.to_json();
        let mut res = writeln!(self.out, "{line}").and_then(|_| self.out.flush());
        if let Some(f) = &mut self.file {
            res = res.and_then(|_| writeln!(f, "{line}"));
        }
        if let Err(e) = res {
            self.error.get_or_insert(e);
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(e) = self.error {
            return Err(e).context("writing history");
        }
        if let Some(mut f) = self.file {
            f.flush().context("writing history")?;
        }
        Ok(())
    }
}

fn load_seg(path: &Path) -> Result<SegModel32> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading segmentation model {}", path.display()))?;
    SegModel32::from_checkpoint(&ckpt).with_context(|| format!("segmentation model {}", path.display()))
}

fn load_rec(path: &Path) -> Result<RecModel32> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading classifier {}", path.display()))?;
    RecModel32::from_checkpoint(&ckpt).with_context(|| format!("classifier {}", path.display()))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path).with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let file_cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::GenSynth { out: dir, count, val, test, size } => {
            let spec = SynthSpec { seed, train: count, val: val.unwrap_or(count / 5), test, size, ..SynthSpec::default() };
            let m = gen_synthetic(&spec, &dir)?;
            let counts = m.class_counts(Split::Train);
            writeln!(
                out,
                "{}",
                serde_json::json!({
                    "manifest": dir.join("manifest.jsonl"),
                    "train": m.split_count(Split::Train),
                    "val": m.split_count(Split::Val),
                    "test": m.split_count(Split::Test),
                    "train_class_counts": counts,
                })
            )?;
        }
        Command::TrainSeg { manifest, out: dst, run } => {
            let m = load_manifest(&manifest)?;
            let cfg = file_cfg.train(seed, run.epochs);
            let mut model = SegModel32::build(file_cfg.seg(), seed)?;
            let mut sink = HistorySink::new(out, run.history.as_deref())?;
            training::train_seg_with(&mut model, &m, &cfg, &mut |r| sink.record(r))?;
            sink.finish()?;
            save(&model.checkpoint(), &dst)?;
        }
        Command::PretrainBackbone { manifest, seg_model, out: dst, run } => {
            let m = load_manifest(&manifest)?;
            let seg = load_seg(&seg_model)?;
            let cfg = file_cfg.train(seed, run.epochs);
            let mut rec = RecModel32::build(file_cfg.rec(), seed)?;
            let mut sink = HistorySink::new(out, run.history.as_deref())?;
            training::pretrain_backbone(&mut rec, &seg, &m, &cfg, &mut |r| sink.record(r))?;
            sink.finish()?;
            save(&rec.backbone_checkpoint(), &dst)?;
        }
        Command::TrainCls { manifest, seg_model, phase, out: dst, init_backbone, rec_model, run } => {
            let m = load_manifest(&manifest)?;
            let seg = load_seg(&seg_model)?;
            let cfg = file_cfg.train(seed, run.epochs);
            let mut rec = match &rec_model {
                Some(p) => load_rec(p)?,
                None => RecModel32::build(file_cfg.rec(), seed)?,
            };
            if let Some(p) = &init_backbone {
                let ckpt = Checkpoint::load(p).with_context(|| format!("loading backbone {}", p.display()))?;
                let report = rec.load_backbone_checkpoint(&ckpt, Branch::Both)?;
                if report.loaded.is_empty() {
                    bail!("{} contains no usable backbone tensors", p.display());
                }
                eprintln!("backbone: {} tensors loaded, {} skipped", report.loaded.len(), report.skipped.len());
            }
            let phase = if phase == 1 { Phase::HeadOnly } else { Phase::FineTuneLastTwo };
            let mut sink = HistorySink::new(out, run.history.as_deref())?;
            training::train_cls_with(&mut rec, &seg, &m, &cfg, phase, &mut |r| sink.record(r))?;
            sink.finish()?;
            save(&rec.checkpoint(), &dst)?;
        }
        Command::PredictMask { seg_model, image, out: dst } => {
            let seg = load_seg(&seg_model)?;
            let img = imaging::load_image(&image)?;
            let mask = seg.predict_mask(&img)?;
            std::fs::write(&dst, imaging::encode_mask_png(&mask)).with_context(|| format!("writing {}", dst.display()))?;
        }
        Command::Classify { seg_model, rec_model, image } => {
            let seg = load_seg(&seg_model)?;
            let rec = load_rec(&rec_model)?;
            let img = imaging::load_image(&image)?;
            let result = pipeline::classify_image(&seg, &rec, &img)?;
            writeln!(out, "{}", result.to_json())?;
        }
        Command::EvalSeg { seg_model, manifest, split } => {
            let seg = load_seg(&seg_model)?;
            let m = load_manifest(&manifest)?;
            writeln!(out, "{}", training::evaluate_seg(&seg, &m, split)?.to_json())?;
        }
        Command::EvalCls { seg_model, rec_model, manifest, split } => {
            let seg = load_seg(&seg_model)?;
            let rec = load_rec(&rec_model)?;
            let m = load_manifest(&manifest)?;
            writeln!(out, "{}", training::evaluate_cls(&rec, &seg, &m, split)?.to_json())?;
        }
        Command::GradCheck { inputs } => {
            let results = gradsuite::run(seed, inputs)?;
            let failed = results.iter().filter(|r| !r.passed()).count();
            for r in &results {
                writeln!(out, "{}", serde_json::to_string(r)?)?;
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks exceed {}", results.len(), gradsuite::TOLERANCE);
            }
        }
    }
    Ok(())
}
