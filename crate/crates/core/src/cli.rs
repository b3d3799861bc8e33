//! Command-line workflows: dataset synthesis, training, evaluation and probes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::datamodel::{load_dataset, save_dataset, synth_generate, SemiPairedDataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{
    content_distance_probe, evaluate_segmentation, evaluate_translation, interpolate_style, interpolation_values, mean_std,
    ssim, style_statistics, write_png_grid, DEFAULT_INTERP_DIM, DEFAULT_INTERP_HI, DEFAULT_INTERP_LO, DEFAULT_INTERP_STEPS,
};
use crate::hash::config_hash;
use crate::nn::Model;
use crate::trainer::{load_checkpoint, train, ModelMeta, Predictor, TrainConfig, TrainOutput, BEST_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Debug, Parser)]
#[command(name = "semipair", version, about = "Multi-modal segmentation from semi-paired images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic semi-paired dataset with analytic ground truth.
    Synth(SynthArgs),
    /// Train the model with the two-step curriculum.
    Train(TrainArgs),
    /// Segmentation Dice per region and modality.
    EvalSeg(EvalArgs),
    /// Translation SSIM against analytic targets.
    EvalTrans(EvalArgs),
    /// Translate one subject's image into another modality.
    Translate(TranslateArgs),
    /// Sweep one style dimension and write an image grid.
    Interpolate(InterpolateArgs),
    /// Style-code statistics and the content-distance probe.
    Stats(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with SynthSpec fields; flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Number of paired training subjects (0 gives a fully unpaired set).
    #[arg(long)]
    pub paired: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, env = "SEMIPAIR_SEED")]
    pub seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth` (or any manifest dataset).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with TrainConfig fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs_step1: Option<usize>,
    #[arg(long)]
    pub epochs_step2: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_init: Option<f64>,
    #[arg(long)]
    pub lr_flat_epochs: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long, env = "SEMIPAIR_SEED")]
    pub seed: Option<u64>,
    /// Train one run per seed into `<out>/seed_<s>` and report mean ± std on the test split.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Vec<u64>,
    /// Drop the content consistency loss.
    #[arg(long)]
    pub no_content_consistency: bool,
    /// Drop the supervised translation loss.
    #[arg(long)]
    pub no_translation_loss: bool,
    /// Run intra- and inter-modality updates in every epoch.
    #[arg(long)]
    pub end_to_end: bool,
    /// Train only the content encoder and segmentation decoder.
    #[arg(long)]
    pub no_disentanglement: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Directory for JSON and text reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "SEMIPAIR_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub subject: String,
    /// Target modality name.
    #[arg(long)]
    pub target: String,
    /// Source modality name; defaults to the subject's first available one.
    #[arg(long)]
    pub source: Option<String>,
    /// Output PNG: source, translation, and target when known.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "SEMIPAIR_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Subjects to probe (their first available modality); defaults to the first four test subjects.
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<String>,
    /// Zero-based style dimension to sweep.
    #[arg(long, default_value_t = DEFAULT_INTERP_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = DEFAULT_INTERP_LO, allow_hyphen_values = true)]
    pub lo: f64,
    #[arg(long, default_value_t = DEFAULT_INTERP_HI, allow_hyphen_values = true)]
    pub hi: f64,
    #[arg(long, default_value_t = DEFAULT_INTERP_STEPS)]
    pub steps: usize,
    /// Output PNG grid: rows are interpolation values, columns are input images.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "SEMIPAIR_SEED", default_value_t = 0)]
    pub seed: u64,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split `{other}` (expected train, val or test)")),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::EvalSeg(a) => cmd_eval_seg(&a),
        Command::EvalTrans(a) => cmd_eval_trans(&a),
        Command::Translate(a) => cmd_translate(&a),
        Command::Interpolate(a) => cmd_interpolate(&a),
        Command::Stats(a) => cmd_stats(&a),
    }
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::DirectoryNotEmpty(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Provenance<'a, T: Serialize> {
    config_hash: String,
    config: &'a T,
}

fn write_effective_config<T: Serialize>(dir: &Path, config: &T) -> Result<()> {
    let p = Provenance {
        config_hash: config_hash(config),
        config,
    };
    write_text(&dir.join(EFFECTIVE_CONFIG), &serde_json::to_string_pretty(&p)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

pub fn synth_spec(a: &SynthArgs) -> Result<SynthSpec> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { spec.$field = v; })*};
    }
    set!(subjects => n_subjects, train => n_train, val => n_val, test => n_test, paired => n_paired,
         height => height, width => width, seed => seed);
    spec.validate()?;
    Ok(spec)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = synth_spec(a)?;
    prepare_dir(&a.out, a.force)?;
    let ds = synth_generate(&spec)?;
    save_dataset(&ds, &a.out)?;
    write_effective_config(&a.out, &spec)?;
    println!("dataset {} ({}x{}, hash {})", a.out.display(), ds.height, ds.width, ds.config_hash);
    for split in [Split::Train, Split::Val, Split::Test] {
        let counts = ds.modality_counts(split);
        let subjects = ds.records_in(split).count();
        let paired = ds.records_in(split).filter(|r| r.paired).count();
        let per: Vec<String> = ds.modality_names.iter().zip(&counts).map(|(n, c)| format!("{n}={c}")).collect();
        println!("{split:?}: {subjects} subjects ({paired} paired), images {}", per.join(" "));
    }
    Ok(())
}

pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = a.$field { cfg.$field = v; })*};
    }
    set!(epochs_step1, epochs_step2, batch_size, lr_init, lr_flat_epochs, base_width, checkpoint_interval, seed);
    if a.epochs_step1.is_some() || a.epochs_step2.is_some() {
        cfg.lr_flat_epochs = cfg.lr_flat_epochs.min(cfg.total_epochs());
    }
    cfg.use_content_consistency &= !a.no_content_consistency;
    cfg.use_translation_loss &= !a.no_translation_loss;
    cfg.end_to_end |= a.end_to_end;
    cfg.disentangle &= !a.no_disentanglement;
    cfg.validate()?;
    Ok(cfg)
}

fn train_one(ds: &SemiPairedDataset, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    write_effective_config(dir, cfg)?;
    let mut report = |s: &crate::trainer::EpochSummary| {
        let val = s.val_dice.map_or(String::new(), |d| format!(" val_dice={d:.4}"));
        eprintln!("epoch {:>3} lr={:.3e} L_G={:.4}{val} ({:.1}s)", s.epoch, s.lr, s.mean_l_g, s.seconds);
    };
    let out = train(
        ds,
        cfg,
        TrainOutput {
            dir: Some(dir),
            on_epoch: Some(&mut report),
        },
    )?;
    println!(
        "trained {} epochs into {}; best epoch {}{}",
        cfg.total_epochs(),
        dir.display(),
        out.best_epoch,
        out.best_val_dice.map_or(String::new(), |d| format!(" (val Dice {d:.4})"))
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let ds = load_dataset(&a.data)?;
    prepare_dir(&a.out, a.force)?;
    if a.seeds.is_empty() {
        return train_one(&ds, &cfg, &a.out);
    }
    let mut wt = Vec::new();
    let mut trans = Vec::new();
    for &seed in &a.seeds {
        let dir = a.out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let run = TrainConfig { seed, ..cfg.clone() };
        train_one(&ds, &run, &dir)?;
        let (model, meta, _) = load_checkpoint(&dir.join(BEST_FILE))?;
        let p = predictor(&model, &meta);
        let seg = evaluate_segmentation(&p, &ds, Split::Test)?;
        wt.push(seg.aver[0]);
        if ds.oracle.is_some() {
            trans.push(evaluate_translation(&p, &ds, Split::Test)?.average);
        }
    }
    #[derive(Serialize)]
    struct SeedSummary {
        seeds: Vec<u64>,
        first_region_dice: Vec<f64>,
        first_region_dice_mean_std: Option<(f64, f64)>,
        ssim: Vec<f64>,
        ssim_mean_std: Option<(f64, f64)>,
    }
    let summary = SeedSummary {
        seeds: a.seeds.clone(),
        first_region_dice_mean_std: mean_std(&wt),
        first_region_dice: wt,
        ssim_mean_std: mean_std(&trans),
        ssim: trans,
    };
    if let Some((m, s)) = summary.first_region_dice_mean_std {
        println!("{} Aver Dice over seeds: {:.2}±{:.2}", ds.region_names[0], 100.0 * m, 100.0 * s);
    }
    if let Some((m, s)) = summary.ssim_mean_std {
        println!("SSIM over seeds: {m:.4}±{s:.4}");
    }
    write_json(&a.out.join("seeds_summary.json"), &summary)
}

fn predictor<'a>(model: &'a Model, meta: &'a ModelMeta) -> Predictor<'a> {
    Predictor {
        model,
        reference_styles: &meta.reference_styles,
        batch_size: meta.train.batch_size,
    }
}

/// Loads a checkpoint and dataset, refusing combinations from different configurations.
pub fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Model, ModelMeta, SemiPairedDataset)> {
    let (model, meta, ck) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    if ck.dataset_hash != ds.config_hash {
        return Err(Error::HashMismatch {
            expected: ck.dataset_hash,
            found: ds.config_hash,
        });
    }
    if (meta.height, meta.width) != (ds.height, ds.width) || meta.modality_names != ds.modality_names {
        return Err(Error::Shape("checkpoint and dataset disagree on image size or modalities".into()));
    }
    Ok((model, meta, ds))
}

fn cmd_eval_seg(a: &EvalArgs) -> Result<()> {
    let (model, meta, ds) = load_pair(&a.checkpoint, &a.data)?;
    let report = evaluate_segmentation(&predictor(&model, &meta), &ds, a.split)?;
    let table = report.table();
    print!("{table}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&out.join("seg_report.json"), &report)?;
        write_text(&out.join("seg_table.txt"), &table)?;
        write_effective_config(out, &meta.train)?;
    }
    Ok(())
}

fn cmd_eval_trans(a: &EvalArgs) -> Result<()> {
    let (model, meta, ds) = load_pair(&a.checkpoint, &a.data)?;
    let report = evaluate_translation(&predictor(&model, &meta), &ds, a.split)?;
    let table = report.table();
    print!("{table}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&out.join("trans_report.json"), &report)?;
        write_text(&out.join("trans_table.txt"), &table)?;
        write_effective_config(out, &meta.train)?;
    }
    Ok(())
}

fn modality_index(ds: &SemiPairedDataset, name: &str) -> Result<usize> {
    ds.modality_names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown modality `{name}` (have {:?})", ds.modality_names)))
}

fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    use crate::eval::Translator;
    let (model, meta, ds) = load_pair(&a.checkpoint, &a.data)?;
    let record = ds
        .records
        .iter()
        .find(|r| r.subject_id == a.subject)
        .ok_or_else(|| Error::subject(&a.subject, "not in the dataset"))?;
    let source = match &a.source {
        Some(name) => modality_index(&ds, name)?,
        None => *record.available_modalities.iter().next().expect("validated record"),
    };
    let target = modality_index(&ds, &a.target)?;
    let sample = ds
        .sample(&a.subject, source)
        .ok_or_else(|| Error::subject(&a.subject, format!("no {} image", ds.modality_names[source])))?;
    let out = predictor(&model, &meta).translate(&[sample], &[target])?.remove(0);
    let mut row = vec![sample.image.clone(), out.clone()];
    if let Some(oracle) = &ds.oracle {
        let truth = oracle.ground_truth(&a.subject, target)?;
        println!(
            "{} {} -> {}: SSIM vs analytic target {:.4}",
            a.subject,
            ds.modality_names[source],
            a.target,
            ssim(out.view(), truth.view())?
        );
        row.push(truth);
    }
    write_png_grid(&a.out, &[row])
}

fn cmd_interpolate(a: &InterpolateArgs) -> Result<()> {
    let (model, _, ds) = load_pair(&a.checkpoint, &a.data)?;
    let subjects: Vec<String> = if a.subjects.is_empty() {
        ds.records_in(Split::Test).take(4).map(|r| r.subject_id.clone()).collect()
    } else {
        a.subjects.clone()
    };
    let values = interpolation_values(a.lo, a.hi, a.steps)?;
    let mut columns = Vec::new();
    for s in &subjects {
        let r = ds
            .records
            .iter()
            .find(|r| &r.subject_id == s)
            .ok_or_else(|| Error::subject(s, "not in the dataset"))?;
        let m = *r.available_modalities.iter().next().expect("validated record");
        let sample = ds.sample(s, m).expect("validated dataset");
        let interp = interpolate_style(&model, sample, a.dim, &values)?;
        if interp.segmentations.iter().any(|seg| seg != &interp.segmentations[0]) {
            return Err(Error::InvalidArgument(format!("{s}: segmentation changed under style interpolation")));
        }
        columns.push(interp.images);
    }
    let rows: Vec<Vec<_>> = (0..values.len()).map(|i| columns.iter().map(|c| c[i].clone()).collect()).collect();
    write_png_grid(&a.out, &rows)?;
    println!(
        "wrote {} ({} values of dim {} in [{}, {}] x {} images); segmentations unchanged",
        a.out.display(),
        values.len(),
        a.dim,
        a.lo,
        a.hi,
        columns.len()
    );
    Ok(())
}

fn cmd_stats(a: &EvalArgs) -> Result<()> {
    let (model, meta, ds) = load_pair(&a.checkpoint, &a.data)?;
    let samples = ds.samples_in(a.split);
    let stats = style_statistics(&model, &samples, meta.train.batch_size)?;
    println!("style codes: max {:.4} min {:.4} mean {:.4} over {} images", stats.max, stats.min, stats.mean, stats.n_codes);
    let probe = if ds.oracle.is_some() {
        let p = content_distance_probe(&model, &ds, a.split, a.seed)?;
        println!(
            "bottleneck L1: same subject {:.4}, random couples {:.4}, ratio {:.3}",
            p.paired_l1, p.random_l1, p.ratio
        );
        Some(p)
    } else {
        None
    };
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&out.join("style_stats.json"), &stats)?;
        if let Some(p) = probe {
            write_json(&out.join("content_probe.json"), &p)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("semipair").chain(args.iter().copied()))
    }

    #[test]
    fn unknown_flags_are_errors() {
        assert!(parse(&["synth", "--out", "x", "--bogus"]).is_err());
        assert_eq!(run_from(["semipair", "train", "--nope"]), EXIT_USAGE);
        assert_eq!(run_from(["semipair", "--help"]), EXIT_OK);
    }

    #[test]
    fn ablation_flags_map_to_config() {
        let Command::Train(a) = parse(&[
            "train",
            "--data",
            "d",
            "--out",
            "o",
            "--no-content-consistency",
            "--no-translation-loss",
            "--epochs-step1",
            "0",
        ])
        .unwrap()
        .command
        else {
            panic!()
        };
        let cfg = train_config(&a).unwrap();
        assert!(!cfg.use_content_consistency && !cfg.use_translation_loss);
        assert_eq!(cfg.epochs_step1, 0);
        assert_eq!(cfg.lr_flat_epochs, 30);
        let w = TrainConfig::default().weights();
        assert_eq!((w.lambda_rec, w.lambda_tran, w.lambda_con, w.lambda_sty, w.lambda_seg), (50.0, 100.0, 10.0, 10.0, 100.0));
    }

    #[test]
    fn interpolation_defaults() {
        let Command::Interpolate(a) = parse(&["interpolate", "--checkpoint", "c", "--data", "d", "--out", "o.png"])
            .unwrap()
            .command
        else {
            panic!()
        };
        assert_eq!((a.dim, a.lo, a.hi, a.steps), (3, -0.7, 0.2, 10));
    }

    #[test]
    fn synth_flags_override_defaults() {
        let Command::Synth(a) = parse(&["synth", "--out", "o", "--paired", "0", "--seed", "5"]).unwrap().command else {
            panic!()
        };
        let spec = synth_spec(&a).unwrap();
        assert_eq!((spec.n_subjects, spec.n_paired, spec.seed, spec.height), (120, 0, 5, 64));
    }

    #[test]
    fn non_empty_directory_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("f"), b"x").unwrap();
        assert!(matches!(prepare_dir(dir.path(), false), Err(Error::DirectoryNotEmpty(_))));
        assert!(prepare_dir(dir.path(), true).is_ok());
    }
}
