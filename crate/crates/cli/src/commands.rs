use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use dismax_core::data::{encode_idx, synth_blobs, synth_glyphs, synth_ood, Dataset, GlyphFamily};
use dismax_core::evaluation::{render_table, roc_points, DetectionReport};
use dismax_core::model::Checkpoint;
use dismax_core::pipeline::{calibrate, evaluate, holdout_split, report, validation_split};
use dismax_core::scoring::{ScoreDump, ScoreKind, ID_SPLIT};
use dismax_core::train::train;

use crate::artifacts::{
    is_json, manifest_in_cache, manifest_path_for, write_atomic, DataRef, Manifest,
};
use crate::config::TrainOverrides;
use crate::{Cli, Command, UsageError};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Training images: a JSON dataset or an IDX image file
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// IDX label file for `--data`
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// The training set the checkpoint was fitted on; the held-out split is
    /// re-derived from the checkpoint metadata
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Treat `--data` as the validation split itself
    #[arg(long)]
    pub val_only: bool,
    /// Output checkpoint; defaults to overwriting `--checkpoint`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled in-distribution test set
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long)]
    pub id_labels: Option<PathBuf>,
    /// OOD set as `name=path`; repeatable
    #[arg(long = "ood", required = true, value_parser = parse_named)]
    pub ood: Vec<(String, PathBuf)>,
    /// Score kinds to report
    #[arg(long, value_delimiter = ',', default_value = "mps,mds,mmles,entropy")]
    pub scores: Vec<ScoreKind>,
    /// Skip ECE, allowing an uncalibrated checkpoint
    #[arg(long)]
    pub no_ece: bool,
    /// Also write ROC curves, one CSV per score and OOD set
    #[arg(long)]
    pub roc: bool,
    /// Receives scores.csv, report.json, report.txt and manifest.json
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Score dumps as `path` or `method=path`
    #[arg(required = true, value_parser = parse_maybe_named)]
    pub dumps: Vec<(Option<String>, PathBuf)>,
    #[arg(long, value_delimiter = ',', default_value = "mps,mds,mmles,entropy")]
    pub scores: Vec<ScoreKind>,
    /// Write the reports as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Gaussian clusters around seeded centers
    Blobs {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0.5)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<cache-dir>/blobs-<seed>.json`
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unlabelled points displaced along a seeded direction
    Ood {
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 10.0)]
        offset: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 28×28 rendered glyph images
    Glyphs {
        #[arg(long, value_parser = parse_family, default_value = "digits")]
        family: GlyphFamily,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `.json` writes a dataset cache, anything else IDX images
        #[arg(long)]
        out: Option<PathBuf>,
        /// IDX label file (IDX output only)
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected name=path, got '{s}'")),
    }
}

fn parse_maybe_named(s: &str) -> std::result::Result<(Option<String>, PathBuf), String> {
    match parse_named(s) {
        Ok((n, p)) => Ok((Some(n), p)),
        Err(_) => Ok((None, PathBuf::from(s))),
    }
}

fn parse_family(s: &str) -> std::result::Result<GlyphFamily, String> {
    match s {
        "digits" => Ok(GlyphFamily::Digits),
        "shapes" => Ok(GlyphFamily::Shapes),
        _ => Err(format!("unknown glyph family '{s}' (digits, shapes)")),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Calibrate(a) => cmd_calibrate(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Report(a) => cmd_report(cli, a),
        Command::Synth(s) => cmd_synth(cli, s),
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = args.overrides.resolve()?;
    if let Some(images) = &args.data {
        cfg.data = Some(DataRef::new(images.clone(), args.labels.clone()));
    } else if args.labels.is_some() {
        return Err(UsageError("--labels needs --data".into()).into());
    }
    let data_ref = cfg
        .data
        .clone()
        .ok_or_else(|| {
            UsageError("no training data: pass --data or set `data` in the config".into())
        })?
        .resolve(&cli.cache_dir);
    cfg.data = Some(data_ref.clone());
    cfg.train.validate()?;
    let data = data_ref.load(&cli.cache_dir)?;
    let (fit, val) = holdout_split(&data, cfg.train.val_fraction, cfg.train.seed)?;
    log::info!(
        "training {} on {} examples ({} held out), seed {}",
        cfg.train.loss.name(),
        fit.len(),
        val.len(),
        cfg.train.seed
    );
    let outcome = train(cli.exec(), &cfg.train, &fit)?;
    write_atomic(&args.out, outcome.checkpoint.to_json()?.as_bytes())?;
    log::info!("checkpoint written to {}", args.out.display());

    let mut m = Manifest::new("train");
    m.config_hash = Some(cfg.train.hash());
    m.seed = Some(cfg.train.seed);
    m.config = Some(serde_json::to_value(&cfg)?);
    for p in data_ref.paths() {
        m.input(p)?;
    }
    m.output(&args.out)?;
    m.write(&manifest_path_for(&args.out))
}

fn checkpoint_manifest(command: &str, ck: &Checkpoint) -> Manifest {
    let mut m = Manifest::new(command);
    m.config_hash = Some(ck.metadata.config_hash.clone());
    m.seed = Some(ck.metadata.seed);
    m
}

fn cmd_calibrate(cli: &Cli, args: &CalibrateArgs) -> Result<()> {
    let mut ck = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let data_ref = DataRef::new(args.data.clone(), args.labels.clone()).resolve(&cli.cache_dir);
    let data = data_ref.load(&cli.cache_dir)?;
    let val = if args.val_only {
        data
    } else {
        validation_split(&ck, &data)?
    };
    let acc_before = accuracy_on(cli, &ck, &val)?;
    let result = calibrate(cli.exec(), &mut ck, &val)?;
    let acc_after = accuracy_on(cli, &ck, &val)?;
    println!(
        "T* = {:.6}  ECE {:.4} -> {:.4}  ({} evaluations, {} validation examples)",
        result.t_star,
        result.ece_before,
        result.ece_after,
        result.evaluations,
        val.len()
    );
    debug_assert_eq!(acc_before, acc_after);
    let out = args.out.clone().unwrap_or_else(|| args.checkpoint.clone());
    let mut m = checkpoint_manifest("calibrate", &ck);
    m.input(&args.checkpoint)?;
    for p in data_ref.paths() {
        m.input(p)?;
    }
    write_atomic(&out, ck.to_json()?.as_bytes())?;
    m.output(&out)?;
    m.write(&manifest_path_for(&out))
}

fn accuracy_on(cli: &Cli, ck: &Checkpoint, data: &Dataset) -> Result<f64> {
    let rows = dismax_core::scoring::score_dataset(cli.exec(), &ck.network, data, ID_SPLIT)?;
    let labels = data
        .labels()
        .ok_or_else(|| UsageError("validation data needs labels".into()))?;
    let hits = rows
        .iter()
        .zip(labels)
        .filter(|(r, &l)| r.pred_class == l)
        .count();
    Ok(hits as f64 / rows.len().max(1) as f64)
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let id_ref = DataRef::new(args.id.clone(), args.id_labels.clone()).resolve(&cli.cache_dir);
    let id = id_ref.load(&cli.cache_dir)?;
    let mut m = checkpoint_manifest("evaluate", &ck);
    m.input(&args.checkpoint)?;
    for p in id_ref.paths() {
        m.input(p)?;
    }
    let mut oods = Vec::new();
    for (name, path) in &args.ood {
        if name == ID_SPLIT {
            return Err(UsageError(format!("'{ID_SPLIT}' is reserved for the ID split")).into());
        }
        let r = DataRef::new(path.clone(), None).resolve(&cli.cache_dir);
        oods.push(r.load(&cli.cache_dir)?.with_name(name.clone()));
        m.input(&r.images)?;
    }
    let (reports, dump) = evaluate(cli.exec(), &ck, &id, &oods, &args.scores, !args.no_ece)?;

    let dir = &args.out_dir;
    let table = render_table(&reports);
    let files = [
        (dir.join("scores.csv"), dump.to_csv()),
        (
            dir.join("report.json"),
            serde_json::to_string_pretty(&reports)?,
        ),
        (dir.join("report.txt"), table.clone()),
    ];
    for (path, text) in &files {
        write_atomic(path, text.as_bytes())?;
        m.output(path)?;
    }
    if args.roc {
        for path in write_roc(dir, &dump, &args.scores)? {
            m.output(&path)?;
        }
    }
    print!("{table}");
    m.write(&dir.join("manifest.json"))
}

fn write_roc(dir: &Path, dump: &ScoreDump, kinds: &[ScoreKind]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &k in kinds {
        let id = dump.scores(ID_SPLIT, k);
        for name in dump.ood_splits() {
            let mut csv = String::from("fpr,tpr\n");
            for (fpr, tpr) in roc_points(&id, &dump.scores(&name, k))? {
                csv.push_str(&format!("{fpr:.16e},{tpr:.16e}\n"));
            }
            let path = dir
                .join("roc")
                .join(format!("{}-{name}.csv", k.name().to_lowercase()));
            write_atomic(&path, csv.as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Result<()> {
    let mut m = Manifest::new("report");
    let mut dumps = Vec::new();
    for (name, path) in &args.dumps {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let dump =
            ScoreDump::from_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
        let method = name.clone().unwrap_or_else(|| {
            path.file_stem().map_or_else(
                || path.display().to_string(),
                |s| s.to_string_lossy().into_owned(),
            )
        });
        m.input(path)?;
        dumps.push((method, dump));
    }
    let reports: Vec<DetectionReport> = report(cli.exec(), &dumps, &args.scores)?;
    print!("{}", render_table(&reports));
    let manifest_path = match &args.json {
        Some(p) => {
            write_atomic(p, serde_json::to_string_pretty(&reports)?.as_bytes())?;
            m.output(p)?;
            manifest_path_for(p)
        }
        None => manifest_in_cache(&cli.cache_dir, "report"),
    };
    m.write(&manifest_path)
}

fn cmd_synth(cli: &Cli, cmd: &SynthCommand) -> Result<()> {
    let default_out = |stem: String| cli.cache_dir.join(stem);
    let mut m = Manifest::new("synth");
    let (data, out, labels_out) = match cmd {
        SynthCommand::Blobs {
            classes,
            dim,
            per_class,
            spread,
            seed,
            out,
        } => {
            m.seed = Some(*seed);
            let d = synth_blobs(*classes, *dim, *per_class, *spread, *seed)?;
            (
                d,
                out.clone()
                    .unwrap_or_else(|| default_out(format!("blobs-{seed}.json"))),
                None,
            )
        }
        SynthCommand::Ood {
            dim,
            count,
            offset,
            seed,
            out,
        } => {
            m.seed = Some(*seed);
            let d = synth_ood(*dim, *count, *offset, *seed)?;
            (
                d,
                out.clone()
                    .unwrap_or_else(|| default_out(format!("ood-{seed}.json"))),
                None,
            )
        }
        SynthCommand::Glyphs {
            family,
            count,
            seed,
            out,
            labels_out,
        } => {
            m.seed = Some(*seed);
            let d = synth_glyphs(cli.exec(), *family, *count, *seed)?;
            let out = out
                .clone()
                .unwrap_or_else(|| default_out(format!("{}-{seed}.idx", d.name())));
            (d, out, labels_out.clone())
        }
    };
    if is_json(&out) {
        if labels_out.is_some() {
            return Err(UsageError("--labels-out applies to IDX output only".into()).into());
        }
        write_atomic(&out, data.to_json()?.as_bytes())?;
        m.output(&out)?;
    } else {
        let (images, labels) = encode_idx(&data)?;
        write_atomic(&out, &images)?;
        m.output(&out)?;
        if let Some(l) = &labels_out {
            let bytes = labels.ok_or_else(|| UsageError("this dataset has no labels".into()))?;
            write_atomic(l, &bytes)?;
            m.output(l)?;
        }
    }
    println!(
        "wrote {} examples of '{}' to {}",
        data.len(),
        data.name(),
        out.display()
    );
    m.write(&manifest_path_for(&out))
}
