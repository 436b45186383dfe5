//! Command implementations. Each filesystem-writing command creates its
//! output directory, emits its artifacts, and drops a manifest.

use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use remnist_core::assemble::{assemble, RecipeConfig};
use remnist_core::eval::{
    knn_predict, mlp_train, scatter_report, EvalRun, KnnConfig, MlpConfig,
};
use remnist_core::formats::{
    read_idx_file, read_source_archive_file, write_idx_file, DatasetBundle, IdxTensor,
    IDX_DTYPE_I32, IDX_DTYPE_U8,
};
use remnist_core::matching::{match_datasets, write_pairs_csv};
use remnist_core::preprocess::{
    preprocess_digit, Accumulation, CropConfig, Normalization, ResampleConfig,
};
use remnist_core::stats::{
    bonferroni_max_k, paired_counts, paired_worse, wald_interval, Confidence, ErrorCount,
    PairedCounts,
};

use crate::data::{load_bundle, load_labels, read_predictions, write_predictions};
use crate::manifest::{write_json, RunManifest};
use crate::{internal, usage, CliError};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| internal(format!("cannot create {}: {e}", dir.display())))
}

fn confidence(eta: f64) -> Result<Confidence, CliError> {
    Confidence::new(eta).map_err(|e| usage(e.to_string()))
}

fn to_value(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialize")
}

#[derive(Debug, Clone, Copy, Args)]
pub struct ResampleArgs {
    /// Coordinate scale factor of the box fit
    #[arg(long, default_value_t = 0.99)]
    pub fudge: f64,
    /// Nominal-area normalization with 16.8 fixed-point weights,
    /// reproducing the historical resampler and its periodic artifacts
    #[arg(long)]
    pub legacy_resample: bool,
}

impl ResampleArgs {
    fn build(&self) -> Result<ResampleConfig, CliError> {
        let cfg = if self.legacy_resample {
            ResampleConfig::legacy(self.fudge)
        } else {
            ResampleConfig::new(self.fudge, Normalization::ExactArea, Accumulation::Float64)
        };
        cfg.map_err(|e| usage(e.to_string()))
    }
}

#[derive(Args)]
pub struct AssembleArgs {
    /// Source archive (NBIN, optionally gzipped)
    #[arg(long)]
    source: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Writers seeding the training set; the rest seed the test set
    #[arg(long = "writer-split", default_value_t = 250)]
    writer_split: usize,
    #[arg(long = "train-completion-start", default_value_t = 0)]
    train_completion_start: usize,
    #[arg(long = "test-completion-start", default_value_t = 35_000)]
    test_completion_start: usize,
    /// Digits per output set
    #[arg(long = "target", default_value_t = 60_000)]
    target: usize,
    /// Seed for the interleaving shuffle
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with explicit seed orderings ({"train": [...], "test": [...]})
    #[arg(long)]
    permutation: Option<PathBuf>,
    /// Partition id carrying the writer split
    #[arg(long = "test-partition", default_value_t = 4)]
    test_partition: u16,
    #[command(flatten)]
    resample: ResampleArgs,
    /// Gzip the emitted IDX files
    #[arg(long)]
    gzip: bool,
}

pub fn cmd_assemble(args: AssembleArgs, threads: Option<usize>) -> Result<(), CliError> {
    let archive = read_source_archive_file(&args.source)
        .map_err(|e| usage(format!("cannot read {}: {e}", args.source.display())))?;
    let recipe = RecipeConfig {
        writer_split_count: args.writer_split,
        train_completion_start: args.train_completion_start,
        test_completion_start: args.test_completion_start,
        target_size: args.target,
        shuffle_seed: args.seed,
        permutation_file: args.permutation.clone(),
        test_partition_id: args.test_partition,
    };
    let crop = CropConfig::default();
    let resample = args.resample.build()?;
    let (train, test, report) =
        assemble(&archive, &recipe, &crop, &resample).map_err(|e| usage(e.to_string()))?;

    ensure_dir(&args.out)?;
    let written = [
        train.write_idx_files(&args.out, "train", args.gzip),
        test.write_idx_files(&args.out, "test", args.gzip),
    ];
    let mut manifest = RunManifest::new("assemble", threads);
    manifest.seed = Some(args.seed);
    manifest.config = json!({
        "recipe": to_value(&recipe),
        "crop": to_value(&crop),
        "resample": to_value(&resample),
        "gzip": args.gzip,
    });
    manifest.input("source", &args.source);
    for paths in written {
        for p in paths.map_err(|e| internal(format!("cannot write dataset: {e}")))? {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            manifest.output(&name, &p);
        }
    }
    let report_path = write_json(&args.out, "report.json", &report)?;
    manifest.output("report.json", &report_path);
    manifest.write(&args.out)?;
    println!(
        "assembled {} train + {} test digits, {} duplicates removed -> {}",
        train.len(),
        test.len(),
        report.duplicates_removed.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct PreprocessArgs {
    /// Source archive (NBIN, optionally gzipped)
    #[arg(long)]
    source: PathBuf,
    /// Archive position of the record to preprocess
    #[arg(long)]
    index: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    resample: ResampleArgs,
    /// Print the result as an ASCII grid
    #[arg(long)]
    ascii: bool,
}

pub fn cmd_preprocess(args: PreprocessArgs, threads: Option<usize>) -> Result<(), CliError> {
    let archive = read_source_archive_file(&args.source)
        .map_err(|e| usage(format!("cannot read {}: {e}", args.source.display())))?;
    let rec = archive.get(args.index).ok_or_else(|| {
        usage(format!(
            "index {} out of range; archive has {} records",
            args.index,
            archive.len()
        ))
    })?;
    let crop = CropConfig::default();
    let resample = args.resample.build()?;
    let digit = preprocess_digit(rec, &crop, &resample).map_err(|e| {
        usage(format!(
            "preprocessing failed on record {}: {e}",
            args.index
        ))
    })?;

    ensure_dir(&args.out)?;
    let bundle = DatasetBundle::from_images_labels(vec![digit.clone()], vec![rec.label])
        .expect("single digit bundle");
    let paths = bundle
        .write_idx_files(&args.out, "digit", false)
        .map_err(|e| internal(format!("cannot write digit: {e}")))?;
    let mut manifest = RunManifest::new("preprocess", threads);
    manifest.config = json!({
        "index": args.index,
        "crop": to_value(&crop),
        "resample": to_value(&resample),
    });
    manifest.input("source", &args.source);
    for p in &paths {
        manifest.output(&p.file_name().unwrap().to_string_lossy(), p);
    }
    manifest.write(&args.out)?;

    let ink = digit.as_bytes().iter().filter(|&&p| p != 0).count();
    println!(
        "{}",
        json!({
            "index": args.index,
            "writer_id": rec.writer_id,
            "partition_id": rec.partition_id,
            "label": rec.label,
            "ink_pixels": ink,
        })
    );
    if args.ascii {
        let ramp: &[u8] = b" .:-=+*#%@";
        for row in 0..28 {
            let line: String = (0..28)
                .map(|col| {
                    let v = digit.get(row, col) as usize;
                    ramp[v * (ramp.len() - 1) / 255] as char
                })
                .collect();
            println!("{line}");
        }
    }
    Ok(())
}

#[derive(Args)]
pub struct MatchArgs {
    /// First dataset (directory, images file, or stem prefix)
    #[arg(long)]
    a: PathBuf,
    /// Second dataset
    #[arg(long)]
    b: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Also write the matched pairs as CSV
    #[arg(long = "pairs-csv")]
    pairs_csv: bool,
    /// Match even when the image counts differ (leftovers are reported)
    #[arg(long = "allow-partial")]
    allow_partial: bool,
}

pub fn cmd_match(args: MatchArgs, threads: Option<usize>) -> Result<(), CliError> {
    let a = load_bundle(&args.a)?;
    let b = load_bundle(&args.b)?;
    if a.len() != b.len() && !args.allow_partial {
        return Err(usage(format!(
            "image counts differ ({} vs {}); pass --allow-partial to match anyway",
            a.len(),
            b.len()
        )));
    }
    let report = match_datasets(&a, &b).map_err(|e| internal(e.to_string()))?;

    ensure_dir(&args.out)?;
    let report_path = write_json(&args.out, "report.json", &report)?;
    let mut manifest = RunManifest::new("match", threads);
    manifest.config = json!({ "allow_partial": args.allow_partial });
    manifest.input("a", &args.a);
    manifest.input("b", &args.b);
    manifest.output("report.json", &report_path);
    if args.pairs_csv {
        let csv_path = args.out.join("pairs.csv");
        let mut file = std::fs::File::create(&csv_path)
            .map_err(|e| internal(format!("cannot write {}: {e}", csv_path.display())))?;
        write_pairs_csv(&report, &mut file).map_err(|e| internal(e.to_string()))?;
        manifest.output("pairs.csv", &csv_path);
    }
    manifest.write(&args.out)?;
    println!(
        "{}",
        json!({
            "pairs": report.pairs.len(),
            "unmatched_a": report.unmatched_a.len(),
            "unmatched_b": report.unmatched_b.len(),
            "jitter_histogram": to_value(&report.jitter_histogram),
            "l2_quartiles": to_value(&report.l2_quartiles),
        })
    );
    Ok(())
}

#[derive(Subcommand)]
pub enum StatsCmd {
    /// Wald confidence interval for an error count
    Wald {
        /// Test set size
        #[arg(long)]
        n: u64,
        /// Misclassified count
        #[arg(long)]
        errors: u64,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
    },
    /// One-sided paired test on discordant counts: is classifier 1 worse?
    Paired {
        #[arg(long)]
        n12: u64,
        #[arg(long)]
        n21: u64,
        /// Total sample count (defaults to n12 + n21)
        #[arg(long)]
        n: Option<u64>,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
    },
    /// Largest comparison count K for which the paired difference stays
    /// significant under Bonferroni correction
    Bonferroni {
        #[arg(long)]
        n12: u64,
        #[arg(long)]
        n21: u64,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
    },
}

pub fn cmd_stats(cmd: StatsCmd) -> Result<(), CliError> {
    let out = match cmd {
        StatsCmd::Wald { n, errors, eta } => {
            let e = ErrorCount::new(n, errors).map_err(|e| usage(e.to_string()))?;
            let w = wald_interval(e, confidence(eta)?);
            json!({ "nu": w.nu, "halfwidth": w.halfwidth, "z": w.z })
        }
        StatsCmd::Paired { n12, n21, n, eta } => {
            let total = n.unwrap_or(n12 + n21);
            let p = PairedCounts::new(total, n12, n21).map_err(|e| usage(e.to_string()))?;
            let outcome = paired_worse(p, confidence(eta)?);
            json!({
                "n12": n12,
                "n21": n21,
                "decision": to_value(&outcome.decision),
                "margin": outcome.margin,
                "z": outcome.z,
            })
        }
        StatsCmd::Bonferroni { n12, n21, eta } => {
            let p = PairedCounts::new(n12 + n21, n12, n21).map_err(|e| usage(e.to_string()))?;
            json!({ "max_k": bonferroni_max_k(p, confidence(eta)?) })
        }
    };
    println!("{out}");
    Ok(())
}

/// On-disk record of one evaluation, written as `run.json`; `scatter`
/// consumes pairs of these.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub model_id: String,
    pub train_id: String,
    pub test_id: String,
    pub config: serde_json::Value,
    pub prediction_path: String,
    pub error: ErrorCount,
}

fn write_eval_outputs(
    out: &Path,
    run: &EvalRun,
    config: serde_json::Value,
    eta: f64,
    manifest: &mut RunManifest,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    let pred_path = out.join("predictions.txt");
    write_predictions(&pred_path, &run.predictions)?;
    let interval = wald_interval(run.error, confidence(eta)?);
    let error_path = write_json(
        out,
        "error.json",
        &json!({
            "n": run.error.n(),
            "n1": run.error.n1(),
            "nu": interval.nu,
            "halfwidth": interval.halfwidth,
            "z": interval.z,
            "eta": eta,
        }),
    )?;
    let record = RunRecord {
        model_id: run.model_id.clone(),
        train_id: run.train_id.clone(),
        test_id: run.test_id.clone(),
        config,
        prediction_path: "predictions.txt".to_string(),
        error: run.error,
    };
    let run_path = write_json(out, "run.json", &record)?;
    manifest.output("predictions.txt", &pred_path);
    manifest.output("error.json", &error_path);
    manifest.output("run.json", &run_path);
    manifest.write(out)?;
    println!(
        "{} on {}: error {:.4} +- {:.4}",
        run.model_id, run.test_id, interval.nu, interval.halfwidth
    );
    Ok(())
}

#[derive(Subcommand)]
pub enum EvalCmd {
    /// Brute-force k-nearest-neighbors on raw pixels
    Knn {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long = "model-id")]
        model_id: Option<String>,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
    },
    /// One-hidden-layer MLP trained with minibatch SGD
    Mlp {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 800)]
        hidden: usize,
        #[arg(long, default_value_t = 10)]
        batch: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Parallel gradient summation; forfeits bit-reproducibility
        #[arg(long)]
        parallel: bool,
        #[arg(long = "model-id")]
        model_id: Option<String>,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
    },
    /// Paired comparison of two prediction files on one truth set
    Compare {
        /// Predictions of the classifier suspected to be worse
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Label IDX file the predictions are scored against
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
    },
    /// Aggregate run.json pairs into a scatter CSV (same model, two test
    /// sets per pair)
    Scatter {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
        /// run.json files, an even count, pairwise (set1 set2 set1 set2 ...)
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
    },
}

pub fn cmd_eval(cmd: EvalCmd, threads: Option<usize>) -> Result<(), CliError> {
    match cmd {
        EvalCmd::Knn {
            train,
            test,
            out,
            k,
            model_id,
            eta,
        } => {
            let train_set = load_bundle(&train)?;
            let test_set = load_bundle(&test)?;
            let cfg = KnnConfig::new(k).map_err(|e| usage(e.to_string()))?;
            let preds = knn_predict(&train_set, test_set.images(), &cfg)
                .map_err(|e| usage(e.to_string()))?;
            let run = EvalRun::from_predictions(
                model_id.unwrap_or_else(|| format!("knn-k{k}")),
                train.display().to_string(),
                test.display().to_string(),
                preds,
                test_set.labels(),
            )
            .map_err(|e| internal(e.to_string()))?;
            let mut manifest = RunManifest::new("eval knn", threads);
            manifest.config = to_value(&cfg);
            manifest.input("train", &train);
            manifest.input("test", &test);
            write_eval_outputs(&out, &run, to_value(&cfg), eta, &mut manifest)
        }
        EvalCmd::Mlp {
            train,
            test,
            out,
            hidden,
            batch,
            lr,
            epochs,
            seed,
            parallel,
            model_id,
            eta,
        } => {
            let train_set = load_bundle(&train)?;
            let test_set = load_bundle(&test)?;
            let cfg = MlpConfig {
                hidden_units: hidden,
                minibatch_size: batch,
                learning_rate: lr,
                epochs,
                seed,
                parallel,
            };
            let model = mlp_train(&train_set, &cfg).map_err(|e| usage(e.to_string()))?;
            let preds = model.predict_all(test_set.images());
            let run = EvalRun::from_predictions(
                model_id.unwrap_or_else(|| format!("mlp-h{hidden}")),
                train.display().to_string(),
                test.display().to_string(),
                preds,
                test_set.labels(),
            )
            .map_err(|e| internal(e.to_string()))?;
            let mut manifest = RunManifest::new("eval mlp", threads);
            manifest.seed = Some(seed);
            manifest.config = to_value(&cfg);
            manifest.input("train", &train);
            manifest.input("test", &test);
            write_eval_outputs(&out, &run, to_value(&cfg), eta, &mut manifest)
        }
        EvalCmd::Compare { a, b, truth, eta } => {
            let pred_a = read_predictions(&a)?;
            let pred_b = read_predictions(&b)?;
            let labels = load_labels(&truth)?;
            if pred_a.len() != labels.len() || pred_b.len() != labels.len() {
                return Err(usage(format!(
                    "prediction lengths ({}, {}) do not match the {} truth labels",
                    pred_a.len(),
                    pred_b.len(),
                    labels.len()
                )));
            }
            let counts =
                paired_counts(&pred_a, &pred_b, &labels).map_err(|e| usage(e.to_string()))?;
            let outcome = paired_worse(counts, confidence(eta)?);
            println!(
                "{}",
                json!({
                    "n": counts.n(),
                    "n12": counts.n12(),
                    "n21": counts.n21(),
                    "decision": to_value(&outcome.decision),
                    "margin": outcome.margin,
                    "z": outcome.z,
                })
            );
            Ok(())
        }
        EvalCmd::Scatter { out, eta, runs } => {
            if runs.len() % 2 != 0 {
                return Err(usage(format!(
                    "scatter needs run.json files in pairs, got {}",
                    runs.len()
                )));
            }
            let mut pairs = Vec::new();
            for pair in runs.chunks_exact(2) {
                let a = load_run_record(&pair[0])?;
                let b = load_run_record(&pair[1])?;
                pairs.push((a, b));
            }
            let csv =
                scatter_report(&pairs, confidence(eta)?).map_err(|e| usage(e.to_string()))?;
            ensure_dir(&out)?;
            let csv_path = out.join("scatter.csv");
            std::fs::write(&csv_path, &csv)
                .map_err(|e| internal(format!("cannot write {}: {e}", csv_path.display())))?;
            let mut manifest = RunManifest::new("eval scatter", threads);
            manifest.config = json!({ "eta": eta, "pairs": pairs.len() });
            for (i, p) in runs.iter().enumerate() {
                manifest.input(&format!("run{i}"), p);
            }
            manifest.output("scatter.csv", &csv_path);
            manifest.write(&out)?;
            println!("wrote {} ({} rows)", csv_path.display(), pairs.len());
            Ok(())
        }
    }
}

/// Rehydrate a stored run for scatter aggregation. Only the identifiers
/// and the error count are needed, so predictions stay on disk.
fn load_run_record(path: &Path) -> Result<EvalRun, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let record: RunRecord = serde_json::from_str(&text)
        .map_err(|e| usage(format!("cannot parse {}: {e}", path.display())))?;
    Ok(EvalRun {
        model_id: record.model_id,
        train_id: record.train_id,
        test_id: record.test_id,
        predictions: Vec::new(),
        error: record.error,
    })
}

#[derive(Subcommand)]
pub enum IdxCmd {
    /// Print shape and dtype of an IDX file
    Info {
        #[arg(long)]
        path: PathBuf,
    },
    /// Copy a range along the first dimension into a new IDX file
    Slice {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        start: usize,
        #[arg(long)]
        count: usize,
        /// Output file; a .gz extension gzips it
        #[arg(long)]
        out: PathBuf,
    },
}

fn dtype_name(t: &IdxTensor) -> &'static str {
    match t.dtype_code() {
        IDX_DTYPE_U8 => "u8",
        IDX_DTYPE_I32 => "i32",
        _ => "unknown",
    }
}

pub fn cmd_idx(cmd: IdxCmd) -> Result<(), CliError> {
    match cmd {
        IdxCmd::Info { path } => {
            let t = read_idx_file(&path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            println!(
                "{}",
                json!({
                    "dims": t.dims(),
                    "dtype": dtype_name(&t),
                    "elements": t.len(),
                })
            );
            Ok(())
        }
        IdxCmd::Slice {
            path,
            start,
            count,
            out,
        } => {
            let t = read_idx_file(&path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            let sliced = t
                .slice_first_dim(start, count)
                .map_err(|e| usage(e.to_string()))?;
            write_idx_file(&out, &sliced)
                .map_err(|e| internal(format!("cannot write {}: {e}", out.display())))?;
            println!(
                "{}",
                json!({ "dims": sliced.dims(), "dtype": dtype_name(&sliced), "out": out.display().to_string() })
            );
            Ok(())
        }
    }
}
