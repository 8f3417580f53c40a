//! Command-line orchestration: dataset generation, training, interpolation and
//! evaluation. The binary is a thin wrapper around [`run`].

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{RunConfig, SeedStream};
use crate::data::{
    fibonacci_grid, load_field, load_grid, make_split, save_field, save_grid, split_known,
    subject_seed, synth_subject, DatasetSplit, Ear, FrequencyAxis, HrtfField, KnownSplit,
};
use crate::error::{Error, Result};
use crate::eval::{self, build_report, export_slice, format_slice, EvalReport, Prediction};
use crate::network::{ModelParams, Network};
use crate::optim::{self, format_history, Sample};

/// Environment variable naming the output root used when `--out` is absent.
pub const OUT_ENV: &str = "HRTF_SPHCONV_OUT";
pub const DEFAULT_OUT_ROOT: &str = "hrtf-sphconv-out";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "hrtf-sphconv",
    version,
    about = "Spherical-CNN HRTF interpolation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration. Defaults to the dataset's snapshot, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap; 0 means available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory for this command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset: grids, per-subject fields and a split manifest.
    Generate {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Train the spherical CNN on a generated dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Predict a dense field from a sparse field file.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output field file; defaults to `interpolated.hrtf` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a method on the test subjects' unknown directions.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long)]
        slice_subject: Option<u32>,
    },
    /// Score the SH interpolation baseline on the test subjects.
    BaselineEvaluate {
        #[arg(long)]
        dataset: PathBuf,
        /// SH order; defaults to `eval.baseline_order`.
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        slice_subject: Option<u32>,
    },
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct MethodArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// SH baseline of this order.
    #[arg(long)]
    pub baseline: Option<usize>,
    /// The ground truth itself (sanity check, LSD 0).
    #[arg(long)]
    pub ground_truth: bool,
    /// Trained kernels zeroed: the pure mapping model.
    #[arg(long)]
    pub zero_kernel: Option<PathBuf>,
}

/// Scoring method for [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Checkpoint(PathBuf),
    /// The checkpoint's architecture and grids with every kernel and bias zero.
    ZeroKernel(PathBuf),
    Baseline(usize),
    GroundTruth,
}

impl MethodArgs {
    fn method(&self) -> Method {
        if let Some(p) = &self.checkpoint {
            Method::Checkpoint(p.clone())
        } else if let Some(p) = &self.zero_kernel {
            Method::ZeroKernel(p.clone())
        } else if let Some(n) = self.baseline {
            Method::Baseline(n)
        } else {
            Method::GroundTruth
        }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Generate { .. } => "generate",
        Command::Train { .. } => "train",
        Command::Interpolate { .. } => "interpolate",
        Command::Evaluate { .. } => "evaluate",
        Command::BaselineEvaluate { .. } => "baseline-evaluate",
    }
}

/// `--out` if given, else `$HRTF_SPHCONV_OUT/<command>`, else `./hrtf-sphconv-out/<command>`.
pub fn output_dir(out: Option<&Path>, command: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
            root.join(command)
        }
    }
}

/// Loads the base configuration: `--config`, else the dataset snapshot, else
/// defaults. Flag overrides are applied by the caller before validation.
fn base_config(global: &GlobalArgs, dataset: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = &global.config {
        return load_config_unvalidated(p);
    }
    if let Some(d) = dataset {
        let snap = d.join(CONFIG_FILE);
        if snap.exists() {
            return load_config_unvalidated(&snap);
        }
    }
    Ok(RunConfig::default())
}

fn load_config_unvalidated(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config {
        field: path.display().to_string(),
        message: e.to_string(),
    })
}

fn apply_global(cfg: &mut RunConfig, global: &GlobalArgs) {
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(t) = global.threads {
        cfg.threads = t;
    }
}

/// Parses arguments, runs the command inside a thread pool capped at
/// `--threads`, and returns the outcome.
pub fn run(cli: Cli) -> Result<()> {
    let name = command_name(&cli.command);
    let out = output_dir(cli.global.out.as_deref(), name);
    let g = &cli.global;
    match &cli.command {
        Command::Generate { subjects, bins } => {
            let mut cfg = base_config(g, None)?;
            apply_global(&mut cfg, g);
            if let Some(s) = subjects {
                cfg.dataset.subjects = *s;
            }
            if let Some(b) = bins {
                cfg.dataset.bins = *b;
            }
            cfg.validate()?;
            with_threads(cfg.threads, || {
                let m = generate(&cfg, &out)?;
                println!(
                    "generated {} subjects ({} field files) in {}; split {}/{}/{}",
                    m.subjects.len(),
                    m.fields.len(),
                    out.display(),
                    m.split.train.len(),
                    m.split.validation.len(),
                    m.split.test.len()
                );
                Ok(())
            })
        }
        Command::Train {
            dataset,
            epochs,
            learning_rate,
            batch_size,
            patience,
        } => {
            let mut cfg = base_config(g, Some(dataset))?;
            apply_global(&mut cfg, g);
            if let Some(e) = epochs {
                cfg.train.max_epochs = *e;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = *lr;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = *b;
            }
            if let Some(p) = patience {
                cfg.train.patience = *p;
            }
            cfg.validate()?;
            with_threads(cfg.threads, || {
                let summary = train(&cfg, dataset, &out)?;
                println!(
                    "trained {} epochs, best epoch {}, best validation LSD {} dB",
                    summary.epochs_run,
                    summary
                        .best_epoch
                        .map_or_else(|| "none".to_string(), |e| e.to_string()),
                    summary.best_val_lsd.map_or(f64::NAN, |v| v)
                );
                Ok(())
            })
        }
        Command::Interpolate {
            checkpoint,
            input,
            output,
        } => {
            let mut cfg = base_config(g, None)?;
            apply_global(&mut cfg, g);
            cfg.validate()?;
            let target = output
                .clone()
                .unwrap_or_else(|| out.join("interpolated.hrtf"));
            with_threads(cfg.threads, || {
                interpolate(&cfg, checkpoint, input, &target)?;
                println!("wrote {}", target.display());
                Ok(())
            })
        }
        Command::Evaluate {
            dataset,
            method,
            slice_subject,
        } => {
            let mut cfg = base_config(g, Some(dataset))?;
            apply_global(&mut cfg, g);
            if let Some(s) = slice_subject {
                cfg.eval.slice_subject = *s;
            }
            cfg.validate()?;
            let m = method.method();
            with_threads(cfg.threads, || {
                print_report(&evaluate(&cfg, dataset, &m, &out)?)
            })
        }
        Command::BaselineEvaluate {
            dataset,
            order,
            slice_subject,
        } => {
            let mut cfg = base_config(g, Some(dataset))?;
            apply_global(&mut cfg, g);
            if let Some(n) = order {
                cfg.eval.baseline_order = *n;
            }
            if let Some(s) = slice_subject {
                cfg.eval.slice_subject = *s;
            }
            cfg.validate()?;
            let m = Method::Baseline(cfg.eval.baseline_order);
            with_threads(cfg.threads, || {
                print_report(&evaluate(&cfg, dataset, &m, &out)?)
            })
        }
    }
}

fn print_report(r: &EvalReport) -> Result<()> {
    println!(
        "{}: mean LSD {} dB over {} test subjects ({} ears, {} unknown directions)",
        r.method_label,
        r.mean_lsd,
        r.per_subject_lsd.len(),
        r.ears,
        r.unknown_directions
    );
    Ok(())
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    pool.install(f)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldEntry {
    pub subject: u32,
    pub ear: Ear,
    pub file: String,
}

/// Index of a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub subjects: Vec<u32>,
    pub dense_grid: String,
    pub known_grid: String,
    pub dense_hash: String,
    pub known_hash: String,
    pub split: DatasetSplit,
    pub fields: Vec<FieldEntry>,
    /// Effective configuration the dataset was generated with.
    pub config: RunConfig,
}

fn field_file_name(subject: u32, ear: Ear) -> String {
    format!("fields/subject_{subject:03}_{ear}.hrtf")
}

/// Writes the dense grid (with known/unknown labels), the known grid, one field
/// file per subject and ear, the manifest and a config snapshot into `out`.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let freqs = cfg.frequency_axis()?;
    let dense = fibonacci_grid(cfg.grid.dense_points)?;
    let split = split_known(
        &dense,
        cfg.grid.known_points,
        cfg.seed_for(SeedStream::KnownGrid),
        cfg.model.n_map_in.max(cfg.eval.baseline_order),
        &cfg.sht_config(),
    )?;
    let subjects: Vec<u32> = (1..=cfg.dataset.subjects as u32).collect();
    let subject_split = make_split(
        &subjects,
        cfg.dataset.proportions,
        cfg.seed_for(SeedStream::Split),
    )?;

    let jobs: Vec<(u32, Ear)> = subjects
        .iter()
        .flat_map(|&s| Ear::BOTH.into_iter().map(move |e| (s, e)))
        .collect();
    let base = cfg.seed_for(SeedStream::Subjects);
    let fields = jobs
        .par_iter()
        .map(|&(s, e)| {
            synth_subject(
                subject_seed(base, s, e),
                &freqs,
                cfg.dataset.gt_order,
                split.dense.clone(),
                &cfg.synth,
                s,
                e,
            )
        })
        .collect::<Result<Vec<HrtfField>>>()?;

    create_dir(&out.join("fields"))?;
    save_grid(&split.dense, &out.join("dense_grid.grid"))?;
    save_grid(&split.known, &out.join("known_grid.grid"))?;
    let mut entries = Vec::with_capacity(fields.len());
    for f in &fields {
        let file = field_file_name(f.subject_id, f.ear);
        save_field(f, &out.join(&file))?;
        entries.push(FieldEntry {
            subject: f.subject_id,
            ear: f.ear,
            file,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        subjects,
        dense_grid: "dense_grid.grid".into(),
        known_grid: "known_grid.grid".into(),
        dense_hash: split.dense.hash().to_hex(),
        known_hash: split.known.hash().to_hex(),
        split: subject_split,
        fields: entries,
        config: cfg.clone(),
    };
    write_file(
        &out.join(MANIFEST_FILE),
        toml::to_string(&manifest).expect("manifest serializes"),
    )?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(manifest)
}

/// A dataset directory opened and cross-checked against its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub split: KnownSplit,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Version {
                what: "dataset manifest",
                found: manifest.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        manifest.split.validate(&manifest.subjects)?;
        let dense = load_grid(&dir.join(&manifest.dense_grid))?;
        if dense.hash().to_hex() != manifest.dense_hash {
            return Err(Error::GridMismatch {
                role: "dense",
                expected: manifest.dense_hash.clone(),
                found: dense.hash().to_hex(),
            });
        }
        let split = KnownSplit::from_labeled(dense)?;
        let known_file = load_grid(&dir.join(&manifest.known_grid))?;
        for found in [split.known.hash(), known_file.hash()] {
            if found.to_hex() != manifest.known_hash {
                return Err(Error::GridMismatch {
                    role: "sparse",
                    expected: manifest.known_hash.clone(),
                    found: found.to_hex(),
                });
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            split,
        })
    }

    /// Both ears of each listed subject, in subject then ear order.
    pub fn load_subjects(&self, subjects: &[u32]) -> Result<Vec<HrtfField>> {
        let mut out = Vec::new();
        for &s in subjects {
            for ear in Ear::BOTH {
                let entry = self
                    .manifest
                    .fields
                    .iter()
                    .find(|f| f.subject == s && f.ear == ear)
                    .ok_or_else(|| {
                        Error::Dataset(format!("manifest lists no field for subject {s} {ear}"))
                    })?;
                let field = load_field(&self.dir.join(&entry.file))?;
                if field.grid.hash() != self.split.dense.hash() {
                    return Err(Error::GridMismatch {
                        role: "dense",
                        expected: self.split.dense.hash().to_hex(),
                        found: field.grid.hash().to_hex(),
                    });
                }
                if field.subject_id != s || field.ear != ear {
                    return Err(Error::Dataset(format!(
                        "{} holds subject {} {}, manifest says subject {s} {ear}",
                        entry.file, field.subject_id, field.ear
                    )));
                }
                out.push(field);
            }
        }
        Ok(out)
    }

    pub fn frequencies(&self) -> Result<FrequencyAxis> {
        self.manifest.config.frequency_axis()
    }

    /// Checks that the data-shape fields of `cfg` agree with the dataset.
    pub fn check_config(&self, cfg: &RunConfig) -> Result<()> {
        let checks = [
            (
                "grid.dense_points",
                cfg.grid.dense_points,
                self.split.dense.len(),
            ),
            (
                "grid.known_points",
                cfg.grid.known_points,
                self.split.known.len(),
            ),
            (
                "dataset.bins",
                cfg.dataset.bins,
                self.manifest.config.dataset.bins,
            ),
        ];
        for (field, ours, theirs) in checks {
            if ours != theirs {
                return Err(Error::config(
                    field,
                    format!("config says {ours}, dataset has {theirs}"),
                ));
            }
        }
        Ok(())
    }

    fn samples(&self, fields: &[HrtfField]) -> Result<Vec<Sample>> {
        fields
            .iter()
            .map(|f| {
                Ok(Sample {
                    input: crate::data::select_rows(&f.values, &self.split.known_indices)?,
                    target: f.values.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub parameters: usize,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_lsd: Option<f64>,
    pub steps: u64,
}

/// Trains on the dataset's training subjects with early stopping on the
/// validation subjects. Writes `checkpoint.bin` (best parameters),
/// `history.tsv`, `train_summary.json` and a config snapshot.
pub fn train(cfg: &RunConfig, dataset_dir: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = Dataset::open(dataset_dir)?;
    ds.check_config(cfg)?;
    let arch = cfg.architecture(cfg.dataset.bins);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(SeedStream::Init));
    let init = ModelParams::initialize(
        &arch,
        ds.split.known.clone(),
        ds.split.dense.clone(),
        &mut rng,
    )?;
    eprintln!("model parameters: {}", init.num_params());
    let network = Network::new(&init, &cfg.sht_config())?;

    let train_set = ds.samples(&ds.load_subjects(&ds.manifest.split.train)?)?;
    let val_set = ds.samples(&ds.load_subjects(&ds.manifest.split.validation)?)?;
    let tc = cfg.train_config();
    let outcome = optim::train(&network, init, &train_set, &val_set, &tc, |r| {
        eprintln!(
            "epoch {:>4}  train {:.6}  val {:.6}",
            r.epoch, r.train_lsd, r.val_lsd
        );
    })?;

    create_dir(out)?;
    checkpoint::save(&outcome.best, &out.join("checkpoint.bin"))?;
    write_file(&out.join("history.tsv"), format_history(&outcome.history))?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml())?;
    let summary = TrainSummary {
        parameters: outcome.best.num_params(),
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_lsd: outcome.best_epoch.map(|e| outcome.history[e - 1].val_lsd),
        steps: outcome.steps,
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write_file(&out.join("train_summary.json"), json)?;
    Ok(summary)
}

/// Runs a checkpoint on a sparse field file and writes the dense prediction.
pub fn interpolate(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    input: &Path,
    output: &Path,
) -> Result<HrtfField> {
    let params = checkpoint::load(checkpoint_path)?;
    eprintln!("model parameters: {}", params.num_params());
    let field = load_field(input)?;
    if field.grid.hash() != params.sparse_grid.hash() {
        return Err(Error::GridMismatch {
            role: "sparse",
            expected: params.sparse_grid.hash().to_hex(),
            found: field.grid.hash().to_hex(),
        });
    }
    if field.freqs.len() != params.channels {
        return Err(Error::mismatch(
            "input frequency bins vs checkpoint channels",
            params.channels,
            field.freqs.len(),
        ));
    }
    let network = Network::new(&params, &cfg.sht_config())?;
    let dense = network.forward(&params, &field.values)?;
    let out = HrtfField::new(
        dense,
        params.dense_grid.clone(),
        field.freqs.clone(),
        field.subject_id,
        field.ear,
    )?;
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            create_dir(parent)?;
        }
    }
    save_field(&out, output)?;
    Ok(out)
}

fn load_model_for(ds: &Dataset, path: &Path) -> Result<ModelParams> {
    let params = checkpoint::load(path)?;
    for (role, ours, theirs) in [
        ("sparse", &ds.split.known, &params.sparse_grid),
        ("dense", &ds.split.dense, &params.dense_grid),
    ] {
        if ours.hash() != theirs.hash() {
            return Err(Error::GridMismatch {
                role,
                expected: theirs.hash().to_hex(),
                found: ours.hash().to_hex(),
            });
        }
    }
    Ok(params)
}

/// Scores `method` on both ears of every test subject, restricted to the
/// unknown directions. Writes `per_subject.tsv`, `per_frequency.tsv`,
/// `slice.tsv`, `summary.json` and a config snapshot.
pub fn evaluate(
    cfg: &RunConfig,
    dataset_dir: &Path,
    method: &Method,
    out: &Path,
) -> Result<EvalReport> {
    cfg.validate()?;
    let ds = Dataset::open(dataset_dir)?;
    ds.check_config(cfg)?;
    if ds.split.unknown_indices.is_empty() {
        return Err(Error::Eval("dataset has no unknown directions".into()));
    }
    let freqs = ds.frequencies()?;
    let test = &ds.manifest.split.test;
    if test.is_empty() {
        return Err(Error::Eval("dataset has no test subjects".into()));
    }
    let fields = ds.load_subjects(test)?;

    let (label, predicted): (String, Vec<DMatrix<f64>>) = match method {
        Method::Checkpoint(p) | Method::ZeroKernel(p) => {
            let mut params = load_model_for(&ds, p)?;
            let label = if let Method::ZeroKernel(_) = method {
                params = ModelParams::zeros(
                    &params.architecture(),
                    params.sparse_grid.clone(),
                    params.dense_grid.clone(),
                )?;
                "zero-kernel model".to_string()
            } else {
                "spherical CNN".to_string()
            };
            eprintln!("model parameters: {}", params.num_params());
            if params.channels != freqs.len() {
                return Err(Error::mismatch(
                    "checkpoint channels vs dataset bins",
                    freqs.len(),
                    params.channels,
                ));
            }
            let network = Network::new(&params, &cfg.sht_config())?;
            let inputs = ds.samples(&fields)?;
            let preds = inputs
                .par_iter()
                .map(|s| network.forward(&params, &s.input))
                .collect::<Result<Vec<_>>>()?;
            (label, preds)
        }
        Method::Baseline(order) => {
            let preds = fields
                .par_iter()
                .map(|f| {
                    let known = crate::data::select_rows(&f.values, &ds.split.known_indices)?;
                    eval::sh_baseline(&known, &ds.split.known, *order, &ds.split.dense)
                })
                .collect::<Result<Vec<_>>>()?;
            (eval::baseline_label(*order), preds)
        }
        Method::GroundTruth => (
            "ground truth".to_string(),
            fields.iter().map(|f| f.values.clone()).collect(),
        ),
    };

    let predictions: Vec<Prediction<'_>> = fields
        .iter()
        .zip(&predicted)
        .map(|(f, p)| Prediction {
            subject: f.subject_id,
            ear: f.ear,
            predicted: p,
            truth: &f.values,
        })
        .collect();
    let mut report = build_report(
        label,
        &predictions,
        &ds.split.unknown_indices,
        freqs.values(),
    )?;
    let curve_rms = eval::rms(&report.per_frequency_lsd);
    if (curve_rms - report.pooled_lsd).abs() > 1e-12 * report.pooled_lsd.max(f64::MIN_POSITIVE) {
        return Err(Error::Eval(format!(
            "per-frequency RMS {curve_rms} disagrees with pooled LSD {}",
            report.pooled_lsd
        )));
    }
    report.config = Some(serde_json::to_value(cfg).expect("config serializes"));

    let slice_subject = if cfg.eval.slice_subject == 0 {
        test[0]
    } else {
        cfg.eval.slice_subject
    };
    let idx = fields
        .iter()
        .position(|f| f.subject_id == slice_subject && f.ear == Ear::Left)
        .ok_or_else(|| {
            Error::Eval(format!(
                "slice subject {slice_subject} is not a test subject (test set: {test:?})"
            ))
        })?;
    let slice = export_slice(
        &predicted[idx],
        &ds.split.dense,
        freqs.values(),
        cfg.eval.slice_phi,
        cfg.eval.slice_tolerance,
    )?;

    create_dir(out)?;
    write_file(&out.join("per_subject.tsv"), report.per_subject_table())?;
    write_file(&out.join("per_frequency.tsv"), report.per_frequency_table())?;
    write_file(&out.join("slice.tsv"), format_slice(&slice))?;
    write_file(&out.join("summary.json"), report.summary_json())?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(report)
}

/// Entry point used by the binary: runs the CLI and maps failures to a single
/// `hrtf-sphconv: error[kind]: message` line and exit status 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(
                std::io::stderr(),
                "hrtf-sphconv: error[{}]: {msg}",
                e.kind()
            );
            1
        }
    }
}
