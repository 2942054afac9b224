//! Command-line interface: simulate, train, predict, evaluate, grad-check,
//! influence-report, kernel-dump, validate.
//!
//! One-line summaries go to stdout, diagnostics to stderr. Outputs are
//! written atomically (temp file + rename). Exit codes: 1 for usage or
//! configuration errors, 2 for data/validation errors, 3 for numerical
//! failures.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use ndarray::{Array1, Array2};

use texthawkes::estimation::{self, TrainConfig};
use texthawkes::eval::{self, PredictMode};
use texthawkes::format::{load_corpus, save_corpus, CorpusSchema};
use texthawkes::likelihood::{self, McConfig};
use texthawkes::simulation::{simulate, EmbeddingSpec, SimSpec};
use texthawkes::{Corpus, Error, ModelParams, Variant};

use config::{apply_config_file, apply_overrides, TrainOverrides};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite { .. } | Error::Unstable(_) => EXIT_NUMERICAL,
            Error::InvalidParams(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_DATA,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "texthawkes",
    version,
    about = "Hawkes-process stance classifiers over timestamped, text-embedded event threads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Master seed; simulation, initialization, and Monte Carlo streams are
    /// derived from it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Worker threads for per-thread and per-fold parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Keep per-thread reductions in a fixed order so results do not depend
    /// on the worker count.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    reproducible_reduction: bool,

    /// More logging on stderr (-v debug, -vv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a corpus file against every format and type invariant.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus schema identifier.
        #[arg(long, default_value = "jsonl-v1")]
        schema: String,
    },

    /// Generate a corpus by Ogata thinning and write the ground truth next
    /// to it.
    Simulate {
        /// Output corpus path.
        #[arg(long)]
        out: PathBuf,
        /// Where to write the generating parameters as a model file.
        #[arg(long)]
        params_out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        num_labels: usize,
        /// Per-label base rate: one value for all labels or a comma list.
        #[arg(long, default_value = "0.1")]
        mu: String,
        /// Full influence matrix, row-major comma list of num_labels^2 values.
        #[arg(long)]
        alpha: Option<String>,
        /// Diagonal influence when --alpha is not given.
        #[arg(long, default_value_t = 0.0)]
        alpha_diag: f64,
        /// Off-diagonal influence when --alpha is not given.
        #[arg(long, default_value_t = 0.0)]
        alpha_off: f64,
        #[arg(long, default_value_t = 1.0)]
        omega: f64,
        /// Observation window length per thread (hours).
        #[arg(long, default_value_t = 50.0)]
        horizon: f64,
        #[arg(long, default_value_t = 100)]
        threads: usize,
        /// Embedding dimension for per-label Gaussian clusters (0 = zero
        /// vectors of dimension 1).
        #[arg(long, default_value_t = 0)]
        embedding_dim: usize,
        /// Distance of each label's cluster mean from the origin.
        #[arg(long, default_value_t = 2.0)]
        cluster_scale: f64,
        /// Isotropic standard deviation within each cluster.
        #[arg(long, default_value_t = 0.5)]
        cluster_std: f64,
    },

    /// Fit a model by maximum likelihood and save it.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        /// Flat key = value config file (defaults < file < flags).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },

    /// Label each event of a corpus with a trained model.
    Predict {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output CSV of per-event predictions.
        #[arg(long)]
        out: PathBuf,
        /// Test-time history labels: online (model's own) or oracle (true).
        #[arg(long, default_value = "online")]
        mode: String,
        /// Also dump per-event intensities of every label as CSV.
        #[arg(long)]
        intensity_out: Option<PathBuf>,
    },

    /// Leave-one-out evaluation; one fold per thread or per named corpus.
    Evaluate {
        /// Corpus file, repeatable. The event protocol takes NAME=PATH pairs.
        #[arg(long, required = true)]
        corpus: Vec<String>,
        /// Fold protocol: thread or event.
        #[arg(long, default_value = "thread")]
        protocol: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Test-time history labels: online or oracle.
        #[arg(long, default_value = "online")]
        mode: String,
        /// Also write the per-fold report as CSV.
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },

    /// Compare analytic gradients against central finite differences.
    GradCheck {
        #[arg(long)]
        corpus: PathBuf,
        /// Check a trained model instead of seeded random parameters.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Maximum relative error (default 1e-5; 1e-3 for the neural kernel).
        #[arg(long)]
        tolerance: Option<f64>,
    },

    /// Print the influence matrix with row-max and runner-up flags.
    InfluenceReport {
        #[arg(long)]
        model: PathBuf,
    },

    /// Dump neural-kernel shape profiles as CSV.
    KernelDump {
        #[arg(long)]
        model: PathBuf,
        /// Output CSV of (dt, kernel value) on a grid with fixed embeddings.
        #[arg(long)]
        time_out: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        max_dt: f64,
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Output CSV of (cosine similarity, kernel value) over same-thread
        /// event pairs; needs --corpus.
        #[arg(long)]
        text_out: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Largest pair time difference for the text profile (hours).
        #[arg(long, default_value_t = 1.0)]
        pair_max_dt: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let level = if cli.quiet {
        "warn"
    } else {
        match cli.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    log::info!(
        "seed={} workers={} reproducible_reduction={}",
        cli.seed,
        if cli.workers == 0 { num_cpus() } else { cli.workers },
        cli.reproducible_reduction
    );

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn num_cpus() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Write through a temp file in the same directory, then rename into place.
fn write_atomic(path: &Path, content: &[u8]) -> CliResult<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::usage(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        "{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load(path: &Path, schema: CorpusSchema) -> CliResult<Corpus> {
    let corpus = load_corpus(path, schema)?;
    log::info!(
        "loaded {}: {} threads, {} events, {} labels, embedding dim {}",
        path.display(),
        corpus.threads.len(),
        corpus.num_events(),
        corpus.num_labels,
        corpus.embedding_dim
    );
    Ok(corpus)
}

fn resolve_train_config(
    seed: u64,
    config_path: &Option<PathBuf>,
    overrides: &TrainOverrides,
) -> CliResult<TrainConfig> {
    let mut config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if let Some(path) = config_path {
        apply_config_file(&mut config, path).map_err(CliError::usage)?;
    }
    apply_overrides(&mut config, overrides).map_err(CliError::usage)?;
    config.validate()?;
    log::info!("resolved config: {config:?}");
    Ok(config)
}

fn parse_mode(mode: &str) -> CliResult<PredictMode> {
    match mode {
        "online" => Ok(PredictMode::Online),
        "oracle" => Ok(PredictMode::Oracle),
        other => Err(CliError::usage(format!(
            "unknown mode `{other}` (expected online or oracle)"
        ))),
    }
}

fn parse_comma_f64(text: &str, what: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| CliError::usage(format!("bad {what} entry `{p}`: {e}")))
        })
        .collect()
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Validate { corpus, schema } => {
            let schema: CorpusSchema = schema.parse()?;
            // The raw loader parses records but leaves the invariant check
            // to us, so every violation gets listed.
            let corpus = texthawkes::format::load_corpus_raw(&corpus, schema)?;
            let violations = corpus.validate();
            if violations.is_empty() {
                println!(
                    "ok: {} threads, {} events, {} labels",
                    corpus.threads.len(),
                    corpus.num_events(),
                    corpus.num_labels
                );
                Ok(())
            } else {
                for v in &violations {
                    println!("{v}");
                }
                Err(CliError {
                    code: EXIT_DATA,
                    message: format!("{} violation(s)", violations.len()),
                })
            }
        }

        Command::Simulate {
            out,
            params_out,
            num_labels,
            mu,
            alpha,
            alpha_diag,
            alpha_off,
            omega,
            horizon,
            threads,
            embedding_dim,
            cluster_scale,
            cluster_std,
        } => {
            let mu_values = parse_comma_f64(&mu, "mu")?;
            let mu = match mu_values.len() {
                1 => Array1::from_elem(num_labels, mu_values[0]),
                n if n == num_labels => Array1::from_vec(mu_values),
                n => {
                    return Err(CliError::usage(format!(
                        "--mu needs 1 or {num_labels} values, got {n}"
                    )))
                }
            };
            let alpha = match alpha {
                Some(text) => {
                    let values = parse_comma_f64(&text, "alpha")?;
                    Array2::from_shape_vec((num_labels, num_labels), values).map_err(|_| {
                        CliError::usage(format!("--alpha needs {} values", num_labels * num_labels))
                    })?
                }
                None => Array2::from_shape_fn((num_labels, num_labels), |(i, j)| {
                    if i == j {
                        alpha_diag
                    } else {
                        alpha_off
                    }
                }),
            };
            let embedding = (embedding_dim > 0).then(|| EmbeddingSpec {
                means: (0..num_labels)
                    .map(|y| {
                        let mut m = Array1::zeros(embedding_dim);
                        m[y % embedding_dim] = cluster_scale;
                        m
                    })
                    .collect(),
                stddev: cluster_std,
            });
            let spec = SimSpec {
                mu,
                alpha,
                omega,
                horizon,
                num_threads: threads,
                embedding,
                seed: cli.seed,
            };
            let corpus = simulate(&spec)?;
            let mut buf = Vec::new();
            save_corpus(&corpus, &mut buf)?;
            write_atomic(&out, &buf)?;
            if let Some(params_path) = &params_out {
                save_model_atomic(&spec.true_params(), &corpus.label_names, params_path)?;
            }
            println!(
                "simulated {} threads, {} events -> {}",
                corpus.threads.len(),
                corpus.num_events(),
                out.display()
            );
            Ok(())
        }

        Command::Train {
            corpus,
            model_out,
            config,
            overrides,
        } => {
            let config = resolve_train_config(cli.seed, &config, &overrides)?;
            let corpus = load(&corpus, CorpusSchema::JsonLinesV1)?;
            let result = estimation::fit(&corpus, &config)?;
            save_model_atomic(&result.params, &corpus.label_names, &model_out)?;
            println!(
                "trained variant={} ll={:.6} iterations={} converged={} -> {}",
                config.variant,
                result.final_ll.total,
                result.iterations,
                result.converged,
                model_out.display()
            );
            Ok(())
        }

        Command::Predict {
            corpus,
            model,
            out,
            mode,
            intensity_out,
        } => {
            let mode = parse_mode(&mode)?;
            let corpus = load(&corpus, CorpusSchema::JsonLinesV1)?;
            let model = estimation::load_model(&model)?;
            model.check_compatible(&corpus)?;

            let mut csv = String::from("thread_id,event_index,t,true_label,predicted_label\n");
            let mut confusion = Array2::<u64>::zeros((corpus.num_labels, corpus.num_labels));
            for thread in &corpus.threads {
                let preds = eval::predict_thread(&model.params, thread, mode)?;
                for (i, (ev, &p)) in thread.events.iter().zip(&preds).enumerate() {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        thread.id, i, ev.time, corpus.label_names[ev.label], corpus.label_names[p]
                    ));
                }
                let truth: Vec<usize> = thread.events.iter().map(|e| e.label).collect();
                eval::accumulate_confusion(&mut confusion, &truth, &preds);
            }
            write_atomic(&out, csv.as_bytes())?;
            if let Some(path) = &intensity_out {
                let dump = eval::intensity_dump(&model.params, &corpus)?;
                write_atomic(path, dump.as_bytes())?;
            }
            let accuracy = eval::micro_accuracy(&confusion)?;
            let f1 = eval::macro_f1(&confusion)?;
            println!(
                "predicted {} events, accuracy={accuracy:.4} macro_f1={f1:.4} -> {}",
                corpus.num_events(),
                out.display()
            );
            Ok(())
        }

        Command::Evaluate {
            corpus,
            protocol,
            config,
            overrides,
            mode,
            csv_out,
        } => {
            let mode = parse_mode(&mode)?;
            let config = resolve_train_config(cli.seed, &config, &overrides)?;
            let report = match protocol.as_str() {
                "thread" => {
                    if corpus.len() != 1 {
                        return Err(CliError::usage(
                            "the thread protocol takes exactly one --corpus",
                        ));
                    }
                    let c = load(Path::new(&corpus[0]), CorpusSchema::JsonLinesV1)?;
                    eval::leave_one_thread_out_mode(&c, &config, mode)?
                }
                "event" => {
                    let mut named = Vec::new();
                    for entry in &corpus {
                        let (name, path) = match entry.split_once('=') {
                            Some((name, path)) => (name.to_string(), PathBuf::from(path)),
                            None => {
                                let path = PathBuf::from(entry);
                                let name = path
                                    .file_stem()
                                    .map(|s| s.to_string_lossy().into_owned())
                                    .unwrap_or_else(|| entry.clone());
                                (name, path)
                            }
                        };
                        named.push((name, load(&path, CorpusSchema::JsonLinesV1)?));
                    }
                    eval::leave_one_event_out_mode(&named, &config, mode)?
                }
                other => {
                    return Err(CliError::usage(format!(
                        "unknown protocol `{other}` (expected thread or event)"
                    )))
                }
            };
            println!("{report}");
            if let Some(path) = &csv_out {
                write_atomic(path, report.to_csv().as_bytes())?;
            }
            Ok(())
        }

        Command::GradCheck {
            corpus,
            model,
            config,
            overrides,
            tolerance,
        } => {
            let config = resolve_train_config(cli.seed, &config, &overrides)?;
            let corpus = load(&corpus, CorpusSchema::JsonLinesV1)?;
            let params = match &model {
                Some(path) => {
                    let loaded = estimation::load_model(path)?;
                    loaded.check_compatible(&corpus)?;
                    loaded.params
                }
                None => seeded_check_params(&corpus, &config),
            };
            let tolerance = tolerance.unwrap_or(match params.variant {
                Variant::NeuralKernelHp => 1e-3,
                _ => 1e-5,
            });
            let mc = McConfig {
                samples: config.nn.mc_samples,
                seed: cli.seed,
            };
            let report = likelihood::grad_check(&params, &corpus, &mc, tolerance)?;
            println!("{report}");
            if report.pass {
                Ok(())
            } else {
                Err(CliError::numerical("gradient check failed"))
            }
        }

        Command::InfluenceReport { model } => {
            let model = estimation::load_model(&model)?;
            print!(
                "{}",
                eval::influence_report(&model.params, &model.label_names)
            );
            Ok(())
        }

        Command::KernelDump {
            model,
            time_out,
            max_dt,
            points,
            text_out,
            corpus,
            pair_max_dt,
        } => {
            let model = estimation::load_model(&model)?;
            let rows = eval::kernel_time_profile(&model.params, max_dt, points, None)?;
            write_atomic(
                &time_out,
                eval::profile_csv("dt", "kernel_value", &rows).as_bytes(),
            )?;
            let mut summary = format!("{} time rows -> {}", rows.len(), time_out.display());
            match (&text_out, &corpus) {
                (Some(text_path), Some(corpus_path)) => {
                    let corpus = load(corpus_path, CorpusSchema::JsonLinesV1)?;
                    let pairs = eval::kernel_text_profile(&model.params, &corpus, pair_max_dt)?;
                    write_atomic(
                        text_path,
                        eval::profile_csv("cosine_similarity", "kernel_value", &pairs).as_bytes(),
                    )?;
                    summary.push_str(&format!(
                        ", {} pair rows -> {}",
                        pairs.len(),
                        text_path.display()
                    ));
                }
                (Some(_), None) => {
                    return Err(CliError::usage("--text-out needs --corpus for the pairs"))
                }
                _ => {}
            }
            println!("{summary}");
            Ok(())
        }
    }
}

/// Seeded, mildly randomized parameters for a standalone gradient check:
/// zero weights would hide softmax-gradient bugs behind symmetry.
fn seeded_check_params(corpus: &Corpus, config: &TrainConfig) -> ModelParams {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(config.seed);
    let mut params = estimation::init_params(corpus, config);
    params.weights = Array2::from_shape_fn(params.weights.dim(), |_| rng.random_range(-0.3..0.3));
    params.alpha = Array2::from_shape_fn(params.alpha.dim(), |_| rng.random_range(0.05..0.3));
    params
}

fn save_model_atomic(params: &ModelParams, label_names: &[String], path: &Path) -> CliResult<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::usage(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        "{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    estimation::save_model(params, label_names, &tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
