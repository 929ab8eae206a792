//! Command-line entry point. Every failure ends the process with exit code 1
//! and one JSON error line on stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use privsynth_core::metrics::{privacy_report, EmbeddingInputs, SimPairing};
use privsynth_core::orchestrator::SyntheticDataset;
use privsynth_core::sanitizer::{build_bundle, FeatureService, ManifestEntry, PrivacyPreference, SanitizedBundle};
use privsynth_core::utility::evaluate_dataset;

use crate::backend::{connect, SharedBackend};
use crate::config::Config;
use crate::error::{Error, ErrorEnvelope, Result};
use crate::files::{self, EmbeddingsFile};
use crate::pipeline::{self, ExperimentOptions, ExperimentRow};
use crate::{conformance, pngio, service, wire};

#[derive(Debug, Parser)]
#[command(name = "privsynth", version, about = "Privacy-preserving synthetic training data")]
pub struct Cli {
    /// TOML file with defaults; PRIVSYNTH_* variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment reference images into a mask manifest.
    Segment {
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        backend: Option<String>,
    },
    /// Sanitize reference images into a bundle.
    Sanitize {
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        preference: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw role canvases here, for measure-privacy.
        #[arg(long)]
        refs_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Feature extractor for L1 segments.
        #[arg(long)]
        backend: Option<String>,
    },
    /// Compute MI (and SIM when embeddings are given) for a bundle.
    MeasurePrivacy {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce an embeddings file for measure-privacy from a backend.
    Embed {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        matched: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune and generate a synthetic dataset from a bundle.
    Generate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        backend: Option<String>,
        /// Samples per class (per target prompt for detection).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and report utility.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        split: Option<f64>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        predictions_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One table row per privacy preference.
    Tradeoff {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Preferences separated by `;`, e.g. "t=L0,b=L0;t=L2,b=L0".
        #[arg(long)]
        preferences: Option<String>,
        /// Repeatable alternative to --preferences.
        #[arg(long)]
        preference: Vec<String>,
    },
    /// One table row per noise level added to the target roles.
    NoiseSweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Comma-separated standard deviations.
        #[arg(long, default_value = "5,10,50")]
        sigma: String,
        /// Preference the noise is added to.
        #[arg(long, default_value = "t=L2,b=L0")]
        preference: String,
    },
    /// Run the job server.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Check a backend server against the protocol.
    Conformance {
        #[arg(long)]
        backend: String,
    },
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub request: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    /// CSV table; plot data goes to `<out>.plot.json`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let message = e.to_string().lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string();
            let message = message.strip_prefix("error: ").unwrap_or(&message).to_string();
            report(&ErrorEnvelope {
                code: "usage_error".into(),
                message,
                retryable: false,
                field: None,
            });
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            report(&e.envelope());
            1
        }
    }
}

fn report(env: &ErrorEnvelope) {
    let line = serde_json::to_string(env).expect("envelope serializes");
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

fn init_tracing(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_env("PRIVSYNTH_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn backend_for(config: &Config, flag: &Option<String>) -> Result<SharedBackend> {
    connect(flag.as_deref().unwrap_or(&config.backend), config.timeout())
}

fn read_bundle(path: &Path) -> Result<SanitizedBundle> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    wire::from_json(&bytes)
}

fn parse_preference(s: &str) -> Result<PrivacyPreference> {
    s.parse().map_err(|e: privsynth_core::Error| Error::schema("preference", e.to_string()))
}

pub fn run(cli: Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref())?;
    if !matches!(cli.command, Command::Serve { .. }) {
        init_tracing("off");
    }
    match cli.command {
        Command::Segment {
            request,
            images,
            out,
            backend,
        } => {
            let request = files::read_request(&request)?;
            let backend = backend_for(&config, &backend)?;
            let mut entries = Vec::new();
            for name in png_names(&images)? {
                let img = pngio::read(&images.join(&name))?;
                let masks = backend.segment(&img, &request.target_objects)?;
                entries.push(ManifestEntry { image: name, masks });
            }
            files::write_manifest(&out, &entries)
        }
        Command::Sanitize {
            request,
            images,
            manifest,
            preference,
            out,
            refs_out,
            seed,
            backend,
        } => {
            let request = files::read_request(&request)?;
            let preference = parse_preference(&preference)?;
            let (imgs, entries) = files::load_references(&images, &manifest)?;
            let backend = backend_for(&config, &backend)?;
            let mut opts = ExperimentOptions::from_config(&config);
            if let Some(s) = seed {
                opts = opts.with_seed(s);
            }
            let features: &dyn FeatureService = backend.as_ref();
            let bundle = build_bundle(&request, &imgs, &entries, &preference, &opts.sanitizer, Some(features))?;
            files::write_bytes(&out, &wire::to_json(&bundle))?;
            if let Some(dir) = refs_out {
                let refs = pipeline::reference_set(&request, &imgs, &entries)?;
                let names: Vec<String> = entries.iter().map(|e| e.image.clone()).collect();
                files::write_refs(&dir, &names, &refs)?;
            }
            Ok(())
        }
        Command::MeasurePrivacy {
            refs,
            bundle,
            embeddings,
            out,
        } => {
            let bundle = read_bundle(&bundle)?;
            let refs = files::read_refs(&refs, &bundle)?;
            let inputs = match embeddings {
                Some(p) => files::read_json::<EmbeddingsFile>(&p)?.into_inputs()?,
                None => EmbeddingInputs::default(),
            };
            let report = privacy_report(&refs, &bundle, &inputs)?;
            files::write_privacy_report(&out, &[report])
        }
        Command::Embed {
            refs,
            bundle,
            dataset,
            backend,
            matched,
            out,
        } => {
            let bundle = read_bundle(&bundle)?;
            let refs = files::read_refs(&refs, &bundle)?;
            let ds = files::read_dataset(&dataset)?;
            let backend = backend_for(&config, &backend)?;
            let names: Vec<String> = bundle.entries.iter().map(|e| e.name.clone()).collect();
            let pairing = if matched { SimPairing::Matched } else { SimPairing::AllPairs };
            let file = pipeline::embeddings_file(&bundle.request, &names, &refs, &ds, backend.as_ref(), pairing)?;
            files::write_json(&out, &file)
        }
        Command::Generate {
            bundle,
            backend,
            count,
            seed,
            width,
            height,
            out,
        } => {
            let backend = backend_for(&config, &backend)?;
            let bundle = read_bundle(&bundle)?;
            let mut opts = ExperimentOptions::from_config(&config);
            if let Some(s) = seed {
                opts = opts.with_seed(s);
            }
            opts.assembly.count_per_class = count.unwrap_or(opts.assembly.count_per_class);
            opts.assembly.width = width.unwrap_or(opts.assembly.width);
            opts.assembly.height = height.unwrap_or(opts.assembly.height);
            let (_, ds) = pipeline::synthesize(&bundle, backend.as_ref(), &opts)?;
            files::write_dataset(&out, &ds)
        }
        Command::Evaluate {
            dataset,
            test,
            backend,
            split,
            epochs,
            seed,
            predictions_out,
            out,
        } => {
            let ds = files::read_dataset(&dataset)?;
            let test = test.as_deref().map(files::read_dataset).transpose()?;
            let backend = backend_for(&config, &backend)?;
            let mut opts = ExperimentOptions::from_config(&config);
            if let Some(s) = seed {
                opts = opts.with_seed(s);
            }
            opts.train_fraction = split.unwrap_or(opts.train_fraction);
            opts.epochs = epochs;
            let report = evaluate_dataset(&ds, test.as_ref(), backend.as_ref(), &opts.utility_config(ds.task))?;
            files::write_json(&out, &report)?;
            if let Some(p) = predictions_out {
                let target: &SyntheticDataset = test.as_ref().unwrap_or(&ds);
                let images: Vec<_> = target.samples.iter().map(|s| s.image.clone()).collect();
                let preds = backend.predict(&report.model, &images)?;
                files::write_predictions(&p, target, &preds)?;
            }
            Ok(())
        }
        Command::Tradeoff {
            exp,
            preferences,
            preference,
        } => {
            let mut prefs: Vec<String> = preferences
                .iter()
                .flat_map(|s| s.split(';'))
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            prefs.extend(preference);
            if prefs.is_empty() {
                return Err(Error::schema("preferences", "at least one preference is required"));
            }
            let prefs = prefs.iter().map(|p| parse_preference(p)).collect::<Result<Vec<_>>>()?;
            experiment(&config, &exp, prefs.into_iter().map(|p| (None, p)).collect())
        }
        Command::NoiseSweep {
            exp,
            sigma,
            preference,
        } => {
            let base = parse_preference(&preference)?;
            let mut runs = Vec::new();
            for s in sigma.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::schema("sigma", format!("{s:?} is not a number")))?;
                runs.push((Some(v), pipeline::with_target_noise(&base, v)?));
            }
            if runs.is_empty() {
                return Err(Error::schema("sigma", "at least one value is required"));
            }
            experiment(&config, &exp, runs)
        }
        Command::Serve {
            listen,
            backend,
            data_dir,
        } => {
            init_tracing("info");
            let mut config = config;
            config.listen = listen.unwrap_or(config.listen);
            config.data_dir = data_dir.unwrap_or(config.data_dir);
            let backend = backend_for(&config, &backend)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Config(e.to_string()))?;
            rt.block_on(service::serve(config, backend))
        }
        Command::Conformance { backend } => {
            let checks = conformance::run(&backend, config.timeout());
            let mut stdout = std::io::stdout().lock();
            for c in &checks {
                let line = serde_json::to_string(c)?;
                let _ = writeln!(stdout, "{line}");
            }
            let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Backend(privsynth_core::backend::BackendError::new(
                    "conformance_failed",
                    format!("failed checks: {}", failed.join(", ")),
                    false,
                )))
            }
        }
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let entry = entry.map_err(Error::io(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn experiment(config: &Config, exp: &ExperimentArgs, runs: Vec<(Option<f64>, PrivacyPreference)>) -> Result<()> {
    let request = files::read_request(&exp.request)?;
    let (imgs, entries) = files::load_references(&exp.images, &exp.manifest)?;
    let test = exp.test.as_deref().map(files::read_dataset).transpose()?;
    let backend = backend_for(config, &exp.backend)?;
    let mut opts = ExperimentOptions::from_config(config);
    if let Some(s) = exp.seed {
        opts = opts.with_seed(s);
    }
    opts.epochs = exp.epochs;
    opts.assembly.count_per_class = exp.count.unwrap_or(opts.assembly.count_per_class);
    opts.assembly.width = exp.width.unwrap_or(opts.assembly.width);
    opts.assembly.height = exp.height.unwrap_or(opts.assembly.height);
    let mut rows: Vec<ExperimentRow> = Vec::with_capacity(runs.len());
    for (sigma, pref) in runs {
        tracing::info!(preference = %pref, "running");
        let mut row =
            pipeline::run_preference(&request, &imgs, &entries, &pref, backend.as_ref(), test.as_ref(), &opts)?;
        row.sigma = sigma;
        rows.push(row);
    }
    files::write_bytes(&exp.out, pipeline::table_csv(&rows).as_bytes())?;
    let mut plot = exp.out.clone().into_os_string();
    plot.push(".plot.json");
    files::write_json(Path::new(&plot), &pipeline::plot_data(&rows))
}
