//! Command-line front end: synthetic data, training, denoising, baselines,
//! evaluation, timing and export.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on data errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use medenoise::baselines::{dror, lior, medror};
use medenoise::cloud::{read_cloud, read_codes, read_labels, write_cloud, write_codes, write_labels};
use medenoise::config::RunConfig;
use medenoise::eval::{benchmark, evaluate, write_report_file, ConfusionCounts, ReportRow};
use medenoise::export::{class_images, read_scores_csv, score_images, write_classes_csv, write_pgm_series, write_scores_csv};
use medenoise::inference::{class_codes, correlation_scores, decide, denoise, ScoreMap};
use medenoise::nn::{read_checkpoint, write_checkpoint, Checkpoint, ParameterStore};
use medenoise::sim::{inject_snow, random_street, render, SceneSpec, Severity};
use medenoise::train::{read_loss_log, train, write_loss_log};
use medenoise::{Error, MultiEchoOrderedCloud, Result};

#[derive(Parser)]
#[command(name = "medenoise", version, about = "Multi-echo LiDAR denoising toolkit")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for scene generation, snow, parameter init and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeverityArg {
    Light,
    Medium,
    Heavy,
}

impl From<SeverityArg> for Severity {
    fn from(s: SeverityArg) -> Severity {
        match s {
            SeverityArg::Light => Severity::Light,
            SeverityArg::Medium => Severity::Medium,
            SeverityArg::Heavy => Severity::Heavy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Dror,
    Lior,
    Medror,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Scores,
    Classes,
    LossLog,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Pgm,
}

#[derive(Subcommand)]
enum Verb {
    /// Ray-cast clean street scans (or one scene file) into .meoc/.mel pairs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Render this scene file instead of random streets.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Add snow to clean single-echo scans.
    Inject {
        /// A .meoc file or a directory of them, each with a .mel label file beside it.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        severity: Option<SeverityArg>,
        /// Echo slots of the output (1 or 2).
        #[arg(long)]
        echoes: Option<usize>,
    },
    /// Train both learners on unlabeled scans.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        learning_rate: Option<f64>,
    },
    /// Score and classify scans with a trained model.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run a classical filter.
    Baseline {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare class files with labels and write a report row.
    Eval {
        /// Directory of <stem>.classes.mel files.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of <stem>.mel label files.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "model")]
        method: String,
        #[arg(long, default_value = "unknown")]
        severity: String,
    },
    /// Time a model or a filter per scan (the first scans are warm-up).
    Bench {
        #[arg(long, conflicts_with = "method")]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert score maps, class maps or loss logs for plotting.
    Export {
        #[arg(long, value_enum)]
        what: What,
        #[arg(long, value_enum)]
        format: Format,
        /// Score CSV, class .mel file or loss log CSV.
        #[arg(long)]
        input: PathBuf,
        /// Output file (CSV) or file stem (PGM, one image per echo slot).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_config(cfg: &RunConfig) {
    println!("# effective configuration\n{}", cfg.to_toml());
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    cfg.network.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    match cli.verb {
        Verb::Synth {
            out,
            count,
            height,
            width,
            scene,
        } => {
            if let Some(h) = height {
                cfg.sensor.height = h;
            }
            if let Some(w) = width {
                cfg.sensor.width = w;
            }
            cfg.validate()?;
            print_config(&cfg);
            fs::create_dir_all(&out)?;
            if let Some(path) = scene {
                let spec = SceneSpec::read(&path)?;
                let (cloud, labels) = render(&spec, cfg.seed)?;
                let stem = path.file_stem().map_or("scene".into(), |s| s.to_string_lossy().into_owned());
                save_pair(&out, &stem, &cloud, &labels)?;
                return Ok(());
            }
            for i in 0..count as u64 {
                let seed = cfg.seed.wrapping_add(i);
                let (cloud, labels) = render(&random_street(&cfg.sensor, seed), seed)?;
                save_pair(&out, &format!("scan_{i:04}"), &cloud, &labels)?;
            }
            println!("wrote {count} scans to {}", out.display());
        }
        Verb::Inject {
            input,
            out,
            severity,
            echoes,
        } => {
            if let Some(s) = severity {
                cfg.snow.probability = Severity::from(s).probability();
            }
            if let Some(e) = echoes {
                cfg.snow.echoes = e;
            }
            cfg.validate()?;
            print_config(&cfg);
            fs::create_dir_all(&out)?;
            let files = scan_files(&input)?;
            for (i, path) in files.iter().enumerate() {
                let cloud = read_cloud(path)?;
                let labels = read_labels(path.with_extension("mel"))?;
                let (noisy, noisy_labels) = inject_snow(&cloud, &labels, &cfg.snow, cfg.seed.wrapping_add(i as u64))?;
                save_pair(&out, &stem(path), &noisy, &noisy_labels)?;
            }
            println!("wrote {} scans to {}", files.len(), out.display());
        }
        Verb::Train {
            data,
            out,
            loss_log,
            epochs,
            learning_rate,
        } => {
            if let Some(n) = epochs {
                cfg.train.epochs = n;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            let scans: Vec<MultiEchoOrderedCloud> =
                scan_files(&data)?.iter().map(read_cloud).collect::<Result<_>>()?;
            let echoes = scans[0].echoes();
            if scans.iter().any(|c| c.echoes() != echoes) {
                return Err(Error::Format("training scans differ in echo count".into()));
            }
            cfg.network.neighbors = cfg.encoder.slots();
            cfg.network.echoes = echoes;
            cfg.validate()?;
            print_config(&cfg);
            let mut params = ParameterStore::init(&cfg.network)?;
            println!("{} parameters, {} scans", params.parameter_count(), scans.len());
            let history = train(&mut params, &cfg.encoder, &scans, &cfg.train, |r| {
                println!("epoch {:>3}  loss {:.5}  lr {:.6}", r.epoch, r.mean_loss, r.learning_rate);
            })?;
            write_checkpoint(
                &Checkpoint {
                    encoder: cfg.encoder.clone(),
                    params,
                },
                &out,
            )?;
            if let Some(path) = loss_log {
                write_loss_log(&history, fs::File::create(path)?)?;
            }
        }
        Verb::Denoise {
            model,
            input,
            out,
            threshold,
        } => {
            if let Some(t) = threshold {
                cfg.inference.threshold = t;
            }
            let model = read_checkpoint(&model)?;
            cfg.encoder = model.encoder.clone();
            cfg.network = model.params.config.clone();
            cfg.validate()?;
            print_config(&cfg);
            fs::create_dir_all(&out)?;
            let files = scan_files(&input)?;
            let mut substitutes = 0;
            for path in &files {
                let cloud = read_cloud(path)?;
                let d = denoise(&cloud, &model, &cfg.inference)?;
                substitutes += d.substitute.iter().filter(|&&s| s).count();
                let s = stem(path);
                write_cloud(&d.cleaned, out.join(format!("{s}.meoc")))?;
                write_codes(&class_codes(&cloud, &d.classes), out.join(format!("{s}.classes.mel")))?;
                write_scores_csv(&d.scores, fs::File::create(out.join(format!("{s}.scores.csv")))?)?;
            }
            println!("denoised {} scans, {substitutes} substitutes", files.len());
        }
        Verb::Baseline { method, input, out } => {
            cfg.validate()?;
            print_config(&cfg);
            fs::create_dir_all(&out)?;
            let files = scan_files(&input)?;
            for path in &files {
                let cloud = read_cloud(path)?;
                let d = decide(&cloud, baseline_scores(method, &cloud, &cfg)?, &cfg.inference)?;
                let s = stem(path);
                write_cloud(&d.cleaned, out.join(format!("{s}.meoc")))?;
                write_codes(&class_codes(&cloud, &d.classes), out.join(format!("{s}.classes.mel")))?;
                write_scores_csv(&d.scores, fs::File::create(out.join(format!("{s}.scores.csv")))?)?;
            }
            println!("filtered {} scans", files.len());
        }
        Verb::Eval {
            pred,
            labels,
            out,
            method,
            severity,
        } => {
            print_config(&cfg);
            let mut per_scan: Vec<ConfusionCounts> = Vec::new();
            for path in files_with_suffix(&pred, ".classes.mel")? {
                let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let s = name.trim_end_matches(".classes.mel");
                let codes = read_codes(&path)?;
                let truth = read_labels(labels.join(format!("{s}.mel")))?;
                let removed: Vec<bool> = codes.codes.iter().map(|&c| c == 0).collect();
                per_scan.push(evaluate(&removed, &truth)?);
            }
            if per_scan.is_empty() {
                return Err(Error::Format(format!("no class files in {}", pred.display())));
            }
            let row = ReportRow::from_scans(&method, &severity, &per_scan);
            write_report_file(std::slice::from_ref(&row), &out)?;
            println!(
                "{method} {severity}: {} scans, noise IoU {}, valid IoU {}",
                row.scans,
                fmt_metric(row.iou_noise),
                fmt_metric(row.iou_valid)
            );
        }
        Verb::Bench {
            model,
            method,
            input,
            out,
        } => {
            let model = model.map(read_checkpoint).transpose()?;
            if let Some(m) = &model {
                cfg.encoder = m.encoder.clone();
                cfg.network = m.params.config.clone();
            }
            cfg.validate()?;
            print_config(&cfg);
            let scans: Vec<MultiEchoOrderedCloud> =
                scan_files(&input)?.iter().map(read_cloud).collect::<Result<_>>()?;
            let (name, stats, parameters) = match (&model, method) {
                (Some(m), _) => {
                    let stats = benchmark(&scans, |c| correlation_scores(&m.params, &m.encoder, c).map(drop))?;
                    ("model", stats, Some(m.params.parameter_count()))
                }
                (None, Some(method)) => {
                    let stats = benchmark(&scans, |c| baseline_scores(method, c, &cfg).map(drop))?;
                    (method_name(method), stats, None)
                }
                (None, None) => return Err(Error::Config("bench needs --model or --method".into())),
            };
            println!(
                "{name}: {} timed scans, median {:.3} ms, p95 {:.3} ms",
                stats.scans, stats.median_ms, stats.p95_ms
            );
            if let Some(path) = out {
                let mut row = ReportRow::from_scans(name, "", &[]).with_runtime(&stats);
                row.scans = stats.scans;
                row.parameters = parameters;
                write_report_file(&[row], path)?;
            }
        }
        Verb::Export {
            what,
            format,
            input,
            out,
        } => {
            print_config(&cfg);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            match (what, format) {
                (What::Scores, _) => {
                    let scores = read_scores_any(&input)?;
                    match format {
                        Format::Csv => write_scores_csv(&scores, fs::File::create(&out)?)?,
                        Format::Pgm => {
                            let paths = write_pgm_series(&out, scores.width, scores.height, &score_images(&scores))?;
                            print_paths(&paths);
                        }
                    }
                }
                (What::Classes, _) => {
                    let codes = read_codes(&input)?;
                    match format {
                        Format::Csv => write_classes_csv(&codes, fs::File::create(&out)?)?,
                        Format::Pgm => {
                            let paths = write_pgm_series(&out, codes.width, codes.height, &class_images(&codes))?;
                            print_paths(&paths);
                        }
                    }
                }
                (What::LossLog, Format::Csv) => write_loss_log(&read_loss_log(&input)?, fs::File::create(&out)?)?,
                (What::LossLog, Format::Pgm) => {
                    return Err(Error::Config("loss logs export to CSV only".into()));
                }
            }
        }
    }
    Ok(())
}

fn baseline_scores(method: Method, cloud: &MultiEchoOrderedCloud, cfg: &RunConfig) -> Result<ScoreMap> {
    match method {
        Method::Dror => dror(cloud, &cfg.dror),
        Method::Lior => lior(cloud, &cfg.lior),
        Method::Medror => medror(cloud, &cfg.dror),
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Dror => "dror",
        Method::Lior => "lior",
        Method::Medror => "medror",
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |v| format!("{v:.4}"))
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn save_pair(dir: &Path, stem: &str, cloud: &MultiEchoOrderedCloud, labels: &medenoise::LabelGrid) -> Result<()> {
    write_cloud(cloud, dir.join(format!("{stem}.meoc")))?;
    write_labels(labels, dir.join(format!("{stem}.mel")))
}

/// Files in `dir` ending in `suffix`, sorted by name.
fn files_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.to_string_lossy().ends_with(suffix))
        .collect();
    out.sort();
    Ok(out)
}

/// A single .meoc file, or every .meoc file of a directory.
fn scan_files(path: &Path) -> Result<Vec<PathBuf>> {
    let files = if path.is_dir() {
        files_with_suffix(path, ".meoc")?
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Format(format!("no .meoc scans in {}", path.display())));
    }
    Ok(files)
}

/// Reads a score table whose grid size is implied by its largest indices.
fn read_scores_any(path: &Path) -> Result<ScoreMap> {
    let bytes = fs::read(path)?;
    let mut extent = [0usize; 3];
    for row in csv::Reader::from_reader(&bytes[..]).records() {
        let row = row?;
        for (i, e) in extent.iter_mut().enumerate() {
            let v: usize = row
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("bad score index".into()))?;
            *e = (*e).max(v + 1);
        }
    }
    read_scores_csv(&bytes[..], extent[0], extent[1], extent[2])
}
