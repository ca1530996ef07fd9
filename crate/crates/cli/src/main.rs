//! `domainfuse` command-line entry point.
//!
//! Exit codes: 0 success, 1 internal error, 2 config error, 3 data error,
//! 4 numeric failure (non-finite loss).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use domainfuse::complementarity::complementarity_report;
use domainfuse::config::RunConfig;
use domainfuse::dsp::{Domain, FeatureMatrix};
use domainfuse::ingest::{generate_synthetic, write_dataset_dir};
use domainfuse::models::extract_deep_features;
use domainfuse::nn::{persist, Net, Tensor};
use domainfuse::pipeline::{build_views, prepare, run_pipeline, train_hybrid, train_unimodal, RunOptions, View};
use domainfuse::stats::{
    bayes_compare, bootstrap_diff, diffs_csv, run_ablation, AblationConfig, DiffLabel, Metric, PairDiff,
};
use domainfuse::Error;

#[derive(Parser)]
#[command(name = "domainfuse", version, about = "Complementarity-guided multimodal fusion for 1D signals")]
struct Cli {
    /// Worker threads for internal parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset as class directories plus a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write artifacts under the output directory.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_name: Option<String>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        skip_adasyn: bool,
    },
    /// Train one unimodal encoder.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// time, frequency or time_frequency (or 1D-CNN, Transformer, 2D-CNN).
        #[arg(long)]
        view: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        skip_adasyn: bool,
    },
    /// Export penultimate-layer features of a trained encoder as CSV.
    Features {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: Part,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        skip_adasyn: bool,
    },
    /// Score every pair of feature CSVs and print the verdicts.
    Complement {
        #[arg(long)]
        config: Option<PathBuf>,
        /// NAME=PATH, one per domain.
        #[arg(long = "features", required = true, num_args = 2..)]
        features: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a fusion network over two or three trained encoders.
    Fuse {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "branch", required = true, num_args = 2..=3)]
        branches: Vec<PathBuf>,
        #[arg(long, default_value = "Hybrid")]
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        skip_adasyn: bool,
    },
    /// Bootstrap and Bayesian comparison tables for prediction files.
    Compare {
        /// Label CSV; uses the `y_true` column when present.
        #[arg(long)]
        labels: PathBuf,
        /// NAME=PATH; uses column NAME when present, else the last column.
        #[arg(long = "pred", required = true, num_args = 2..)]
        preds: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric table for a set of prediction files.
    Ablate {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long = "pred", required = true, num_args = 2..)]
        preds: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> domainfuse::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) {
        return match e.root() {
            Error::Config(_) | Error::Build(_) => 2,
            Error::NumericFailure { .. } => 4,
            Error::InvalidInput(_)
            | Error::DegenerateInput(_)
            | Error::Shape { .. }
            | Error::NoComplementaryPair
            | Error::Io { .. }
            | Error::Json(_) => 3,
            _ => 1,
        };
    }
    if err.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some()) {
        return 3;
    }
    1
}

fn split_named(arg: &str) -> anyhow::Result<(String, PathBuf)> {
    let (name, path) = arg.split_once('=').ok_or_else(|| anyhow!("expected NAME=PATH, got `{arg}`"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

/// Integer labels from one CSV column: `column` if the header has it, else
/// the last column. A non-numeric first row is treated as a header.
fn read_labels(path: &Path, column: &str) -> anyhow::Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let first: Vec<&str> = lines.peek().map(|l| l.split(',').map(str::trim).collect()).unwrap_or_default();
    let has_header = first.iter().any(|c| c.parse::<usize>().is_err());
    let idx = if has_header {
        lines.next();
        first.iter().position(|c| *c == column).unwrap_or(first.len().saturating_sub(1))
    } else {
        first.len().saturating_sub(1)
    };
    lines
        .enumerate()
        .map(|(i, l)| {
            let cell = l.split(',').nth(idx).map(str::trim).unwrap_or("");
            cell.parse::<usize>()
                .map_err(|_| Error::InvalidInput(format!("{}: row {}: bad label `{cell}`", path.display(), i + 1)).into())
        })
        .collect()
}

fn read_preds(args: &[String]) -> anyhow::Result<Vec<(String, Vec<usize>)>> {
    args.iter()
        .map(|a| {
            let (name, path) = split_named(a)?;
            let labels = read_labels(&path, &name)?;
            Ok((name, labels))
        })
        .collect()
}

fn check_aligned(y: &[usize], preds: &[(String, Vec<usize>)]) -> domainfuse::Result<usize> {
    for (name, p) in preds {
        if p.len() != y.len() {
            return Err(Error::InvalidInput(format!("`{name}` has {} predictions for {} labels", p.len(), y.len())));
        }
    }
    let max = preds.iter().flat_map(|(_, p)| p.iter()).chain(y).copied().max().unwrap_or(0);
    Ok((max + 1).max(2))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn predict_csv(net: &mut Net, inputs: &[&Tensor], y: &[usize], name: &str) -> domainfuse::Result<String> {
    let pred = net.predict(inputs)?.argmax_rows();
    let mut s = format!("index,y_true,{name}\n");
    for (i, (t, p)) in y.iter().zip(&pred).enumerate() {
        s.push_str(&format!("{i},{t},{p}\n"));
    }
    Ok(s)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = generate_synthetic(&cfg.data.synthetic)?;
            let m = write_dataset_dir(&ds, &out)?;
            println!("wrote {} signals in {} classes to {}", m.total, m.class_names.len(), out.display());
        }
        Cmd::Pipeline { config, run_name, output_dir, skip_adasyn } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let out = run_pipeline(&cfg, &RunOptions { run_name, skip_adasyn })?;
            let (a, b) = &out.hybrid1.pair;
            let note = if out.hybrid1.fallback { " (fallback: no complementary pair)" } else { "" };
            println!("run directory: {}", out.dir.display());
            println!("Hybrid1 fuses {a} + {b}{note}");
            print!("{}", out.ablation.to_csv());
        }
        Cmd::Train { config, view, out, skip_adasyn } => {
            let cfg = load_config(config.as_deref())?;
            let view = View::from_name(&view)?;
            let p = prepare(&cfg, skip_adasyn)?;
            let views = build_views(&cfg, &p)?;
            let (mut net, hist) = train_unimodal(&cfg, view, &p, &views)?;
            persist::save(&net, &out, view.model_name())?;
            write(&out.join(format!("{}.history.json", view.model_name())), serde_json::to_string_pretty(&hist)?)?;
            let x = view.tensor(&views.test)?;
            let csv = predict_csv(&mut net, &[&x], &p.test.labels(), view.model_name())?;
            write(&out.join(format!("{}.predictions.csv", view.model_name())), csv)?;
            println!("best epoch {} of {}", hist.best_epoch, hist.epochs.len());
        }
        Cmd::Features { config, weights, split, out, skip_adasyn } => {
            let cfg = load_config(config.as_deref())?;
            let mut net = persist::load(&weights)?;
            let view = View::of_net(&net)?;
            let p = prepare(&cfg, skip_adasyn)?;
            let views = build_views(&cfg, &p)?;
            let x = match split {
                Part::Train => view.tensor(&views.train)?.select_rows(&(0..p.n_real_train).collect::<Vec<_>>()),
                Part::Val => view.tensor(&views.val)?,
                Part::Test => view.tensor(&views.test)?,
            };
            let f = extract_deep_features(&mut net, &[&x], "hidden", view.kind())?;
            write(&out, f.matrix.to_csv())?;
            println!("{} rows × {} features from {}", f.matrix.nrows(), f.matrix.ncols(), view.name());
        }
        Cmd::Complement { config, features, out } => {
            let cfg = load_config(config.as_deref())?;
            let mut mats = Vec::new();
            for arg in &features {
                let (name, path) = split_named(arg)?;
                let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                mats.push((name, FeatureMatrix::from_csv(&text, Domain::Deep)?));
            }
            let named: Vec<(String, &FeatureMatrix)> = mats.iter().map(|(n, m)| (n.clone(), m)).collect();
            let report = complementarity_report(&named, &cfg.complementarity.thresholds, cfg.complementarity.bins)?;
            print!("{}", report.to_csv());
            match &report.best_pair {
                Some((a, b)) => println!("best pair: {a} + {b}"),
                None => println!("no complementary pair"),
            }
            if let Some(path) = out {
                write(&path, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Cmd::Fuse { config, branches, name, out, skip_adasyn } => {
            let cfg = load_config(config.as_deref())?;
            let nets = branches
                .iter()
                .map(|w| persist::load(w).with_context(|| format!("loading {}", w.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let members = nets.iter().map(View::of_net).collect::<domainfuse::Result<Vec<_>>>()?;
            let p = prepare(&cfg, skip_adasyn)?;
            let views = build_views(&cfg, &p)?;
            let refs: Vec<(View, &Net)> = members.iter().copied().zip(nets.iter()).collect();
            let (mut net, hist) = train_hybrid(&cfg, &name, &refs, &p, &views)?;
            persist::save(&net, &out, &name)?;
            write(&out.join(format!("{name}.history.json")), serde_json::to_string_pretty(&hist)?)?;
            let xs = members.iter().map(|v| v.tensor(&views.test)).collect::<domainfuse::Result<Vec<_>>>()?;
            let xr: Vec<&Tensor> = xs.iter().collect();
            write(&out.join(format!("{name}.predictions.csv")), predict_csv(&mut net, &xr, &p.test.labels(), &name)?)?;
            println!("best epoch {} of {}", hist.best_epoch, hist.epochs.len());
        }
        Cmd::Compare { labels, preds, iters, seed, out } => {
            let y = read_labels(&labels, "y_true")?;
            let preds = read_preds(&preds)?;
            let n_classes = check_aligned(&y, &preds)?;
            let metrics = Metric::WEIGHTED;
            let (mut boot, mut bayes) = (Vec::new(), Vec::new());
            for i in 0..preds.len() {
                for j in i + 1..preds.len() {
                    let ((na, a), (nb, b)) = (&preds[i], &preds[j]);
                    let results = metrics
                        .iter()
                        .map(|&m| bootstrap_diff(&y, a, b, n_classes, m, iters, seed, DiffLabel::Comparison))
                        .collect::<domainfuse::Result<Vec<_>>>()?;
                    boot.push(PairDiff { model_a: na.clone(), model_b: nb.clone(), results });
                    let results = bayes_compare(&y, a, b, n_classes, &metrics, iters, seed)?;
                    bayes.push(PairDiff { model_a: na.clone(), model_b: nb.clone(), results });
                }
            }
            write(&out.join("diff_bootstrap.csv"), diffs_csv(&boot))?;
            write(&out.join("diff_bayes.csv"), diffs_csv(&bayes))?;
            print!("{}", diffs_csv(&boot));
        }
        Cmd::Ablate { labels, preds, out } => {
            let y = read_labels(&labels, "y_true")?;
            let preds = read_preds(&preds)?;
            let n_classes = check_aligned(&y, &preds)?;
            let names: Vec<String> = (0..n_classes).map(|k| format!("class{k}")).collect();
            let cfg = AblationConfig { pairs: Vec::new(), metrics: Vec::new(), iters: 0, seed: 0 };
            let table = run_ablation(&preds, &y, &names, &cfg)?;
            write(&out, table.to_csv())?;
            print!("{}", table.to_csv());
        }
        Cmd::Report { run } => {
            let read = |f: &str| -> anyhow::Result<String> {
                let p = run.join(f);
                Ok(fs::read_to_string(&p).map_err(|e| Error::Io { path: p, source: e })?)
            };
            let manifest: serde_json::Value = serde_json::from_str(&read("manifest.json")?)?;
            println!("run {}  seed {}", manifest["run_name"], manifest["seed"]);
            let h1 = &manifest["hybrid1"];
            println!("Hybrid1 pair: {} + {} (fallback: {})", h1["pair"][0], h1["pair"][1], h1["fallback"]);
            println!("checks: {}", manifest["checks"]);
            println!("\ncomplementarity\n{}", read("complementarity.csv")?);
            println!("ablation\n{}", read("ablation.csv")?);
            println!("bootstrap differences\n{}", read("diff_bootstrap.csv")?);
            let artifacts = manifest["artifacts"].as_object().map(|m| m.len()).unwrap_or(0);
            if artifacts == 0 {
                bail!("manifest lists no artifacts");
            }
            let missing: BTreeMap<_, _> = manifest["artifacts"]
                .as_object()
                .into_iter()
                .flatten()
                .filter(|(k, _)| !run.join(k).is_file())
                .collect();
            if !missing.is_empty() {
                bail!("artifacts missing from run directory: {:?}", missing.keys().collect::<Vec<_>>());
            }
            println!("{artifacts} artifacts present");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error: cannot size thread pool: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
