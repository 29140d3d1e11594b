use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gradova::data::{generate_split, labeled_idd, write_csv, DatasetSpec};
use gradova::eval::{
    fmt_opt, format_table, one_class_experiment, prepare, run_ablation, run_experiment, run_tagged_stream, trace_csv, AblationKind,
    ExperimentConfig, RunSeeds,
};
use gradova::mahalanobis::{fit, GradientStatistics};
use gradova::nn::MlpModel;
use gradova::stream::trace_to_ndjson;
use gradova::Error;

const DEFAULT_CONFIG: &str = include_str!("../config/default.json");
const FAR_CONFIG: &str = include_str!("../config/far.json");
const MANIFEST_FORMAT: &str = "gradova.manifest.v1";

#[derive(Parser)]
#[command(name = "gradova", version, about = "Gradient-space novelty detection with a self-trained discriminator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Subcommand)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Write one split of a synthetic dataset spec as CSV.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        split: u64,
    },
    /// Print a bundled experiment config.
    DefaultConfig {
        #[arg(long, value_enum, default_value_t = Suite::Near)]
        suite: Suite,
    },
    /// Train the IDD classifier of a run and save it as JSON.
    TrainIdd {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Fit gradient statistics for a saved classifier.
    FitStats {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Run the loop once with a saved classifier and statistics.
    Stream {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Full pipeline over `n_runs` seeds with pure-batch evaluation.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Route detected OOD samples to an extra class.
    OneClass {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Paired ablation runs: a (discriminator), b (pseudo labels),
    /// c (selection fraction), d (re-initialisation).
    Ablation {
        #[arg(value_parser = ["a", "b", "c", "d"])]
        which: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Repeat the command recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum Suite {
    Near,
    Far,
}

/// Everything needed to repeat a run: the resolved config, the command and
/// the per-run seeds.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: String,
    command: Command,
    config: ExperimentConfig,
    seeds: Vec<RunSeeds>,
    outputs: Vec<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::NonFinite(_) => 4,
        Error::InvalidConfig(_) | Error::Json(_) | Error::Malformed(_) => 2,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    let cfg: ExperimentConfig = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => serde_json::from_str(DEFAULT_CONFIG)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_json_file<T>(path: &Path, parse: impl Fn(&str) -> Result<T, Error>) -> Result<T, Error> {
    parse(&fs::read_to_string(path)?)
}

struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), Error> {
        fs::write(self.dir.join(name), text)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Error> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn finish(mut self, command: &Command, config: &ExperimentConfig, runs: usize) -> Result<(), Error> {
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.clone(),
            config: config.clone(),
            seeds: (0..runs).map(|r| RunSeeds::for_run(config, r)).collect(),
            outputs: std::mem::take(&mut self.written),
        };
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn check_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<(), Error> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn execute(command: &Command, config_override: Option<&ExperimentConfig>) -> Result<(), Error> {
    let config_for = |path: &Option<PathBuf>| match config_override {
        Some(c) => Ok(c.clone()),
        None => load_config(path.as_deref()),
    };
    match command {
        Command::GenData { spec, out, split } => {
            let spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(spec)?)?;
            let data = generate_split(&spec, *split)?;
            write_csv(out, &data, true)
        }
        Command::DefaultConfig { suite } => {
            let text = match suite {
                Suite::Near => DEFAULT_CONFIG,
                Suite::Far => FAR_CONFIG,
            };
            let cfg: ExperimentConfig = serde_json::from_str(text)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
        Command::TrainIdd { config, out, run } => {
            let cfg = config_for(config)?;
            let seeds = RunSeeds::for_run(&cfg, *run);
            let mut spec = cfg.data.clone();
            spec.seed = seeds.data;
            let (model, _) = gradova::eval::train_classifier(&spec, &cfg.classifier, seeds.classifier)?;
            fs::write(out, model.to_json()?)?;
            Ok(())
        }
        Command::FitStats { config, model, out, run } => {
            let cfg = config_for(config)?;
            let model = read_json_file(model, MlpModel::from_json)?;
            let mut spec = cfg.data.clone();
            spec.seed = RunSeeds::for_run(&cfg, *run).data;
            let stats = fit(&model, &labeled_idd(&generate_split(&spec, 0)?), cfg.include_bias, cfg.epsilon_scale)?;
            check_finite("statistics", stats.class_means.iter().flat_map(|m| m.0.clone()).chain(stats.tied_precision.as_slice().iter().copied()))?;
            fs::write(out, stats.to_json()?)?;
            Ok(())
        }
        Command::Stream { config, model, stats, out_dir, run } => {
            let cfg = config_for(config)?;
            let stats_path = stats.as_ref().ok_or_else(|| Error::InvalidConfig("missing statistics: pass --stats (see fit-stats)".into()))?;
            let mut setup = prepare(&cfg, *run)?;
            setup.model = read_json_file(model, MlpModel::from_json)?;
            setup.stats = read_json_file(stats_path, GradientStatistics::from_json)?;
            let stream = setup.stream(&cfg)?;
            let result = run_tagged_stream(&setup, &stream, &setup.loop_config(&cfg.stream))?;
            check_finite("scores", result.state.score_values())?;
            let mut out = Output::new(out_dir)?;
            out.write("trace.ndjson", &trace_to_ndjson(&result.trace)?)?;
            out.write("trace.csv", &trace_csv(&result.trace))?;
            out.json("summary.json", &result.summary)?;
            out.finish(command, &cfg, 1)
        }
        Command::Run { config, out_dir } => {
            let cfg = config_for(config)?;
            let report = run_experiment(&cfg)?;
            check_finite("report", report.runs.iter().filter_map(|r| r.summary.final_auroc))?;
            let mut out = Output::new(out_dir)?;
            out.json("report.json", &report)?;
            for (r, run) in report.runs.iter().enumerate() {
                out.write(&format!("trace_run{r}.ndjson"), &trace_to_ndjson(&run.trace)?)?;
                out.write(&format!("trace_run{r}.csv"), &trace_csv(&run.trace))?;
            }
            let mut rows = vec![
                vec!["stream (final)".into(), format!("{:.4}", report.final_auroc.mean), format!("{:.4}", report.final_auroc.std), format!("{:.4}", report.final_aupr.mean)],
                vec!["per sample".into(), format!("{:.4}", report.per_sample_auroc.mean), format!("{:.4}", report.per_sample_auroc.std), "-".into()],
            ];
            for p in &report.pure_batch {
                rows.push(vec![format!("pure batch {}", p.batch_size), format!("{:.4}", p.auroc.mean), format!("{:.4}", p.auroc.std), format!("{:.4}", p.aupr.mean)]);
            }
            let table = format_table(&["evaluation", "auroc", "auroc std", "aupr"], &rows);
            print!("{table}");
            out.write("summary.txt", &table)?;
            out.finish(command, &cfg, cfg.n_runs)
        }
        Command::OneClass { config, out_dir } => {
            let cfg = config_for(config)?;
            let reports = cfg
                .one_class
                .budgets
                .iter()
                .map(|&b| one_class_experiment(&cfg, 0, b, cfg.one_class.ood_stream))
                .collect::<Result<Vec<_>, _>>()?;
            let mut out = Output::new(out_dir)?;
            out.json("one_class.json", &reports)?;
            let classes: Vec<usize> = reports.first().map(|r| r.per_class_single_head_accuracy.keys().copied().collect()).unwrap_or_default();
            let rows: Vec<Vec<String>> = classes
                .iter()
                .map(|c| {
                    let mut row = vec![c.to_string()];
                    row.extend(reports.iter().map(|r| fmt_opt(r.per_class_single_head_accuracy.get(c).copied())));
                    row
                })
                .collect();
            let headers: Vec<String> = std::iter::once("class".to_string()).chain(reports.iter().map(|r| format!("budget {}", r.memory_budget))).collect();
            let table = format_table(&headers.iter().map(String::as_str).collect::<Vec<_>>(), &rows);
            print!("{table}");
            out.write("one_class.txt", &table)?;
            out.finish(command, &cfg, 1)
        }
        Command::Ablation { which, config, out_dir } => {
            let cfg = config_for(config)?;
            let kind = AblationKind::from_letter(which).ok_or_else(|| Error::InvalidConfig(format!("unknown ablation {which}")))?;
            let mut out = Output::new(out_dir)?;
            let mut reports = Vec::new();
            for r in 0..cfg.n_runs {
                let setup = prepare(&cfg, r)?;
                let stream = setup.stream(&cfg)?;
                reports.push(run_ablation(&setup, &stream, &cfg.stream, kind, &cfg.selection_fractions)?);
            }
            let mut rows = Vec::new();
            for (r, report) in reports.iter().enumerate() {
                for arm in &report.arms {
                    out.write(&format!("ablation_{which}_run{r}_{}.csv", arm.name), &trace_csv(&arm.trace))?;
                    rows.push(vec![report.seed.to_string(), arm.name.clone(), fmt_opt(arm.first_auroc), fmt_opt(arm.final_auroc), fmt_opt(arm.final_aupr)]);
                }
            }
            out.json(&format!("ablation_{which}.json"), &reports)?;
            let table = format_table(&["seed", "arm", "first auroc", "final auroc", "final aupr"], &rows);
            print!("{table}");
            out.write(&format!("ablation_{which}.txt"), &table)?;
            out.finish(command, &cfg, cfg.n_runs)
        }
        Command::Replay { manifest, out_dir } => {
            let m: Manifest = serde_json::from_str(&fs::read_to_string(manifest)?)?;
            if m.format != MANIFEST_FORMAT {
                return Err(Error::InvalidConfig(format!("unsupported manifest format {}", m.format)));
            }
            m.config.validate()?;
            let command = retarget(m.command, out_dir)?;
            execute(&command, Some(&m.config))
        }
    }
}

fn retarget(command: Command, dir: &Path) -> Result<Command, Error> {
    Ok(match command {
        Command::Stream { config, model, stats, run, .. } => Command::Stream { config, model, stats, out_dir: dir.into(), run },
        Command::Run { config, .. } => Command::Run { config, out_dir: dir.into() },
        Command::OneClass { config, .. } => Command::OneClass { config, out_dir: dir.into() },
        Command::Ablation { which, config, .. } => Command::Ablation { which, config, out_dir: dir.into() },
        other => return Err(Error::InvalidConfig(format!("manifest command {other:?} cannot be replayed"))),
    })
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("GRADOVA_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::InvalidConfig(format!("GRADOVA_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::InvalidConfig("GRADOVA_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| execute(&cli.command, None)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
