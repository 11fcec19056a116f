//! `crossid`: filter sniffed devices, cluster biometric samples and pair
//! clusters with devices, plus simulation, sweeps and feasibility curves.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crossid_core::device_filter::{FilterConfig, FACE_RSS_THRESHOLD};
use crossid_core::evaluation::{
    evaluate_tree_file, feasibility_curve, load_truth, write_feasibility_csv, WindowKind,
};
use crossid_core::ingest::{
    load_dataset, DatasetPaths, OuiDatabase, ParseMode, EMBEDDINGS_FILE, REGISTRY_FILE,
    SESSIONS_FILE, SIGHTINGS_FILE,
};
use crossid_core::linkage_tree::TreeFile;
use crossid_core::pipeline::{associate, prepare, run_sweep, write_sweep_csv, Baseline, KSpec, Method, Settings};
use crossid_core::simulate::{generate, random_attendance, SimConfig, SweepParam, TRUTH_FILE};
use crossid_core::{Assignment, ContextMetric, ContextVector, Dataset, Error, MacAddress};

const FILTER_REPORT: &str = "filter_report.json";
const TREE: &str = "tree.json";
const ASSIGNMENT: &str = "assignment.json";
const RUN_CONFIG: &str = "run_config.json";
const EVAL: &str = "eval.json";
const SWEEP_CSV: &str = "sweep.csv";
const FEASIBILITY_CSV: &str = "feasibility.csv";

#[derive(Parser)]
#[command(name = "crossid", version, about = "Cross-modal identity association from co-attendance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter device MACs and write filter_report.json.
    Filter {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Build the linkage tree and write tree.json.
    Tree {
        #[command(flatten)]
        input: InputArgs,
    },
    /// Run the full pipeline and write assignment.json, tree.json and
    /// filter_report.json.
    Associate {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        filter: FilterArgs,
        #[command(flatten)]
        assoc: AssocArgs,
        /// Recorded in run_config.json; the pipeline itself is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score an assignment against ground truth and write eval.json.
    Evaluate {
        /// Directory holding assignment.json and tree.json (default: --out).
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        assignment: Option<PathBuf>,
        #[arg(long)]
        tree: Option<PathBuf>,
        /// Truth manifest (default: DATA/truth.jsonl).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Registry of victim devices (default: DATA/registry.csv, else the
        /// device rows of the truth manifest).
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with planted truth.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare ours, ours-euclidean and naive across one simulation knob.
    Sweep {
        #[command(flatten)]
        sim: SimArgs,
        /// oos_subjects | sessions | rss_threshold | omega
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
        /// Datasets per sweep value.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[command(flatten)]
        filter: FilterArgs,
        #[command(flatten)]
        assoc: AssocArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Share of victims singled out by g of their sessions.
    Feasibility {
        /// Use the registered devices' attendance in this dataset. Without
        /// it, a random attendance matrix is drawn.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = FACE_RSS_THRESHOLD, allow_hyphen_values = true)]
        rss_threshold: i32,
        #[arg(long, default_value_t = 22)]
        victims: usize,
        #[arg(long, default_value_t = 120)]
        sessions: usize,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60,70,80,90,100,110,120")]
        g: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// random | contiguous
        #[arg(long, default_value = "random")]
        window: WindowKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct InputArgs {
    /// Directory with the standard input file names.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    sessions: Option<PathBuf>,
    #[arg(long)]
    sightings: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    oui: Option<PathBuf>,
    /// Skip malformed rows with a warning instead of failing.
    #[arg(long)]
    lenient: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    /// Minimum RSS in dBm for a device to count as inside the venue.
    #[arg(long, default_value_t = FACE_RSS_THRESHOLD, allow_hyphen_values = true)]
    rss_threshold: i32,
}

#[derive(Args)]
struct AssocArgs {
    #[arg(long, default_value_t = 0.5)]
    omega: f64,
    /// Absolute number of pairs.
    #[arg(long, conflicts_with = "k_ratio")]
    k: Option<usize>,
    /// Number of pairs as a multiple of the registry size.
    #[arg(long)]
    k_ratio: Option<f64>,
    /// dice | euclidean
    #[arg(long, default_value = "dice")]
    metric: ContextMetric,
    /// ours | naive
    #[arg(long, default_value = "ours")]
    baseline: Baseline,
    #[arg(long, default_value_t = 1)]
    min_cluster_size: usize,
}

#[derive(Args)]
struct SimArgs {
    /// JSON simulation config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    victims: Option<usize>,
    #[arg(long)]
    oos: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    miss: Option<f64>,
    #[arg(long)]
    phantom: Option<f64>,
}

/// Everything that shaped an `associate` run.
#[derive(Serialize)]
struct RunConfig<'a> {
    sessions: &'a Path,
    sightings: &'a Path,
    embeddings: &'a Path,
    registry: Option<&'a Path>,
    oui: Option<&'a Path>,
    settings: &'a Settings,
    k: usize,
    seed: u64,
}

#[derive(Serialize)]
struct FeasibilityReport {
    source: String,
    victims: usize,
    sessions: usize,
    window: WindowKind,
    trials: usize,
    seed: u64,
    curve: Vec<(usize, f64)>,
}

impl InputArgs {
    fn paths(&self) -> Result<DatasetPaths, Error> {
        let from_dir = self.data.as_ref().map(DatasetPaths::in_dir);
        let required = |flag: &Option<PathBuf>, name: &str| -> Result<PathBuf, Error> {
            flag.clone()
                .or_else(|| self.data.as_ref().map(|d| d.join(name)))
                .ok_or_else(|| Error::Config(format!("pass --data or --{}", name.split('.').next().unwrap_or(name))))
        };
        Ok(DatasetPaths {
            sessions: required(&self.sessions, SESSIONS_FILE)?,
            sightings: required(&self.sightings, SIGHTINGS_FILE)?,
            embeddings: required(&self.embeddings, EMBEDDINGS_FILE)?,
            registry: self.registry.clone().or_else(|| from_dir.as_ref().and_then(|p| p.registry.clone())),
            oui: self.oui.clone().or_else(|| from_dir.as_ref().and_then(|p| p.oui.clone())),
        })
    }

    fn load(&self) -> Result<(DatasetPaths, Dataset, OuiDatabase), Error> {
        let paths = self.paths()?;
        for p in [&paths.sessions, &paths.sightings, &paths.embeddings]
            .into_iter()
            .chain(paths.registry.as_ref())
            .chain(paths.oui.as_ref())
        {
            if !p.exists() {
                return Err(missing(p));
            }
        }
        let mode = if self.lenient { ParseMode::Lenient } else { ParseMode::Strict };
        let (dataset, oui, warnings) = load_dataset(&paths, mode)?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        Ok((paths, dataset, oui))
    }
}

impl AssocArgs {
    fn settings(&self, filter: &FilterArgs) -> Settings {
        let k = match (self.k, self.k_ratio) {
            (Some(k), _) => KSpec::Absolute(k),
            (None, Some(r)) => KSpec::Ratio(r),
            (None, None) => Settings::default().k,
        };
        Settings {
            filter: FilterConfig::with_threshold(filter.rss_threshold),
            omega: self.omega,
            k,
            metric: self.metric,
            baseline: self.baseline,
            min_cluster_size: self.min_cluster_size,
        }
    }
}

impl SimArgs {
    fn config(&self) -> Result<SimConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => SimConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.victims {
            cfg.victims = v;
        }
        if let Some(v) = self.oos {
            cfg.oos_subjects = v;
        }
        if let Some(v) = self.sessions {
            cfg.sessions = v;
        }
        if let Some(v) = self.sigma {
            cfg.embed_noise_sigma = v;
        }
        if let Some(v) = self.miss {
            cfg.device_miss_prob = v;
        }
        if let Some(v) = self.phantom {
            cfg.phantom_prob = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn missing(path: &Path) -> Error {
    io_error(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"))
}

fn out_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf, Error> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Pipeline(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    Ok(path)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Filter { input, filter } => {
            let (_, dataset, oui) = input.load()?;
            out_dir(&input.out)?;
            let cfg = FilterConfig::with_threshold(filter.rss_threshold);
            let report = crossid_core::device_filter::run_filter(&dataset, &oui, &cfg)?;
            let path = write_json(&input.out, FILTER_REPORT, &report)?;
            println!("{} of {} devices kept -> {}", report.survivors.len(), report.input_distinct, path.display());
        }
        Command::Tree { input } => {
            let (_, dataset, _) = input.load()?;
            out_dir(&input.out)?;
            let tree = crossid_core::linkage_tree::build_tree(&dataset.samples, &dataset.sessions)?;
            let path = write_json(&input.out, TREE, &tree.to_file(&dataset.samples))?;
            println!("{} nodes -> {}", tree.node_count(), path.display());
        }
        Command::Associate {
            input,
            filter,
            assoc,
            seed,
        } => {
            let settings = assoc.settings(&filter);
            settings.validate()?;
            let (paths, dataset, oui) = input.load()?;
            let victims = dataset.registry.as_ref().map(BTreeMap::len);
            let k = settings.k.resolve(victims)?;
            out_dir(&input.out)?;
            let prepared = prepare(&dataset, &oui, &settings.filter)?;
            let (_, assignment, stats) = associate(&prepared, &settings, victims)?;
            if stats.is_some_and(|s| s.tie_break_truncated) {
                eprintln!("warning: objective is optimal, but the tie-break among equal-scoring pair sets hit its budget");
            }
            write_json(&input.out, FILTER_REPORT, &prepared.filter_report)?;
            write_json(&input.out, TREE, &prepared.tree.to_file(&dataset.samples))?;
            let run_config = RunConfig {
                sessions: &paths.sessions,
                sightings: &paths.sightings,
                embeddings: &paths.embeddings,
                registry: paths.registry.as_deref(),
                oui: paths.oui.as_deref(),
                settings: &settings,
                k,
                seed,
            };
            write_json(&input.out, RUN_CONFIG, &run_config)?;
            let path = write_json(&input.out, ASSIGNMENT, &assignment)?;
            let note = if assignment.clamped { " (clamped)" } else { "" };
            println!(
                "{} pairs{note}, objective {:.6} -> {}",
                assignment.k_achieved,
                assignment.objective,
                path.display()
            );
        }
        Command::Evaluate {
            run,
            assignment,
            tree,
            truth,
            registry,
            data,
            out,
        } => {
            let run_dir = run.unwrap_or_else(|| out.clone());
            let assignment_path = assignment.unwrap_or_else(|| run_dir.join(ASSIGNMENT));
            let tree_path = tree.unwrap_or_else(|| run_dir.join(TREE));
            let truth_path = truth
                .or_else(|| data.as_ref().map(|d| d.join(TRUTH_FILE)))
                .ok_or_else(|| Error::Config("pass --truth or --data".into()))?;
            let registry_path = registry.or_else(|| {
                data.as_ref()
                    .map(|d| d.join(REGISTRY_FILE))
                    .filter(|p| p.exists())
            });
            for p in [&assignment_path, &tree_path, &truth_path].into_iter().chain(registry_path.as_ref()) {
                if !p.exists() {
                    return Err(missing(p));
                }
            }
            let assignment: Assignment = read_json(&assignment_path)?;
            let tree: TreeFile = read_json(&tree_path)?;
            let truth = load_truth(&truth_path)?;
            let registry: BTreeMap<MacAddress, String> = match &registry_path {
                Some(p) => crossid_core::ingest::load_registry(p)?,
                None => truth.device_subjects.clone(),
            };
            out_dir(&out)?;
            let report = evaluate_tree_file(&assignment, &tree, &truth, &registry)?;
            let path = write_json(&out, EVAL, &report)?;
            let purity = report.mean_purity.map_or("n/a".to_string(), |p| format!("{p:.4}"));
            println!("accuracy {:.4}, purity {purity} -> {}", report.accuracy, path.display());
        }
        Command::Simulate { sim, out } => {
            let cfg = sim.config()?;
            let data = generate(&cfg)?;
            data.write_to_dir(&out)?;
            println!(
                "{} samples, {} sightings, {} sessions -> {}",
                data.dataset.samples.len(),
                data.dataset.sightings.len(),
                data.dataset.sessions.len(),
                out.display()
            );
        }
        Command::Sweep {
            sim,
            param,
            values,
            seeds,
            filter,
            assoc,
            out,
        } => {
            let cfg = sim.config()?;
            let settings = assoc.settings(&filter);
            settings.validate()?;
            out_dir(&out)?;
            let rows = run_sweep(&cfg, param, &values, seeds, &settings, &Method::ALL)?;
            let path = out.join(SWEEP_CSV);
            write_sweep_csv(&path, &rows)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        Command::Feasibility {
            data,
            rss_threshold,
            victims,
            sessions,
            g,
            trials,
            window,
            seed,
            out,
        } => {
            let (source, attendance) = match &data {
                Some(dir) => {
                    let input = InputArgs {
                        data: Some(dir.clone()),
                        sessions: None,
                        sightings: None,
                        embeddings: None,
                        registry: None,
                        oui: None,
                        lenient: false,
                        out: out.clone(),
                    };
                    (dir.display().to_string(), registered_attendance(&input, rss_threshold)?)
                }
                None => {
                    let rates = SimConfig::default().victim_attend_prob_range;
                    ("random".to_string(), random_attendance(victims, sessions, rates, seed)?)
                }
            };
            out_dir(&out)?;
            let curve = feasibility_curve(&attendance, &g, trials, seed, window)?;
            write_feasibility_csv(out.join(FEASIBILITY_CSV), &curve)?;
            let report = FeasibilityReport {
                source,
                victims: attendance.len(),
                sessions: attendance.first().map_or(0, ContextVector::len),
                window,
                trials,
                seed,
                curve,
            };
            write_json(&out, "feasibility.json", &report)?;
            println!("{} victims -> {}", report.victims, out.join(FEASIBILITY_CSV).display());
        }
    }
    Ok(())
}

/// Sessions in which each registered device was seen above the threshold.
fn registered_attendance(input: &InputArgs, rss_threshold: i32) -> Result<Vec<ContextVector>, Error> {
    let (_, dataset, _) = input.load()?;
    let registry = dataset
        .registry
        .as_ref()
        .ok_or_else(|| missing(&input.data.clone().unwrap_or_default().join(REGISTRY_FILE)))?;
    let sessionized = crossid_core::ingest::sessionize(&dataset.sightings, &dataset.sessions);
    let macs: Vec<MacAddress> = registry.keys().copied().collect();
    let contexts = crossid_core::device_filter::device_context_vectors(&macs, &sessionized, rss_threshold);
    Ok(macs.iter().map(|m| contexts[m].clone()).collect())
}


fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_files_and_config_errors_exit_2() {
        assert_eq!(exit_code(&missing(Path::new("x"))), 2);
        assert_eq!(exit_code(&Error::Config("bad".into())), 2);
        assert_eq!(exit_code(&Error::Pipeline("boom".into())), 1);
    }
}
