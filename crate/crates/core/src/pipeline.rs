//! Filter → tree → association, end to end, and method sweeps over
//! simulated data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::association::{
    naive_baseline, score_tree, select_nodes_with_stats, validate_omega, Assignment, SolverStats,
};
use crate::device_filter::{device_context_vectors, run_filter_sessionized, FilterConfig, FilterReport};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::ingest::{sessionize, OuiDatabase};
use crate::linkage_tree::{build_tree, candidate_nodes, LinkageTree};
use crate::model::{ContextMetric, ContextVector, Dataset, MacAddress};
use crate::simulate::{generate, sweep, SimConfig, SweepParam};

/// Number of pairs to select, absolute or as a multiple of the victim count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSpec {
    Absolute(usize),
    Ratio(f64),
}

impl KSpec {
    /// Resolve against the number of registered victims (rounded, at least 1).
    pub fn resolve(self, victims: Option<usize>) -> Result<usize> {
        match self {
            KSpec::Absolute(0) => Err(Error::Config("K must be at least 1".into())),
            KSpec::Absolute(k) => Ok(k),
            KSpec::Ratio(r) if !(r > 0.0 && r.is_finite()) => {
                Err(Error::Config(format!("K ratio {r} must be positive")))
            }
            KSpec::Ratio(r) => {
                let p = victims.ok_or_else(|| Error::Config("a K ratio needs a registry".into()))?;
                Ok(((r * p as f64).round() as usize).max(1))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Joint selection over the whole linkage tree.
    Ours,
    /// Flat cut at K, then one-to-one matching.
    Naive,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ours" => Ok(Baseline::Ours),
            "naive" => Ok(Baseline::Naive),
            other => Err(Error::Config(format!("unknown baseline {other:?} (ours|naive)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub filter: FilterConfig,
    pub omega: f64,
    pub k: KSpec,
    pub metric: ContextMetric,
    pub baseline: Baseline,
    pub min_cluster_size: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            filter: FilterConfig::default(),
            omega: 0.5,
            k: KSpec::Ratio(1.25),
            metric: ContextMetric::Dice,
            baseline: Baseline::Ours,
            min_cluster_size: 1,
        }
    }
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        validate_omega(self.omega)?;
        if self.min_cluster_size == 0 {
            return Err(Error::Config("min cluster size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Filtered devices and the tree: everything that does not depend on K, ω,
/// the metric or the baseline.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub filter_report: FilterReport,
    pub device_contexts: BTreeMap<MacAddress, ContextVector>,
    pub tree: LinkageTree,
}

#[derive(Debug, Clone)]
pub struct Output {
    pub prepared: Prepared,
    pub k: usize,
    pub assignment: Assignment,
    /// Present for [`Baseline::Ours`].
    pub solver_stats: Option<SolverStats>,
}

/// Filter the devices and build the tree, without associating.
pub fn prepare(dataset: &Dataset, oui: &OuiDatabase, filter: &FilterConfig) -> Result<Prepared> {
    filter.validate()?;
    let sessionized = sessionize(&dataset.sightings, &dataset.sessions);
    let input = dataset.sightings.iter().map(|s| s.mac).collect();
    let filter_report = run_filter_sessionized(&input, &sessionized, oui, filter);
    let device_contexts = device_context_vectors(&filter_report.survivors, &sessionized, filter.rss_threshold);
    let tree = build_tree(&dataset.samples, &dataset.sessions)?;
    Ok(Prepared {
        filter_report,
        device_contexts,
        tree,
    })
}

/// Select pairs on a prepared dataset. `victims` sizes a ratio K.
pub fn associate(
    prepared: &Prepared,
    settings: &Settings,
    victims: Option<usize>,
) -> Result<(usize, Assignment, Option<SolverStats>)> {
    settings.validate()?;
    let k = settings.k.resolve(victims)?;
    let tree = &prepared.tree;
    match settings.baseline {
        Baseline::Ours => {
            let candidates = candidate_nodes(tree, settings.min_cluster_size);
            let scores = score_tree(tree, &candidates, &prepared.device_contexts, settings.metric, settings.omega)?;
            let (a, stats) = select_nodes_with_stats(tree, &scores, k)?;
            Ok((k, a, Some(stats)))
        }
        Baseline::Naive => {
            // A flat cut cannot have more clusters than samples.
            let mut a = naive_baseline(tree, &prepared.device_contexts, k.min(tree.leaf_count()), settings.metric)?;
            a.k_requested = k;
            a.clamped = a.k_achieved < k;
            Ok((k, a, None))
        }
    }
}

pub fn run(dataset: &Dataset, oui: &OuiDatabase, settings: &Settings) -> Result<Output> {
    settings.validate()?;
    let victims = dataset.registry.as_ref().map(BTreeMap::len);
    // Resolve K before the expensive part so a bad K fails fast.
    settings.k.resolve(victims)?;
    let prepared = prepare(dataset, oui, &settings.filter)?;
    let (k, assignment, solver_stats) = associate(&prepared, settings, victims)?;
    Ok(Output {
        prepared,
        k,
        assignment,
        solver_stats,
    })
}

/// The three methods compared in sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ours,
    OursEuclidean,
    Naive,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ours, Method::OursEuclidean, Method::Naive];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursEuclidean => "ours-euclidean",
            Method::Naive => "naive",
        }
    }

    /// `base` with the metric and baseline of this method.
    pub fn settings(self, base: &Settings) -> Settings {
        let (metric, baseline) = match self {
            Method::Ours => (ContextMetric::Dice, Baseline::Ours),
            Method::OursEuclidean => (ContextMetric::Euclidean, Baseline::Ours),
            Method::Naive => (ContextMetric::Dice, Baseline::Naive),
        };
        Settings {
            metric,
            baseline,
            ..base.clone()
        }
    }
}

/// Mean scores of one method at one sweep value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: &'static str,
    pub parameter_value: f64,
    pub accuracy: f64,
    /// Mean over the runs that had at least one correct pair.
    pub mean_purity: Option<f64>,
    pub runs: usize,
}

/// Run every method on `seeds` datasets per sweep value and average.
///
/// Replicate `r` uses `base.seed + r·|values|` as the sweep base seed, so
/// every (value, replicate) dataset has its own seed.
pub fn run_sweep(
    base: &SimConfig,
    param: SweepParam,
    values: &[f64],
    seeds: usize,
    settings: &Settings,
    methods: &[Method],
) -> Result<Vec<SweepRow>> {
    if seeds == 0 {
        return Err(Error::Config("a sweep needs at least one seed".into()));
    }
    let mut acc = vec![vec![(0.0, 0.0, 0usize); values.len()]; methods.len()];
    for rep in 0..seeds {
        let mut rep_base = base.clone();
        rep_base.seed = base.seed.wrapping_add((rep * values.len()) as u64);
        for (vi, point) in sweep(&rep_base, param, values)?.into_iter().enumerate() {
            let sim = generate(&point.config)?;
            let mut point_settings = settings.clone();
            if let Some(t) = point.rss_threshold {
                point_settings.filter.rss_threshold = t;
            }
            if let Some(w) = point.omega {
                point_settings.omega = w;
            }
            let registry = sim.dataset.registry.as_ref().expect("simulated datasets carry a registry");
            let prepared = prepare(&sim.dataset, &sim.oui, &point_settings.filter)?;
            for (mi, method) in methods.iter().enumerate() {
                let (_, assignment, _) = associate(&prepared, &method.settings(&point_settings), Some(registry.len()))?;
                let report = evaluate(&assignment, &prepared.tree, &sim.dataset.samples, registry)?;
                let cell = &mut acc[mi][vi];
                cell.0 += report.accuracy;
                if let Some(p) = report.mean_purity {
                    cell.1 += p;
                    cell.2 += 1;
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (mi, method) in methods.iter().enumerate() {
        for (vi, &value) in values.iter().enumerate() {
            let (a, p, n) = acc[mi][vi];
            rows.push(SweepRow {
                method: method.name(),
                parameter_value: value,
                accuracy: a / seeds as f64,
                mean_purity: (n > 0).then(|| p / n as f64),
                runs: seeds,
            });
        }
    }
    Ok(rows)
}

/// CSV with one row per method and sweep value.
pub fn write_sweep_csv(path: impl AsRef<std::path::Path>, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let fail = |e: csv::Error| Error::Pipeline(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    w.write_record(["method", "parameter_value", "accuracy", "mean_purity"]).map_err(fail)?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.parameter_value.to_string(),
            r.accuracy.to_string(),
            r.mean_purity.map(|p| p.to_string()).unwrap_or_default(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_resolution() {
        assert_eq!(KSpec::Absolute(7).resolve(None).unwrap(), 7);
        assert_eq!(KSpec::Ratio(1.25).resolve(Some(20)).unwrap(), 25);
        assert_eq!(KSpec::Ratio(0.01).resolve(Some(20)).unwrap(), 1);
        assert!(KSpec::Ratio(1.0).resolve(None).is_err());
        assert!(KSpec::Absolute(0).resolve(Some(3)).is_err());
        assert!(KSpec::Ratio(-1.0).resolve(Some(3)).is_err());
    }

    #[test]
    fn clean_simulation_is_recovered() {
        let sim = generate(&SimConfig {
            seed: 4,
            victims: 6,
            oos_subjects: 0,
            sessions: 20,
            device_miss_prob: 0.0,
            phantom_prob: 0.0,
            embed_noise_sigma: 0.1,
            ..SimConfig::default()
        })
        .unwrap();
        let settings = Settings {
            k: KSpec::Ratio(1.0),
            ..Settings::default()
        };
        let out = run(&sim.dataset, &sim.oui, &settings).unwrap();
        let registry = sim.dataset.registry.as_ref().unwrap();
        assert_eq!(out.prepared.filter_report.survivors, registry.keys().copied().collect::<Vec<_>>());
        let report = evaluate(&out.assignment, &out.prepared.tree, &sim.dataset.samples, registry).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.mean_purity, Some(1.0));
    }

    #[test]
    fn naive_k_is_capped_by_samples() {
        let sim = generate(&SimConfig {
            victims: 2,
            oos_subjects: 0,
            sessions: 2,
            samples_per_attendee_mean: 1.0,
            victim_attend_prob_range: [1.0, 1.0],
            ..SimConfig::default()
        })
        .unwrap();
        let settings = Settings {
            k: KSpec::Absolute(50),
            baseline: Baseline::Naive,
            ..Settings::default()
        };
        let out = run(&sim.dataset, &sim.oui, &settings).unwrap();
        assert_eq!(out.prepared.tree.leaf_count(), 4);
        assert_eq!(out.assignment.k_requested, 50);
        assert_eq!(out.assignment.k_achieved, 2);
        assert!(out.assignment.clamped);
    }

    #[test]
    fn sweep_rows_cover_every_method_and_value() {
        let base = SimConfig {
            seed: 2,
            victims: 3,
            oos_subjects: 0,
            sessions: 10,
            ..SimConfig::default()
        };
        let values = [0.0, 2.0];
        let rows = run_sweep(&base, SweepParam::OosSubjects, &values, 2, &Settings::default(), &Method::ALL).unwrap();
        assert_eq!(rows.len(), 6);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.method, Method::ALL[i / 2].name());
            assert_eq!(row.parameter_value, values[i % 2]);
            assert_eq!(row.runs, 2);
            assert!((0.0..=1.0).contains(&row.accuracy));
        }
        assert_eq!(rows, run_sweep(&base, SweepParam::OosSubjects, &values, 2, &Settings::default(), &Method::ALL).unwrap());
        assert!(run_sweep(&base, SweepParam::OosSubjects, &values, 0, &Settings::default(), &Method::ALL).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("method,parameter_value,accuracy,mean_purity\n"));
    }
}
