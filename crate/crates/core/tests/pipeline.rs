use crossid_core::evaluation::{evaluate, evaluate_tree_file, load_truth};
use crossid_core::ingest::{load_dataset, DatasetPaths, ParseMode};
use crossid_core::pipeline::{run, KSpec, Settings};
use crossid_core::simulate::{generate, SimConfig, TRUTH_FILE};

fn clean_config(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        victims: 6,
        oos_subjects: 0,
        sessions: 20,
        embed_noise_sigma: 0.05,
        device_miss_prob: 0.0,
        phantom_prob: 0.0,
        ..SimConfig::default()
    }
}

#[test]
fn disk_round_trip_gives_the_same_answer() {
    let sim = generate(&clean_config(21)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    sim.write_to_dir(dir.path()).unwrap();

    let (loaded, oui, warnings) = load_dataset(&DatasetPaths::in_dir(dir.path()), ParseMode::Strict).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(loaded.samples.len(), sim.dataset.samples.len());
    assert!(loaded.samples.iter().all(|s| s.true_label.is_none()));

    let settings = Settings {
        k: KSpec::Ratio(1.0),
        ..Settings::default()
    };
    let from_disk = run(&loaded, &oui, &settings).unwrap();
    let in_memory = run(&sim.dataset, &sim.oui, &settings).unwrap();
    assert_eq!(from_disk.prepared.filter_report, in_memory.prepared.filter_report);
    assert_eq!(from_disk.assignment.pair_keys(), in_memory.assignment.pair_keys());

    let truth = load_truth(dir.path().join(TRUTH_FILE)).unwrap();
    let registry = loaded.registry.as_ref().unwrap();
    let tree_file = from_disk.prepared.tree.to_file(&loaded.samples);
    let report = evaluate_tree_file(&from_disk.assignment, &tree_file, &truth, registry).unwrap();
    let direct = evaluate(&in_memory.assignment, &in_memory.prepared.tree, &sim.dataset.samples, registry).unwrap();
    assert_eq!(report, direct);
    assert_eq!(report.accuracy, 1.0);
}

#[test]
fn solver_reports_a_certified_root() {
    let sim = generate(&SimConfig {
        oos_subjects: 3,
        ..clean_config(5)
    })
    .unwrap();
    let out = run(&sim.dataset, &sim.oui, &Settings::default()).unwrap();
    let stats = out.solver_stats.unwrap();
    assert!(stats.root_lower_bound <= out.assignment.objective + 1e-9);
    assert!(out.assignment.objective <= stats.root_upper_bound + 1e-9);
    assert!(stats.pairs_after_fixing <= stats.pairs_total);
    assert!(!stats.tie_break_truncated);
}
