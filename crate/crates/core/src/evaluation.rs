//! Scoring an assignment against ground truth, and the attendance-uniqueness
//! feasibility study (how many victims a random or contiguous window of
//! their sessions singles out).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::Assignment;
use crate::error::{Error, Result};
use crate::linkage_tree::{LinkageTree, TreeFile};
use crate::model::{BiometricSample, ContextVector, MacAddress};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub node_id: usize,
    pub mac: MacAddress,
    /// Registered owner of `mac`; `None` for a device outside the registry.
    pub owner: Option<String>,
    pub majority_label: String,
    pub correct: bool,
    /// Share of members labelled with `owner`.
    pub purity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Unweighted mean purity over correct pairs; absent when none is correct.
    pub mean_purity: Option<f64>,
    pub per_pair: Vec<PairOutcome>,
    pub victims_total: usize,
}

fn member_labels<'a>(tree: &LinkageTree, node: usize, samples: &'a [BiometricSample]) -> Result<Vec<&'a str>> {
    tree.members(node)
        .iter()
        .map(|&m| {
            samples[m]
                .true_label
                .as_deref()
                .ok_or_else(|| Error::Contract(format!("sample {} has no true label", samples[m].sample_id)))
        })
        .collect()
}

fn majority<'a>(labels: &[&'a str]) -> Option<&'a str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (l, c) in counts {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((l, c));
        }
    }
    best.map(|(l, _)| l)
}

/// Most frequent label among the node's members; ties go to the smallest label.
pub fn majority_label(tree: &LinkageTree, node: usize, samples: &[BiometricSample]) -> Result<String> {
    majority(&member_labels(tree, node, samples)?)
        .map(str::to_string)
        .ok_or_else(|| Error::Contract(format!("node {node} has no members")))
}

/// Per-pair outcomes plus accuracy (over all registered victims) and purity.
pub fn evaluate(
    assignment: &Assignment,
    tree: &LinkageTree,
    samples: &[BiometricSample],
    registry: &BTreeMap<MacAddress, String>,
) -> Result<EvalReport> {
    evaluate_with(assignment, registry, |node| member_labels(tree, node, samples))
}

/// [`evaluate`] against a tree read back from JSON, with sample labels from
/// a truth manifest.
pub fn evaluate_tree_file(
    assignment: &Assignment,
    tree: &TreeFile,
    truth: &GroundTruth,
    registry: &BTreeMap<MacAddress, String>,
) -> Result<EvalReport> {
    evaluate_with(assignment, registry, |node| {
        let record = tree
            .nodes
            .get(node)
            .filter(|r| r.id == node)
            .ok_or_else(|| Error::Contract(format!("tree has no node {node}")))?;
        record
            .members
            .iter()
            .map(|id| {
                truth
                    .sample_subjects
                    .get(id)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Contract(format!("sample {id} has no true label")))
            })
            .collect()
    })
}

fn evaluate_with<'a>(
    assignment: &Assignment,
    registry: &BTreeMap<MacAddress, String>,
    labels_of: impl Fn(usize) -> Result<Vec<&'a str>>,
) -> Result<EvalReport> {
    if registry.is_empty() {
        return Err(Error::Config("evaluation needs a nonempty registry".into()));
    }
    let mut per_pair = Vec::with_capacity(assignment.pairs.len());
    for p in &assignment.pairs {
        let labels = labels_of(p.node)?;
        let majority = majority(&labels)
            .ok_or_else(|| Error::Contract(format!("node {} has no members", p.node)))?
            .to_string();
        let owner = registry.get(&p.mac).cloned();
        let purity = owner.as_ref().map(|o| {
            labels.iter().filter(|&&l| l == o).count() as f64 / labels.len() as f64
        });
        per_pair.push(PairOutcome {
            node_id: p.node,
            mac: p.mac,
            correct: owner.as_deref() == Some(majority.as_str()),
            owner,
            majority_label: majority,
            purity,
        });
    }
    let correct: Vec<&PairOutcome> = per_pair.iter().filter(|p| p.correct).collect();
    let accuracy = correct.len() as f64 / registry.len() as f64;
    let mean_purity = if correct.is_empty() {
        None
    } else {
        Some(correct.iter().filter_map(|p| p.purity).sum::<f64>() / correct.len() as f64)
    };
    Ok(EvalReport {
        accuracy,
        mean_purity,
        per_pair,
        victims_total: registry.len(),
    })
}

pub fn association_accuracy(
    assignment: &Assignment,
    tree: &LinkageTree,
    samples: &[BiometricSample],
    registry: &BTreeMap<MacAddress, String>,
) -> Result<f64> {
    Ok(evaluate(assignment, tree, samples, registry)?.accuracy)
}

pub fn cluster_purity(
    assignment: &Assignment,
    tree: &LinkageTree,
    samples: &[BiometricSample],
    registry: &BTreeMap<MacAddress, String>,
) -> Result<Option<f64>> {
    Ok(evaluate(assignment, tree, samples, registry)?.mean_purity)
}

/// Planted labels for samples and devices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub sample_subjects: BTreeMap<String, String>,
    pub device_subjects: BTreeMap<MacAddress, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TruthRow {
    Sample { sample_id: String, subject: String },
    Device { mac: MacAddress, subject: String },
}

impl GroundTruth {
    /// Fill in missing `true_label`s from the manifest.
    pub fn label_samples(&self, samples: &mut [BiometricSample]) {
        for s in samples {
            if s.true_label.is_none() {
                s.true_label = self.sample_subjects.get(&s.sample_id).cloned();
            }
        }
    }
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut truth = GroundTruth::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TruthRow =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i as u64 + 1, e.to_string()))?;
        match row {
            TruthRow::Sample { sample_id, subject } => {
                truth.sample_subjects.insert(sample_id, subject);
            }
            TruthRow::Device { mac, subject } => {
                truth.device_subjects.insert(mac, subject);
            }
        }
    }
    Ok(truth)
}

pub fn write_truth(path: impl AsRef<Path>, truth: &GroundTruth) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (sample_id, subject) in &truth.sample_subjects {
        let row = TruthRow::Sample {
            sample_id: sample_id.clone(),
            subject: subject.clone(),
        };
        out.push_str(&serde_json::to_string(&row).expect("plain strings serialize"));
        out.push('\n');
    }
    for (mac, subject) in &truth.device_subjects {
        let row = TruthRow::Device {
            mac: *mac,
            subject: subject.clone(),
        };
        out.push_str(&serde_json::to_string(&row).expect("plain strings serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// How the observed window of a victim's sessions is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// `g` attended sessions chosen uniformly at random.
    Random,
    /// `g` consecutive entries of the victim's attended-session list.
    Contiguous,
}

impl std::str::FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rand" | "random" => Ok(WindowKind::Random),
            "cont" | "contiguous" => Ok(WindowKind::Contiguous),
            other => Err(Error::Config(format!("unknown window kind {other:?} (random|contiguous)"))),
        }
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Mean fraction of victims whose attendance, restricted to a window of `g`
/// of their own sessions, differs from every other victim's.
///
/// A victim who attended fewer than `g` sessions is observed everywhere and
/// compared on the full attendance row.
pub fn distinguishability(
    attendance: &[ContextVector],
    g: usize,
    trials: usize,
    seed: u64,
    kind: WindowKind,
) -> Result<f64> {
    if g == 0 {
        return Err(Error::Config("window size g must be at least 1".into()));
    }
    if trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    if let Some(first) = attendance.first() {
        if attendance.iter().any(|r| r.len() != first.len()) {
            return Err(Error::Contract("attendance rows differ in length".into()));
        }
    }
    if attendance.is_empty() {
        return Ok(0.0);
    }
    let attended: Vec<Vec<usize>> = attendance.iter().map(|r| r.ones().collect()).collect();
    let mut total = 0.0;
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let mut distinct = 0usize;
        for (u, row) in attendance.iter().enumerate() {
            let own = &attended[u];
            let window: Vec<usize> = if own.len() <= g {
                (0..row.len()).collect()
            } else {
                match kind {
                    WindowKind::Random => {
                        let mut w: Vec<usize> =
                            sample_indices(&mut rng, own.len(), g).into_iter().map(|i| own[i]).collect();
                        w.sort_unstable();
                        w
                    }
                    WindowKind::Contiguous => {
                        let start = rng.random_range(0..=own.len() - g);
                        own[start..start + g].to_vec()
                    }
                }
            };
            let clash = attendance
                .iter()
                .enumerate()
                .any(|(v, other)| v != u && window.iter().all(|&s| other.get(s) == row.get(s)));
            if !clash {
                distinct += 1;
            }
        }
        total += distinct as f64 / attendance.len() as f64;
    }
    Ok(total / trials as f64)
}

pub fn rand_g_distinguishability(attendance: &[ContextVector], g: usize, trials: usize, seed: u64) -> Result<f64> {
    distinguishability(attendance, g, trials, seed, WindowKind::Random)
}

pub fn cont_g_distinguishability(attendance: &[ContextVector], g: usize, trials: usize, seed: u64) -> Result<f64> {
    distinguishability(attendance, g, trials, seed, WindowKind::Contiguous)
}

/// `(g, mean distinguishability)` for every `g` in `gs`.
pub fn feasibility_curve(
    attendance: &[ContextVector],
    gs: &[usize],
    trials: usize,
    seed: u64,
    kind: WindowKind,
) -> Result<Vec<(usize, f64)>> {
    gs.iter()
        .map(|&g| Ok((g, distinguishability(attendance, g, trials, seed, kind)?)))
        .collect()
}

pub fn write_feasibility_csv(path: impl AsRef<Path>, curve: &[(usize, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "g,mean_distinguishability").expect("write to memory");
    for (g, d) in curve {
        writeln!(out, "{g},{d}").expect("write to memory");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::AssignedPair;
    use crate::linkage_tree::build_tree;
    use crate::model::Session;

    fn labelled(labels: &[&str]) -> (LinkageTree, Vec<BiometricSample>) {
        let samples: Vec<_> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| BiometricSample {
                sample_id: format!("x{i}"),
                session_id: "s0".into(),
                // Samples come in close pairs: {0, 1}, {2, 3}, ...
                embedding: crate::model::l2_normalize(&[1.0, (i / 2) as f64 + (i % 2) as f64 * 0.01]).unwrap(),
                true_label: Some(l.to_string()),
            })
            .collect();
        let sessions = vec![Session {
            id: "s0".into(),
            start_ms: 0,
            end_ms: 10,
            location: "x".into(),
        }];
        (build_tree(&samples, &sessions).unwrap(), samples)
    }

    fn mac(i: u8) -> MacAddress {
        MacAddress::new([0, 0x11, 0x24, 0, 0, i])
    }

    fn assignment(pairs: &[(usize, u8)]) -> Assignment {
        Assignment::from_pairs(
            pairs
                .iter()
                .map(|&(node, m)| AssignedPair {
                    node,
                    mac: mac(m),
                    score: 0.5,
                })
                .collect(),
            pairs.len(),
        )
    }

    #[test]
    fn tree_file_evaluation_matches_in_memory() {
        let (tree, samples) = labelled(&["a", "a", "b", "b", "c"]);
        let registry: BTreeMap<_, _> = [(mac(0), "a"), (mac(1), "b"), (mac(2), "c")]
            .into_iter()
            .map(|(m, o)| (m, o.to_string()))
            .collect();
        let truth = GroundTruth {
            sample_subjects: samples
                .iter()
                .map(|s| (s.sample_id.clone(), s.true_label.clone().unwrap()))
                .collect(),
            device_subjects: BTreeMap::new(),
        };
        let file = tree.to_file(&samples);
        let a = assignment(&[(tree.node(0).parent.unwrap(), 0), (4, 2), (tree.root, 1)]);
        let direct = evaluate(&a, &tree, &samples, &registry).unwrap();
        assert_eq!(evaluate_tree_file(&a, &file, &truth, &registry).unwrap(), direct);

        let mut partial = truth.clone();
        partial.sample_subjects.remove("x4");
        assert!(evaluate_tree_file(&a, &file, &partial, &registry).is_err());
        assert!(evaluate_tree_file(&assignment(&[(99, 0)]), &file, &truth, &registry).is_err());
    }

    #[test]
    fn majority_examples() {
        let (tree, samples) = labelled(&["a", "a", "b"]);
        assert_eq!(majority_label(&tree, tree.root, &samples).unwrap(), "a");
        let (tree, samples) = labelled(&["b", "a"]);
        assert_eq!(majority_label(&tree, tree.root, &samples).unwrap(), "a");
        let (tree, samples) = labelled(&["c"]);
        assert_eq!(majority_label(&tree, 0, &samples).unwrap(), "c");
    }

    #[test]
    fn missing_label_is_an_error() {
        let (tree, mut samples) = labelled(&["a", "b"]);
        samples[1].true_label = None;
        assert!(majority_label(&tree, tree.root, &samples).is_err());
    }

    #[test]
    fn accuracy_counts_against_all_victims() {
        let (tree, samples) = labelled(&["a", "b", "c"]);
        let registry: BTreeMap<_, _> = [(mac(0), "a"), (mac(1), "b"), (mac(2), "c")]
            .into_iter()
            .map(|(m, o)| (m, o.to_string()))
            .collect();
        let a = assignment(&[(0, 0), (1, 1), (2, 0)]);
        // (2, mac0) duplicates a device, which evaluation does not police.
        let acc = association_accuracy(&a, &tree, &samples, &registry).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);

        let empty = assignment(&[]);
        let r = evaluate(&empty, &tree, &samples, &registry).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.mean_purity, None);

        let all = assignment(&[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(association_accuracy(&all, &tree, &samples, &registry).unwrap(), 1.0);
    }

    #[test]
    fn unknown_device_is_incorrect() {
        let (tree, samples) = labelled(&["a"]);
        let registry: BTreeMap<_, _> = [(mac(0), "a".to_string())].into_iter().collect();
        let r = evaluate(&assignment(&[(0, 9)]), &tree, &samples, &registry).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.per_pair[0].owner, None);
    }

    #[test]
    fn purity_examples() {
        let (tree, samples) = labelled(&["a", "a", "a", "b"]);
        let registry: BTreeMap<_, _> = [(mac(0), "a".to_string())].into_iter().collect();
        let r = evaluate(&assignment(&[(tree.root, 0)]), &tree, &samples, &registry).unwrap();
        assert_eq!(r.mean_purity, Some(0.75));

        // Two correct pairs with purities 1.0 and 0.5.
        let (tree, samples) = labelled(&["a", "x", "b", "c"]);
        let registry: BTreeMap<_, _> =
            [(mac(0), "a".to_string()), (mac(1), "b".to_string())].into_iter().collect();
        let pair23 = tree.node(2).parent.unwrap();
        assert_eq!(tree.members(pair23).len(), 2);
        let r = evaluate(&assignment(&[(0, 0), (pair23, 1)]), &tree, &samples, &registry).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.mean_purity, Some(0.75));
    }

    fn rows(bits: &[&str]) -> Vec<ContextVector> {
        bits.iter().map(|b| ContextVector::from_bit_str(b).unwrap()).collect()
    }

    #[test]
    fn identical_rows_are_indistinguishable() {
        let a = rows(&["1101", "1101"]);
        for g in 1..=4 {
            assert_eq!(rand_g_distinguishability(&a, g, 5, 1).unwrap(), 0.0);
            assert_eq!(cont_g_distinguishability(&a, g, 5, 1).unwrap(), 0.0);
        }
    }

    #[test]
    fn identity_rows_single_session() {
        let a = rows(&["1000", "0100", "0010", "0001"]);
        assert_eq!(rand_g_distinguishability(&a, 1, 10, 3).unwrap(), 1.0);
        assert_eq!(cont_g_distinguishability(&a, 1, 10, 3).unwrap(), 1.0);
    }

    #[test]
    fn single_victim_is_always_distinct() {
        let a = rows(&["0110"]);
        assert_eq!(cont_g_distinguishability(&a, 2, 3, 0).unwrap(), 1.0);
    }

    #[test]
    fn nested_rows_need_the_full_row() {
        // The first victim's sessions are a subset of the second's.
        let a = rows(&["1100", "1110"]);
        let one = rand_g_distinguishability(&a, 1, 10, 0).unwrap();
        assert!(one < 0.5, "the subset victim is never singled out, got {one}");
        assert_eq!(rand_g_distinguishability(&a, 4, 10, 0).unwrap(), 1.0);
    }

    #[test]
    fn zero_window_is_a_config_error() {
        assert!(matches!(rand_g_distinguishability(&rows(&["1"]), 0, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn seeded_and_repeatable() {
        let a = rows(&["110101", "011011", "101101", "111000"]);
        let x = rand_g_distinguishability(&a, 2, 20, 9).unwrap();
        let y = rand_g_distinguishability(&a, 2, 20, 9).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = GroundTruth::default();
        t.sample_subjects.insert("x0".into(), "v1".into());
        t.device_subjects.insert(mac(4), "v1".into());
        let p = dir.path().join("truth.jsonl");
        write_truth(&p, &t).unwrap();
        assert_eq!(load_truth(&p).unwrap(), t);
    }

    #[test]
    fn feasibility_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        write_feasibility_csv(&p, &[(1, 0.5), (2, 1.0)]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "g,mean_distinguishability\n1,0.5\n2,1\n");
    }
}
