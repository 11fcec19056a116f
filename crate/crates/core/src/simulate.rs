//! Seeded synthetic datasets with planted ground truth.
//!
//! Subjects are Gaussian clusters on the unit sphere. Victims carry a
//! registered phone that is sniffed in the sessions they attend (with misses
//! and phantom sightings); out-of-set subjects carry none. Every session also
//! sees randomized MACs, infrastructure gear and distant devices, which the
//! device filter is expected to remove.
//!
//! Each subject and session draws from its own ChaCha stream, so adding a
//! subject leaves the draws of existing ones untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::device_filter::DEFAULT_VENDOR_BLACKLIST;
use crate::error::{Error, Result};
use crate::evaluation::{write_truth, GroundTruth};
use crate::ingest::{self, OuiDatabase};
use crate::model::{l2_normalize, BiometricSample, ContextVector, Dataset, MacAddress, Oui, Session, Sighting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub victims: usize,
    pub oos_subjects: usize,
    pub sessions: usize,
    pub embed_dim: usize,
    /// Standard deviation of the Gaussian noise added to each coordinate of a
    /// subject's mean direction before re-normalizing.
    pub embed_noise_sigma: f64,
    pub samples_per_attendee_mean: f64,
    pub victim_attend_prob_range: [f64; 2],
    pub oos_attend_prob_range: [f64; 2],
    pub device_miss_prob: f64,
    pub phantom_prob: f64,
    pub randomized_macs_per_session: usize,
    pub infra_macs: usize,
    pub distant_macs: usize,
    pub rss_inside_range: [i32; 2],
    pub rss_outside_range: [i32; 2],
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            victims: 50,
            oos_subjects: 20,
            sessions: 100,
            embed_dim: 64,
            embed_noise_sigma: 0.35,
            samples_per_attendee_mean: 5.0,
            victim_attend_prob_range: [0.2, 0.8],
            oos_attend_prob_range: [0.05, 0.3],
            device_miss_prob: 0.1,
            phantom_prob: 0.05,
            randomized_macs_per_session: 20,
            infra_macs: 5,
            distant_macs: 10,
            rss_inside_range: [-54, -30],
            rss_outside_range: [-90, -60],
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.victims == 0 {
            return bad("at least one victim is required".into());
        }
        if self.sessions == 0 {
            return bad("at least one session is required".into());
        }
        if self.embed_dim == 0 {
            return bad("embedding dimension must be positive".into());
        }
        if !(self.embed_noise_sigma >= 0.0 && self.embed_noise_sigma.is_finite()) {
            return bad(format!("embed_noise_sigma {} must be finite and >= 0", self.embed_noise_sigma));
        }
        if !(self.samples_per_attendee_mean >= 1.0 && self.samples_per_attendee_mean.is_finite()) {
            return bad(format!(
                "samples_per_attendee_mean {} must be at least 1",
                self.samples_per_attendee_mean
            ));
        }
        for (name, p) in [("device_miss_prob", self.device_miss_prob), ("phantom_prob", self.phantom_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        for (name, [lo, hi]) in [
            ("victim_attend_prob_range", self.victim_attend_prob_range),
            ("oos_attend_prob_range", self.oos_attend_prob_range),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return bad(format!("{name} [{lo}, {hi}] must be an ordered range within [0, 1]"));
            }
        }
        for (name, [lo, hi]) in [
            ("rss_inside_range", self.rss_inside_range),
            ("rss_outside_range", self.rss_outside_range),
        ] {
            if lo > hi || lo < crate::model::RSS_MIN || hi > crate::model::RSS_MAX {
                return bad(format!("{name} [{lo}, {hi}] must be an ordered range of valid dBm"));
            }
        }
        Ok(())
    }

    fn subject_label(&self, s: usize) -> String {
        let width = (self.victims.max(self.oos_subjects)).to_string().len();
        if s < self.victims {
            format!("v{s:0width$}")
        } else {
            format!("o{:0width$}", s - self.victims)
        }
    }
}

/// A generated dataset with its planted truth.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub config: SimConfig,
    /// Samples carry their `true_label`; the registry lists every victim.
    pub dataset: Dataset,
    pub oui: OuiDatabase,
    pub truth: GroundTruth,
    /// Victim attendance rows in victim order.
    pub victim_attendance: Vec<ContextVector>,
}

const SESSION_SPACING_MS: i64 = 3_600_000;
const SESSION_LENGTH_MS: i64 = 1_800_000;
const REROLL_LIMIT: usize = 16;

#[derive(Clone, Copy)]
enum Stream {
    Attendance = 1,
    Content = 2,
    Reroll = 3,
    Session = 4,
    Fixed = 5,
}

fn stream_rng(seed: u64, kind: Stream, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 40) | index as u64);
    rng
}

fn uniform_in(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn gaussian_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        if let Some(v) = l2_normalize(&gaussian_vector(rng, dim)) {
            return v;
        }
    }
}

fn random_mac(rng: &mut impl Rng, oui: Option<Oui>, randomized: bool) -> MacAddress {
    let mut o: [u8; 6] = rng.random();
    if let Some(p) = oui {
        o[..3].copy_from_slice(&p);
    } else if randomized {
        o[0] = (o[0] | 0x02) & !0x01;
    } else {
        o[0] &= !0x03;
    }
    MacAddress::new(o)
}

fn draw_unique<R: Rng>(
    used: &mut BTreeSet<MacAddress>,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> MacAddress,
) -> MacAddress {
    loop {
        let m = draw(rng);
        if used.insert(m) {
            return m;
        }
    }
}

fn vendor_ouis(db: &OuiDatabase, blacklisted: bool) -> Vec<Oui> {
    db.iter()
        .filter(|(_, vendor)| {
            let v = vendor.to_ascii_lowercase();
            DEFAULT_VENDOR_BLACKLIST.iter().any(|b| v.contains(b)) == blacklisted
        })
        .map(|(oui, _)| *oui)
        .collect()
}

fn inside_rss(rng: &mut impl Rng, cfg: &SimConfig) -> i32 {
    rng.random_range(cfg.rss_inside_range[0]..=cfg.rss_inside_range[1])
}

fn outside_rss(rng: &mut impl Rng, cfg: &SimConfig) -> i32 {
    rng.random_range(cfg.rss_outside_range[0]..=cfg.rss_outside_range[1])
}

fn sight(rng: &mut impl Rng, session: &Session, mac: MacAddress, rss: i32, out: &mut Vec<Sighting>) {
    let packets = rng.random_range(1..=3);
    for i in 0..packets {
        out.push(Sighting {
            mac,
            timestamp_ms: rng.random_range(session.start_ms..session.end_ms),
            // Only the first packet is guaranteed to carry the drawn strength.
            rss_dbm: if i == 0 { rss } else { rss - rng.random_range(0..=6) }.max(crate::model::RSS_MIN),
        });
    }
}

/// Build a dataset from `config`. Deterministic in the config.
pub fn generate(config: &SimConfig) -> Result<SimDataset> {
    config.validate()?;
    let cfg = config;
    let g = cfg.sessions;
    let subjects = cfg.victims + cfg.oos_subjects;
    let oui_db = OuiDatabase::bundled();
    let phone_ouis = vendor_ouis(&oui_db, false);
    let infra_ouis = vendor_ouis(&oui_db, true);

    let sessions: Vec<Session> = (0..g)
        .map(|j| {
            let start = j as i64 * SESSION_SPACING_MS;
            Session {
                id: format!("s{j:0w$}", w = g.to_string().len()),
                start_ms: start,
                end_ms: start + SESSION_LENGTH_MS,
                location: "sim-room".into(),
            }
        })
        .collect();

    // Attendance probabilities and first-pass attendance.
    let mut attend_prob = Vec::with_capacity(subjects);
    let mut attends = vec![vec![false; g]; subjects];
    for (s, row) in attends.iter_mut().enumerate() {
        let mut rng = stream_rng(cfg.seed, Stream::Attendance, s);
        let range = if s < cfg.victims {
            cfg.victim_attend_prob_range
        } else {
            cfg.oos_attend_prob_range
        };
        let p = uniform_in(&mut rng, range);
        attend_prob.push(p);
        for a in row.iter_mut() {
            *a = rng.random_bool(p);
        }
    }
    for j in 0..g {
        let mut rng = stream_rng(cfg.seed, Stream::Reroll, j);
        for _ in 0..REROLL_LIMIT {
            if (0..subjects).any(|s| attends[s][j]) {
                break;
            }
            for s in 0..subjects {
                attends[s][j] = rng.random_bool(attend_prob[s]);
            }
        }
    }

    let mut used_macs = BTreeSet::new();
    let mut registry = BTreeMap::new();
    let mut truth = GroundTruth::default();
    let mut sightings = Vec::new();
    let mut per_session_samples: Vec<Vec<BiometricSample>> = vec![Vec::new(); g];
    let extra = Poisson::new(cfg.samples_per_attendee_mean - 1.0).ok();

    for s in 0..subjects {
        let label = cfg.subject_label(s);
        let mut rng = stream_rng(cfg.seed, Stream::Content, s);
        let mean = unit_vector(&mut rng, cfg.embed_dim);
        let device = (s < cfg.victims).then(|| {
            let mac = draw_unique(&mut used_macs, &mut rng, |r| {
                let oui = phone_ouis[r.random_range(0..phone_ouis.len())];
                random_mac(r, Some(oui), false)
            });
            registry.insert(mac, label.clone());
            truth.device_subjects.insert(mac, label.clone());
            mac
        });
        for (j, session) in sessions.iter().enumerate() {
            if attends[s][j] {
                let n = 1 + extra.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
                for _ in 0..n {
                    let noise = gaussian_vector(&mut rng, cfg.embed_dim);
                    let raw: Vec<f64> = mean
                        .iter()
                        .zip(&noise)
                        .map(|(m, e)| m + cfg.embed_noise_sigma * e)
                        .collect();
                    let embedding = l2_normalize(&raw).unwrap_or_else(|| mean.clone());
                    per_session_samples[j].push(BiometricSample {
                        sample_id: String::new(),
                        session_id: session.id.clone(),
                        embedding,
                        true_label: Some(label.clone()),
                    });
                }
            }
            if let Some(mac) = device {
                let seen = if attends[s][j] {
                    !rng.random_bool(cfg.device_miss_prob)
                } else {
                    rng.random_bool(cfg.phantom_prob)
                };
                if seen {
                    let rss = inside_rss(&mut rng, cfg);
                    sight(&mut rng, session, mac, rss, &mut sightings);
                }
            }
        }
    }

    // Static nuisance devices: infrastructure (blacklisted vendors) and
    // distant phones outside the geo-fence.
    let mut fixed = stream_rng(cfg.seed, Stream::Fixed, 0);
    let infra: Vec<MacAddress> = (0..cfg.infra_macs)
        .map(|_| {
            draw_unique(&mut used_macs, &mut fixed, |r| {
                let oui = infra_ouis[r.random_range(0..infra_ouis.len())];
                random_mac(r, Some(oui), false)
            })
        })
        .collect();
    let distant: Vec<MacAddress> = (0..cfg.distant_macs)
        .map(|_| {
            draw_unique(&mut used_macs, &mut fixed, |r| {
                let oui = phone_ouis[r.random_range(0..phone_ouis.len())];
                random_mac(r, Some(oui), false)
            })
        })
        .collect();
    for (j, session) in sessions.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, Stream::Session, j);
        for &mac in &infra {
            let rss = inside_rss(&mut rng, cfg);
            sight(&mut rng, session, mac, rss, &mut sightings);
        }
        for &mac in &distant {
            let rss = outside_rss(&mut rng, cfg);
            sight(&mut rng, session, mac, rss, &mut sightings);
        }
        for _ in 0..cfg.randomized_macs_per_session {
            let mac = draw_unique(&mut used_macs, &mut rng, |r| random_mac(r, None, true));
            let rss = inside_rss(&mut rng, cfg);
            sight(&mut rng, session, mac, rss, &mut sightings);
        }
    }
    sightings.sort_by_key(|s| (s.timestamp_ms, s.mac, s.rss_dbm));

    let total: usize = per_session_samples.iter().map(Vec::len).sum();
    let width = total.max(1).to_string().len();
    let mut samples = Vec::with_capacity(total);
    for batch in per_session_samples {
        for mut sample in batch {
            sample.sample_id = format!("x{:0width$}", samples.len());
            truth
                .sample_subjects
                .insert(sample.sample_id.clone(), sample.true_label.clone().expect("labelled above"));
            samples.push(sample);
        }
    }

    let victim_attendance = attends[..cfg.victims].iter().map(|r| ContextVector::from_bits(r)).collect();
    let dataset = Dataset::new(sessions, samples, sightings, Some(registry))?;
    Ok(SimDataset {
        config: cfg.clone(),
        dataset,
        oui: oui_db,
        truth,
        victim_attendance,
    })
}

/// Attendance rows for `victims` people over `sessions` sessions. Victim `i`
/// attends each session independently with rate
/// `lo + (hi − lo)·(i + ½)/victims`, so all rates differ.
pub fn random_attendance(victims: usize, sessions: usize, [lo, hi]: [f64; 2], seed: u64) -> Result<Vec<ContextVector>> {
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!("attendance rates [{lo}, {hi}] must lie in [0, 1]")));
    }
    Ok((0..victims)
        .map(|i| {
            let rate = lo + (hi - lo) * (i as f64 + 0.5) / victims as f64;
            let mut rng = stream_rng(seed, Stream::Attendance, i);
            let bits: Vec<bool> = (0..sessions).map(|_| rng.random_bool(rate)).collect();
            ContextVector::from_bits(&bits)
        })
        .collect())
}

pub const TRUTH_FILE: &str = "truth.jsonl";
pub const CONFIG_FILE: &str = "config.json";

impl SimDataset {
    /// Write the five input files, `truth.jsonl` and `config.json` into `dir`.
    /// Sample labels go to the truth manifest only.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ds = &self.dataset;
        let unlabelled: Vec<BiometricSample> = ds
            .samples
            .iter()
            .map(|s| BiometricSample {
                true_label: None,
                ..s.clone()
            })
            .collect();
        ingest::write_sessions(dir.join(ingest::SESSIONS_FILE), &ds.sessions)?;
        ingest::write_sightings(dir.join(ingest::SIGHTINGS_FILE), &ds.sightings)?;
        ingest::write_embeddings(dir.join(ingest::EMBEDDINGS_FILE), &unlabelled)?;
        ingest::write_registry(
            dir.join(ingest::REGISTRY_FILE),
            ds.registry.as_ref().expect("simulated datasets carry a registry"),
        )?;
        ingest::write_oui(dir.join(ingest::OUI_FILE), &self.oui)?;
        write_truth(dir.join(TRUTH_FILE), &self.truth)?;
        let config = dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| Error::Pipeline(e.to_string()))?;
        std::fs::write(&config, json + "\n").map_err(|e| Error::io(&config, e))
    }
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    OosSubjects,
    Sessions,
    /// Evaluation-side: the dataset is unchanged.
    RssThreshold,
    /// Evaluation-side: the dataset is unchanged.
    Omega,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "oos" | "oos_subjects" => Ok(SweepParam::OosSubjects),
            "sessions" => Ok(SweepParam::Sessions),
            "rss" | "rss_threshold" => Ok(SweepParam::RssThreshold),
            "omega" => Ok(SweepParam::Omega),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?} (oos_subjects|sessions|rss_threshold|omega)"
            ))),
        }
    }
}

/// One point of a sweep: a dataset config plus optional evaluation overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub config: SimConfig,
    pub rss_threshold: Option<i32>,
    pub omega: Option<f64>,
}

/// One point per value, seeded `base.seed + index`.
pub fn sweep(base: &SimConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepPoint>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let mut config = base.clone();
            config.seed = base.seed.wrapping_add(i as u64);
            let count = || {
                if value < 0.0 || value.fract() != 0.0 {
                    Err(Error::Config(format!("{param:?} needs a nonnegative integer, got {value}")))
                } else {
                    Ok(value as usize)
                }
            };
            let mut point = SweepPoint {
                value,
                config: base.clone(),
                rss_threshold: None,
                omega: None,
            };
            match param {
                SweepParam::OosSubjects => config.oos_subjects = count()?,
                SweepParam::Sessions => config.sessions = count()?,
                SweepParam::RssThreshold => {
                    if value.fract() != 0.0 {
                        return Err(Error::Config(format!("rss threshold must be an integer, got {value}")));
                    }
                    point.rss_threshold = Some(value as i32);
                }
                SweepParam::Omega => {
                    crate::association::validate_omega(value)?;
                    point.omega = Some(value);
                }
            }
            config.validate()?;
            point.config = config;
            Ok(point)
        })
        .collect()
}
