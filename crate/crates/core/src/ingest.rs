//! File formats: loading, validation, writing, and binding sightings to sessions.
//!
//! | file        | format | shape                                                   |
//! |-------------|--------|---------------------------------------------------------|
//! | sessions    | JSONL  | `{"id", "start_ms", "end_ms", "location"}`              |
//! | sightings   | CSV    | `timestamp_ms,mac,rss_dbm`                              |
//! | embeddings  | JSONL  | `{"sample_id", "session_id", "vector", "true_label"?}`  |
//! | registry    | CSV    | `mac,owner`                                             |
//! | oui         | CSV    | `prefix,vendor` (prefix = 6 hex digits)                 |

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    l2_normalize, parse_mac, BiometricSample, Dataset, MacAddress, Oui, Session, Sighting,
    RSS_MAX, RSS_MIN,
};

pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const SIGHTINGS_FILE: &str = "sightings.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const REGISTRY_FILE: &str = "registry.csv";
pub const OUI_FILE: &str = "oui.csv";

const BUNDLED_OUI: &str = include_str!("../data/oui.csv");

/// How malformed rows are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    /// Skip bad rows, recording one warning per skipped row.
    Lenient,
}

/// A loaded value together with the rows skipped in lenient mode.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub value: T,
    pub skipped: Vec<String>,
}

struct RowSink {
    mode: ParseMode,
    skipped: Vec<String>,
}

impl RowSink {
    fn new(mode: ParseMode) -> Self {
        RowSink {
            mode,
            skipped: Vec::new(),
        }
    }

    /// Pass an error through in strict mode, or record it and continue.
    fn reject(&mut self, err: Error) -> Result<()> {
        match self.mode {
            ParseMode::Strict => Err(err),
            ParseMode::Lenient => {
                self.skipped.push(err.to_string());
                Ok(())
            }
        }
    }

    fn finish<T>(self, value: T) -> Loaded<T> {
        Loaded {
            value,
            skipped: self.skipped,
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Iterate over non-blank lines with 1-based line numbers.
fn jsonl_lines(path: &Path) -> Result<Vec<(u64, String)>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i as u64 + 1, line));
    }
    Ok(out)
}

fn csv_reader(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    let got: Vec<&str> = headers.iter().collect();
    // An empty file has no header row at all; treat it as zero records.
    if !(got.is_empty() || got == [""]) && got != expected {
        return Err(Error::parse(
            path,
            1,
            format!("expected header {:?}, found {:?}", expected.join(","), got.join(",")),
        ));
    }
    Ok(reader)
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

#[derive(Deserialize)]
struct SessionRow {
    id: String,
    start_ms: i64,
    end_ms: i64,
    location: String,
}

pub fn load_sessions(path: impl AsRef<Path>) -> Result<Vec<Session>> {
    Ok(load_sessions_with(path, ParseMode::Strict)?.value)
}

/// Sessions come back sorted by start time (stable for equal starts).
pub fn load_sessions_with(path: impl AsRef<Path>, mode: ParseMode) -> Result<Loaded<Vec<Session>>> {
    let path = path.as_ref();
    let mut sink = RowSink::new(mode);
    let mut sessions = Vec::new();
    let mut seen = HashSet::new();
    for (line, text) in jsonl_lines(path)? {
        let row: SessionRow = match serde_json::from_str(&text) {
            Ok(r) => r,
            Err(e) => {
                sink.reject(Error::parse(path, line, e.to_string()))?;
                continue;
            }
        };
        if row.start_ms >= row.end_ms {
            sink.reject(Error::parse(
                path,
                line,
                format!("session {}: start {} is not before end {}", row.id, row.start_ms, row.end_ms),
            ))?;
            continue;
        }
        if !seen.insert(row.id.clone()) {
            // Duplicate ids make context-vector positions ambiguous; never skippable.
            return Err(Error::parse(path, line, format!("duplicate session id {:?}", row.id)));
        }
        sessions.push(Session {
            id: row.id,
            start_ms: row.start_ms,
            end_ms: row.end_ms,
            location: row.location,
        });
    }
    sessions.sort_by_key(|s| s.start_ms);
    Ok(sink.finish(sessions))
}

pub fn load_sightings(path: impl AsRef<Path>) -> Result<Vec<Sighting>> {
    Ok(load_sightings_with(path, ParseMode::Strict)?.value)
}

pub fn load_sightings_with(path: impl AsRef<Path>, mode: ParseMode) -> Result<Loaded<Vec<Sighting>>> {
    let path = path.as_ref();
    let mut reader = csv_reader(path, &["timestamp_ms", "mac", "rss_dbm"])?;
    let mut sink = RowSink::new(mode);
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                sink.reject(Error::parse(path, line, e.to_string()))?;
                continue;
            }
        };
        match parse_sighting(&rec) {
            Ok(s) => out.push(s),
            Err(msg) => sink.reject(Error::parse(path, record_line(&rec), msg))?,
        }
    }
    Ok(sink.finish(out))
}

fn parse_sighting(rec: &csv::StringRecord) -> std::result::Result<Sighting, String> {
    if rec.len() != 3 {
        return Err(format!("expected 3 fields, found {}", rec.len()));
    }
    let timestamp_ms: i64 = rec[0]
        .parse()
        .map_err(|_| format!("bad timestamp {:?}", &rec[0]))?;
    let mac = parse_mac(&rec[1]).map_err(|e| e.to_string())?;
    let rss_dbm: i32 = rec[2]
        .parse()
        .map_err(|_| format!("rss {:?} is not an integer", &rec[2]))?;
    if !(RSS_MIN..=RSS_MAX).contains(&rss_dbm) {
        return Err(format!("rss {rss_dbm} outside [{RSS_MIN}, {RSS_MAX}]"));
    }
    Ok(Sighting {
        mac,
        timestamp_ms,
        rss_dbm,
    })
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRow {
    sample_id: String,
    session_id: String,
    vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_label: Option<String>,
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<BiometricSample>> {
    Ok(load_embeddings_with(path, ParseMode::Strict)?.value)
}

/// Embeddings are L2-normalized on the way in. The first accepted row fixes
/// the dimension.
pub fn load_embeddings_with(
    path: impl AsRef<Path>,
    mode: ParseMode,
) -> Result<Loaded<Vec<BiometricSample>>> {
    let path = path.as_ref();
    let mut sink = RowSink::new(mode);
    let mut out: Vec<BiometricSample> = Vec::new();
    for (line, text) in jsonl_lines(path)? {
        let row: EmbeddingRow = match serde_json::from_str(&text) {
            Ok(r) => r,
            Err(e) => {
                sink.reject(Error::parse(path, line, e.to_string()))?;
                continue;
            }
        };
        if let Some(first) = out.first() {
            if first.embedding.len() != row.vector.len() {
                sink.reject(Error::parse(
                    path,
                    line,
                    format!(
                        "dimension mismatch: {} has {} components, expected {}",
                        row.sample_id,
                        row.vector.len(),
                        first.embedding.len()
                    ),
                ))?;
                continue;
            }
        }
        let Some(embedding) = l2_normalize(&row.vector) else {
            sink.reject(Error::parse(
                path,
                line,
                format!("sample {} has a zero or non-finite vector", row.sample_id),
            ))?;
            continue;
        };
        out.push(BiometricSample {
            sample_id: row.sample_id,
            session_id: row.session_id,
            embedding,
            true_label: row.true_label,
        });
    }
    Ok(sink.finish(out))
}

/// Ground-truth `mac,owner` table.
pub fn load_registry(path: impl AsRef<Path>) -> Result<BTreeMap<MacAddress, String>> {
    let path = path.as_ref();
    let mut reader = csv_reader(path, &["mac", "owner"])?;
    let mut out = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            Error::parse(path, e.position().map(|p| p.line()).unwrap_or(0), e.to_string())
        })?;
        let line = record_line(&rec);
        if rec.len() != 2 {
            return Err(Error::parse(path, line, "expected 2 fields"));
        }
        let mac = parse_mac(&rec[0]).map_err(|e| Error::parse(path, line, e.to_string()))?;
        if out.insert(mac, rec[1].to_string()).is_some() {
            return Err(Error::parse(path, line, format!("duplicate registry entry {mac}")));
        }
    }
    Ok(out)
}

/// Vendor lookup keyed by OUI.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OuiDatabase {
    entries: BTreeMap<Oui, String>,
}

impl OuiDatabase {
    pub fn from_entries(entries: impl IntoIterator<Item = (Oui, String)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (oui, vendor) in entries {
            if map.insert(oui, vendor).is_some() {
                return Err(Error::Contract(format!("duplicate OUI {}", format_oui(oui))));
            }
        }
        Ok(OuiDatabase { entries: map })
    }

    /// The small OUI table shipped with the crate.
    pub fn bundled() -> Self {
        parse_oui_csv(Path::new("<bundled oui.csv>"), BUNDLED_OUI.as_bytes())
            .expect("bundled OUI table is well formed")
    }

    pub fn vendor(&self, oui: Oui) -> Option<&str> {
        self.entries.get(&oui).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Oui, &str)> {
        self.entries.iter().map(|(k, v)| (k, v.as_str()))
    }
}

pub fn format_oui(oui: Oui) -> String {
    format!("{:02x}{:02x}{:02x}", oui[0], oui[1], oui[2])
}

pub fn parse_oui(text: &str) -> Option<Oui> {
    if text.len() != 6 || !text.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    let v = u32::from_str_radix(text, 16).ok()?;
    Some([(v >> 16) as u8, (v >> 8) as u8, v as u8])
}

pub fn load_oui(path: impl AsRef<Path>) -> Result<OuiDatabase> {
    let path = path.as_ref();
    parse_oui_csv(path, open(path)?)
}

fn parse_oui_csv(path: &Path, input: impl std::io::Read) -> Result<OuiDatabase> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    let got: Vec<&str> = headers.iter().collect();
    if !(got.is_empty() || got == [""]) && got != ["prefix", "vendor"] {
        return Err(Error::parse(path, 1, "expected header \"prefix,vendor\""));
    }
    let mut entries = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            Error::parse(path, e.position().map(|p| p.line()).unwrap_or(0), e.to_string())
        })?;
        let line = record_line(&rec);
        if rec.len() != 2 {
            return Err(Error::parse(path, line, "expected 2 fields"));
        }
        let oui = parse_oui(&rec[0])
            .ok_or_else(|| Error::parse(path, line, format!("malformed prefix {:?}", &rec[0])))?;
        if entries.insert(oui, rec[1].to_string()).is_some() {
            return Err(Error::parse(path, line, format!("duplicate prefix {}", &rec[0])));
        }
    }
    Ok(OuiDatabase { entries })
}

/// Per-session device presence: strongest RSS observed for each MAC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionizedSightings {
    pub session_ids: Vec<String>,
    /// Indexed like `session_ids`.
    pub per_session: Vec<BTreeMap<MacAddress, i32>>,
    /// Sightings that fell outside every session window.
    pub dropped: usize,
    /// Sightings that matched more than one session window.
    pub overlap_warnings: usize,
    /// Sightings assigned to each session.
    pub assigned: Vec<usize>,
}

impl SessionizedSightings {
    pub fn session_count(&self) -> usize {
        self.session_ids.len()
    }

    /// Every MAC seen in at least one session.
    pub fn macs(&self) -> std::collections::BTreeSet<MacAddress> {
        self.per_session
            .iter()
            .flat_map(|m| m.keys().copied())
            .collect()
    }

    pub fn max_rss(&self, session: usize, mac: &MacAddress) -> Option<i32> {
        self.per_session.get(session)?.get(mac).copied()
    }
}

/// Bind sightings to the half-open windows `[start, end)` of `sessions`.
///
/// `sessions` must be ordered by start. A timestamp inside several windows
/// goes to the earliest-starting one.
pub fn sessionize(sightings: &[Sighting], sessions: &[Session]) -> SessionizedSightings {
    let mut out = SessionizedSightings {
        session_ids: sessions.iter().map(|s| s.id.clone()).collect(),
        per_session: vec![BTreeMap::new(); sessions.len()],
        dropped: 0,
        overlap_warnings: 0,
        assigned: vec![0; sessions.len()],
    };
    for s in sightings {
        // Sessions starting after the timestamp cannot contain it.
        let upto = sessions.partition_point(|x| x.start_ms <= s.timestamp_ms);
        let mut hits = sessions[..upto]
            .iter()
            .enumerate()
            .filter(|(_, x)| x.contains(s.timestamp_ms))
            .map(|(i, _)| i);
        let Some(first) = hits.next() else {
            out.dropped += 1;
            continue;
        };
        if hits.next().is_some() {
            out.overlap_warnings += 1;
        }
        out.assigned[first] += 1;
        out.per_session[first]
            .entry(s.mac)
            .and_modify(|r| *r = (*r).max(s.rss_dbm))
            .or_insert(s.rss_dbm);
    }
    out
}

/// Paths of the five input files.
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub sessions: PathBuf,
    pub sightings: PathBuf,
    pub embeddings: PathBuf,
    pub registry: Option<PathBuf>,
    pub oui: Option<PathBuf>,
}

impl DatasetPaths {
    /// Standard file names inside one directory. Optional files are only
    /// referenced when present.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let optional = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        DatasetPaths {
            sessions: dir.join(SESSIONS_FILE),
            sightings: dir.join(SIGHTINGS_FILE),
            embeddings: dir.join(EMBEDDINGS_FILE),
            registry: optional(REGISTRY_FILE),
            oui: optional(OUI_FILE),
        }
    }
}

/// Load and validate a dataset plus its OUI table (empty when absent).
pub fn load_dataset(paths: &DatasetPaths, mode: ParseMode) -> Result<(Dataset, OuiDatabase, Vec<String>)> {
    let mut warnings = Vec::new();
    let sessions = load_sessions_with(&paths.sessions, mode)?;
    let sightings = load_sightings_with(&paths.sightings, mode)?;
    let samples = load_embeddings_with(&paths.embeddings, mode)?;
    warnings.extend(sessions.skipped);
    warnings.extend(sightings.skipped);
    warnings.extend(samples.skipped);
    let registry = paths.registry.as_ref().map(load_registry).transpose()?;
    let oui = match &paths.oui {
        Some(p) => load_oui(p)?,
        None => OuiDatabase::default(),
    };
    let ds = Dataset::new(sessions.value, samples.value, sightings.value, registry)?;
    Ok((ds, oui, warnings))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn write_sessions(path: impl AsRef<Path>, sessions: &[Session]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for s in sessions {
        let line = serde_json::to_string(s).map_err(|e| Error::Pipeline(e.to_string()))?;
        writeln!(w, "{line}").map_err(write_err(path))?;
    }
    w.flush().map_err(write_err(path))
}

pub fn write_sightings(path: impl AsRef<Path>, sightings: &[Sighting]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    writeln!(w, "timestamp_ms,mac,rss_dbm").map_err(write_err(path))?;
    for s in sightings {
        writeln!(w, "{},{},{}", s.timestamp_ms, s.mac, s.rss_dbm).map_err(write_err(path))?;
    }
    w.flush().map_err(write_err(path))
}

pub fn write_embeddings(path: impl AsRef<Path>, samples: &[BiometricSample]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for s in samples {
        let row = EmbeddingRow {
            sample_id: s.sample_id.clone(),
            session_id: s.session_id.clone(),
            vector: s.embedding.clone(),
            true_label: s.true_label.clone(),
        };
        let line = serde_json::to_string(&row).map_err(|e| Error::Pipeline(e.to_string()))?;
        writeln!(w, "{line}").map_err(write_err(path))?;
    }
    w.flush().map_err(write_err(path))
}

pub fn write_registry(path: impl AsRef<Path>, registry: &BTreeMap<MacAddress, String>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Pipeline(e.to_string()))?;
    let wrap = |e: csv::Error| Error::Pipeline(format!("{}: {e}", path.display()));
    w.write_record(["mac", "owner"]).map_err(wrap)?;
    for (mac, owner) in registry {
        w.write_record([mac.to_string().as_str(), owner.as_str()])
            .map_err(wrap)?;
    }
    w.flush().map_err(write_err(path))
}

pub fn write_oui(path: impl AsRef<Path>, db: &OuiDatabase) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Pipeline(e.to_string()))?;
    let wrap = |e: csv::Error| Error::Pipeline(format!("{}: {e}", path.display()));
    w.write_record(["prefix", "vendor"]).map_err(wrap)?;
    for (oui, vendor) in db.iter() {
        w.write_record([format_oui(*oui).as_str(), vendor]).map_err(wrap)?;
    }
    w.flush().map_err(write_err(path))
}
