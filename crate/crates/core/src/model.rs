//! Core domain types shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A 48-bit IEEE 802 MAC address.
///
/// Ordering follows the octets, which coincides with the ordering of the
/// canonical lowercase text form.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MacAddress([u8; 6]);

/// Organizationally Unique Identifier: the first three octets of a MAC.
pub type Oui = [u8; 3];

impl MacAddress {
    pub const fn new(octets: [u8; 6]) -> Self {
        MacAddress(octets)
    }

    pub fn octets(&self) -> [u8; 6] {
        self.0
    }

    /// True when the locally-administered bit (mask `0x02` of the first
    /// octet) is set. Randomized addresses always carry it.
    pub fn is_locally_administered(&self) -> bool {
        self.0[0] & 0x02 != 0
    }

    pub fn oui(&self) -> Oui {
        [self.0[0], self.0[1], self.0[2]]
    }
}

/// Parse a colon-separated MAC address, accepting either hex case.
pub fn parse_mac(text: &str) -> Result<MacAddress> {
    let err = |reason: String| Error::MacParse {
        input: text.to_string(),
        reason,
    };
    let tokens: Vec<&str> = text.split(':').collect();
    if tokens.len() != 6 {
        if tokens.len() == 1 && text.len() > 2 {
            return Err(err(format!(
                "expected ':' separators, found token {text:?}"
            )));
        }
        return Err(err(format!("expected 6 octets, found {}", tokens.len())));
    }
    let mut octets = [0u8; 6];
    for (i, tok) in tokens.iter().enumerate() {
        if tok.len() != 2 || !tok.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(err(format!("bad octet {tok:?} at position {i}")));
        }
        octets[i] = u8::from_str_radix(tok, 16).map_err(|e| err(format!("{tok:?}: {e}")))?;
    }
    Ok(MacAddress(octets))
}

pub fn is_locally_administered(mac: MacAddress) -> bool {
    mac.is_locally_administered()
}

pub fn oui_of(mac: MacAddress) -> Oui {
    mac.oui()
}

impl fmt::Display for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            o[0], o[1], o[2], o[3], o[4], o[5]
        )
    }
}

impl fmt::Debug for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacAddress({self})")
    }
}

impl FromStr for MacAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_mac(s)
    }
}

impl Serialize for MacAddress {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddress {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_mac(&s).map_err(serde::de::Error::custom)
    }
}

/// A time-bounded, located eavesdropping interval `[start_ms, end_ms)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub start_ms: i64,
    pub end_ms: i64,
    pub location: String,
}

impl Session {
    pub fn contains(&self, timestamp_ms: i64) -> bool {
        self.start_ms <= timestamp_ms && timestamp_ms < self.end_ms
    }
}

pub const RSS_MIN: i32 = -120;
pub const RSS_MAX: i32 = 0;

/// One sniffed packet: source address, capture time and signal strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sighting {
    pub mac: MacAddress,
    pub timestamp_ms: i64,
    pub rss_dbm: i32,
}

/// One biometric observation, embedded by an external feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct BiometricSample {
    pub sample_id: String,
    pub session_id: String,
    pub embedding: Vec<f64>,
    pub true_label: Option<String>,
}

/// Scale `v` to unit L2 norm. Returns `None` for the zero vector.
pub fn l2_normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Binary session-attendance vector, one bit per session in manifest order.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ContextVector {
    words: Vec<u64>,
    len: usize,
}

impl ContextVector {
    pub fn zeros(len: usize) -> Self {
        ContextVector {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut v = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                v.set(i);
            }
        }
        v
    }

    /// Parse a string of `0`/`1` characters, index 0 first.
    pub fn from_bit_str(s: &str) -> Result<Self> {
        let mut v = Self::zeros(s.len());
        for (i, c) in s.chars().enumerate() {
            match c {
                '1' => v.set(i),
                '0' => {}
                other => {
                    return Err(Error::Contract(format!(
                        "context vector contains {other:?}"
                    )))
                }
            }
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn or_assign(&mut self, other: &ContextVector) {
        debug_assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn union(&self, other: &ContextVector) -> ContextVector {
        let mut out = self.clone();
        out.or_assign(other);
        out
    }

    fn and_count(&self, other: &ContextVector) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    fn xor_count(&self, other: &ContextVector) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }

    pub fn to_bit_string(&self) -> String {
        (0..self.len)
            .map(|i| if self.get(i) { '1' } else { '0' })
            .collect()
    }
}

impl fmt::Debug for ContextVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContextVector({})", self.to_bit_string())
    }
}

impl Serialize for ContextVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_bit_string())
    }
}

impl<'de> Deserialize<'de> for ContextVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ContextVector::from_bit_str(&s).map_err(serde::de::Error::custom)
    }
}

fn check_len(a: &ContextVector, b: &ContextVector) -> Result<()> {
    if a.len != b.len {
        return Err(Error::Contract(format!(
            "context vector lengths differ: {} vs {}",
            a.len, b.len
        )));
    }
    Ok(())
}

/// Dice coefficient `2|a∧b| / (|a|+|b|)`. Two all-zero vectors score 0.
pub fn context_dice(a: &ContextVector, b: &ContextVector) -> Result<f64> {
    check_len(a, b)?;
    let total = a.count_ones() + b.count_ones();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * f64::from(a.and_count(b)) / f64::from(total))
}

/// `1 / (1 + ||a - b||₂)` with bits read as 0/1 reals.
pub fn context_euclidean_similarity(a: &ContextVector, b: &ContextVector) -> Result<f64> {
    check_len(a, b)?;
    Ok(1.0 / (1.0 + f64::from(a.xor_count(b)).sqrt()))
}

/// Which attendance similarity feeds the association score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMetric {
    #[default]
    Dice,
    Euclidean,
}

impl ContextMetric {
    pub fn similarity(self, a: &ContextVector, b: &ContextVector) -> Result<f64> {
        match self {
            ContextMetric::Dice => context_dice(a, b),
            ContextMetric::Euclidean => context_euclidean_similarity(a, b),
        }
    }
}

impl FromStr for ContextMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dice" => Ok(ContextMetric::Dice),
            "euclidean" | "euc" => Ok(ContextMetric::Euclidean),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

/// Everything the attack observes, plus optional ground truth.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// Ordered by start time; position defines the context-vector index.
    pub sessions: Vec<Session>,
    pub samples: Vec<BiometricSample>,
    pub sightings: Vec<Sighting>,
    /// Ground-truth device owners, one entry per victim.
    pub registry: Option<BTreeMap<MacAddress, String>>,
}

impl Dataset {
    /// Validate cross-references and build the dataset.
    pub fn new(
        sessions: Vec<Session>,
        samples: Vec<BiometricSample>,
        sightings: Vec<Sighting>,
        registry: Option<BTreeMap<MacAddress, String>>,
    ) -> Result<Self> {
        let ds = Dataset {
            sessions,
            samples,
            sightings,
            registry,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let index = self.session_index();
        if index.len() != self.sessions.len() {
            return Err(Error::Contract("duplicate session ids".into()));
        }
        for w in self.sessions.windows(2) {
            if w[0].start_ms > w[1].start_ms {
                return Err(Error::Contract("sessions not ordered by start".into()));
            }
        }
        let dim = self.samples.first().map(|s| s.embedding.len());
        for s in &self.samples {
            if !index.contains_key(s.session_id.as_str()) {
                return Err(Error::Contract(format!(
                    "sample {} references unknown session {}",
                    s.sample_id, s.session_id
                )));
            }
            if Some(s.embedding.len()) != dim {
                return Err(Error::Contract(format!(
                    "sample {} has dimension {} (expected {})",
                    s.sample_id,
                    s.embedding.len(),
                    dim.unwrap_or(0)
                )));
            }
        }
        Ok(())
    }

    /// Map from session id to its context-vector position.
    pub fn session_index(&self) -> BTreeMap<&str, usize> {
        session_index(&self.sessions)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }
}

pub fn session_index(sessions: &[Session]) -> BTreeMap<&str, usize> {
    sessions
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect()
}
