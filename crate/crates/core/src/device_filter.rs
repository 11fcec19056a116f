//! Reduction of sniffed MAC addresses to candidate victim devices.
//!
//! Three stages run in order: locally-administered (randomized) addresses,
//! infrastructure vendors, and an RSS geo-fence. The report carries both the
//! stage-by-stage removals and Table-style counts where each predicate is
//! evaluated independently over the whole distinct input set.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{sessionize, OuiDatabase, SessionizedSightings};
use crate::model::{ContextVector, Dataset, MacAddress, RSS_MAX, RSS_MIN};

/// Geo-fence suited to camera deployments.
pub const FACE_RSS_THRESHOLD: i32 = -55;
/// Geo-fence suited to microphone deployments.
pub const VOICE_RSS_THRESHOLD: i32 = -45;

/// Access-point and switch brands removed by the vendor stage.
pub const DEFAULT_VENDOR_BLACKLIST: [&str; 7] = [
    "tp-link", "cisco", "3com", "juniper", "linksys", "d-link", "netgear",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub rss_threshold: i32,
    pub vendor_blacklist: Vec<String>,
    pub drop_randomized: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            rss_threshold: FACE_RSS_THRESHOLD,
            vendor_blacklist: DEFAULT_VENDOR_BLACKLIST.iter().map(|s| s.to_string()).collect(),
            drop_randomized: true,
        }
    }
}

impl FilterConfig {
    pub fn with_threshold(rss_threshold: i32) -> Self {
        FilterConfig {
            rss_threshold,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(RSS_MIN..=RSS_MAX).contains(&self.rss_threshold) {
            return Err(Error::Config(format!(
                "rss threshold {} outside [{RSS_MIN}, {RSS_MAX}]",
                self.rss_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub randomized: usize,
    pub vendor: usize,
    pub rss: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_distinct: usize,
    /// Removed by each stage of the randomized → vendor → rss pipeline.
    pub removed_randomized: usize,
    pub removed_vendor: usize,
    pub removed_rss: usize,
    /// Each predicate applied to the full distinct input set; a MAC may be
    /// counted in several categories.
    pub independent: StageCounts,
    /// The filtered device set, in canonical MAC order.
    pub survivors: Vec<MacAddress>,
}

pub type Split = (BTreeSet<MacAddress>, BTreeSet<MacAddress>);

fn split(macs: &BTreeSet<MacAddress>, mut remove: impl FnMut(&MacAddress) -> bool) -> Split {
    let (removed, kept): (BTreeSet<_>, BTreeSet<_>) = macs.iter().partition(|m| remove(m));
    (kept, removed)
}

/// Returns `(kept, removed)`; removed are the locally-administered addresses.
pub fn filter_randomized(macs: &BTreeSet<MacAddress>) -> Split {
    split(macs, MacAddress::is_locally_administered)
}

fn vendor_blacklisted(mac: &MacAddress, oui_db: &OuiDatabase, blacklist: &[String]) -> bool {
    let Some(vendor) = oui_db.vendor(mac.oui()) else {
        return false;
    };
    let vendor = vendor.to_lowercase();
    blacklist
        .iter()
        .any(|b| !b.is_empty() && vendor.contains(&b.to_lowercase()))
}

/// Removes MACs whose vendor name contains a blacklisted substring
/// (case-insensitive). Unknown OUIs are kept.
pub fn filter_vendors(macs: &BTreeSet<MacAddress>, oui_db: &OuiDatabase, blacklist: &[String]) -> Split {
    split(macs, |m| vendor_blacklisted(m, oui_db, blacklist))
}

fn inside_fence(mac: &MacAddress, sessionized: &SessionizedSightings, threshold: i32) -> bool {
    sessionized
        .per_session
        .iter()
        .any(|s| s.get(mac).is_some_and(|&rss| rss >= threshold))
}

/// Keeps a MAC iff its strongest RSS in at least one session reaches
/// `threshold`. Operates over every MAC present in `sessionized`.
pub fn filter_rss(sessionized: &SessionizedSightings, threshold: i32) -> Split {
    filter_rss_among(&sessionized.macs(), sessionized, threshold)
}

/// [`filter_rss`] restricted to `macs`; MACs never seen inside a session are removed.
pub fn filter_rss_among(macs: &BTreeSet<MacAddress>, sessionized: &SessionizedSightings, threshold: i32) -> Split {
    split(macs, |m| !inside_fence(m, sessionized, threshold))
}

/// Run the three stages over the distinct MACs of `dataset`.
pub fn run_filter(dataset: &Dataset, oui_db: &OuiDatabase, config: &FilterConfig) -> Result<FilterReport> {
    config.validate()?;
    let sessionized = sessionize(&dataset.sightings, &dataset.sessions);
    Ok(run_filter_sessionized(
        &dataset.sightings.iter().map(|s| s.mac).collect(),
        &sessionized,
        oui_db,
        config,
    ))
}

pub fn run_filter_sessionized(
    input: &BTreeSet<MacAddress>,
    sessionized: &SessionizedSightings,
    oui_db: &OuiDatabase,
    config: &FilterConfig,
) -> FilterReport {
    let independent = StageCounts {
        randomized: filter_randomized(input).1.len(),
        vendor: filter_vendors(input, oui_db, &config.vendor_blacklist).1.len(),
        rss: filter_rss_among(input, sessionized, config.rss_threshold).1.len(),
    };

    let (after_random, removed_random) = if config.drop_randomized {
        filter_randomized(input)
    } else {
        (input.clone(), BTreeSet::new())
    };
    let (after_vendor, removed_vendor) =
        filter_vendors(&after_random, oui_db, &config.vendor_blacklist);
    let (survivors, removed_rss) = filter_rss_among(&after_vendor, sessionized, config.rss_threshold);

    FilterReport {
        input_distinct: input.len(),
        removed_randomized: removed_random.len(),
        removed_vendor: removed_vendor.len(),
        removed_rss: removed_rss.len(),
        independent,
        survivors: survivors.into_iter().collect(),
    }
}

/// Bit `j` of a device's vector is set iff its strongest RSS in session `j`
/// reaches `threshold`. Devices never seen get an all-zero vector.
pub fn device_context_vectors(
    survivors: &[MacAddress],
    sessionized: &SessionizedSightings,
    threshold: i32,
) -> BTreeMap<MacAddress, ContextVector> {
    let g = sessionized.session_count();
    survivors
        .iter()
        .map(|mac| {
            let mut v = ContextVector::zeros(g);
            for (j, s) in sessionized.per_session.iter().enumerate() {
                if s.get(mac).is_some_and(|&rss| rss >= threshold) {
                    v.set(j);
                }
            }
            (*mac, v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_mac, Session, Sighting};
    use proptest::prelude::*;

    fn mac(s: &str) -> MacAddress {
        parse_mac(s).unwrap()
    }

    fn set(macs: &[&str]) -> BTreeSet<MacAddress> {
        macs.iter().map(|m| mac(m)).collect()
    }

    fn sessions(n: usize) -> Vec<Session> {
        (0..n)
            .map(|i| Session {
                id: format!("s{i}"),
                start_ms: i as i64 * 1000,
                end_ms: i as i64 * 1000 + 500,
                location: "lab".into(),
            })
            .collect()
    }

    fn seen(m: &str, session: usize, rss: i32) -> Sighting {
        Sighting {
            mac: mac(m),
            timestamp_ms: session as i64 * 1000 + 10,
            rss_dbm: rss,
        }
    }

    fn cisco_db() -> OuiDatabase {
        OuiDatabase::from_entries([
            ([0x00, 0x00, 0x0c], "Cisco Systems".to_string()),
            ([0x00, 0x03, 0x93], "Apple Inc".to_string()),
        ])
        .unwrap()
    }

    #[test]
    fn randomized_stage() {
        let (kept, removed) = filter_randomized(&set(&["02:aa:00:00:00:01", "00:bb:00:00:00:01"]));
        assert_eq!(removed, set(&["02:aa:00:00:00:01"]));
        assert_eq!(kept, set(&["00:bb:00:00:00:01"]));
        let (_, removed) = filter_randomized(&set(&["00:bb:00:00:00:01", "04:00:00:00:00:00"]));
        assert!(removed.is_empty());
    }

    #[test]
    fn vendor_stage() {
        let db = cisco_db();
        let bl = vec!["cisco".to_string()];
        let (kept, removed) = filter_vendors(
            &set(&["00:00:0c:11:22:33", "00:03:93:00:00:01", "00:99:99:00:00:01"]),
            &db,
            &bl,
        );
        assert_eq!(removed, set(&["00:00:0c:11:22:33"]));
        assert_eq!(kept.len(), 2, "unknown OUIs are kept");
        assert_eq!(
            FilterConfig::default().vendor_blacklist,
            ["tp-link", "cisco", "3com", "juniper", "linksys", "d-link", "netgear"]
        );
        // Case-insensitive on both sides.
        let (_, removed) = filter_vendors(&set(&["00:00:0c:11:22:33"]), &db, &["CISCO".to_string()]);
        assert_eq!(removed.len(), 1);
    }

    #[test]
    fn rss_stage() {
        let ss = sessionize(
            &[seen("00:00:00:00:00:01", 0, -70), seen("00:00:00:00:00:01", 1, -50), seen("00:00:00:00:00:02", 0, -80)],
            &sessions(2),
        );
        let (kept, removed) = filter_rss(&ss, -55);
        assert_eq!(kept, set(&["00:00:00:00:00:01"]));
        assert_eq!(removed, set(&["00:00:00:00:00:02"]));
        let (k40, _) = filter_rss(&ss, -40);
        let (k60, _) = filter_rss(&ss, -60);
        assert!(k40.is_subset(&k60));
    }

    #[test]
    fn crafted_six_mac_corpus() {
        let s = sessions(2);
        let sightings = vec![
            seen("02:00:00:00:00:01", 0, -40), // randomized
            seen("00:00:0c:00:00:01", 0, -40), // cisco
            seen("00:10:00:00:00:01", 0, -90), // distant
            seen("00:10:00:00:00:01", 1, -80),
            seen("00:10:00:00:00:02", 0, -40),
            seen("00:10:00:00:00:03", 1, -50),
            seen("00:03:93:00:00:04", 0, -30),
        ];
        let ds = Dataset::new(s, vec![], sightings, None).unwrap();
        let report = run_filter(&ds, &cisco_db(), &FilterConfig::default()).unwrap();
        assert_eq!(report.input_distinct, 6);
        assert_eq!(
            report.survivors,
            vec![mac("00:03:93:00:00:04"), mac("00:10:00:00:00:02"), mac("00:10:00:00:00:03")]
        );
        assert_eq!((report.removed_randomized, report.removed_vendor, report.removed_rss), (1, 1, 1));
        assert_eq!(report.independent, StageCounts { randomized: 1, vendor: 1, rss: 1 });
    }

    #[test]
    fn empty_input_and_randomized_passthrough() {
        let ds = Dataset::new(sessions(1), vec![], vec![], None).unwrap();
        let r = run_filter(&ds, &OuiDatabase::default(), &FilterConfig::default()).unwrap();
        assert!(r.survivors.is_empty());
        assert_eq!(r.input_distinct + r.removed_randomized + r.removed_vendor + r.removed_rss, 0);

        let ds = Dataset::new(sessions(1), vec![], vec![seen("02:00:00:00:00:01", 0, -30)], None).unwrap();
        let cfg = FilterConfig {
            drop_randomized: false,
            ..Default::default()
        };
        let r = run_filter(&ds, &OuiDatabase::default(), &cfg).unwrap();
        assert_eq!(r.survivors, vec![mac("02:00:00:00:00:01")]);
        assert_eq!(r.independent.randomized, 1);
        assert_eq!(r.removed_randomized, 0);
    }

    #[test]
    fn rejects_out_of_range_threshold() {
        let ds = Dataset::new(sessions(1), vec![], vec![], None).unwrap();
        assert!(run_filter(&ds, &OuiDatabase::default(), &FilterConfig::with_threshold(5)).is_err());
    }

    #[test]
    fn context_vectors() {
        let ss = sessionize(
            &[seen("00:00:00:00:00:01", 0, -40), seen("00:00:00:00:00:01", 2, -50), seen("00:00:00:00:00:01", 3, -70)],
            &sessions(4),
        );
        let v = device_context_vectors(&[mac("00:00:00:00:00:01"), mac("00:00:00:00:00:09")], &ss, -55);
        assert_eq!(v[&mac("00:00:00:00:00:01")].to_bit_string(), "1010");
        assert_eq!(v[&mac("00:00:00:00:00:09")].to_bit_string(), "0000");
        let lower = device_context_vectors(&[mac("00:00:00:00:00:01")], &ss, -75);
        assert_eq!(lower[&mac("00:00:00:00:00:01")].to_bit_string(), "1011");
    }

    proptest! {
        #[test]
        fn report_partitions_input(
            raw in proptest::collection::vec((0u8..4, 0u8..12, 0usize..3, -100i32..-20), 0..60),
            threshold in -100i32..-20,
        ) {
            let sightings: Vec<Sighting> = raw
                .iter()
                .map(|&(a, b, s, r)| Sighting {
                    mac: MacAddress::new([a, 0, 0x0c * (b % 2), 0, 0, b]),
                    timestamp_ms: s as i64 * 1000 + 1,
                    rss_dbm: r,
                })
                .collect();
            let ds = Dataset::new(sessions(3), vec![], sightings, None).unwrap();
            let r = run_filter(&ds, &cisco_db(), &FilterConfig::with_threshold(threshold)).unwrap();
            prop_assert_eq!(
                r.survivors.len() + r.removed_randomized + r.removed_vendor + r.removed_rss,
                r.input_distinct
            );
            let again = run_filter(&ds, &cisco_db(), &FilterConfig::with_threshold(threshold)).unwrap();
            prop_assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
            for m in &r.survivors {
                prop_assert!(!m.is_locally_administered());
            }
        }
    }
}
