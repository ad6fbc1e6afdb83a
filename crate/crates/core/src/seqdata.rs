//! Event-sequence data model: ingestion, distance accumulation, time
//! normalization, delta computation and the per-sequence 80/20 split.
//!
//! A region is a set of per-user check-in sequences. Times are min-max
//! normalized with bounds taken from the training prefixes only, so test
//! events may map above 1. Inter-event deltas are precomputed once at
//! construction and are the quantities the flow heads model.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clusters::ClusterModel;
use crate::error::{Error, Result};

/// Additive tie-break for equal normalized timestamps.
pub const EPS_T: f64 = 1e-9;
/// Floor for inter-event travel distances (log-normal support is (0, ∞)).
pub const EPS_D: f64 = 1e-6;
/// Mean Earth radius used by [`haversine`].
pub const EARTH_RADIUS_KM: f64 = 6371.0;

const DATASET_VERSION: u32 = 1;

/// One raw check-in record as read from an input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCheckin {
    pub user_id: String,
    pub category_id: usize,
    /// Seconds since epoch (any finite, non-negative real scale works).
    pub timestamp: f64,
    pub latitude: f64,
    pub longitude: f64,
}

impl RawCheckin {
    /// Range checks for the stated field invariants.
    pub fn check_ranges(&self, spatial: bool) -> std::result::Result<(), &'static str> {
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return Err("timestamp not finite and non-negative");
        }
        if spatial {
            if !self.latitude.is_finite() || !(-90.0..=90.0).contains(&self.latitude) {
                return Err("latitude out of [-90, 90]");
            }
            if !self.longitude.is_finite() || !(-180.0..=180.0).contains(&self.longitude) {
                return Err("longitude out of [-180, 180]");
            }
        }
        Ok(())
    }
}

/// One processed check-in: category, normalized time, cumulative travel km.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub category: usize,
    /// Normalized time; training events lie in [0, 1], test events may exceed 1.
    pub time: f64,
    /// Kilometers traveled since the first event of the sequence.
    pub cum_distance: f64,
}

/// One user's ordered events plus precomputed deltas and split point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub user_id: String,
    pub events: Vec<Event>,
    /// `delta_t[0]` is the first event's time (floored to [`EPS_T`]);
    /// `delta_t[k] = time[k] - time[k-1]` for k ≥ 1. Always positive.
    pub delta_t: Vec<f64>,
    /// `delta_d[0] = EPS_D`; `delta_d[k] = max(cum[k] - cum[k-1], EPS_D)`.
    pub delta_d: Vec<f64>,
    /// Index of the first test event: `ceil(0.8 · |events|)`.
    pub split_index: usize,
    /// Cluster id in `[0, M)` once assigned.
    pub cluster: Option<usize>,
}

impl Sequence {
    /// Build a sequence from already-normalized events, computing deltas and
    /// the 80/20 split point. Times must be strictly increasing and cumulative
    /// distances non-decreasing.
    pub fn from_events(user_id: impl Into<String>, events: Vec<Event>) -> Result<Self> {
        let user_id = user_id.into();
        for w in events.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::InvalidSequence {
                    user_id,
                    reason: "event times not strictly increasing",
                });
            }
            if w[1].cum_distance < w[0].cum_distance {
                return Err(Error::InvalidSequence {
                    user_id,
                    reason: "cumulative distance decreases",
                });
            }
        }
        let n = events.len();
        let mut delta_t = Vec::with_capacity(n);
        let mut delta_d = Vec::with_capacity(n);
        for (k, e) in events.iter().enumerate() {
            if k == 0 {
                delta_t.push(e.time.max(EPS_T));
                delta_d.push(EPS_D);
            } else {
                delta_t.push(e.time - events[k - 1].time);
                delta_d.push((e.cum_distance - events[k - 1].cum_distance).max(EPS_D));
            }
        }
        Ok(Sequence {
            user_id,
            events,
            delta_t,
            delta_d,
            split_index: split_point(n),
            cluster: None,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of one-step-ahead predictions the sequence supports.
    pub fn num_steps(&self) -> usize {
        self.events.len().saturating_sub(1)
    }

    /// Training-prefix and test-suffix views.
    pub fn split_train_test(&self) -> (&[Event], &[Event]) {
        self.events.split_at(self.split_index.min(self.events.len()))
    }
}

/// `ceil(0.8 n)` without going through floats.
pub fn split_point(n: usize) -> usize {
    (4 * n + 4) / 5
}

/// All sequences of one region plus vocabulary and normalization metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDataset {
    pub sequences: Vec<Sequence>,
    pub num_categories: usize,
    /// Raw-time normalization bounds, computed over training prefixes only.
    pub t_min: f64,
    pub t_max: f64,
    /// Median-time cluster model, once fitted.
    pub clusters: Option<ClusterModel>,
    /// False for datasets without a spatial component (product records).
    pub spatial_mode: bool,
}

impl RegionDataset {
    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(self.t_min < self.t_max) {
            return Err(Error::DegenerateTimeRange(self.t_min));
        }
        if let Some(model) = &self.clusters {
            model.validate()?;
        }
        for seq in &self.sequences {
            if seq.events.len() != seq.delta_t.len() || seq.events.len() != seq.delta_d.len() {
                return Err(Error::ShapeMismatch {
                    what: format!("deltas of sequence '{}'", seq.user_id),
                    expected: seq.events.len(),
                    got: seq.delta_t.len(),
                });
            }
            if seq.split_index != split_point(seq.events.len()) {
                return Err(Error::InvalidConfig(format!(
                    "sequence '{}' has inconsistent split index",
                    seq.user_id
                )));
            }
            for (k, e) in seq.events.iter().enumerate() {
                if e.category >= self.num_categories {
                    return Err(Error::CategoryOutOfRange {
                        category: e.category,
                        num_categories: self.num_categories,
                    });
                }
                if !e.time.is_finite() || !e.cum_distance.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("event of sequence '{}'", seq.user_id),
                        step: Some(k),
                    });
                }
                if k > 0 && !(e.time > seq.events[k - 1].time) {
                    return Err(Error::InvalidSequence {
                        user_id: seq.user_id.clone(),
                        reason: "event times not strictly increasing",
                    });
                }
            }
        }
        Ok(())
    }

    /// Write the dataset as a versioned self-describing JSON file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct FileOut<'a> {
            version: u32,
            dataset: &'a RegionDataset,
        }
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            w,
            &FileOut {
                version: DATASET_VERSION,
                dataset: self,
            },
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct FileIn {
            version: u32,
            dataset: RegionDataset,
        }
        let r = BufReader::new(File::open(path)?);
        let file: FileIn = serde_json::from_reader(r)?;
        if file.version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_VERSION,
                got: file.version,
            });
        }
        file.dataset.validate()?;
        Ok(file.dataset)
    }
}

/// Great-circle distance in kilometers between two (lat, lon) points in degrees.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lat1 = a.0.to_radians();
    let lat2 = b.0.to_radians();
    let dlat = (b.0 - a.0).to_radians();
    let dlon = (b.1 - a.1).to_radians();
    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * s.sqrt().min(1.0).asin()
}

/// Affine map of raw times onto [0, 1] using the given bounds.
///
/// Values outside the bounds extrapolate linearly (test events beyond `t_max`
/// map above 1 and are kept as-is).
pub fn normalize_times(raw_times: &[f64], t_min: f64, t_max: f64) -> Result<Vec<f64>> {
    if !(t_min < t_max) {
        return Err(Error::DegenerateTimeRange(t_min));
    }
    let range = t_max - t_min;
    Ok(raw_times.iter().map(|&t| (t - t_min) / range).collect())
}

/// One user's raw track before normalization: (category, raw time, cumulative km).
#[derive(Debug, Clone)]
pub struct UserTrack {
    pub user_id: String,
    pub points: Vec<(usize, f64, f64)>,
}

/// Assemble a region dataset from per-user raw tracks.
///
/// Tracks must already be sorted by raw time within each user. Computes the
/// per-user split point, derives normalization bounds from training prefixes,
/// normalizes, breaks timestamp ties by [`EPS_T`] and builds deltas. Sequences
/// shorter than `min_len` are dropped; the number dropped is returned.
pub fn build_dataset(
    mut tracks: Vec<UserTrack>,
    spatial: bool,
    min_len: usize,
) -> Result<(RegionDataset, usize)> {
    let before = tracks.len();
    tracks.retain(|t| t.points.len() >= min_len.max(2));
    let dropped = before - tracks.len();
    if tracks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    tracks.sort_by(|a, b| a.user_id.cmp(&b.user_id));

    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    let mut num_categories = 0;
    for track in &tracks {
        let split = split_point(track.points.len());
        for (k, &(cat, t, _)) in track.points.iter().enumerate() {
            num_categories = num_categories.max(cat + 1);
            if k < split {
                t_min = t_min.min(t);
                t_max = t_max.max(t);
            }
        }
    }
    if !(t_min < t_max) {
        return Err(Error::DegenerateTimeRange(t_min));
    }

    let mut sequences = Vec::with_capacity(tracks.len());
    for track in tracks {
        let raw: Vec<f64> = track.points.iter().map(|p| p.1).collect();
        let mut times = normalize_times(&raw, t_min, t_max)?;
        for k in 1..times.len() {
            if times[k] <= times[k - 1] {
                times[k] = times[k - 1] + EPS_T;
            }
        }
        let events: Vec<Event> = track
            .points
            .iter()
            .zip(&times)
            .map(|(&(category, _, cum), &time)| Event {
                category,
                time,
                cum_distance: if spatial { cum } else { 0.0 },
            })
            .collect();
        sequences.push(Sequence::from_events(track.user_id, events)?);
    }

    let dataset = RegionDataset {
        sequences,
        num_categories,
        t_min,
        t_max,
        clusters: None,
        spatial_mode: spatial,
    };
    dataset.validate()?;
    Ok((dataset, dropped))
}

/// Column layout of a raw check-in file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMap {
    pub user: usize,
    pub category: usize,
    pub time: usize,
    pub lat: usize,
    pub lon: usize,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            user: 0,
            category: 1,
            time: 2,
            lat: 3,
            lon: 4,
        }
    }
}

/// Ingestion settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestConfig {
    pub delimiter: u8,
    pub has_header: bool,
    pub columns: ColumnMap,
    /// Sequences shorter than this are dropped (minimum 2).
    pub min_sequence_len: usize,
    /// When false, coordinates are ignored and all distances collapse to the floor.
    pub spatial: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            delimiter: b',',
            has_header: false,
            columns: ColumnMap::default(),
            min_sequence_len: 2,
            spatial: true,
        }
    }
}

/// Counters describing one ingestion run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub records_total: usize,
    pub records_accepted: usize,
    pub records_rejected: usize,
    pub sequences_dropped_short: usize,
    pub sequences: usize,
    pub num_categories: usize,
}

/// Ingest typed records into a region dataset.
///
/// Records failing range checks are rejected and counted; if every record is
/// rejected the whole ingestion fails.
pub fn ingest(
    records: impl IntoIterator<Item = RawCheckin>,
    config: &IngestConfig,
) -> Result<(RegionDataset, IngestReport)> {
    let mut report = IngestReport::default();
    let mut by_user: BTreeMap<String, Vec<RawCheckin>> = BTreeMap::new();
    for rec in records {
        report.records_total += 1;
        if rec.check_ranges(config.spatial).is_err() {
            report.records_rejected += 1;
            continue;
        }
        report.records_accepted += 1;
        by_user.entry(rec.user_id.clone()).or_default().push(rec);
    }
    if report.records_accepted == 0 {
        return Err(Error::NoUsableRecords {
            rejected: report.records_rejected,
            total: report.records_total,
        });
    }

    let mut tracks = Vec::with_capacity(by_user.len());
    for (user_id, mut recs) in by_user {
        recs.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).expect("finite timestamps"));
        let mut points = Vec::with_capacity(recs.len());
        let mut cum = 0.0;
        for (k, r) in recs.iter().enumerate() {
            if config.spatial && k > 0 {
                cum += haversine(
                    (recs[k - 1].latitude, recs[k - 1].longitude),
                    (r.latitude, r.longitude),
                );
            }
            points.push((r.category_id, r.timestamp, cum));
        }
        tracks.push(UserTrack { user_id, points });
    }

    let (dataset, dropped) = build_dataset(tracks, config.spatial, config.min_sequence_len)?;
    report.sequences_dropped_short = dropped;
    report.sequences = dataset.sequences.len();
    report.num_categories = dataset.num_categories;
    Ok((dataset, report))
}

/// Ingest a delimiter-separated text file, one check-in per line.
///
/// Unparseable lines are rejected and counted like out-of-range records.
pub fn ingest_csv(path: impl AsRef<Path>, config: &IngestConfig) -> Result<(RegionDataset, IngestReport)> {
    let file = File::open(path)?;
    ingest_reader(file, config)
}

/// Same as [`ingest_csv`] but over any reader, for tests and pipes.
pub fn ingest_reader(reader: impl Read, config: &IngestConfig) -> Result<(RegionDataset, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(config.delimiter)
        .has_headers(config.has_header)
        .flexible(true)
        .from_reader(reader);
    let cols = &config.columns;
    let mut malformed = 0usize;
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                malformed += 1;
                continue;
            }
        };
        let parsed = parse_row(&row, cols, config.spatial);
        match parsed {
            Some(rec) => records.push(rec),
            None => malformed += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::NoUsableRecords {
            rejected: malformed,
            total: malformed,
        });
    }
    let (dataset, mut report) = ingest(records, config)?;
    report.records_total += malformed;
    report.records_rejected += malformed;
    Ok((dataset, report))
}

fn parse_row(row: &csv::StringRecord, cols: &ColumnMap, spatial: bool) -> Option<RawCheckin> {
    let field = |i: usize| row.get(i).map(str::trim);
    let user_id = field(cols.user)?.to_string();
    if user_id.is_empty() {
        return None;
    }
    let category_id: usize = field(cols.category)?.parse().ok()?;
    let timestamp: f64 = field(cols.time)?.parse().ok()?;
    let (latitude, longitude) = if spatial {
        (
            field(cols.lat)?.parse().ok()?,
            field(cols.lon)?.parse().ok()?,
        )
    } else {
        (0.0, 0.0)
    };
    Some(RawCheckin {
        user_id,
        category_id,
        timestamp,
        latitude,
        longitude,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn checkin(user: &str, cat: usize, ts: f64, lat: f64, lon: f64) -> RawCheckin {
        RawCheckin {
            user_id: user.into(),
            category_id: cat,
            timestamp: ts,
            latitude: lat,
            longitude: lon,
        }
    }

    #[test]
    fn haversine_identical_points_is_zero() {
        assert_eq!(haversine((48.85, 2.35), (48.85, 2.35)), 0.0);
    }

    #[test]
    fn haversine_one_degree_on_equator() {
        // R · 1° in radians = 6371 · π / 180
        let expected = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        assert_relative_eq!(haversine((0.0, 0.0), (0.0, 1.0)), expected, epsilon = 1e-9);
        assert_relative_eq!(haversine((0.0, 0.0), (0.0, 1.0)), 111.195, epsilon = 1e-3);
    }

    #[test]
    fn haversine_half_circumference() {
        let expected = EARTH_RADIUS_KM * std::f64::consts::PI;
        assert_relative_eq!(haversine((0.0, 0.0), (0.0, 180.0)), expected, epsilon = 1e-6);
    }

    #[test]
    fn normalize_times_linear_map() {
        assert_eq!(
            normalize_times(&[10.0, 20.0, 30.0], 10.0, 30.0).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(normalize_times(&[15.0], 10.0, 30.0).unwrap(), vec![0.25]);
        // Extrapolation above the training maximum is kept as-is.
        assert_eq!(normalize_times(&[35.0], 10.0, 30.0).unwrap(), vec![1.25]);
    }

    #[test]
    fn normalize_times_rejects_degenerate_bounds() {
        assert!(matches!(
            normalize_times(&[1.0], 5.0, 5.0),
            Err(Error::DegenerateTimeRange(_))
        ));
    }

    #[test]
    fn split_points_match_ceil() {
        assert_eq!(split_point(10), 8);
        assert_eq!(split_point(57), 46);
        assert_eq!(split_point(2), 2);
        assert_eq!(split_point(5), 4);
    }

    #[test]
    fn split_views() {
        let events: Vec<Event> = (0..10)
            .map(|k| Event {
                category: 0,
                time: 0.1 * (k + 1) as f64,
                cum_distance: k as f64,
            })
            .collect();
        let seq = Sequence::from_events("u", events).unwrap();
        let (train, test) = seq.split_train_test();
        assert_eq!((train.len(), test.len()), (8, 2));

        let two = Sequence::from_events(
            "v",
            vec![
                Event {
                    category: 0,
                    time: 0.1,
                    cum_distance: 0.0,
                },
                Event {
                    category: 0,
                    time: 0.2,
                    cum_distance: 0.0,
                },
            ],
        )
        .unwrap();
        let (train, test) = two.split_train_test();
        assert_eq!((train.len(), test.len()), (2, 0));
        assert_eq!(two.num_steps(), 1);
    }

    #[test]
    fn ingest_stationary_user_floors_distances() {
        let recs = vec![
            checkin("u1", 0, 100.0, 10.0, 20.0),
            checkin("u1", 1, 200.0, 10.0, 20.0),
            checkin("u2", 0, 50.0, 0.0, 0.0),
            checkin("u2", 1, 400.0, 0.0, 0.0),
        ];
        let (ds, report) = ingest(recs, &IngestConfig::default()).unwrap();
        assert_eq!(report.records_accepted, 4);
        assert_eq!(ds.sequences.len(), 2);
        let u1 = &ds.sequences[0];
        assert_eq!(u1.user_id, "u1");
        assert_eq!(u1.events[0].cum_distance, 0.0);
        assert_eq!(u1.events[1].cum_distance, 0.0);
        assert_eq!(u1.delta_d, vec![EPS_D, EPS_D]);
    }

    #[test]
    fn ingest_accumulates_haversine() {
        let recs = vec![
            checkin("u", 0, 0.0, 0.0, 0.0),
            checkin("u", 1, 10.0, 0.0, 1.0),
            checkin("x", 0, 0.0, 0.0, 0.0),
            checkin("x", 0, 20.0, 0.0, 0.0),
        ];
        let (ds, _) = ingest(recs, &IngestConfig::default()).unwrap();
        let u = &ds.sequences[0];
        assert_relative_eq!(u.events[1].cum_distance, 111.19492664455873, epsilon = 1e-9);
        assert_relative_eq!(u.delta_d[1], 111.19492664455873, epsilon = 1e-9);
    }

    #[test]
    fn ingest_rejects_bad_records_and_counts() {
        let recs = vec![
            checkin("u", 0, 0.0, 0.0, 0.0),
            checkin("u", 1, 10.0, 95.0, 0.0), // latitude out of range
            checkin("u", 1, 20.0, 0.0, 0.0),
            checkin("u", 2, f64::NAN, 0.0, 0.0), // bad timestamp
            checkin("v", 0, 1.0, 0.0, 0.0),
            checkin("v", 1, 2.0, 0.0, 0.0),
        ];
        let (ds, report) = ingest(recs, &IngestConfig::default()).unwrap();
        assert_eq!(report.records_rejected, 2);
        assert_eq!(report.records_accepted, 4);
        assert_eq!(ds.sequences.len(), 2);
        assert_eq!(ds.num_categories, 2);
    }

    #[test]
    fn ingest_all_rejected_is_hard_error() {
        let recs = vec![checkin("u", 0, -5.0, 0.0, 0.0)];
        assert!(matches!(
            ingest(recs, &IngestConfig::default()),
            Err(Error::NoUsableRecords { .. })
        ));
    }

    #[test]
    fn ingest_breaks_timestamp_ties() {
        let recs = vec![
            checkin("u", 0, 100.0, 0.0, 0.0),
            checkin("u", 1, 100.0, 0.0, 0.0),
            checkin("u", 2, 200.0, 0.0, 0.0),
            checkin("v", 0, 0.0, 0.0, 0.0),
            checkin("v", 1, 300.0, 0.0, 0.0),
        ];
        let (ds, _) = ingest(recs, &IngestConfig::default()).unwrap();
        let u = &ds.sequences[0];
        assert!(u.events[1].time > u.events[0].time);
        assert_relative_eq!(u.events[1].time - u.events[0].time, EPS_T, epsilon = 1e-12);
        assert!(u.delta_t.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn normalization_bounds_come_from_training_prefixes() {
        // u's last (test) event is the global raw maximum; bounds must ignore it.
        let recs = vec![
            checkin("u", 0, 0.0, 0.0, 0.0),
            checkin("u", 0, 10.0, 0.0, 0.0),
            checkin("u", 0, 20.0, 0.0, 0.0),
            checkin("u", 0, 30.0, 0.0, 0.0),
            checkin("u", 0, 99.0, 0.0, 0.0),
            checkin("v", 0, 5.0, 0.0, 0.0),
            checkin("v", 0, 40.0, 0.0, 0.0),
        ];
        let (ds, _) = ingest(recs, &IngestConfig::default()).unwrap();
        assert_eq!(ds.t_min, 0.0);
        assert_eq!(ds.t_max, 40.0);
        let u = &ds.sequences[0];
        assert!(u.events[4].time > 1.0);
    }

    #[test]
    fn delta_sum_telescopes_to_last_time() {
        let recs = vec![
            checkin("u", 0, 3.0, 0.0, 0.0),
            checkin("u", 0, 7.0, 0.0, 0.5),
            checkin("u", 0, 11.0, 0.0, 1.0),
            checkin("v", 0, 0.0, 0.0, 0.0),
            checkin("v", 0, 20.0, 0.0, 0.0),
        ];
        let (ds, _) = ingest(recs, &IngestConfig::default()).unwrap();
        for seq in &ds.sequences {
            let total: f64 = seq.delta_t.iter().sum();
            // The first delta is floored at EPS_T, so a sequence starting at
            // the exact region minimum telescopes up to that floor.
            assert_relative_eq!(total, seq.events.last().unwrap().time, epsilon = 2e-9);
        }
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let recs = vec![
            checkin("u", 0, 0.0, 1.25, 3.5),
            checkin("u", 1, 10.0, 1.5, 3.25),
            checkin("u", 2, 17.0, 2.0, 4.0),
            checkin("v", 0, 5.0, 0.0, 0.0),
            checkin("v", 1, 40.0, 0.5, 0.5),
        ];
        let (ds, _) = ingest(recs, &IngestConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        ds.save(&p1).unwrap();
        let loaded = RegionDataset::load(&p1).unwrap();
        assert_eq!(loaded, ds);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn csv_ingestion_with_header_and_custom_columns() {
        let data = "\
time;user;cat;lon;lat
0.0;u;0;0.0;0.0
10.0;u;1;1.0;0.0
20.0;u;0;1.0;0.0
5.0;v;2;0.0;0.0
25.0;v;2;0.0;0.0
bogus line
";
        let config = IngestConfig {
            delimiter: b';',
            has_header: true,
            columns: ColumnMap {
                user: 1,
                category: 2,
                time: 0,
                lat: 4,
                lon: 3,
            },
            ..IngestConfig::default()
        };
        let (ds, report) = ingest_reader(data.as_bytes(), &config).unwrap();
        assert_eq!(ds.sequences.len(), 2);
        assert_eq!(ds.num_categories, 3);
        assert_eq!(report.records_rejected, 1);
        assert_relative_eq!(
            ds.sequences[0].events[1].cum_distance,
            111.19492664455873,
            epsilon = 1e-9
        );
    }

    #[test]
    fn short_sequences_are_dropped() {
        let recs = vec![
            checkin("solo", 0, 1.0, 0.0, 0.0),
            checkin("u", 0, 0.0, 0.0, 0.0),
            checkin("u", 1, 10.0, 0.0, 0.0),
        ];
        let (ds, report) = ingest(recs, &IngestConfig::default()).unwrap();
        assert_eq!(ds.sequences.len(), 1);
        assert_eq!(report.sequences_dropped_short, 1);
    }
}
