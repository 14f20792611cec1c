//! Parsing, density filtering, and temporal splitting of raw check-in and
//! social-network files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A validated coordinate pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Option<GeoPoint> {
        if lat.is_finite() && lon.is_finite() && (-90.0..=90.0).contains(&lat)
            && (-180.0..=180.0).contains(&lon)
        {
            Some(GeoPoint { lat, lon })
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkin {
    pub user_id: String,
    pub poi_id: String,
    /// Seconds since the Unix epoch; never negative.
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Poi {
    pub poi_id: String,
    pub location: GeoPoint,
    pub category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RegionTag {
    Source,
    Target,
}

impl fmt::Display for RegionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionTag::Source => write!(f, "source"),
            RegionTag::Target => write!(f, "target"),
        }
    }
}

/// One region's mobility data: entities, time-stamped check-ins, and the
/// social network.
#[derive(Debug, Clone)]
pub struct RegionDataset {
    pub region_tag: RegionTag,
    pub users: BTreeSet<String>,
    pub pois: BTreeMap<String, Poi>,
    pub checkins: Vec<Checkin>,
    /// Unordered pairs stored with the lexicographically smaller id first.
    pub social_edges: BTreeSet<(String, String)>,
}

impl RegionDataset {
    pub fn new(region_tag: RegionTag) -> Self {
        RegionDataset {
            region_tag,
            users: BTreeSet::new(),
            pois: BTreeMap::new(),
            checkins: Vec::new(),
            social_edges: BTreeSet::new(),
        }
    }

    /// Assemble a dataset from parsed parts. Users are everyone who checked
    /// in or appears in a social edge; edges are normalized and deduplicated.
    pub fn assemble(
        region_tag: RegionTag,
        checkins: Vec<Checkin>,
        pois: Vec<Poi>,
        social: Vec<(String, String)>,
    ) -> Result<Self> {
        let mut ds = RegionDataset::new(region_tag);
        ds.pois = pois.into_iter().map(|p| (p.poi_id.clone(), p)).collect();
        for c in &checkins {
            if !ds.pois.contains_key(&c.poi_id) {
                return Err(Error::Data(format!(
                    "check-in references unknown POI {}",
                    c.poi_id
                )));
            }
            ds.users.insert(c.user_id.clone());
        }
        ds.checkins = checkins;
        for (a, b) in social {
            if a == b {
                continue;
            }
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            ds.users.insert(a.clone());
            ds.users.insert(b.clone());
            ds.social_edges.insert((a, b));
        }
        Ok(ds)
    }
}

/// Density thresholds applied by [`filter_region`].
#[derive(Debug, Clone, Copy)]
pub struct FilterThresholds {
    pub min_poi_checkins: u32,
    pub min_user_checkins: u32,
    pub min_user_connections: u32,
}

/// Column layout of the delimiter-separated input files.
#[derive(Debug, Clone)]
pub struct ColumnSchema {
    pub delimiter: char,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema { delimiter: '\t' }
    }
}

const CHECKIN_COLUMNS: [&str; 6] = ["user_id", "poi_id", "timestamp", "lat", "lon", "category"];

/// Outcome counters for a parse pass; malformed rows are skipped, not fatal,
/// unless they make up more than half the file.
#[derive(Debug, Default, Clone, Copy)]
pub struct ParseStats {
    pub rows: usize,
    pub malformed: usize,
}

fn read_to_string(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parse a check-in file. The header row is required and locates the six
/// mandatory columns (`user_id, poi_id, timestamp, lat, lon, category`) by
/// name; extra columns are ignored. Returns check-ins in file order plus the
/// table of POIs seen (first occurrence of each id wins).
pub fn parse_checkins(
    path: &Path,
    schema: &ColumnSchema,
) -> Result<(Vec<Checkin>, Vec<Poi>, ParseStats)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header = match lines.next() {
        Some(h) => h,
        None => return Ok((Vec::new(), Vec::new(), ParseStats::default())),
    };
    let names: Vec<&str> = header.split(schema.delimiter).map(str::trim).collect();
    let mut idx = [0usize; 6];
    for (slot, want) in idx.iter_mut().zip(CHECKIN_COLUMNS) {
        *slot = names.iter().position(|n| *n == want).ok_or_else(|| {
            Error::Format {
                path: path.to_path_buf(),
                reason: format!("missing column '{want}' in header"),
            }
        })?;
    }

    let mut stats = ParseStats::default();
    let mut checkins = Vec::new();
    let mut pois: Vec<Poi> = Vec::new();
    let mut seen_pois: BTreeSet<String> = BTreeSet::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        stats.rows += 1;
        match parse_checkin_row(line, schema.delimiter, &idx) {
            Some((checkin, poi)) => {
                if seen_pois.insert(poi.poi_id.clone()) {
                    pois.push(poi);
                }
                checkins.push(checkin);
            }
            None => {
                stats.malformed += 1;
                log::warn!("skipping malformed check-in row: {line:?}");
            }
        }
    }
    if stats.rows > 0 && stats.malformed * 2 > stats.rows {
        return Err(Error::Data(format!(
            "{} of {} rows malformed in {}",
            stats.malformed,
            stats.rows,
            path.display()
        )));
    }
    Ok((checkins, pois, stats))
}

fn parse_checkin_row(line: &str, delim: char, idx: &[usize; 6]) -> Option<(Checkin, Poi)> {
    let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
    let max = *idx.iter().max().unwrap();
    if fields.len() <= max {
        return None;
    }
    let user_id = fields[idx[0]];
    let poi_id = fields[idx[1]];
    if user_id.is_empty() || poi_id.is_empty() {
        return None;
    }
    let timestamp = parse_timestamp(fields[idx[2]])?;
    if timestamp < 0 {
        return None;
    }
    let lat: f64 = fields[idx[3]].parse().ok()?;
    let lon: f64 = fields[idx[4]].parse().ok()?;
    let location = GeoPoint::new(lat, lon)?;
    let category = fields[idx[5]];
    if category.is_empty() {
        return None;
    }
    Some((
        Checkin {
            user_id: user_id.to_string(),
            poi_id: poi_id.to_string(),
            timestamp,
        },
        Poi {
            poi_id: poi_id.to_string(),
            location,
            category: category.to_string(),
        },
    ))
}

/// Accepts integer epoch seconds or a basic ISO-8601 stamp
/// (`YYYY-MM-DD[THH:MM:SS[Z]]`).
fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let s = s.strip_suffix('Z').unwrap_or(s);
    let (date, time) = match s.split_once('T') {
        Some((d, t)) => (d, t),
        None => (s, "00:00:00"),
    };
    let mut dp = date.split('-');
    let year: i64 = dp.next()?.parse().ok()?;
    let month: u32 = dp.next()?.parse().ok()?;
    let day: u32 = dp.next()?.parse().ok()?;
    if dp.next().is_some() || !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return None;
    }
    let mut tp = time.split(':');
    let hour: i64 = tp.next()?.parse().ok()?;
    let min: i64 = tp.next()?.parse().ok()?;
    let sec: i64 = tp.next()?.parse().ok()?;
    if tp.next().is_some() || !(0..24).contains(&hour) || !(0..60).contains(&min)
        || !(0..60).contains(&sec)
    {
        return None;
    }
    Some(days_from_civil(year, month, day) * 86_400 + hour * 3_600 + min * 60 + sec)
}

/// Days since 1970-01-01 for a proleptic Gregorian date (Howard Hinnant's
/// civil-days algorithm).
fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = (m as i64 + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

/// Parse a social file: header row required, first two columns are user ids,
/// undirected, duplicates collapsed, self-loops dropped.
pub fn parse_social(
    path: &Path,
    schema: &ColumnSchema,
) -> Result<(Vec<(String, String)>, ParseStats)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().is_none() {
        return Ok((Vec::new(), ParseStats::default()));
    }
    let mut stats = ParseStats::default();
    let mut edges = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        stats.rows += 1;
        let mut fields = line.split(schema.delimiter).map(str::trim);
        match (fields.next(), fields.next()) {
            (Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => {
                if a != b {
                    edges.push((a.to_string(), b.to_string()));
                }
            }
            _ => {
                stats.malformed += 1;
                log::warn!("skipping malformed social row: {line:?}");
            }
        }
    }
    if stats.rows > 0 && stats.malformed * 2 > stats.rows {
        return Err(Error::Data(format!(
            "{} of {} rows malformed in {}",
            stats.malformed,
            stats.rows,
            path.display()
        )));
    }
    Ok((edges, stats))
}

/// Load and assemble one region from its check-in and social files.
pub fn load_region(
    tag: RegionTag,
    checkin_path: &Path,
    social_path: &Path,
    schema: &ColumnSchema,
) -> Result<RegionDataset> {
    let (checkins, pois, _) = parse_checkins(checkin_path, schema)?;
    let (social, _) = parse_social(social_path, schema)?;
    RegionDataset::assemble(tag, checkins, pois, social)
}

/// Single-pass density filter: POIs first (by raw check-in count), then users
/// by their remaining check-ins and social connections; finally all dangling
/// references are dropped. Deliberately not iterated to a fixpoint.
pub fn filter_region(raw: &RegionDataset, t: FilterThresholds) -> Result<RegionDataset> {
    let mut poi_counts: BTreeMap<&str, u32> = BTreeMap::new();
    for c in &raw.checkins {
        *poi_counts.entry(c.poi_id.as_str()).or_insert(0) += 1;
    }
    let kept_pois: BTreeSet<&str> = poi_counts
        .iter()
        .filter(|(_, &n)| n >= t.min_poi_checkins)
        .map(|(&id, _)| id)
        .collect();

    let mut user_counts: BTreeMap<&str, u32> = BTreeMap::new();
    for c in &raw.checkins {
        if kept_pois.contains(c.poi_id.as_str()) {
            *user_counts.entry(c.user_id.as_str()).or_insert(0) += 1;
        }
    }
    let mut degree: BTreeMap<&str, u32> = BTreeMap::new();
    for (a, b) in &raw.social_edges {
        *degree.entry(a.as_str()).or_insert(0) += 1;
        *degree.entry(b.as_str()).or_insert(0) += 1;
    }
    let kept_users: BTreeSet<&str> = raw
        .users
        .iter()
        .map(String::as_str)
        .filter(|u| {
            user_counts.get(u).copied().unwrap_or(0) >= t.min_user_checkins
                && degree.get(u).copied().unwrap_or(0) >= t.min_user_connections
        })
        .collect();

    let mut out = RegionDataset::new(raw.region_tag);
    out.users = kept_users.iter().map(|s| s.to_string()).collect();
    out.pois = raw
        .pois
        .iter()
        .filter(|(id, _)| kept_pois.contains(id.as_str()))
        .map(|(id, p)| (id.clone(), p.clone()))
        .collect();
    out.checkins = raw
        .checkins
        .iter()
        .filter(|c| kept_users.contains(c.user_id.as_str()) && kept_pois.contains(c.poi_id.as_str()))
        .cloned()
        .collect();
    out.social_edges = raw
        .social_edges
        .iter()
        .filter(|(a, b)| kept_users.contains(a.as_str()) && kept_users.contains(b.as_str()))
        .cloned()
        .collect();

    if out.users.is_empty() || out.pois.is_empty() {
        return Err(Error::Data(format!(
            "{} region too sparse after filtering ({} users, {} POIs)",
            raw.region_tag,
            out.users.len(),
            out.pois.len()
        )));
    }
    Ok(out)
}

/// The three temporal views of a filtered region. All views share the entity
/// sets; only the check-in lists differ.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: RegionDataset,
    pub validation: RegionDataset,
    pub test: RegionDataset,
}

/// Split check-ins at one global time cut per region: sort by
/// (timestamp, user_id, poi_id), then cut at floor(n·f1) and floor(n·(f1+f2)).
pub fn temporal_split(ds: &RegionDataset, fractions: (f64, f64, f64)) -> Result<SplitDataset> {
    let (f1, f2, f3) = fractions;
    if !((f1 + f2 + f3) - 1.0).abs().lt(&1e-9) || f1 <= 0.0 || f2 < 0.0 || f3 <= 0.0 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({f1}, {f2}, {f3})"
        )));
    }
    let n = ds.checkins.len();
    if n < 3 {
        return Err(Error::Data(format!(
            "need at least 3 check-ins to split, have {n}"
        )));
    }
    let mut sorted = ds.checkins.clone();
    sorted.sort_by(|a, b| {
        (a.timestamp, &a.user_id, &a.poi_id).cmp(&(b.timestamp, &b.user_id, &b.poi_id))
    });
    // The epsilon keeps sums like 0.7 + 0.1 from flooring a boundary early.
    let cut1 = (n as f64 * f1 + 1e-9).floor() as usize;
    let cut2 = (n as f64 * (f1 + f2) + 1e-9).floor() as usize;

    let view = |checkins: &[Checkin]| RegionDataset {
        region_tag: ds.region_tag,
        users: ds.users.clone(),
        pois: ds.pois.clone(),
        checkins: checkins.to_vec(),
        social_edges: ds.social_edges.clone(),
    };
    Ok(SplitDataset {
        train: view(&sorted[..cut1]),
        validation: view(&sorted[cut1..cut2]),
        test: view(&sorted[cut2..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const HEADER: &str = "user_id\tpoi_id\ttimestamp\tlat\tlon\tcategory\n";

    #[test]
    fn well_formed_rows_parse() {
        let f = write_tmp(&format!(
            "{HEADER}u1\tp1\t100\t40.0\t-74.0\tCafe\nu1\tp2\t200\t40.1\t-74.1\tBar\nu2\tp1\t300\t40.0\t-74.0\tCafe\n"
        ));
        let (cs, pois, stats) = parse_checkins(f.path(), &ColumnSchema::default()).unwrap();
        assert_eq!(cs.len(), 3);
        assert_eq!(pois.len(), 2);
        assert_eq!(stats.malformed, 0);
        assert_eq!(cs[0].user_id, "u1");
        assert_eq!(cs[2].timestamp, 300);
    }

    #[test]
    fn out_of_range_lat_is_skipped() {
        let f = write_tmp(&format!(
            "{HEADER}u1\tp1\t100\t95.0\t-74.0\tCafe\nu1\tp2\t200\t40.0\t-74.0\tBar\n"
        ));
        let (cs, _, stats) = parse_checkins(f.path(), &ColumnSchema::default()).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(stats.malformed, 1);
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let f = write_tmp("");
        let (cs, pois, _) = parse_checkins(f.path(), &ColumnSchema::default()).unwrap();
        assert!(cs.is_empty());
        assert!(pois.is_empty());
    }

    #[test]
    fn mostly_malformed_file_is_fatal() {
        let f = write_tmp(&format!(
            "{HEADER}u1\tp1\t100\t40.0\t-74.0\tCafe\nbad\nbad\nbad\n"
        ));
        assert!(parse_checkins(f.path(), &ColumnSchema::default()).is_err());
    }

    #[test]
    fn missing_file_reports_missing_input() {
        let err =
            parse_checkins(Path::new("/nonexistent/x.tsv"), &ColumnSchema::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn iso_timestamps_are_accepted() {
        assert_eq!(parse_timestamp("1970-01-01T00:00:00Z"), Some(0));
        assert_eq!(parse_timestamp("1970-01-02"), Some(86_400));
        assert_eq!(parse_timestamp("2010-07-24T12:00:00"), parse_timestamp("2010-07-24").map(|d| d + 43_200));
        assert_eq!(parse_timestamp("not-a-time"), None);
    }

    #[test]
    fn social_edges_dedupe_and_drop_self_loops() {
        let f = write_tmp("user_id\tuser_id\nu1\tu2\nu2\tu1\nu3\tu3\n");
        let (edges, _) = parse_social(f.path(), &ColumnSchema::default()).unwrap();
        let ds = RegionDataset::assemble(RegionTag::Source, vec![], vec![], edges).unwrap();
        assert_eq!(ds.social_edges.len(), 1);
        assert!(ds.social_edges.contains(&("u1".into(), "u2".into())));
    }

    fn toy_dataset() -> RegionDataset {
        // u1: 3 check-ins, 1 connection; u2: 1 check-in, 1 connection.
        // p1 has 3 check-ins, p2 has 1.
        let pois = vec![
            Poi { poi_id: "p1".into(), location: GeoPoint::new(0.0, 0.0).unwrap(), category: "Cafe".into() },
            Poi { poi_id: "p2".into(), location: GeoPoint::new(0.0, 0.1).unwrap(), category: "Bar".into() },
        ];
        let cks = vec![
            Checkin { user_id: "u1".into(), poi_id: "p1".into(), timestamp: 1 },
            Checkin { user_id: "u1".into(), poi_id: "p1".into(), timestamp: 2 },
            Checkin { user_id: "u1".into(), poi_id: "p2".into(), timestamp: 3 },
            Checkin { user_id: "u2".into(), poi_id: "p1".into(), timestamp: 4 },
        ];
        let social = vec![("u1".into(), "u2".into())];
        RegionDataset::assemble(RegionTag::Target, cks, pois, social).unwrap()
    }

    #[test]
    fn filter_removes_sparse_pois_then_users() {
        let ds = toy_dataset();
        let t = FilterThresholds { min_poi_checkins: 2, min_user_checkins: 2, min_user_connections: 1 };
        let out = filter_region(&ds, t).unwrap();
        // p2 (1 check-in) goes; u2 then has 1 check-in at p1 -> below 2 -> goes.
        assert!(!out.pois.contains_key("p2"));
        assert!(!out.users.contains("u2"));
        assert!(out.users.contains("u1"));
        // u1 keeps only p1 check-ins (2 of them).
        assert_eq!(out.checkins.len(), 2);
        // social edge to removed u2 is dangling and dropped.
        assert!(out.social_edges.is_empty());
    }

    #[test]
    fn filter_is_identity_above_thresholds() {
        let ds = toy_dataset();
        let t = FilterThresholds { min_poi_checkins: 1, min_user_checkins: 1, min_user_connections: 1 };
        let out = filter_region(&ds, t).unwrap();
        assert_eq!(out.users, ds.users);
        assert_eq!(out.checkins.len(), ds.checkins.len());
        assert_eq!(out.social_edges, ds.social_edges);
    }

    #[test]
    fn filter_too_sparse_is_fatal() {
        let ds = toy_dataset();
        let t = FilterThresholds { min_poi_checkins: 10, min_user_checkins: 1, min_user_connections: 0 };
        assert!(filter_region(&ds, t).is_err());
    }

    #[test]
    fn split_ten_checkins_is_7_1_2() {
        let mut ds = toy_dataset();
        ds.checkins = (0..10)
            .map(|i| Checkin { user_id: "u1".into(), poi_id: "p1".into(), timestamp: i })
            .collect();
        let s = temporal_split(&ds, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!(s.train.checkins.len(), 7);
        assert_eq!(s.validation.checkins.len(), 1);
        assert_eq!(s.test.checkins.len(), 2);
    }

    #[test]
    fn split_three_checkins_is_2_0_1() {
        // floor(3*0.7)=2, floor(3*0.8)=2 -> 2/0/1.
        let mut ds = toy_dataset();
        ds.checkins.truncate(3);
        let s = temporal_split(&ds, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!(s.train.checkins.len(), 2);
        assert_eq!(s.validation.checkins.len(), 0);
        assert_eq!(s.test.checkins.len(), 1);
    }

    #[test]
    fn split_orders_by_time_then_ids_and_partitions() {
        let mut ds = toy_dataset();
        ds.checkins = vec![
            Checkin { user_id: "u2".into(), poi_id: "p1".into(), timestamp: 5 },
            Checkin { user_id: "u1".into(), poi_id: "p2".into(), timestamp: 5 },
            Checkin { user_id: "u1".into(), poi_id: "p1".into(), timestamp: 5 },
            Checkin { user_id: "u1".into(), poi_id: "p1".into(), timestamp: 1 },
        ];
        let s = temporal_split(&ds, (0.7, 0.1, 0.2)).unwrap();
        let all: Vec<_> = s
            .train
            .checkins
            .iter()
            .chain(&s.validation.checkins)
            .chain(&s.test.checkins)
            .cloned()
            .collect();
        let mut expect = ds.checkins.clone();
        expect.sort_by(|a, b| {
            (a.timestamp, &a.user_id, &a.poi_id).cmp(&(b.timestamp, &b.user_id, &b.poi_id))
        });
        assert_eq!(all, expect);
        let max_train = s.train.checkins.iter().map(|c| c.timestamp).max().unwrap();
        let min_test = s.test.checkins.iter().map(|c| c.timestamp).min().unwrap();
        assert!(max_train <= min_test);
    }

    #[test]
    fn entity_sets_are_shared_across_splits() {
        let ds = toy_dataset();
        let s = temporal_split(&ds, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!(s.train.users, s.test.users);
        assert_eq!(s.train.pois.len(), s.test.pois.len());
        assert_eq!(s.train.social_edges, s.validation.social_edges);
    }
}
