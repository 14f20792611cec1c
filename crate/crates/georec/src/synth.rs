//! Paired synthetic regions with planted, partially shared preference
//! structure.
//!
//! Users belong to latent groups; each group concentrates half its check-in
//! mass on one "hot" category and 0.3 on a second, spreading the rest
//! uniformly. Target-region groups blend the corresponding source group's
//! preference vector with a fresh one at strength `rho` (1 = identical
//! preferences, 0 = independent), which makes the value of cross-region
//! transfer directly tunable. POIs cycle through the category list and sit in
//! per-category spatial clusters inside a ~28 km region box, so consecutive
//! check-ins always fall within the spatial kernel cutoff.
//!
//! Optionally, the last few target users are generated "cold": all their
//! activity lands in the final 15% of the time window (after the temporal
//! split boundary they have no training history) and they are wired to a
//! minimum number of friends so social pooling has something to work with.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{Checkin, GeoPoint, Poi, RegionDataset, RegionTag};
use crate::rng::{stream, stream_rng};

/// Per-region sizing and social density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionSpec {
    pub n_users: usize,
    pub n_pois: usize,
    pub n_checkins: usize,
    /// Bernoulli probability of a social edge within a group.
    pub social_within: f64,
    /// ... and across groups.
    pub social_between: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_groups: usize,
    pub n_categories: usize,
    /// Preference share: target group preferences are
    /// ρ·source + (1−ρ)·fresh.
    pub rho: f64,
    pub source: RegionSpec,
    pub target: RegionSpec,
    /// Target users generated with no early activity (appended last).
    pub n_cold_users: usize,
    pub cold_min_friends: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_groups: 10,
            n_categories: 20,
            rho: 0.9,
            source: RegionSpec {
                n_users: 2000,
                n_pois: 500,
                n_checkins: 20_000,
                social_within: 0.02,
                social_between: 0.0005,
            },
            target: RegionSpec {
                n_users: 300,
                n_pois: 200,
                n_checkins: 1500,
                social_within: 0.1,
                social_between: 0.005,
            },
            n_cold_users: 0,
            cold_min_friends: 3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_groups == 0 || self.n_categories < 2 {
            return bad("need at least 1 group and 2 categories".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must be in [0,1], got {}", self.rho));
        }
        for (name, r) in [("source", &self.source), ("target", &self.target)] {
            if r.n_users < self.n_groups {
                return bad(format!(
                    "{name} region: {} users cannot host {} groups",
                    r.n_users, self.n_groups
                ));
            }
            if r.n_pois < self.n_categories {
                return bad(format!(
                    "{name} region: {} POIs cannot cover {} categories",
                    r.n_pois, self.n_categories
                ));
            }
            if r.n_checkins == 0 {
                return bad(format!("{name} region: zero check-in budget"));
            }
            for p in [r.social_within, r.social_between] {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("social probability {p} out of [0,1]"));
                }
            }
        }
        if self.n_cold_users > self.target.n_users / 2 {
            return bad(format!(
                "{} cold users exceed half the target population",
                self.n_cold_users
            ));
        }
        Ok(())
    }
}

/// Planted structure for downstream verification.
#[derive(Debug, Clone, Serialize)]
pub struct GroundTruth {
    pub categories: Vec<String>,
    /// Group id per user id.
    pub source_groups: BTreeMap<String, usize>,
    pub target_groups: BTreeMap<String, usize>,
    /// Per-group category preference vectors (rows sum to 1).
    pub source_prefs: Vec<Vec<f64>>,
    pub target_prefs: Vec<Vec<f64>>,
    pub cold_users: Vec<String>,
}

/// km per degree of latitude (and of longitude at the equator).
const KM_PER_DEG: f64 = std::f64::consts::PI * 6371.0 / 180.0;
/// Category cluster centers are drawn in a ±half-extent square.
const REGION_HALF_EXTENT_KM: f64 = 14.0;
/// POIs scatter this far around their category's center.
pub const CLUSTER_RADIUS_KM: f64 = 3.0;
/// Check-in timestamps span this window (epoch seconds).
const T0: i64 = 1_600_000_000;
const WINDOW: i64 = 10_000_000;
/// Cold users are active only in the tail of the window.
const COLD_TAIL: f64 = 0.15;

fn hot_preference(n_categories: usize, rng: &mut impl Rng) -> Vec<f64> {
    let hot1 = rng.gen_range(0..n_categories);
    let mut hot2 = rng.gen_range(0..n_categories - 1);
    if hot2 >= hot1 {
        hot2 += 1;
    }
    let rest = 0.2 / (n_categories - 2) as f64;
    (0..n_categories)
        .map(|c| {
            if c == hot1 {
                0.5
            } else if c == hot2 {
                0.3
            } else {
                rest
            }
        })
        .collect()
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

fn draw_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let r = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.len() - 1
}

struct RegionDraw {
    users: Vec<String>,
    groups: Vec<usize>,
    pois: Vec<Poi>,
    pois_by_cat: Vec<Vec<usize>>,
}

fn draw_pois(
    prefix: &str,
    spec: &RegionSpec,
    n_categories: usize,
    categories: &[String],
    anchor: (f64, f64),
    rng: &mut impl Rng,
) -> (Vec<Poi>, Vec<Vec<usize>>) {
    let (lat0, lon0) = anchor;
    let km_lon = KM_PER_DEG * lat0.to_radians().cos();
    // One spatial cluster center per category.
    let centers: Vec<(f64, f64)> = (0..n_categories)
        .map(|_| {
            let dy = rng.gen_range(-REGION_HALF_EXTENT_KM..REGION_HALF_EXTENT_KM);
            let dx = rng.gen_range(-REGION_HALF_EXTENT_KM..REGION_HALF_EXTENT_KM);
            (lat0 + dy / KM_PER_DEG, lon0 + dx / km_lon)
        })
        .collect();
    let mut pois = Vec::with_capacity(spec.n_pois);
    let mut by_cat = vec![Vec::new(); n_categories];
    for i in 0..spec.n_pois {
        let cat = i % n_categories;
        let r = CLUSTER_RADIUS_KM * rng.gen::<f64>().sqrt();
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        let lat = centers[cat].0 + r * angle.sin() / KM_PER_DEG;
        let lon = centers[cat].1 + r * angle.cos() / km_lon;
        by_cat[cat].push(i);
        pois.push(Poi {
            poi_id: format!("{prefix}p{i}"),
            location: GeoPoint::new(lat, lon)
                .expect("generated coordinates are always in range"),
            category: categories[cat].clone(),
        });
    }
    (pois, by_cat)
}

fn draw_social(
    users: &[String],
    groups: &[usize],
    spec: &RegionSpec,
    rng: &mut impl Rng,
) -> Vec<(String, String)> {
    let mut edges = Vec::new();
    for i in 0..users.len() {
        for j in i + 1..users.len() {
            let p = if groups[i] == groups[j] {
                spec.social_within
            } else {
                spec.social_between
            };
            if rng.gen::<f64>() < p {
                edges.push((users[i].clone(), users[j].clone()));
            }
        }
    }
    edges
}

fn draw_checkins(
    draw: &RegionDraw,
    prefs: &[Vec<f64>],
    budget: usize,
    cold_from: usize,
    rng: &mut impl Rng,
) -> Vec<Checkin> {
    let n = draw.users.len();
    let base = budget / n;
    let remainder = budget % n;
    let mut out = Vec::with_capacity(budget);
    for u in 0..n {
        let quota = base + usize::from(u < remainder);
        let pref = &prefs[draw.groups[u]];
        let t_lo = if u >= cold_from {
            T0 + ((1.0 - COLD_TAIL) * WINDOW as f64) as i64
        } else {
            T0
        };
        let mut stamps: Vec<i64> = (0..quota)
            .map(|_| rng.gen_range(t_lo..T0 + WINDOW))
            .collect();
        stamps.sort_unstable();
        for t in stamps {
            let cat = draw_categorical(pref, rng);
            let poi = draw.pois_by_cat[cat][rng.gen_range(0..draw.pois_by_cat[cat].len())];
            out.push(Checkin {
                user_id: draw.users[u].clone(),
                poi_id: draw.pois[poi].poi_id.clone(),
                timestamp: t,
            });
        }
    }
    out
}

/// Generate the paired regions. Fully determined by `spec` and `root_seed`.
pub fn generate(
    spec: &SynthSpec,
    root_seed: u64,
) -> Result<(RegionDataset, RegionDataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = stream_rng(root_seed, stream::GENERATOR, &[]);
    let categories: Vec<String> = (0..spec.n_categories).map(|c| format!("c{c:02}")).collect();

    // Preferences: source groups, then the fresh matrix blended into the
    // target at strength rho.
    let source_prefs: Vec<Vec<f64>> = (0..spec.n_groups)
        .map(|_| hot_preference(spec.n_categories, &mut rng))
        .collect();
    let target_prefs: Vec<Vec<f64>> = source_prefs
        .iter()
        .map(|p| {
            let fresh = hot_preference(spec.n_categories, &mut rng);
            let mut blend: Vec<f64> = p
                .iter()
                .zip(&fresh)
                .map(|(a, b)| spec.rho * a + (1.0 - spec.rho) * b)
                .collect();
            normalize(&mut blend);
            blend
        })
        .collect();

    let make_draw = |prefix: &str, rspec: &RegionSpec, anchor, rng: &mut rand_chacha::ChaCha8Rng| {
        let users: Vec<String> = (0..rspec.n_users).map(|u| format!("{prefix}u{u}")).collect();
        let groups: Vec<usize> = (0..rspec.n_users).map(|u| u % spec.n_groups).collect();
        let (pois, pois_by_cat) =
            draw_pois(prefix, rspec, spec.n_categories, &categories, anchor, rng);
        RegionDraw { users, groups, pois, pois_by_cat }
    };
    let src = make_draw("s_", &spec.source, (40.0, -75.0), &mut rng);
    let tgt = make_draw("t_", &spec.target, (35.0, -120.0), &mut rng);

    let src_edges = draw_social(&src.users, &src.groups, &spec.source, &mut rng);
    let mut tgt_edges = draw_social(&tgt.users, &tgt.groups, &spec.target, &mut rng);

    // Cold users occupy the tail indices of the target region; make sure each
    // has enough friends for social pooling.
    let cold_from = spec.target.n_users - spec.n_cold_users;
    if spec.n_cold_users > 0 {
        let mut have: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
        let index_of: BTreeMap<&str, usize> = tgt
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.as_str(), i))
            .collect();
        for (a, b) in &tgt_edges {
            let (ia, ib) = (index_of[a.as_str()], index_of[b.as_str()]);
            have.entry(ia).or_default().insert(ib);
            have.entry(ib).or_default().insert(ia);
        }
        for cold in cold_from..spec.target.n_users {
            let mut friends = have.get(&cold).cloned().unwrap_or_default();
            while friends.len() < spec.cold_min_friends {
                let pick = rng.gen_range(0..cold_from);
                if friends.insert(pick) {
                    tgt_edges.push((tgt.users[cold].clone(), tgt.users[pick].clone()));
                    have.entry(pick).or_default().insert(cold);
                }
            }
            have.insert(cold, friends);
        }
    }

    let src_checkins = draw_checkins(&src, &source_prefs, spec.source.n_checkins, usize::MAX, &mut rng);
    let tgt_checkins = draw_checkins(&tgt, &target_prefs, spec.target.n_checkins, cold_from, &mut rng);

    let truth = GroundTruth {
        categories,
        source_groups: src
            .users
            .iter()
            .zip(&src.groups)
            .map(|(u, &g)| (u.clone(), g))
            .collect(),
        target_groups: tgt
            .users
            .iter()
            .zip(&tgt.groups)
            .map(|(u, &g)| (u.clone(), g))
            .collect(),
        source_prefs,
        target_prefs,
        cold_users: tgt.users[cold_from..].to_vec(),
    };
    let source = RegionDataset::assemble(RegionTag::Source, src_checkins, src.pois, src_edges)?;
    let target = RegionDataset::assemble(RegionTag::Target, tgt_checkins, tgt.pois, tgt_edges)?;
    Ok((source, target, truth))
}

/// Write a region in the exact tab-separated layout the ingest parser reads:
/// a check-in file (`user_id poi_id timestamp lat lon category`) and a social
/// edge file. Returns the two paths.
pub fn write_region_files(dir: &Path, ds: &RegionDataset) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tag = ds.region_tag.to_string();
    let ck_path = dir.join(format!("checkins_{tag}.tsv"));
    let so_path = dir.join(format!("social_{tag}.tsv"));

    let mut ck = std::io::BufWriter::new(
        std::fs::File::create(&ck_path).map_err(|e| Error::io(&ck_path, e))?,
    );
    (|| -> std::io::Result<()> {
        writeln!(ck, "user_id\tpoi_id\ttimestamp\tlat\tlon\tcategory")?;
        for c in &ds.checkins {
            let poi = &ds.pois[&c.poi_id];
            writeln!(
                ck,
                "{}\t{}\t{}\t{}\t{}\t{}",
                c.user_id,
                c.poi_id,
                c.timestamp,
                poi.location.lat,
                poi.location.lon,
                poi.category
            )?;
        }
        ck.flush()
    })()
    .map_err(|e| Error::io(&ck_path, e))?;

    let mut so = std::io::BufWriter::new(
        std::fs::File::create(&so_path).map_err(|e| Error::io(&so_path, e))?,
    );
    (|| -> std::io::Result<()> {
        writeln!(so, "user_id\tuser_id")?;
        for (a, b) in &ds.social_edges {
            writeln!(so, "{a}\t{b}")?;
        }
        so.flush()
    })()
    .map_err(|e| Error::io(&so_path, e))?;
    Ok((ck_path, so_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::haversine;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_groups: 4,
            n_categories: 6,
            rho: 0.9,
            source: RegionSpec {
                n_users: 40,
                n_pois: 24,
                n_checkins: 400,
                social_within: 0.3,
                social_between: 0.01,
            },
            target: RegionSpec {
                n_users: 20,
                n_pois: 12,
                n_checkins: 100,
                social_within: 0.3,
                social_between: 0.02,
            },
            n_cold_users: 3,
            cold_min_friends: 3,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let (s1, t1, g1) = generate(&spec, 99).unwrap();
        let (s2, t2, g2) = generate(&spec, 99).unwrap();
        assert_eq!(s1.checkins, s2.checkins);
        assert_eq!(t1.checkins, t2.checkins);
        assert_eq!(s1.social_edges, s2.social_edges);
        assert_eq!(
            serde_json::to_string(&g1).unwrap(),
            serde_json::to_string(&g2).unwrap()
        );
        // A different seed actually changes the draw.
        let (s3, _, _) = generate(&spec, 100).unwrap();
        assert_ne!(s1.checkins, s3.checkins);
    }

    #[test]
    fn budgets_are_exact_and_ids_disjoint() {
        let spec = small_spec();
        let (s, t, _) = generate(&spec, 1).unwrap();
        assert_eq!(s.checkins.len(), spec.source.n_checkins);
        assert_eq!(t.checkins.len(), spec.target.n_checkins);
        assert!(s.users.iter().all(|u| u.starts_with("s_")));
        assert!(t.users.iter().all(|u| u.starts_with("t_")));
        assert!(s.pois.keys().all(|p| p.starts_with("s_")));
        assert!(t.pois.keys().all(|p| p.starts_with("t_")));
    }

    #[test]
    fn all_poi_pairs_fall_inside_the_kernel_cutoff() {
        let spec = small_spec();
        let (s, t, _) = generate(&spec, 2).unwrap();
        for ds in [&s, &t] {
            let locs: Vec<_> = ds.pois.values().map(|p| p.location).collect();
            for i in 0..locs.len() {
                for j in i + 1..locs.len() {
                    let d = haversine(locs[i], locs[j]);
                    assert!(d < 50.0, "poi pair {d} km apart breaks the cutoff");
                }
            }
        }
    }

    #[test]
    fn same_category_pois_share_a_cluster() {
        let spec = small_spec();
        let (s, _, _) = generate(&spec, 3).unwrap();
        let mut by_cat: BTreeMap<&str, Vec<GeoPoint>> = BTreeMap::new();
        for p in s.pois.values() {
            by_cat.entry(&p.category).or_default().push(p.location);
        }
        for locs in by_cat.values() {
            for i in 0..locs.len() {
                for j in i + 1..locs.len() {
                    let d = haversine(locs[i], locs[j]);
                    assert!(
                        d <= 2.0 * CLUSTER_RADIUS_KM + 0.01,
                        "same-category pair {d} km apart"
                    );
                }
            }
        }
    }

    #[test]
    fn full_preference_share_copies_the_matrices() {
        let mut spec = small_spec();
        spec.rho = 1.0;
        let (_, _, truth) = generate(&spec, 4).unwrap();
        for (s, t) in truth.source_prefs.iter().zip(&truth.target_prefs) {
            for (a, b) in s.iter().zip(t) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_preference_share_decorrelates_the_matrices() {
        let mut spec = small_spec();
        spec.n_groups = 10;
        spec.n_categories = 30;
        spec.source.n_users = 50;
        spec.source.n_pois = 30;
        spec.target.n_users = 50;
        spec.target.n_pois = 30;
        spec.n_cold_users = 0;
        spec.rho = 0.0;
        let (_, _, truth) = generate(&spec, 5).unwrap();
        let flat = |m: &[Vec<f64>]| -> Vec<f64> { m.iter().flatten().copied().collect() };
        let (x, y) = (flat(&truth.source_prefs), flat(&truth.target_prefs));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&x), mean(&y));
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        let corr = cov / (vx * vy).sqrt();
        assert!(corr.abs() < 0.1, "correlation {corr}");
    }

    #[test]
    fn cold_users_are_late_and_socially_connected() {
        let spec = small_spec();
        let (_, t, truth) = generate(&spec, 6).unwrap();
        assert_eq!(truth.cold_users.len(), spec.n_cold_users);
        let boundary = T0 + ((1.0 - COLD_TAIL) * WINDOW as f64) as i64;
        for cu in &truth.cold_users {
            let stamps: Vec<i64> = t
                .checkins
                .iter()
                .filter(|c| &c.user_id == cu)
                .map(|c| c.timestamp)
                .collect();
            assert!(!stamps.is_empty());
            assert!(stamps.iter().all(|&ts| ts >= boundary), "early check-in for {cu}");
            let friends = t
                .social_edges
                .iter()
                .filter(|(a, b)| a == cu || b == cu)
                .count();
            assert!(friends >= spec.cold_min_friends, "{cu} has {friends} friends");
        }
    }

    #[test]
    fn rejects_infeasible_specs() {
        let mut spec = small_spec();
        spec.n_groups = 100;
        assert!(generate(&spec, 7).is_err());
        let mut spec = small_spec();
        spec.rho = 1.5;
        assert!(generate(&spec, 7).is_err());
        let mut spec = small_spec();
        spec.source.n_pois = 2;
        assert!(generate(&spec, 7).is_err());
    }

    #[test]
    fn written_files_round_trip_through_the_parser() {
        let spec = small_spec();
        let (s, _, _) = generate(&spec, 8).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let (ck, so) = write_region_files(tmp.path(), &s).unwrap();
        let loaded = crate::ingest::load_region(
            RegionTag::Source,
            &ck,
            &so,
            &crate::ingest::ColumnSchema::default(),
        )
        .unwrap();
        assert_eq!(loaded.checkins.len(), s.checkins.len());
        assert_eq!(loaded.social_edges, s.social_edges);
        assert_eq!(loaded.pois.len(), s.pois.len());
        // Coordinates survive the text round trip bit-exactly.
        for (id, poi) in &s.pois {
            let back = &loaded.pois[id];
            assert_eq!(back.location.lat.to_bits(), poi.location.lat.to_bits());
            assert_eq!(back.location.lon.to_bits(), poi.location.lon.to_bits());
        }
    }
}
