//! Heterogeneous user–POI mobility graph built from a training split:
//! social edges, kernel-weighted spatial edges from consecutive check-ins,
//! user–POI check-in edges with the row-normalized affinity matrix R, and
//! the derived neighborhood indexes and category statistics the model needs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::binfmt::{Kind, Reader, Writer};
use crate::error::{Error, Result};
use crate::ingest::{GeoPoint, RegionDataset, RegionTag};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in kilometres.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * s.sqrt().atan2((1.0 - s).sqrt())
}

/// Distance kernel for spatial edges.
#[derive(Debug, Clone, Copy)]
pub struct KernelConfig {
    pub bandwidth_km: f64,
    pub cutoff_km: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth_km: 10.0,
            cutoff_km: 50.0,
        }
    }
}

/// `exp(-d/bandwidth)` within the cutoff, 0 beyond it.
pub fn edge_weight(d: f64, k: &KernelConfig) -> f64 {
    if d <= k.cutoff_km {
        (-d / k.bandwidth_km).exp()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoiMeta {
    pub poi_id: String,
    pub lat: f64,
    pub lon: f64,
    pub category: u16,
}

/// The training graph over interned entity ids. User index `i` corresponds to
/// `users[i]` (lexicographically sorted), likewise for POIs, so dense indexes
/// order the same way as the original string ids.
#[derive(Debug, Clone)]
pub struct MobilityGraph {
    pub region_tag: RegionTag,
    pub users: Vec<String>,
    pub pois: Vec<PoiMeta>,
    pub categories: Vec<String>,
    /// E_u as unordered pairs (a < b), sorted.
    pub social_edges: Vec<(u32, u32)>,
    /// E_l as unordered pairs (a < b) with kernel weight, sorted.
    pub spatial_edges: Vec<(u32, u32, f64)>,
    /// Train check-in counts per user: (poi, count), sorted by poi.
    pub checkin_counts: Vec<Vec<(u32, u32)>>,

    // Derived indexes, rebuilt by `finalize` (not serialized).
    /// N_u: social neighbors per user, ascending.
    pub social_adj: Vec<Vec<u32>>,
    /// S_l: spatial neighbors per POI with edge weights, ascending.
    pub spatial_adj: Vec<Vec<(u32, f64)>>,
    /// S_u: distinct POIs each user checked in at, ascending.
    pub user_pois: Vec<Vec<u32>>,
    /// N_l: distinct users per POI, ascending.
    pub poi_users: Vec<Vec<u32>>,
    /// Row-normalized affinity matrix R, aligned with `user_pois`.
    pub r_rows: Vec<Vec<(u32, f64)>>,
    /// Dense per-user category distribution p^{u_i} (rows sum to 1 for active users).
    pub user_cat: Vec<Vec<f64>>,
    /// Per-user check-in counts by category.
    pub user_cat_counts: Vec<Vec<u32>>,
    /// p^{l_a}_{(u_k)} weights aligned with `poi_users`.
    pub poi_user_affinity: Vec<Vec<f64>>,
    /// All observed (user, poi, R_{ul}) triples, sorted.
    pub positive_pairs: Vec<(u32, u32, f64)>,
}

/// Entity and edge counts, for run summaries.
#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct GraphSummary {
    pub region: String,
    pub users: usize,
    pub pois: usize,
    pub categories: usize,
    pub checkins: usize,
    pub user_user_edges: usize,
    pub poi_poi_edges: usize,
    pub user_poi_edges: usize,
}

impl MobilityGraph {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_pois(&self) -> usize {
        self.pois.len()
    }

    pub fn user_index(&self, id: &str) -> Option<u32> {
        self.users
            .binary_search_by(|u| u.as_str().cmp(id))
            .ok()
            .map(|i| i as u32)
    }

    pub fn poi_index(&self, id: &str) -> Option<u32> {
        self.pois
            .binary_search_by(|p| p.poi_id.as_str().cmp(id))
            .ok()
            .map(|i| i as u32)
    }

    pub fn total_checkins(&self) -> usize {
        self.checkin_counts
            .iter()
            .flatten()
            .map(|&(_, n)| n as usize)
            .sum()
    }

    pub fn summary(&self) -> GraphSummary {
        GraphSummary {
            region: self.region_tag.to_string(),
            users: self.n_users(),
            pois: self.n_pois(),
            categories: self.categories.len(),
            checkins: self.total_checkins(),
            user_user_edges: self.social_edges.len(),
            poi_poi_edges: self.spatial_edges.len(),
            user_poi_edges: self.positive_pairs.len(),
        }
    }

    /// The observed affinity R_{ul}, 0 for unobserved pairs.
    pub fn affinity(&self, user: u32, poi: u32) -> f64 {
        self.r_rows[user as usize]
            .binary_search_by_key(&poi, |&(p, _)| p)
            .map(|i| self.r_rows[user as usize][i].1)
            .unwrap_or(0.0)
    }

    pub fn has_checked_in(&self, user: u32, poi: u32) -> bool {
        self.user_pois[user as usize].binary_search(&poi).is_ok()
    }

    /// Rebuild every derived index from the stored core fields.
    fn finalize(&mut self) {
        let m = self.users.len();
        let n = self.pois.len();
        let n_cat = self.categories.len();

        self.social_adj = vec![Vec::new(); m];
        for &(a, b) in &self.social_edges {
            self.social_adj[a as usize].push(b);
            self.social_adj[b as usize].push(a);
        }
        for adj in &mut self.social_adj {
            adj.sort_unstable();
        }

        self.spatial_adj = vec![Vec::new(); n];
        for &(a, b, w) in &self.spatial_edges {
            self.spatial_adj[a as usize].push((b, w));
            self.spatial_adj[b as usize].push((a, w));
        }
        for adj in &mut self.spatial_adj {
            adj.sort_unstable_by_key(|&(p, _)| p);
        }

        self.user_pois = vec![Vec::new(); m];
        self.poi_users = vec![Vec::new(); n];
        self.r_rows = vec![Vec::new(); m];
        self.user_cat_counts = vec![vec![0u32; n_cat]; m];
        self.positive_pairs = Vec::new();
        for (u, row) in self.checkin_counts.iter().enumerate() {
            let total: u32 = row.iter().map(|&(_, c)| c).sum();
            for &(p, c) in row {
                self.user_pois[u].push(p);
                self.poi_users[p as usize].push(u as u32);
                let r = c as f64 / total as f64;
                self.r_rows[u].push((p, r));
                self.positive_pairs.push((u as u32, p, r));
                let cat = self.pois[p as usize].category as usize;
                self.user_cat_counts[u][cat] += c;
            }
        }

        self.user_cat = vec![vec![0.0; n_cat]; m];
        for u in 0..m {
            let total: u32 = self.user_cat_counts[u].iter().sum();
            if total > 0 {
                for c in 0..n_cat {
                    self.user_cat[u][c] = self.user_cat_counts[u][c] as f64 / total as f64;
                }
            }
        }

        self.poi_user_affinity = vec![Vec::new(); n];
        for p in 0..n {
            let cat = self.pois[p].category as usize;
            let users = &self.poi_users[p];
            let denom: u32 = users
                .iter()
                .map(|&u| self.user_cat_counts[u as usize][cat])
                .sum();
            self.poi_user_affinity[p] = users
                .iter()
                .map(|&u| self.user_cat_counts[u as usize][cat] as f64 / denom as f64)
                .collect();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::create(path, Kind::Graph)?;
        let io = |e| Error::io(path, e);
        (|| -> std::io::Result<()> {
            w.str(&self.region_tag.to_string())?;
            w.usize(self.users.len())?;
            for u in &self.users {
                w.str(u)?;
            }
            w.usize(self.categories.len())?;
            for c in &self.categories {
                w.str(c)?;
            }
            w.usize(self.pois.len())?;
            for p in &self.pois {
                w.str(&p.poi_id)?;
                w.f64(p.lat)?;
                w.f64(p.lon)?;
                w.u16(p.category)?;
            }
            w.usize(self.social_edges.len())?;
            for &(a, b) in &self.social_edges {
                w.u32(a)?;
                w.u32(b)?;
            }
            w.usize(self.spatial_edges.len())?;
            for &(a, b, wt) in &self.spatial_edges {
                w.u32(a)?;
                w.u32(b)?;
                w.f64(wt)?;
            }
            for row in &self.checkin_counts {
                w.usize(row.len())?;
                for &(p, c) in row {
                    w.u32(p)?;
                    w.u32(c)?;
                }
            }
            Ok(())
        })()
        .map_err(io)?;
        w.finish().map_err(io)
    }

    pub fn load(path: &Path) -> Result<MobilityGraph> {
        let mut r = Reader::open(path, Kind::Graph)?;
        let tag = match r.str()?.as_str() {
            "source" => RegionTag::Source,
            "target" => RegionTag::Target,
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("unknown region tag {other:?}"),
                })
            }
        };
        let n_users = r.usize()?;
        let mut users = Vec::with_capacity(n_users);
        for _ in 0..n_users {
            users.push(r.str()?);
        }
        let n_cats = r.usize()?;
        let mut categories = Vec::with_capacity(n_cats);
        for _ in 0..n_cats {
            categories.push(r.str()?);
        }
        let n_pois = r.usize()?;
        let mut pois = Vec::with_capacity(n_pois);
        for _ in 0..n_pois {
            pois.push(PoiMeta {
                poi_id: r.str()?,
                lat: r.f64()?,
                lon: r.f64()?,
                category: r.u16()?,
            });
        }
        let n_social = r.usize()?;
        let mut social_edges = Vec::with_capacity(n_social);
        for _ in 0..n_social {
            social_edges.push((r.u32()?, r.u32()?));
        }
        let n_spatial = r.usize()?;
        let mut spatial_edges = Vec::with_capacity(n_spatial);
        for _ in 0..n_spatial {
            spatial_edges.push((r.u32()?, r.u32()?, r.f64()?));
        }
        let mut checkin_counts = Vec::with_capacity(n_users);
        for _ in 0..n_users {
            let len = r.usize()?;
            let mut row = Vec::with_capacity(len);
            for _ in 0..len {
                row.push((r.u32()?, r.u32()?));
            }
            checkin_counts.push(row);
        }
        r.expect_eof()?;

        let mut g = MobilityGraph {
            region_tag: tag,
            users,
            pois,
            categories,
            social_edges,
            spatial_edges,
            checkin_counts,
            social_adj: Vec::new(),
            spatial_adj: Vec::new(),
            user_pois: Vec::new(),
            poi_users: Vec::new(),
            r_rows: Vec::new(),
            user_cat: Vec::new(),
            user_cat_counts: Vec::new(),
            poi_user_affinity: Vec::new(),
            positive_pairs: Vec::new(),
        };
        g.finalize();
        Ok(g)
    }
}

/// Build the training graph from a (filtered, train-split) dataset.
pub fn build_graph(train: &RegionDataset, kernel: &KernelConfig) -> Result<MobilityGraph> {
    if train.checkins.is_empty() {
        return Err(Error::Data("cannot build graph from empty train split".into()));
    }
    let users: Vec<String> = train.users.iter().cloned().collect();
    let user_idx: BTreeMap<&str, u32> = users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i as u32))
        .collect();

    let categories: Vec<String> = train
        .pois
        .values()
        .map(|p| p.category.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cat_idx: BTreeMap<&str, u16> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i as u16))
        .collect();

    // BTreeMap iteration gives POIs sorted by id.
    let pois: Vec<PoiMeta> = train
        .pois
        .values()
        .map(|p| PoiMeta {
            poi_id: p.poi_id.clone(),
            lat: p.location.lat,
            lon: p.location.lon,
            category: cat_idx[p.category.as_str()],
        })
        .collect();
    let poi_idx: BTreeMap<&str, u32> = pois
        .iter()
        .enumerate()
        .map(|(i, p)| (p.poi_id.as_str(), i as u32))
        .collect();

    let social_edges: Vec<(u32, u32)> = train
        .social_edges
        .iter()
        .map(|(a, b)| {
            let (x, y) = (user_idx[a.as_str()], user_idx[b.as_str()]);
            if x < y {
                (x, y)
            } else {
                (y, x)
            }
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    // Per-user timestamp-ordered check-in sequences (ties by poi index).
    let mut sequences: Vec<Vec<(i64, u32)>> = vec![Vec::new(); users.len()];
    let mut counts: Vec<BTreeMap<u32, u32>> = vec![BTreeMap::new(); users.len()];
    for c in &train.checkins {
        let u = user_idx[c.user_id.as_str()] as usize;
        let p = poi_idx[c.poi_id.as_str()];
        sequences[u].push((c.timestamp, p));
        *counts[u].entry(p).or_insert(0) += 1;
    }

    let mut spatial_set: BTreeSet<(u32, u32)> = BTreeSet::new();
    for seq in &mut sequences {
        seq.sort_unstable();
        for pair in seq.windows(2) {
            let (a, b) = (pair[0].1, pair[1].1);
            if a == b {
                continue;
            }
            spatial_set.insert(if a < b { (a, b) } else { (b, a) });
        }
    }
    let spatial_edges: Vec<(u32, u32, f64)> = spatial_set
        .into_iter()
        .filter_map(|(a, b)| {
            let pa = &pois[a as usize];
            let pb = &pois[b as usize];
            let d = haversine(
                GeoPoint { lat: pa.lat, lon: pa.lon },
                GeoPoint { lat: pb.lat, lon: pb.lon },
            );
            let w = edge_weight(d, kernel);
            (w > 0.0).then_some((a, b, w))
        })
        .collect();

    let checkin_counts: Vec<Vec<(u32, u32)>> = counts
        .into_iter()
        .map(|m| m.into_iter().collect())
        .collect();

    let mut g = MobilityGraph {
        region_tag: train.region_tag,
        users,
        pois,
        categories,
        social_edges,
        spatial_edges,
        checkin_counts,
        social_adj: Vec::new(),
        spatial_adj: Vec::new(),
        user_pois: Vec::new(),
        poi_users: Vec::new(),
        r_rows: Vec::new(),
        user_cat: Vec::new(),
        user_cat_counts: Vec::new(),
        poi_user_affinity: Vec::new(),
        positive_pairs: Vec::new(),
    };
    g.finalize();
    Ok(g)
}
