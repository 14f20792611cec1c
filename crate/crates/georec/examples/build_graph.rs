//! Ingest raw check-in and social files, apply density filters, split
//! temporally, and assemble the heterogeneous mobility graph.
//!
//! Run with: cargo run --example build_graph

use georec::graph::{build_graph, KernelConfig, MobilityGraph};
use georec::ingest::{
    filter_region, load_region, temporal_split, ColumnSchema, FilterThresholds, RegionTag,
};
use georec::synth::{generate, write_region_files, SynthSpec};

fn main() -> Result<(), georec::error::Error> {
    // Generate a small region pair so the example is self-contained.
    let spec = SynthSpec {
        n_groups: 5,
        source: georec::synth::RegionSpec {
            n_users: 150,
            n_pois: 50,
            n_checkins: 3000,
            social_within: 0.3,
            social_between: 0.01,
        },
        ..SynthSpec::default()
    };
    let (source, _, _) = generate(&spec, 7)?;
    let dir = std::env::temp_dir().join("georec-example-graph");
    let (ck, so) = write_region_files(&dir, &source)?;

    // Parse the text files back (this is what `georec build-graph` does).
    let raw = load_region(RegionTag::Source, &ck, &so, &ColumnSchema::default())?;
    println!("raw: {} users, {} check-ins", raw.users.len(), raw.checkins.len());

    // Density filter, then a 70/10/20 temporal split.
    let thresholds = FilterThresholds {
        min_poi_checkins: 10,
        min_user_checkins: 10,
        min_user_connections: 5,
    };
    let filtered = filter_region(&raw, thresholds)?;
    println!(
        "filtered: {} users, {} check-ins",
        filtered.users.len(),
        filtered.checkins.len()
    );
    let split = temporal_split(&filtered, (0.7, 0.1, 0.2))?;
    println!(
        "split: {} train / {} validation / {} test",
        split.train.checkins.len(),
        split.validation.checkins.len(),
        split.test.checkins.len()
    );

    // The graph is built from training check-ins only; spatial edges connect
    // consecutively visited POI pairs within the kernel cutoff.
    let kernel = KernelConfig { bandwidth_km: 10.0, cutoff_km: 50.0 };
    let graph = build_graph(&split.train, &kernel)?;
    println!("summary: {:?}", graph.summary());

    // Graphs round-trip through a compact binary format.
    let path = dir.join("graph_source.bin");
    graph.save(&path)?;
    let back = MobilityGraph::load(&path)?;
    assert_eq!(back.summary(), graph.summary());
    println!("round-tripped through {}", path.display());

    // A peek at the strongest spatial neighbors of POI 0.
    let mut edges = back.spatial_adj[0].clone();
    edges.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (p, w) in edges.iter().take(3) {
        println!(
            "poi {} -> {} (kernel weight {w:.4})",
            back.pois[0].poi_id, back.pois[*p as usize].poi_id
        );
    }
    Ok(())
}
