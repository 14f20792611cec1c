//! Generate a paired synthetic source/target dataset with planted group
//! preferences and write it in the ingest text format.
//!
//! Run with: cargo run --example gen_synthetic

use georec::synth::{generate, write_region_files, RegionSpec, SynthSpec};

fn main() -> Result<(), georec::error::Error> {
    let spec = SynthSpec {
        n_groups: 5,
        n_categories: 10,
        rho: 0.9,
        source: RegionSpec {
            n_users: 200,
            n_pois: 60,
            n_checkins: 4000,
            social_within: 0.1,
            social_between: 0.002,
        },
        target: RegionSpec {
            n_users: 60,
            n_pois: 30,
            n_checkins: 500,
            social_within: 0.2,
            social_between: 0.01,
        },
        n_cold_users: 5,
        cold_min_friends: 3,
    };
    let (source, target, truth) = generate(&spec, 42)?;

    let dir = std::env::temp_dir().join("georec-example-synth");
    let (sck, _) = write_region_files(&dir, &source)?;
    let (tck, _) = write_region_files(&dir, &target)?;

    println!(
        "source: {} users, {} POIs, {} check-ins, {} social edges",
        source.users.len(),
        source.pois.len(),
        source.checkins.len(),
        source.social_edges.len()
    );
    println!(
        "target: {} users, {} POIs, {} check-ins, {} social edges",
        target.users.len(),
        target.pois.len(),
        target.checkins.len(),
        target.social_edges.len()
    );
    println!("files: {} / {}", sck.display(), tck.display());
    println!("cold users: {:?}", truth.cold_users);

    // The planted preference rows show the 0.5 / 0.3 hot-category structure,
    // and how strongly the target blends toward the source at rho = 0.9.
    println!("\ngroup 0 source preferences: {:?}", rounded(&truth.source_prefs[0]));
    println!("group 0 target preferences: {:?}", rounded(&truth.target_prefs[0]));
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
