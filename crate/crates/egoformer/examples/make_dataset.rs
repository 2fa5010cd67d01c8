//! Writes a synthetic two-block dataset in the CLI's file formats, so the
//! binary can be exercised without any external data:
//!
//! ```text
//! cargo run --release --example make_dataset -- out_dir [nodes] [seed]
//! ```

use egoformer::graph::write_dataset_files;
use egoformer::synth::{sbm, SbmSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "data/sbm".to_string());
    let nodes: usize = args.next().map(|s| s.parse().expect("nodes")).unwrap_or(200);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(7);
    let g = sbm(&SbmSpec::feature_friendly(nodes), seed);
    write_dataset_files(&g, std::path::Path::new(&dir)).expect("write dataset");
    println!(
        "wrote {} nodes / {} edges / {} classes to {dir}",
        g.num_nodes(),
        g.num_edges(),
        g.num_classes()
    );
}
