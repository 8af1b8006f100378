//! Generate a small synthetic frame store, scan it into a manifest and split
//! it into stratified train and validation sets.
//!
//! cargo run --example build_manifest -- [OUT_DIR]

use std::path::PathBuf;

use ear_tsm::ingest::{self, LabelMapping, SourceDataset};
use ear_tsm::synthetic::{self, SynthSpec};

fn main() -> ear_tsm::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("ear_manifest"), PathBuf::from);
    let root = out.join("frames");
    let spec = SynthSpec {
        videos_per_class: 4,
        ..SynthSpec::default()
    };
    synthetic::generate(&root, &spec)?;

    let mapping = LabelMapping::parse(ingest::DEFAULT_MAPPING)?;
    let report = ingest::build_manifest(&[(root, SourceDataset::Synthetic)], &mapping, &[])?;
    let path = out.join("manifest.csv");
    ingest::write_manifest(&path, &report.entries)?;
    println!("{} videos -> {}", report.entries.len(), path.display());
    for (category, n) in report.category_counts() {
        println!("  {category:<14} {n}");
    }

    let split = ingest::split_manifest(&report.entries, 0.25, 0)?;
    println!("train {} / validation {}", split.train.len(), split.validation.len());
    for e in &split.validation {
        println!("  val {} ({} frames)", e.video_id, e.frame_count);
    }
    Ok(())
}
