//! Synthetic dataset generation, manifests and annotation ingest.

mod record;
mod synth;

pub use record::{
    append_manifest, cell_targets, ingest_annotation, ingest_file, load_batch, load_sample, load_split,
    read_manifest, write_manifest, AnnotationRecord, CellTargets, Sample, SampleRecord, Split, MANIFEST_FILE,
};
pub use synth::{generate, render_background, render_sample, Family, Rendered, Shape, SynthConfig, ThetaRanges};
