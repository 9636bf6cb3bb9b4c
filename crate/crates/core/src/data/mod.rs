//! Image ingestion, the galaxy taxonomy, splitting and synthetic galaxies.

mod dataset;
mod image;
mod pnm;
mod synth;
mod taxonomy;

pub use dataset::{
    load_image_folder, split_fixed, stratified_split, train_count, Dataset, LabeledImage,
    LoadOptions, LoadReport, Partition, SkippedFile, DEFAULT_TRAIN_FRACTION,
};
pub use image::{denormalize, normalize, resize_bilinear, resize_to, Grid};
pub use pnm::{decode_image, encode_p5};
pub use synth::{
    image_seed, synth_dataset, synth_generate, synth_generate_with, Manifest, ManifestEntry,
    SynthParams, MANIFEST_FILE,
};
pub use taxonomy::{CoarseClass, FineClass, Level};
