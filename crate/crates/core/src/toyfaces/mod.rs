//! Procedural face dataset: attributes, renderer, descriptions, sketches,
//! label maps and train/test splits.

pub mod attributes;
pub mod dataset;
pub mod grammar;
pub mod render;
pub mod sketch;

pub use attributes::{
    sample_attributes, AttributeQuery, AttributeVector, Gender, Glasses, HairColor, HairLength, Hat, SkinTone, Slot, Smile,
};
pub use dataset::{build_dataset, Dataset, DatasetConfig, DatasetManifest, FaceSample, Split};
pub use grammar::{describe, parse_text, tokenize, Lexicon};
pub use render::{check_resolution, extract_label_map, render, Part};
pub use sketch::{extract_sketch, SketchConfig};
