//! Synthetic shapes world: 40 shape-and-color classes with four instance
//! textures each, a scene sampler with two layout modes, frozen toy
//! encoders and the scene dataset format.

mod dataset;
mod encoders;
mod image;
mod scene;
mod shapes;

pub use dataset::{dataset_from_bytes, dataset_to_bytes, read_dataset, write_dataset};
pub use encoders::{cosine, ToyEncoders, MAX_PROMPT_LEN, PATCH, PATCH_DIM, VOCAB_SIZE};
pub use image::{pixel_extent, Image};
pub use scene::{
    class_token, derive_seed, generate_scene, paint, prior_cell, prompt_for, render, uniform_max_side, LayoutMode, Scene,
    Split, SubjectSpec, BOS_TOKEN, CANVAS, MAX_SCENE_SUBJECTS, MIN_SUBJECTS, UNIFORM_MIN_SIDE,
};
pub use shapes::{ClassId, Color, IdentityPattern, ShapeKind, NUM_CLASSES, NUM_COLORS, NUM_IDENTITIES, NUM_SHAPES};
