//! Patch-token grids, synthetic teachers, spatial resampling and the `AGGF`
//! embedding file format.

mod format;
mod grid;
mod synth;

pub use format::{
    decode_embeddings, decode_sections, encode_embeddings, encode_sections, load_embeddings, save_embeddings,
    Section,
};
pub use grid::{resample_grid, upsample_matrix, PatchGrid};
pub use synth::{synth_teacher, Image, SyntheticTeacherSpec, TeacherAdapter, INPUT_SIZE, TEACHER_PATCH};
