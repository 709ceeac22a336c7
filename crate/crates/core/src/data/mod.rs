//! Synthetic shape dataset and image/mask file I/O.

mod corpus;
mod detmath;
mod mask;
mod pngio;
mod synth;

pub use corpus::{load_corpus, CorpusItem, CorpusManifest};
pub use mask::BinaryMask;
pub use pngio::{read_image_png, read_mask_png, write_image_png, write_mask_png};
pub use synth::{gen_sample, ShapeFamily, ShapeSpec};
pub(crate) use synth::value_noise;
