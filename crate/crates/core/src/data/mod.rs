//! Labeled image datasets, the `VIDD` file format and synthetic sprites.

mod dataset;
mod sprites;
mod vidd;

pub use dataset::{split_train_val, Dataset, Normalizer, SampleBatch, Split};
pub use sprites::{generate_sprites, write_sidecar, SpriteMask, SpriteParams, GLYPH_COUNT};
pub use vidd::{load_vidd, save_vidd, vidd_from_bytes, vidd_to_bytes, VIDD_MAGIC, VIDD_VERSION};
