//! File formats, tokenization, and the deterministic synthetic corpus.

pub mod corpus;
pub mod entity_text;
pub mod raster;
pub mod remex;
pub mod sample;
pub mod synthetic;
pub mod tokenizer;

pub use corpus::{dataset_hash, load_corpus, write_corpus};
pub use entity_text::{load_entitytext, save_entitytext, EntityTextRecord};
pub use raster::{extract_patches, ImageTensor, Raster};
pub use remex::{load_remex, save_remex, RemexBox, RemexRecord};
pub use sample::Sample;
pub use synthetic::{generate_synthetic, generate_with, SynthOptions, SyntheticCorpus};
pub use tokenizer::{tokenize, TokenizedCaption, Vocab, PAD_ID, UNK_ID};
