pub mod album;
pub mod synth;
pub mod vocab;

pub use album::{load_albums, read_records, write_records, AlbumExample, AlbumRecord, LoadOptions};
pub use synth::{random_derangement, synth_dataset, SynthSpec};
pub use vocab::{build_vocab, encode_sentence, tokenize, Vocabulary, BOS, EOS, PAD, UNK};
