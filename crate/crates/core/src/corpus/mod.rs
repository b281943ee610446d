//! Riedel-format corpus handling: parsing, vocabulary, position features,
//! bag packing and a synthetic noisy benchmark.

mod bags;
mod embeddings;
mod encode;
mod riedel;
mod synthetic;
mod vocab;

pub use bags::{
    pack_bags, subsample_bag, Bag, BagKey, BagKeying, LabelSet, PackOptions, Packed, Role, Setting, NA, NA_INDEX,
};
pub use embeddings::{load_pretrained_embeddings, EmbeddingTable};
pub use encode::{encode_sentence, relative_position, EncodedSentence, PAD_POSITION};
pub use riedel::{
    load_riedel_file, parse_riedel_line, parse_riedel_str, write_riedel_file, RiedelFile, SentenceRecord, END_SENTINEL,
};
pub use synthetic::{
    generate_synthetic, generate_synthetic_records, SignalMap, SyntheticConfig, SyntheticData, SyntheticRecords,
};
pub use vocab::{build_vocab, Vocab, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
