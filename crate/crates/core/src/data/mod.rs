//! Corpus loading, vocabulary, pretrained vectors, folds and padded batches.

pub mod batch;
pub mod corpus;
pub mod embeddings;
pub mod synthetic;
pub mod tokenize;
pub mod vocab;

pub use batch::{batch_and_pad, encode_corpus, make_folds, Batch, EncodedSample, FoldPlan};
pub use corpus::{load_dataset, Corpus, Dataset, DatasetFormat, Sample};
pub use embeddings::{load_pretrained_embeddings, PretrainedLoad};
pub use tokenize::tokenize;
pub use vocab::Vocab;
