//! Synthetic multi-domain corpora, augmentation, text processing and
//! manifest/feature file I/O.

pub mod augment;
pub mod corpus;
pub mod domain;
pub mod manifest;
pub mod presets;
pub mod text;

pub use augment::{random_speed_factor, spec_augment, speed_perturb, MaskRecord, SpecAugConfig};
pub use corpus::{generate_corpus, render_utterance, AcousticTemplates, AcousticUnit, Corpus};
pub use domain::{AnnotationStyle, DomainSpec, LexiconSpec};
pub use manifest::{length_filter, read_features, write_features, FeatureSource, Manifest, ManifestEntry};
pub use text::{mask_transcript, mask_words, normalize_text, scoring_reference, MaskedWord, Tokenizer};
