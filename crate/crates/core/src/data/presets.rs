//! Built-in synthetic domains: one in-domain training condition and one
//! held-out condition with its own channel, noise and vocabulary.

use super::domain::{letters, tilted_gain, AnnotationStyle, DomainSpec, LexiconSpec};
use super::corpus::AcousticTemplates;

pub const FEATURE_DIM: usize = 16;

pub fn in_domain() -> DomainSpec {
    DomainSpec {
        name: "studio".into(),
        symbol_set: letters(),
        symbol_duration_frames: (8.0, 2.0),
        noise_std: 0.3,
        channel_gain_profile: tilted_gain(FEATURE_DIM, 0.4),
        utterance_length_range: (6, 20),
        annotation: AnnotationStyle {
            breath_prob: 0.08,
            truncation_prob: 0.05,
        },
        lexicon: LexiconSpec {
            size: 150,
            word_len: (2, 6),
            seed: 11,
        },
    }
}

pub fn out_of_domain() -> DomainSpec {
    DomainSpec {
        name: "field".into(),
        symbol_set: letters(),
        symbol_duration_frames: (8.0, 2.0),
        noise_std: 0.45,
        channel_gain_profile: tilted_gain(FEATURE_DIM, -0.6),
        utterance_length_range: (6, 20),
        annotation: AnnotationStyle::clean(),
        lexicon: LexiconSpec {
            size: 150,
            word_len: (2, 6),
            seed: 23,
        },
    }
}

pub fn builtin_domains() -> Vec<DomainSpec> {
    vec![in_domain(), out_of_domain()]
}

/// Templates for the default tokenizer alphabet.
pub fn default_templates() -> AcousticTemplates {
    let mut symbols = letters();
    symbols.extend([' ', '\'']);
    AcousticTemplates::new(FEATURE_DIM, &symbols)
}
