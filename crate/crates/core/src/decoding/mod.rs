//! Next-token estimators over decoder classifiers, CTC prefix scoring and
//! joint greedy/beam search.

pub mod ctc_prefix;
pub mod mixing;
pub mod search;

pub use ctc_prefix::{CtcPrefixScorer, CtcState};
pub use mixing::{log_p_decred, p_decred, MixingWeights};
pub use search::{
    beam_search, candidate_tokens, decode_corpus, decode_fixed_length, decode_utterance, greedy_search,
    joint_step_logprob,
    read_hypotheses, write_hypotheses, AttentionScorer, DecodeOptions, Hypothesis, ModelScorer,
    SearchConfig,
};
