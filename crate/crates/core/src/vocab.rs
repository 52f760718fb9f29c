//! Fixed ids of the special tokens shared by the tokenizer, the model heads
//! and the decoders.

/// CTC blank.
pub const BLANK: usize = 0;
pub const PAD: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Stands in for a special or unfinished word that is excluded from the loss.
pub const MASK: usize = 4;
pub const UNK: usize = 5;

pub const NUM_SPECIAL: usize = 6;

pub const SPECIAL_NAMES: [&str; NUM_SPECIAL] =
    ["<blank>", "<pad>", "<s>", "</s>", "[MASK]", "<unk>"];
