//! Shared-weight text encoder: context flattening, hashed features, a linear
//! projection and unit normalization, with an exact backward pass.

pub mod features;
pub mod tokens;
pub mod weights;

pub use features::{featurize, featurize_text, FeatureVector, DEFAULT_FEATURE_DIM};
pub use tokens::{flatten_context, SpecialToken, Token, TokenSequence, DEFAULT_MAX_LEN};
pub use weights::{
    encode, encode_backward, Activation, Embedding, EncoderWeights, Forward, SparseGrad,
    DEFAULT_DIM,
};

use crate::error::Result;

/// Embeds a bare entity value.
pub fn encode_text(w: &EncoderWeights, text: &str) -> Result<Embedding> {
    w.encode(&featurize_text(text, w.feature_dim()))
}
