//! Tokenization, the toy text encoder, and the binary feature store.
//!
//! Pretrained encoders run out of process; their outputs arrive through the
//! feature store. The toy encoder fills the same role for desk-scale runs.

pub mod store;
pub mod tokenize;
pub mod toy;

pub use store::{read_feature_store, write_feature_store, FeatureStore, FeatureStoreHeader, StoreError};
pub use tokenize::{count_tokens, tokenize, TokenSequence, END_TOKEN, START_TOKEN};
pub use toy::{toy_encode, toy_encode_text};

/// Feature store key conventions.
pub mod keys {
    pub fn mention(sample_id: &str) -> String {
        format!("{sample_id}/mention")
    }

    pub fn text(sample_id: &str) -> String {
        format!("{sample_id}/text")
    }

    pub fn image(image_ref: &str) -> String {
        format!("{image_ref}/image")
    }

    /// Prefix shared by all object rows of an image; rows are `{prefix}{index}`.
    pub fn object_prefix(image_ref: &str) -> String {
        format!("{image_ref}/object/")
    }

    pub fn object(image_ref: &str, index: usize) -> String {
        format!("{image_ref}/object/{index}")
    }

    pub fn face(sample_id: &str, object_index: usize) -> String {
        format!("{sample_id}/face/{object_index}")
    }

    pub fn face_prefix(sample_id: &str) -> String {
        format!("{sample_id}/face/")
    }

    /// `None` attaches the identity prompt to the whole image.
    pub fn identity(sample_id: &str, object_index: Option<usize>) -> String {
        match object_index {
            Some(i) => format!("{sample_id}/identity/{i}"),
            None => format!("{sample_id}/identity/{WHOLE_IMAGE}"),
        }
    }

    pub fn identity_prefix(sample_id: &str) -> String {
        format!("{sample_id}/identity/")
    }

    pub const WHOLE_IMAGE: &str = "image";

    pub fn entity(qid: &str) -> String {
        format!("entity/{qid}")
    }
}
