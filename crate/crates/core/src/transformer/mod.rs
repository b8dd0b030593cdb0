//! A minimal configurable transformer whose FFN blocks expose both the
//! matrix form and the key-value sum form.

pub mod attention;
pub mod config;
pub mod ffn;
pub mod model;
pub mod weights;

pub use attention::{mhsa_forward, mhsa_with_attention};
pub use config::{AttnMask, FfnKind, ModelConfig, TokenSequence, NORM_EPS};
pub use ffn::{ffn_forward, ffn_kv_form, ffn_only_layer};
pub use model::{greedy_decode, lm_forward, lm_forward_with, ForwardHooks, Model};
pub use weights::{layer_norm, LayerWeights, ModelWeights, NormParams};
