//! Desk-scale toolkit for measuring and reducing demographic bias in small
//! language models.
//!
//! The pieces fit together as a pipeline: a bias attribute lexicon
//! ([`lexicon`]) drives counterfactual data augmentation over a text corpus
//! ([`cda`]), the augmented corpus is tokenized and split ([`corpus`]), a
//! frozen transformer core is fine-tuned through a parameter-efficient
//! overlay ([`model`], [`peft`], [`trainer`]), and the result is evaluated
//! with stereotype, language-modeling, and knowledge-retention metrics
//! ([`biaseval`], [`knowledgeeval`]). A linear projection-removal debiaser
//! over sentence embeddings lives in [`sentdebias`]. Everything is
//! deterministic given a seed and runs in double precision.

pub mod biaseval;
pub mod cda;
pub mod corpus;
pub mod error;
pub mod knowledgeeval;
pub mod lexicon;
pub mod model;
pub mod peft;
pub mod rng;
pub mod sentdebias;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
