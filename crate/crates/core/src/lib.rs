//! A pipeline library for information extraction from clinical reports:
//! entity recognition (BIO tagging with a CRF layer), entity modality
//! classification, and relation extraction by multi-head selection, plus the
//! inline-markup exchange format, a joint evaluation protocol, and a
//! synthetic-corpus generator for end-to-end testing at desk scale.

pub mod annotation;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod modality;
pub mod ner;
pub mod nn;
pub mod pipeline;
pub mod relation;
pub mod schema;
pub mod synth;
pub mod training;
pub mod tokenize;
