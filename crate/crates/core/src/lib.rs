//! Knowledge graph completion with proximity-aware graph neural encoders.
//!
//! The pipeline: ingest triples ([`kg`]), derive the proximity graph from
//! shared query answer sets ([`proximity`]), encode entities and relations
//! ([`encoder`]), score queries with a convolutional decoder ([`decoder`]),
//! train ([`train`]) and evaluate with filtered ranking ([`eval`]).

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod grid;
pub mod kg;
pub mod model;
pub mod optim;
pub mod proximity;
pub mod synthetic;
pub mod train;

pub use cpgnn_autodiff as autodiff;
