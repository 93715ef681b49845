//! Salient-object detection on the CPU, built from first principles.
//!
//! The crate provides a small reverse-mode autodiff engine ([`tensor`]), the
//! neural building blocks assembled on top of it ([`nn`]), the full detection
//! model (pyramidal CNN/transformer encoder, optional depth branch, residual
//! channel-attention decoder in [`encoder`], [`depth`], [`decoder`]), the
//! composite training objective ([`loss`]), evaluation metrics ([`metrics`]),
//! netpbm dataset I/O with a synthetic-scene generator ([`data`]), and an Adam
//! trainer with binary checkpoints ([`optim`], [`checkpoint`], [`trainer`]).
//!
//! Everything is deterministic: a fixed seed produces bit-identical parameter
//! initialisation, batch order, training trajectory and checkpoint bytes in
//! single-threaded mode.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod depth;
pub mod encoder;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;
