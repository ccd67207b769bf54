//! Desk-scale image address localization toolkit.
//!
//! The pipeline is: synthesize a geo-tagged street-grid city
//! ([`synthcity`]), derive semantic sub-street addresses from the street
//! graph ([`partition`]) or from geocoding fixtures ([`annotate`]), split
//! locations into train/database/query sets ([`geodata`]), train small
//! image/text encoders with a contrastive-plus-geography objective
//! ([`align`], [`trainer`]), then score street-level (SA) and sub-street
//! (SSA) accuracy against a retrieval baseline ([`infer_eval`],
//! [`baseline`]).

pub mod align;
pub mod annotate;
pub mod baseline;
pub mod error;
pub mod geodata;
pub mod infer_eval;
pub mod partition;
pub mod seeding;
pub mod synthcity;
pub mod trainer;

pub use error::{Error, Result};
