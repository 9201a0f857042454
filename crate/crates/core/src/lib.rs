//! Spatial clustering of individual conditional expectation curves.
//!
//! The crate turns a fitted regression model and a georeferenced dataset into
//! smoothed ICE curves for one feature, measures how those curves and the
//! observation locations differ, and groups observations with a Ward-like
//! hierarchical clustering that trades curve similarity against spatial
//! proximity.

pub mod clustgeo;
pub mod config;
pub mod data;
pub mod fdmetrics;
pub mod ice;
pub mod manifest;
pub mod pipeline;
pub mod predictor;
pub mod render;
pub mod smoothing;
