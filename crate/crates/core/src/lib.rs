//! Quality-driven subject selection and domain adaptation for volumetric
//! organ segmentation.
//!
//! A segmenter trained on a labeled source domain is applied to an unlabeled
//! target domain. Reverse classification accuracy ([`rca`]) estimates the
//! Dice score of every target segmentation by registering the target image
//! and its prediction onto labeled reference subjects. The estimates rank the
//! target subjects ([`select`]), the chosen ones are annotated, and the
//! segmenter is adapted ([`segmodel`]) by retraining, appearance fine-tuning
//! or pseudo-label fine-tuning. [`experiment`] runs the cross-validated
//! comparison of all of these and renders the result tables, and
//! [`phantom`] synthesizes two-domain cohorts to run them on.

pub mod error;
pub mod experiment;
pub mod metrics;
pub mod par;
pub mod phantom;
pub mod rca;
pub mod register;
pub mod rng;
pub mod segmodel;
pub mod select;
pub mod volgrid;

pub use error::{Error, Result};
