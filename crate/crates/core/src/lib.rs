//! Self-supervised point-cloud representation learning.
//!
//! Two augmented replicas of every cloud are encoded by a shared
//! permutation-invariant encoder; a projection head and a class head feed
//! feature-wise and class-wise InfoNCE objectives. A curriculum gradually
//! replaces easy replica pairs with hard ones over the course of training.

pub mod augment;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;
