//! Multi-objective neural network training where each objective's SGD step
//! is scaled by the evidence its own predictions carry.
//!
//! A confusion matrix is turned into per-class recall and precision, the two
//! are combined with Dempster's rule into class masses `M`, and `Γ = ‖M‖₂`
//! multiplies that objective's learning rate. Softmax, one-vs-rest squared
//! hinge SVM and LDA heads can share one trunk or each own a trunk.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod evidence;
pub mod gradcheck;
pub mod heads;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use config::{Mode, RunConfig};
pub use data::Dataset;
pub use evidence::{bpa_from_confusion, confusion_matrix, gamma, Bpa, ConfusionMatrix};
pub use heads::{Head, HeadKind};
pub use linalg::Matrix;
pub use nn::{init_params, LayerSpec, Network, NetworkSpec};
pub use rng::SplitMix64;
pub use trainer::{fit, RunState};
