pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod keypoint;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod translator;

pub use autograd::{Element, Tape, Tensor, Var};
pub use config::{Config, HyperParams};
pub use error::{Error, Result};
pub use keypoint::{GaussianMapStack, KeypointSet, ProbabilityMapStack};
pub use motion::{ActionCode, KeypointSequence, LatentCode, LatentPosterior};
pub use pipeline::ModelBundle;
pub use translator::{BackgroundMask, Frame};
pub use data::VideoClip;
pub use evaluation::FeatureSet;
