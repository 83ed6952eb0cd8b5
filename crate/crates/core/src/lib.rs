//! Convolutional tables ensemble classifier.
//!
//! Images are expanded into extra feature channels ([`tensor`]), word
//! calculators turn every patch into a short binary word ([`words`]), and each
//! word votes into per-class weight tables ([`ensemble`]). Tables are grown one
//! at a time against loss gradients ([`train`]) with the weights re-fitted by a
//! global convex solver after each addition ([`losses`]).

pub mod data;
pub mod ensemble;
pub mod error;
pub mod format;
pub mod losses;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod words;

pub use data::{load_cifar10, load_dataset, load_idx, save_dataset, split, LabeledDataset};
pub use ensemble::{class_scores, classify, table_histogram, ConvTable, Ensemble, ImageDims, WordHistogram};
pub use error::{CteError, Result};
pub use format::{load_model, save_model};
pub use losses::{
    FeatureBlock, FeatureMatrix, GradientMatrix, LinearModel, LossConfig, LossKind, SolveReport, TeacherSoftLabels,
};
pub use tensor::{ChannelKind, ExtendedImage, PrepConfig, RawImage};
pub use train::{
    default_area, grow_fern, init_gradients, train_ensemble, GrowthConfig, Sample, TableLog, TrainConfig, TrainedModel,
    TreeShape,
};
pub use words::{BitFunction, BitKind, Fern, LongTree, Pixel, Region, TreeNode, WordCalculator};
