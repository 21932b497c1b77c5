//! Household-waste image classification: corpus handling, a small CNN
//! engine with transfer-learning backbones, evaluation metrics, portable
//! model export and the carbon/points ledger.

pub mod backbone;
pub mod classifier;
pub mod dataset;
pub mod export;
pub mod fixtures;
pub mod labels;
pub mod metrics;
pub mod nn;
mod onnx;
pub mod result;
pub mod rewards;
pub mod scalar;
pub mod weights;

pub use classifier::{build_classifier, Classifier, ClassifierError, HeadConfig, Probabilities, TrainConfig, WeightsSource};
pub use dataset::{DatasetSplits, ImageTensor, LabeledImage, SplitRatios};
pub use export::{export_portable, load_portable, PortableModel};
pub use labels::{ClassLabel, NUM_CLASSES};
pub use metrics::{ClassReport, ConfusionMatrix};
pub use result::ClassificationResult;
pub use rewards::{CarbonFactorTable, Ledger, LedgerEvent};

pub type Classifier32 = Classifier<f32>;
pub type Classifier64 = Classifier<f64>;
pub type ImageTensor32 = ImageTensor<f32>;
pub type Probabilities32 = Probabilities<f32>;
pub type ClassReport64 = ClassReport<f64>;
