//! Retinal non-uniform illumination removal: degradation synthesis, a
//! recursive non-local encoder-decoder network, its training objective and
//! optimizer, and full-reference quality metrics.

pub mod checkpoint;
pub mod color;
pub mod enhance;
pub mod error;
pub mod extractor;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod raster;
pub mod synthesis;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use enhance::{enhance, enhance_stages};
pub use error::{Error, Result};
pub use extractor::{load_vgg, PerceptualExtractor};
pub use loss::{LossReport, LossWeights};
pub use metrics::{evaluate_pairs, psnr, ssim, MetricReport, PairScore};
pub use network::{forward, ArchConfig, ModelParams, StageOutputs};
pub use optim::{Adam, AdamConfig, AdamState};
pub use raster::{load_image, Image, Plane};
pub use synthesis::{synthesize_dataset, SampleManifest, SynthesisConfig};
pub use tensor::{Real, Tensor};
pub use train::{train, TrainConfig, TrainRun, TrainSummary};
