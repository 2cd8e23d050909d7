//! Toy U-Net deblurring network, synthetic data, metrics and training.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod network;
pub mod train;

pub use block::Block;
pub use config::{BlockKind, NetworkConfig, SlotRole, SlotSpec};
pub use data::{generate_dataset, subsample_indices, BlurKind, Dataset, DatasetSpec};
pub use metrics::{mean_psnr, psnr, ssim};
pub use network::{ForwardOptions, Network, SlotTrace, Trace};
pub use train::{evaluate_psnr, finetune, train_base, Adam, TrainReport, TrainSettings};
