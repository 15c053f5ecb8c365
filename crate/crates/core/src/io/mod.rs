//! Model files, datasets and the reference trainer.

mod dataset;
mod mnist;
mod model;
mod packing;
mod train;

pub use dataset::Dataset;
pub use mnist::{load_mnist, load_mnist_dir, parse_idx_images, parse_idx_labels, MnistSplit};
pub use model::{
    load_model, model_from_bytes, model_to_bytes, save_model, BlobRef, LayerRecord, ModelManifest,
    FORMAT_VERSION, MAGIC,
};
pub use packing::{index_bits, PackedAssignments};
pub use train::{train_reference_mlp, TrainConfig, TrainReport};
