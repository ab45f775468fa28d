//! Binary container for checkpoints, hidden-state pair sets and reports.
//!
//! Every artifact uses the same `ADPT` layout (see [`container`]). Floats are
//! written as f32 by default and widened to f64 on load.

pub mod container;

mod checkpoint;
mod pairs;
mod report;

pub use checkpoint::{
    checkpoint_from_container, checkpoint_tensors, load_checkpoint, load_model, save_checkpoint, save_model,
    CHECKPOINT_KIND,
};
pub use container::{
    content_hash, decode_container, load_container, open_container, read_header, save_container, write_container,
    write_container_with, Container, ContainerReader, Dtype, Header, Tensor, TensorData,
};
pub use pairs::{load_pairs, pair_tensor_name, save_pairs, write_pairs_with, PairReader, PairSetMeta, PAIRS_KIND};
pub use report::{load_report, save_report, REPORT_KIND};
