//! Dataset ingestion, the synthetic planted-attribute generator, tensor and
//! checkpoint persistence.

pub mod bundle;
pub mod checkpoint;
pub mod synthetic;
pub mod zslt_file;

pub use bundle::{assemble_dataset, DatasetBundle, ImageRecord, Split};
pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, ParamEntry};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use zslt_file::{load_tensor_file, save_tensor_file};
