//! Preprocessing, the binary tensor container, dataset manifests and the
//! phantom generator.

pub mod container;
mod manifest;
pub mod phantom;
mod preprocess;

pub use container::{read_tensor_file, write_tensor_file, AnyTensor};
pub use manifest::{DatasetManifest, ImagePair, ManifestEntry};
pub use phantom::{generate_phantom_dataset, PhantomConfig};
pub use preprocess::{center_crop, denormalize, normalize_minmax, ScaleRecord};

pub use manifest::as_single_plane;
