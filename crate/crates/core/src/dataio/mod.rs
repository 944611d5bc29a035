//! Persistence: tensor files, image and label export, metrics CSV, run
//! configs and dataset manifests.

mod config;
mod csvout;
mod images;
mod manifest;
mod tensor_file;

pub use config::{parse_fraction, GeneratorKind, RunConfig};
pub use csvout::{format_g6, write_metrics_csv, Cell};
pub use images::{export_pgm, export_ppm, import_pgm, import_ppm, label_gray};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use tensor_file::{load_tensor, read_tensor, save_tensor, write_tensor};
