//! Network configuration, assembly and checkpoints.

mod checkpoint;
mod config;
mod net;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, MAGIC, VERSION};
pub use config::{BlockMode, HeadConfig, ModelConfig, StageConfig, StemConfig};
pub use net::{PinSiteNet, DEFAULT_CAM_LAYER};
