//! U-Net image-to-image network with hand-written backpropagation.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{Mode, Param};
pub use model::{Head, UNet, UNetConfig};
pub use optim::{Adam, PlateauScheduler};
