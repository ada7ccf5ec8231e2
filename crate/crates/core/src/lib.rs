pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod prune;
pub mod reinit;
pub mod robust;
pub mod linalg;
pub mod net;
pub mod ordinal;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
