//! W4A8 post-training quantization toolkit.
//!
//! * [`quant`]: symmetric/asymmetric round-to-nearest quantization at
//!   per-tensor, per-channel, per-token and per-group granularity.
//! * [`clip`]: per-channel clipping search for the weight range.
//! * [`hessian`]: Hessian-based error compensation with frozen scales.
//! * [`pack`]: INT4 nibble packing, signed and offset encodings.
//! * [`gemm`]: five software GEMM pipelines with operation counters.
//! * [`bench`]: shape sweeps, timing and CSV/table reports.
//! * [`otf`]: the on-disk tensor format.

pub mod bench;
pub mod clip;
pub mod error;
pub mod gemm;
pub mod hessian;
pub mod otf;
pub mod pack;
pub mod quant;
pub mod recipe;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use quant::{Granularity, QuantFormat, QuantScheme, QuantizedTensor};
pub use tensor::DenseTensor;
