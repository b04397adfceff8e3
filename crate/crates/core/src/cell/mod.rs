//! The recurrent cell family and its n-gram generalization.
//!
//! | variant            | cell input              | memory                          | output            |
//! |--------------------|-------------------------|---------------------------------|-------------------|
//! | `Lstm`             | `tanh(X.X_t + H h' + b)`| `eta * c~ + f * c`              | `o * tanh(c)`     |
//! | `RkmLstm`          | `X.X_t + H h'`          | `eta * c~ + f * c`              | `o * c`           |
//! | `RkmCifg`          | `X.X_t + H h'`          | `(1 - f) * c~ + f * c`          | `o * c`           |
//! | `LinearKernelOutGate` | `X.X_t + H h'`       | `s_i c~ + s_f c`                | `o * c`           |
//! | `LinearKernel`     | `X.X_t + H h'`          | `s_i c~ + s_f c`                | `tanh(c)`         |
//! | `GatedCnn`         | `X.X_t`                 | `s_i c~`                        | `eta * c`         |
//! | `Cnn`              | `X.X_t`                 | `s_i c~`                        | `tanh(c)`         |
//!
//! Gates are `sigmoid(X_g.X_t + W_g h'_{t-1} + b_g)`; the feedback term is
//! absent for the two memoryless variants.

mod config;
mod params;
mod step;
mod variant;

pub use config::CellConfig;
pub use params::{init_params, CellParams, Gate, GateIds};
pub use step::{BoundCell, CellState, StateNodes};
pub use variant::{param_count, CellVariant};
