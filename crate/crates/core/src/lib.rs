//! Lipschitz margin training for fully-connected classifiers.
//!
//! The crate trains MLPs so that their logit margins dominate a certified
//! Lipschitz bound, certifies ℓ2 robustness from those margins, and checks
//! the certificates empirically with a Carlini–Wagner ℓ2 attack.
//!
//! * [`tensor`]: dense tensors and a reverse-mode tape
//! * [`model`]: the ReLU MLP and its `LMTW` weight file
//! * [`lipschitz`]: spectral-norm products by power iteration
//! * [`training`]: baseline, LMT and LC-LMT training loops
//! * [`certify`]: margins, certified radii, certificate checks
//! * [`attack`]: CW-L2 and accuracy-vs-perturbation curves
//! * [`mnist`]: IDX loading and seeded batching
//! * [`experiment`]: the `train`/`certify`/`attack`/`reproduce` commands
//!
//! See the `examples/` directory for one runnable program per capability.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod certify;
pub mod error;
pub mod experiment;
pub mod lipschitz;
pub mod mnist;
pub mod model;
pub mod optim;
pub mod report;
pub mod tensor;
pub mod training;

pub use attack::{AttackConfig, AttackResult};
pub use certify::{Certification, MarginReport};
pub use error::{Error, Result};
pub use lipschitz::{LipschitzEstimate, LipschitzMode};
pub use mnist::{Dataset, Split};
pub use model::MlpModel;
pub use tensor::{Tape, Tensor, Var};
pub use training::{EpochMetrics, Strategy, TrainConfig};
