//! Source-free domain adaptation on vector data.
//!
//! A frozen classifier trained on a labeled source domain is adapted to an
//! unlabeled target domain in three phases per epoch:
//!
//! 1. [`rsm`]: per-class entropy bookkeeping yields a threshold that picks
//!    reliable target samples, whose mean features become class prototypes.
//! 2. [`mvcl`]: augmented views are weighted, fused and clustered; samples
//!    receive the label of the nearest prototype, and a contrastive term ties
//!    the views of each sample together.
//! 3. [`filter`]: an attention-smoothed entropy threshold discards
//!    uncertain pseudo-labels before the cross-entropy term sees them.
//!
//! [`pipeline::adapt`] runs the loop; [`data`] supplies synthetic domain pairs.

pub mod data;
pub mod error;
pub mod filter;
pub mod model;
pub mod mvcl;
pub mod numeric;
pub mod pipeline;
pub mod rsm;

pub use error::{Error, Result};
