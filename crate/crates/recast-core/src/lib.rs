//! Block-wise network recasting.
//!
//! Transforms a trained convolutional teacher network into a student of a
//! different architecture by recasting one block at a time: each target
//! block (together with a rebuilt next block) is trained to mimic the
//! teacher's activations, then the whole student is fine-tuned with
//! knowledge distillation. An analytic cost model counts parameters,
//! multiplications and activation loads so transformations can be judged
//! by the quantities that actually drive inference time.

pub mod cost;
pub mod data;
pub mod engine;
pub mod net;
pub mod tensor;
