//! Dense network substrate used by the trajectory models.
//!
//! Everything here works on row-major `f64` matrices. A [`Graph`] records the
//! forward computation as a tape; [`Graph::backward`] replays it in reverse and
//! returns gradients for parameters and for any tracked inputs. Training code
//! owns the parameters in a [`ParamStore`] and updates them with [`Adam`].

mod adam;
mod blob;
mod error;
mod functional;
mod gemm;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use blob::{read_tensor_blob, write_tensor_blob, BLOB_MAGIC};
pub use error::NnError;
pub use functional::{
    dense_forward, l2_normalize, maxpool_set, mse, relu, triplet_cosine_loss,
};
pub use graph::{Activation, Gradients, Graph, NodeId};
pub use params::{Dense, ParamId, ParamStore};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, NnError>;
