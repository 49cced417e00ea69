//! Raw forward/adjoint kernels over [`Tensor`](crate::Tensor) buffers. The
//! graph layer in [`crate::graph`] records these and chains their adjoints.

pub(crate) mod conv;
pub(crate) mod sampling;
