//! Array substrate, FFT pair, elementary kernels and reverse-mode
//! differentiation.

pub mod autodiff;
pub mod fft;
pub mod gradcheck;
pub mod kernels;
pub mod tensor;

pub use autodiff::{DiffValue, Gradients, Graph, Var};
pub use fft::{dft_oracle, fft_real_1d, ifft_real_1d, irfft_cols, power_spectrum, rfft_cols};
pub use gradcheck::{finite_diff_check, gradient, FiniteDiffReport};
pub use kernels::{depthwise_conv1d, layer_norm, matmul, silu, softmax_rows};
pub use tensor::{ComplexTensor, Tensor};
