//! The guide's code snippets, compiled and executed by `cargo test --doc`,
//! so the book under `book/` cannot drift from the library.
#[cfg(doctest)]
mod chapters {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors-and-autodiff.md")]
    mod tensors_and_autodiff {}
    #[doc = include_str!("../../../book/src/convolution-and-normalization.md")]
    mod convolution_and_normalization {}
    #[doc = include_str!("../../../book/src/deformable-convolution.md")]
    mod deformable_convolution {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/generators-and-discriminators.md")]
    mod generators_and_discriminators {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/data-and-checkpoints.md")]
    mod data_and_checkpoints {}
    #[doc = include_str!("../../../book/src/training-and-cli.md")]
    mod training_and_cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
