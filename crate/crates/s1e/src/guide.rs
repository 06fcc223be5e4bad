// mdbook cannot run its code listings as tests, so each chapter is included
// here as a hidden module's doc comment; `cargo test --doc` then compiles and
// runs every ```rust block in the book, keeping the guide in sync with the
// library.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/tensors-and-gradients.md")]
mod tensors_and_gradients {}

#[doc = include_str!("../../../book/src/shuffle-operators.md")]
mod shuffle_operators {}

#[doc = include_str!("../../../book/src/model-and-masks.md")]
mod model_and_masks {}

#[doc = include_str!("../../../book/src/residual-fusion.md")]
mod residual_fusion {}

#[doc = include_str!("../../../book/src/data-and-metrics.md")]
mod data_and_metrics {}

#[doc = include_str!("../../../book/src/running-experiments.md")]
mod running_experiments {}
