//! Compiles the guide's snippets as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}

#[doc = include_str!("../../../book/src/prompting.md")]
pub mod prompting {}

#[doc = include_str!("../../../book/src/orchestration.md")]
pub mod orchestration {}

#[doc = include_str!("../../../book/src/posthoc.md")]
pub mod posthoc {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
