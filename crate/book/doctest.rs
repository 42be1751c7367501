// mdbook cannot run snippets that depend on workspace crates, so every
// chapter is included as a module doc and `cargo test --doc -p mkt-book`
// runs its code blocks. One module per chapter keeps failures traceable.

#[doc = include_str!("src/intro.md")]
pub mod intro {}
#[doc = include_str!("src/tokenizers.md")]
pub mod tokenizers {}
#[doc = include_str!("src/alignment.md")]
pub mod alignment {}
#[doc = include_str!("src/model.md")]
pub mod model {}
#[doc = include_str!("src/knowledge.md")]
pub mod knowledge {}
#[doc = include_str!("src/protocol.md")]
pub mod protocol {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}
