//! Runs every code block in the book as a doc-test, keeping the guide in
//! sync with the library. `cargo test --doc` picks these up; nothing here
//! exists in normal builds.

#![allow(unused)]

#[cfg(doctest)]
macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!($path)]
        pub mod $name {}
    };
}

#[cfg(doctest)]
chapter!(introduction, "../../../book/src/introduction.md");
#[cfg(doctest)]
chapter!(synthetic_data, "../../../book/src/synthetic-data.md");
#[cfg(doctest)]
chapter!(prompt_format, "../../../book/src/prompt-format.md");
#[cfg(doctest)]
chapter!(tiny_model, "../../../book/src/tiny-model.md");
#[cfg(doctest)]
chapter!(likelihood_scoring, "../../../book/src/likelihood-scoring.md");
#[cfg(doctest)]
chapter!(demonstration_selection, "../../../book/src/demonstration-selection.md");
#[cfg(doctest)]
chapter!(training_pipeline, "../../../book/src/training-pipeline.md");
#[cfg(doctest)]
chapter!(evaluation, "../../../book/src/evaluation.md");
#[cfg(doctest)]
chapter!(command_line, "../../../book/src/command-line.md");
