//! EEG trial classification and class-conditioned text generation on the CPU.
//!
//! Five-channel recordings are band-limited and denoised ([`dsp`]), encoded
//! by a conv/LSTM network ([`encoder`]), classified by a dense head
//! ([`classifier`]) and trained with Adam ([`trainer`]). The predicted class
//! fills a prompt that a language model completes ([`textgen`]), and the
//! completions are scored by perplexity.
//!
//! Gradients come from the reverse-mode tape in [`tensor`].
//!
//! ```
//! use neurotext::dsp::{assemble_epochs, PreprocessConfig};
//! use neurotext::ingest::{synth_generate, LabelMap, SynthSpec};
//! use neurotext::model::{Model, ModelConfig};
//! use neurotext::tensor::Precision;
//!
//! let labels = LabelMap::for_task(2)?;
//! let trials = synth_generate(&SynthSpec::new(2, 2, 0), &labels)?;
//! let epochs = assemble_epochs(&trials, &PreprocessConfig::default())?;
//! let model = Model::init(ModelConfig::desk(2), 0, Precision::Single)?;
//! let preds = model.predict(&epochs, 4, Some(&labels))?;
//! assert_eq!(preds.len(), 4);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod container;
pub mod dsp;
pub mod encoder;
pub mod ingest;
pub mod model;
pub mod params;
pub mod tensor;
pub mod textgen;
pub mod trainer;

// The guide's code blocks run as doc-tests through these modules.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    mod preprocessing {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/textgen.md")]
    mod textgen {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
