//! Weakly supervised training triplets from attribute labels: image pairs whose
//! labels differ by one change, captioned with simple templates ("black not red").

pub mod catalog;
pub mod change;
pub mod example;
pub mod index;

pub use catalog::{canonical, AttributeCatalog, AttributeKey, CatalogLine, Labels, Schema};
pub use change::{
    applicable_changes, generate_caption, parse_caption, render_caption, CaptionTemplates,
    Change, SampleMode,
};
pub use example::{load_examples, save_examples, ExampleSource, TrainingExample};
pub use index::{
    build_index, generate_epoch, sample_pair, validate_example, AttributeIndex, EpochOptions,
    SampledPair, MAX_CONSECUTIVE_RETRIES,
};
