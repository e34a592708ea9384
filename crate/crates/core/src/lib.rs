//! Unified instruction-prompt format for medical NLU tasks.
//!
//! Structured instances ([`types::NluInstance`]) are rendered into
//! instruction prompts ([`prompt`]), completions are read back
//! ([`parse`]), corpora are assembled under per-task budgets ([`corpus`]),
//! predictions are scored ([`metrics`]), an OpenAI-compatible endpoint is
//! driven for benchmark runs ([`infer`]), and fine-tuned weights are merged
//! back into their base with drop-and-rescale ([`dare`]).

pub mod corpus;
pub mod dare;
pub mod infer;
pub mod metrics;
pub mod parse;
pub mod prompt;
pub mod rng;
pub mod types;

pub use parse::{
    align_spans, choice_to_score, parse_choice_output, parse_token_output, ChoicePrediction,
    ParseError, PredictionRecord, TokenPrediction,
};
pub use prompt::{
    expand_label_name, ner_fewshot_preamble, render, render_sequence_classification, render_sts,
    render_token_classification, sample_negative_categories, shuffle_choice_order, Layout,
    PromptError, RenderOptions, RenderedPrompt, StsScale,
};
pub use types::{
    output_category, Canonical, ChoiceOption, ChoiceSet, EntityMention, Gold, LabelSet,
    NluInstance, OutputCategory, PromptPair, TaskKind,
};
