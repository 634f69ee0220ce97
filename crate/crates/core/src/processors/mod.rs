//! Dataset loading, collators, prompt templates, instruction builders,
//! in-context assembly and knowledge prompts.

mod collate;
mod dataset;
mod icl;
mod instruction;
mod knowledge;
mod prompt;
pub mod synthetic;

pub use collate::{
    bio_tags, choices, collate_classification, collate_generation, collate_multichoice, collate_spans, collate_tokens,
    encode_pair,
};
pub use dataset::{
    load_dataset, load_jsonl, load_tsv, registered_datasets, save_dataset, Example, LabelSet, SpanLabel,
};
pub(crate) use dataset::char_slice;
pub use icl::{build_icl_context, IclContext};
pub use instruction::{
    build_extractive_instruction, build_inference_instruction, encode_instruction, EncodedInstruction,
    InferencePair, Instruction, InstructionSchema, InstructionStyle, OffsetMap, DEFAULT_EXTRACTIVE_PATTERN,
    DEFAULT_INFERENCE_PATTERN,
};
pub use knowledge::{build_knowledge_prompt, KnowledgeBase, Triple, KNOWLEDGE_SEPARATOR};
pub use prompt::{apply_template, PromptTemplate};
