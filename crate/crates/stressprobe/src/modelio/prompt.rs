//! Bit-exact prompt rendering.
//!
//! The template bytes are pinned by golden-file tests; any change here is
//! a breaking change for cached responses (the prompt participates in the
//! cache key).

use crate::perturb::{PerturbedInstance, PromptMode};

const HEADER: &str = "You are a helpful medical assistant that answers multiple choice questions about the provided image. The following is a multiple choice question (with answers).";

const DIRECT_SUFFIX: &str = "Please only answer with the index and content of the option.";

const COT_SUFFIX: &str = "Let us think step by step, enclosing the thought process within <thinking> and </thinking>. Provide answer with the index and content of the option, and place it within <answer> and </answer>.";

/// A rendered prompt: the text body plus ordered image attachments
/// (paths as referenced by the instance; empty under TEXT_ONLY).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub images: Vec<String>,
}

/// Expand the multiple-choice template for an instance. Pure function;
/// byte-identical output for identical inputs.
pub fn render_prompt(instance: &PerturbedInstance, mode: PromptMode) -> Prompt {
    let mut text = String::new();
    text.push_str(HEADER);
    text.push('\n');
    text.push_str("Question: ");
    text.push_str(&instance.stem);
    text.push('\n');
    text.push_str("Options:");
    for option in &instance.options_after {
        text.push('\n');
        text.push_str(&format!("{}. {}", option.label, option.text));
    }
    text.push_str("\n\n");
    text.push_str(match mode {
        PromptMode::Direct => DIRECT_SUFFIX,
        PromptMode::Cot => COT_SUFFIX,
    });
    Prompt {
        text,
        images: instance.images_after.clone(),
    }
}
