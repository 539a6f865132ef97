//! Versioned prompt assets and their rendering.

use crate::types::{InContextExample, Prompt, ReasoningTrace, Trigger};

/// Bump whenever an asset under `prompts/` changes.
pub const PROMPT_VERSION: &str = "1";

const SCAFFOLD: &str = include_str!("../prompts/scaffold.txt");
const INFERENCE: &str = include_str!("../prompts/inference.txt");
const CONSTRUCTION: &str = include_str!("../prompts/construction.txt");
const REFINEMENT: &str = include_str!("../prompts/refinement.txt");
const DECODE: &str = include_str!("../prompts/decode.txt");
const DISTILL: &str = include_str!("../prompts/distill.txt");
const DEFAULT_EXAMPLES: &str = include_str!("../prompts/examples.json");

/// Header line that introduces template guidance in a refinement prompt.
pub const TEMPLATE_HEADER: &str = "Reasoning template:";

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.replace("{scaffold}", SCAFFOLD.trim_end());
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out.trim_end().to_string()
}

pub fn default_examples() -> Vec<InContextExample> {
    serde_json::from_str(DEFAULT_EXAMPLES).expect("bundled examples parse")
}

/// Inference prompt: scaffold and trigger, no in-context examples.
pub fn inference(trigger: &Trigger) -> Prompt {
    Prompt::inference(fill(INFERENCE, &[("trigger", &trigger.describe())]))
}

/// Construction prompt: scaffold plus worked examples. The trigger and its
/// gold instruction are appended per request by [`construction_request`].
pub fn construction(examples: Vec<InContextExample>) -> Prompt {
    Prompt::construction(fill(CONSTRUCTION, &[]), examples)
}

pub fn construction_request(base: &Prompt, trigger: &Trigger, gold_surface: &str) -> Prompt {
    Prompt {
        body: format!(
            "{}\n\nTrigger: {}\nCorrect instruction: {gold_surface}",
            base.body,
            trigger.describe()
        ),
        in_context_examples: base.in_context_examples.clone(),
    }
}

/// Refinement prompt: template steps as a numbered list under a fixed header.
pub fn refinement(template_name: &str, steps: &[String], trigger: &Trigger) -> Prompt {
    let numbered = steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    Prompt::inference(fill(
        REFINEMENT,
        &[
            ("template_name", template_name),
            ("template_steps", &numbered),
            ("trigger", &trigger.describe()),
        ],
    ))
}

/// Prompt for the constrained region: everything up to and including the
/// closing reasoning delimiter.
pub fn decode(trigger: &Trigger, reasoning: &ReasoningTrace) -> Prompt {
    Prompt::inference(fill(
        DECODE,
        &[("trigger", &trigger.describe()), ("reasoning", &reasoning.raw)],
    ))
}

pub fn distill(medoid: &ReasoningTrace, cluster_size: usize) -> Prompt {
    Prompt::inference(fill(
        DISTILL,
        &[("cluster_size", &cluster_size.to_string()), ("reasoning", &medoid.raw)],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inference_prompt_has_scaffold_but_no_examples() {
        let t = Trigger::text("t", "call 555-0100").unwrap();
        let p = inference(&t);
        assert!(!p.is_construction());
        assert!(p.body.contains("Entity Recognition:"));
        assert!(p.body.contains("Instruction Generation:"));
        assert!(p.body.ends_with("Trigger: [text] call 555-0100"));
    }

    #[test]
    fn refinement_numbers_steps() {
        let t = Trigger::text("t", "x").unwrap();
        let p = refinement("Hotel", &["Extract hotel name".into(), "Identify check-out date".into()], &t);
        assert!(p.body.contains("Reasoning template: Hotel\n1. Extract hotel name\n2. Identify check-out date"));
    }

    #[test]
    fn construction_carries_gold_and_examples() {
        let t = Trigger::text("t", "x").unwrap();
        let p = construction_request(&construction(default_examples()), &t, "save address");
        assert!(p.is_construction());
        assert!(p.render().contains("Correct instruction: save address"));
        assert_eq!(p.in_context_examples.as_ref().unwrap().len(), 2);
        for ex in default_examples() {
            ReasoningTrace::parse(&ex.reasoning).unwrap();
        }
    }

    #[test]
    fn decode_prompt_ends_after_reasoning() {
        let t = Trigger::text("t", "x").unwrap();
        let r = ReasoningTrace::parse("<REASONING> a </REASONING>").unwrap();
        assert!(decode(&t, &r).body.ends_with("</REASONING>\nInstruction:"));
    }
}
