//! Prompt composition for the chain-of-thought agents.
//!
//! Each element (aspect, opinion, category) has two instruction templates:
//! one used when it opens the chain (it then introduces the review text with
//! "Given the following text") and one used when it follows another element
//! (it then refers back to what the previous step detected). An agent's
//! prompt is the chain of these templates in its [`ElementOrder`].
//!
//! Three prompt families share the templates:
//! * enumerated: one user turn with numbered steps and answer slots,
//! * multi-hop: one user turn per step plus a final list request,
//! * few-shot: one user turn with BEGIN COT / END COT markers and worked
//!   examples whose reasoning is elided.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CategorySchema, Element, ElementOrder, PairList};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("category schema is empty")]
    EmptySchema,
    #[error("review text is empty")]
    EmptyText,
    #[error("few-shot prompts need at least one example; use the enumerated prompt instead")]
    NoExamples,
    #[error("at most {max} few-shot examples are supported, got {got}")]
    TooManyExamples { max: usize, got: usize },
}

pub const MAX_FEWSHOT_EXAMPLES: usize = 10;

const SYSTEM_INSTRUCTION: &str = "You are a Natural Language Processing assistant, expert in Aspect-Based Sentiment Analysis. I want you to force yourself to pick words that you are being asked and only them, without explanations or reasoning. If you are unsure, put the most probable. Now follow the following steps:";

const ENUMERATED_SEPARATOR: &str = "-----------------------------------";
const SECTION_RULE: &str = "----------------------------";
const COT_RULE: &str = "-------";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Enumerated,
    Multihop,
    Fewshot,
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "enumerated" => Ok(PromptMode::Enumerated),
            "multihop" | "multi-hop" => Ok(PromptMode::Multihop),
            "fewshot" | "few-shot" => Ok(PromptMode::Fewshot),
            other => Err(format!("unknown prompt mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub text: String,
    pub gold: PairList,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user_turns: Vec<String>,
    pub order: ElementOrder,
    pub mode: PromptMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fewshot_examples: Option<Vec<FewShotExample>>,
}

/// The role-playing system message shared by all prompt families.
pub fn system_instruction() -> &'static str {
    SYSTEM_INSTRUCTION
}

/// `[a, b]` or `['a', 'b']` in schema order.
pub fn render_schema_list(schema: &CategorySchema, quoted: bool) -> String {
    let items: Vec<String> = schema
        .labels()
        .iter()
        .map(|l| if quoted { format!("'{l}'") } else { l.clone() })
        .collect();
    format!("[{}]", items.join(", "))
}

/// How the category step presents the label list.
struct SchemaStyle {
    quoted: bool,
    /// Text between "is:" and the list.
    lead: &'static str,
    trailing: &'static str,
}

const ENUMERATED_STYLE: SchemaStyle = SchemaStyle {
    quoted: false,
    lead: " ",
    trailing: ".",
};
const MULTIHOP_STYLE: SchemaStyle = SchemaStyle {
    quoted: true,
    lead: "\n",
    trailing: "",
};
const FEWSHOT_STYLE: SchemaStyle = SchemaStyle {
    quoted: true,
    lead: "\n\n",
    trailing: ".",
};

/// Instruction text for one element at one position of the chain.
fn element_step(
    element: Element,
    previous: Option<Element>,
    text: &str,
    schema: &CategorySchema,
    domain: &str,
    style: &SchemaStyle,
) -> String {
    let schema_line = format!(
        "The list of possible categories is:{}{}{}",
        style.lead,
        render_schema_list(schema, style.quoted),
        style.trailing
    );
    match (element, previous) {
        (Element::Aspect, None) => format!(
            "Given the following text, list all word sequences that denote an aspect term of the {domain} domain:\n\"{text}\""
        ),
        (Element::Aspect, Some(prev)) => format!(
            "List all word sequences that denote an aspect term of the {domain} domain from the {} detected.",
            prev.plural().to_lowercase()
        ),
        (Element::Opinion, None) => format!(
            "Given the following text, list all word sequences that denote or link to an opinion about the {domain} domain:\n\"{text}\""
        ),
        (Element::Opinion, Some(prev)) => format!(
            "List all word sequences that denote or link to an opinion from the {} detected.",
            prev.plural().to_lowercase()
        ),
        (Element::Category, None) => format!(
            "Given the following text, list the categories of the {domain} domain that it discusses:\n\"{text}\"\n{schema_line}"
        ),
        (Element::Category, Some(prev)) => format!(
            "List the categories from the {} detected. {schema_line}",
            prev.plural().to_lowercase()
        ),
    }
}

fn chain_steps(order: ElementOrder, text: &str, schema: &CategorySchema, domain: &str, style: &SchemaStyle) -> Vec<String> {
    let els = order.elements();
    els.iter()
        .enumerate()
        .map(|(i, &e)| element_step(e, i.checked_sub(1).map(|p| els[p]), text, schema, domain, style))
        .collect()
}

fn check_inputs(text: &str, schema: &CategorySchema) -> Result<(), PromptError> {
    if schema.is_empty() {
        return Err(PromptError::EmptySchema);
    }
    if text.is_empty() {
        return Err(PromptError::EmptyText);
    }
    Ok(())
}

/// Single prompt with numbered steps, numbered answer slots and the closing
/// list-of-tuples request.
pub fn build_enumerated(
    order: ElementOrder,
    text: &str,
    schema: &CategorySchema,
    domain: &str,
) -> Result<PromptBundle, PromptError> {
    check_inputs(text, schema)?;
    let mut lines = Vec::new();
    for (i, step) in chain_steps(order, text, schema, domain, &ENUMERATED_STYLE).into_iter().enumerate() {
        lines.push(format!("{}. {step}", i + 1));
    }
    lines.push(ENUMERATED_SEPARATOR.to_string());
    for (i, e) in order.elements().iter().enumerate() {
        lines.push(format!("{}. {}:", i + 1, e.plural()));
    }
    lines.push("Lastly, please provide one Python-type list of tuples such as".to_string());
    lines.push("\"[('example_category_1', 'positive'), ('example_category_2', 'negative'), ...]\"".to_string());
    lines.push(
        "where the categories are provided above and the sentiment is either positive, neutral, or negative, based on the extracted opinions."
            .to_string(),
    );
    Ok(PromptBundle {
        system: SYSTEM_INSTRUCTION.to_string(),
        user_turns: vec![lines.join("\n")],
        order,
        mode: PromptMode::Enumerated,
        fewshot_examples: None,
    })
}

/// Four user turns: one per element, then the final list request. The runner
/// interleaves the assistant replies.
pub fn build_multihop(
    order: ElementOrder,
    text: &str,
    schema: &CategorySchema,
    domain: &str,
) -> Result<PromptBundle, PromptError> {
    check_inputs(text, schema)?;
    let mut turns = chain_steps(order, text, schema, domain, &MULTIHOP_STYLE);
    turns.push(
        "Lastly, please provide one Python type list of tuples such as:\n\
         [('example_category_1', 'positive'), ('example_category_2', 'negative'), ...]\n\
         that you identified. Where the categories are provided above and the sentiment is either 'positive', 'neutral' or 'negative', based on the extracted opinions."
            .to_string(),
    );
    Ok(PromptBundle {
        system: SYSTEM_INSTRUCTION.to_string(),
        user_turns: turns,
        order,
        mode: PromptMode::Multihop,
        fewshot_examples: None,
    })
}

fn cot_block(order: ElementOrder) -> String {
    let slots: Vec<String> = order.elements().iter().map(|e| format!("{}: ...", e.plural())).collect();
    format!("{COT_RULE}\nBEGIN COT\n\n{}\nEND COT\n{COT_RULE}", slots.join("\n"))
}

fn derivation_note(order: ElementOrder) -> String {
    format!(
        "• Where the categories derive from step {} Categories in COT and each associated category's sentiment is either 'positive', 'neutral' or 'negative', based on step {} the extracted Opinions.",
        order.step_of(Element::Category),
        order.step_of(Element::Opinion)
    )
}

/// Few-shot prompt with BEGIN COT / END COT markers. Example reasoning is
/// elided; only the example's gold list is shown.
pub fn build_fewshot(
    order: ElementOrder,
    text: &str,
    schema: &CategorySchema,
    domain: &str,
    examples: &[FewShotExample],
) -> Result<PromptBundle, PromptError> {
    check_inputs(text, schema)?;
    if examples.is_empty() {
        return Err(PromptError::NoExamples);
    }
    if examples.len() > MAX_FEWSHOT_EXAMPLES {
        return Err(PromptError::TooManyExamples {
            max: MAX_FEWSHOT_EXAMPLES,
            got: examples.len(),
        });
    }
    let steps = chain_steps(order, text, schema, domain, &FEWSHOT_STYLE).join("\n\n");
    let list_example = "[('example_category_1', 'negative'), ('example_category_2', 'positive')]";
    let mut parts: Vec<String> = vec![
        steps.clone(),
        "• The reasoning must appear only between BEGIN COT and END COT.".into(),
        cot_block(order),
        format!(
            "• Outside those markers print one PYTHON LIST of tuples, exactly like\n{list_example} that you identify in your three step COT reasoning."
        ),
        derivation_note(order),
        format!("{SECTION_RULE}\nEXAMPLES\n{SECTION_RULE}"),
    ];
    for (i, ex) in examples.iter().enumerate() {
        parts.push(format!(
            "Example {}\nReview: \"{}\"\n{}\nPYTHON LIST: {}",
            i + 1,
            ex.text,
            cot_block(order),
            ex.gold.to_python_literal()
        ));
    }
    parts.push(format!("{SECTION_RULE}\nNOW SOLVE THE NEW REVIEW\n{SECTION_RULE}"));
    parts.push("• Please complete the below CoT and end it with END COT.".into());
    parts.push(steps);
    parts.push(format!(
        "• After completing the three step COT reasoning and closing it with END COT, print the PYTHON LIST of tuples, exactly like {list_example} that you identify in your three step COT reasoning."
    ));
    parts.push(derivation_note(order));
    parts.push("• DO NOT FORGET the PYTHON LIST.".into());
    parts.push(format!(
        "{COT_RULE}\nBEGIN COT\n\n{}: ...",
        order.elements()[0].plural()
    ));
    Ok(PromptBundle {
        system: SYSTEM_INSTRUCTION.to_string(),
        user_turns: vec![parts.join("\n\n")],
        order,
        mode: PromptMode::Fewshot,
        fewshot_examples: Some(examples.to_vec()),
    })
}

fn element_from_plural(s: &str) -> Option<Element> {
    [Element::Aspect, Element::Category, Element::Opinion]
        .into_iter()
        .find(|e| e.plural() == s)
}

/// Recovers the element order from an enumerated or few-shot prompt (its
/// answer slots or COT block). Multi-hop turns carry one step each and give
/// `None`.
pub fn detect_order(prompt: &str) -> Option<ElementOrder> {
    let lines: Vec<&str> = prompt.lines().collect();
    let slot = |line: &str, n: usize| -> Option<Element> {
        let rest = line.strip_prefix(&format!("{n}. "))?;
        element_from_plural(rest.strip_suffix(':')?)
    };
    let cot = |line: &str| -> Option<Element> { element_from_plural(line.strip_suffix(": ...")?) };
    for w in lines.windows(3) {
        if let (Some(a), Some(b), Some(c)) = (slot(w[0], 1), slot(w[1], 2), slot(w[2], 3)) {
            return ElementOrder::new([a, b, c]).ok();
        }
        if let (Some(a), Some(b), Some(c)) = (cot(w[0]), cot(w[1]), cot(w[2])) {
            return ElementOrder::new([a, b, c]).ok();
        }
    }
    None
}

/// Dispatches on `mode`; `examples` is only consulted for few-shot.
pub fn build(
    mode: PromptMode,
    order: ElementOrder,
    text: &str,
    schema: &CategorySchema,
    domain: &str,
    examples: &[FewShotExample],
) -> Result<PromptBundle, PromptError> {
    match mode {
        PromptMode::Enumerated => build_enumerated(order, text, schema, domain),
        PromptMode::Multihop => build_multihop(order, text, schema, domain),
        PromptMode::Fewshot => build_fewshot(order, text, schema, domain, examples),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{all_element_orders, Pair, Polarity};

    #[test]
    fn order_detection_round_trips() {
        let schema = mams();
        let ex = [FewShotExample {
            text: "Great food.".into(),
            gold: PairList(vec![Pair::new("food", Polarity::Positive)]),
        }];
        for order in all_element_orders() {
            let e = build_enumerated(order, "1. Aspects: none", &schema, "restaurant").unwrap();
            assert_eq!(detect_order(&e.user_turns[0]), Some(order));
            let f = build_fewshot(order, "t", &schema, "restaurant", &ex).unwrap();
            assert_eq!(detect_order(&f.user_turns[0]), Some(order));
            let m = build_multihop(order, "t", &schema, "restaurant").unwrap();
            assert_eq!(detect_order(&m.user_turns[0]), None);
        }
    }

    fn mams() -> CategorySchema {
        CategorySchema::new(
            "restaurant",
            ["menu", "service", "price", "ambience", "place", "staff", "miscellaneous", "food"],
        )
        .unwrap()
    }

    #[test]
    fn system_text() {
        let s = system_instruction();
        assert!(s.contains("Aspect-Based Sentiment Analysis"));
        assert!(s.ends_with("follow the following steps:"));
        assert_eq!(s, system_instruction());
    }

    #[test]
    fn schema_rendering() {
        let s = CategorySchema::new("r", ["food", "menu"]).unwrap();
        assert_eq!(render_schema_list(&s, false), "[food, menu]");
        let s = CategorySchema::new("r", ["food"]).unwrap();
        assert_eq!(render_schema_list(&s, true), "['food']");
        let s = CategorySchema::new("r", ["menu", "food"]).unwrap();
        assert_eq!(render_schema_list(&s, false), "[menu, food]");
    }

    #[test]
    fn enumerated_structure_for_every_order() {
        let text = "The pasta was great but the waiter was rude.";
        for order in all_element_orders() {
            let b = build_enumerated(order, text, &mams(), "restaurant").unwrap();
            assert_eq!(b.user_turns.len(), 1);
            let p = &b.user_turns[0];
            assert_eq!(p.matches(text).count(), 1);
            let numbered: Vec<&str> = p
                .lines()
                .filter(|l| l.starts_with("1. ") || l.starts_with("2. ") || l.starts_with("3. "))
                .collect();
            assert_eq!(numbered.len(), 6, "{p}");
            assert!(numbered[0].contains("Given the following text"));
            let cat_step = order.step_of(Element::Category);
            let start = p.find(numbered[cat_step - 1]).unwrap();
            let end = p.find(ENUMERATED_SEPARATOR).unwrap();
            let block = &p[start..end];
            let block = match block[1..].find(&format!("\n{}. ", cat_step + 1)) {
                Some(next) => &block[..next + 1],
                None => block,
            };
            assert!(block.contains("The list of possible categories is: [menu, service, price"), "{block}");
            let opinion_step = p.find(&format!("{}. ", order.step_of(Element::Opinion))).unwrap();
            assert!(opinion_step < p.find("based on the extracted opinions").unwrap());
            assert_eq!(p, &build_enumerated(order, text, &mams(), "restaurant").unwrap().user_turns[0]);
        }
    }

    #[test]
    fn errors() {
        let empty = CategorySchema::new("r", Vec::<String>::new()).unwrap();
        let o = all_element_orders()[0];
        assert_eq!(build_enumerated(o, "x", &empty, "r"), Err(PromptError::EmptySchema));
        assert_eq!(build_multihop(o, "", &mams(), "r"), Err(PromptError::EmptyText));
        assert_eq!(build_fewshot(o, "x", &mams(), "r", &[]), Err(PromptError::NoExamples));
        let many = vec![
            FewShotExample {
                text: "t".into(),
                gold: PairList::default()
            };
            11
        ];
        assert!(matches!(build_fewshot(o, "x", &mams(), "r", &many), Err(PromptError::TooManyExamples { .. })));
    }

    #[test]
    fn multihop_turns() {
        for order in all_element_orders() {
            let b = build_multihop(order, "text", &mams(), "restaurant").unwrap();
            assert_eq!(b.user_turns.len(), 4);
            assert!(b.user_turns[0].contains("\"text\""));
            let cat = &b.user_turns[order.step_of(Element::Category) - 1];
            assert!(cat.contains("['menu', 'service'"));
            assert!(b.user_turns[3].contains("list of tuples"));
        }
    }

    #[test]
    fn fewshot_sections() {
        let examples = vec![
            FewShotExample {
                text: "Service was wonderful;".into(),
                gold: PairList(vec![Pair::new("SERVICE#GENERAL", Polarity::Positive)]),
            },
            FewShotExample {
                text: "the food can be somewhat over the top spicy".into(),
                gold: PairList(vec![Pair::new("FOOD#QUALITY", Polarity::Negative)]),
            },
        ];
        let o: ElementOrder = "OCA".parse().unwrap();
        let b = build_fewshot(o, "Worst Service I Ever Had", &mams(), "restaurant", &examples).unwrap();
        let p = &b.user_turns[0];
        assert!(p.contains("Example 1\n") && p.contains("Example 2\n"));
        assert!(p.contains("PYTHON LIST: [('SERVICE#GENERAL', 'positive')]"));
        assert!(p.contains("NOW SOLVE THE NEW REVIEW"));
        assert!(p.contains("DO NOT FORGET the PYTHON LIST"));
        assert!(p.contains("step 2 Categories in COT"));
        assert!(p.contains("based on step 1 the extracted Opinions"));
        assert!(p.ends_with("BEGIN COT\n\nOpinions: ..."));
    }
}
