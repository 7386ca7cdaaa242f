mod common;

use std::sync::Arc;

use acsa_core::datasets::DatasetKind;
use acsa_core::llm::{run_multihop_thread, DecodeParams, LlmClient, MockReply, ResponseCache, ScriptedMock};
use acsa_core::llm::{ClientConfig, MockFixture, MockRule, RetryPolicy};
use acsa_core::parse::{parse_generation, MappingOptions};
use acsa_core::prompts::{self, FewShotExample, PromptMode};
use acsa_core::{all_element_orders, CategorySchema, ElementOrder};
use common::{json_fixture, pair_list, read_fixture};

fn restaurant_schema(labels: &serde_json::Value) -> CategorySchema {
    let labels: Vec<String> = labels.as_array().unwrap().iter().map(|l| l.as_str().unwrap().to_string()).collect();
    CategorySchema::new("restaurant", labels).unwrap()
}

const TEXT: &str = "We went again and sat at the bar this time, I had 5 pints of guinness and not one buy-back, I ordered a basket of onion rings and there were about 5 in the basket, the rest was filled with crumbs, the chili was not even edible.";

#[test]
fn system_instruction_matches_transcription() {
    assert_eq!(prompts::system_instruction(), read_fixture("prompts/system.txt").trim_end_matches('\n'));
}

#[test]
fn enumerated_aoc_prompt_matches_transcription() {
    let fx = json_fixture("prompts/multihop_aoc_restaurant.json");
    let schema = restaurant_schema(&fx["labels"]);
    let order: ElementOrder = "AOC".parse().unwrap();
    let bundle = prompts::build_enumerated(order, TEXT, &schema, "restaurant").unwrap();
    assert_eq!(bundle.user_turns.len(), 1);
    assert_eq!(
        bundle.user_turns[0],
        read_fixture("prompts/enumerated_aoc_restaurant.txt").trim_end_matches('\n')
    );
    assert_eq!(bundle.system, prompts::system_instruction());
}

#[test]
fn mams_builtin_schema_is_the_printed_list() {
    let fx = json_fixture("prompts/multihop_aoc_restaurant.json");
    let printed: Vec<&str> = fx["labels"].as_array().unwrap().iter().map(|l| l.as_str().unwrap()).collect();
    assert_eq!(DatasetKind::Mams.builtin_labels().unwrap(), printed.as_slice());
}

#[test]
fn multihop_turns_match_transcription() {
    let fx = json_fixture("prompts/multihop_aoc_restaurant.json");
    let schema = restaurant_schema(&fx["labels"]);
    let order: ElementOrder = fx["order"].as_str().unwrap().parse().unwrap();
    let bundle = prompts::build_multihop(order, fx["text"].as_str().unwrap(), &schema, "restaurant").unwrap();
    let turns = fx["turns"].as_array().unwrap();
    assert_eq!(bundle.user_turns.len(), turns.len());
    for (built, t) in bundle.user_turns.iter().zip(turns) {
        assert_eq!(built, t["user"].as_str().unwrap());
    }
}

#[test]
fn multihop_thread_replays_the_printed_conversation() {
    let fx = json_fixture("prompts/multihop_aoc_restaurant.json");
    let schema = restaurant_schema(&fx["labels"]);
    let order: ElementOrder = fx["order"].as_str().unwrap().parse().unwrap();
    let bundle = prompts::build_multihop(order, fx["text"].as_str().unwrap(), &schema, "restaurant").unwrap();
    // each rule keys on a phrase unique to its user turn
    let keys = ["list all word sequences that denote an aspect", "link to an opinion", "List the categories", "Lastly"];
    let rules = fx["turns"]
        .as_array()
        .unwrap()
        .iter()
        .zip(keys)
        .map(|(t, k)| MockRule {
            contains: vec![k.to_string()],
            context: Vec::new(),
            agent: None,
            reply: MockReply::uniform(t["assistant"].as_str().unwrap(), -0.1),
        })
        .collect();
    let mock = Arc::new(ScriptedMock::new(MockFixture { rules, default: None }));
    let client = LlmClient::new(
        mock.clone(),
        Arc::new(ResponseCache::in_memory()),
        ClientConfig {
            experiment_mode: true,
            retry: RetryPolicy::none(),
        },
    );
    let responses = run_multihop_thread(&client, &bundle, "mock", &DecodeParams::default()).unwrap();
    assert_eq!(responses.len(), 4);
    assert_eq!(mock.calls(), 4);
    let parsed = parse_generation(&responses[3].text, &schema, MappingOptions::default()).unwrap();
    let got: Vec<_> = parsed.pairs.iter().map(|p| (p.mapped_category.clone(), p.mapped_polarity)).collect();
    let want: Vec<_> = pair_list(&fx["final_pairs"]).0.into_iter().map(|p| (p.category, p.polarity)).collect();
    assert_eq!(got, want);
}

#[test]
fn fewshot_prompt_has_one_section_per_example() {
    let fx = json_fixture("prompts/multihop_aoc_restaurant.json");
    let schema = restaurant_schema(&fx["labels"]);
    let examples: Vec<FewShotExample> = (0..10)
        .map(|i| FewShotExample {
            text: format!("review number {i}"),
            gold: pair_list(&serde_json::json!([["food", "positive"]])),
        })
        .collect();
    for order in all_element_orders() {
        let bundle = prompts::build(PromptMode::Fewshot, order, TEXT, &schema, "restaurant", &examples).unwrap();
        let prompt = &bundle.user_turns[0];
        let sections = prompt.lines().filter(|l| l.starts_with("Example ")).count();
        assert_eq!(sections, 10, "{order}");
        assert_eq!(prompts::detect_order(prompt), Some(order));
    }
}
