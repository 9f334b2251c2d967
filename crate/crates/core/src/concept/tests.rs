use std::sync::Arc;

use super::*;
use crate::gateway::{Backend, MockLlm};

const TUNA_DESCRIPTION: &str = "Visual concept definition: an image of gourmet tuna, such as seared ahi. \
     It does not include canned tuna or a tuna sandwich.";

fn tuna() -> Concept {
    Concept::new("gourmet tuna", TUNA_DESCRIPTION).unwrap()
}

fn engine(llm: MockLlm) -> ConceptEngine {
    ConceptEngine::new(Arc::new(Backend::mock_llm(llm, 4).unwrap()))
}

fn list(outer: &str, tag: &str, items: &[&str]) -> String {
    render_tagged_list(outer, tag, &items.iter().map(|s| s.to_string()).collect::<Vec<_>>())
}

#[test]
fn description_is_passed_through_or_generated() {
    let t = PromptTemplates::default();
    let mut llm = MockLlm::new(7);
    llm.script(&t.description_prompt("pie chart").unwrap(), "Sure.\nVisual concept definition: a chart shaped like a pie.");
    let e = engine(llm);
    assert_eq!(e.describe("pie chart", Some("given")).unwrap(), "given");
    assert_eq!(
        e.generate_description("pie chart").unwrap(),
        "Visual concept definition: a chart shaped like a pie."
    );
    assert!(matches!(e.generate_description("  "), Err(ConceptError::Precondition(_))));
    assert!(matches!(e.generate_description("other"), Err(ConceptError::Gateway(_))));
}

#[test]
fn description_without_marker_is_unparseable() {
    assert!(matches!(parse_description("just some text"), Err(ConceptError::Unparseable(_))));
}

#[test]
fn positive_attribute_parsing() {
    let attrs =
        parse_positive_attributes(&list("positiveAttributes", "attribute", &["contains tuna", "Contains  tuna!", "plated"]))
            .unwrap();
    assert_eq!(attrs.iter().map(|a| a.id.as_str()).collect::<Vec<_>>(), vec!["contains_tuna", "plated"]);
    assert!(matches!(
        parse_positive_attributes("<positiveAttributes></positiveAttributes>"),
        Err(ConceptError::EmptyList(_))
    ));
    assert!(matches!(parse_positive_attributes("no xml"), Err(ConceptError::Unparseable(_))));
}

#[test]
fn carve_out_sentinel() {
    let none = list("carveOutsInDescription", "carveOut", &[NOT_FOUND]);
    assert!(parse_carve_outs(&none).unwrap().is_empty());
    let two = list("carveOutsInDescription", "carveOut", &["canned tuna", "tuna sandwich"]);
    assert_eq!(parse_carve_outs(&two).unwrap(), vec!["canned tuna", "tuna sandwich"]);
    let mixed = list("carveOutsInDescription", "carveOut", &["canned tuna", NOT_FOUND]);
    assert!(parse_carve_outs(&mixed).is_err());
}

fn tuna_llm(decompose_to: &[&str]) -> MockLlm {
    let t = PromptTemplates::default();
    let c = tuna();
    let mut llm = MockLlm::new(3);
    llm.script(
        &t.positive_attributes_prompt(&c).unwrap(),
        list("positiveAttributes", "attribute", &["seared ahi tuna"]),
    );
    llm.script(
        &t.carve_outs_prompt(&c).unwrap(),
        list("carveOutsInDescription", "carveOut", &["canned tuna", "tuna sandwich"]),
    );
    llm.script(
        &t.decompose_prompt(&c, &Attribute::new("seared ahi tuna", Polarity::InScope, false)).unwrap(),
        list("atomicAttributes", "attribute", decompose_to),
    );
    llm
}

#[test]
fn initialize_decomposes_in_scope_only() {
    let c = engine(tuna_llm(&["tuna", "seared"])).initialize("gourmet tuna", Some(TUNA_DESCRIPTION)).unwrap();
    assert_eq!(c.id, "gourmet_tuna");
    assert_eq!(c.required_ids().into_iter().collect::<Vec<_>>(), vec!["seared", "tuna"]);
    assert!(c.positive_attributes.iter().all(|a| a.atomic && a.polarity == Polarity::InScope));
    assert_eq!(c.carve_outs.len(), 2);
    assert!(c.carve_outs.iter().all(|a| a.polarity == Polarity::OutOfScope));
}

#[test]
fn identity_decomposition_keeps_single_child() {
    let e = engine(tuna_llm(&["seared ahi tuna"]));
    let parent = Attribute::new("seared ahi tuna", Polarity::InScope, false);
    let children = e.decompose_attribute(&tuna(), &parent).unwrap();
    assert_eq!(children.len(), 1);
    assert_eq!(children[0].text, parent.text);
    assert!(children[0].atomic);
    assert!(matches!(
        e.decompose_attribute(&tuna(), &children[0]),
        Err(ConceptError::Precondition(_))
    ));
}

#[test]
fn question_generation_respects_flags() {
    let c = tuna().with_attributes(
        vec![Attribute::in_scope("tuna"), Attribute::in_scope("seared")],
        vec![Attribute::carve_out("canned tuna")],
    );
    let e = engine(MockLlm::new(0));
    let all = e.generate_questions(&c, &AnnotatorConfig::strategy(0).unwrap()).unwrap();
    assert_eq!(all.len(), 3);
    assert_eq!(all[2].expected_polarity, Polarity::OutOfScope);
    assert_eq!(all[0].text, "Is the following true of the image: tuna?");
    assert_eq!(parse_question_text(&all[2].text), Some((Polarity::OutOfScope, "canned tuna".into())));

    let mut no_negatives = AnnotatorConfig::strategy(0).unwrap();
    no_negatives.generate_negative_questions = false;
    assert_eq!(e.generate_questions(&c, &no_negatives).unwrap().len(), 2);

    let mut capped = AnnotatorConfig::strategy(2).unwrap();
    capped.fixed_question_count = Some(1);
    let q = e.generate_questions(&c, &capped).unwrap();
    assert_eq!(q.len(), 1);
    assert_eq!(q[0].bound_attribute, "tuna");

    capped.fixed_question_count = Some(0);
    assert!(matches!(e.generate_questions(&c, &capped), Err(ConceptError::Precondition(_))));
    let bare = tuna();
    assert!(matches!(
        e.generate_questions(&bare, &AnnotatorConfig::strategy(0).unwrap()),
        Err(ConceptError::NoAttributesAvailable)
    ));
}

#[test]
fn questions_from_description() {
    let c = tuna();
    let t = PromptTemplates::default();
    let response = render_description_questions(
        &[("tuna".into(), "Is there tuna?".into()), ("plated".into(), "Is it plated?".into())],
        &[("canned tuna".into(), "Is the tuna canned?".into())],
    );
    let llm = MockLlm::new(0).with_script(&t.questions_prompt(&c).unwrap(), response);
    let e = engine(llm);
    let cfg = AnnotatorConfig::strategy(3).unwrap();
    // strategy 3 has no out-of-scope questions
    let q = e.generate_questions(&c, &cfg).unwrap();
    assert_eq!(q.iter().map(|q| q.bound_attribute.as_str()).collect::<Vec<_>>(), vec!["tuna", "plated"]);
    let mut with_neg = cfg.clone();
    with_neg.generate_negative_questions = true;
    let q = e.generate_questions(&c, &with_neg).unwrap();
    assert_eq!(q[2].bound_attribute, "canned_tuna");
    assert_eq!(q[2].text, "Is the tuna canned?");
}

#[test]
fn search_queries_filtered_deduped_and_capped() {
    let c = tuna();
    let t = PromptTemplates::default();
    let mut items: Vec<String> = (0..25).map(|i| format!("seared tuna {i}")).collect();
    items.insert(0, "one two three four five six seven".into());
    items.insert(1, "Seared Tuna 0".into());
    let llm = MockLlm::new(0)
        .with_script(&t.positive_queries_prompt(&c).unwrap(), render_tagged_list("google_search_keywords", "keyword", &items))
        .with_script(&t.carve_outs_prompt(&c).unwrap(), list("c", "carveOut", &[NOT_FOUND]));
    let e = engine(llm);
    let g = e.generate_search_queries(&c, QueryPolarity::Positive).unwrap();
    assert_eq!(g.items.len(), MAX_SEARCH_QUERIES);
    assert_eq!(g.items[0].text, "Seared Tuna 0");
    assert!(g.items.iter().all(|q| q.word_count <= MAX_QUERY_WORDS && q.lineage.is_empty()));
    assert_eq!(g.warnings.len(), 2);
    let neg = e.generate_search_queries(&c, QueryPolarity::Negative).unwrap();
    assert!(neg.items.is_empty());
}

#[test]
fn mutation_rounds_track_lineage() {
    let c = tuna();
    let t = PromptTemplates::default();
    let seed = SearchQuery::seed("seared tuna", QueryPolarity::Positive);
    let mut llm = MockLlm::new(0);
    llm.script(&t.mutate_prompt(&c, "seared tuna", Mutation::Broader).unwrap(), "<query>tuna dish</query>");
    llm.script(&t.mutate_prompt(&c, "seared tuna", Mutation::Narrower).unwrap(), "<query>seared ahi tuna steak</query>");
    llm.script(&t.mutate_prompt(&c, "seared tuna", Mutation::Variation).unwrap(), "garbage");
    llm.script(&t.mutate_prompt(&c, "tuna dish", Mutation::Broader).unwrap(), "<query>fish dish</query>");
    let e = engine(llm);

    let zero = e.mutate_queries(&c, std::slice::from_ref(&seed), 0).unwrap();
    assert_eq!(zero.items, vec![seed.clone()]);

    let one = e.mutate_queries(&c, std::slice::from_ref(&seed), 1).unwrap();
    assert_eq!(one.items.iter().map(|q| q.text.as_str()).collect::<Vec<_>>(), vec![
        "seared tuna",
        "tuna dish",
        "seared ahi tuna steak"
    ]);
    assert_eq!(one.warnings.len(), 1);

    let two = e.mutate_queries(&c, std::slice::from_ref(&seed), 2).unwrap();
    let fish = two.items.iter().find(|q| q.text == "fish dish").unwrap();
    assert_eq!(fish.lineage, vec![Mutation::Broader, Mutation::Broader]);
    assert!(e.mutate_queries(&c, &[], 1).is_err());
}
