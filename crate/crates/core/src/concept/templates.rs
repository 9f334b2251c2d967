use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::ConceptError;

pub const TEMPLATE_VERSION: u32 = 1;

/// Named prompt templates. File names are `<name>.v<version>.txt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateName {
    ConceptDescription,
    PositiveQueries,
    CarveOuts,
    PositiveAttributes,
    DecomposeAttribute,
    QuestionsFromDescription,
    MutateQuery,
    FinalDecision,
}

impl TemplateName {
    pub const ALL: [TemplateName; 8] = [
        TemplateName::ConceptDescription,
        TemplateName::PositiveQueries,
        TemplateName::CarveOuts,
        TemplateName::PositiveAttributes,
        TemplateName::DecomposeAttribute,
        TemplateName::QuestionsFromDescription,
        TemplateName::MutateQuery,
        TemplateName::FinalDecision,
    ];

    pub fn stem(self) -> &'static str {
        match self {
            TemplateName::ConceptDescription => "concept_description",
            TemplateName::PositiveQueries => "positive_queries",
            TemplateName::CarveOuts => "carve_outs",
            TemplateName::PositiveAttributes => "positive_attributes",
            TemplateName::DecomposeAttribute => "decompose_attribute",
            TemplateName::QuestionsFromDescription => "questions_from_description",
            TemplateName::MutateQuery => "mutate_query",
            TemplateName::FinalDecision => "final_decision",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.v{TEMPLATE_VERSION}.txt", self.stem())
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateName::ConceptDescription => include_str!("../../templates/concept_description.v1.txt"),
            TemplateName::PositiveQueries => include_str!("../../templates/positive_queries.v1.txt"),
            TemplateName::CarveOuts => include_str!("../../templates/carve_outs.v1.txt"),
            TemplateName::PositiveAttributes => include_str!("../../templates/positive_attributes.v1.txt"),
            TemplateName::DecomposeAttribute => include_str!("../../templates/decompose_attribute.v1.txt"),
            TemplateName::QuestionsFromDescription => {
                include_str!("../../templates/questions_from_description.v1.txt")
            }
            TemplateName::MutateQuery => include_str!("../../templates/mutate_query.v1.txt"),
            TemplateName::FinalDecision => include_str!("../../templates/final_decision.v1.txt"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplates {
    texts: BTreeMap<TemplateName, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self { texts: TemplateName::ALL.iter().map(|&n| (n, n.builtin().to_string())).collect() }
    }
}

impl PromptTemplates {
    /// Loads overrides from `dir`; templates without a file there keep the
    /// built-in text.
    pub fn load_dir(dir: &Path) -> Result<Self, ConceptError> {
        let mut templates = Self::default();
        for name in TemplateName::ALL {
            let path = dir.join(name.file_name());
            if path.exists() {
                let text = fs::read_to_string(&path)
                    .map_err(|e| ConceptError::Template(format!("{}: {e}", path.display())))?;
                templates.texts.insert(name, text);
            }
        }
        Ok(templates)
    }

    /// Writes every template into `dir` (used to seed an editable copy).
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, text) in &self.texts {
            fs::write(dir.join(name.file_name()), text)?;
        }
        Ok(())
    }

    pub fn raw(&self, name: TemplateName) -> &str {
        &self.texts[&name]
    }

    /// Substitutes `{KEY}` placeholders. Every placeholder present in the
    /// template must be supplied.
    pub fn render(&self, name: TemplateName, values: &[(&str, &str)]) -> Result<String, ConceptError> {
        let mut out = self.raw(name).to_string();
        for (key, value) in values {
            out = out.replace(&format!("{{{key}}}"), value);
        }
        if let Some(missing) = find_placeholder(&out) {
            return Err(ConceptError::Template(format!(
                "{} has unfilled placeholder {{{missing}}}",
                name.file_name()
            )));
        }
        Ok(out.trim_end().to_string())
    }
}

fn find_placeholder(text: &str) -> Option<&str> {
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        if let Some(end) = after.find('}') {
            let key = &after[..end];
            if !key.is_empty() && key.chars().all(|c| c.is_ascii_uppercase() || c == '_') {
                return Some(key);
            }
        }
        rest = after;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_templates_carry_expected_placeholders() {
        let t = PromptTemplates::default();
        let fin = t.raw(TemplateName::FinalDecision);
        for key in ["{CONCEPT_NAME}", "{CONCEPT_DESCRIPTION}", "{PALI_QUESTIONS_AND_ANSWERS}"] {
            assert!(fin.contains(key), "final prompt lacks {key}");
        }
        assert!(fin.contains("EVEN ONE of the out-of-scope attributes"));
        assert!(t.raw(TemplateName::ConceptDescription).contains("Visual concept definition:"));
        assert!(t.raw(TemplateName::CarveOuts).contains("<carveOut>NOT_FOUND</carveOut>"));
        assert!(t.raw(TemplateName::PositiveQueries).contains("generate 20 Google Search keywords"));
    }

    #[test]
    fn render_requires_all_placeholders() {
        let t = PromptTemplates::default();
        assert!(t.render(TemplateName::ConceptDescription, &[]).is_err());
        let p = t.render(TemplateName::ConceptDescription, &[("CONCEPT_NAME", "pie chart")]).unwrap();
        assert!(p.contains("<visualConceptName>pie chart</visualConceptName>"));
    }

    #[test]
    fn directory_overrides() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mutate_query.v1.txt"), "custom {QUERY}").unwrap();
        let t = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(t.render(TemplateName::MutateQuery, &[("QUERY", "q")]).unwrap(), "custom q");
        assert_eq!(t.raw(TemplateName::CarveOuts), PromptTemplates::default().raw(TemplateName::CarveOuts));
    }
}
