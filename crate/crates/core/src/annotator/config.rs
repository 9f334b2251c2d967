use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STRATEGY_COUNT: usize = 6;
pub const DEFAULT_FIXED_QUESTION_COUNT: usize = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("strategy index {0} is outside 0..{STRATEGY_COUNT}")]
    UnknownStrategy(usize),
    #[error("fixed_question_count must be present and positive exactly when the fixed-count flag is set")]
    FixedCount,
    #[error("flags do not match registered strategy {0}")]
    FlagMismatch(usize),
    #[error("strategy table: {0}")]
    Table(String),
}

/// Annotator flags (A to E) plus the registered strategy they belong to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    /// A: questions from extracted attributes rather than from the description.
    pub use_positive_attributes_for_questions: bool,
    /// B: also ask about out-of-scope attributes.
    pub generate_negative_questions: bool,
    /// C: caption the image and pass the caption to the final decision.
    pub use_captioning_questions: bool,
    /// D: cap the number of questions.
    pub generate_fixed_num_of_questions: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_question_count: Option<usize>,
    /// E: leave attribute lists out of the final prompt.
    pub final_rating_without_attributes: bool,
    pub strategy_index: usize,
}

impl AnnotatorConfig {
    fn from_flags(index: usize, flags: [bool; 5]) -> Self {
        let [a, b, c, d, e] = flags;
        Self {
            use_positive_attributes_for_questions: a,
            generate_negative_questions: b,
            use_captioning_questions: c,
            generate_fixed_num_of_questions: d,
            fixed_question_count: d.then_some(DEFAULT_FIXED_QUESTION_COUNT),
            final_rating_without_attributes: e,
            strategy_index: index,
        }
    }

    pub fn flags(&self) -> [bool; 5] {
        [
            self.use_positive_attributes_for_questions,
            self.generate_negative_questions,
            self.use_captioning_questions,
            self.generate_fixed_num_of_questions,
            self.final_rating_without_attributes,
        ]
    }

    /// Registered strategy from the built-in table.
    pub fn strategy(index: usize) -> Result<Self, ConfigError> {
        StrategyTable::default().get(index)
    }

    /// Flag string such as `AB--E` for display.
    pub fn flag_string(&self) -> String {
        self.flags().iter().zip("ABCDE".chars()).map(|(&on, c)| if on { c } else { '-' }).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.strategy_index >= STRATEGY_COUNT {
            return Err(ConfigError::UnknownStrategy(self.strategy_index));
        }
        match (self.generate_fixed_num_of_questions, self.fixed_question_count) {
            (true, Some(n)) if n > 0 => Ok(()),
            (false, None) => Ok(()),
            _ => Err(ConfigError::FixedCount),
        }
    }

    /// Question cap when the fixed-count flag is set.
    pub fn question_limit(&self) -> Option<usize> {
        if self.generate_fixed_num_of_questions {
            self.fixed_question_count
        } else {
            None
        }
    }
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        StrategyTable::default().strategies[0].clone()
    }
}

/// The six registered flag combinations, indexed by strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyTable {
    pub strategies: Vec<AnnotatorConfig>,
}

impl Default for StrategyTable {
    fn default() -> Self {
        // A, B, C, D, E
        let table: [[bool; 5]; STRATEGY_COUNT] = [
            [true, true, false, false, false],
            [true, true, true, false, false],
            [true, true, false, true, false],
            [false, false, false, false, true],
            [false, false, false, true, true],
            [false, false, true, true, true],
        ];
        Self { strategies: table.iter().enumerate().map(|(i, &f)| AnnotatorConfig::from_flags(i, f)).collect() }
    }
}

impl StrategyTable {
    /// Checks there are exactly six distinct, valid, correctly indexed entries.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.strategies.len() != STRATEGY_COUNT {
            return Err(ConfigError::Table(format!("expected {STRATEGY_COUNT} strategies, got {}", self.strategies.len())));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if s.strategy_index != i {
                return Err(ConfigError::Table(format!("entry {i} has strategy_index {}", s.strategy_index)));
            }
            s.validate()?;
            if self.strategies[..i].iter().any(|o| o.flags() == s.flags()) {
                return Err(ConfigError::Table(format!("strategy {i} repeats an earlier flag combination")));
            }
        }
        Ok(())
    }

    pub fn get(&self, index: usize) -> Result<AnnotatorConfig, ConfigError> {
        self.strategies.get(index).cloned().ok_or(ConfigError::UnknownStrategy(index))
    }

    /// Verifies that `config` carries the flags registered for its index.
    pub fn check(&self, config: &AnnotatorConfig) -> Result<(), ConfigError> {
        config.validate()?;
        let registered = self.get(config.strategy_index)?;
        if registered.flags() != config.flags() {
            return Err(ConfigError::FlagMismatch(config.strategy_index));
        }
        Ok(())
    }
}
