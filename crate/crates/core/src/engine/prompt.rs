use std::path::Path;

use serde::{Deserialize, Serialize};

use super::answer::format_answer;
use super::llm::ChatTurn;
use super::EngineError;

const BUILTIN_PRINCIPLES: &str = include_str!("../../assets/principles.txt");

const TASK_FRAMING: &str = "You are given an object-centric description of a 3D scene and a \
referring expression. Each object line gives its category, id, center (ctr) and axis-aligned \
size in meters in the world frame with z pointing up, and its mean rgb color. Find the single \
object the expression refers to.

Whenever a quantitative check helps, write Python code in a fenced ```python block. The code \
runs in a persistent interpreter and its output is sent back to you. In that interpreter \
OBJECTS maps each listed id to an object with fields id, category, center, size and rgb, \
SCENE_CENTER holds the scene center, and the helpers iou3d, rgb_to_hsl, color_distance, \
point_plane_distance, left_right_of, betweenness and corner_score are predefined. If the code \
fails, fix it and try again.";

const PRINCIPLES_HEADER: &str = "General principles:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    Principles,
    NoPrinciples,
}

fn answer_contract() -> String {
    format!(
        "When you are certain, reply without any code block and finish with the line \
\"{}\" where N is the id of the referred object.",
        format_answer("N")
    )
}

/// Builds the grounding prompt; holds the principle sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBuilder {
    principles: Vec<String>,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        Self::from_text(BUILTIN_PRINCIPLES)
    }
}

impl PromptBuilder {
    /// One principle per non-empty line.
    pub fn from_text(text: &str) -> Self {
        Self {
            principles: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::from_text(&std::fs::read_to_string(path)?))
    }

    pub fn principles(&self) -> &[String] {
        &self.principles
    }

    pub fn system_prompt(&self, mode: PromptMode) -> String {
        let mut text = format!("{TASK_FRAMING}\n\n{}", answer_contract());
        if mode == PromptMode::Principles && !self.principles.is_empty() {
            text.push_str("\n\n");
            text.push_str(PRINCIPLES_HEADER);
            for (i, p) in self.principles.iter().enumerate() {
                text.push_str(&format!("\n{}. {p}", i + 1));
            }
        }
        text
    }

    pub fn user_prompt(scene_text: &str, utterance: &str) -> String {
        format!("{scene_text}\n\nReferring expression: {}", utterance.trim())
    }

    pub fn build(
        &self,
        scene_text: &str,
        utterance: &str,
        mode: PromptMode,
    ) -> Result<Vec<ChatTurn>, EngineError> {
        if utterance.trim().is_empty() {
            return Err(EngineError::EmptyUtterance);
        }
        Ok(vec![
            ChatTurn::system(self.system_prompt(mode)),
            ChatTurn::user(Self::user_prompt(scene_text, utterance)),
        ])
    }

    /// The first principle sentence found in `text`, if any.
    pub fn find_principle<'a>(&'a self, text: &str) -> Option<&'a str> {
        self.principles
            .iter()
            .find(|p| text.contains(p.as_str()))
            .map(String::as_str)
    }
}
