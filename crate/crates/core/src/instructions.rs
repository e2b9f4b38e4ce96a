//! Built-in format-control instructions appended to training prompts.

use std::str::FromStr;

use rand::Rng;

use crate::error::Error;

/// Instruction used at test time; always index 0.
pub const TEST_INSTRUCTION: &str = "Answer the question using a single word or phrase.";

pub const FORMAT_INSTRUCTIONS: &[&str] = &[
    TEST_INSTRUCTION,
    "Answer with the exact text from the image.",
    "Respond with only the answer, no explanation.",
    "Give a short answer copied from the document.",
    "Reply using as few words as possible.",
    "Output the answer span verbatim.",
    "Answer in one word if possible.",
    "Provide only the requested text, without punctuation changes.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InstructionChoice {
    #[default]
    None,
    Random,
    Index(usize),
}

impl FromStr for InstructionChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "none" | "" => Ok(InstructionChoice::None),
            "random" => Ok(InstructionChoice::Random),
            other => {
                let i: usize = other.parse().map_err(|_| {
                    Error::Config(format!(
                        "instruction must be \"none\", \"random\" or an index, got {other:?}"
                    ))
                })?;
                if i >= FORMAT_INSTRUCTIONS.len() {
                    return Err(Error::Config(format!(
                        "instruction index {i} out of range (0..{})",
                        FORMAT_INSTRUCTIONS.len()
                    )));
                }
                Ok(InstructionChoice::Index(i))
            }
        }
    }
}

impl InstructionChoice {
    pub fn pick<R: Rng>(&self, rng: &mut R) -> Option<&'static str> {
        match *self {
            InstructionChoice::None => None,
            InstructionChoice::Random => {
                Some(FORMAT_INSTRUCTIONS[rng.gen_range(0..FORMAT_INSTRUCTIONS.len())])
            }
            InstructionChoice::Index(i) => Some(FORMAT_INSTRUCTIONS[i]),
        }
    }

    /// `question` with the chosen instruction on a new line.
    pub fn apply<R: Rng>(&self, question: &str, rng: &mut R) -> String {
        match self.pick(rng) {
            Some(ins) => format!("{question}\n{ins}"),
            None => question.to_string(),
        }
    }
}
