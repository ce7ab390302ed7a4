//! Color vocabulary and task prompts shared by the environment and the denoisers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Pink,
    Orange,
    Purple,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Pink,
        Color::Orange,
        Color::Purple,
    ];
    /// Colors present in the in-domain demonstrations.
    pub const SEEN: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Pink];
    /// Colors held out of the in-domain demonstrations.
    pub const NOVEL: [Color; 2] = [Color::Orange, Color::Purple];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Pink => [1.0, 0.4, 0.7],
            Color::Orange => [1.0, 0.5, 0.0],
            Color::Purple => [0.5, 0.0, 0.8],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Pink => "pink",
            Color::Orange => "orange",
            Color::Purple => "purple",
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Color> {
        Color::ALL.get(id as usize).copied()
    }

    pub fn is_novel(self) -> bool {
        Color::NOVEL.contains(&self)
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Color {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Color::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Task(format!("unknown color `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Null,
    Not,
    Color(Color),
}

impl Token {
    pub const VOCAB_SIZE: usize = 8;

    /// Row of this token in a prompt-embedding table.
    pub fn index(self) -> usize {
        match self {
            Token::Null => 0,
            Token::Not => 1,
            Token::Color(c) => 2 + c as usize,
        }
    }

    fn text(self) -> &'static str {
        match self {
            Token::Null => "<null>",
            Token::Not => "not",
            Token::Color(c) => c.name(),
        }
    }
}

/// An ordered, non-empty token list; the null token only ever appears alone.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskPrompt {
    tokens: Vec<Token>,
}

impl TaskPrompt {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Task("prompt must contain at least one token".into()));
        }
        if tokens.len() > 1 && tokens.contains(&Token::Null) {
            return Err(Error::Task("the null token may only appear alone".into()));
        }
        Ok(Self { tokens })
    }

    pub fn null() -> Self {
        Self {
            tokens: vec![Token::Null],
        }
    }

    pub fn color(c: Color) -> Self {
        Self {
            tokens: vec![Token::Color(c)],
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn is_null(&self) -> bool {
        self.tokens == [Token::Null]
    }

    /// The color the task refers to (the last color token).
    pub fn target_color(&self) -> Option<Color> {
        self.tokens.iter().rev().find_map(|t| match t {
            Token::Color(c) => Some(*c),
            _ => None,
        })
    }

    pub fn is_negated(&self) -> bool {
        self.tokens.first() == Some(&Token::Not)
    }

    /// Prepends `not`, the relabeling applied to failed rollouts.
    pub fn negated(&self) -> Self {
        if self.is_null() {
            return self.clone();
        }
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.push(Token::Not);
        tokens.extend_from_slice(&self.tokens);
        Self { tokens }
    }
}

impl fmt::Display for TaskPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self.tokens.iter().map(|t| t.text()).collect();
        f.write_str(&words.join(" "))
    }
}

impl FromStr for TaskPrompt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tokens = s
            .split_whitespace()
            .map(|w| match w {
                "<null>" => Ok(Token::Null),
                "not" => Ok(Token::Not),
                other => other.parse::<Color>().map(Token::Color),
            })
            .collect::<Result<Vec<_>>>()?;
        TaskPrompt::new(tokens)
    }
}

impl Serialize for TaskPrompt {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TaskPrompt {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
