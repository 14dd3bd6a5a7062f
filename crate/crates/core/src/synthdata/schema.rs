//! Attribute schemas: closed value sets, text cues and synonyms.

use serde::{Deserialize, Serialize};

use crate::error::{EivenError, Result};
use crate::lbc::normalize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renderer {
    Pattern,
    Shape,
    Color,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueSpec {
    pub name: String,
    /// Words that imply the value without naming it.
    pub cues: Vec<String>,
    /// Words that name the value and therefore must never appear in text.
    pub synonyms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub renderer: Renderer,
    pub values: Vec<ValueSpec>,
}

impl AttributeSchema {
    pub fn value(&self, name: &str) -> Result<&ValueSpec> {
        let key = normalize(name);
        self.values
            .iter()
            .find(|v| normalize(&v.name) == key)
            .ok_or_else(|| EivenError::Schema(format!("{name:?} is not a value of {}", self.name)))
    }

    pub fn value_names(&self) -> Vec<&str> {
        self.values.iter().map(|v| v.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() < 2 {
            return Err(EivenError::Schema(format!(
                "attribute {} needs at least two values for comparisons",
                self.name
            )));
        }
        for (i, a) in self.values.iter().enumerate() {
            if self.values[..i]
                .iter()
                .any(|b| normalize(&b.name) == normalize(&a.name))
            {
                return Err(EivenError::Schema(format!(
                    "duplicate value {:?} in {}",
                    a.name, self.name
                )));
            }
            if a.cues.is_empty() {
                return Err(EivenError::Schema(format!("value {:?} has no text cue", a.name)));
            }
        }
        Ok(())
    }
}

fn spec(name: &str, cues: &[&str], synonyms: &[&str]) -> ValueSpec {
    ValueSpec {
        name: name.into(),
        cues: cues.iter().map(|s| s.to_string()).collect(),
        synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
    }
}

/// The three built-in attributes with four values each.
pub fn default_schemas() -> Vec<AttributeSchema> {
    vec![
        AttributeSchema {
            name: "Pattern".into(),
            renderer: Renderer::Pattern,
            values: vec![
                spec("solid", &["uniform", "minimalist", "unpatterned"], &["single-tone"]),
                spec(
                    "striped",
                    &["zebra", "nautical", "candy-cane"],
                    &["stripe", "stripes", "banded"],
                ),
                spec(
                    "dotted",
                    &["polka", "confetti", "speckle"],
                    &["dot", "dots", "spots", "spotted"],
                ),
                spec(
                    "checkered",
                    &["gingham", "chessboard", "tartan"],
                    &["checker", "checked", "check"],
                ),
            ],
        },
        AttributeSchema {
            name: "Shape".into(),
            renderer: Renderer::Shape,
            values: vec![
                spec("circle", &["round", "disc", "orbit"], &["circular"]),
                spec("square", &["boxy", "cubic", "blocky"], &["squared"]),
                spec("triangle", &["pyramid", "wedge", "delta"], &["triangular"]),
                spec("diamond", &["kite", "lozenge", "argyle"], &["rhombus"]),
            ],
        },
        AttributeSchema {
            name: "Color".into(),
            renderer: Renderer::Color,
            values: vec![
                spec("red", &["ruby", "cherry", "tomato"], &["crimson", "scarlet"]),
                spec("green", &["lime", "forest", "mint"], &["emerald"]),
                spec("blue", &["ocean", "sapphire", "denim"], &["azure", "navy"]),
                spec("yellow", &["lemon", "sunflower", "banana"], &["golden"]),
            ],
        },
    ]
}

pub const ADJECTIVES: &[&str] = &[
    "classic", "modern", "soft", "light", "everyday", "premium", "casual", "vintage", "cozy", "compact", "sturdy",
    "handmade",
];
pub const NOUNS: &[&str] = &[
    "tote", "mug", "pillow", "shirt", "lamp", "case", "mat", "scarf", "blanket", "poster",
];
pub const CATEGORIES: &[&str] = &["home", "apparel", "kitchen", "decor", "travel"];
