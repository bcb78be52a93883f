//! Prompt templates shipped as text assets. Placeholders are `{{name}}`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::services::PromptRequest;

/// Which parser understands a template's reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParserId {
    ObjectList,
    Grounding,
    Affiliation,
    Recaption,
    Localization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub text: &'static str,
    pub parser: ParserId,
}

pub const OBJECT_DESCRIPTION: PromptTemplate = PromptTemplate {
    name: "object_description",
    text: include_str!("../../assets/prompts/object_description.txt"),
    parser: ParserId::ObjectList,
};

pub const OBJECT_GROUNDING: PromptTemplate = PromptTemplate {
    name: "object_grounding",
    text: include_str!("../../assets/prompts/object_grounding.txt"),
    parser: ParserId::Grounding,
};

pub const AFFILIATION: PromptTemplate = PromptTemplate {
    name: "affiliation",
    text: include_str!("../../assets/prompts/affiliation.txt"),
    parser: ParserId::Affiliation,
};

pub const RECAPTION: PromptTemplate = PromptTemplate {
    name: "recaption",
    text: include_str!("../../assets/prompts/recaption.txt"),
    parser: ParserId::Recaption,
};

pub const CLASSIFICATION: PromptTemplate = PromptTemplate {
    name: "classification",
    text: include_str!("../../assets/prompts/classification.txt"),
    parser: ParserId::Localization,
};

pub const ALL: [PromptTemplate; 5] = [OBJECT_DESCRIPTION, OBJECT_GROUNDING, AFFILIATION, RECAPTION, CLASSIFICATION];

pub fn template(name: &str) -> Option<PromptTemplate> {
    ALL.into_iter().find(|t| t.name == name)
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let slot = after.find("}}").map(|end| &after[..end]).filter(|name| {
            !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        });
        match slot {
            Some(name) => {
                out.push(Piece::Text(&rest[..start]));
                out.push(Piece::Slot(name));
                rest = &after[name.len() + 2..];
            }
            None => {
                out.push(Piece::Text(&rest[..start + 2]));
                rest = after;
            }
        }
    }
    out.push(Piece::Text(rest));
    out
}

impl PromptTemplate {
    /// Distinct placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = Vec::new();
        for p in pieces(self.text) {
            if let Piece::Slot(n) = p {
                if !names.contains(&n) {
                    names.push(n);
                }
            }
        }
        names
    }

    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String> {
        let mut out = String::with_capacity(self.text.len());
        for p in pieces(self.text) {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(n) => out.push_str(bindings.get(n).ok_or_else(|| {
                    Error::Precondition(format!("template `{}` placeholder `{n}` is unbound", self.name))
                })?),
            }
        }
        Ok(out)
    }

    pub fn request(&self, bindings: BTreeMap<String, String>, image_png: Option<Vec<u8>>) -> Result<PromptRequest> {
        Ok(PromptRequest {
            template: self.name.to_string(),
            prompt: self.render(&bindings)?,
            fields: bindings,
            image_png,
        })
    }
}

pub fn bindings<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_sets() {
        assert!(OBJECT_DESCRIPTION.placeholders().is_empty());
        assert_eq!(OBJECT_GROUNDING.placeholders(), ["descriptions_categories_text"]);
        assert_eq!(AFFILIATION.placeholders(), ["chosen_item_description"]);
        assert_eq!(RECAPTION.placeholders(), ["original_category", "original_description"]);
        assert_eq!(CLASSIFICATION.placeholders(), ["description"]);
    }

    #[test]
    fn assets_keep_their_key_lines() {
        assert!(OBJECT_DESCRIPTION.text.contains("List at most 8 objects."));
        assert!(AFFILIATION.text.contains("DO NOT include any lines starting with \"###\" or containing \"Explanation\"."));
        assert!(RECAPTION.text.contains("Simple Description: A wooden table in the center."));
        assert!(CLASSIFICATION.text.contains("Respond with only one word: 'absolute' or 'relative'."));
        assert!(OBJECT_GROUNDING.text.contains(r#"{"description": "description_1", "category": "category_name_1", "bbox_2d": [x1, y1, x2, y2]},"#));
    }

    #[test]
    fn render_binds_every_slot() {
        let b = bindings([("original_category", "lamp"), ("original_description", "an orange lamp.")]);
        let text = RECAPTION.render(&b).unwrap();
        assert!(text.contains("focusing on the object identified as \"lamp\""));
        assert!(text.contains("Input Original Description (for location): \"an orange lamp.\""));
        assert!(!text.contains("{{"));
    }

    #[test]
    fn unbound_slot_is_an_error() {
        let b = bindings([("original_category", "lamp")]);
        let err = RECAPTION.render(&b).unwrap_err();
        assert!(err.to_string().contains("original_description"));
    }

    #[test]
    fn braces_that_are_not_slots_pass_through() {
        let t = PromptTemplate { name: "t", text: "a {{x}} {{ not a slot }} {json} {{y", parser: ParserId::Localization };
        assert_eq!(t.placeholders(), ["x"]);
        assert_eq!(t.render(&bindings([("x", "1")])).unwrap(), "a 1 {{ not a slot }} {json} {{y");
    }

    #[test]
    fn lookup_by_name() {
        assert_eq!(template("affiliation").unwrap().parser, ParserId::Affiliation);
        assert!(template("nope").is_none());
    }
}
