//! Parsers for the structured replies the prompt templates ask for.

use serde::{Deserialize, Serialize};

use super::prompts::{bindings, CLASSIFICATION};
use super::record::{AffiliatedItem, LocalizationKind};
use crate::boxfusion::extract_json_array;
use crate::error::{Error, Result};
use crate::services::TextGenerator;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDescription {
    pub description: String,
    pub category: String,
}

/// Drops commas that directly precede a closing bracket, outside strings.
fn strip_trailing_commas(json: &str) -> String {
    let chars: Vec<char> = json.chars().collect();
    let mut out = String::with_capacity(json.len());
    let mut in_str = false;
    let mut escaped = false;
    for (k, &c) in chars.iter().enumerate() {
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        if c == '"' {
            in_str = true;
        } else if c == ',' {
            let next = chars[k + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some(']') | Some('}')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Object listing reply: a JSON list of `{description, category}`, possibly
/// fenced and with trailing commas. Keeps at most `max` entries.
pub fn parse_object_list(text: &str, max: usize) -> Result<Vec<ObjectDescription>> {
    let json = extract_json_array(text).ok_or_else(|| Error::parse("no JSON list in object listing"))?;
    let items: Vec<ObjectDescription> = serde_json::from_str(&strip_trailing_commas(json))
        .map_err(|e| Error::parse(format!("object listing JSON: {e}")))?;
    let mut out: Vec<ObjectDescription> = Vec::new();
    for it in items {
        let it = ObjectDescription {
            description: it.description.trim().to_string(),
            category: it.category.trim().to_string(),
        };
        if it.description.is_empty() || it.category.is_empty() || out.contains(&it) {
            continue;
        }
        out.push(it);
    }
    if out.len() > max {
        log::debug!("object listing has {} entries, keeping {max}", out.len());
        out.truncate(max);
    }
    Ok(out)
}

/// `- name (n)` lines. Lines mentioning `###` or `Explanation` are dropped,
/// as is anything else that is not an item line.
pub fn parse_affiliation(text: &str) -> Result<Vec<AffiliatedItem>> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.contains("###") || line.contains("Explanation") {
            continue;
        }
        let Some(item) = line.trim().strip_prefix('-') else { continue };
        let Some(item) = item.trim().strip_suffix(')') else { continue };
        let Some((name, qty)) = item.rsplit_once('(') else { continue };
        let (name, qty) = (name.trim(), qty.trim());
        let Ok(quantity) = qty.parse::<u32>() else { continue };
        if name.is_empty() {
            continue;
        }
        out.push(AffiliatedItem { name: name.to_string(), quantity });
    }
    if out.is_empty() {
        return Err(Error::parse("affiliation reply has no `- item (n)` lines"));
    }
    Ok(out)
}

const STANDARD_LABEL: &str = "Standard Description:";
const SIMPLE_LABEL: &str = "Simple Description:";

fn labelled<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.find(label).map(|k| l[k + label.len()..].trim()))
}

/// Returns `(standard, simple)`.
pub fn parse_recaption(text: &str) -> Result<(String, String)> {
    let get = |label: &str| -> Result<String> {
        match labelled(text, label) {
            Some(v) if !v.is_empty() => Ok(v.to_string()),
            Some(_) => Err(Error::parse(format!("`{label}` is empty"))),
            None => Err(Error::parse(format!("recaption reply lacks `{label}`"))),
        }
    };
    Ok((get(STANDARD_LABEL)?, get(SIMPLE_LABEL)?))
}

/// Case, surrounding whitespace, quotes and punctuation are ignored.
pub fn parse_localization(text: &str) -> Result<LocalizationKind> {
    let word = text.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    match word.as_str() {
        "absolute" => Ok(LocalizationKind::Absolute),
        "relative" => Ok(LocalizationKind::Relative),
        _ => Err(Error::parse(format!("localization verdict `{}` is neither absolute nor relative", text.trim()))),
    }
}

pub fn classify_localization(description: &str, classifier: &dyn TextGenerator) -> Result<LocalizationKind> {
    if description.trim().is_empty() {
        return Err(Error::Precondition("cannot classify an empty description".into()));
    }
    let req = CLASSIFICATION.request(bindings([("description", description.trim())]), None)?;
    parse_localization(&classifier.generate(&req)?)
}
