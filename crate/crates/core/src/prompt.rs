//! Prompt templates and reply parsing.
//!
//! Templates are plain text with `{name}` placeholders. Only the names a
//! template declares are substituted, so literal JSON braces in the text pass
//! through untouched. Built-in copies are compiled in; a directory of
//! same-named `.txt` files overrides them.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    GuidelineNeg,
    GuidelineDes,
    Synthesize,
    Refine,
    Ground,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::GuidelineNeg,
        TemplateKind::GuidelineDes,
        TemplateKind::Synthesize,
        TemplateKind::Refine,
        TemplateKind::Ground,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::GuidelineNeg => "guideline_neg.txt",
            TemplateKind::GuidelineDes => "guideline_des.txt",
            TemplateKind::Synthesize => "synthesize.txt",
            TemplateKind::Refine => "refine.txt",
            TemplateKind::Ground => "ground.txt",
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateKind::GuidelineNeg | TemplateKind::GuidelineDes => &["guideline", "sentence", "entities"],
            TemplateKind::Synthesize => &["guideline", "sentence", "entities", "strategy", "count"],
            TemplateKind::Refine => &["types", "sentence", "entities"],
            TemplateKind::Ground => &["examples", "sentence", "entities", "width", "height"],
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateKind::GuidelineNeg => include_str!("../templates/guideline_neg.txt"),
            TemplateKind::GuidelineDes => include_str!("../templates/guideline_des.txt"),
            TemplateKind::Synthesize => include_str!("../templates/synthesize.txt"),
            TemplateKind::Refine => include_str!("../templates/refine.txt"),
            TemplateKind::Ground => include_str!("../templates/ground.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    texts: [String; 5],
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            texts: TemplateKind::ALL.map(|k| k.builtin().to_string()),
        }
    }
}

impl Templates {
    /// Built-ins, with any files present in `dir` taking precedence.
    pub fn load(dir: Option<&Path>) -> Result<Self> {
        let mut t = Templates::default();
        if let Some(dir) = dir {
            for (i, kind) in TemplateKind::ALL.iter().enumerate() {
                let path = dir.join(kind.file_name());
                if path.exists() {
                    let text =
                        fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                    check_placeholders(*kind, &text)?;
                    t.texts[i] = text;
                }
            }
        }
        Ok(t)
    }

    pub fn get(&self, kind: TemplateKind) -> &str {
        let i = TemplateKind::ALL.iter().position(|k| *k == kind).unwrap();
        &self.texts[i]
    }

    pub fn render(&self, kind: TemplateKind, values: &[(&str, &str)]) -> Result<String> {
        for (name, _) in values {
            if !kind.placeholders().contains(name) {
                return Err(Error::Template(format!(
                    "{} has no placeholder `{name}`",
                    kind.file_name()
                )));
            }
        }
        for name in kind.placeholders() {
            if !values.iter().any(|(n, _)| n == name) {
                return Err(Error::Template(format!(
                    "no value for `{{{name}}}` in {}",
                    kind.file_name()
                )));
            }
        }
        Ok(substitute(self.get(kind), values))
    }
}

fn check_placeholders(kind: TemplateKind, text: &str) -> Result<()> {
    for name in kind.placeholders() {
        if !text.contains(&format!("{{{name}}}")) {
            return Err(Error::Template(format!(
                "{} lacks placeholder `{{{name}}}`",
                kind.file_name()
            )));
        }
    }
    Ok(())
}

/// Single left-to-right pass, so substituted values are never rescanned.
fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = values
            .iter()
            .find(|(name, _)| after.starts_with(name) && after[name.len()..].starts_with('}'));
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &after[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Finds the JSON object in an LLM reply: the whole reply, a fenced block,
/// or the first balanced `{...}`.
pub fn extract_json(reply: &str) -> Option<Value> {
    let trimmed = reply.trim();
    if let Ok(v @ Value::Object(_)) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    if let Some(start) = trimmed.find("```") {
        let body = &trimmed[start + 3..];
        let body = body.strip_prefix("json").unwrap_or(body);
        if let Some(end) = body.find("```") {
            if let Ok(v @ Value::Object(_)) = serde_json::from_str(body[..end].trim()) {
                return Some(v);
            }
        }
    }
    let bytes = trimmed.as_bytes();
    let mut search = 0;
    while let Some(off) = trimmed[search..].find('{') {
        let start = search + off;
        if let Some(end) = balanced_end(&bytes[start..]) {
            if let Ok(v @ Value::Object(_)) = serde_json::from_str(&trimmed[start..start + end]) {
                return Some(v);
            }
        }
        search = start + 1;
    }
    None
}

fn balanced_end(bytes: &[u8]) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_str {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_keeps_literal_braces() {
        let t = Templates::default();
        let out = t
            .render(
                TemplateKind::Refine,
                &[
                    ("types", "WEAPON"),
                    ("sentence", "the {sentence} MG5"),
                    ("entities", "1. MG5"),
                ],
            )
            .unwrap();
        assert!(out.contains("the {sentence} MG5"));
        assert!(out.contains("{\"reasoning\""));
        assert!(!out.contains("{types}"));
    }

    #[test]
    fn render_checks_names() {
        let t = Templates::default();
        assert!(t.render(TemplateKind::Refine, &[("types", "")]).is_err());
        assert!(t
            .render(
                TemplateKind::Refine,
                &[("types", ""), ("sentence", ""), ("entities", ""), ("bogus", "")]
            )
            .is_err());
    }

    #[test]
    fn builtins_declare_their_placeholders() {
        for k in TemplateKind::ALL {
            check_placeholders(k, k.builtin()).unwrap();
        }
    }

    #[test]
    fn override_dir() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("refine.txt"), "{types}|{sentence}|{entities}").unwrap();
        let t = Templates::load(Some(dir.path())).unwrap();
        assert_eq!(
            t.render(
                TemplateKind::Refine,
                &[("types", "a"), ("sentence", "b"), ("entities", "c")]
            )
            .unwrap(),
            "a|b|c"
        );
        fs::write(dir.path().join("ground.txt"), "no placeholders").unwrap();
        assert!(Templates::load(Some(dir.path())).is_err());
    }

    #[test]
    fn json_extraction() {
        assert_eq!(extract_json(r#"{"a":1}"#).unwrap()["a"], 1);
        assert_eq!(extract_json("Sure:\n```json\n{\"a\": 2}\n```\nDone").unwrap()["a"], 2);
        assert_eq!(
            extract_json(r#"Reasoning {not json} then {"a": "}{", "b": {"c": 3}} tail"#).unwrap()["b"]["c"],
            3
        );
        assert!(extract_json("no json here").is_none());
        assert!(extract_json("[1, 2]").is_none());
    }
}
