use std::path::Path;

use crate::error::{Error, Result};

/// A prompt template with `{name}` placeholders.
///
/// Required placeholders are checked when the template is created, so a
/// broken template fails at load time rather than mid-run. Substitution is a
/// single left-to-right pass: placeholder-like text inside substituted values
/// is never expanded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>, required: &[&str]) -> Result<Self> {
        let text = text.into();
        let missing: Vec<&str> = required
            .iter()
            .copied()
            .filter(|name| !text.contains(&format!("{{{name}}}")))
            .collect();
        if !missing.is_empty() {
            let names: Vec<String> = missing.iter().map(|n| format!("{{{n}}}")).collect();
            return Err(Error::config(format!(
                "prompt template is missing placeholder {}",
                names.join(", ")
            )));
        }
        Ok(Self { text })
    }

    pub fn load(path: &Path, required: &[&str]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text, required)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Substitute `vars`; unknown `{...}` sequences are copied through.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let replaced = after.find('}').and_then(|close| {
                let name = &after[..close];
                vars.iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| (close, *v))
            });
            match replaced {
                Some((close, value)) => {
                    out.push_str(value);
                    rest = &after[close + 1..];
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
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_verbatim() {
        let t = PromptTemplate::new("C:{chunk}\nQ:{question}\nA:", &["chunk", "question"]).unwrap();
        assert_eq!(t.render(&[("chunk", "X"), ("question", "Y?")]), "C:X\nQ:Y?\nA:");
    }

    #[test]
    fn missing_placeholder_named() {
        let err = PromptTemplate::new("C:{chunk}", &["chunk", "question"]).unwrap_err();
        assert!(err.to_string().contains("{question}"), "{err}");
    }

    #[test]
    fn values_are_not_reexpanded() {
        let t = PromptTemplate::new("{a}|{b}|{zzz}|{", &["a"]).unwrap();
        assert_eq!(t.render(&[("a", "{b}"), ("b", "2")]), "{b}|2|{zzz}|{");
    }
}
