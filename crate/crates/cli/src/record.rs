//! One-line `key=value` records.
//!
//! Reals are printed with 17 significant digits so that parsing a record
//! gives back the exact `f64`.

use std::fmt::{self, Write as _};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record {
    fields: Vec<(String, String)>,
}

impl Record {
    pub fn new(kind: &str) -> Self {
        Record::default().text("record", kind)
    }

    pub fn num(mut self, key: &str, v: f64) -> Self {
        self.fields.push((key.into(), format_f64(v)));
        self
    }

    pub fn int(mut self, key: &str, v: impl Into<u64>) -> Self {
        self.fields.push((key.into(), v.into().to_string()));
        self
    }

    pub fn count(self, key: &str, v: usize) -> Self {
        self.int(key, v as u64)
    }

    /// Values containing whitespace, quotes or `=` are written as quoted strings.
    pub fn text(mut self, key: &str, v: &str) -> Self {
        let needs_quotes = v.is_empty() || v.chars().any(|c| c.is_whitespace() || c == '"' || c == '=');
        let v = if needs_quotes { format!("{v:?}") } else { v.to_string() };
        self.fields.push((key.into(), v));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut line = String::new();
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            write!(line, "{k}={v}")?;
        }
        f.write_str(&line)
    }
}

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Splits a record line into its fields. Quoted values are unescaped.
pub fn parse_line(line: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut rest = line.trim();
    while !rest.is_empty() {
        let Some(eq) = rest.find('=') else { break };
        let key = rest[..eq].to_string();
        rest = &rest[eq + 1..];
        let value;
        if let Some(stripped) = rest.strip_prefix('"') {
            let mut end = None;
            let mut escaped = false;
            for (i, c) in stripped.char_indices() {
                match c {
                    '\\' if !escaped => escaped = true,
                    '"' if !escaped => {
                        end = Some(i);
                        break;
                    }
                    _ => escaped = false,
                }
            }
            let end = end.unwrap_or(stripped.len());
            value = serde_json::from_str::<String>(&format!("\"{}\"", &stripped[..end]))
                .unwrap_or_else(|_| stripped[..end].to_string());
            rest = stripped.get(end + 1..).unwrap_or("");
        } else {
            let end = rest.find(' ').unwrap_or(rest.len());
            value = rest[..end].to_string();
            rest = &rest[end..];
        }
        out.push((key, value));
        rest = rest.trim_start();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.12345679, f64::MIN_POSITIVE] {
            assert_eq!(format_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn line_round_trip() {
        let r = Record::new("eval")
            .num("auroc", 0.75)
            .count("n", 3)
            .text("note", "two words");
        let line = r.to_string();
        assert_eq!(line, "record=eval auroc=7.5000000000000000e-1 n=3 note=\"two words\"");
        let fields = parse_line(&line);
        assert_eq!(fields[3], ("note".to_string(), "two words".to_string()));
        assert_eq!(fields[1].1.parse::<f64>().unwrap(), 0.75);
    }
}
