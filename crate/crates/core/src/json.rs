//! Canonical JSON emission: sorted object keys, no insignificant
//! whitespace, UTF-8. Signing and golden-file tests depend on these bytes
//! being stable, so emission is hand-rolled rather than delegated.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub enum Json {
    Null,
    Bool(bool),
    /// Finite numbers only; emitted via the shortest round-trip form.
    Num(f64),
    /// Integers keep exact formatting (no exponent, no fraction).
    Int(i128),
    Str(String),
    Array(Vec<Json>),
    /// BTreeMap keeps keys sorted.
    Object(BTreeMap<String, Json>),
}

impl Json {
    pub fn object(entries: Vec<(&str, Json)>) -> Json {
        Json::Object(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    pub fn str(s: &str) -> Json {
        Json::Str(s.to_string())
    }

    pub fn write(&self, out: &mut String) {
        match self {
            Json::Null => out.push_str("null"),
            Json::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Json::Num(v) => {
                debug_assert!(v.is_finite());
                if *v == libm::trunc(*v) && libm::fabs(*v) < 1e15 {
                    // keep integral floats readable and stable
                    out.push_str(&alloc::format!("{}", *v as i64));
                    out.push_str(".0");
                } else {
                    out.push_str(&alloc::format!("{v}"));
                }
            }
            Json::Int(v) => out.push_str(&alloc::format!("{v}")),
            Json::Str(s) => write_escaped(s, out),
            Json::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    item.write(out);
                }
                out.push(']');
            }
            Json::Object(map) => {
                out.push('{');
                for (i, (k, v)) in map.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write_escaped(k, out);
                    out.push(':');
                    v.write(out);
                }
                out.push('}');
            }
        }
    }

    pub fn to_string(&self) -> String {
        let mut s = String::new();
        self.write(&mut s);
        s
    }
}

fn write_escaped(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&alloc::format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted_and_compact() {
        let j = Json::object(alloc::vec![
            ("zeta", Json::Int(1)),
            ("alpha", Json::str("x")),
            ("mid", Json::Array(alloc::vec![Json::Bool(true), Json::Null])),
        ]);
        assert_eq!(j.to_string(), r#"{"alpha":"x","mid":[true,null],"zeta":1}"#);
    }

    #[test]
    fn escapes_specials() {
        assert_eq!(Json::str("a\"b\\c\nd").to_string(), r#""a\"b\\c\nd""#);
        assert_eq!(Json::str("\u{1}").to_string(), "\"\\u0001\"");
    }

    #[test]
    fn numbers_are_stable() {
        assert_eq!(Json::Num(0.25).to_string(), "0.25");
        assert_eq!(Json::Num(3.0).to_string(), "3.0");
        assert_eq!(Json::Int(-7).to_string(), "-7");
    }
}
