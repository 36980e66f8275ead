//! Deterministic JSON emission: field order is fixed by construction order and
//! floats are printed with 17 significant digits, so identical runs produce
//! byte-identical files.

use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub enum J {
    Bool(bool),
    UInt(u64),
    F(f64),
    S(String),
    A(Vec<J>),
    O(Vec<(&'static str, J)>),
    Null,
}

/// 17 significant digits in scientific notation; enough to round-trip any f64.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        return "\"NaN\"".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 {
            "\"Inf\"".to_string()
        } else {
            "\"-Inf\"".to_string()
        };
    }
    format!("{x:.16e}")
}

/// The same float format without JSON quoting rules, for CSV cells.
pub fn fmt_f64_csv(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "Inf" } else { "-Inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

fn escape(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

impl J {
    pub fn floats(values: &[f64]) -> J {
        J::A(values.iter().map(|&v| J::F(v)).collect())
    }

    pub fn to_string(&self) -> String {
        let mut out = String::new();
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut String) {
        match self {
            J::Null => out.push_str("null"),
            J::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            J::UInt(u) => {
                let _ = write!(out, "{u}");
            }
            J::F(x) => out.push_str(&fmt_f64(*x)),
            J::S(s) => escape(s, out),
            J::A(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    item.write(out);
                }
                out.push(']');
            }
            J::O(fields) => {
                out.push('{');
                for (i, (k, v)) in fields.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    escape(k, out);
                    out.push(':');
                    v.write(out);
                }
                out.push('}');
            }
        }
    }
}
