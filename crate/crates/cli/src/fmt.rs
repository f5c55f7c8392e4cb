//! Human-readable numbers: six significant digits, `%g` style.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::Failure;

pub fn sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..6).contains(&exp) {
        return format!("{}e{exp}", trim(mantissa));
    }
    trim(&format!("{x:.*}", (5 - exp) as usize)).to_owned()
}

fn trim(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Pretty JSON to `path`, or to stdout when `path` is `None`.
pub fn emit_json(value: &impl Serialize, path: Option<&Path>) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    text.push('\n');
    match path {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Data(e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::sig;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig(0.8655293), "0.865529");
        assert_eq!(sig(1.0), "1");
        assert_eq!(sig(-2.5), "-2.5");
        assert_eq!(sig(123456789.0), "1.23457e8");
        assert_eq!(sig(1.5e-7), "1.5e-7");
        assert_eq!(sig(0.0001), "0.0001");
        assert_eq!(sig(999999.5), "1e6");
        assert_eq!(sig(0.0), "0");
    }
}
