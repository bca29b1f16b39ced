//! CSV/JSON emission helpers.

use std::path::Path;

use crate::error::BenchError;

/// Formats a real with 6 significant digits, `%g` style: plain decimals for
/// exponents in `-4..6`, scientific otherwise, trailing zeros trimmed.
pub fn fmt_real(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        trim_zeros(format!("{x:.*}", (5 - exp) as usize))
    } else {
        format!("{}e{exp}", trim_zeros(mant.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

/// Serializes rows to CSV bytes with the given header.
pub fn csv_bytes<I, R>(header: &[&str], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(BenchError::output(dir))?;
    }
    std::fs::write(path, bytes).map_err(BenchError::output(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_real(0.8), "0.8");
        assert_eq!(fmt_real(1.0), "1");
        assert_eq!(fmt_real(2.0 / 3.0), "0.666667");
        assert_eq!(fmt_real(100.0), "100");
        assert_eq!(fmt_real(123456.7), "123457");
        assert_eq!(fmt_real(1234567.0), "1.23457e6");
        assert_eq!(fmt_real(0.0000123456789), "1.23457e-5");
        assert_eq!(fmt_real(0.000123456789), "0.000123457");
        assert_eq!(fmt_real(9.9999996), "10");
        assert_eq!(fmt_real(-0.25), "-0.25");
        assert_eq!(fmt_real(0.0), "0");
    }

    #[test]
    fn csv_quotes_when_needed() {
        let b = csv_bytes(&["a", "b"], [vec!["x,y".to_string(), "line\nbreak".to_string()]]);
        assert_eq!(String::from_utf8(b).unwrap(), "a,b\n\"x,y\",\"line\nbreak\"\n");
    }
}
