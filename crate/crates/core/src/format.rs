//! Text output: round-trippable float formatting, CSV rows and key=value lines.

use std::fmt::Write as _;

/// Formats like C's `%.17g`: 17 significant digits, trailing zeros dropped,
/// scientific notation when the exponent is below −4 or at least 17.
pub fn g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..17).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_fraction(mantissa), exp.abs())
    } else {
        let fixed = format!("{x:.*}", (16 - exp) as usize);
        trim_fraction(&fixed).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One CSV line of formatted floats, LF-terminated.
pub fn csv_row(values: &[f64]) -> String {
    let mut line = values.iter().map(|v| g17(*v)).collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

pub fn csv_line(fields: &[String]) -> String {
    let mut line = fields.join(",");
    line.push('\n');
    line
}

/// Accumulates `key=value` lines.
#[derive(Debug, Default)]
pub struct KeyValue(String);

impl KeyValue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        writeln!(self.0, "{key}={value}").unwrap();
        self
    }

    pub fn float(&mut self, key: &str, value: f64) -> &mut Self {
        self.text(key, g17(value))
    }

    pub fn floats(&mut self, key: &str, values: &[f64]) -> &mut Self {
        let joined = values.iter().map(|v| g17(*v)).collect::<Vec<_>>().join(",");
        self.text(key, joined)
    }

    pub fn finish(&self) -> &str {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_printf_g17() {
        let cases = [
            (0.1, "0.10000000000000001"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (1.0 / 3.0, "0.33333333333333331"),
            (1e-5, "1.0000000000000001e-05"),
            (123456789.0, "123456789"),
            (1e17, "1e+17"),
            (1e16, "10000000000000000"),
            (0.0001, "0.0001"),
            (2.0f64.sqrt(), "1.4142135623730951"),
            (-1e300, "-1.0000000000000001e+300"),
            (0.0, "0"),
        ];
        for (x, want) in cases {
            assert_eq!(g17(x), want, "{x:e}");
        }
    }

    #[test]
    fn round_trips() {
        for x in [0.1, 1.0 / 7.0, 6.02214076e23, -3.5e-12, f64::MIN_POSITIVE, f64::MAX] {
            assert_eq!(g17(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn rows_and_pairs() {
        assert_eq!(csv_row(&[0.5, -1.0]), "0.5,-1\n");
        let mut kv = KeyValue::new();
        kv.float("loss", 0.25).text("termination", "converged").floats("alpha", &[0.5, 0.5]);
        assert_eq!(kv.finish(), "loss=0.25\ntermination=converged\nalpha=0.5,0.5\n");
    }
}
