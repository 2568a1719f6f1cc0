//! Locale-independent decimal formatting.
//!
//! Text artifacts (reports, logs, feature files) use 9 significant digits.
//! Checkpoint tensors use the shortest representation that parses back to
//! the identical `f64`.

/// Format with 9 significant digits, `%.9g` style: fixed notation for
/// exponents in `[-4, 9)`, scientific otherwise (`e-05`), trailing zeros
/// trimmed.
pub fn g9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!(
            "{}e{}{:02}",
            trim_zeros(mantissa.to_string()),
            sign,
            exp.abs()
        )
    }
}

/// Shortest round-trip representation.
pub fn exact(x: f64) -> String {
    format!("{x:?}")
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}
