//! Fixed-precision float formatting for CSV output.

/// Significant digits written for every float column.
pub const SIG_DIGITS: usize = 9;

/// Positional decimal with [`SIG_DIGITS`] significant digits, e.g. `0.00500000000`.
///
/// The exponent is read back from Rust's own scientific rendering, so the
/// result does not depend on the platform's `log10`.
pub fn float(x: f64) -> String {
    if x == 0.0 {
        return format!("{:.*}", SIG_DIGITS - 1, 0.0);
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", SIG_DIGITS - 1, x);
    let exp: i32 = sci[sci.find('e').expect("scientific form") + 1..].parse().expect("exponent");
    let decimals = (SIG_DIGITS as i32 - 1 - exp).max(0) as usize;
    format!("{:.*}", decimals, x)
}

pub fn opt_float(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

pub fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}
