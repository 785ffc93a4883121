//! Decimal formatting shared by every CSV writer.

/// Shortest decimal string that parses back to the same `f64`.
pub fn shortest(x: f64) -> String {
    if x == 0.0 {
        // Normalizes -0.
        return "0".into();
    }
    format!("{x}")
}

/// The value rounded to 9 significant digits, printed without trailing
/// zeros.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("valid float");
    shortest(rounded)
}
