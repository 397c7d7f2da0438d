/// Positional decimal text with at least `sig` significant digits.
pub(crate) fn decimal(v: f64, sig: usize) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if v == 0.0 {
        return format!("{:.*}", sig - 1, 0.0);
    }
    let mag = v.abs().log10().floor() as i64;
    let decimals = (sig as i64 - 1 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}
