//! Float formatting for CSV reports: 6 significant digits.

pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).clamp(0, 17) as usize;
    let s = format!("{:.*}", decimals, x);
    // rounding can add a digit (9.99999e-1 -> 1.000000); that is fine
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig6(0.5), "0.500000");
        assert_eq!(fmt_sig6(0.0625), "0.0625000");
        assert_eq!(fmt_sig6(15.0), "15.0000");
        assert_eq!(fmt_sig6(0.123456789), "0.123457");
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(123456.7), "123457");
        assert_eq!(fmt_sig6(-0.25), "-0.250000");
    }
}
