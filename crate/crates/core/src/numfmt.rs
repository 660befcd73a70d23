//! Numeric rendering shared by every piece of text sent to a model.
//!
//! Values print as the shortest decimal string that parses back to the same
//! `f64`. Magnitudes below 1e15 never use exponent notation and integral
//! values carry no decimal point.

const EXPONENT_THRESHOLD: f64 = 1e15;

/// Formats `value` with the canonical numeric rule.
pub fn format_number(value: f64) -> String {
    if value == 0.0 {
        // Collapses -0.0 as well.
        return "0".to_string();
    }
    if value.is_finite() && value.abs() >= EXPONENT_THRESHOLD {
        return format!("{value:e}");
    }
    format!("{value}")
}

/// Formats a probability or metric with a fixed number of decimals.
pub fn format_fixed(value: f64, decimals: usize) -> String {
    format!("{value:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn integers_have_no_decimal_point() {
        assert_eq!(format_number(4.0), "4");
        assert_eq!(format_number(-120.0), "-120");
        assert_eq!(format_number(0.0), "0");
        assert_eq!(format_number(-0.0), "0");
    }

    #[test]
    fn fractions_are_shortest() {
        assert_eq!(format_number(2.5), "2.5");
        assert_eq!(format_number(0.1), "0.1");
        assert_eq!(format_number(1.25), "1.25");
        assert_eq!(format_number(0.0000001), "0.0000001");
    }

    #[test]
    fn large_values_switch_to_exponent() {
        assert_eq!(format_number(999_999_999_999_999.0), "999999999999999");
        assert_eq!(format_number(1e15), "1e15");
        assert_eq!(format_number(-2.5e20), "-2.5e20");
    }

    proptest! {
        #[test]
        fn round_trips_exactly(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let s = format_number(v);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(back, v);
            if v.abs() < EXPONENT_THRESHOLD {
                prop_assert!(!s.contains('e'));
            }
        }
    }
}
