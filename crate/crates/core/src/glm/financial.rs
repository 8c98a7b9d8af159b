//! Log transforms for skewed financial covariates.

/// Income and wealth mapped to regression covariates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinancialCovariates {
    /// `ln(1 + income)`, income floored at 0.
    pub log_income: f64,
    /// `ln(1 + |W|)`
    pub log_abs_wealth: f64,
    /// `sgn(W)`, with `sgn(0) = 0`.
    pub wealth_sign: f64,
    /// `sgn(W) * ln(1 + |W|)`
    pub signed_log_wealth: f64,
}

impl FinancialCovariates {
    /// Covariate names, grouped so the wealth columns share the `wealth.` prefix.
    pub const NAMES: [&'static str; 4] = ["income", "wealth.log_abs", "wealth.sign", "wealth.signed_log"];

    pub fn values(&self) -> [f64; 4] {
        [
            self.log_income,
            self.log_abs_wealth,
            self.wealth_sign,
            self.signed_log_wealth,
        ]
    }
}

pub fn transform_financial(wealth: f64, income: f64) -> FinancialCovariates {
    let income = if income < 0.0 {
        log::warn!("negative household income {income} clamped to 0");
        0.0
    } else {
        income
    };
    let log_abs = wealth.abs().ln_1p();
    let sign = if wealth > 0.0 {
        1.0
    } else if wealth < 0.0 {
        -1.0
    } else {
        0.0
    };
    FinancialCovariates {
        log_income: income.ln_1p(),
        log_abs_wealth: log_abs,
        wealth_sign: sign,
        signed_log_wealth: sign * log_abs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn zero_inputs() {
        let f = transform_financial(0.0, 0.0);
        assert_eq!(f.values(), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_log_wealth() {
        let f = transform_financial(E - 1.0, 0.0);
        assert!((f.log_abs_wealth - 1.0).abs() < 1e-15);
        assert_eq!(f.wealth_sign, 1.0);
        assert!((f.signed_log_wealth - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_wealth_symmetry() {
        let f = transform_financial(-(E * E - 1.0), 0.0);
        assert!((f.log_abs_wealth - 2.0).abs() < 1e-14);
        assert_eq!(f.wealth_sign, -1.0);
        assert!((f.signed_log_wealth + 2.0).abs() < 1e-14);
    }

    #[test]
    fn negative_income_clamped() {
        assert_eq!(transform_financial(0.0, -500.0).log_income, 0.0);
        assert!((transform_financial(0.0, E - 1.0).log_income - 1.0).abs() < 1e-15);
    }
}
