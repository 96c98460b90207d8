//! Cobb-Douglas flexible-demand model.
//!
//! Households spend a fixed daily budget on flexible electricity, split
//! between the peak and off-peak windows with budget shares `alpha` and
//! `1 - alpha`. The resulting window energies have the closed forms
//! `d_peak = alpha * budget / pi_peak` and
//! `d_offpeak = (1 - alpha) * budget / pi_offpeak`, and are spread over the
//! hours of each window proportionally to the inflexible reference shape.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate shape: window reference sums to zero but carries {0} MWh")]
    DegenerateShape(f64),
}

/// Window-level flexible demand for one bus and day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandSplit {
    /// Flexible energy consumed over the peak window, MWh.
    pub d_peak: f64,
    /// Flexible energy consumed over the off-peak window, MWh.
    pub d_offpeak: f64,
    /// Daily flexible budget, $; d_peak*pi_p + d_offpeak*pi_op = budget.
    pub budget: f64,
}

/// Hourly flexible demand, window sums matching a [`DemandSplit`].
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalProfile {
    /// Flexible demand per hour, MW (MWh over one hour).
    pub values: Vec<f64>,
    /// The inflexible reference shape the allocation followed.
    pub reference: Vec<f64>,
}

/// Closed-form utility-maximizing window split of the flexible budget.
pub fn demand_split(
    alpha: f64,
    budget: f64,
    pi_peak: f64,
    pi_offpeak: f64,
) -> Result<DemandSplit, DemandError> {
    if pi_peak <= 0.0 || pi_offpeak <= 0.0 {
        return Err(DemandError::Domain(format!(
            "prices must be positive, got ({pi_peak}, {pi_offpeak})"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) || budget < 0.0 {
        return Err(DemandError::Domain(format!(
            "need alpha in [0,1] and budget >= 0, got ({alpha}, {budget})"
        )));
    }
    Ok(DemandSplit {
        d_peak: alpha * budget / pi_peak,
        d_offpeak: (1.0 - alpha) * budget / pi_offpeak,
        budget,
    })
}

/// Spread window energies over hours proportionally to the reference shape.
/// `peak_hours` lists the hours of the peak window; the rest are off-peak.
pub fn allocate_intervals(
    split: &DemandSplit,
    reference: &[f64],
    peak_hours: &[usize],
) -> Result<IntervalProfile, DemandError> {
    let is_peak = |t: usize| peak_hours.contains(&t);
    let window_sum = |peak: bool| -> f64 {
        reference
            .iter()
            .enumerate()
            .filter(|(t, _)| is_peak(*t) == peak)
            .map(|(_, &v)| v)
            .sum()
    };
    let ref_peak = window_sum(true);
    let ref_offpeak = window_sum(false);
    for (energy, ref_sum) in [(split.d_peak, ref_peak), (split.d_offpeak, ref_offpeak)] {
        if energy > 0.0 && ref_sum <= 0.0 {
            return Err(DemandError::DegenerateShape(energy));
        }
    }
    let values = reference
        .iter()
        .enumerate()
        .map(|(t, &w)| {
            let (energy, ref_sum) = if is_peak(t) {
                (split.d_peak, ref_peak)
            } else {
                (split.d_offpeak, ref_offpeak)
            };
            if ref_sum > 0.0 {
                w * energy / ref_sum
            } else {
                0.0
            }
        })
        .collect();
    Ok(IntervalProfile {
        values,
        reference: reference.to_vec(),
    })
}

/// `d1^alpha * d2^(1-alpha)`; zero when a zero base carries a positive
/// exponent (the continuous extension).
pub fn cobb_douglas_utility(d1: f64, d2: f64, alpha: f64) -> f64 {
    let pow = |base: f64, exp: f64| -> f64 {
        if exp == 0.0 {
            1.0
        } else if base <= 0.0 {
            0.0
        } else {
            base.powf(exp)
        }
    };
    pow(d1, alpha) * pow(d2, 1.0 - alpha)
}

/// Utility value net of electricity payments.
pub fn consumer_surplus(d1: f64, d2: f64, alpha: f64, pi_peak: f64, pi_offpeak: f64) -> f64 {
    cobb_douglas_utility(d1, d2, alpha) - pi_peak * d1 - pi_offpeak * d2
}

/// Reference-shape-weighted mean price over one window. For a tariff that is
/// uniform within the window this is that tariff; for hourly tariffs it is
/// the effective price at which the window's flexible energy is bought, so
/// the budget identity stays exact.
pub fn shape_weighted_price(prices: &[f64], shape: &[f64]) -> f64 {
    debug_assert_eq!(prices.len(), shape.len());
    let total: f64 = shape.iter().sum();
    if total <= 0.0 {
        // Degenerate window: fall back to the plain mean.
        return prices.iter().sum::<f64>() / prices.len().max(1) as f64;
    }
    prices
        .iter()
        .zip(shape)
        .map(|(p, w)| p * w / total)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn split_symmetric() {
        let s = demand_split(0.5, 100.0, 10.0, 10.0).unwrap();
        assert_eq!((s.d_peak, s.d_offpeak), (5.0, 5.0));
    }

    #[test]
    fn split_all_peak() {
        let s = demand_split(1.0, 80.0, 40.0, 20.0).unwrap();
        assert_eq!((s.d_peak, s.d_offpeak), (2.0, 0.0));
    }

    #[test]
    fn split_asymmetric_and_budget_identity() {
        let s = demand_split(0.3, 200.0, 50.0, 20.0).unwrap();
        assert_relative_eq!(s.d_peak, 1.2, max_relative = 1e-12);
        assert_relative_eq!(s.d_offpeak, 7.0, max_relative = 1e-12);
        assert_relative_eq!(s.d_peak * 50.0 + s.d_offpeak * 20.0, 200.0, max_relative = 1e-12);
    }

    #[test]
    fn split_rejects_nonpositive_price() {
        assert!(demand_split(0.5, 1.0, 0.0, 1.0).is_err());
        assert!(demand_split(0.5, 1.0, 1.0, -2.0).is_err());
    }

    #[test]
    fn allocate_uniform() {
        let split = DemandSplit { d_peak: 4.0, d_offpeak: 6.0, budget: 0.0 };
        let prof = allocate_intervals(&split, &[1.0, 1.0, 1.0, 1.0], &[0, 1]).unwrap();
        assert_eq!(prof.values, vec![2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn allocate_zero_window() {
        let split = DemandSplit { d_peak: 0.0, d_offpeak: 6.0, budget: 0.0 };
        let prof = allocate_intervals(&split, &[2.0, 1.0, 3.0, 3.0], &[0, 1]).unwrap();
        assert_eq!(prof.values[0], 0.0);
        assert_eq!(prof.values[1], 0.0);
        assert_relative_eq!(prof.values[2] + prof.values[3], 6.0, max_relative = 1e-12);
    }

    #[test]
    fn allocate_proportional() {
        let split = DemandSplit { d_peak: 1.2, d_offpeak: 7.0, budget: 0.0 };
        let prof = allocate_intervals(&split, &[2.0, 1.0, 3.0, 4.0], &[0, 1]).unwrap();
        assert_relative_eq!(prof.values[0], 0.8, max_relative = 1e-12);
        assert_relative_eq!(prof.values[1], 0.4, max_relative = 1e-12);
        assert_relative_eq!(prof.values[2], 3.0, max_relative = 1e-12);
        assert_relative_eq!(prof.values[3], 4.0, max_relative = 1e-12);
    }

    #[test]
    fn allocate_degenerate_shape_rejected() {
        let split = DemandSplit { d_peak: 1.0, d_offpeak: 0.0, budget: 0.0 };
        assert!(allocate_intervals(&split, &[0.0, 0.0, 1.0], &[0, 1]).is_err());
    }

    #[test]
    fn utility_values() {
        assert_eq!(cobb_douglas_utility(4.0, 4.0, 0.5), 4.0);
        assert_relative_eq!(cobb_douglas_utility(9.0, 1.0, 0.5), 3.0, max_relative = 1e-12);
        assert_eq!(cobb_douglas_utility(0.0, 5.0, 0.3), 0.0);
        // alpha = 0 ignores the first argument entirely.
        assert_eq!(cobb_douglas_utility(0.0, 5.0, 0.0), 5.0);
    }

    #[test]
    fn surplus_values() {
        assert_eq!(consumer_surplus(4.0, 4.0, 0.5, 0.0, 0.0), 4.0);
        assert_relative_eq!(consumer_surplus(9.0, 1.0, 0.5, 0.1, 0.1), 2.0, max_relative = 1e-12);
        assert_eq!(consumer_surplus(0.0, 0.0, 0.5, 10.0, 5.0), 0.0);
    }

    #[test]
    fn weighted_price_uniform_window() {
        assert_relative_eq!(
            shape_weighted_price(&[40.0, 40.0, 40.0], &[1.0, 5.0, 2.0]),
            40.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            shape_weighted_price(&[10.0, 20.0], &[1.0, 3.0]),
            17.5,
            max_relative = 1e-12
        );
    }
}
