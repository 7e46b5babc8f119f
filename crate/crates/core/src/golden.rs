//! Golden-section maximization with a fixed budget of interval reductions.

use crate::error::{Error, Result};

/// `(sqrt(5) - 1) / 2`, the per-reduction shrink factor.
pub const RATIO: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenOutcome {
    /// Midpoint of the final bracket.
    pub argmax: f64,
    pub bracket: (f64, f64),
    /// Every `(x, f(x))` evaluated, in evaluation order.
    pub evaluations: Vec<(f64, f64)>,
    /// Bracket width after each reduction.
    pub widths: Vec<f64>,
}

/// Maximize `f` on `[low, high]` with exactly `reductions` interval
/// reductions. Uses `reductions + 1` evaluations: two interior probes, then
/// one new probe after every reduction except the last.
pub fn maximize<F>(mut f: F, low: f64, high: f64, reductions: usize) -> Result<GoldenOutcome>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(low < high) || !low.is_finite() || !high.is_finite() {
        return Err(Error::config(
            "search.bracket",
            format!("need low < high, got [{low}, {high}]"),
        ));
    }
    if reductions == 0 {
        return Err(Error::config("search.iterations", "need at least one reduction"));
    }
    let mut evaluations = Vec::with_capacity(reductions + 1);
    let mut eval = |x: f64, evals: &mut Vec<(f64, f64)>| -> Result<f64> {
        let y = f(x)?;
        if y.is_nan() {
            return Err(Error::Numeric(format!("objective is NaN at {x}")));
        }
        evals.push((x, y));
        Ok(y)
    };
    let (mut a, mut b) = (low, high);
    let mut c = b - RATIO * (b - a);
    let mut d = a + RATIO * (b - a);
    let mut fc = eval(c, &mut evaluations)?;
    let mut fd = eval(d, &mut evaluations)?;
    let mut widths = Vec::with_capacity(reductions);
    for step in 1..=reductions {
        let last = step == reductions;
        if fc >= fd {
            b = d;
            if !last {
                d = c;
                fd = fc;
                c = b - RATIO * (b - a);
                fc = eval(c, &mut evaluations)?;
            }
        } else {
            a = c;
            if !last {
                c = d;
                fc = fd;
                d = a + RATIO * (b - a);
                fd = eval(d, &mut evaluations)?;
            }
        }
        widths.push(b - a);
    }
    Ok(GoldenOutcome {
        argmax: 0.5 * (a + b),
        bracket: (a, b),
        evaluations,
        widths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_peak() {
        let out = maximize(|x| Ok(-(x - 2.0) * (x - 2.0)), 0.0, 5.0, 30).unwrap();
        assert!((out.argmax - 2.0).abs() < 1e-3);
        assert_eq!(out.evaluations.len(), 31);
    }

    #[test]
    fn width_follows_ratio_powers() {
        let out = maximize(|x| Ok((x * 3.0).sin()), 0.0, 5.0, 30).unwrap();
        for (n, w) in out.widths.iter().enumerate() {
            assert!((w - 5.0 * RATIO.powi(n as i32 + 1)).abs() < 1e-9);
        }
        assert!((RATIO - (5f64.sqrt() - 1.0) / 2.0).abs() <= f64::EPSILON);
    }

    #[test]
    fn peak_at_edge_moves_bracket_to_edge() {
        let out = maximize(Ok, 1.0, 2.0, 20).unwrap();
        assert!(out.bracket.1 == 2.0 && out.argmax > 1.9999);
    }

    #[test]
    fn rejects_degenerate_bracket() {
        assert!(matches!(maximize(Ok, 1.0, 1.0, 3), Err(Error::Config { .. })));
        assert!(maximize(Ok, 0.0, 1.0, 0).is_err());
        assert!(matches!(
            maximize(|_| Ok(f64::NAN), 0.0, 1.0, 3),
            Err(Error::Numeric(_))
        ));
    }
}
