use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    #[default]
    Macro,
    Micro,
    Weighted,
}

impl fmt::Display for F1Average {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            F1Average::Macro => "macro",
            F1Average::Micro => "micro",
            F1Average::Weighted => "weighted",
        })
    }
}

impl FromStr for F1Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(F1Average::Macro),
            "micro" => Ok(F1Average::Micro),
            "weighted" => Ok(F1Average::Weighted),
            other => Err(Error::InvalidArgument(format!("unknown F1 average {other:?}"))),
        }
    }
}

fn check(y_true: &[usize], y_pred: &[usize]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::InvalidArgument(format!("{} gold labels but {} predictions", y_true.len(), y_pred.len())));
    }
    if y_true.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty set".into()));
    }
    Ok(())
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check(y_true, y_pred)?;
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y_true.len() as f64)
}

/// F1 over the classes present in either gold or predicted labels. A class
/// with no predicted and no gold instances cannot occur; a zero denominator
/// otherwise scores 0.
pub fn f1_score(y_true: &[usize], y_pred: &[usize], average: F1Average) -> Result<f64> {
    check(y_true, y_pred)?;
    if average == F1Average::Micro {
        // Single-label micro F1 equals accuracy.
        return accuracy(y_true, y_pred);
    }
    let classes: BTreeSet<usize> = y_true.iter().chain(y_pred).copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let tp = y_true.iter().zip(y_pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let support = y_true.iter().filter(|&&t| t == c).count() as f64;
        let predicted = y_pred.iter().filter(|&&p| p == c).count() as f64;
        let denom = support + predicted;
        let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
        total += match average {
            F1Average::Weighted => f1 * support,
            _ => f1,
        };
    }
    Ok(match average {
        F1Average::Weighted => total / y_true.len() as f64,
        _ => total / classes.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        let t = [0, 0, 1, 1, 2, 2];
        let p = [0, 1, 1, 1, 2, 0];
        assert!((accuracy(&t, &p).unwrap() - 4.0 / 6.0).abs() < 1e-12);
        // per-class F1: 0.5, 0.8, 0.6667
        let expected = (0.5 + 0.8 + 2.0 / 3.0) / 3.0;
        assert!((f1_score(&t, &p, F1Average::Macro).unwrap() - expected).abs() < 1e-12);
        assert!((f1_score(&t, &p, F1Average::Weighted).unwrap() - expected).abs() < 1e-12);
        assert!((f1_score(&t, &p, F1Average::Micro).unwrap() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn predicted_only_class_counts_as_zero() {
        let f1 = f1_score(&[0, 0], &[0, 1], F1Average::Macro).unwrap();
        assert!((f1 - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        assert!(accuracy(&[], &[]).is_err());
        assert!(f1_score(&[0], &[0, 1], F1Average::Macro).is_err());
    }
}
