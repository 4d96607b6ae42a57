use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountPair {
    pub predicted: f64,
    pub actual: f64,
}

/// Count-error summary. `mse` follows the crowd-counting convention: the root
/// of the mean squared count error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mse: f64,
    pub n_images: usize,
    pub pairs: Vec<CountPair>,
}

pub fn count_metrics(pairs: &[(f64, f64)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::arg("count metrics need at least one image"));
    }
    if pairs.iter().any(|(p, a)| !p.is_finite() || !a.is_finite()) {
        return Err(Error::NonFinite { op: "count_metrics" });
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(p, a)| (p - a).abs()).sum::<f64>() / n;
    let mse = (pairs.iter().map(|(p, a)| (p - a) * (p - a)).sum::<f64>() / n).sqrt();
    Ok(MetricReport {
        // Rounding can put the two means one ulp out of order; the true
        // quantities satisfy mae <= mse.
        mae: mae.min(mse),
        mse,
        n_images: pairs.len(),
        pairs: pairs
            .iter()
            .map(|&(predicted, actual)| CountPair { predicted, actual })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_magnitude_errors() {
        let r = count_metrics(&[(100.0, 110.0), (200.0, 190.0)]).unwrap();
        assert_eq!((r.mae, r.mse, r.n_images), (10.0, 10.0, 2));
    }

    #[test]
    fn mixed_errors() {
        let r = count_metrics(&[(10.0, 12.0), (20.0, 16.0)]).unwrap();
        assert_eq!(r.mae, 3.0);
        assert_eq!(r.mse, 10f64.sqrt());
    }

    #[test]
    fn perfect_and_empty() {
        let r = count_metrics(&[(4.0, 4.0)]).unwrap();
        assert_eq!((r.mae, r.mse), (0.0, 0.0));
        assert!(matches!(count_metrics(&[]), Err(Error::Argument(_))));
    }
}
