use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transfer::VariationalGaussian;

/// Learned variances of one pair, sorted in descending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceSpectrum {
    pub pair: String,
    pub sigma_sq: Vec<f64>,
}

impl VarianceSpectrum {
    /// Standard deviation over mean of the entries.
    pub fn coefficient_of_variation(&self) -> f64 {
        let n = self.sigma_sq.len() as f64;
        let mean = self.sigma_sq.iter().sum::<f64>() / n;
        let var = self.sigma_sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() / mean
    }
}

pub fn variance_spectrum(pair: impl Into<String>, q: &VariationalGaussian) -> VarianceSpectrum {
    let mut sigma_sq = q.variance();
    sigma_sq.sort_by(|a, b| b.total_cmp(a));
    VarianceSpectrum { pair: pair.into(), sigma_sq }
}

/// CSV with columns `rank,sigma_sq`, rank starting at 0.
pub fn write_spectrum_csv(spec: &VarianceSpectrum, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("rank,sigma_sq\n");
    for (i, v) in spec.sigma_sq.iter().enumerate() {
        text.push_str(&format!("{i},{v:e}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
