//! Accuracy, log-likelihood heatmaps, variance spectra and the MI bench.

mod accuracy;
mod heatmap;
mod mibench;
mod spectra;

pub use accuracy::{argmax_rows, evaluate_accuracy};
pub use heatmap::{
    activation_magnitude_map, background_foreground_means, loglik_map, render_heatmap, resize_map, write_pgm, HeatmapImage,
    Interpolation, SpatialMap,
};
pub use mibench::{gaussian_mi, mi_bound_bench, MiBenchConfig, MiEstimate};
pub use spectra::{variance_spectrum, write_spectrum_csv, VarianceSpectrum};
