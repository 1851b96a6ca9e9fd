//! Evaluation metrics: MIC/TIC, 1-Wasserstein distance, linear R², and the
//! per-model report.

mod linear;
mod mic;
mod report;
mod wd;

pub use linear::{kmeans2_1d, r2_linear, TwoMeans, R2};
pub use mic::{characteristic_matrix, mic, mic_tic, tic, CharacteristicMatrix, MicOptions, MIN_SAMPLES};
pub use report::{
    encode_dataset, evaluate_model, evaluate_readouts, write_latents, Encoding, MetricReport, PairMetrics, REPORT_HEADER,
};
pub use wd::wd1;
