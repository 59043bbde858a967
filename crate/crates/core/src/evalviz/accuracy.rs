use crate::data::SampleBatch;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

const CHUNK: usize = 256;

/// Row-wise argmax of a `[B, N]` tensor; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let &[_, n] = logits.shape() else {
        return Err(Error::shape("argmax_rows", format!("expected [B, N], got {:?}", logits.shape())));
    };
    Ok(logits
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Eval-mode argmax accuracy in `[0, 1]`.
pub fn evaluate_accuracy(net: &Network, data: &SampleBatch) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let (logits, _) = net.eval(&data.images.slice_rows(start, end)?)?;
        let pred = argmax_rows(&logits)?;
        correct += pred.iter().zip(&data.labels[start..end]).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / n as f64)
}
