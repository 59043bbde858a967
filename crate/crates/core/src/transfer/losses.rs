use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Mean cross-entropy of `[B, K]` logits against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = match tape.shape(logits) {
        &[b, k] => (b, k),
        s => return Err(Error::shape("cross_entropy", format!("expected [batch, classes], got {s:?}"))),
    };
    if labels.len() != b || b == 0 {
        return Err(Error::shape("cross_entropy", format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut pick = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {k} classes")));
        }
        pick[i * k + y] = -1.0 / b as f64;
    }
    let pick = tape.constant(&Tensor::new(vec![b, k], pick)?)?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, pick)?;
    tape.sum(picked)
}

/// `T^2 * KL(softmax(teacher / T) || softmax(student / T))`, batch-averaged.
pub fn kd_loss(tape: &mut Tape, teacher_logits: Var, student_logits: Var, temperature: f64) -> Result<Var> {
    if tape.shape(teacher_logits) != tape.shape(student_logits) {
        return Err(Error::shape(
            "kd_loss",
            format!("teacher {:?} vs student {:?}", tape.shape(teacher_logits), tape.shape(student_logits)),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let batch = match tape.shape(student_logits) {
        &[b, _] if b > 0 => b,
        s => return Err(Error::shape("kd_loss", format!("expected [batch, classes], got {s:?}"))),
    };
    let inv_t = 1.0 / temperature;
    let ts = tape.scalar_mul(teacher_logits, inv_t)?;
    let ss = tape.scalar_mul(student_logits, inv_t)?;
    let p_t = tape.softmax(ts)?;
    let logp_t = tape.log_softmax(ts)?;
    let logp_s = tape.log_softmax(ss)?;
    let diff = tape.sub(logp_t, logp_s)?;
    let kl = tape.mul(p_t, diff)?;
    let kl = tape.sum(kl)?;
    tape.scalar_mul(kl, temperature * temperature / batch as f64)
}

/// `sum (t - mu)^2 / 2`, batch-averaged and divided by the per-sample size
/// of `t`. `mu` is the adaptor output (or the student activation itself).
pub fn mse_match_loss(tape: &mut Tape, t: Var, mu: Var) -> Result<Var> {
    let shape = tape.shape(t).to_vec();
    if tape.shape(mu) != shape.as_slice() {
        return Err(Error::shape("mse_match_loss", format!("teacher {shape:?} vs adapted student {:?}", tape.shape(mu))));
    }
    let (batch, per_sample) = match shape.split_first() {
        Some((&b, rest)) if b > 0 && !rest.is_empty() => (b, rest.iter().product::<usize>()),
        _ => return Err(Error::shape("mse_match_loss", format!("expected a batched tensor, got {shape:?}"))),
    };
    let diff = tape.sub(t, mu)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    tape.scalar_mul(s, 0.5 / (batch * per_sample) as f64)
}
