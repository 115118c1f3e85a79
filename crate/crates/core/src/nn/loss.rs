use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Per-example cross-entropy summed over time steps. `logits[t]` is the
/// B×K output at step `t` and `targets[t]` its B class indices.
pub fn sequence_cross_entropy<G: Graph>(
    g: &mut G,
    logits: &[G::Node],
    targets: &[Vec<usize>],
) -> Result<G::Node> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} logit steps against {} target steps",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = g.softmax_cross_entropy(&logits[0], &targets[0])?;
    for (z, y) in logits.iter().zip(targets).skip(1) {
        let step = g.softmax_cross_entropy(z, y)?;
        total = g.add(&total, &step)?;
    }
    Ok(total)
}

/// Number of rows whose argmax equals the target.
pub fn correct_count(logits: &Tensor, targets: &[usize]) -> usize {
    logits
        .argmax_rows()
        .iter()
        .zip(targets)
        .filter(|(p, t)| p == t)
        .count()
}

/// Bits per character from a mean per-character cross-entropy in nats.
pub fn bits_per_char(mean_nats: f64) -> f64 {
    mean_nats / std::f64::consts::LN_2
}
