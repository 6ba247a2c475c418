use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::Corpus;

/// Whole-corpus split into (train, val, test). Counts are rounded from the
/// ratios, every nonzero ratio receives at least one corpus, and each part
/// keeps the input's relative corpus order.
pub fn split(corpora: &[Corpus], ratios: [f64; 3], seed: u64) -> Result<(Vec<Corpus>, Vec<Corpus>, Vec<Corpus>)> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let n = corpora.len();
    let nonzero = ratios.iter().filter(|r| **r > 0.0).count();
    if n < nonzero {
        return Err(Error::Split(format!(
            "{n} corpora cannot fill {nonzero} non-empty splits"
        )));
    }
    let mut counts = [0usize; 3];
    for k in 0..2 {
        counts[k] = ((ratios[k] * n as f64).round() as usize).max(usize::from(ratios[k] > 0.0));
    }
    counts[2] = n.saturating_sub(counts[0] + counts[1]);
    if ratios[2] > 0.0 && counts[2] == 0 {
        let donor = if counts[0] >= counts[1] { 0 } else { 1 };
        counts[donor] -= 1;
        counts[2] = 1;
    }
    if counts[0] + counts[1] + counts[2] != n {
        return Err(Error::Split(format!(
            "ratios {ratios:?} cannot be met with {n} corpora"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed, 0x5917).shuffle(&mut order);
    let mut parts: [Vec<usize>; 3] = Default::default();
    parts[0] = order[..counts[0]].to_vec();
    parts[1] = order[counts[0]..counts[0] + counts[1]].to_vec();
    parts[2] = order[counts[0] + counts[1]..].to_vec();
    let [a, b, c] = parts.map(|mut idx| {
        idx.sort_unstable();
        idx.into_iter().map(|i| corpora[i].clone()).collect::<Vec<_>>()
    });
    Ok((a, b, c))
}
