use super::{cosine_of, LossDiagnostics, MeanFeatureTable, PRUNE_COSINE, SINGULAR_DISTANCE};

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceLoss {
    pub value: f64,
    /// Gradient per table entry, in table order.
    pub grads: Vec<Vec<f64>>,
    pub diagnostics: LossDiagnostics,
}

/// Instance-wise loss over all ordered pairs of one view's mask means:
/// `1/(N(N−1)) Σ_{i≠j} (ln(1/‖M̄_i − M̄_j‖) − |l_i − l_j| ln Ω)²`.
///
/// Pairs with coincident means are skipped and counted; the normalization
/// still uses the full `N(N−1)`.
pub fn loss_ins(means: &MeanFeatureTable, omega: f64, prune: bool) -> InstanceLoss {
    let entries = &means.entries;
    let n = entries.len();
    let d = entries.first().map_or(0, |e| e.mean.len());
    let mut grads = vec![vec![0.0; d]; n];
    let mut diagnostics = LossDiagnostics::default();
    if n < 2 {
        return InstanceLoss { value: 0.0, grads, diagnostics };
    }
    let norm = 1.0 / (n * (n - 1)) as f64;
    let ln_omega = omega.ln();
    let mut value = 0.0;
    // ordered pairs (i, j) and (j, i) contribute identical terms
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&entries[i], &entries[j]);
            let diff: Vec<f64> = a.mean.iter().zip(&b.mean).map(|(x, y)| x - y).collect();
            let dist2: f64 = diff.iter().map(|x| x * x).sum();
            let dist = dist2.sqrt();
            if dist <= SINGULAR_DISTANCE {
                diagnostics.ins_coincident_pairs += 2;
                continue;
            }
            if prune && cosine_of(&a.mean, &b.mean) > PRUNE_COSINE {
                diagnostics.ins_pruned_pairs += 2;
                continue;
            }
            let gap = (a.level.index() as f64 - b.level.index() as f64).abs();
            let t = -dist.ln() - gap * ln_omega;
            value += 2.0 * t * t;
            // d(t²)/dM̄_i = −2t (M̄_i − M̄_j)/‖·‖², doubled for both orders
            let coeff = -4.0 * t * norm / dist2;
            for c in 0..d {
                grads[i][c] += coeff * diff[c];
                grads[j][c] -= coeff * diff[c];
            }
        }
    }
    InstanceLoss {
        value: norm * value,
        grads,
        diagnostics,
    }
}
