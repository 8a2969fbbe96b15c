use std::collections::BTreeMap;

use super::{cosine_of, LossDiagnostics, MeanFeatureTable, PRUNE_COSINE, SINGULAR_DISTANCE};
use crate::error::{Error, Result};
use crate::hierarchy::{siblings_under, MaskTree};
use crate::scene::Level;

#[derive(Clone, Debug, PartialEq)]
pub struct PartLoss {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
    pub diagnostics: LossDiagnostics,
}

fn shifted(v: &[f64], origin: &[f64]) -> Vec<f64> {
    v.iter().zip(origin).map(|(a, b)| a - b).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine between `mi − parent` and `mj − parent`.
pub fn part_similarity(mi: &[f64], mj: &[f64], parent: &[f64]) -> Result<f64> {
    let a = shifted(mi, parent);
    let b = shifted(mj, parent);
    let (na, nb) = (norm(&a), norm(&b));
    if na <= SINGULAR_DISTANCE || nb <= SINGULAR_DISTANCE {
        return Err(Error::Loss("mean coincides with its parent mean".into()));
    }
    Ok((a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}

/// One similarity `s = cos(a, b)` with `a = m_i − m_p`, `b = m_j − m_p`, and
/// its partial derivatives with respect to `a` and `b`.
struct Similarity {
    other: usize,
    value: f64,
    d_a: Vec<f64>,
    d_b: Vec<f64>,
}

fn similarity(a: &[f64], na: f64, mj: &[f64], parent: &[f64], other: usize) -> Option<Similarity> {
    let b = shifted(mj, parent);
    let nb = norm(&b);
    if nb <= SINGULAR_DISTANCE {
        return None;
    }
    let s = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    let d_a = a.iter().zip(&b).map(|(x, y)| y / (na * nb) - s * x / (na * na)).collect();
    let d_b = a.iter().zip(&b).map(|(x, y)| x / (na * nb) - s * y / (nb * nb)).collect();
    Some(Similarity { other, value: s, d_a, d_b })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Part-wise contrastive loss. Anchors are non-root masks at levels ≥ 2;
/// positives are the anchor's siblings and negatives the same-level masks
/// under a different parent. Similarities subtract the anchor's parent mean.
///
/// The value is `−1/(L'·N_p) Σ log(exp(s⁺/τ)/Z)` with `L'` the number of
/// levels that produced a term and `N_p` the number of (anchor, positive)
/// terms. With `literal_denominator` `Z` sums the negatives only; otherwise
/// it also includes the positive.
pub fn loss_part(
    means: &MeanFeatureTable,
    tree: &MaskTree,
    tau: f64,
    literal_denominator: bool,
    prune: bool,
) -> Result<PartLoss> {
    let entries = &means.entries;
    let d = entries.first().map_or(0, |e| e.mean.len());
    let mut grads = vec![vec![0.0; d]; entries.len()];
    let mut diagnostics = LossDiagnostics::default();

    let mut by_level: BTreeMap<Level, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        if tree.node(e.id).is_none() {
            return Err(Error::Loss(format!("mask {} is missing from the tree", e.id)));
        }
        by_level.entry(e.level).or_default().push(i);
    }

    let mut total = 0.0;
    let mut terms = 0usize;
    let mut levels_used = 0usize;
    for (level, members) in &by_level {
        if *level == Level::Whole {
            continue;
        }
        let mut level_terms = 0usize;
        for &i in members {
            let id = entries[i].id;
            let Some(parent_id) = tree.parent(id) else {
                diagnostics.part_skipped_anchors += 1;
                continue;
            };
            let Some(p) = means.position(parent_id) else {
                diagnostics.part_skipped_anchors += 1;
                continue;
            };
            let parent = &entries[p].mean;
            let a = shifted(&entries[i].mean, parent);
            let na = norm(&a);
            if na <= SINGULAR_DISTANCE {
                diagnostics.part_skipped_anchors += 1;
                continue;
            }
            let positive_ids = siblings_under(tree, id)?;
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for &j in members {
                if j == i {
                    continue;
                }
                let is_positive = positive_ids.contains(&entries[j].id);
                let is_negative = tree.parent(entries[j].id) != Some(parent_id);
                if !is_positive && !is_negative {
                    continue;
                }
                if prune && cosine_of(&entries[i].mean, &entries[j].mean) > PRUNE_COSINE {
                    diagnostics.part_pruned_pairs += 1;
                    continue;
                }
                match similarity(&a, na, &entries[j].mean, parent, j) {
                    Some(s) if is_positive => positives.push(s),
                    Some(s) => negatives.push(s),
                    None => diagnostics.part_degenerate_pairs += 1,
                }
            }
            if positives.is_empty() || negatives.is_empty() {
                diagnostics.part_skipped_anchors += 1;
                continue;
            }

            let neg_scaled = negatives.iter().map(|s| s.value / tau);
            let neg_lse = log_sum_exp(neg_scaled.clone());
            for pos in &positives {
                let pos_scaled = pos.value / tau;
                let log_z = if literal_denominator {
                    neg_lse
                } else {
                    log_sum_exp(neg_scaled.clone().chain(std::iter::once(pos_scaled)))
                };
                let term = log_z - pos_scaled;
                // d term / d s for the positive and each negative, before 1/(L'N_p)
                let mut weights: Vec<(&Similarity, f64)> = Vec::with_capacity(negatives.len() + 1);
                let pos_weight = if literal_denominator {
                    -1.0 / tau
                } else {
                    ((pos_scaled - log_z).exp() - 1.0) / tau
                };
                weights.push((pos, pos_weight));
                for neg in &negatives {
                    weights.push((neg, (neg.value / tau - log_z).exp() / tau));
                }
                total += term;
                for (s, w) in weights {
                    for c in 0..d {
                        grads[i][c] += w * s.d_a[c];
                        grads[s.other][c] += w * s.d_b[c];
                        grads[p][c] -= w * (s.d_a[c] + s.d_b[c]);
                    }
                }
                level_terms += 1;
            }
        }
        if level_terms > 0 {
            levels_used += 1;
            terms += level_terms;
        }
    }

    if terms == 0 {
        return Ok(PartLoss {
            value: 0.0,
            grads: vec![vec![0.0; d]; entries.len()],
            diagnostics,
        });
    }
    let scale = 1.0 / (levels_used * terms) as f64;
    for g in grads.iter_mut().flatten() {
        *g *= scale;
    }
    Ok(PartLoss {
        value: scale * total,
        grads,
        diagnostics,
    })
}
