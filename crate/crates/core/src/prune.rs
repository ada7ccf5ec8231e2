//! Cosine-similarity filter scoring and capped global prune selection.
//!
//! Every conv filter gets a redundancy score: normalize each filter of a
//! layer to a unit row, then average its signed cosine similarity against
//! the other filters of that layer (row sums of `W̃·W̃ᵀ − I`, divided by the
//! filter count). High positive scores mean the filter duplicates others;
//! negative correlation is kept (the signed metric deliberately does not
//! take absolute values). An absolute-value variant is provided for
//! ablations. Selection ranks all filters of the network together and
//! admits the top global fraction, subject to a per-layer cap.

use crate::tensor::Tensor;

/// Redundancy score of one conv filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterScore {
    pub layer_id: usize,
    pub filter_index: usize,
    pub score: f64,
}

/// Output of [`select_prune_set`].
#[derive(Clone, Debug, PartialEq)]
pub struct PruneSelection {
    /// Chosen (layer_id, filter_index) pairs, in ranking order.
    pub selected: Vec<(usize, usize)>,
    /// Global quota `floor(p · total filters)`.
    pub quota: usize,
    /// Filters the caps prevented from being admitted (quota − selected).
    pub shortfall: usize,
}

impl PruneSelection {
    /// Selected filter indices of one layer, ascending.
    pub fn layer(&self, layer_id: usize) -> Vec<usize> {
        let mut v: Vec<usize> =
            self.selected.iter().filter(|(l, _)| *l == layer_id).map(|&(_, f)| f).collect();
        v.sort_unstable();
        v
    }
}

fn scores_impl(w: &Tensor, absolute: bool) -> Vec<f64> {
    let n_out = w.shape[0];
    assert!(
        w.shape.len() == 4 && n_out >= 2,
        "cosine scores: want a [n_out>=2, c, kh, kw] weight, got {:?}",
        w.shape
    );
    let d = w.numel() / n_out;

    // Unit rows; zero-norm filters stay zero here and are forced to score +1
    // below (dead filters are ideal prune targets).
    let mut unit = vec![0.0; n_out * d];
    let mut zero_norm = vec![false; n_out];
    for f in 0..n_out {
        let row = &w.data[f * d..(f + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_norm[f] = true;
        } else {
            for j in 0..d {
                unit[f * d + j] = row[j] / norm;
            }
        }
    }

    let mut scores = vec![0.0; n_out];
    for f in 0..n_out {
        if zero_norm[f] {
            scores[f] = 1.0;
            continue;
        }
        let mut sum = 0.0;
        for g in 0..n_out {
            if g == f {
                continue;
            }
            let dot: f64 =
                unit[f * d..(f + 1) * d].iter().zip(&unit[g * d..(g + 1) * d]).map(|(a, b)| a * b).sum();
            sum += if absolute { dot.abs() } else { dot };
        }
        scores[f] = sum / n_out as f64;
    }
    scores
}

/// Signed redundancy scores for one layer's filters.
pub fn cosine_scores(layer_weights: &Tensor) -> Vec<f64> {
    scores_impl(layer_weights, false)
}

/// Absolute-value variant: anti-correlated filters score as high as
/// duplicated ones.
pub fn abs_cosine_scores(layer_weights: &Tensor) -> Vec<f64> {
    scores_impl(layer_weights, true)
}

/// Score every conv layer of a stack, tagging layer ids.
pub fn score_layers(layer_weights: &[&Tensor], absolute: bool) -> Vec<FilterScore> {
    let mut out = Vec::new();
    for (layer_id, w) in layer_weights.iter().enumerate() {
        for (filter_index, &score) in scores_impl(w, absolute).iter().enumerate() {
            out.push(FilterScore { layer_id, filter_index, score });
        }
    }
    out
}

/// Rank all filters globally by descending score (ties: lower layer id, then
/// lower filter index) and admit the top `floor(p · total)` of them, skipping
/// filters whose layer already holds `floor(p_max · layer size)` admissions.
///
/// `layer_sizes[l]` is the filter count of layer `l`.
pub fn select_prune_set(scores: &[FilterScore], layer_sizes: &[usize], p: f64, p_max: f64) -> PruneSelection {
    assert!((0.0..=1.0).contains(&p), "prune: p {p} outside [0, 1]");
    assert!((0.0..=1.0).contains(&p_max), "prune: p_max {p_max} outside [0, 1]");
    let total: usize = layer_sizes.iter().sum();
    assert_eq!(scores.len(), total, "prune: {} scores for {total} filters", scores.len());

    let quota = (p * total as f64).floor() as usize;
    let caps: Vec<usize> = layer_sizes.iter().map(|&n| (p_max * n as f64).floor() as usize).collect();

    let mut ranked: Vec<&FilterScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.layer_id.cmp(&b.layer_id))
            .then(a.filter_index.cmp(&b.filter_index))
    });

    let mut taken_per_layer = vec![0usize; layer_sizes.len()];
    let mut selected = Vec::new();
    for s in ranked {
        if selected.len() == quota {
            break;
        }
        if taken_per_layer[s.layer_id] < caps[s.layer_id] {
            taken_per_layer[s.layer_id] += 1;
            selected.push((s.layer_id, s.filter_index));
        }
    }
    let shortfall = quota - selected.len();
    PruneSelection { selected, quota, shortfall }
}
