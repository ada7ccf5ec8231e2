//! Aligned orthogonal re-initialization of pruned filters, plus the
//! unscaled-orthogonal / uniform / from-scratch ablation variants.
//!
//! Pruned filters are replaced by mutually orthonormal directions scaled to
//! match the layer's surviving weight magnitudes: each layer draws one
//! aligned scalar uniformly from the [min, max] range of the pruned filters'
//! batch-norm-adjusted norms (`‖W‖₂·|scale|/√(var+ε)`), so the fresh filters
//! re-enter training at a compatible magnitude instead of the raw unit norm
//! that destabilizes training. The orthonormal directions come from a
//! Gram-Schmidt pass seeded by the layer's own weight rows and completed
//! with random Gaussian vectors; pruned filters receive the completion end
//! of the basis, which is orthogonal to every surviving filter whenever the
//! flattened dimension allows. Batch-norm state of re-initialized filters is
//! reset to the identity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::invalid;
use crate::net::{GazeNet, BN_EPS};
use crate::prune::PruneSelection;
use crate::tensor::Tensor;

/// BN-adjusted L2 norms of the given filters: `‖W_fi‖₂·|scale_fi|/√(var_fi+ε)`.
pub fn bn_adjusted_norms(
    layer_weights: &Tensor,
    bn_scale: &Tensor,
    bn_var: &Tensor,
    indices: &[usize],
) -> Result<Vec<f64>> {
    let n_out = layer_weights.shape[0];
    let d = layer_weights.numel() / n_out;
    let mut out = Vec::with_capacity(indices.len());
    for &fi in indices {
        assert!(fi < n_out, "bn-adjusted norms: filter {fi} out of range (layer has {n_out})");
        let var = bn_var.data[fi];
        if var <= 0.0 {
            return Err(invalid!("bn-adjusted norms: filter {fi} has non-positive running variance {var}"));
        }
        let raw: f64 = layer_weights.data[fi * d..(fi + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push(raw * bn_scale.data[fi].abs() / (var + BN_EPS).sqrt());
    }
    Ok(out)
}

/// `n_rows` orthonormal rows of dimension `d = C·K·K`, built by modified
/// Gram-Schmidt over the layer's own weight rows followed by random Gaussian
/// completion. The returned rows are the **last** `n_rows` of the basis, so
/// they prefer directions orthogonal to the existing filters. If `n_rows`
/// exceeds `d`, the first `d` rows are orthonormal and the excess rows fall
/// back to independently drawn unit Gaussians.
pub fn orthogonal_basis(layer_weights: &Tensor, n_rows: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n_out = layer_weights.shape[0];
    let d = layer_weights.numel() / n_out;
    let gauss = Normal::new(0.0, 1.0).unwrap();

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d.min(n_out + n_rows));
    let push_candidate = |basis: &mut Vec<Vec<f64>>, mut v: Vec<f64>| -> bool {
        // Two projection sweeps for numerical stability.
        for _ in 0..2 {
            for b in basis.iter() {
                let dot: f64 = v.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
                for (vj, bj) in v.iter_mut().zip(b.iter()) {
                    *vj -= dot * bj;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return false;
        }
        for vj in v.iter_mut() {
            *vj /= norm;
        }
        basis.push(v);
        true
    };

    // Seed with the layer's weight rows (degenerate rows are skipped), then
    // complete with Gaussian draws until the space or the request is filled.
    for fi in 0..n_out {
        if basis.len() == d {
            break;
        }
        push_candidate(&mut basis, layer_weights.data[fi * d..(fi + 1) * d].to_vec());
    }
    while basis.len() < d.min(n_out.max(n_rows).max(basis.len())) && basis.len() < d {
        if basis.len() >= n_rows && basis.len() >= n_out {
            break;
        }
        push_candidate(&mut basis, (0..d).map(|_| gauss.sample(rng)).collect());
    }
    // Ensure at least n_rows basis rows exist when the dimension allows.
    while basis.len() < n_rows.min(d) {
        push_candidate(&mut basis, (0..d).map(|_| gauss.sample(rng)).collect());
    }

    let mut rows: Vec<Vec<f64>> = if n_rows <= basis.len() {
        basis[basis.len() - n_rows..].to_vec()
    } else {
        basis
    };
    // Degenerate request beyond the dimension: relaxed fallback.
    while rows.len() < n_rows {
        let mut v: Vec<f64> = (0..d).map(|_| gauss.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for vj in v.iter_mut() {
            *vj /= norm;
        }
        rows.push(v);
    }
    Tensor::from_vec(&[n_rows, d], rows.into_iter().flatten().collect())
}

/// One layer's share of a re-initialization plan.
#[derive(Clone, Debug)]
pub struct LayerPlan {
    pub layer_id: usize,
    /// Pruned filter indices, ascending.
    pub pruned: Vec<usize>,
    /// Orthonormal replacement rows, `[pruned.len(), C·K·K]`.
    pub basis: Tensor,
    /// (min, max) of the pruned filters' BN-adjusted norms.
    pub scalar_range: (f64, f64),
    /// Aligned scale per pruned filter (all equal unless per-filter mode).
    pub scalars: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReinitPlan {
    pub layers: Vec<LayerPlan>,
}

/// Build an aligned-orthogonal plan for the selected filters. With
/// `scalar_per_filter` false (the default), one scalar is drawn per layer
/// from that layer's adjusted-norm range; otherwise each filter draws its
/// own.
pub fn plan_aoi(
    net: &GazeNet,
    selection: &PruneSelection,
    scalar_per_filter: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ReinitPlan> {
    let mut layers = Vec::new();
    for layer_id in 0..net.conv_layer_count() {
        let pruned = selection.layer(layer_id);
        if pruned.is_empty() {
            continue;
        }
        let layer = net.conv_layer(layer_id);
        let norms = bn_adjusted_norms(&layer.w, &layer.bn_scale, &layer.bn_var, &pruned)?;
        let lo = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let draw = |rng: &mut ChaCha8Rng| if lo == hi { lo } else { rng.random_range(lo..hi) };
        let scalars: Vec<f64> = if scalar_per_filter {
            (0..pruned.len()).map(|_| draw(rng)).collect()
        } else {
            vec![draw(rng); pruned.len()]
        };
        let basis = orthogonal_basis(&layer.w, pruned.len(), rng);
        layers.push(LayerPlan { layer_id, pruned, basis, scalar_range: (lo, hi), scalars });
    }
    Ok(ReinitPlan { layers })
}

/// Overwrite each planned filter with its unit basis row times the aligned
/// scalar and reset its batch-norm state (scale 1, shift 0, mean 0, var 1).
/// Unplanned filters are untouched; an empty plan is the identity.
pub fn apply_aoi(net: &mut GazeNet, plan: &ReinitPlan) {
    for lp in &plan.layers {
        let layer = net.conv_layer_mut(lp.layer_id);
        let d = layer.w.numel() / layer.w.shape[0];
        assert_eq!(lp.basis.shape, vec![lp.pruned.len(), d], "reinit: basis shape mismatch");
        for (row, &fi) in lp.pruned.iter().enumerate() {
            let b = &lp.basis.data[row * d..(row + 1) * d];
            let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "reinit: zero basis row");
            let s = lp.scalars[row] / norm;
            for (j, &bj) in b.iter().enumerate() {
                layer.w.data[fi * d + j] = bj * s;
            }
            layer.bn_scale.data[fi] = 1.0;
            layer.bn_shift.data[fi] = 0.0;
            layer.bn_mean.data[fi] = 0.0;
            layer.bn_var.data[fi] = 1.0;
        }
    }
}

/// Ablation re-initializations replacing the aligned-orthogonal scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReinitMode {
    /// Aligned orthogonal (the default scheme).
    Aoi,
    /// Orthonormal rows without norm alignment (divergence-prone baseline).
    OrthRaw,
    /// Fan-in uniform re-draw of the pruned filters.
    Uniform,
    /// Re-initialize every parameter of the network.
    Scratch,
}

impl std::fmt::Display for ReinitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReinitMode::Aoi => "aoi",
            ReinitMode::OrthRaw => "orth_raw",
            ReinitMode::Uniform => "uniform",
            ReinitMode::Scratch => "scratch",
        })
    }
}

impl std::str::FromStr for ReinitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aoi" => Ok(ReinitMode::Aoi),
            "orth_raw" => Ok(ReinitMode::OrthRaw),
            "uniform" => Ok(ReinitMode::Uniform),
            "scratch" => Ok(ReinitMode::Scratch),
            other => Err(invalid!("unknown reinit mode '{other}' (want aoi|orth_raw|uniform|scratch)")),
        }
    }
}

/// Apply one of the ablation variants to the selected filters. BN state of
/// re-initialized filters is reset exactly as in [`apply_aoi`].
pub fn variant_reinit(
    net: &mut GazeNet,
    selection: &PruneSelection,
    mode: ReinitMode,
    scalar_per_filter: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    match mode {
        ReinitMode::Aoi => {
            let plan = plan_aoi(net, selection, scalar_per_filter, rng)?;
            apply_aoi(net, &plan);
        }
        ReinitMode::OrthRaw => {
            let mut plan = plan_aoi(net, selection, scalar_per_filter, rng)?;
            for lp in plan.layers.iter_mut() {
                for s in lp.scalars.iter_mut() {
                    *s = 1.0;
                }
            }
            apply_aoi(net, &plan);
        }
        ReinitMode::Uniform => {
            for layer_id in 0..net.conv_layer_count() {
                let pruned = selection.layer(layer_id);
                if pruned.is_empty() {
                    continue;
                }
                let layer = net.conv_layer_mut(layer_id);
                let d = layer.w.numel() / layer.w.shape[0];
                let bound = 1.0 / (d as f64).sqrt();
                for &fi in &pruned {
                    for j in 0..d {
                        layer.w.data[fi * d + j] = rng.random_range(-bound..bound);
                    }
                    layer.bn_scale.data[fi] = 1.0;
                    layer.bn_shift.data[fi] = 0.0;
                    layer.bn_mean.data[fi] = 0.0;
                    layer.bn_var.data[fi] = 1.0;
                }
            }
        }
        ReinitMode::Scratch => {
            *net = GazeNet::init(net.cfg.clone(), rng);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ConvSpec, NetConfig};
    use crate::prune::{score_layers, select_prune_set};
    use crate::rng::stream;

    fn test_net(seed: u64) -> GazeNet {
        let cfg = NetConfig {
            patch: 16,
            conv_stack: vec![ConvSpec::new(6, 3, 2), ConvSpec::new(8, 3, 2)],
            feature_dim: 10,
            bins_x: 6,
            bins_y: 8,
            ..NetConfig::default()
        };
        GazeNet::init(cfg, &mut stream(seed, "init"))
    }

    fn select(net: &GazeNet, p: f64, p_max: f64) -> PruneSelection {
        let weights: Vec<&Tensor> =
            (0..net.conv_layer_count()).map(|i| &net.conv_layer(i).w).collect();
        let scores = score_layers(&weights, false);
        select_prune_set(&scores, &net.conv_layer_sizes(), p, p_max)
    }

    #[test]
    fn adjusted_norms_identity_and_cancellation() {
        let w = Tensor::from_vec(&[2, 4, 1, 1], vec![3.0, 0.0, 4.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let ones = Tensor::full(&[2], 1.0);
        let n = bn_adjusted_norms(&w, &ones, &ones, &[0, 1]).unwrap();
        // var 1 + eps  → divisor √(1+1e-5); close to the raw norms 5 and 2.
        assert!((n[0] - 5.0 / (1.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
        assert!((n[1] - 2.0 / (1.0f64 + BN_EPS).sqrt()).abs() < 1e-12);

        let scale2 = Tensor::full(&[2], 2.0);
        let var4 = Tensor::full(&[2], 4.0);
        let c = bn_adjusted_norms(&w, &scale2, &var4, &[0]).unwrap();
        assert!((c[0] - 5.0 * 2.0 / (4.0f64 + BN_EPS).sqrt()).abs() < 1e-12);

        let zero_w = Tensor::zeros(&[2, 4, 1, 1]);
        assert_eq!(bn_adjusted_norms(&zero_w, &ones, &ones, &[1]).unwrap(), vec![0.0]);

        let bad_var = Tensor::from_vec(&[2], vec![1.0, -0.5]);
        assert!(bn_adjusted_norms(&w, &ones, &bad_var, &[1]).is_err());
    }

    #[test]
    fn basis_rows_are_orthonormal() {
        let net = test_net(3);
        let w = &net.conv_layer(1).w; // [8, 6*3*3=54]
        for n_rows in [1usize, 2, 5, 8] {
            let b = orthogonal_basis(w, n_rows, &mut stream(9, "basis"));
            assert_eq!(b.shape, vec![n_rows, 54]);
            for i in 0..n_rows {
                for j in 0..n_rows {
                    let dot: f64 = b.data[i * 54..(i + 1) * 54]
                        .iter()
                        .zip(&b.data[j * 54..(j + 1) * 54])
                        .map(|(a, c)| a * c)
                        .sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-9, "gram[{i}][{j}] = {dot}");
                }
            }
        }
    }

    #[test]
    fn full_dimension_basis_has_unit_determinant() {
        // 4 filters of flattened dimension 4 → square orthogonal matrix.
        use rand::Rng;
        let mut rng = stream(4, "det");
        let w = Tensor::from_vec(&[4, 4, 1, 1], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = orthogonal_basis(&w, 4, &mut rng);
        // LU determinant with partial pivoting.
        let mut m: Vec<Vec<f64>> = (0..4).map(|i| b.data[i * 4..(i + 1) * 4].to_vec()).collect();
        let mut det = 1.0;
        for col in 0..4 {
            let piv = (col..4).max_by(|&a, &c| m[a][col].abs().partial_cmp(&m[c][col].abs()).unwrap()).unwrap();
            if piv != col {
                m.swap(piv, col);
                det = -det;
            }
            det *= m[col][col];
            for r in col + 1..4 {
                let f = m[r][col] / m[col][col];
                for c in col..4 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
        assert!((det.abs() - 1.0).abs() < 1e-9, "determinant {det}");
    }

    #[test]
    fn degenerate_weight_rows_still_yield_orthonormal_basis() {
        // All filters identical: rank 1; completion must supply the rest.
        let row = vec![1.0, 2.0, 3.0, 4.0];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend(&row);
        }
        let w = Tensor::from_vec(&[4, 4, 1, 1], data);
        let b = orthogonal_basis(&w, 3, &mut stream(8, "basis"));
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 =
                    b.data[i * 4..(i + 1) * 4].iter().zip(&b.data[j * 4..(j + 1) * 4]).map(|(a, c)| a * c).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aoi_reinitializes_only_selected_filters() {
        let mut net = test_net(5);
        let before = net.clone();
        let sel = select(&net, 0.25, 0.5);
        assert!(!sel.selected.is_empty());
        let plan = plan_aoi(&net, &sel, false, &mut stream(1, "reinit")).unwrap();
        apply_aoi(&mut net, &plan);

        for layer_id in 0..net.conv_layer_count() {
            let pruned = sel.layer(layer_id);
            let old = before.conv_layer(layer_id);
            let new = net.conv_layer(layer_id);
            let d = old.w.numel() / old.w.shape[0];
            for fi in 0..old.w.shape[0] {
                let old_row = &old.w.data[fi * d..(fi + 1) * d];
                let new_row = &new.w.data[fi * d..(fi + 1) * d];
                if pruned.contains(&fi) {
                    assert_ne!(old_row, new_row, "layer {layer_id} filter {fi} should change");
                    assert_eq!(new.bn_scale.data[fi], 1.0);
                    assert_eq!(new.bn_shift.data[fi], 0.0);
                    assert_eq!(new.bn_mean.data[fi], 0.0);
                    assert_eq!(new.bn_var.data[fi], 1.0);
                } else {
                    assert_eq!(old_row, new_row, "layer {layer_id} filter {fi} must be untouched");
                    assert_eq!(old.bn_scale.data[fi], new.bn_scale.data[fi]);
                    assert_eq!(old.bn_mean.data[fi], new.bn_mean.data[fi]);
                }
            }
        }
        // FC layers untouched.
        assert_eq!(before.fusion_w.data, net.fusion_w.data);
        assert_eq!(before.head_w.data, net.head_w.data);
    }

    #[test]
    fn aoi_norms_and_orthogonality_contract() {
        let mut net = test_net(11);
        let sel = select(&net, 0.4, 0.5);
        let plan = plan_aoi(&net, &sel, false, &mut stream(2, "reinit")).unwrap();
        apply_aoi(&mut net, &plan);
        for lp in &plan.layers {
            let layer = net.conv_layer(lp.layer_id);
            let d = layer.w.numel() / layer.w.shape[0];
            let (lo, hi) = lp.scalar_range;
            for (i, &fi) in lp.pruned.iter().enumerate() {
                let row = &layer.w.data[fi * d..(fi + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - lp.scalars[i]).abs() < 1e-9, "assigned norm");
                assert!(lp.scalars[i] >= lo - 1e-12 && lp.scalars[i] <= hi + 1e-12);
                for &fj in &lp.pruned[i + 1..] {
                    let other = &layer.w.data[fj * d..(fj + 1) * d];
                    let cos = crate::tensor::cosine(row, other);
                    assert!(cos.abs() <= 1e-6, "pruned filters {fi},{fj} cosine {cos}");
                }
            }
        }
    }

    #[test]
    fn empty_selection_is_identity() {
        let mut net = test_net(2);
        let before = net.clone();
        let sel = select(&net, 0.0, 0.5);
        let plan = plan_aoi(&net, &sel, false, &mut stream(0, "reinit")).unwrap();
        apply_aoi(&mut net, &plan);
        for ((_, a), (_, b)) in before.named_tensors().iter().zip(net.named_tensors().iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn single_pruned_filter_uses_collapsed_range() {
        let mut net = test_net(6);
        // Force exactly one selection.
        let sel = PruneSelection { selected: vec![(0, 2)], quota: 1, shortfall: 0 };
        let plan = plan_aoi(&net, &sel, false, &mut stream(3, "reinit")).unwrap();
        assert_eq!(plan.layers.len(), 1);
        let (lo, hi) = plan.layers[0].scalar_range;
        assert_eq!(lo, hi);
        assert_eq!(plan.layers[0].scalars, vec![lo]);
        apply_aoi(&mut net, &plan);
    }

    #[test]
    fn orth_raw_keeps_unit_norms() {
        let mut net = test_net(7);
        let sel = select(&net, 0.25, 0.5);
        variant_reinit(&mut net, &sel, ReinitMode::OrthRaw, false, &mut stream(4, "reinit")).unwrap();
        for layer_id in 0..net.conv_layer_count() {
            let layer = net.conv_layer(layer_id);
            let d = layer.w.numel() / layer.w.shape[0];
            for fi in sel.layer(layer_id) {
                let norm: f64 =
                    layer.w.data[fi * d..(fi + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9, "orth_raw norm {norm}");
            }
        }
    }

    #[test]
    fn uniform_reinit_respects_fan_in_bound() {
        let mut net = test_net(8);
        let sel = select(&net, 0.25, 0.5);
        variant_reinit(&mut net, &sel, ReinitMode::Uniform, false, &mut stream(5, "reinit")).unwrap();
        for layer_id in 0..net.conv_layer_count() {
            let layer = net.conv_layer(layer_id);
            let d = layer.w.numel() / layer.w.shape[0];
            let bound = 1.0 / (d as f64).sqrt();
            for fi in sel.layer(layer_id) {
                for &v in &layer.w.data[fi * d..(fi + 1) * d] {
                    assert!(v.abs() <= bound, "uniform value {v} outside ±{bound}");
                }
            }
        }
    }

    #[test]
    fn scratch_replaces_everything() {
        let mut net = test_net(9);
        let before = net.clone();
        let sel = select(&net, 0.1, 0.5);
        variant_reinit(&mut net, &sel, ReinitMode::Scratch, false, &mut stream(6, "reinit")).unwrap();
        assert_ne!(before.head_w.data, net.head_w.data);
        assert_ne!(before.branches[0].convs[0].w.data, net.branches[0].convs[0].w.data);
        assert_eq!(before.cfg, net.cfg);
    }

    #[test]
    fn post_aoi_cosine_scores_of_reinitialized_filters_are_tiny() {
        let mut net = test_net(13);
        let sel = select(&net, 0.4, 0.5);
        let plan = plan_aoi(&net, &sel, false, &mut stream(7, "reinit")).unwrap();
        apply_aoi(&mut net, &plan);
        for lp in &plan.layers {
            if lp.pruned.len() < 2 {
                continue;
            }
            let scores = crate::prune::cosine_scores(&net.conv_layer(lp.layer_id).w);
            // Build each re-initialized filter's mean cosine against the
            // other *re-initialized* filters only; must be ~0.
            let layer = net.conv_layer(lp.layer_id);
            let d = layer.w.numel() / layer.w.shape[0];
            for (i, &fi) in lp.pruned.iter().enumerate() {
                for &fj in &lp.pruned[i + 1..] {
                    let cos = crate::tensor::cosine(
                        &layer.w.data[fi * d..(fi + 1) * d],
                        &layer.w.data[fj * d..(fj + 1) * d],
                    );
                    assert!(cos.abs() <= 1e-6);
                }
            }
            let _ = scores;
        }
    }
}
