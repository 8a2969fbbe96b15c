use super::{loss_h, loss_ins, loss_part, spread_mean_gradients, HyperParams, LossDiagnostics, MeanFeatureTable};
use crate::error::{Error, Result};
use crate::hierarchy::{build_mask_tree, MaskTree};
use crate::raster::{backprop_map_gradient, compute_weights, render_features, FeatureMap, WeightField};
use crate::scene::Scene;
use crate::view::ViewPacket;

/// A view with its cached blending weights and mask tree.
#[derive(Clone, Debug)]
pub struct PreparedView {
    pub packet: ViewPacket,
    pub weights: WeightField,
    pub tree: MaskTree,
}

pub fn prepare_view(scene: &Scene, packet: ViewPacket, theta: f64) -> Result<PreparedView> {
    packet.validate()?;
    let weights = compute_weights(scene, &packet.camera)?;
    let tree = build_mask_tree(&packet.masks, theta)?;
    Ok(PreparedView { packet, weights, tree })
}

/// Which objective to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Hierarchical,
    Instance,
    Part,
    Total,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    /// Unweighted per-term sums over views.
    pub l_h: f64,
    pub l_ins: f64,
    pub l_part: f64,
    /// Gradient of `value` with respect to the flat `n × d` features.
    pub gradient: Vec<f64>,
    pub diagnostics: LossDiagnostics,
}

/// `L_h + λ1 L_ins + λ2 L_part` summed over `views`, with its feature gradient.
pub fn total_loss(views: &[PreparedView], features: &[f64], d: usize, hp: &HyperParams) -> Result<TotalLoss> {
    evaluate_term(views, features, d, hp, LossTerm::Total)
}

/// Evaluates one term (or the weighted total) and back-propagates it to the
/// point features. Views are processed in order, so the result is
/// reproducible bit for bit.
pub fn evaluate_term(
    views: &[PreparedView],
    features: &[f64],
    d: usize,
    hp: &HyperParams,
    term: LossTerm,
) -> Result<TotalLoss> {
    let (w_h, w_ins, w_part) = match term {
        LossTerm::Hierarchical => (1.0, 0.0, 0.0),
        LossTerm::Instance => (0.0, 1.0, 0.0),
        LossTerm::Part => (0.0, 0.0, 1.0),
        LossTerm::Total => (1.0, hp.lambda1, hp.lambda2),
    };
    let mut out = TotalLoss {
        value: 0.0,
        l_h: 0.0,
        l_ins: 0.0,
        l_part: 0.0,
        gradient: vec![0.0; features.len()],
        diagnostics: LossDiagnostics::default(),
    };
    for view in views {
        if view.weights.n_points() * d != features.len() {
            return Err(Error::Loss(format!(
                "view {} was prepared for {} points",
                view.packet.view_id,
                view.weights.n_points()
            )));
        }
        let map = render_features(&view.weights, features, d)?;
        let masks = &view.packet.masks;
        let means = MeanFeatureTable::compute(&map, masks)?;

        let (l_h, mut map_grad) = loss_h(&map, masks, &means)?;
        if w_h != 1.0 {
            map_grad = FeatureMap::zeros(map.d, map.height, map.width);
        }
        let ins = loss_ins(&means, hp.omega, hp.prune_pairs);
        let part = loss_part(&means, &view.tree, hp.tau, hp.literal_denominator, hp.prune_pairs)?;
        if w_ins != 0.0 {
            spread_mean_gradients(&mut map_grad, masks, &means, &ins.grads, w_ins);
        }
        if w_part != 0.0 {
            spread_mean_gradients(&mut map_grad, masks, &means, &part.grads, w_part);
        }
        let grad = backprop_map_gradient(&view.weights, &map_grad)?;
        for (g, v) in out.gradient.iter_mut().zip(grad) {
            *g += v;
        }
        out.l_h += l_h;
        out.l_ins += ins.value;
        out.l_part += part.value;
        out.value += w_h * l_h + w_ins * ins.value + w_part * part.value;
        out.diagnostics.absorb(&ins.diagnostics);
        out.diagnostics.absorb(&part.diagnostics);
    }
    Ok(out)
}
