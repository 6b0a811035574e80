//! The attack objective: adversarial margin loss, flow total-variation loss,
//! and their weighted combination evaluated through the warp and classifier.

use crate::error::{Error, Result};
use crate::models::DifferentiableModel;
use crate::tensor::{argmax_excluding, Tape};
use crate::warp::{FlowField, Image};

/// Epsilon folded into the flow-loss square roots so the gradient stays
/// finite at the constant-flow initialization.
pub const FLOW_LOSS_EPS: f64 = 1e-8;

/// Per-axis factors mapping pixel displacements onto the [-1, 1]-normalized
/// sampling grid spanned by the spatial-transformer convention: one pixel of
/// movement along an axis of size d covers 2/(d-1) of the grid.
///
/// The joint attack objective measures flow smoothness on this grid, which
/// is what makes the published tau scale (0.05) balance the margin term on
/// small images; flow fields themselves stay in pixel units everywhere.
pub fn grid_normalization(height: usize, width: usize) -> (f64, f64) {
    let axis = |d: usize| 2.0 / (d.max(2) - 1) as f64;
    (axis(height), axis(width))
}

/// What the attack is trying to make the classifier do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackGoal {
    /// Predict `target`, which must differ from the true class.
    Targeted { target: usize, true_class: usize },
    /// Predict anything other than the true class.
    Untargeted { true_class: usize },
}

impl AttackGoal {
    pub fn true_class(&self) -> usize {
        match *self {
            AttackGoal::Targeted { true_class, .. } => true_class,
            AttackGoal::Untargeted { true_class } => true_class,
        }
    }

    pub fn target(&self) -> Option<usize> {
        match *self {
            AttackGoal::Targeted { target, .. } => Some(target),
            AttackGoal::Untargeted { .. } => None,
        }
    }

    /// Does a prediction satisfy the adversarial goal?
    pub fn satisfied_by(&self, prediction: usize) -> bool {
        match *self {
            AttackGoal::Targeted { target, .. } => prediction == target,
            AttackGoal::Untargeted { true_class } => prediction != true_class,
        }
    }

    /// Margin-loss parameters: the class the loss pivots on and whether the
    /// untargeted form is used.
    pub(crate) fn margin_args(&self) -> (usize, bool) {
        match *self {
            AttackGoal::Targeted { target, .. } => (target, false),
            AttackGoal::Untargeted { true_class } => (true_class, true),
        }
    }
}

/// Weights and goal of the joint objective adv_loss + tau * flow_loss.
#[derive(Debug, Clone, Copy)]
pub struct AttackObjectiveConfig {
    /// Flow-loss weight; must be nonnegative.
    pub tau: f64,
    /// Confidence margin floor.
    pub kappa: f64,
    pub goal: AttackGoal,
}

impl AttackObjectiveConfig {
    pub fn new(tau: f64, kappa: f64, goal: AttackGoal) -> Result<Self> {
        if !(tau >= 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be >= 0, got {tau}")));
        }
        if let AttackGoal::Targeted { target, true_class } = goal {
            if target == true_class {
                return Err(Error::InvalidArgument(format!(
                    "targeted attack with target == true class ({target})"
                )));
            }
        }
        Ok(AttackObjectiveConfig { tau, kappa, goal })
    }
}

/// Targeted margin loss: max(max_{i != t} g_i - g_t, kappa).
pub fn adv_loss(logits: &[f64], target: usize, kappa: f64) -> Result<f64> {
    check_logits(logits, target)?;
    let (_, best) = argmax_excluding(logits, target);
    Ok((best - logits[target]).max(kappa))
}

/// Untargeted margin loss: max(g_y - max_{i != y} g_i, kappa).
pub fn adv_loss_untargeted(logits: &[f64], true_class: usize, kappa: f64) -> Result<f64> {
    check_logits(logits, true_class)?;
    let (_, best) = argmax_excluding(logits, true_class);
    Ok((logits[true_class] - best).max(kappa))
}

fn check_logits(logits: &[f64], class: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "margin loss needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if class >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(())
}

/// Total-variation smoothness penalty of a flow field: for every ordered
/// pair of 4-connected neighbors (p, q),
/// sqrt((du_p - du_q)^2 + (dv_p - dv_q)^2 + eps), summed. Each adjacency is
/// counted once in each direction.
pub fn flow_loss(f: &FlowField) -> Result<f64> {
    if !f.is_finite() {
        return Err(Error::NonFinite("flow field".into()));
    }
    let mut tape = Tape::new();
    let fv = tape.leaf(f.to_tensor());
    let loss = tape.flow_tv_loss(fv, FLOW_LOSS_EPS)?;
    Ok(tape.scalar_value(loss))
}

/// One evaluation of the joint objective at (x, f).
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    /// adv + tau * flow
    pub value: f64,
    pub adv: f64,
    pub flow: f64,
    /// Logits of the warped image.
    pub logits: Vec<f64>,
    /// d(value)/d(flow) in [du..., dv...] layout; present when requested.
    pub grad: Option<Vec<f64>>,
}

/// Evaluate adv_loss(warp(x, f)) + tau * flow_loss(f), differentiating
/// through the bilinear warp and the classifier when `with_grad` is set.
///
/// The flow term measures neighbor displacement differences on the
/// normalized sampling grid (see [`grid_normalization`]); its reported
/// `flow` component is that grid-scale total variation.
pub fn total_objective<G: DifferentiableModel + ?Sized>(
    x: &Image,
    f: &FlowField,
    model: &G,
    cfg: &AttackObjectiveConfig,
    with_grad: bool,
) -> Result<ObjectiveEval> {
    if f.height != x.height || f.width != x.width {
        return Err(Error::ShapeMismatch {
            op: "total_objective",
            left: vec![x.height, x.width],
            right: vec![f.height, f.width],
        });
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.to_tensor());
    let mut flow_leaf = f.to_tensor();
    flow_leaf.requires_grad = with_grad;
    let fv = tape.leaf(flow_leaf);

    let warped = tape.bilinear_warp(xv, fv)?;
    let batch = tape.reshape(warped, vec![1, x.channels, x.height, x.width])?;
    let logits_var = model.forward_eval(&mut tape, batch)?;

    let (class, untargeted) = cfg.goal.margin_args();
    let adv = tape.margin_loss(logits_var, class, cfg.kappa, untargeted)?;
    let (su, sv) = grid_normalization(x.height, x.width);
    let flow = tape.flow_tv_loss_scaled(fv, FLOW_LOSS_EPS, su, sv)?;
    let weighted = tape.mul_scalar(flow, cfg.tau);
    let value = tape.add(adv, weighted)?;

    let eval = ObjectiveEval {
        value: tape.scalar_value(value),
        adv: tape.scalar_value(adv),
        flow: tape.scalar_value(flow),
        logits: tape.data(logits_var).to_vec(),
        grad: None,
    };
    if !with_grad {
        return Ok(eval);
    }
    tape.backward(value)?;
    Ok(ObjectiveEval {
        grad: Some(tape.grad(fv).expect("flow gradient populated").to_vec()),
        ..eval
    })
}
