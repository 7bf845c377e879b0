//! The training loop shared by every update rule.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diagnostics::{grad_alignment_deg, matrix_principal_angles, LayerMetrics, MetricsRecord};
use crate::error::{Error, Result};
use crate::feedback::{mix_seed, AlignmentTargets, FeedbackBundle, FeedbackParams};
use crate::harness::data::{augment, Dataset, Split};
use crate::learning::adam::{
    adam_direction, adam_update, apply_step, AdamConfig, LayerMoments, Moments, WeightMoments,
};
use crate::learning::grads::{
    backward_with, bp_backward, chain_to_factors, pseudo_grad_w, ssa_factor_grads, variant_feedback, FactorGrads,
    LayerGrad, SignFeedback,
};
use crate::learning::rank::{descending_order, next_rank, select_components, RankSchedule};
use crate::model::{count_cost, FactoredWeight, InputShape, Layer, LayerKind, LayerTape, Network, NetworkSpec, Weight};
use crate::numerics::{frobenius_cosine, tangent_project, Matrix};
use crate::objectives::{argmax, ce_loss_and_delta, hoyer_grad, LossWeights};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodKind {
    Ssa,
    Bp,
    Dfa,
    Usf,
    Brsf,
    SvdBp,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::Ssa,
        MethodKind::Bp,
        MethodKind::Dfa,
        MethodKind::Usf,
        MethodKind::Brsf,
        MethodKind::SvdBp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Ssa => "ssa",
            MethodKind::Bp => "bp",
            MethodKind::Dfa => "dfa",
            MethodKind::Usf => "usf",
            MethodKind::Brsf => "brsf",
            MethodKind::SvdBp => "svd_bp",
        }
    }

    /// Whether the method trains SVD factors.
    pub fn factored(self) -> bool {
        matches!(self, MethodKind::Ssa | MethodKind::SvdBp)
    }

    /// Whether each layer receives the output error through its own fixed
    /// projection.
    pub fn direct_feedback(self) -> bool {
        matches!(self, MethodKind::Ssa | MethodKind::Dfa)
    }

    pub fn code(self) -> u8 {
        match self {
            MethodKind::Ssa => 0,
            MethodKind::Bp => 1,
            MethodKind::Dfa => 2,
            MethodKind::Usf => 3,
            MethodKind::Brsf => 4,
            MethodKind::SvdBp => 5,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == c)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::arg(format!(
                "unknown method {s:?} (expected ssa, bp, dfa, usf, brsf or svd_bp)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: MethodKind,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Apply the rank schedule at epoch ends (factored methods only).
    pub rank_schedule: bool,
    pub schedule: RankSchedule,
    pub seed: u64,
    pub projection_sigma: Option<f64>,
    pub target_sigma: Option<f64>,
    /// Random crop and flip for image inputs.
    pub augment: bool,
    /// Size of the fixed diagnostic batch (leading training samples).
    pub probe_size: usize,
    /// Log the update/gradient cosine every this many steps; 0 disables.
    pub alignment_log_every: usize,
    pub evaluate_test: bool,
}

impl TrainConfig {
    pub fn new(method: MethodKind, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            method,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            batch_size: 128,
            epochs,
            rank_schedule: false,
            schedule: RankSchedule::new(epochs),
            seed,
            projection_sigma: None,
            target_sigma: None,
            augment: false,
            probe_size: 256,
            alignment_log_every: 0,
            evaluate_test: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr >= 0.0) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if self.probe_size == 0 {
            return Err(Error::config("probe_size", "must be at least 1"));
        }
        if self.schedule.total_epochs != self.epochs {
            return Err(Error::config(
                "epochs",
                "rank schedule length differs from the run length",
            ));
        }
        self.schedule.validate()
    }

    pub fn feedback_params(&self) -> FeedbackParams {
        FeedbackParams {
            seed: mix_seed(self.seed, TAG_FEEDBACK, 0),
            projection_sigma: self.projection_sigma,
            target_sigma: self.target_sigma,
        }
    }

    fn hoyer_active(&self, epoch: usize) -> bool {
        self.rank_schedule
            && self.method.factored()
            && self.weights.lambda_hoyer > 0.0
            && self.schedule.hoyer_active(epoch)
    }
}

const TAG_INIT: u64 = 10;
const TAG_ORDER: u64 = 11;
const TAG_FEEDBACK: u64 = 12;
const TAG_BRSF: u64 = 13;
const TAG_BRSF_PROBE: u64 = 14;

/// Seed of the network initialization for a run seed.
pub fn init_seed(seed: u64) -> u64 {
    mix_seed(seed, TAG_INIT, 0)
}

/// Cosine between a layer's update direction and the probe-batch gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCosine {
    pub epoch: usize,
    pub step: u64,
    pub layer: usize,
    pub cosine: Option<f64>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub net: Network<T>,
    /// Direct-feedback bundles, per layer.
    pub feedback: Vec<Option<FeedbackBundle<T>>>,
    pub moments: Vec<Option<LayerMoments<T>>>,
    /// Rank at initialization, per factored layer.
    pub initial_ranks: Vec<Option<usize>>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    /// Drives data order and augmentation.
    pub rng: ChaCha8Rng,
    pub step_log: Vec<StepCosine>,
}

/// Zeroed optimizer state matching each parametric layer.
pub fn zero_moments<T: Scalar>(net: &Network<T>) -> Vec<Option<LayerMoments<T>>> {
    net.layers
        .iter()
        .map(|l| {
            let weight = match l.weight()? {
                Weight::Full(w) => WeightMoments::Full(Moments::zeros(w.rows(), w.cols())),
                Weight::Factored(f) => WeightMoments::Factored {
                    u: Moments::zeros(f.u.rows(), f.u.cols()),
                    s: Moments::zeros(1, f.rank()),
                    vt: Moments::zeros(f.vt.rows(), f.vt.cols()),
                    ortho_u: Moments::zeros(f.u.rows(), f.u.cols()),
                    ortho_vt: Moments::zeros(f.vt.rows(), f.vt.cols()),
                },
            };
            Some(LayerMoments {
                weight,
                bias: l.bias.as_ref().map(|b| Moments::zeros(1, b.len())),
            })
        })
        .collect()
}

/// Direct-feedback bundles for every parametric layer; alignment targets are
/// built for factored layers when `with_targets`.
pub fn build_feedback_bundles<T: Scalar>(
    net: &Network<T>,
    params: &FeedbackParams,
    with_targets: bool,
) -> Result<Vec<Option<FeedbackBundle<T>>>> {
    let d_n = net.output_dim();
    let last = net.parametric_indices().last().copied();
    net.layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let Some(w) = l.weight() else { return Ok(None) };
            let is_output = Some(i) == last && i + 1 == net.layers.len();
            let rank = if with_targets { w.rank() } else { None };
            FeedbackBundle::build(i, l.out_dim(), d_n, w.dims(), rank, is_output, params).map(Some)
        })
        .collect()
}

/// Per-layer gradients of the chosen rule with respect to each full weight
/// matrix. Direct-feedback rules compute each layer from its own tape only.
pub fn method_weight_grads<T: Scalar>(
    method: MethodKind,
    net: &Network<T>,
    feedback: &[Option<FeedbackBundle<T>>],
    tapes: &[LayerTape<T>],
    delta_n: &Matrix<T>,
    sign_seed: u64,
) -> Result<Vec<Option<LayerGrad<T>>>> {
    match method {
        MethodKind::Bp | MethodKind::SvdBp => bp_backward(net, tapes, delta_n),
        MethodKind::Usf | MethodKind::Brsf => {
            let kind = if method == MethodKind::Usf {
                SignFeedback::Unit
            } else {
                SignFeedback::BatchRandom
            };
            backward_with(net, tapes, delta_n, |i, layer| {
                let w = layer.weight().expect("parametric").effective();
                Ok(Some(
                    variant_feedback(&w, kind, mix_seed(sign_seed, i as u64, 0)).transpose(),
                ))
            })
        }
        MethodKind::Dfa | MethodKind::Ssa => (0..net.layers.len())
            .map(|i| {
                if !net.layers[i].is_parametric() {
                    return Ok(None);
                }
                local_grad(
                    &net.layers[i],
                    feedback.get(i).and_then(Option::as_ref),
                    &tapes[i],
                    delta_n,
                )
                .map(Some)
            })
            .collect(),
    }
}

/// Pseudo-gradient of one layer from its tape, its feedback and the output
/// error alone.
pub fn local_grad<T: Scalar>(
    layer: &Layer<T>,
    feedback: Option<&FeedbackBundle<T>>,
    tape: &LayerTape<T>,
    delta_n: &Matrix<T>,
) -> Result<LayerGrad<T>> {
    let fb = feedback.ok_or_else(|| Error::arg("layer has no feedback matrix"))?;
    let e = fb.project(delta_n)?;
    pseudo_grad_w(layer, &e, tape)
}

/// Factor gradients for a factored layer: the Stiefel-projected local rule
/// for SSA, the plain chain rule otherwise, plus the sparsity term when
/// `hoyer_weight` is given.
pub fn factor_update<T: Scalar>(
    method: MethodKind,
    fw: &FactoredWeight<T>,
    grad_w: &Matrix<T>,
    targets: Option<&AlignmentTargets<T>>,
    weights: &LossWeights,
    hoyer_weight: Option<f64>,
) -> Result<FactorGrads<T>> {
    let mut fg = match (method, targets) {
        (MethodKind::Ssa, Some(t)) => ssa_factor_grads(fw, grad_w, t, weights)?,
        (MethodKind::Ssa, None) => return Err(Error::arg("factored layer has no alignment targets")),
        _ => chain_to_factors(fw, grad_w)?,
    };
    if let Some(lambda) = hoyer_weight {
        let lambda = T::of(lambda);
        for (g, h) in fg.gs.iter_mut().zip(hoyer_grad(&fw.s)?) {
            *g += lambda * h;
        }
    }
    Ok(fg)
}

/// Optimizer state of one factored layer, borrowed for a single step.
pub struct FactorMoments<'a, T> {
    pub u: &'a mut Moments<T>,
    pub vt: &'a mut Moments<T>,
    pub ortho_u: &'a mut Moments<T>,
    pub ortho_vt: &'a mut Moments<T>,
}

/// SSA step for `U` and `V^T`.
///
/// The Adam step of the projected gradients is projected again
/// (`I - U U^T` on the left, `I - V V^T` on the right), since Adam's
/// per-coordinate scaling moves it off the tangent space. The projection
/// annihilates the orthogonality term, whose gradient lies in `col(U)`, so
/// that term is applied unprojected as a separate restoring step with its
/// own accumulators.
pub fn stiefel_step<T: Scalar>(
    cfg: &AdamConfig,
    fw: &mut FactoredWeight<T>,
    fg: &FactorGrads<T>,
    gamma: f64,
    m: FactorMoments<'_, T>,
) -> Result<()> {
    let r = fw.rank();
    let four_gamma = T::of(4.0 * gamma);
    let v = fw.vt.transpose();
    let ortho_u = fw.u.matmul(&fw.u.gram().sub(&Matrix::identity(r))?)?.scale(four_gamma);
    let ortho_vt = v
        .matmul(&v.gram().sub(&Matrix::identity(r))?)?
        .transpose()
        .scale(four_gamma);

    let du = Matrix::new(fw.u.rows(), r, adam_direction(cfg, fg.gu.as_slice(), m.u)?)?;
    let du = tangent_project(&fw.u, &du)?;
    let dvt = Matrix::new(r, fw.vt.cols(), adam_direction(cfg, fg.gvt.as_slice(), m.vt)?)?;
    // (I - V V^T) D^T, transposed back: D - (D V) V^T.
    let dvt = dvt.sub(&dvt.matmul_t(&fw.vt)?.matmul(&fw.vt)?)?;
    let ru = Matrix::new(fw.u.rows(), r, adam_direction(cfg, ortho_u.as_slice(), m.ortho_u)?)?;
    let rvt = Matrix::new(r, fw.vt.cols(), adam_direction(cfg, ortho_vt.as_slice(), m.ortho_vt)?)?;

    fw.u = fw.u.sub(&du)?.sub(&ru)?;
    fw.vt = fw.vt.sub(&dvt)?.sub(&rvt)?;
    Ok(())
}

/// Weight-space direction of a layer's update before the optimizer.
pub fn update_direction<T: Scalar>(
    method: MethodKind,
    layer: &Layer<T>,
    grad: &LayerGrad<T>,
    feedback: Option<&FeedbackBundle<T>>,
    weights: &LossWeights,
    hoyer_weight: Option<f64>,
) -> Result<Matrix<T>> {
    match layer.weight() {
        Some(Weight::Factored(fw)) => {
            let targets = feedback.and_then(|f| f.targets.as_ref());
            factor_update(method, fw, &grad.w, targets, weights, hoyer_weight)?.weight_direction(fw)
        }
        _ => Ok(grad.w.clone()),
    }
}

/// `W_N ... W_{i+1}` (`d_N x d_i`), defined when every later layer is dense.
/// The identity for the last layer.
pub fn downstream_product<T: Scalar>(net: &Network<T>, i: usize) -> Option<Matrix<T>> {
    let mut acc = Matrix::identity(net.output_dim());
    for layer in net.layers[i + 1..].iter().rev() {
        match &layer.kind {
            LayerKind::Dense(w) => acc = acc.matmul(&w.effective()).ok()?,
            _ => return None,
        }
    }
    Some(acc)
}

fn count_correct<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count()
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run: initializes the network from the run seed, builds feedback
    /// and zeroes the optimizer.
    pub fn new(config: TrainConfig, spec: &NetworkSpec) -> Result<Self> {
        config.validate()?;
        let net = Network::init(spec, init_seed(config.seed))?;
        Self::with_network(config, net)
    }

    /// Fresh run starting from the given parameters.
    pub fn with_network(config: TrainConfig, net: Network<T>) -> Result<Self> {
        config.validate()?;
        let feedback = if config.method.direct_feedback() {
            build_feedback_bundles(&net, &config.feedback_params(), config.method == MethodKind::Ssa)?
        } else {
            vec![None; net.layers.len()]
        };
        let moments = zero_moments(&net);
        let initial_ranks = net.layers.iter().map(|l| l.weight().and_then(Weight::rank)).collect();
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, TAG_ORDER, 0));
        Ok(Trainer {
            config,
            net,
            feedback,
            moments,
            initial_ranks,
            epoch: 0,
            step: 0,
            rng,
            step_log: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One optimizer step on a batch. Returns the summed loss and the number
    /// of correct predictions.
    pub fn train_step(&mut self, x: &Matrix<T>, labels: &[usize]) -> Result<(f64, usize)> {
        self.train_step_ordered(x, labels, None, None)
    }

    /// As [`Trainer::train_step`], updating layers in `order` (all parametric
    /// layers, any permutation). `probe_bp` enables cosine logging against
    /// the given probe-batch gradients.
    pub fn train_step_ordered(
        &mut self,
        x: &Matrix<T>,
        labels: &[usize],
        order: Option<&[usize]>,
        probe_bp: Option<&[Option<LayerGrad<f64>>]>,
    ) -> Result<(f64, usize)> {
        let (logits, tapes) = self.net.forward(x)?;
        let (loss, delta) = ce_loss_and_delta(&logits, labels)?;
        let correct = count_correct(&logits, labels);
        let method = self.config.method;
        let hoyer = self
            .config
            .hoyer_active(self.epoch)
            .then_some(self.config.weights.lambda_hoyer);

        let mut grads: Vec<Option<LayerGrad<T>>> = if method.direct_feedback() {
            vec![None; self.net.layers.len()]
        } else {
            let seed = mix_seed(self.config.seed, TAG_BRSF, self.step);
            method_weight_grads(method, &self.net, &self.feedback, &tapes, &delta, seed)?
        };
        let default_order = self.net.parametric_indices();
        let order = order.unwrap_or(&default_order);
        if order.len() != default_order.len() {
            return Err(Error::arg("update order must list every parametric layer once"));
        }
        for &i in order {
            if !self.net.layers.get(i).is_some_and(Layer::is_parametric) {
                return Err(Error::arg(format!("layer {i} has no parameters")));
            }
            if method.direct_feedback() {
                grads[i] = Some(local_grad(
                    &self.net.layers[i],
                    self.feedback[i].as_ref(),
                    &tapes[i],
                    &delta,
                )?);
            }
            let g = grads[i].as_ref().expect("gradient computed");
            if let Some(bp) = probe_bp {
                let dir = update_direction(
                    method,
                    &self.net.layers[i],
                    g,
                    self.feedback[i].as_ref(),
                    &self.config.weights,
                    hoyer,
                )?;
                let cosine = match bp.get(i).and_then(Option::as_ref) {
                    Some(b) => match frobenius_cosine(&dir.cast::<f64>(), &b.w) {
                        Ok(c) => Some(c),
                        Err(Error::UndefinedCosine) => None,
                        Err(e) => return Err(e),
                    },
                    None => None,
                };
                self.step_log.push(StepCosine {
                    epoch: self.epoch,
                    step: self.step,
                    layer: i,
                    cosine,
                });
            }
            self.update_layer(i, g, hoyer)?;
        }
        self.step += 1;
        Ok((loss.as_f64() * labels.len() as f64, correct))
    }

    fn update_layer(&mut self, i: usize, g: &LayerGrad<T>, hoyer: Option<f64>) -> Result<()> {
        let method = self.config.method;
        let cfg = self.config.adam;
        let weights = self.config.weights;
        let targets = self.feedback[i].as_ref().and_then(|f| f.targets.as_ref());
        let layer = &mut self.net.layers[i];
        let mom = self.moments[i]
            .as_mut()
            .ok_or_else(|| Error::arg(format!("no optimizer state for layer {i}")))?;
        match (layer.weight_mut(), &mut mom.weight) {
            (Some(Weight::Full(w)), WeightMoments::Full(m)) => apply_step(&cfg, w, &g.w, m)?,
            (
                Some(Weight::Factored(fw)),
                WeightMoments::Factored {
                    u,
                    s,
                    vt,
                    ortho_u,
                    ortho_vt,
                },
            ) => {
                let fg = factor_update(method, fw, &g.w, targets, &weights, hoyer)?;
                if method == MethodKind::Ssa {
                    let m = FactorMoments {
                        u,
                        vt,
                        ortho_u,
                        ortho_vt,
                    };
                    stiefel_step(&cfg, fw, &fg, weights.gamma, m)?;
                } else {
                    apply_step(&cfg, &mut fw.u, &fg.gu, u)?;
                    apply_step(&cfg, &mut fw.vt, &fg.gvt, vt)?;
                }
                adam_update(&cfg, &mut fw.s, &fg.gs, s)?;
                fw.clamp_singular_values();
            }
            _ => return Err(Error::arg(format!("optimizer state does not match layer {i}"))),
        }
        match (&mut layer.bias, &g.bias, &mut mom.bias) {
            (Some(b), Some(gb), Some(m)) => adam_update(&cfg, b, gb, m)?,
            (None, _, _) => {}
            _ => return Err(Error::arg(format!("bias state missing for layer {i}"))),
        }
        Ok(())
    }

    fn probe_batch(&self, data: &Dataset) -> (Matrix<f64>, Vec<usize>) {
        let n = self.config.probe_size.min(data.train_len());
        let idx: Vec<usize> = (0..n).collect();
        data.batch::<f64>(Split::Train, &idx)
    }

    /// True gradients on the probe batch at the current parameters.
    pub fn probe_gradients(&self, data: &Dataset) -> Result<Vec<Option<LayerGrad<f64>>>> {
        let (x, y) = self.probe_batch(data);
        let net: Network<f64> = self.net.cast();
        let (logits, tapes) = net.forward(&x)?;
        let (_, delta) = ce_loss_and_delta(&logits, &y)?;
        bp_backward(&net, &tapes, &delta)
    }

    /// One pass over the training split, then the rank schedule, then the
    /// epoch's diagnostics.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<MetricsRecord> {
        if self.is_finished() {
            return Err(Error::arg("all epochs already run"));
        }
        if data.input != self.net.input {
            return Err(Error::arg("dataset input shape differs from the network"));
        }
        let n = data.train_len();
        if n == 0 {
            return Err(Error::arg("empty training split"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let every = self.config.alignment_log_every as u64;
        for chunk in order.chunks(self.config.batch_size) {
            let (mut x, y) = data.batch::<T>(Split::Train, chunk);
            if self.config.augment {
                if let InputShape::Image {
                    channels,
                    height,
                    width,
                } = data.input
                {
                    for r in 0..x.rows() {
                        let out = augment(x.row(r), channels, height, width, &mut self.rng);
                        x.row_mut(r).copy_from_slice(&out);
                    }
                }
            }
            let probe = if every > 0 && self.step.is_multiple_of(every) {
                Some(self.probe_gradients(data)?)
            } else {
                None
            };
            let (l, c) = self.train_step_ordered(&x, &y, None, probe.as_deref())?;
            loss_sum += l;
            correct += c;
        }
        let epoch = self.epoch;
        self.apply_rank_schedule(epoch)?;
        let record = self.snapshot(data, epoch, loss_sum / n as f64, correct as f64 / n as f64)?;
        self.epoch += 1;
        Ok(record)
    }

    /// Epoch-end rank reduction. Components are reordered by singular value
    /// before the leading ones are kept; targets and optimizer state follow.
    pub fn apply_rank_schedule(&mut self, epoch: usize) -> Result<()> {
        if !(self.config.rank_schedule && self.config.method.factored()) {
            return Ok(());
        }
        for i in 0..self.net.layers.len() {
            let Some(r0) = self.initial_ranks[i] else { continue };
            let Some(fw) = self.net.layers[i].weight().and_then(Weight::factored) else {
                continue;
            };
            let current = fw.rank();
            let r_new = next_rank(epoch, r0, current, &fw.s, fw.dims(), &self.config.schedule)?;
            if r_new >= current {
                continue;
            }
            let keep = descending_order(&fw.s)[..r_new].to_vec();
            let targets = self.feedback[i].as_ref().and_then(|f| f.targets.as_ref());
            let moments = self.moments[i].as_ref().map(|m| &m.weight);
            let (fw2, t2, m2) = select_components(fw, targets, moments, &keep);
            if let Some(w) = self.net.layers[i].weight_mut().and_then(Weight::factored_mut) {
                *w = fw2;
            }
            if let (Some(fb), Some(t)) = (self.feedback[i].as_mut(), t2) {
                fb.targets = Some(t);
            }
            if let (Some(m), Some(wm)) = (self.moments[i].as_mut(), m2) {
                m.weight = wm;
            }
        }
        Ok(())
    }

    /// Accuracy on a split, evaluated in chunks.
    pub fn accuracy(&self, data: &Dataset, split: Split) -> Result<f64> {
        evaluate_accuracy(&self.net, data, split)
    }

    /// Diagnostics on the probe batch in 64-bit plus test accuracy and cost.
    pub fn snapshot(
        &self,
        data: &Dataset,
        epoch: usize,
        train_loss: f64,
        train_accuracy: f64,
    ) -> Result<MetricsRecord> {
        let (x, y) = self.probe_batch(data);
        let net: Network<f64> = self.net.cast();
        let feedback: Vec<Option<FeedbackBundle<f64>>> = self
            .feedback
            .iter()
            .map(|f| f.as_ref().map(FeedbackBundle::cast))
            .collect();
        let (logits, tapes) = net.forward(&x)?;
        let (_, delta) = ce_loss_and_delta(&logits, &y)?;
        let bp = bp_backward(&net, &tapes, &delta)?;
        let method = self.config.method;
        let mg = if method == MethodKind::Bp {
            bp.clone()
        } else {
            let seed = mix_seed(self.config.seed, TAG_BRSF_PROBE, epoch as u64);
            method_weight_grads(method, &net, &feedback, &tapes, &delta, seed)?
        };
        let cost = count_cost(&self.net);
        let mut layers = Vec::new();
        for i in net.parametric_indices() {
            let layer = &net.layers[i];
            let (Some(g_method), Some(g_bp)) = (&mg[i], &bp[i]) else {
                continue;
            };
            let dir = update_direction(
                method,
                layer,
                g_method,
                feedback[i].as_ref(),
                &self.config.weights,
                None,
            )?;
            let grad_alignment = grad_alignment_deg(&dir, &g_bp.w)?;
            let angles = match (&feedback[i], downstream_product(&net, i)) {
                (Some(fb), Some(w_eff)) => matrix_principal_angles(&w_eff, &fb.b)?,
                _ => None,
            };
            let fw = layer.weight().and_then(Weight::factored);
            let c = cost.layers[i];
            layers.push(LayerMetrics {
                layer: i,
                rank: fw.map(FactoredWeight::rank),
                grad_alignment_deg: grad_alignment,
                matrix_alignment_deg: angles.as_ref().and_then(|a| a.last().copied()),
                principal_angles_deg: angles.unwrap_or_default(),
                ortho_drift: fw.map(|f| f.ortho_drift()),
                params: c.params + c.bias_params,
                inference_flops: c.macs,
            });
        }
        let test_accuracy = if self.config.evaluate_test && data.test_len() > 0 {
            Some(self.accuracy(data, Split::Test)?)
        } else {
            None
        };
        Ok(MetricsRecord {
            epoch,
            train_loss,
            train_accuracy,
            test_accuracy,
            layers,
            params_total: cost.params,
            inference_flops: cost.inference_flops,
        })
    }
}

/// Fraction of correct predictions on a split.
pub fn evaluate_accuracy<T: Scalar>(net: &Network<T>, data: &Dataset, split: Split) -> Result<f64> {
    let n = match split {
        Split::Train => data.train_len(),
        Split::Test => data.test_len(),
    };
    if n == 0 {
        return Err(Error::arg("empty split"));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(500) {
        let (x, y) = data.batch::<T>(split, chunk);
        correct += count_correct(&net.predict(&x)?, &y);
    }
    Ok(correct as f64 / n as f64)
}
