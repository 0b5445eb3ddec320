//! Adam with weight decay, gradual unfreezing and the triplet + cosine-softmax
//! training loop for the post-network.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, TripletIndices, TripletSampler};
use crate::numcore::{gradient_check, NumError, Tape, Var, Vector};
use crate::objectives::{self, ClassifierHead, HeadVars, LossWeights};
use crate::postnet::{Mode, PostNet, PostNetConfig, PostNetError, PostNetVars, NUM_LAYERS};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter slot {slot}; step aborted")]
    NonFiniteGradient { slot: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    PostNet(#[from] PostNetError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// `weight_decay · θ` added to the gradient before the moment updates.
    Coupled,
    /// `lr · weight_decay · θ` subtracted from the parameters directly.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay_mode: WeightDecayMode::Coupled,
        }
    }
}

/// First and second moments per parameter slot, plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(slot_sizes: &[usize]) -> Self {
        Self {
            m: slot_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `lrs[slot]` is the slot's learning rate,
/// `None` for frozen slots, which are left untouched together with their
/// moments. Gradients of active slots are checked before anything is mutated.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
    params: &mut [Vec<T>],
    grads: &[Vec<T>],
    lrs: &[Option<f64>],
) -> Result<(), TrainError> {
    let slots = params.len();
    if grads.len() != slots || lrs.len() != slots || state.m.len() != slots {
        return Err(TrainError::Config(format!(
            "slot count mismatch: {slots} params, {} grads, {} rates, {} moments",
            grads.len(),
            lrs.len(),
            state.m.len()
        )));
    }
    for (slot, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[slot].len() {
            return Err(TrainError::Config(format!("slot {slot} shape mismatch")));
        }
        if lrs[slot].is_some() && g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { slot });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let (eps, wd) = (T::of(hyper.eps), T::of(hyper.weight_decay));
    for slot in 0..slots {
        let Some(lr) = lrs[slot] else { continue };
        let lr = T::of(lr);
        let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
        for (((p, &g), mi), vi) in params[slot].iter_mut().zip(&grads[slot]).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = match hyper.decay_mode {
                WeightDecayMode::Coupled => g + wd * *p,
                WeightDecayMode::Decoupled => g,
            };
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            if hyper.decay_mode == WeightDecayMode::Decoupled {
                *p -= lr * wd * *p;
            }
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// First `1 + epoch / period` groups, capped at all of them. Groups are
/// ordered output-most first.
pub fn unfreeze_schedule(epoch: usize, groups: &[String], period: usize) -> Vec<String> {
    let period = period.max(1);
    let n = (1 + epoch / period).min(groups.len());
    groups[..n].to_vec()
}

/// Named set of parameter slots sharing a learning rate and a frozen flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub slots: Vec<usize>,
    pub frozen: bool,
    pub lr: f64,
}

/// Post-net layers in unfreezing order, output-most first.
pub const POSTNET_GROUPS: [&str; NUM_LAYERS] = ["decoder_out", "decoder_hidden", "encoder_bottleneck", "encoder_in"];
pub const HEAD_GROUP: &str = "head";
/// Parameter slot of the head weights; post-net layer `i` owns slots `2i` (weights) and `2i+1` (bias).
pub const HEAD_SLOT: usize = 2 * NUM_LAYERS;

fn default_groups(cfg: &TrainConfig) -> Vec<ParamGroup> {
    let mut groups: Vec<ParamGroup> = POSTNET_GROUPS
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let layer = NUM_LAYERS - 1 - k;
            ParamGroup {
                name: (*name).to_string(),
                slots: vec![2 * layer, 2 * layer + 1],
                frozen: false,
                lr: cfg.lr_postnet,
            }
        })
        .collect();
    groups.push(ParamGroup {
        name: HEAD_GROUP.to_string(),
        slots: vec![HEAD_SLOT],
        frozen: false,
        lr: cfg.lr_head,
    });
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_postnet: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
    pub gamma: f64,
    pub margin: f64,
    pub dropout: f64,
    pub head_scale: f64,
    /// When set, post-net groups unfreeze one at a time every `unfreeze_period` epochs.
    pub gradual_unfreeze: bool,
    pub unfreeze_period: usize,
    /// Post-net widths; `None` derives them from the embedding dimension.
    pub bottleneck_dim: Option<usize>,
    pub hidden_dims: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr_postnet: 1e-4,
            lr_head: 1e-4,
            weight_decay: 1e-4,
            decay_mode: WeightDecayMode::Coupled,
            gamma: objectives::DEFAULT_GAMMA,
            margin: objectives::DEFAULT_MARGIN,
            dropout: crate::postnet::DEFAULT_DROPOUT,
            head_scale: objectives::DEFAULT_HEAD_SCALE,
            gradual_unfreeze: false,
            unfreeze_period: 5,
            bottleneck_dim: None,
            hidden_dims: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("lr_postnet", self.lr_postnet),
            ("lr_head", self.lr_head),
            ("gamma", self.gamma),
            ("head_scale", self.head_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.unfreeze_period == 0 {
            return Err(TrainError::Config("epochs, batch_size and unfreeze_period must be at least 1".into()));
        }
        if self.weight_decay < 0.0 || self.margin < 0.0 {
            return Err(TrainError::Config("weight_decay and margin must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn postnet_config(&self, embed_dim: usize) -> PostNetConfig {
        let mut c = PostNetConfig::for_embedding(embed_dim);
        if let Some(b) = self.bottleneck_dim {
            c.bottleneck_dim = b;
        }
        if let Some(h) = self.hidden_dims {
            c.hidden_dims = h;
        }
        c.dropout_rate = self.dropout;
        c.seed = self.seed;
        c
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            weight_decay: self.weight_decay,
            decay_mode: self.decay_mode,
            ..AdamHyper::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_trip: f64,
    pub l_ce: f64,
    pub l_combined: f64,
    pub active_groups: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_trip: f64,
    pub l_ce: f64,
    pub l_combined: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    /// `epoch,l_trip,l_ce,l_combined,active_groups`, groups joined by `|`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_trip,l_ce,l_combined,active_groups\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.l_trip,
                r.l_ce,
                r.l_combined,
                r.active_groups.join("|")
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T = f64> {
    pub net: PostNet<T>,
    pub head: ClassifierHead<T>,
    pub history: TrainHistory,
}

/// Loss values of one batch plus the tape handle of the combined loss.
struct BatchLoss<T> {
    l_trip: T,
    l_ce: T,
    combined: Var,
    min_hinge_margin: T,
}

struct Registered {
    net: PostNetVars,
    head: HeadVars,
}

impl Registered {
    fn slots(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.net.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.push(self.head.weights);
        v
    }
}

/// One triplet as embeddings plus the speaker label of each member.
pub struct LabeledTriplet<'a, T> {
    pub members: [&'a Vector<T>; 3],
    pub labels: [usize; 3],
}

/// `L_trip + γ·L_ce` over a batch. L_trip is the mean hinge over triplets,
/// L_ce the mean cross-entropy over all three members of every triplet.
#[allow(clippy::too_many_arguments)]
fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    net: &PostNet<T>,
    head: &ClassifierHead<T>,
    reg: &Registered,
    batch: &[LabeledTriplet<'_, T>],
    margin: T,
    weights: LossWeights,
    mode: &mut Mode,
) -> Result<BatchLoss<T>, TrainError> {
    let mut hinges = Vec::with_capacity(batch.len());
    let mut ces = Vec::with_capacity(3 * batch.len());
    let mut min_margin = T::infinity();
    for triplet in batch {
        let mut outs = [None; 3];
        for (k, x) in triplet.members.iter().enumerate() {
            let xv = tape.vector(x);
            let y = net.forward_on_tape(tape, &reg.net, xv, mode)?;
            let logits = head.logits_on_tape(tape, &reg.head, y)?;
            ces.push(tape.cross_entropy(logits, triplet.labels[k])?);
            outs[k] = Some(y);
        }
        let [a, p, n] = outs.map(|o| o.expect("three members"));
        let (hinge, pre) = objectives::triplet_term_on_tape(tape, a, p, n, margin)?;
        min_margin = min_margin.min(pre.abs());
        hinges.push(hinge);
    }
    let trip = tape.mean(&hinges)?;
    let ce = tape.mean(&ces)?;
    let weighted = tape.scale(ce, T::of(weights.gamma));
    let combined = tape.add(trip, weighted)?;
    Ok(BatchLoss {
        l_trip: tape.scalar(trip),
        l_ce: tape.scalar(ce),
        combined,
        min_hinge_margin: min_margin,
    })
}

fn gather_params<T: Scalar>(net: &PostNet<T>, head: &ClassifierHead<T>) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = net
        .layers()
        .iter()
        .flat_map(|l| [l.weights.as_slice().to_vec(), l.bias.as_slice().to_vec()])
        .collect();
    out.push(head.class_weights.as_slice().to_vec());
    out
}

fn scatter_params<T: Scalar>(net: &mut PostNet<T>, head: &mut ClassifierHead<T>, params: &[Vec<T>]) {
    for (i, l) in net.layers_mut().iter_mut().enumerate() {
        l.weights.as_mut_slice().copy_from_slice(&params[2 * i]);
        l.bias.as_mut_slice().copy_from_slice(&params[2 * i + 1]);
    }
    head.class_weights.as_mut_slice().copy_from_slice(&params[HEAD_SLOT]);
}

/// Seeds of the independent random streams of one training run.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains a fresh post-net and head on `corpus`. Deterministic given `cfg.seed`.
pub fn train<T: Scalar>(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let sampler = TripletSampler::new(corpus)?;
    let net = PostNet::<T>::init(cfg.postnet_config(corpus.dim()))?;
    let head = ClassifierHead::<T>::init(
        corpus.num_speakers(),
        corpus.dim(),
        T::of(cfg.head_scale),
        stream_seed(cfg.seed, 1),
    )?;
    train_from(corpus, cfg, net, head, &sampler)
}

/// Continues training from the given network and head.
pub fn train_from<T: Scalar>(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut net: PostNet<T>,
    mut head: ClassifierHead<T>,
    sampler: &TripletSampler,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if head.num_classes() != corpus.num_speakers() {
        return Err(TrainError::Config(format!(
            "head has {} classes but corpus has {} speakers",
            head.num_classes(),
            corpus.num_speakers()
        )));
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2));
    let mut mode = Mode::train(stream_seed(cfg.seed, 3));
    let embeddings: Vec<Vector<T>> = corpus
        .utterances()
        .iter()
        .map(|u| Vector::new(u.embedding.as_slice().iter().map(|&v| T::of(v)).collect()))
        .collect::<Result<_, _>>()?;

    let mut groups = default_groups(cfg);
    let group_order: Vec<String> = POSTNET_GROUPS.iter().map(|s| s.to_string()).collect();
    let mut params = gather_params(&net, &head);
    let mut state = AdamState::new(&params.iter().map(Vec::len).collect::<Vec<_>>());
    let hyper = cfg.adam();
    let weights = LossWeights::new(cfg.gamma)?;
    let margin = T::of(cfg.margin);
    let batches = corpus.num_pairs().div_ceil(cfg.batch_size).max(1);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let unfrozen = if cfg.gradual_unfreeze {
            unfreeze_schedule(epoch, &group_order, cfg.unfreeze_period)
        } else {
            group_order.clone()
        };
        for g in &mut groups {
            g.frozen = g.name != HEAD_GROUP && !unfrozen.contains(&g.name);
        }
        let active: Vec<String> = groups.iter().filter(|g| !g.frozen).map(|g| g.name.clone()).collect();
        let mut lrs = vec![None; params.len()];
        for g in groups.iter().filter(|g| !g.frozen) {
            for &s in &g.slots {
                lrs[s] = Some(g.lr);
            }
        }

        let (mut sum_trip, mut sum_ce, mut sum_comb) = (0.0, 0.0, 0.0);
        for step in 0..batches {
            let picks: Vec<TripletIndices> = (0..cfg.batch_size).map(|_| sampler.sample(&mut sample_rng)).collect();
            let batch: Vec<LabeledTriplet<'_, T>> = picks
                .iter()
                .map(|t| LabeledTriplet {
                    members: [&embeddings[t.anchor], &embeddings[t.positive], &embeddings[t.negative]],
                    labels: [t.anchor, t.positive, t.negative].map(|i| corpus.speaker_index(i)),
                })
                .collect();

            let mut tape = Tape::new();
            let reg = Registered {
                net: net.register(&mut tape),
                head: head.register(&mut tape)?,
            };
            let loss = batch_loss(&mut tape, &net, &head, &reg, &batch, margin, weights, &mut mode)?;
            let grads = tape.backward(loss.combined);
            let grads: Vec<Vec<T>> = reg
                .slots()
                .into_iter()
                .zip(&params)
                .map(|(v, p)| grads.get_or_zeros(v, p.len()))
                .collect();
            adam_step(&mut state, &hyper, &mut params, &grads, &lrs)?;
            scatter_params(&mut net, &mut head, &params);

            let rec = StepRecord {
                epoch,
                step,
                l_trip: loss.l_trip.to_f64_lossy(),
                l_ce: loss.l_ce.to_f64_lossy(),
                l_combined: tape.scalar(loss.combined).to_f64_lossy(),
            };
            sum_trip += rec.l_trip;
            sum_ce += rec.l_ce;
            sum_comb += rec.l_combined;
            history.steps.push(rec);
        }
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            l_trip: sum_trip / n,
            l_ce: sum_ce / n,
            l_combined: sum_comb / n,
            active_groups: active,
        };
        log::debug!(
            "epoch {epoch}: l_trip {:.5} l_ce {:.4} l {:.5}",
            record.l_trip,
            record.l_ce,
            record.l_combined
        );
        history.epochs.push(record);
    }
    Ok(TrainOutcome { net, head, history })
}

/// Result of [`pipeline_gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub parameters: usize,
    /// Draws rejected for lying too close to a ReLU or hinge kink.
    pub kink_retries: usize,
}

const KINK_MARGIN: f64 = 1e-3;
const GRADCHECK_TRIPLETS: usize = 3;
const GRADCHECK_CLASSES: usize = 5;

/// Central-difference check of the full training loss (post-net with residual
/// and dropout masks, triplet hinge, cosine-softmax head, weighted sum) with
/// respect to every post-net and head parameter.
///
/// All four layers are randomized so the decoder output is nonzero. Random
/// draws whose ReLU pre-activations or hinge arguments lie within `1e-3` of a
/// kink are rejected and redrawn.
pub fn pipeline_gradient_check(seed: u64, dim: usize, gamma: f64) -> Result<GradCheckReport, TrainError> {
    if dim < 2 {
        return Err(TrainError::Config("gradient check needs dim ≥ 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = LossWeights::new(gamma)?;
    let margin = objectives::DEFAULT_MARGIN;
    for retries in 0..1000 {
        let mut pcfg = PostNetConfig::for_embedding(dim);
        pcfg.seed = rng.random();
        let mut net = PostNet::<f64>::init(pcfg)?;
        for l in net.layers_mut().iter_mut() {
            let bound = (1.0 / l.weights.cols() as f64).sqrt();
            for v in l.weights.as_mut_slice().iter_mut().chain(l.bias.as_mut_slice()) {
                *v = rng.random_range(-bound..bound);
            }
        }
        let head = ClassifierHead::<f64>::init(GRADCHECK_CLASSES, dim, objectives::DEFAULT_HEAD_SCALE, rng.random())?;
        let members: Vec<Vector<f64>> = (0..3 * GRADCHECK_TRIPLETS)
            .map(|_| Vector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect::<Result<_, _>>()?;
        let labels: Vec<usize> = (0..3 * GRADCHECK_TRIPLETS).map(|_| rng.random_range(0..GRADCHECK_CLASSES)).collect();
        let mask_seed: u64 = rng.random();

        let evaluate = |net: &PostNet<f64>, head: &ClassifierHead<f64>| -> Result<(f64, Vec<f64>, f64), TrainError> {
            let batch: Vec<LabeledTriplet<'_, f64>> = (0..GRADCHECK_TRIPLETS)
                .map(|t| LabeledTriplet {
                    members: [&members[3 * t], &members[3 * t + 1], &members[3 * t + 2]],
                    labels: [labels[3 * t], labels[3 * t + 1], labels[3 * t + 2]],
                })
                .collect();
            let mut tape = Tape::new();
            let reg = Registered {
                net: net.register(&mut tape),
                head: head.register(&mut tape)?,
            };
            let mut mode = Mode::train(mask_seed);
            let loss = batch_loss(&mut tape, net, head, &reg, &batch, margin, weights, &mut mode)?;
            let g = tape.backward(loss.combined);
            let sizes: Vec<usize> = gather_params(net, head).iter().map(Vec::len).collect();
            let flat = reg
                .slots()
                .into_iter()
                .zip(sizes)
                .flat_map(|(v, n)| g.get_or_zeros(v, n))
                .collect();
            Ok((tape.scalar(loss.combined), flat, loss.min_hinge_margin))
        };

        // Kink screening replays the same dropout masks as the loss.
        let (_, _, hinge_margin) = evaluate(&net, &head)?;
        let mut mode = Mode::train(mask_seed);
        let mut relu_margin = f64::INFINITY;
        for x in &members {
            relu_margin = relu_margin.min(net.relu_margin(x, &mut mode)?);
        }
        if hinge_margin < KINK_MARGIN || relu_margin < KINK_MARGIN {
            continue;
        }

        let base = gather_params(&net, &head);
        let sizes: Vec<usize> = base.iter().map(Vec::len).collect();
        let flat: Vec<f64> = base.concat();
        let f = |p: &[f64]| -> Result<(f64, Vec<f64>), NumError> {
            let mut slots = Vec::with_capacity(sizes.len());
            let mut off = 0;
            for &n in &sizes {
                slots.push(p[off..off + n].to_vec());
                off += n;
            }
            let (mut n, mut h) = (net.clone(), head.clone());
            scatter_params(&mut n, &mut h, &slots);
            let (v, g, _) = evaluate(&n, &h).map_err(|e| NumError::Evaluation(e.to_string()))?;
            Ok((v, g))
        };
        let err = gradient_check(f, &flat, 1e-5)?;
        return Ok(GradCheckReport {
            max_relative_error: err,
            parameters: flat.len(),
            kink_retries: retries,
        });
    }
    Err(TrainError::Config("could not draw a kink-free gradient check instance".into()))
}
