//! Scoring and losses: cosine similarity, the cosine-normalized speaker head,
//! softmax cross-entropy, the cosine-distance triplet hinge and the weighted
//! combination used for training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{self, Matrix, NumError, Tape, Var, Vector};
use crate::scalar::Scalar;

pub const DEFAULT_GAMMA: f64 = 1e-4;
pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_HEAD_SCALE: f64 = 20.0;

pub fn cosine_similarity<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> Result<T, NumError> {
    numcore::check_dim("cosine_similarity", a.dim(), b.dim())?;
    let (na, nb) = (a.norm(), b.norm());
    for n in [na, nb] {
        if !(n > T::eps_norm()) {
            return Err(NumError::Degenerate {
                op: "cosine_similarity",
                norm: n.to_f64_lossy(),
            });
        }
    }
    let c = a.dot(b)? / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Cosine similarity recorded on a tape.
pub fn cosine_on_tape<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, NumError> {
    let na = tape.l2_normalize(a)?;
    let nb = tape.l2_normalize(b)?;
    tape.dot(na, nb)
}

/// Cosine-normalized projection onto speaker classes with a fixed logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T = f64> {
    pub class_weights: Matrix<T>,
    pub scale: T,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(class_weights: Matrix<T>, scale: T) -> Result<Self, NumError> {
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(NumError::Evaluation(format!("head scale must be positive, got {scale}")));
        }
        Ok(Self { class_weights, scale })
    }

    /// Gaussian class directions.
    pub fn init(num_classes: usize, embed_dim: usize, scale: T, seed: u64) -> Result<Self, NumError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..num_classes * embed_dim)
            .map(|_| T::of(rng.sample::<f64, _>(rand_distr::StandardNormal)))
            .collect();
        Self::new(Matrix::new(num_classes, embed_dim, w)?, scale)
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.rows()
    }

    /// `scale · cos(row_k, e)` for every class `k`.
    pub fn logits(&self, e: &Vector<T>) -> Result<Vec<T>, NumError> {
        numcore::check_dim("head_logits", self.class_weights.cols(), e.dim())?;
        (0..self.num_classes())
            .map(|k| {
                let row = Vector::new(self.class_weights.row(k).to_vec())?;
                Ok(self.scale * cosine_similarity(&row, e)?)
            })
            .collect()
    }

    /// Records the head weights as a leaf and returns it together with the
    /// row-normalized weights, which every logit computation reuses.
    pub fn register(&self, tape: &mut Tape<T>) -> Result<HeadVars, NumError> {
        let weights = tape.matrix(&self.class_weights);
        let normalized = tape.normalize_rows(weights)?;
        Ok(HeadVars { weights, normalized })
    }

    pub fn logits_on_tape(&self, tape: &mut Tape<T>, vars: &HeadVars, e: Var) -> Result<Var, NumError> {
        let ne = tape.l2_normalize(e)?;
        let cos = tape.matvec(vars.normalized, ne)?;
        Ok(tape.scale(cos, self.scale))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weights: Var,
    pub normalized: Var,
}

pub fn head_logits<T: Scalar>(head: &ClassifierHead<T>, e: &Vector<T>) -> Result<Vec<T>, NumError> {
    head.logits(e)
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<T, NumError> {
    if label >= logits.len() {
        return Err(NumError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(NumError::NonFinite("cross_entropy"));
    }
    Ok(numcore::softmax_xent(logits, label).0)
}

/// Aligned (anchor, positive, negative) embeddings sharing one margin.
#[derive(Debug, Clone)]
pub struct TripletBatch<T = f64> {
    anchors: Vec<Vector<T>>,
    positives: Vec<Vector<T>>,
    negatives: Vec<Vector<T>>,
    margin: T,
}

impl<T: Scalar> TripletBatch<T> {
    pub fn new(
        anchors: Vec<Vector<T>>,
        positives: Vec<Vector<T>>,
        negatives: Vec<Vector<T>>,
        margin: T,
    ) -> Result<Self, NumError> {
        if anchors.is_empty() {
            return Err(NumError::Empty("TripletBatch"));
        }
        numcore::check_dim("TripletBatch positives", anchors.len(), positives.len())?;
        numcore::check_dim("TripletBatch negatives", anchors.len(), negatives.len())?;
        if !(margin >= T::zero()) {
            return Err(NumError::Evaluation(format!("margin must be nonnegative, got {margin}")));
        }
        let dim = anchors[0].dim();
        for v in anchors.iter().chain(&positives).chain(&negatives) {
            numcore::check_dim("TripletBatch member", dim, v.dim())?;
        }
        Ok(Self {
            anchors,
            positives,
            negatives,
            margin,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn margin(&self) -> T {
        self.margin
    }
}

/// Cosine distance `1 − cos(a, b)`.
pub fn cosine_distance<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> Result<T, NumError> {
    Ok(T::one() - cosine_similarity(a, b)?)
}

/// Mean over triplets of `max(0, d(a,p) − d(a,n) + m)`.
pub fn triplet_loss<T: Scalar>(batch: &TripletBatch<T>) -> Result<T, NumError> {
    let mut total = T::zero();
    for ((a, p), n) in batch.anchors.iter().zip(&batch.positives).zip(&batch.negatives) {
        let v = cosine_distance(a, p)? - cosine_distance(a, n)? + batch.margin;
        total += v.max(T::zero());
    }
    Ok(total / T::of(batch.len() as f64))
}

/// Hinge term of one triplet on a tape. Returns `(hinge, pre_hinge)`; the
/// pre-hinge value `cos(a,n) − cos(a,p) + m` is exposed for kink checks.
pub fn triplet_term_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: T,
) -> Result<(Var, T), NumError> {
    let cap = cosine_on_tape(tape, anchor, positive)?;
    let can = cosine_on_tape(tape, anchor, negative)?;
    // d(a,p) − d(a,n) = cos(a,n) − cos(a,p)
    let diff = tape.sub(can, cap)?;
    let pre = tape.shift(diff, margin);
    let pre_value = tape.scalar(pre);
    Ok((tape.relu(pre), pre_value))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA }
    }
}

impl LossWeights {
    pub fn new(gamma: f64) -> Result<Self, NumError> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(NumError::Evaluation(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { gamma })
    }
}

/// `l_trip + γ · l_ce`.
pub fn combined_loss<T: Scalar>(l_trip: T, l_ce: T, w: LossWeights) -> T {
    l_trip + T::of(w.gamma) * l_ce
}
