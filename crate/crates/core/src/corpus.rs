//! Utterance embeddings grouped by speaker and phonation style.
//!
//! On disk a corpus is a UTF-8 TSV manifest (`utt_id speaker_id style
//! row_index`) plus an `EMB1` binary holding `count × dim` little-endian
//! `f32` rows. Embeddings are widened to `f64` in memory.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{self, Vector};

const EMB_MAGIC: &[u8; 4] = b"EMB1";
const MANIFEST_HEADER: [&str; 4] = ["utt_id", "speaker_id", "style", "row_index"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest row {row}: {reason}")]
    Manifest { row: usize, reason: String },
    #[error("embedding file: {0}")]
    Embeddings(String),
    #[error("corpus: {0}")]
    Invalid(String),
    #[error("split: {0}")]
    Split(String),
    #[error("sampling: speaker {speaker} {reason}")]
    Sampling { speaker: String, reason: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Normal,
    Whisper,
}

impl Style {
    pub fn as_str(self) -> &'static str {
        match self {
            Style::Normal => "normal",
            Style::Whisper => "whisper",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "normal" => Ok(Style::Normal),
            "whisper" => Ok(Style::Whisper),
            other => Err(format!("unknown style token {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub style: Style,
    pub embedding: Vector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    speakers: Vec<String>,
    speaker_of: Vec<usize>,
    dim: usize,
}

impl Corpus {
    /// Speakers are indexed in order of first appearance.
    pub fn new(utterances: Vec<Utterance>) -> Result<Self, CorpusError> {
        let dim = utterances
            .first()
            .map(|u| u.embedding.dim())
            .ok_or_else(|| CorpusError::Invalid("no utterances".into()))?;
        let mut speakers = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut seen_ids: HashMap<&str, usize> = HashMap::new();
        let mut speaker_of = Vec::with_capacity(utterances.len());
        for (row, u) in utterances.iter().enumerate() {
            if u.embedding.dim() != dim {
                return Err(CorpusError::Invalid(format!(
                    "utterance {} has dim {}, expected {dim}",
                    u.utt_id,
                    u.embedding.dim()
                )));
            }
            if let Some(prev) = seen_ids.insert(&u.utt_id, row) {
                return Err(CorpusError::Invalid(format!(
                    "duplicate utt_id {} (rows {prev} and {row})",
                    u.utt_id
                )));
            }
            let next = speakers.len();
            let s = *index.entry(&u.speaker_id).or_insert(next);
            if s == next {
                speakers.push(u.speaker_id.clone());
            }
            speaker_of.push(s);
        }
        Ok(Self {
            utterances,
            speakers,
            speaker_of,
            dim,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn utterance(&self, i: usize) -> &Utterance {
        &self.utterances[i]
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    /// Speaker index of utterance `i`.
    pub fn speaker_index(&self, i: usize) -> usize {
        self.speaker_of[i]
    }

    /// Keeps the utterances of the given speakers, preserving row order.
    pub fn subset_speakers(&self, keep: &[usize]) -> Result<Self, CorpusError> {
        let mut mask = vec![false; self.speakers.len()];
        for &s in keep {
            mask[s] = true;
        }
        let utts = self
            .utterances
            .iter()
            .zip(&self.speaker_of)
            .filter(|(_, &s)| mask[s])
            .map(|(u, _)| u.clone())
            .collect();
        Self::new(utts)
    }

    /// Number of phonated/whispered pairs: per speaker, the smaller style count.
    pub fn num_pairs(&self) -> usize {
        let mut counts = vec![(0usize, 0usize); self.speakers.len()];
        for (u, &s) in self.utterances.iter().zip(&self.speaker_of) {
            match u.style {
                Style::Normal => counts[s].0 += 1,
                Style::Whisper => counts[s].1 += 1,
            }
        }
        counts.iter().map(|&(n, w)| n.min(w)).sum()
    }
}

/// Reads a manifest TSV and an `EMB1` file.
pub fn load_corpus(manifest: impl AsRef<Path>, embeddings: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(manifest)?;
    let (count, dim, rows) = read_embeddings(&fs::read(embeddings)?)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.split('\t').collect::<Vec<_>>() == MANIFEST_HEADER => {}
        _ => {
            return Err(CorpusError::Manifest {
                row: 1,
                reason: format!("header must be {:?}", MANIFEST_HEADER.join("\t")),
            })
        }
    }
    let mut utts = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    for (n, line) in lines {
        let row = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| CorpusError::Manifest { row, reason };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let style: Style = fields[2].parse().map_err(bad)?;
        let index: usize = fields[3]
            .parse()
            .map_err(|_| bad(format!("row_index {:?} is not a nonnegative integer", fields[3])))?;
        if index >= count {
            return Err(bad(format!("row_index {index} out of range for {count} embeddings")));
        }
        if let Some(prev) = ids.insert(fields[0].to_string(), row) {
            return Err(bad(format!("duplicate utt_id {:?} (first on row {prev})", fields[0])));
        }
        let values = rows[index * dim..(index + 1) * dim].to_vec();
        let embedding = Vector::new(values).map_err(|e| bad(format!("embedding {index}: {e}")))?;
        utts.push(Utterance {
            utt_id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            style,
            embedding,
        });
    }
    Corpus::new(utts)
}

/// Writes the manifest and the `EMB1` file; manifest row `i` references
/// embedding row `i`.
pub fn save_corpus(corpus: &Corpus, manifest: impl AsRef<Path>, embeddings: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut m = Vec::new();
    writeln!(m, "{}", MANIFEST_HEADER.join("\t"))?;
    for (i, u) in corpus.utterances.iter().enumerate() {
        writeln!(m, "{}\t{}\t{}\t{i}", u.utt_id, u.speaker_id, u.style)?;
    }
    fs::write(manifest, m)?;
    fs::write(embeddings, write_embeddings(corpus))?;
    Ok(())
}

pub fn write_embeddings(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * corpus.len() * corpus.dim);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(corpus.len() as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.dim as u32).to_le_bytes());
    for u in &corpus.utterances {
        for &v in u.embedding.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Returns `(count, dim, row-major values)`.
pub fn read_embeddings(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), CorpusError> {
    if bytes.len() < 12 || &bytes[..4] != EMB_MAGIC {
        return Err(CorpusError::Embeddings("missing EMB1 header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (count, dim) = (u32_at(4), u32_at(8));
    if dim == 0 {
        return Err(CorpusError::Embeddings("dim must be positive".into()));
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| CorpusError::Embeddings("header sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(CorpusError::Embeddings(format!(
            "header declares {count}x{dim} ({expected} bytes) but file has {} bytes",
            bytes.len()
        )));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((count, dim, values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Number of training speakers: round half up, clamped so both sides are nonempty.
pub fn train_speaker_count(num_speakers: usize, train_fraction: f64) -> usize {
    let raw = (train_fraction * num_speakers as f64 + 0.5).floor() as usize;
    raw.clamp(1, num_speakers.saturating_sub(1).max(1))
}

/// Speaker-disjoint split. Speakers are shuffled by seed; the first
/// `train_speaker_count` go to the training side.
pub fn split_speakers(corpus: &Corpus, spec: SplitSpec) -> Result<(Corpus, Corpus), CorpusError> {
    let n = corpus.num_speakers();
    if n < 2 {
        return Err(CorpusError::Split(format!("need at least 2 speakers, got {n}")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(CorpusError::Split(format!(
            "train_fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let k = train_speaker_count(n, spec.train_fraction);
    let (train, test) = order.split_at(k);
    Ok((corpus.subset_speakers(train)?, corpus.subset_speakers(test)?))
}

/// Indices into the corpus of one sampled triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndices {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws (normal anchor, whispered positive of the same speaker, any-style
/// negative of another speaker).
#[derive(Debug, Clone)]
pub struct TripletSampler {
    normals: Vec<usize>,
    whispers_by_speaker: Vec<Vec<usize>>,
    speaker_of: Vec<usize>,
}

impl TripletSampler {
    pub fn new(corpus: &Corpus) -> Result<Self, CorpusError> {
        if corpus.num_speakers() < 2 {
            return Err(CorpusError::Sampling {
                speaker: corpus.speakers().first().cloned().unwrap_or_default(),
                reason: "is the only speaker; negatives need at least 2".into(),
            });
        }
        let mut normals = Vec::new();
        let mut has_normal = vec![false; corpus.num_speakers()];
        let mut whispers_by_speaker = vec![Vec::new(); corpus.num_speakers()];
        for (i, u) in corpus.utterances().iter().enumerate() {
            let s = corpus.speaker_index(i);
            match u.style {
                Style::Normal => {
                    normals.push(i);
                    has_normal[s] = true;
                }
                Style::Whisper => whispers_by_speaker[s].push(i),
            }
        }
        for (s, name) in corpus.speakers().iter().enumerate() {
            if !has_normal[s] {
                return Err(CorpusError::Sampling {
                    speaker: name.clone(),
                    reason: "has no normal utterances".into(),
                });
            }
            if whispers_by_speaker[s].is_empty() {
                return Err(CorpusError::Sampling {
                    speaker: name.clone(),
                    reason: "has no whispered utterances".into(),
                });
            }
        }
        Ok(Self {
            normals,
            whispers_by_speaker,
            speaker_of: corpus.speaker_of.clone(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TripletIndices {
        let anchor = self.normals[rng.random_range(0..self.normals.len())];
        let s = self.speaker_of[anchor];
        let whispers = &self.whispers_by_speaker[s];
        let positive = whispers[rng.random_range(0..whispers.len())];
        let negative = loop {
            let j = rng.random_range(0..self.speaker_of.len());
            if self.speaker_of[j] != s {
                break j;
            }
        };
        TripletIndices {
            anchor,
            positive,
            negative,
        }
    }
}

/// One-shot convenience over [`TripletSampler`].
pub fn sample_triplet<R: Rng + ?Sized>(corpus: &Corpus, rng: &mut R) -> Result<TripletIndices, CorpusError> {
    Ok(TripletSampler::new(corpus)?.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialType {
    NormWhsp,
    NormNorm,
    WhspWhsp,
    AllAll,
}

impl TrialType {
    pub const ALL: [TrialType; 4] = [
        TrialType::NormWhsp,
        TrialType::NormNorm,
        TrialType::WhspWhsp,
        TrialType::AllAll,
    ];

    pub fn enroll_style(self) -> Option<Style> {
        match self {
            TrialType::NormWhsp | TrialType::NormNorm => Some(Style::Normal),
            TrialType::WhspWhsp => Some(Style::Whisper),
            TrialType::AllAll => None,
        }
    }

    /// Style of both the target and the nontarget test side.
    pub fn test_style(self) -> Option<Style> {
        match self {
            TrialType::NormNorm => Some(Style::Normal),
            TrialType::NormWhsp | TrialType::WhspWhsp => Some(Style::Whisper),
            TrialType::AllAll => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrialType::NormWhsp => "norm_whsp",
            TrialType::NormNorm => "norm_norm",
            TrialType::WhspWhsp => "whsp_whsp",
            TrialType::AllAll => "all_all",
        }
    }

    pub fn conforms(self, enroll: Style, test: Style) -> bool {
        self.enroll_style().is_none_or(|s| s == enroll) && self.test_style().is_none_or(|s| s == test)
    }
}

impl fmt::Display for TrialType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        TrialType::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| format!("unknown trial type {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Nontarget,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
        }
    }
}

/// An (enrollment, test) pair of corpus row indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub enroll: usize,
    pub test: usize,
    pub label: Label,
    pub trial_type: TrialType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialList {
    pub trial_type: TrialType,
    pub trials: Vec<Trial>,
    /// Enrollment utterances without an eligible positive or negative.
    pub skipped: usize,
}

/// One target and one nontarget trial per eligible enrollment utterance,
/// drawn uniformly among candidates of the type's test style.
pub fn build_trials(corpus: &Corpus, trial_type: TrialType, seed: u64) -> TrialList {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test_style = trial_type.test_style();
    let candidates: Vec<usize> = (0..corpus.len())
        .filter(|&j| test_style.is_none_or(|s| corpus.utterance(j).style == s))
        .collect();
    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_speakers()];
    for &j in &candidates {
        by_speaker[corpus.speaker_index(j)].push(j);
    }

    let mut trials = Vec::new();
    let mut skipped = 0;
    for (i, u) in corpus.utterances().iter().enumerate() {
        if trial_type.enroll_style().is_some_and(|s| s != u.style) {
            continue;
        }
        let s = corpus.speaker_index(i);
        let own = &by_speaker[s];
        let n_pos = own.len() - usize::from(own.contains(&i));
        let n_neg = candidates.len() - own.len();
        if n_pos == 0 || n_neg == 0 {
            skipped += 1;
            continue;
        }
        let positive = loop {
            let j = own[rng.random_range(0..own.len())];
            if j != i {
                break j;
            }
        };
        let negative = loop {
            let j = candidates[rng.random_range(0..candidates.len())];
            if corpus.speaker_index(j) != s {
                break j;
            }
        };
        trials.push(Trial {
            enroll: i,
            test: positive,
            label: Label::Target,
            trial_type,
        });
        trials.push(Trial {
            enroll: i,
            test: negative,
            label: Label::Nontarget,
            trial_type,
        });
    }
    if skipped > 0 {
        log::warn!("{trial_type}: skipped {skipped} enrollment utterances without eligible trials");
    }
    TrialList {
        trial_type,
        trials,
        skipped,
    }
}

/// TSV `enroll_utt test_utt label trial_type` with a header row.
pub fn trials_to_tsv(corpus: &Corpus, trials: &[Trial]) -> String {
    let mut out = String::from("enroll_utt\ttest_utt\tlabel\ttrial_type\n");
    for t in trials {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            corpus.utterance(t.enroll).utt_id,
            corpus.utterance(t.test).utt_id,
            t.label.as_str(),
            t.trial_type
        ));
    }
    out
}

/// Desk-scale stand-in for backbone embeddings of a two-style corpus.
///
/// Each speaker has a unit direction `s`. Phonated utterances are
/// `normalize(s + σ·g)`; whispered ones are `normalize(α·R s + β·u + σ·g)` with
/// one rotation `R` and one unit offset `u` shared by all speakers. `R`
/// rotates by `rotation_angle` radians inside `rotation_planes` random
/// orthogonal planes and is the identity elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utts_per_speaker_per_style: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub whisper_gain: f64,
    pub whisper_offset: f64,
    pub rotation_planes: usize,
    pub rotation_angle: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_speakers: 30,
            utts_per_speaker_per_style: 40,
            dim: 64,
            noise_sigma: 0.05,
            whisper_gain: 0.85,
            whisper_offset: 3.0,
            rotation_planes: 4,
            rotation_angle: std::f64::consts::FRAC_PI_2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Invalid(format!("synthetic config: {m}")));
        if self.num_speakers == 0 || self.utts_per_speaker_per_style == 0 || self.dim == 0 {
            return bad("counts and dim must be positive".into());
        }
        if !(self.whisper_gain > 0.0 && self.whisper_gain <= 1.0) {
            return bad(format!("whisper_gain {} outside (0, 1]", self.whisper_gain));
        }
        if self.noise_sigma < 0.0 || self.whisper_offset < 0.0 {
            return bad("noise_sigma and whisper_offset must be nonnegative".into());
        }
        if 2 * self.rotation_planes > self.dim {
            return bad(format!(
                "{} rotation planes need {} dims, have {}",
                self.rotation_planes,
                2 * self.rotation_planes,
                self.dim
            ));
        }
        Ok(())
    }
}

/// A rotation acting inside disjoint orthogonal planes.
#[derive(Debug, Clone)]
struct PlaneRotation {
    planes: Vec<(Vec<f64>, Vec<f64>)>,
    cos: f64,
    sin: f64,
}

impl PlaneRotation {
    fn random<R: Rng>(rng: &mut R, dim: usize, planes: usize, angle: f64) -> Self {
        let basis = random_orthonormal(rng, dim, 2 * planes);
        let planes = basis.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect();
        Self {
            planes,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for (p, q) in &self.planes {
            let a = numcore::dot(p, x);
            let b = numcore::dot(q, x);
            for k in 0..x.len() {
                out[k] += (self.cos - 1.0) * (a * p[k] + b * q[k]) + self.sin * (a * q[k] - b * p[k]);
            }
        }
        out
    }
}

fn gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let g = gaussian(rng, dim);
        let n = numcore::norm(&g);
        if n > 1e-6 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

fn random_orthonormal<R: Rng>(rng: &mut R, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let d = numcore::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = numcore::norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Normalizes and rounds through `f32` so the corpus survives `EMB1` exactly.
fn finish(v: Vec<f64>) -> Vector<f64> {
    let n = numcore::norm(&v);
    Vector::new(v.into_iter().map(|x| (x / n) as f32 as f64).collect()).expect("finite synthetic embedding")
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rotation = PlaneRotation::random(&mut rng, cfg.dim, cfg.rotation_planes, cfg.rotation_angle);
    let offset = unit(&mut rng, cfg.dim);
    let mut utts = Vec::with_capacity(cfg.num_speakers * cfg.utts_per_speaker_per_style * 2);
    for spk in 0..cfg.num_speakers {
        let speaker_id = format!("spk{spk:03}");
        let s = unit(&mut rng, cfg.dim);
        let rotated = rotation.apply(&s);
        for j in 0..cfg.utts_per_speaker_per_style {
            let g = gaussian(&mut rng, cfg.dim);
            let v: Vec<f64> = s.iter().zip(&g).map(|(a, n)| a + cfg.noise_sigma * n).collect();
            utts.push(Utterance {
                utt_id: format!("{speaker_id}_n{j:03}"),
                speaker_id: speaker_id.clone(),
                style: Style::Normal,
                embedding: finish(v),
            });
        }
        for j in 0..cfg.utts_per_speaker_per_style {
            let g = gaussian(&mut rng, cfg.dim);
            let v: Vec<f64> = rotated
                .iter()
                .zip(&offset)
                .zip(&g)
                .map(|((r, u), n)| cfg.whisper_gain * r + cfg.whisper_offset * u + cfg.noise_sigma * n)
                .collect();
            utts.push(Utterance {
                utt_id: format!("{speaker_id}_w{j:03}"),
                speaker_id: speaker_id.clone(),
                style: Style::Whisper,
                embedding: finish(v),
            });
        }
    }
    Corpus::new(utts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::cosine_similarity;

    fn utt(id: &str, spk: &str, style: Style, v: &[f64]) -> Utterance {
        Utterance {
            utt_id: id.into(),
            speaker_id: spk.into(),
            style,
            embedding: Vector::new(v.to_vec()).unwrap(),
        }
    }

    fn tiny_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            num_speakers: 6,
            utts_per_speaker_per_style: 5,
            dim: 8,
            rotation_planes: 2,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn corpus_rejects_duplicates_and_dim_mismatch() {
        let a = utt("a", "s", Style::Normal, &[1.0, 0.0]);
        assert!(Corpus::new(vec![a.clone(), a.clone()]).is_err());
        let b = utt("b", "s", Style::Normal, &[1.0]);
        assert!(Corpus::new(vec![a, b]).is_err());
        assert!(Corpus::new(vec![]).is_err());
    }

    #[test]
    fn manifest_load_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::new(vec![
            utt("u1", "A", Style::Normal, &[1.0, 0.5]),
            utt("u2", "B", Style::Whisper, &[0.25, -1.0]),
        ])
        .unwrap();
        let (m, e) = (dir.path().join("m.tsv"), dir.path().join("e.emb"));
        save_corpus(&corpus, &m, &e).unwrap();
        let back = load_corpus(&m, &e).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back.len(), 2);

        let write = |body: &str| {
            fs::write(&m, format!("utt_id\tspeaker_id\tstyle\trow_index\n{body}")).unwrap();
            load_corpus(&m, &e)
        };
        match write("u1\tA\tshout\t0\n") {
            Err(CorpusError::Manifest { row: 2, reason }) => assert!(reason.contains("shout")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(write("u1\tA\tnormal\t0\nu1\tB\twhisper\t1\n"), Err(CorpusError::Manifest { row: 3, .. })));
        assert!(matches!(write("u1\tA\tnormal\t2\n"), Err(CorpusError::Manifest { row: 2, .. })));
        assert!(matches!(write("u1\tA\tnormal\n"), Err(CorpusError::Manifest { row: 2, .. })));

        let mut bytes = fs::read(&e).unwrap();
        bytes.pop();
        fs::write(&e, bytes).unwrap();
        assert!(matches!(load_corpus(&m, &e), Err(CorpusError::Embeddings(_))));
    }

    #[test]
    fn synthetic_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic(&tiny_cfg(4)).unwrap();
        let (m, e) = (dir.path().join("m.tsv"), dir.path().join("e.emb"));
        save_corpus(&corpus, &m, &e).unwrap();
        assert_eq!(load_corpus(&m, &e).unwrap(), corpus);
    }

    #[test]
    fn split_counts() {
        assert_eq!(train_speaker_count(36, 0.7), 25);
        assert_eq!(train_speaker_count(2, 0.7), 1);
        assert_eq!(train_speaker_count(30, 0.7), 21);
        assert_eq!(train_speaker_count(10, 0.05), 1);
        assert_eq!(train_speaker_count(10, 0.99), 9);
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let corpus = generate_synthetic(&tiny_cfg(1)).unwrap();
        let (tr, te) = split_speakers(&corpus, SplitSpec { train_fraction: 0.7, seed: 3 }).unwrap();
        assert_eq!(tr.num_speakers(), 4);
        assert_eq!(te.num_speakers(), 2);
        assert!(tr.speakers().iter().all(|s| !te.speakers().contains(s)));
        assert_eq!(tr.len() + te.len(), corpus.len());
        let again = split_speakers(&corpus, SplitSpec { train_fraction: 0.7, seed: 3 }).unwrap();
        assert_eq!((tr, te), again);
        let one = Corpus::new(vec![utt("a", "s", Style::Normal, &[1.0])]).unwrap();
        assert!(split_speakers(&one, SplitSpec::default()).is_err());
    }

    #[test]
    fn two_speaker_triplets_use_the_other_speaker() {
        let corpus = Corpus::new(vec![
            utt("a_n", "A", Style::Normal, &[1.0, 0.0]),
            utt("a_w", "A", Style::Whisper, &[0.9, 0.1]),
            utt("b_n", "B", Style::Normal, &[0.0, 1.0]),
            utt("b_w", "B", Style::Whisper, &[0.1, 0.9]),
        ])
        .unwrap();
        let sampler = TripletSampler::new(&corpus).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let t = sampler.sample(&mut rng);
            let sa = corpus.speaker_index(t.anchor);
            assert_eq!(corpus.utterance(t.anchor).style, Style::Normal);
            assert_eq!(corpus.utterance(t.positive).style, Style::Whisper);
            assert_eq!(corpus.speaker_index(t.positive), sa);
            assert_ne!(corpus.speaker_index(t.negative), sa);
        }
    }

    #[test]
    fn sampler_names_speaker_without_whispers() {
        let corpus = Corpus::new(vec![
            utt("a_n", "A", Style::Normal, &[1.0, 0.0]),
            utt("a_w", "A", Style::Whisper, &[0.9, 0.1]),
            utt("b_n", "B", Style::Normal, &[0.0, 1.0]),
        ])
        .unwrap();
        match TripletSampler::new(&corpus) {
            Err(CorpusError::Sampling { speaker, .. }) => assert_eq!(speaker, "B"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn anchor_speakers_are_uniform() {
        let corpus = generate_synthetic(&tiny_cfg(2)).unwrap();
        let sampler = TripletSampler::new(&corpus).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let k = corpus.num_speakers();
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            counts[corpus.speaker_index(sampler.sample(&mut rng).anchor)] += 1;
        }
        let p = 1.0 / k as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn norm_norm_trial_count_by_enumeration() {
        let corpus = Corpus::new(vec![
            utt("a1", "A", Style::Normal, &[1.0, 0.0]),
            utt("a2", "A", Style::Normal, &[0.9, 0.1]),
            utt("b1", "B", Style::Normal, &[0.0, 1.0]),
            utt("b2", "B", Style::Normal, &[0.1, 0.9]),
        ])
        .unwrap();
        let list = build_trials(&corpus, TrialType::NormNorm, 0);
        assert_eq!(list.trials.len(), 8);
        assert_eq!(list.skipped, 0);
        // Only one positive exists per enrollment.
        for t in list.trials.iter().filter(|t| t.label == Label::Target) {
            assert_eq!(corpus.speaker_index(t.enroll), corpus.speaker_index(t.test));
            assert_ne!(t.enroll, t.test);
        }
        // No whisper utterances: nothing to build for whisper tests.
        let w = build_trials(&corpus, TrialType::NormWhsp, 0);
        assert!(w.trials.is_empty());
        assert_eq!(w.skipped, 4);
    }

    #[test]
    fn trials_conform_for_every_type() {
        let corpus = generate_synthetic(&tiny_cfg(5)).unwrap();
        for tt in TrialType::ALL {
            let list = build_trials(&corpus, tt, 17);
            assert_eq!(list.skipped, 0);
            let expected = match tt.enroll_style() {
                Some(_) => 6 * 5,
                None => 6 * 10,
            };
            assert_eq!(list.trials.len(), 2 * expected);
            for pair in list.trials.chunks(2) {
                assert_eq!(pair[0].label, Label::Target);
                assert_eq!(pair[1].label, Label::Nontarget);
                assert_eq!(pair[0].enroll, pair[1].enroll);
            }
            for t in &list.trials {
                let (e, s) = (corpus.utterance(t.enroll), corpus.utterance(t.test));
                assert!(tt.conforms(e.style, s.style));
                assert_ne!(t.enroll, t.test);
                let same = corpus.speaker_index(t.enroll) == corpus.speaker_index(t.test);
                assert_eq!(same, t.label == Label::Target);
            }
            assert_eq!(list, build_trials(&corpus, tt, 17));
        }
        let tsv = trials_to_tsv(&corpus, &build_trials(&corpus, TrialType::NormWhsp, 1).trials);
        assert!(tsv.starts_with("enroll_utt\ttest_utt\tlabel\ttrial_type\n"));
        assert!(tsv.lines().nth(1).unwrap().ends_with("\ttarget\tnorm_whsp"));
    }

    #[test]
    fn trial_type_parsing() {
        assert_eq!("norm-whsp".parse::<TrialType>().unwrap(), TrialType::NormWhsp);
        assert_eq!("ALL_ALL".parse::<TrialType>().unwrap(), TrialType::AllAll);
        assert!("whsp_norm".parse::<TrialType>().is_err());
    }

    #[test]
    fn disabled_distortion_gives_identical_styles() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            whisper_gain: 1.0,
            whisper_offset: 0.0,
            rotation_angle: 0.0,
            ..tiny_cfg(3)
        };
        let c = generate_synthetic(&cfg).unwrap();
        let per = cfg.utts_per_speaker_per_style;
        for spk in 0..cfg.num_speakers {
            let base = spk * 2 * per;
            for j in 0..per {
                assert_eq!(c.utterance(base + j).embedding, c.utterance(base + per + j).embedding);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(generate_synthetic(&tiny_cfg(9)).unwrap(), generate_synthetic(&tiny_cfg(9)).unwrap());
        assert_ne!(generate_synthetic(&tiny_cfg(9)).unwrap(), generate_synthetic(&tiny_cfg(10)).unwrap());
    }

    #[test]
    fn synthetic_default_has_style_mismatch_and_separability() {
        let cfg = SynthConfig::default();
        let c = generate_synthetic(&cfg).unwrap();
        let per = cfg.utts_per_speaker_per_style;
        let cos = |i: usize, j: usize| cosine_similarity(&c.utterance(i).embedding, &c.utterance(j).embedding).unwrap();
        let (mut same, mut cross) = (0.0, 0.0);
        let mut n = 0.0;
        for spk in 0..cfg.num_speakers {
            let base = spk * 2 * per;
            for j in 0..per - 1 {
                same += cos(base + j, base + j + 1);
                cross += cos(base + j, base + per + j);
                n += 1.0;
            }
        }
        assert!(cross / n < same / n, "cross {} same {}", cross / n, same / n);

        // Same-speaker same-style cosine beats cross-speaker cosine.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 20_000;
        let mut wins = 0;
        for _ in 0..trials {
            let s1 = rng.random_range(0..cfg.num_speakers);
            let s2 = (s1 + rng.random_range(1..cfg.num_speakers)) % cfg.num_speakers;
            let style = rng.random_range(0..2) * per;
            let (a, b) = (rng.random_range(0..per), rng.random_range(0..per));
            let i = s1 * 2 * per + style + a;
            let j = s1 * 2 * per + style + if b == a { (b + 1) % per } else { b };
            let k = s2 * 2 * per + rng.random_range(0..2 * per);
            if cos(i, j) > cos(i, k) {
                wins += 1;
            }
        }
        assert!(wins as f64 / trials as f64 >= 0.99, "{wins}");
    }
}
