//! Encoder-decoder embedding corrector.
//!
//! ```text
//! x ─┬─ drop ─ fc(embed→h₀) ─ relu ─ fc(h₀→bottleneck) ─ relu ─ drop ─ fc(bottleneck→h₁) ─ relu ─ fc(h₁→embed) ─┐
//!    └──────────────────────────────────────────────────────────────────────────────────────────────────────── + ─ y
//! ```
//!
//! The last layer starts at exactly zero, so a freshly initialized network is
//! the identity map and training learns a residual correction.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{self, Matrix, NumError, Tape, Var, Vector};
use crate::scalar::Scalar;

pub const NUM_LAYERS: usize = 4;
pub const DEFAULT_DROPOUT: f64 = 0.3;
const MAGIC: &[u8; 4] = b"PNW1";

#[derive(Debug, Error)]
pub enum PostNetError {
    #[error("invalid post-net config: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("weight file format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("weight file i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostNetConfig {
    pub embed_dim: usize,
    pub bottleneck_dim: usize,
    /// (encoder hidden width, decoder hidden width)
    pub hidden_dims: (usize, usize),
    pub dropout_rate: f64,
    pub seed: u64,
}

impl PostNetConfig {
    /// Hidden widths of two thirds of the embedding, bottleneck of half.
    pub fn for_embedding(embed_dim: usize) -> Self {
        let hidden = ((embed_dim as f64) * 2.0 / 3.0).round().max(1.0) as usize;
        Self {
            embed_dim,
            bottleneck_dim: embed_dim / 2,
            hidden_dims: (hidden, hidden),
            dropout_rate: DEFAULT_DROPOUT,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PostNetError> {
        let (h0, h1) = self.hidden_dims;
        if self.embed_dim == 0 || self.bottleneck_dim == 0 || h0 == 0 || h1 == 0 {
            return Err(PostNetError::Config("all layer widths must be positive".into()));
        }
        if self.bottleneck_dim >= self.embed_dim {
            return Err(PostNetError::Config(format!(
                "bottleneck_dim {} must be smaller than embed_dim {}",
                self.bottleneck_dim, self.embed_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(PostNetError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// (out, in) shape of every layer, encoder input first.
    pub fn layer_shapes(&self) -> [(usize, usize); NUM_LAYERS] {
        let (h0, h1) = self.hidden_dims;
        [
            (h0, self.embed_dim),
            (self.bottleneck_dim, h0),
            (h1, self.bottleneck_dim),
            (self.embed_dim, h1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weights: Matrix<T>,
    pub bias: Vector<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn num_parameters(&self) -> usize {
        self.weights.as_slice().len() + self.bias.dim()
    }
}

/// Dropout behaviour of a forward pass.
#[derive(Debug, Clone)]
pub enum Mode {
    Eval,
    Train(Box<ChaCha8Rng>),
}

impl Mode {
    pub fn train(seed: u64) -> Self {
        Mode::Train(Box::new(ChaCha8Rng::seed_from_u64(seed)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostNet<T = f64> {
    layers: [Layer<T>; NUM_LAYERS],
    config: PostNetConfig,
}

/// Tape handles of the post-net parameters, `(weights, bias)` per layer.
#[derive(Debug, Clone, Copy)]
pub struct PostNetVars {
    pub layers: [(Var, Var); NUM_LAYERS],
}

impl<T: Scalar> PostNet<T> {
    /// Hidden layers uniform in ±√(1/fan_in); output layer zero.
    pub fn init(config: PostNetConfig) -> Result<Self, PostNetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes = config.layer_shapes();
        let layers = std::array::from_fn(|i| {
            let (rows, cols) = shapes[i];
            if i == NUM_LAYERS - 1 {
                return Layer {
                    weights: Matrix::zeros(rows, cols),
                    bias: Vector::zeros(rows),
                };
            }
            let bound = (1.0 / cols as f64).sqrt();
            let mut draw = |n: usize| -> Vec<T> {
                (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
            };
            let w = draw(rows * cols);
            let b = draw(rows);
            Layer {
                weights: Matrix::new(rows, cols, w).expect("finite init"),
                bias: Vector::new(b).expect("finite init"),
            }
        });
        Ok(Self { layers, config })
    }

    pub fn from_layers(config: PostNetConfig, layers: [Layer<T>; NUM_LAYERS]) -> Result<Self, PostNetError> {
        config.validate()?;
        for (i, (layer, (rows, cols))) in layers.iter().zip(config.layer_shapes()).enumerate() {
            if layer.weights.rows() != rows || layer.weights.cols() != cols || layer.bias.dim() != rows {
                return Err(PostNetError::Config(format!(
                    "layer {i} has shape {}x{} (bias {}), expected {rows}x{cols}",
                    layer.weights.rows(),
                    layer.weights.cols(),
                    layer.bias.dim()
                )));
            }
        }
        Ok(Self { layers, config })
    }

    pub fn config(&self) -> &PostNetConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn layers(&self) -> &[Layer<T>; NUM_LAYERS] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>; NUM_LAYERS] {
        &mut self.layers
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<(), PostNetError> {
        let mut cfg = self.config.clone();
        cfg.dropout_rate = rate;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(Layer::num_parameters).sum()
    }

    /// Corrected embedding. EVAL is deterministic; TRAIN draws inverted
    /// dropout masks from the mode's generator at the input and after the
    /// bottleneck activation.
    pub fn forward(&self, x: &Vector<T>, mode: &mut Mode) -> Result<Vector<T>, PostNetError> {
        Ok(self.forward_traced(x, mode)?.0)
    }

    /// Smallest |pre-activation| over the three ReLU layers for this input,
    /// i.e. the distance to the nearest ReLU kink.
    pub fn relu_margin(&self, x: &Vector<T>, mode: &mut Mode) -> Result<T, PostNetError> {
        let (_, pre) = self.forward_traced(x, mode)?;
        Ok(pre
            .iter()
            .flat_map(|p| p.as_slice().iter())
            .fold(T::infinity(), |m, v| m.min(v.abs())))
    }

    fn forward_traced(&self, x: &Vector<T>, mode: &mut Mode) -> Result<(Vector<T>, [Vector<T>; 3]), PostNetError> {
        numcore::check_dim("postnet forward", self.config.embed_dim, x.dim())?;
        let [l0, l1, l2, l3] = &self.layers;
        let input = match self.dropout_mask(self.config.embed_dim, mode) {
            Some(m) => apply_mask(x, &m),
            None => x.clone(),
        };
        let a0 = numcore::affine(&input, &l0.weights, &l0.bias)?;
        let h = numcore::relu(&a0);
        let a1 = numcore::affine(&h, &l1.weights, &l1.bias)?;
        let z = numcore::relu(&a1);
        let z = match self.dropout_mask(self.config.bottleneck_dim, mode) {
            Some(m) => apply_mask(&z, &m),
            None => z,
        };
        let a2 = numcore::affine(&z, &l2.weights, &l2.bias)?;
        let h = numcore::relu(&a2);
        let d = numcore::affine(&h, &l3.weights, &l3.bias)?;
        let y: Vec<T> = x.as_slice().iter().zip(d.as_slice()).map(|(&a, &b)| a + b).collect();
        Ok((Vector::new(y)?, [a0, a1, a2]))
    }

    /// Decoder branch only, `forward(x) − x` in EVAL mode.
    pub fn correction(&self, x: &Vector<T>) -> Result<Vector<T>, PostNetError> {
        let y = self.forward(x, &mut Mode::Eval)?;
        let d: Vec<T> = y.as_slice().iter().zip(x.as_slice()).map(|(&a, &b)| a - b).collect();
        Ok(Vector::new(d)?)
    }

    fn dropout_mask(&self, len: usize, mode: &mut Mode) -> Option<Vec<T>> {
        let p = self.config.dropout_rate;
        match mode {
            Mode::Train(rng) if p > 0.0 => {
                let keep = T::of(1.0 / (1.0 - p));
                Some(
                    (0..len)
                        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Records every parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> PostNetVars {
        PostNetVars {
            layers: std::array::from_fn(|i| {
                let w = tape.matrix(&self.layers[i].weights);
                let b = tape.vector(&self.layers[i].bias);
                (w, b)
            }),
        }
    }

    /// Same computation as [`PostNet::forward`], recorded on a tape.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &PostNetVars,
        x: Var,
        mode: &mut Mode,
    ) -> Result<Var, PostNetError> {
        numcore::check_dim("postnet forward", self.config.embed_dim, tape.value(x).len())?;
        let [(w0, b0), (w1, b1), (w2, b2), (w3, b3)] = vars.layers;
        let input = match self.dropout_mask(self.config.embed_dim, mode) {
            Some(m) => tape.mask(x, m)?,
            None => x,
        };
        let a = tape.affine(input, w0, b0)?;
        let h = tape.relu(a);
        let a = tape.affine(h, w1, b1)?;
        let mut z = tape.relu(a);
        if let Some(m) = self.dropout_mask(self.config.bottleneck_dim, mode) {
            z = tape.mask(z, m)?;
        }
        let a = tape.affine(z, w2, b2)?;
        let h = tape.relu(a);
        let d = tape.affine(h, w3, b3)?;
        Ok(tape.add(x, d)?)
    }

    /// Flattened parameters, layer order, weights row-major then bias.
    pub fn flat_parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_flat_parameters(&mut self, params: &[T]) -> Result<(), PostNetError> {
        numcore::check_dim("set_flat_parameters", self.num_parameters(), params.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&params[off..off + n]);
            off += n;
            let n = l.bias.dim();
            l.bias.as_mut_slice().copy_from_slice(&params[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Serializes to the `PNW1` layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * NUM_LAYERS + 8 * self.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(NUM_LAYERS as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.weights.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.weights.cols() as u32).to_le_bytes());
        }
        for v in self.flat_parameters() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out
    }

    /// Parses the `PNW1` layout. Dropout rate and seed are not stored and come
    /// back as defaults.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PostNetError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(PostNetError::Format {
                offset: 0,
                reason: "bad magic, expected PNW1".into(),
            });
        }
        let count_at = r.pos;
        let count = r.u32("layer count")? as usize;
        if count != NUM_LAYERS {
            return Err(PostNetError::Format {
                offset: count_at,
                reason: format!("layer count {count}, expected {NUM_LAYERS}"),
            });
        }
        let mut shapes = [(0usize, 0usize); NUM_LAYERS];
        for s in &mut shapes {
            *s = (r.u32("layer rows")? as usize, r.u32("layer cols")? as usize);
        }
        let embed_dim = shapes[0].1;
        let config = PostNetConfig {
            embed_dim,
            bottleneck_dim: shapes[1].0,
            hidden_dims: (shapes[0].0, shapes[2].0),
            dropout_rate: DEFAULT_DROPOUT,
            seed: 0,
        };
        if config.layer_shapes() != shapes {
            return Err(PostNetError::Format {
                offset: 8,
                reason: format!("layer shapes {shapes:?} do not chain"),
            });
        }
        config.validate().map_err(|e| PostNetError::Format {
            offset: 8,
            reason: e.to_string(),
        })?;

        let mut layers: Vec<Layer<T>> = Vec::with_capacity(NUM_LAYERS);
        for (rows, cols) in shapes {
            let at = r.pos;
            let w = r.reals(rows * cols)?;
            let b = r.reals(rows)?;
            let bad = |_| PostNetError::Format {
                offset: at,
                reason: "non-finite parameter".into(),
            };
            layers.push(Layer {
                weights: Matrix::new(rows, cols, w).map_err(bad)?,
                bias: Vector::new(b).map_err(bad)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(PostNetError::Format {
                offset: r.pos,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let layers: [Layer<T>; NUM_LAYERS] = layers.try_into().expect("four layers parsed");
        Ok(Self { layers, config })
    }
}

pub fn save_weights<T: Scalar>(net: &PostNet<T>, path: impl AsRef<Path>) -> Result<(), PostNetError> {
    fs::write(path, net.to_bytes())?;
    Ok(())
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<PostNet<T>, PostNetError> {
    PostNet::from_bytes(&fs::read(path)?)
}

fn apply_mask<T: Scalar>(x: &Vector<T>, mask: &[T]) -> Vector<T> {
    let v = x.as_slice().iter().zip(mask).map(|(&a, &m)| a * m).collect();
    Vector::new(v).expect("masking keeps values finite")
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], PostNetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(PostNetError::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, PostNetError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn reals<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>, PostNetError> {
        let b = self.take(n * 8, "parameters")?;
        Ok(b.chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
}
