//! Small MLP teacher/student networks and their checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::bchw_to_rows_indices;
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 8] = b"BDDCKPT1";

/// Layer widths from input to output; relu between layers, raw logits out.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Result<MlpSpec> {
        let spec = MlpSpec { layer_widths, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::invalid("layer_widths", "need at least 2 widths"));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("layer_widths", "widths must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

/// Per-layer (weight, bias) tensors.
pub struct ModelParams {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl ModelParams {
    pub fn all_tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    /// Turn off gradients; used for pretrained teachers.
    pub fn freeze(&self) {
        for t in self.all_tensors() {
            t.set_requires_grad(false);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.all_tensors().iter().all(|t| !t.requires_grad())
    }

    /// Deep copy of all values (fresh storage, grads dropped).
    pub fn clone_values(&self) -> ModelParams {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| {
                    (
                        Tensor::param(&w.shape(), w.to_vec()).unwrap(),
                        Tensor::param(&b.shape(), b.to_vec()).unwrap(),
                    )
                })
                .collect(),
        }
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| {
                let mut v = w.to_vec();
                v.extend(b.to_vec());
                v
            })
            .collect()
    }
}

/// Uniform(−s, s) weights with s = sqrt(6/(fan_in+fan_out)), zero biases,
/// deterministic under the spec seed.
pub fn init_params(spec: &MlpSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    for pair in spec.layer_widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * s)
            .collect();
        layers.push((
            Tensor::param(&[fan_in, fan_out], w)?,
            Tensor::param(&[fan_out], vec![0.0; fan_out])?,
        ));
    }
    Ok(ModelParams { layers })
}

/// Total weight and bias count.
pub fn count_params(spec: &MlpSpec) -> usize {
    spec.layer_widths
        .windows(2)
        .map(|p| p[0] * p[1] + p[1])
        .sum()
}

/// Alternating affine/relu; raw logits at the output layer.
pub fn forward_logits(graph: &Graph, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    let last = params.layers.len() - 1;
    for (i, (w, b)) in params.layers.iter().enumerate() {
        h = graph.affine(&h, w, b)?;
        if i < last {
            h = graph.relu(&h);
        }
    }
    Ok(h)
}

/// Apply the classifier per spatial cell: `[B,D,H,W]` features in,
/// `[B,C,H,W]` logits out.
pub fn forward_grid_logits(graph: &Graph, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Contract(format!(
            "forward_grid_logits expects [B,D,H,W], got {shape:?}"
        )));
    }
    let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    // [B,D,H,W] -> [B*H*W, D]
    let rows = graph.select(x, &bchw_to_rows_indices(b, d, h, w), &[b * h * w, d])?;
    let logits = forward_logits(graph, params, &rows)?;
    let c = logits.shape()[1];
    // [B*H*W, C] -> [B,C,H,W]: inverse of the row layout
    let hw = h * w;
    let mut idx = Vec::with_capacity(b * c * hw);
    for bi in 0..b {
        for ci in 0..c {
            for s in 0..hw {
                idx.push((bi * hw + s) * c + ci);
            }
        }
    }
    graph.select(&logits, &idx, &[b, c, h, w])
}

/// Versioned binary checkpoint; round-trips values bit-exactly.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for (w, b) in &params.layers {
        let ws = w.shape();
        f.write_all(&(ws[0] as u32).to_le_bytes())?;
        f.write_all(&(ws[1] as u32).to_le_bytes())?;
        for v in w.to_vec() {
            f.write_all(&v.to_le_bytes())?;
        }
        for v in b.to_vec() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let malformed = |m: &str| Error::Malformed {
        path: path.display().to_string(),
        message: m.to_string(),
    };
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(malformed("bad magic; not a checkpoint file"));
    }
    let n_layers = read_u32(&mut f)? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(malformed("implausible layer count"));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let fan_in = read_u32(&mut f)? as usize;
        let fan_out = read_u32(&mut f)? as usize;
        let w = read_f64s(&mut f, fan_in * fan_out)?;
        let b = read_f64s(&mut f, fan_out)?;
        layers.push((
            Tensor::param(&[fan_in, fan_out], w)?,
            Tensor::param(&[fan_out], b)?,
        ));
    }
    Ok(ModelParams { layers })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}


/// Plain-data snapshot of model weights; `Send`, unlike the Rc-backed
/// tensors, so sweeps can fan runs out across threads.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    pub layers: Vec<ParamLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ModelParams {
    pub fn to_store(&self) -> ParamStore {
        ParamStore {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| {
                    let ws = w.shape();
                    ParamLayer {
                        fan_in: ws[0],
                        fan_out: ws[1],
                        weights: w.to_vec(),
                        biases: b.to_vec(),
                    }
                })
                .collect(),
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<ModelParams> {
        let mut layers = Vec::with_capacity(store.layers.len());
        for l in &store.layers {
            layers.push((
                Tensor::param(&[l.fan_in, l.fan_out], l.weights.clone())?,
                Tensor::param(&[l.fan_out], l.biases.clone())?,
            ));
        }
        Ok(ModelParams { layers })
    }

    /// Output width of the final layer.
    pub fn class_count(&self) -> usize {
        self.layers.last().map(|(w, _)| w.shape()[1]).unwrap_or(0)
    }

    /// Input width of the first layer.
    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|(w, _)| w.shape()[0]).unwrap_or(0)
    }
}
