//! Small dense networks with hand-written backpropagation, the AdamW optimizer
//! and the flat-tensor checkpoint format shared by the learners.

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element type of a network: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    LinalgScalar + Float + FromPrimitive + ToPrimitive + ScalarOperand + Debug + Default + Send + Sync + 'static
{
}
impl<T> Scalar for T where
    T: LinalgScalar + Float + FromPrimitive + ToPrimitive + ScalarOperand + Debug + Default + Send + Sync + 'static
{
}

pub fn cast<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

/// Ordered view over every trainable tensor of a model (or of its gradient).
pub trait Parameters<F> {
    fn tensors(&self) -> Vec<&[F]>;
    fn tensors_mut(&mut self) -> Vec<&mut [F]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<F>
    where
        F: Copy,
    {
        self.tensors().into_iter().flat_map(|t| t.iter().copied()).collect()
    }

    fn load_flat(&mut self, flat: &[F]) -> Result<()>
    where
        F: Copy,
    {
        if flat.len() != self.param_count() {
            return Err(Error::LengthMismatch(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `inputs x outputs`
    pub w: Array2<F>,
    pub b: Array1<F>,
}

/// Tanh MLP with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<Dense<F>>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    /// Input to each layer; entry 0 is the network input.
    inputs: Vec<Array2<F>>,
}

impl<F: Scalar> Mlp<F> {
    /// Gaussian init with std `1/sqrt(fan_in)`; the output layer is scaled by
    /// `out_scale`. Biases start at zero.
    pub fn new(sizes: &[usize], out_scale: f64, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let scale = if l + 1 == n { out_scale } else { 1.0 } / (fan_in as f64).sqrt();
                let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    let z: f64 = rng.sample(StandardNormal);
                    cast::<F>(z * scale)
                });
                Dense { w, b: Array1::zeros(fan_out) }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|d| Dense { w: Array2::zeros(d.w.raw_dim()), b: Array1::zeros(d.b.raw_dim()) })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, F>) -> (Array2<F>, MlpCache<F>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w);
            z.zip_mut_with(&layer.b, |a, &b| *a = *a + b);
            if l < last {
                z.mapv_inplace(F::tanh);
            }
            inputs.push(std::mem::replace(&mut a, z));
        }
        (a, MlpCache { inputs })
    }

    /// Gradients of a scalar loss given `d loss / d output`.
    pub fn backward(&self, cache: &MlpCache<F>, grad_out: ArrayView2<'_, F>) -> Mlp<F> {
        let mut grads = self.zeros_like();
        let mut delta = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            grads.layers[l].w = input.t().dot(&delta).as_standard_layout().into_owned();
            grads.layers[l].b = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut d_in = delta.dot(&self.layers[l].w.t());
                // input of layer l is tanh output of layer l-1
                ndarray::Zip::from(&mut d_in).and(input).for_each(|d, &y| *d = *d * (F::one() - y * y));
                delta = d_in;
            }
        }
        grads
    }

    pub fn scale(&mut self, s: F) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn add_assign(&mut self, other: &Mlp<F>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + *y);
        }
    }

    pub fn cast<G: Scalar>(&self) -> Mlp<G> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|d| Dense {
                    w: d.w.mapv(|v| cast::<G>(v.to_f64().unwrap_or(0.0))),
                    b: d.b.mapv(|v| cast::<G>(v.to_f64().unwrap_or(0.0))),
                })
                .collect(),
        }
    }
}

impl<F> Parameters<F> for Mlp<F> {
    fn tensors(&self) -> Vec<&[F]> {
        self.layers
            .iter()
            .flat_map(|d| [d.w.as_slice().expect("standard layout"), d.b.as_slice().expect("standard layout")])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.layers
            .iter_mut()
            .flat_map(|d| {
                [d.w.as_slice_mut().expect("standard layout"), d.b.as_slice_mut().expect("standard layout")]
            })
            .collect()
    }
}

pub fn global_norm<F: Scalar, P: Parameters<F> + ?Sized>(p: &P) -> f64 {
    p.tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|v| {
            let x = v.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<F: Scalar, P: Parameters<F> + ?Sized>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = cast::<F>(max_norm / (norm + 1e-12));
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P, G>(&mut self, params: &mut P, grads: &G)
    where
        P: Parameters<F> + ?Sized,
        G: Parameters<F> + ?Sized,
    {
        let g = grads.tensors();
        let mut p = params.tensors_mut();
        assert_eq!(p.len(), g.len(), "parameter/gradient structure mismatch");
        if self.m.is_empty() {
            self.m = g.iter().map(|t| vec![F::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (cast::<F>(self.beta1), cast::<F>(self.beta2));
        let (one_b1, one_b2) = (cast::<F>(1.0 - self.beta1), cast::<F>(1.0 - self.beta2));
        let step_size = cast::<F>(self.lr / bc1);
        let bc2_sqrt = cast::<F>(bc2.sqrt());
        let eps = cast::<F>(self.eps);
        let decay = cast::<F>(self.lr * self.weight_decay);
        for (i, (pt, gt)) in p.iter_mut().zip(g).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..pt.len() {
                let gj = gt[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                pt[j] = pt[j] - decay * pt[j] - step_size * m[j] / denom;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements into the weights file.
    pub offset: usize,
}

/// `manifest.json` of a checkpoint directory; weights live in `weights.bin`
/// as little-endian f32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub kind: String,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "graspladder-checkpoint-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn mlp_tensors<F: Scalar>(prefix: &str, mlp: &Mlp<F>) -> Vec<NamedTensor> {
    let f = |v: &F| v.to_f32().unwrap_or(f32::NAN);
    mlp.layers
        .iter()
        .enumerate()
        .flat_map(|(i, d)| {
            [
                NamedTensor { name: format!("{prefix}.{i}.weight"), shape: d.w.shape().to_vec(), data: d.w.iter().map(f).collect() },
                NamedTensor { name: format!("{prefix}.{i}.bias"), shape: d.b.shape().to_vec(), data: d.b.iter().map(f).collect() },
            ]
        })
        .collect()
}

pub fn mlp_from_tensors<F: Scalar>(prefix: &str, tensors: &[NamedTensor]) -> Result<Mlp<F>> {
    let mut layers = Vec::new();
    for i in 0.. {
        let find = |suffix: &str| tensors.iter().find(|t| t.name == format!("{prefix}.{i}.{suffix}"));
        let (Some(w), Some(b)) = (find("weight"), find("bias")) else { break };
        if w.shape.len() != 2 || b.shape.len() != 1 || w.shape[1] != b.shape[0] {
            return Err(Error::Checkpoint(format!("bad shapes for {prefix}.{i}")));
        }
        let w = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.iter().map(|&v| cast::<F>(f64::from(v))).collect())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let b = Array1::from_vec(b.data.iter().map(|&v| cast::<F>(f64::from(v))).collect());
        layers.push(Dense { w, b });
    }
    if layers.is_empty() {
        return Err(Error::Checkpoint(format!("no layers named {prefix}.*")));
    }
    Ok(Mlp { layers })
}

pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    config_hash: &str,
    tensors: &[NamedTensor],
    extra: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut bytes = Vec::new();
    let mut offset = 0;
    for t in tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Checkpoint(format!("tensor {} shape/data mismatch", t.name)));
        }
        entries.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset });
        offset += t.data.len();
        bytes.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        kind: kind.into(),
        config_hash: config_hash.into(),
        tensors: entries,
        extra,
    };
    std::fs::write(dir.join("weights.bin"), bytes)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Vec<NamedTensor>)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {}", manifest.format)));
    }
    let bytes = std::fs::read(dir.join("weights.bin"))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint("weights file length is not a multiple of 4".into()));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let len: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} out of range", e.name)))?
            .to_vec();
        tensors.push(NamedTensor { name: e.name.clone(), shape: e.shape.clone(), data });
    }
    Ok((manifest, tensors))
}
