//! Device/edge split execution of the toy model.
//!
//! The device runs the two modality encoders, the edge runs fusion and both
//! heads and holds the labels. Activations going up and gradients coming
//! back down pass through [`compress`]: top-k sparsification, then uniform
//! symmetric quantization, then additive Gaussian noise.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterSet, LayerRegistry};
use crate::error::{Error, Result};
use crate::model::{
    device_backward, device_forward, edge_backward, edge_forward, head_losses, Batch, DeviceCache, EdgeCache,
    LossBreakdown, LossWeights, ToyModel, FUSION, GEN_HEAD, TEXT_ENC, UND_HEAD, VISION_ENC,
};
use crate::rng::RandomSource;
use crate::tensor::ParamTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub device_layers: BTreeSet<String>,
    pub edge_layers: BTreeSet<String>,
}

impl SplitPlan {
    /// Encoders on the device; fusion, heads and the alignment token on the edge.
    pub fn toy() -> Self {
        Self {
            device_layers: [VISION_ENC, TEXT_ENC].into_iter().map(String::from).collect(),
            edge_layers: [FUSION, UND_HEAD, GEN_HEAD].into_iter().map(String::from).collect(),
        }
    }

    /// The two sides must partition the registry, and the cut must sit
    /// between the encoders and fusion since that is the only place the toy
    /// network has a narrow interface.
    pub fn check(&self, registry: &LayerRegistry) -> Result<()> {
        if let Some(both) = self.device_layers.intersection(&self.edge_layers).next() {
            return Err(Error::InvalidArgument(format!("split plan places {both:?} on both sides")));
        }
        let planned: BTreeSet<&str> = self.device_layers.iter().chain(&self.edge_layers).map(String::as_str).collect();
        let registered: BTreeSet<&str> = registry.layers().iter().map(|l| l.name.as_str()).collect();
        if planned != registered {
            return Err(Error::InvalidArgument(format!(
                "split plan covers {planned:?} but the registry has {registered:?}"
            )));
        }
        if *self != Self::toy() {
            return Err(Error::InvalidArgument("split plan must cut between the encoders and fusion".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterfacePolicy {
    pub noise_sigma: f64,
    pub topk_fraction: f64,
    /// 0 disables quantization; otherwise 2..=16.
    pub quant_bits: u32,
}

impl Default for InterfacePolicy {
    fn default() -> Self {
        Self::identity()
    }
}

impl InterfacePolicy {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            topk_fraction: 1.0,
            quant_bits: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.noise_sigma == 0.0 && self.topk_fraction == 1.0 && self.quant_bits == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "top-k fraction must lie in (0, 1], got {}",
                self.topk_fraction
            )));
        }
        if self.quant_bits == 1 || self.quant_bits > 16 {
            return Err(Error::InvalidArgument(format!(
                "quantization bits must be 0 or 2..=16, got {}",
                self.quant_bits
            )));
        }
        Ok(())
    }
}

/// Result of pushing a buffer through the interface.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub values: Vec<f64>,
    pub kept: usize,
    /// Quantizer step, when quantization ran.
    pub step: Option<f64>,
    pub payload_bytes: usize,
}

/// Wire size of a buffer of `len` values with `kept` survivors at `bits`
/// bits each (0 means raw 32-bit floats).
///
/// The cheaper of a dense bit-packed encoding and a sparse
/// (value, 32-bit index) list; both shrink as `bits` or `kept` shrink.
pub fn interface_payload_bytes(len: usize, kept: usize, bits: u32) -> usize {
    let b = if bits == 0 { 32 } else { bits as usize };
    let dense = (len * b).div_ceil(8);
    let sparse = (kept * (b + 32)).div_ceil(8);
    dense.min(sparse)
}

/// Number of entries top-k keeps out of `len`.
pub fn topk_count(len: usize, fraction: f64) -> usize {
    if len == 0 {
        return 0;
    }
    ((fraction * len as f64).ceil() as usize).clamp(1, len)
}

pub fn compress_values(x: &[f64], policy: &InterfacePolicy, rs: &mut RandomSource) -> Result<Compressed> {
    policy.validate()?;
    let len = x.len();
    let mut values = x.to_vec();
    let kept = topk_count(len, policy.topk_fraction);
    let mut keep_mask = vec![true; len];
    if kept < len {
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
        for &i in &order[kept..] {
            keep_mask[i] = false;
            values[i] = 0.0;
        }
    }
    let mut step = None;
    if policy.quant_bits > 0 {
        let m = values
            .iter()
            .zip(&keep_mask)
            .filter(|(_, &k)| k)
            .fold(0.0f64, |acc, (v, _)| acc.max(v.abs()));
        if m > 0.0 {
            let top = ((1u32 << policy.quant_bits) - 1) as f64;
            let delta = 2.0 * m / top;
            for (v, _) in values.iter_mut().zip(&keep_mask).filter(|(_, &k)| k) {
                let level = ((*v + m) / delta).round().clamp(0.0, top);
                *v = level * delta - m;
            }
            step = Some(delta);
        }
    }
    if policy.noise_sigma > 0.0 {
        for v in &mut values {
            *v += policy.noise_sigma * rs.standard_normal();
        }
    }
    Ok(Compressed {
        values,
        kept,
        step,
        payload_bytes: interface_payload_bytes(len, kept, policy.quant_bits),
    })
}

/// Sparsify, quantize, add noise. Returns the reconstructed tensor and its
/// wire size in bytes.
pub fn compress(x: &ParamTensor, policy: &InterfacePolicy, rs: &mut RandomSource) -> Result<(ParamTensor, usize)> {
    let out = compress_values(x.data(), policy, rs)?;
    let t = ParamTensor::new(x.name(), x.dims().to_vec(), out.values)?;
    Ok((t, out.payload_bytes))
}

#[derive(Debug, Clone)]
pub struct SplitForward {
    device: DeviceCache,
    edge: EdgeCache,
    pub forward_bytes: usize,
}

impl SplitForward {
    pub fn logits(&self) -> &[f64] {
        self.edge.logits()
    }

    pub fn gen(&self) -> &[f64] {
        self.edge.gen()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterfaceTraffic {
    pub forward_bytes: usize,
    pub backward_bytes: usize,
}

pub fn split_forward(
    model: &ToyModel,
    adapters: &AdapterSet,
    batch: &Batch,
    plan: &SplitPlan,
    policy: &InterfacePolicy,
    rs: &mut RandomSource,
) -> Result<SplitForward> {
    plan.check(model.registry())?;
    let device = device_forward(model, adapters, batch)?;
    let zv = compress_values(device.z_v(), policy, rs)?;
    let zt = compress_values(device.z_t(), policy, rs)?;
    let edge = edge_forward(model, adapters, &zv.values, &zt.values, device.rows())?;
    Ok(SplitForward {
        device,
        edge,
        forward_bytes: zv.payload_bytes + zt.payload_bytes,
    })
}

/// Edge-side loss and gradients. Fills the edge adapters' gradients in a
/// fresh set and returns the cut gradients `(dL/dz_v, dL/dz_t)` as they
/// leave the edge, before compression.
pub fn edge_loss_and_grads(
    model: &ToyModel,
    adapters: &AdapterSet,
    cache: &SplitForward,
    batch: &Batch,
    weights: LossWeights,
) -> Result<(LossBreakdown, AdapterSet, Vec<f64>, Vec<f64>)> {
    weights.validate()?;
    if batch.len() != cache.device.rows() {
        return Err(Error::Shape(format!(
            "batch has {} rows but the cached forward has {}",
            batch.len(),
            cache.device.rows()
        )));
    }
    let dims = model.dims();
    let (loss, g_logits, g_gen) = head_losses(&dims, &cache.edge, batch, weights, true);
    let mut grads = adapters.zeros_like();
    let (dz_v, dz_t) = edge_backward(model, adapters, &cache.edge, &g_logits, &g_gen, &mut grads);
    Ok((loss, grads, dz_v, dz_t))
}

/// Device-side adapter gradients from cut gradients sent by the edge. The
/// cut gradients are compressed on the way down. Returns a full-layout set
/// whose edge entries are zero, plus the downlink bytes.
#[allow(clippy::too_many_arguments)]
pub fn split_backward(
    model: &ToyModel,
    adapters: &AdapterSet,
    cache: Option<&SplitForward>,
    dz_v: &[f64],
    dz_t: &[f64],
    plan: &SplitPlan,
    policy: &InterfacePolicy,
    rs: &mut RandomSource,
) -> Result<(AdapterSet, usize)> {
    let mut grads = adapters.zeros_like();
    let bytes = device_grads_into(model, adapters, cache, dz_v, dz_t, plan, policy, rs, &mut grads)?;
    Ok((grads, bytes))
}

#[allow(clippy::too_many_arguments)]
fn device_grads_into(
    model: &ToyModel,
    adapters: &AdapterSet,
    cache: Option<&SplitForward>,
    dz_v: &[f64],
    dz_t: &[f64],
    plan: &SplitPlan,
    policy: &InterfacePolicy,
    rs: &mut RandomSource,
    grads: &mut AdapterSet,
) -> Result<usize> {
    let cache = cache.ok_or_else(|| Error::InvalidArgument("split backward without a forward cache".into()))?;
    plan.check(model.registry())?;
    model.check_adapters(adapters)?;
    let expected = cache.device.rows() * model.dims().h;
    if dz_v.len() != expected || dz_t.len() != expected {
        return Err(Error::Shape(format!(
            "cut gradients hold {} and {} values, expected {expected}",
            dz_v.len(),
            dz_t.len()
        )));
    }
    let gv = compress_values(dz_v, policy, rs)?;
    let gt = compress_values(dz_t, policy, rs)?;
    device_backward(model, adapters, &cache.device, &gv.values, &gt.values, grads);
    Ok(gv.payload_bytes + gt.payload_bytes)
}

/// Full split training step: device forward, edge loss and backward, device
/// backward. Gradients cover every adapter.
pub fn split_loss_and_grads(
    model: &ToyModel,
    adapters: &AdapterSet,
    batch: &Batch,
    weights: LossWeights,
    plan: &SplitPlan,
    policy: &InterfacePolicy,
    rs: &mut RandomSource,
) -> Result<(LossBreakdown, AdapterSet, InterfaceTraffic)> {
    let fwd = split_forward(model, adapters, batch, plan, policy, rs)?;
    let (loss, mut grads, dz_v, dz_t) = edge_loss_and_grads(model, adapters, &fwd, batch, weights)?;
    let backward_bytes = device_grads_into(model, adapters, Some(&fwd), &dz_v, &dz_t, plan, policy, rs, &mut grads)?;
    grads.ensure_finite("split_loss_and_grads")?;
    let traffic = InterfaceTraffic {
        forward_bytes: fwd.forward_bytes,
        backward_bytes,
    };
    Ok((loss, grads, traffic))
}
