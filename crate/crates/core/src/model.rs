//! A small frozen "unified multimodal" network.
//!
//! ```text
//! z_v    = tanh(adapted W_v · v)
//! z_t    = tanh(adapted W_t · t)
//! f      = tanh(adapted W_f · ([z_v; z_t] + token))
//! logits = adapted W_u · f          (understanding head, cross-entropy)
//! gen    = adapted W_g · f          (generation head, squared error)
//! ```
//!
//! The forward pass is split into a device half (the two encoders) and an
//! edge half (fusion and heads) so the split-execution mode can sit a
//! lossy interface between them.

use serde::{Deserialize, Serialize};

use crate::adapter::{
    lora_backward_rows, lora_forward_rows, AdapterSet, LayerDescriptor, LayerRegistry, LoraAdapter, Modality,
};
use crate::error::{Error, Result};
use crate::rng::{RandomSource, StreamRole};
use crate::tensor::ParamTensor;

pub const VISION_ENC: &str = "vision_enc";
pub const TEXT_ENC: &str = "text_enc";
pub const FUSION: &str = "fusion";
pub const UND_HEAD: &str = "und_head";
pub const GEN_HEAD: &str = "gen_head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_v: usize,
    pub d_t: usize,
    pub h: usize,
    pub classes: usize,
    pub d_g: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_v: 32,
            d_t: 32,
            h: 64,
            classes: 10,
            d_g: 16,
        }
    }
}

impl ModelDims {
    pub fn d_align(&self) -> usize {
        2 * self.h
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_t == 0 || self.h == 0 || self.d_g == 0 {
            return Err(Error::InvalidArgument(format!("model dims must be positive: {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("model needs at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn registry(&self) -> LayerRegistry {
        let layer = |name: &str, d_in, d_out, modality| LayerDescriptor {
            name: name.to_string(),
            d_in,
            d_out,
            modality,
        };
        LayerRegistry::new(
            vec![
                layer(VISION_ENC, self.d_v, self.h, Modality::Vision),
                layer(TEXT_ENC, self.d_t, self.h, Modality::Text),
                layer(FUSION, 2 * self.h, self.h, Modality::Fusion),
                layer(UND_HEAD, self.h, self.classes, Modality::Fusion),
                layer(GEN_HEAD, self.h, self.d_g, Modality::Fusion),
            ],
            self.d_align(),
        )
        .expect("toy registry is well formed")
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    dims: ModelDims,
    registry: LayerRegistry,
    w_v: ParamTensor,
    w_t: ParamTensor,
    w_f: ParamTensor,
    w_u: ParamTensor,
    w_g: ParamTensor,
}

impl ToyModel {
    /// Frozen weights drawn as `N(0, 1/d_in)` from the model stream of `seed`.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rs = RandomSource::for_role(seed, StreamRole::FrozenWeights, &[]);
        let mut weight = |name: &str, d_out: usize, d_in: usize| {
            let sigma = (1.0 / d_in as f64).sqrt();
            let data = (0..d_out * d_in).map(|_| sigma * rs.standard_normal()).collect();
            ParamTensor::new(format!("{name}.weight"), vec![d_out, d_in], data)
        };
        Ok(Self {
            w_v: weight(VISION_ENC, dims.h, dims.d_v)?,
            w_t: weight(TEXT_ENC, dims.h, dims.d_t)?,
            w_f: weight(FUSION, dims.h, 2 * dims.h)?,
            w_u: weight(UND_HEAD, dims.classes, dims.h)?,
            w_g: weight(GEN_HEAD, dims.d_g, dims.h)?,
            registry: dims.registry(),
            dims,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    pub fn frozen_weights(&self) -> [&ParamTensor; 5] {
        [&self.w_v, &self.w_t, &self.w_f, &self.w_u, &self.w_g]
    }

    pub fn frozen(&self, layer: &str) -> Option<&ParamTensor> {
        match layer {
            VISION_ENC => Some(&self.w_v),
            TEXT_ENC => Some(&self.w_t),
            FUSION => Some(&self.w_f),
            UND_HEAD => Some(&self.w_u),
            GEN_HEAD => Some(&self.w_g),
            _ => None,
        }
    }

    pub fn frozen_params(&self) -> usize {
        self.frozen_weights().iter().map(|t| t.len()).sum()
    }

    /// Order-sensitive FNV-1a hash over the bit patterns of every frozen weight.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.frozen_weights() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub(crate) fn check_adapters(&self, adapters: &AdapterSet) -> Result<()> {
        if adapters.matches_registry(&self.registry) {
            Ok(())
        } else {
            Err(Error::Shape("adapter set does not match the model registry".into()))
        }
    }
}

/// A mini-batch of `n` samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    n: usize,
    vision: Vec<f64>,
    text: Vec<f64>,
    labels: Vec<usize>,
    targets: Vec<f64>,
}

impl Batch {
    pub fn new(dims: &ModelDims, vision: Vec<f64>, text: Vec<f64>, labels: Vec<usize>, targets: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::InvalidArgument("degenerate batch: n = 0".into()));
        }
        if vision.len() != n * dims.d_v || text.len() != n * dims.d_t || targets.len() != n * dims.d_g {
            return Err(Error::Shape(format!(
                "batch arrays disagree on n={n}: vision {}, text {}, targets {}",
                vision.len(),
                text.len(),
                targets.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= dims.classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {} classes", dims.classes)));
        }
        if vision.iter().chain(&text).chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch inputs".into()));
        }
        Ok(Self {
            n,
            vision,
            text,
            labels,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn vision(&self) -> &[f64] {
        &self.vision
    }

    pub fn text(&self) -> &[f64] {
        &self.text
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Rows `idx` of this batch, in that order.
    pub fn select(&self, dims: &ModelDims, idx: &[usize]) -> Result<Batch> {
        let gather = |src: &[f64], w: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
            out
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range for batch of {}", self.n)));
        }
        Batch::new(
            dims,
            gather(&self.vision, dims.d_v),
            gather(&self.text, dims.d_t),
            idx.iter().map(|&i| self.labels[i]).collect(),
            gather(&self.targets, dims.d_g),
        )
    }

    /// Concatenates batches row-wise.
    pub fn concat(dims: &ModelDims, parts: &[&Batch]) -> Result<Batch> {
        let mut v = Vec::new();
        let mut t = Vec::new();
        let mut l = Vec::new();
        let mut g = Vec::new();
        for p in parts {
            v.extend_from_slice(&p.vision);
            t.extend_from_slice(&p.text);
            l.extend_from_slice(&p.labels);
            g.extend_from_slice(&p.targets);
        }
        Batch::new(dims, v, t, l, g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub understanding: f64,
    pub generation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            understanding: 1.0,
            generation: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.understanding) || !ok(self.generation) || (self.understanding == 0.0 && self.generation == 0.0) {
            return Err(Error::InvalidArgument(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean cross-entropy in nats.
    pub loss_u: f64,
    /// Mean squared error over all generation outputs.
    pub loss_g: f64,
    pub total: f64,
    pub accuracy: f64,
}

/// Encoder-side activations.
#[derive(Debug, Clone)]
pub struct DeviceCache {
    pub(crate) n: usize,
    pub(crate) vision: Vec<f64>,
    pub(crate) text: Vec<f64>,
    pub(crate) u_v: Vec<f64>,
    pub(crate) u_t: Vec<f64>,
    pub(crate) z_v: Vec<f64>,
    pub(crate) z_t: Vec<f64>,
}

impl DeviceCache {
    pub fn z_v(&self) -> &[f64] {
        &self.z_v
    }

    pub fn z_t(&self) -> &[f64] {
        &self.z_t
    }

    pub fn rows(&self) -> usize {
        self.n
    }
}

/// Fusion/head activations computed from (possibly transformed) encoder outputs.
#[derive(Debug, Clone)]
pub struct EdgeCache {
    pub(crate) n: usize,
    pub(crate) c: Vec<f64>,
    pub(crate) u_f: Vec<f64>,
    pub(crate) f: Vec<f64>,
    pub(crate) u_u: Vec<f64>,
    pub(crate) u_g: Vec<f64>,
    pub(crate) logits: Vec<f64>,
    pub(crate) gen: Vec<f64>,
}

impl EdgeCache {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn gen(&self) -> &[f64] {
        &self.gen
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub device: DeviceCache,
    pub edge: EdgeCache,
}

impl ForwardOutput {
    pub fn logits(&self) -> &[f64] {
        &self.edge.logits
    }

    pub fn gen(&self) -> &[f64] {
        &self.edge.gen
    }
}

fn adapter<'a>(adapters: &'a AdapterSet, name: &str) -> &'a LoraAdapter {
    adapters.get(name).expect("adapter set checked against registry")
}

fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

pub fn device_forward(model: &ToyModel, adapters: &AdapterSet, batch: &Batch) -> Result<DeviceCache> {
    model.check_adapters(adapters)?;
    let d = model.dims;
    let n = batch.n;
    let mut z_v = vec![0.0; n * d.h];
    let u_v = lora_forward_rows(adapter(adapters, VISION_ENC), model.w_v.data(), &batch.vision, n, &mut z_v);
    tanh_in_place(&mut z_v);
    let mut z_t = vec![0.0; n * d.h];
    let u_t = lora_forward_rows(adapter(adapters, TEXT_ENC), model.w_t.data(), &batch.text, n, &mut z_t);
    tanh_in_place(&mut z_t);
    Ok(DeviceCache {
        n,
        vision: batch.vision.clone(),
        text: batch.text.clone(),
        u_v,
        u_t,
        z_v,
        z_t,
    })
}

pub fn edge_forward(model: &ToyModel, adapters: &AdapterSet, z_v: &[f64], z_t: &[f64], n: usize) -> Result<EdgeCache> {
    model.check_adapters(adapters)?;
    let d = model.dims;
    if z_v.len() != n * d.h || z_t.len() != n * d.h {
        return Err(Error::Shape(format!(
            "edge inputs hold {} and {} values, expected {}",
            z_v.len(),
            z_t.len(),
            n * d.h
        )));
    }
    let token = adapters.alignment_token().expect("registry has a token").data();
    let h2 = 2 * d.h;
    let mut c = vec![0.0; n * h2];
    for i in 0..n {
        let row = &mut c[i * h2..(i + 1) * h2];
        row[..d.h].copy_from_slice(&z_v[i * d.h..(i + 1) * d.h]);
        row[d.h..].copy_from_slice(&z_t[i * d.h..(i + 1) * d.h]);
        row.iter_mut().zip(token).for_each(|(x, t)| *x += t);
    }
    let mut f = vec![0.0; n * d.h];
    let u_f = lora_forward_rows(adapter(adapters, FUSION), model.w_f.data(), &c, n, &mut f);
    tanh_in_place(&mut f);
    let mut logits = vec![0.0; n * d.classes];
    let u_u = lora_forward_rows(adapter(adapters, UND_HEAD), model.w_u.data(), &f, n, &mut logits);
    let mut gen = vec![0.0; n * d.d_g];
    let u_g = lora_forward_rows(adapter(adapters, GEN_HEAD), model.w_g.data(), &f, n, &mut gen);
    Ok(EdgeCache {
        n,
        c,
        u_f,
        f,
        u_u,
        u_g,
        logits,
        gen,
    })
}

/// Monolithic forward: device half feeding the edge half directly.
pub fn forward(model: &ToyModel, adapters: &AdapterSet, batch: &Batch) -> Result<ForwardOutput> {
    let device = device_forward(model, adapters, batch)?;
    let edge = edge_forward(model, adapters, &device.z_v, &device.z_t, device.n)?;
    Ok(ForwardOutput { device, edge })
}

/// Losses and the head-output gradients `(dL/dlogits, dL/dgen)`.
pub(crate) fn head_losses(
    dims: &ModelDims,
    edge: &EdgeCache,
    batch: &Batch,
    weights: LossWeights,
    want_grads: bool,
) -> (LossBreakdown, Vec<f64>, Vec<f64>) {
    let n = edge.n;
    let c = dims.classes;
    let mut ce = 0.0;
    let mut correct = 0usize;
    let mut g_logits = if want_grads { vec![0.0; n * c] } else { Vec::new() };
    for i in 0..n {
        let row = &edge.logits[i * c..(i + 1) * c];
        let label = batch.labels[i];
        let (mut best, mut best_v) = (0, row[0]);
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best = j;
                best_v = v;
            }
        }
        if best == label {
            correct += 1;
        }
        let sum_exp: f64 = row.iter().map(|&v| (v - best_v).exp()).sum();
        let log_z = best_v + sum_exp.ln();
        ce += log_z - row[label];
        if want_grads {
            let g = &mut g_logits[i * c..(i + 1) * c];
            for (j, gv) in g.iter_mut().enumerate() {
                let p = (row[j] - log_z).exp();
                *gv = weights.understanding * (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
            }
        }
    }
    let m = n * dims.d_g;
    let mut se = 0.0;
    let mut g_gen = if want_grads { vec![0.0; m] } else { Vec::new() };
    for (k, (y, t)) in edge.gen.iter().zip(&batch.targets).enumerate() {
        let diff = y - t;
        se += diff * diff;
        if want_grads {
            g_gen[k] = weights.generation * 2.0 * diff / m as f64;
        }
    }
    let loss_u = ce / n as f64;
    let loss_g = se / m as f64;
    let breakdown = LossBreakdown {
        loss_u,
        loss_g,
        total: weights.understanding * loss_u + weights.generation * loss_g,
        accuracy: correct as f64 / n as f64,
    };
    (breakdown, g_logits, g_gen)
}

/// Backward through the edge half. Fills the fusion/head/token gradients in
/// `grads` and returns `(dL/dz_v, dL/dz_t)`.
pub(crate) fn edge_backward(
    model: &ToyModel,
    adapters: &AdapterSet,
    edge: &EdgeCache,
    g_logits: &[f64],
    g_gen: &[f64],
    grads: &mut AdapterSet,
) -> (Vec<f64>, Vec<f64>) {
    let d = model.dims;
    let n = edge.n;
    let mut df = vec![0.0; n * d.h];
    let mut df_g = vec![0.0; n * d.h];
    {
        let ad = adapter(adapters, UND_HEAD);
        let g = grads.get_mut(UND_HEAD).expect("congruent grads");
        let (da, db) = g.values_mut();
        lora_backward_rows(ad, model.w_u.data(), &edge.f, &edge.u_u, g_logits, n, da, db, Some(&mut df));
    }
    {
        let ad = adapter(adapters, GEN_HEAD);
        let g = grads.get_mut(GEN_HEAD).expect("congruent grads");
        let (da, db) = g.values_mut();
        lora_backward_rows(ad, model.w_g.data(), &edge.f, &edge.u_g, g_gen, n, da, db, Some(&mut df_g));
    }
    // through f = tanh(pre_f)
    for ((g, g2), f) in df.iter_mut().zip(&df_g).zip(&edge.f) {
        *g = (*g + g2) * (1.0 - f * f);
    }
    let h2 = 2 * d.h;
    let mut dc = vec![0.0; n * h2];
    {
        let ad = adapter(adapters, FUSION);
        let g = grads.get_mut(FUSION).expect("congruent grads");
        let (da, db) = g.values_mut();
        lora_backward_rows(ad, model.w_f.data(), &edge.c, &edge.u_f, &df, n, da, db, Some(&mut dc));
    }
    let token_grad = grads.alignment_token_mut().expect("token present").data_mut();
    for i in 0..n {
        for (t, g) in token_grad.iter_mut().zip(&dc[i * h2..(i + 1) * h2]) {
            *t += g;
        }
    }
    let mut dz_v = vec![0.0; n * d.h];
    let mut dz_t = vec![0.0; n * d.h];
    for i in 0..n {
        dz_v[i * d.h..(i + 1) * d.h].copy_from_slice(&dc[i * h2..i * h2 + d.h]);
        dz_t[i * d.h..(i + 1) * d.h].copy_from_slice(&dc[i * h2 + d.h..(i + 1) * h2]);
    }
    (dz_v, dz_t)
}

/// Backward through the encoders given `dL/dz_v` and `dL/dz_t`.
pub(crate) fn device_backward(
    model: &ToyModel,
    adapters: &AdapterSet,
    device: &DeviceCache,
    dz_v: &[f64],
    dz_t: &[f64],
    grads: &mut AdapterSet,
) {
    let n = device.n;
    let through_tanh = |dz: &[f64], z: &[f64]| -> Vec<f64> { dz.iter().zip(z).map(|(g, z)| g * (1.0 - z * z)).collect() };
    let dpre_v = through_tanh(dz_v, &device.z_v);
    let dpre_t = through_tanh(dz_t, &device.z_t);
    {
        let ad = adapter(adapters, VISION_ENC);
        let g = grads.get_mut(VISION_ENC).expect("congruent grads");
        let (da, db) = g.values_mut();
        lora_backward_rows(ad, model.w_v.data(), &device.vision, &device.u_v, &dpre_v, n, da, db, None);
    }
    {
        let ad = adapter(adapters, TEXT_ENC);
        let g = grads.get_mut(TEXT_ENC).expect("congruent grads");
        let (da, db) = g.values_mut();
        lora_backward_rows(ad, model.w_t.data(), &device.text, &device.u_t, &dpre_t, n, da, db, None);
    }
}

pub fn evaluate(model: &ToyModel, adapters: &AdapterSet, batch: &Batch, weights: LossWeights) -> Result<LossBreakdown> {
    let out = forward(model, adapters, batch)?;
    Ok(head_losses(&model.dims, &out.edge, batch, weights, false).0)
}

/// Losses and gradients with respect to every adapter parameter.
pub fn loss_and_grads(
    model: &ToyModel,
    adapters: &AdapterSet,
    batch: &Batch,
    weights: LossWeights,
) -> Result<(LossBreakdown, AdapterSet)> {
    weights.validate()?;
    let out = forward(model, adapters, batch)?;
    let (loss, g_logits, g_gen) = head_losses(&model.dims, &out.edge, batch, weights, true);
    let mut grads = adapters.zeros_like();
    let (dz_v, dz_t) = edge_backward(model, adapters, &out.edge, &g_logits, &g_gen, &mut grads);
    device_backward(model, adapters, &out.device, &dz_v, &dz_t, &mut grads);
    grads.ensure_finite("loss_and_grads")?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::init_adapter_set;

    fn small_dims() -> ModelDims {
        ModelDims {
            d_v: 5,
            d_t: 4,
            h: 6,
            classes: 3,
            d_g: 2,
        }
    }

    fn random_batch(dims: &ModelDims, n: usize, rs: &mut RandomSource) -> Batch {
        let mut draw = |k: usize| (0..k).map(|_| rs.standard_normal()).collect::<Vec<_>>();
        let v = draw(n * dims.d_v);
        let t = draw(n * dims.d_t);
        let g = draw(n * dims.d_g);
        let labels = (0..n).map(|i| i % dims.classes).collect();
        Batch::new(dims, v, t, labels, g).unwrap()
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let dims = ModelDims::default();
        let model = ToyModel::new(dims, 1).unwrap();
        let adapters = init_adapter_set(model.registry(), 16, 32.0, &mut RandomSource::new(1, 2)).unwrap();
        let n = 3;
        let batch = Batch::new(
            &dims,
            vec![0.0; n * dims.d_v],
            vec![0.0; n * dims.d_t],
            vec![0; n],
            vec![0.0; n * dims.d_g],
        )
        .unwrap();
        let out = forward(&model, &adapters, &batch).unwrap();
        assert!(out.device.z_v.iter().chain(&out.device.z_t).all(|&v| v == 0.0));
        assert!(out.logits().iter().all(|&v| v == 0.0));
        assert!(out.gen().iter().all(|&v| v == 0.0));
        // uniform logits: cross-entropy is ln C
        let loss = evaluate(&model, &adapters, &batch, LossWeights { understanding: 1.0, generation: 0.0 }).unwrap();
        assert!((loss.loss_u - (dims.classes as f64).ln()).abs() < 1e-15);
        assert_eq!(loss.loss_g, 0.0);
    }

    #[test]
    fn batch_rows_are_independent() {
        let dims = small_dims();
        let model = ToyModel::new(dims, 4).unwrap();
        let mut rs = RandomSource::new(4, 4);
        let mut adapters = init_adapter_set(model.registry(), 2, 4.0, &mut rs).unwrap();
        for t in adapters.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rs.standard_normal());
        }
        let batch = random_batch(&dims, 2, &mut rs);
        let both = forward(&model, &adapters, &batch).unwrap();
        for row in 0..2 {
            let one = forward(&model, &adapters, &batch.select(&dims, &[row]).unwrap()).unwrap();
            let c = dims.classes;
            for j in 0..c {
                let a = both.logits()[row * c + j];
                let b = one.logits()[j];
                assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matching_targets_give_zero_generation_loss_and_grad() {
        let dims = small_dims();
        let model = ToyModel::new(dims, 2).unwrap();
        let mut rs = RandomSource::new(2, 2);
        let adapters = init_adapter_set(model.registry(), 2, 4.0, &mut rs).unwrap();
        let batch = random_batch(&dims, 3, &mut rs);
        let out = forward(&model, &adapters, &batch).unwrap();
        let exact = Batch::new(
            &dims,
            batch.vision.clone(),
            batch.text.clone(),
            batch.labels.clone(),
            out.gen().to_vec(),
        )
        .unwrap();
        let gen_only = LossWeights { understanding: 0.0, generation: 1.0 };
        let (loss, grads) = loss_and_grads(&model, &adapters, &exact, gen_only).unwrap();
        assert_eq!(loss.loss_g, 0.0);
        assert!(grads.flatten_updates().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let dims = small_dims();
        assert!(Batch::new(&dims, vec![], vec![], vec![], vec![]).is_err());
        assert!(Batch::new(&dims, vec![0.0; 5], vec![0.0; 4], vec![7], vec![0.0; 2]).is_err());
        assert!(Batch::new(&dims, vec![0.0; 4], vec![0.0; 4], vec![0], vec![0.0; 2]).is_err());
        let model = ToyModel::new(dims, 1).unwrap();
        let adapters = init_adapter_set(model.registry(), 2, 4.0, &mut RandomSource::new(1, 1)).unwrap();
        let batch = random_batch(&dims, 2, &mut RandomSource::new(1, 1));
        let zero = LossWeights { understanding: 0.0, generation: 0.0 };
        assert!(loss_and_grads(&model, &adapters, &batch, zero).is_err());
        let other = init_adapter_set(&ModelDims::default().registry(), 2, 4.0, &mut RandomSource::new(1, 1)).unwrap();
        assert!(forward(&model, &other, &batch).is_err());
    }

    #[test]
    fn shuffling_rows_keeps_losses() {
        let dims = small_dims();
        let model = ToyModel::new(dims, 8).unwrap();
        let mut rs = RandomSource::new(8, 8);
        let adapters = init_adapter_set(model.registry(), 2, 4.0, &mut rs).unwrap();
        let batch = random_batch(&dims, 9, &mut rs);
        let mut perm: Vec<usize> = (0..9).collect();
        rs.shuffle(&mut perm);
        let shuffled = batch.select(&dims, &perm).unwrap();
        let a = evaluate(&model, &adapters, &batch, LossWeights::default()).unwrap();
        let b = evaluate(&model, &adapters, &shuffled, LossWeights::default()).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        assert!((a.loss_u - b.loss_u).abs() < 1e-12);
        assert!((a.loss_g - b.loss_g).abs() < 1e-12);
        assert_eq!(a.accuracy, b.accuracy);
    }

    fn perturbed(adapters: &AdapterSet, rs: &mut RandomSource) -> AdapterSet {
        let mut out = adapters.clone();
        for t in out.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.3 * rs.standard_normal());
        }
        out
    }

    #[test]
    fn gradients_match_central_differences() {
        let dims = small_dims();
        let model = ToyModel::new(dims, 5).unwrap();
        let mut rs = RandomSource::new(5, 5);
        let adapters = perturbed(&init_adapter_set(model.registry(), 2, 3.0, &mut rs).unwrap(), &mut rs);
        let batch = random_batch(&dims, 4, &mut rs);
        let w = LossWeights { understanding: 1.0, generation: 0.7 };
        let (_, grads) = loss_and_grads(&model, &adapters, &batch, w).unwrap();
        let h = 1e-5;
        let n_tensors = adapters.flatten_updates().len();
        for ti in 0..n_tensors {
            let len = adapters.flatten_updates()[ti].len();
            for i in 0..len {
                let shifted = |delta: f64| {
                    let mut a = adapters.clone();
                    a.tensors_mut()[ti].data_mut()[i] += delta;
                    evaluate(&model, &a, &batch, w).unwrap().total
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let g = grads.flatten_updates()[ti].data()[i];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
                assert!(rel < 1e-6, "tensor {ti} coord {i}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn training_leaves_frozen_weights_untouched() {
        use crate::optim::{local_step, OptState, OptimizerConfig};
        let dims = small_dims();
        let model = ToyModel::new(dims, 6).unwrap();
        let before = model.frozen_checksum();
        let mut rs = RandomSource::new(6, 6);
        let mut adapters = init_adapter_set(model.registry(), 2, 4.0, &mut rs).unwrap();
        let batch = random_batch(&dims, 8, &mut rs);
        let mut st = OptState::default();
        for _ in 0..20 {
            let (_, g) = loss_and_grads(&model, &adapters, &batch, LossWeights::default()).unwrap();
            local_step(&mut adapters, &g, &mut st, &OptimizerConfig::adamw(1e-2, 0.05)).unwrap();
        }
        assert_eq!(model.frozen_checksum(), before);
    }

    #[test]
    fn sgd_reduces_loss_on_a_fixed_dataset() {
        use crate::optim::{local_step, OptState, OptimizerConfig};
        let dims = ModelDims::default();
        let model = ToyModel::new(dims, 7).unwrap();
        let mut rs = RandomSource::new(7, 7);
        let mut adapters = init_adapter_set(model.registry(), 16, 32.0, &mut rs).unwrap();
        let batch = random_batch(&dims, 64, &mut rs);
        let initial = evaluate(&model, &adapters, &batch, LossWeights::default()).unwrap().total;
        let mut st = OptState::default();
        let cfg = OptimizerConfig::sgd(0.05);
        for _ in 0..200 {
            let (_, g) = loss_and_grads(&model, &adapters, &batch, LossWeights::default()).unwrap();
            local_step(&mut adapters, &g, &mut st, &cfg).unwrap();
        }
        let last = evaluate(&model, &adapters, &batch, LossWeights::default()).unwrap().total;
        assert!(last.is_finite() && last < initial, "{initial} -> {last}");
    }
}
