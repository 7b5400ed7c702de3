//! Low-rank adapters over frozen linear layers.
//!
//! An adapted layer computes `y = W0·x + (lora_alpha / r) · B·(A·x)` with
//! `A: r×d_in` and `B: d_out×r`. Only `A`, `B` and the shared alignment
//! token are trainable, and they are the only tensors that leave a client.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::{gemm, ParamTensor};

pub const ALIGNMENT_TOKEN: &str = "alignment_token";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Text,
    Fusion,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Vision, Modality::Text, Modality::Fusion];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub modality: Modality,
}

/// The frozen layers a model exposes for adaptation, plus the alignment
/// token width (0 means no token).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRegistry {
    layers: Vec<LayerDescriptor>,
    d_align: usize,
}

impl LayerRegistry {
    pub fn new(layers: Vec<LayerDescriptor>, d_align: usize) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for l in &layers {
            if l.d_in == 0 || l.d_out == 0 {
                return Err(Error::InvalidArgument(format!("layer {} has a zero dimension", l.name)));
            }
            if l.name.is_empty() || l.name == ALIGNMENT_TOKEN || l.name.contains('.') {
                return Err(Error::InvalidArgument(format!("invalid layer name {:?}", l.name)));
            }
            if !seen.insert(l.name.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate layer name {:?}", l.name)));
            }
        }
        Ok(Self { layers, d_align })
    }

    pub fn layers(&self) -> &[LayerDescriptor] {
        &self.layers
    }

    pub fn d_align(&self) -> usize {
        self.d_align
    }

    pub fn get(&self, name: &str) -> Option<&LayerDescriptor> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn frozen_params(&self) -> usize {
        self.layers.iter().map(|l| l.d_in * l.d_out).sum()
    }

    /// Trainable parameter count at rank `r`: Σ r·(d_in + d_out) + d_align.
    pub fn trainable_params(&self, r: usize) -> usize {
        self.layers.iter().map(|l| r * (l.d_in + l.d_out)).sum::<usize>() + self.d_align
    }
}

pub fn lora_a_name(layer: &str) -> String {
    format!("{layer}.lora_A")
}

pub fn lora_b_name(layer: &str) -> String {
    format!("{layer}.lora_B")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    layer_name: String,
    modality: Modality,
    a: ParamTensor,
    b: ParamTensor,
    rank: usize,
    lora_alpha: f64,
}

impl LoraAdapter {
    pub fn new(
        layer_name: impl Into<String>,
        modality: Modality,
        a: ParamTensor,
        b: ParamTensor,
        lora_alpha: f64,
    ) -> Result<Self> {
        let layer_name = layer_name.into();
        let (rank, d_in) = a.matrix_dims()?;
        let (d_out, rank_b) = b.matrix_dims()?;
        if rank != rank_b {
            return Err(Error::Shape(format!(
                "{layer_name}: A has rank {rank} but B has {rank_b} columns"
            )));
        }
        check_rank(&layer_name, rank, d_in, d_out)?;
        if !(lora_alpha > 0.0) || !lora_alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("lora_alpha must be > 0, got {lora_alpha}")));
        }
        let a = a.renamed(lora_a_name(&layer_name));
        let b = b.renamed(lora_b_name(&layer_name));
        Ok(Self {
            layer_name,
            modality,
            a,
            b,
            rank,
            lora_alpha,
        })
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn a(&self) -> &ParamTensor {
        &self.a
    }

    pub fn b(&self) -> &ParamTensor {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lora_alpha(&self) -> f64 {
        self.lora_alpha
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.dims()[0]
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub(crate) fn values_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.a.data_mut(), self.b.data_mut())
    }

    fn check_base(&self, w0: &ParamTensor) -> Result<()> {
        let (d_out, d_in) = w0.matrix_dims()?;
        if d_out != self.d_out() || d_in != self.d_in() {
            return Err(Error::Shape(format!(
                "frozen {} is {d_out}×{d_in} but adapter {} expects {}×{}",
                w0.name(),
                self.layer_name,
                self.d_out(),
                self.d_in()
            )));
        }
        Ok(())
    }
}

fn check_rank(layer: &str, r: usize, d_in: usize, d_out: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::InvalidArgument(format!("{layer}: rank must be >= 1")));
    }
    // A rank above both dimensions adds parameters without adding capacity
    // on either side of the product.
    if r > d_in.max(d_out) {
        return Err(Error::InvalidArgument(format!(
            "{layer}: rank {r} exceeds layer dims {d_out}×{d_in}"
        )));
    }
    Ok(())
}

/// Adapted forward for one input vector: `W0·x + scaling·B·(A·x)`.
pub fn apply_adapter(adapter: &LoraAdapter, w0: &ParamTensor, x: &ParamTensor) -> Result<ParamTensor> {
    adapter.check_base(w0)?;
    if x.dims() != [adapter.d_in()] {
        return Err(Error::Shape(format!(
            "input {} has dims {:?}, adapter {} expects [{}]",
            x.name(),
            x.dims(),
            adapter.layer_name,
            adapter.d_in()
        )));
    }
    let mut y = vec![0.0; adapter.d_out()];
    let _ = lora_forward_rows(adapter, w0.data(), x.data(), 1, &mut y);
    let t = ParamTensor::from_parts_unchecked(format!("{}.out", adapter.layer_name), vec![y.len()], y);
    t.ensure_finite("apply_adapter")?;
    Ok(t)
}

/// Folds the adapter into the frozen weight: `W0 + scaling·B·A`.
pub fn merge_adapter(adapter: &LoraAdapter, w0: &ParamTensor) -> Result<ParamTensor> {
    adapter.check_base(w0)?;
    let mut merged = w0.data().to_vec();
    gemm(
        adapter.scaling(),
        adapter.b.data(),
        false,
        adapter.a.data(),
        false,
        1.0,
        &mut merged,
        adapter.d_out(),
        adapter.rank,
        adapter.d_in(),
    );
    let t = ParamTensor::from_parts_unchecked(w0.name().to_string(), w0.dims().to_vec(), merged);
    t.ensure_finite("merge_adapter")?;
    Ok(t)
}

/// Gradients of a scalar loss through one adapted layer applied to a batch.
///
/// `x` is `n×d_in`, `grad_out` is `dL/dY` with shape `n×d_out`. Returns
/// `(dL/dA, dL/dB, dL/dX)`.
pub fn adapter_grads(
    adapter: &LoraAdapter,
    w0: &ParamTensor,
    x: &ParamTensor,
    grad_out: &ParamTensor,
) -> Result<(ParamTensor, ParamTensor, ParamTensor)> {
    adapter.check_base(w0)?;
    let (n, d_in) = x.matrix_dims()?;
    let (n2, d_out) = grad_out.matrix_dims()?;
    if d_in != adapter.d_in() || d_out != adapter.d_out() || n != n2 {
        return Err(Error::Shape(format!(
            "adapter_grads: x {:?}, grad_out {:?} for {}×{} layer",
            x.dims(),
            grad_out.dims(),
            adapter.d_out(),
            adapter.d_in()
        )));
    }
    let mut scratch = vec![0.0; n * d_out];
    let u = lora_forward_rows(adapter, w0.data(), x.data(), n, &mut scratch);
    let mut da = vec![0.0; adapter.a.len()];
    let mut db = vec![0.0; adapter.b.len()];
    let mut dx = vec![0.0; n * d_in];
    lora_backward_rows(adapter, w0.data(), x.data(), &u, grad_out.data(), n, &mut da, &mut db, Some(&mut dx));
    Ok((
        ParamTensor::new(adapter.a.name(), adapter.a.dims().to_vec(), da)?,
        ParamTensor::new(adapter.b.name(), adapter.b.dims().to_vec(), db)?,
        ParamTensor::new(format!("{}.grad_in", adapter.layer_name), vec![n, d_in], dx)?,
    ))
}

/// Batched adapted forward over `n` rows; writes `out = X·W0ᵀ + s·(X·Aᵀ)·Bᵀ`
/// and returns the cached `U = X·Aᵀ` (n×r).
pub(crate) fn lora_forward_rows(
    adapter: &LoraAdapter,
    w0: &[f64],
    x: &[f64],
    n: usize,
    out: &mut [f64],
) -> Vec<f64> {
    let (d_in, d_out, r) = (adapter.d_in(), adapter.d_out(), adapter.rank);
    gemm(1.0, x, false, w0, true, 0.0, out, n, d_in, d_out);
    let mut u = vec![0.0; n * r];
    gemm(1.0, x, false, adapter.a.data(), true, 0.0, &mut u, n, d_in, r);
    gemm(adapter.scaling(), &u, false, adapter.b.data(), true, 1.0, out, n, r, d_out);
    u
}

/// Backward companion of [`lora_forward_rows`].
///
/// With `G = dL/dY`: `dB += s·Gᵀ·U`, `dA += s·(G·B)ᵀ·X`, and optionally
/// `dX = G·W0 + s·(G·B)·A`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lora_backward_rows(
    adapter: &LoraAdapter,
    w0: &[f64],
    x: &[f64],
    u: &[f64],
    g: &[f64],
    n: usize,
    da: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let (d_in, d_out, r) = (adapter.d_in(), adapter.d_out(), adapter.rank);
    let s = adapter.scaling();
    gemm(s, g, true, u, false, 1.0, db, d_out, n, r);
    let mut gb = vec![0.0; n * r];
    gemm(1.0, g, false, adapter.b.data(), false, 0.0, &mut gb, n, d_out, r);
    gemm(s, &gb, true, x, false, 1.0, da, r, n, d_in);
    if let Some(dx) = dx {
        gemm(1.0, g, false, w0, false, 0.0, dx, n, d_out, d_in);
        gemm(s, &gb, false, adapter.a.data(), false, 1.0, dx, n, r, d_in);
    }
}

/// The trainable state of a model: one adapter per frozen layer plus the
/// shared alignment token. Also used to carry gradients and optimizer
/// moments, which share the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    adapters: BTreeMap<String, LoraAdapter>,
    alignment_token: Option<ParamTensor>,
}

impl AdapterSet {
    pub fn new(adapters: Vec<LoraAdapter>, alignment_token: Option<ParamTensor>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for a in adapters {
            let name = a.layer_name.clone();
            if map.insert(name.clone(), a).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate adapter {name:?}")));
            }
        }
        let alignment_token = match alignment_token {
            Some(t) => {
                if t.dims().len() != 1 {
                    return Err(Error::Shape(format!("alignment token must be 1-D, got {:?}", t.dims())));
                }
                Some(t.renamed(ALIGNMENT_TOKEN))
            }
            None => None,
        };
        Ok(Self {
            adapters: map,
            alignment_token,
        })
    }

    pub fn get(&self, layer: &str) -> Option<&LoraAdapter> {
        self.adapters.get(layer)
    }

    pub(crate) fn get_mut(&mut self, layer: &str) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(layer)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    /// Adapters of one modality group.
    pub fn group(&self, modality: Modality) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values().filter(move |a| a.modality == modality)
    }

    pub fn alignment_token(&self) -> Option<&ParamTensor> {
        self.alignment_token.as_ref()
    }

    pub(crate) fn alignment_token_mut(&mut self) -> Option<&mut ParamTensor> {
        self.alignment_token.as_mut()
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.adapters.values().map(LoraAdapter::num_params).sum::<usize>()
            + self.alignment_token.as_ref().map_or(0, ParamTensor::len)
    }

    /// Every transmitted tensor, ordered lexicographically by name.
    pub fn flatten_updates(&self) -> Vec<&ParamTensor> {
        let mut out: Vec<&ParamTensor> = self
            .adapters
            .values()
            .flat_map(|a| [&a.a, &a.b])
            .chain(self.alignment_token.iter())
            .collect();
        out.sort_by(|x, y| x.name().cmp(y.name()));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = self
            .adapters
            .values_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .chain(self.alignment_token.iter_mut())
            .collect();
        out.sort_by(|x, y| x.name().cmp(y.name()));
        out
    }

    /// Same layer names, dims, ranks, scaling and token width.
    pub fn is_congruent(&self, other: &AdapterSet) -> bool {
        self.adapters.len() == other.adapters.len()
            && self.adapters.iter().zip(&other.adapters).all(|((na, a), (nb, b))| {
                na == nb
                    && a.a.dims() == b.a.dims()
                    && a.b.dims() == b.b.dims()
                    && a.lora_alpha == b.lora_alpha
                    && a.modality == b.modality
            })
            && match (&self.alignment_token, &other.alignment_token) {
                (Some(x), Some(y)) => x.dims() == y.dims(),
                (None, None) => true,
                _ => false,
            }
    }

    pub fn check_congruent(&self, other: &AdapterSet, context: &str) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{context}: adapter sets are not structurally congruent")))
        }
    }

    /// Congruent copy with every value zeroed.
    pub fn zeros_like(&self) -> AdapterSet {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    /// Whether this set's layers match a registry exactly.
    pub fn matches_registry(&self, registry: &LayerRegistry) -> bool {
        self.adapters.len() == registry.layers().len()
            && registry.layers().iter().all(|l| {
                self.adapters
                    .get(&l.name)
                    .is_some_and(|a| a.d_in() == l.d_in && a.d_out() == l.d_out && a.modality == l.modality)
            })
            && self.alignment_token.as_ref().map_or(0, ParamTensor::len) == registry.d_align()
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &AdapterSet) -> Result<()> {
        self.check_congruent(other, "add_scaled")?;
        for (dst, src) in self.tensors_mut().into_iter().zip(other.flatten_updates()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += alpha * s;
            }
        }
        Ok(())
    }

    /// `alpha · self`, producing a new set.
    pub fn scaled(&self, alpha: f64) -> AdapterSet {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
        out
    }

    /// Euclidean distance over all trainable values.
    pub fn distance(&self, other: &AdapterSet) -> Result<f64> {
        self.check_congruent(other, "distance")?;
        let sq: f64 = self
            .flatten_updates()
            .into_iter()
            .zip(other.flatten_updates())
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
            .sum();
        Ok(sq.sqrt())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        self.flatten_updates().into_iter().try_for_each(|t| t.ensure_finite(op))
    }

    /// Rebuilds a set from named tensors (e.g. a decoded checkpoint),
    /// checking them against the registry.
    pub fn from_tensors(registry: &LayerRegistry, lora_alpha: f64, tensors: Vec<ParamTensor>) -> Result<Self> {
        let mut by_name: BTreeMap<String, ParamTensor> =
            tensors.into_iter().map(|t| (t.name().to_string(), t)).collect();
        let mut adapters = Vec::with_capacity(registry.layers().len());
        for l in registry.layers() {
            let a = by_name
                .remove(&lora_a_name(&l.name))
                .ok_or_else(|| Error::Shape(format!("missing tensor {}", lora_a_name(&l.name))))?;
            let b = by_name
                .remove(&lora_b_name(&l.name))
                .ok_or_else(|| Error::Shape(format!("missing tensor {}", lora_b_name(&l.name))))?;
            let adapter = LoraAdapter::new(l.name.clone(), l.modality, a, b, lora_alpha)?;
            if adapter.d_in() != l.d_in || adapter.d_out() != l.d_out {
                return Err(Error::Shape(format!("adapter {} does not fit its layer", l.name)));
            }
            adapters.push(adapter);
        }
        let token = if registry.d_align() > 0 {
            let t = by_name
                .remove(ALIGNMENT_TOKEN)
                .ok_or_else(|| Error::Shape("missing alignment token".into()))?;
            if t.dims() != [registry.d_align()] {
                return Err(Error::Shape(format!("alignment token dims {:?}", t.dims())));
            }
            Some(t)
        } else {
            None
        };
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Shape(format!("unexpected tensor {extra:?}")));
        }
        AdapterSet::new(adapters, token)
    }
}

/// Fresh adapters for every registered layer: `A ~ N(0, 1/r)`, `B = 0`,
/// token = 0, so the adapted model starts out equal to the frozen one.
pub fn init_adapter_set(
    registry: &LayerRegistry,
    r: usize,
    lora_alpha: f64,
    rs: &mut RandomSource,
) -> Result<AdapterSet> {
    for l in registry.layers() {
        check_rank(&l.name, r, l.d_in, l.d_out)?;
    }
    let sigma = (1.0 / r as f64).sqrt();
    let mut adapters = Vec::with_capacity(registry.layers().len());
    for l in registry.layers() {
        let a: Vec<f64> = (0..r * l.d_in).map(|_| sigma * rs.standard_normal()).collect();
        let a = ParamTensor::new(lora_a_name(&l.name), vec![r, l.d_in], a)?;
        let b = ParamTensor::zeros(lora_b_name(&l.name), vec![l.d_out, r]);
        adapters.push(LoraAdapter::new(l.name.clone(), l.modality, a, b, lora_alpha)?);
    }
    let token = (registry.d_align() > 0).then(|| ParamTensor::zeros(ALIGNMENT_TOKEN, vec![registry.d_align()]));
    AdapterSet::new(adapters, token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;

    fn t(name: &str, dims: Vec<usize>, data: Vec<f64>) -> ParamTensor {
        ParamTensor::new(name, dims, data).unwrap()
    }

    fn random(rs: &mut RandomSource, name: &str, dims: Vec<usize>) -> ParamTensor {
        let n = dims.iter().product();
        t(name, dims, (0..n).map(|_| rs.standard_normal()).collect())
    }

    fn single_layer_registry(d_in: usize, d_out: usize) -> LayerRegistry {
        LayerRegistry::new(
            vec![LayerDescriptor {
                name: "layer".into(),
                d_in,
                d_out,
                modality: Modality::Fusion,
            }],
            0,
        )
        .unwrap()
    }

    #[test]
    fn init_counts_and_zero_b() {
        let reg = single_layer_registry(64, 64);
        let set = init_adapter_set(&reg, 16, 32.0, &mut RandomSource::new(1, 1)).unwrap();
        let a = set.get("layer").unwrap();
        assert_eq!(a.a().dims(), &[16, 64]);
        assert_eq!(a.b().dims(), &[64, 16]);
        assert_eq!(a.num_params(), 2048);
        assert_eq!(a.scaling(), 2.0);
        assert!(a.b().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let reg = single_layer_registry(8, 6);
        let x = init_adapter_set(&reg, 4, 8.0, &mut RandomSource::new(3, 9)).unwrap();
        let y = init_adapter_set(&reg, 4, 8.0, &mut RandomSource::new(3, 9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn init_rejects_oversized_rank() {
        let reg = single_layer_registry(8, 8);
        assert!(init_adapter_set(&reg, 16, 32.0, &mut RandomSource::new(1, 1)).is_err());
        assert!(init_adapter_set(&reg, 0, 32.0, &mut RandomSource::new(1, 1)).is_err());
        // Rank above the smaller side only is accepted (head layers with few outputs).
        let head = single_layer_registry(64, 10);
        assert!(init_adapter_set(&head, 16, 32.0, &mut RandomSource::new(1, 1)).is_ok());
    }

    #[test]
    fn init_a_has_variance_one_over_r() {
        let reg = single_layer_registry(512, 512);
        let set = init_adapter_set(&reg, 16, 32.0, &mut RandomSource::new(4, 4)).unwrap();
        let a = set.get("layer").unwrap().a().data();
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        assert!((var - 1.0 / 16.0).abs() < 0.003, "{var}");
    }

    #[test]
    fn zero_b_is_frozen_forward() {
        let mut rs = RandomSource::new(2, 2);
        let reg = single_layer_registry(5, 7);
        let set = init_adapter_set(&reg, 3, 6.0, &mut rs).unwrap();
        let w0 = random(&mut rs, "w0", vec![7, 5]);
        let x = random(&mut rs, "x", vec![5]);
        let y = apply_adapter(set.get("layer").unwrap(), &w0, &x).unwrap();
        let frozen = matmul(&w0, &t("x", vec![5, 1], x.data().to_vec())).unwrap();
        assert_eq!(y.data(), frozen.data());
    }

    #[test]
    fn scalar_forward_arithmetic() {
        let ad = LoraAdapter::new(
            "l",
            Modality::Fusion,
            t("a", vec![1, 1], vec![1.0]),
            t("b", vec![1, 1], vec![1.0]),
            2.0,
        )
        .unwrap();
        let y = apply_adapter(&ad, &t("w", vec![1, 1], vec![1.0]), &t("x", vec![1], vec![1.0])).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn merge_forced_arithmetic() {
        let ad = LoraAdapter::new(
            "l",
            Modality::Fusion,
            t("a", vec![1, 2], vec![1.0, 0.0]),
            t("b", vec![2, 1], vec![1.0, 0.0]),
            2.0,
        )
        .unwrap();
        let merged = merge_adapter(&ad, &ParamTensor::zeros("w", vec![2, 2])).unwrap();
        assert_eq!(merged.data(), &[2.0, 0.0, 0.0, 0.0]);
        let zero_b = LoraAdapter::new(
            "l",
            Modality::Fusion,
            t("a", vec![1, 2], vec![1.0, 0.0]),
            ParamTensor::zeros("b", vec![2, 1]),
            2.0,
        )
        .unwrap();
        let w0 = t("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(merge_adapter(&zero_b, &w0).unwrap().data(), w0.data());
    }

    #[test]
    fn merge_path_matches_adapter_path() {
        let mut rs = RandomSource::new(77, 1);
        for case in 0..100 {
            let (d_in, d_out) = (8, 8);
            let r = 1 + case % 8;
            let ad = LoraAdapter::new(
                "l",
                Modality::Vision,
                random(&mut rs, "a", vec![r, d_in]),
                random(&mut rs, "b", vec![d_out, r]),
                1.0 + (case % 5) as f64,
            )
            .unwrap();
            let w0 = random(&mut rs, "w", vec![d_out, d_in]);
            let x = random(&mut rs, "x", vec![d_in]);
            let direct = apply_adapter(&ad, &w0, &x).unwrap();
            let merged = matmul(&merge_adapter(&ad, &w0).unwrap(), &t("x", vec![d_in, 1], x.data().to_vec())).unwrap();
            for (p, q) in direct.data().iter().zip(merged.data()) {
                assert!((p - q).abs() <= 1e-10 * p.abs().max(1.0), "case {case}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn doubling_b_doubles_delta() {
        let mut rs = RandomSource::new(5, 5);
        let a = random(&mut rs, "a", vec![2, 4]);
        let b = random(&mut rs, "b", vec![3, 2]);
        let w0 = random(&mut rs, "w", vec![3, 4]);
        let x = random(&mut rs, "x", vec![4]);
        let b2 = t("b", vec![3, 2], b.data().iter().map(|v| 2.0 * v).collect());
        let one = LoraAdapter::new("l", Modality::Text, a.clone(), b, 4.0).unwrap();
        let two = LoraAdapter::new("l", Modality::Text, a, b2, 4.0).unwrap();
        let zero = LoraAdapter::new("l", Modality::Text, one.a().clone(), ParamTensor::zeros("b", vec![3, 2]), 4.0)
            .unwrap();
        let y0 = apply_adapter(&zero, &w0, &x).unwrap();
        let y1 = apply_adapter(&one, &w0, &x).unwrap();
        let y2 = apply_adapter(&two, &w0, &x).unwrap();
        for i in 0..3 {
            let d1 = y1.data()[i] - y0.data()[i];
            let d2 = y2.data()[i] - y0.data()[i];
            assert!((d2 - 2.0 * d1).abs() <= 1e-12 * d2.abs().max(1.0));
        }
    }

    #[test]
    fn shape_errors() {
        let ad = LoraAdapter::new(
            "l",
            Modality::Fusion,
            ParamTensor::zeros("a", vec![1, 3]),
            ParamTensor::zeros("b", vec![2, 1]),
            1.0,
        )
        .unwrap();
        assert!(apply_adapter(&ad, &ParamTensor::zeros("w", vec![3, 2]), &ParamTensor::zeros("x", vec![3])).is_err());
        assert!(apply_adapter(&ad, &ParamTensor::zeros("w", vec![2, 3]), &ParamTensor::zeros("x", vec![2])).is_err());
        assert!(merge_adapter(&ad, &ParamTensor::zeros("w", vec![2, 2])).is_err());
        assert!(LoraAdapter::new(
            "l",
            Modality::Fusion,
            ParamTensor::zeros("a", vec![2, 3]),
            ParamTensor::zeros("b", vec![2, 1]),
            1.0
        )
        .is_err());
    }

    #[test]
    fn flatten_is_sorted_and_complete() {
        let reg = LayerRegistry::new(
            vec![
                LayerDescriptor { name: "zeta".into(), d_in: 4, d_out: 3, modality: Modality::Text },
                LayerDescriptor { name: "beta".into(), d_in: 2, d_out: 5, modality: Modality::Vision },
            ],
            6,
        )
        .unwrap();
        let set = init_adapter_set(&reg, 2, 4.0, &mut RandomSource::new(1, 1)).unwrap();
        let names: Vec<&str> = set.flatten_updates().iter().map(|t| t.name()).collect();
        assert_eq!(names, ["alignment_token", "beta.lora_A", "beta.lora_B", "zeta.lora_A", "zeta.lora_B"]);
        assert_eq!(set.num_params(), reg.trainable_params(2));
        let other = init_adapter_set(&reg, 2, 4.0, &mut RandomSource::new(2, 2)).unwrap();
        assert!(set.is_congruent(&other));
        let shapes = |s: &AdapterSet| -> Vec<(String, Vec<usize>)> {
            s.flatten_updates().iter().map(|t| (t.name().to_string(), t.dims().to_vec())).collect()
        };
        assert_eq!(shapes(&set), shapes(&other));
    }

    #[test]
    fn adapter_grads_scalar_case() {
        // y = W0 x + s·B·A·x with W0=1, A=1, B=0, s=2, x=1; L = (y - 3)²
        let ad = LoraAdapter::new(
            "l",
            Modality::Fusion,
            t("a", vec![1, 1], vec![1.0]),
            ParamTensor::zeros("b", vec![1, 1]),
            2.0,
        )
        .unwrap();
        let w0 = t("w", vec![1, 1], vec![1.0]);
        let x = t("x", vec![1, 1], vec![1.0]);
        let g = t("g", vec![1, 1], vec![2.0 * (1.0 - 3.0)]);
        let (da, db, dx) = adapter_grads(&ad, &w0, &x, &g).unwrap();
        assert_eq!(db.data(), &[-8.0]);
        assert_eq!(da.data(), &[0.0]);
        assert_eq!(dx.data(), &[-4.0]);
    }
}
