//! Synthetic multimodal data and Dirichlet label-skew partitioning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ModelDims};
use crate::rng::{sample_dirichlet, RandomSource, StreamRole};

/// Bounded noise half-width added to generation targets.
pub const GEN_NOISE: f64 = 0.05;
/// Dirichlet redraws attempted before falling back to sample transfer.
pub const MAX_PARTITION_REDRAWS: usize = 100;
const MAX_TEACHER_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub samples: usize,
    pub dims: ModelDims,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    dims: ModelDims,
    vision: Vec<f64>,
    text: Vec<f64>,
    labels: Vec<usize>,
    targets: Vec<f64>,
    class_histogram: Vec<usize>,
    teacher_seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.dims.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_histogram(&self) -> &[usize] {
        &self.class_histogram
    }

    pub fn teacher_seed(&self) -> u64 {
        self.teacher_seed
    }

    pub fn vision_row(&self, i: usize) -> &[f64] {
        &self.vision[i * self.dims.d_v..(i + 1) * self.dims.d_v]
    }

    pub fn text_row(&self, i: usize) -> &[f64] {
        &self.text[i * self.dims.d_t..(i + 1) * self.dims.d_t]
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        &self.targets[i * self.dims.d_g..(i + 1) * self.dims.d_g]
    }

    /// Samples `indices` gathered into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("sample {bad} out of range")));
        }
        let mut v = Vec::with_capacity(indices.len() * self.dims.d_v);
        let mut t = Vec::with_capacity(indices.len() * self.dims.d_t);
        let mut g = Vec::with_capacity(indices.len() * self.dims.d_g);
        for &i in indices {
            v.extend_from_slice(self.vision_row(i));
            t.extend_from_slice(self.text_row(i));
            g.extend_from_slice(self.target_row(i));
        }
        Batch::new(&self.dims, v, t, indices.iter().map(|&i| self.labels[i]).collect(), g)
    }
}

/// Inputs are standard normal; labels come from a hidden linear teacher over
/// `[v; t]` and generation targets from a fixed linear map plus bounded noise.
pub fn generate_dataset(config: &DataConfig, rs: &mut RandomSource) -> Result<SyntheticDataset> {
    let dims = config.dims;
    dims.validate()?;
    let n = config.samples;
    if n < 1 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    let d_in = dims.d_v + dims.d_t;
    let teacher_seed = rs.seed();
    let gen_scale = (1.0 / d_in as f64).sqrt();
    let gen_map: Vec<f64> = (0..dims.d_g * d_in).map(|_| gen_scale * rs.standard_normal()).collect();

    let vision: Vec<f64> = (0..n * dims.d_v).map(|_| rs.standard_normal()).collect();
    let text: Vec<f64> = (0..n * dims.d_t).map(|_| rs.standard_normal()).collect();
    let mut targets = Vec::with_capacity(n * dims.d_g);
    let mut joint = vec![0.0; d_in];
    for i in 0..n {
        joint[..dims.d_v].copy_from_slice(&vision[i * dims.d_v..(i + 1) * dims.d_v]);
        joint[dims.d_v..].copy_from_slice(&text[i * dims.d_t..(i + 1) * dims.d_t]);
        for o in 0..dims.d_g {
            let row = &gen_map[o * d_in..(o + 1) * d_in];
            let clean: f64 = row.iter().zip(&joint).map(|(w, x)| w * x).sum();
            targets.push(clean + rs.uniform_range(-GEN_NOISE, GEN_NOISE));
        }
    }

    let mut teacher_rs = RandomSource::for_role(teacher_seed, StreamRole::Teacher, &[rs.stream_id()]);
    let mut labels = vec![0usize; n];
    let mut histogram = vec![0usize; dims.classes];
    for _attempt in 0..MAX_TEACHER_REDRAWS {
        let teacher: Vec<f64> = (0..dims.classes * d_in).map(|_| teacher_rs.standard_normal()).collect();
        histogram.iter_mut().for_each(|h| *h = 0);
        for i in 0..n {
            joint[..dims.d_v].copy_from_slice(&vision[i * dims.d_v..(i + 1) * dims.d_v]);
            joint[dims.d_v..].copy_from_slice(&text[i * dims.d_t..(i + 1) * dims.d_t]);
            labels[i] = teacher_label(&teacher, &joint, dims.classes);
            histogram[labels[i]] += 1;
        }
        // Every class populated, or impossible with this few samples.
        if histogram.iter().all(|&h| h > 0) || n < dims.classes {
            break;
        }
    }
    Ok(SyntheticDataset {
        dims,
        vision,
        text,
        labels,
        targets,
        class_histogram: histogram,
        teacher_seed,
    })
}

fn teacher_label(teacher: &[f64], x: &[f64], classes: usize) -> usize {
    let d = x.len();
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..classes {
        let s: f64 = teacher[c * d..(c + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum();
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub dirichlet_alpha: f64,
    pub clients: usize,
    pub classes: usize,
    /// `proportions[k][c]`: share of class `c` assigned to client `k`.
    pub proportions: Vec<Vec<f64>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    /// Per-class counts over train and validation together.
    pub class_histogram: Vec<usize>,
}

impl ClientShard {
    pub fn n_k(&self) -> usize {
        self.train.len()
    }

    pub fn size(&self) -> usize {
        self.train.len() + self.validation.len()
    }
}

pub fn partition(
    dataset: &SyntheticDataset,
    clients: usize,
    dirichlet_alpha: f64,
    seed: u64,
) -> Result<(PartitionSpec, Vec<ClientShard>)> {
    partition_labels(dataset.labels(), dataset.classes(), clients, dirichlet_alpha, seed)
}

/// Per-class Dirichlet split of sample indices across `clients`.
///
/// Each class draws `p[·][c] ~ Dir(alpha)` and its (shuffled) indices are cut
/// by largest-remainder rounding. Draws repeat up to
/// [`MAX_PARTITION_REDRAWS`] times while some client is empty; after that,
/// empty clients receive one sample from the largest shard. Each shard then
/// holds out `⌊size/10⌋` samples for validation.
pub fn partition_labels(
    labels: &[usize],
    classes: usize,
    clients: usize,
    dirichlet_alpha: f64,
    seed: u64,
) -> Result<(PartitionSpec, Vec<ClientShard>)> {
    let n = labels.len();
    if clients == 0 {
        return Err(Error::InvalidArgument("partition needs at least one client".into()));
    }
    if clients > n {
        return Err(Error::InvalidArgument(format!("{clients} clients but only {n} samples")));
    }
    if !(dirichlet_alpha > 0.0) || !dirichlet_alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("dirichlet alpha must be > 0, got {dirichlet_alpha}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }

    let mut rs = RandomSource::for_role(seed, StreamRole::Partition, &[clients as u64]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for members in &mut by_class {
        rs.shuffle(members);
    }

    let mut proportions = vec![vec![0.0; classes]; clients];
    let mut counts = vec![vec![0usize; classes]; clients];
    for _attempt in 0..MAX_PARTITION_REDRAWS {
        for (c, members) in by_class.iter().enumerate() {
            let p = sample_dirichlet(&mut rs, dirichlet_alpha, clients)?;
            let split = largest_remainder(&p, members.len());
            for k in 0..clients {
                proportions[k][c] = p[k];
                counts[k][c] = split[k];
            }
        }
        if counts.iter().all(|row| row.iter().sum::<usize>() > 0) {
            break;
        }
    }

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (c, members) in by_class.iter().enumerate() {
        let mut cursor = 0;
        for k in 0..clients {
            let take = counts[k][c];
            assigned[k].extend_from_slice(&members[cursor..cursor + take]);
            cursor += take;
        }
    }
    // Empty-client repair: move one sample from the largest shard.
    while let Some(empty) = assigned.iter().position(Vec::is_empty) {
        let donor = (0..clients)
            .max_by(|&a, &b| assigned[a].len().cmp(&assigned[b].len()).then(b.cmp(&a)))
            .expect("clients >= 1");
        let moved = assigned[donor].pop().expect("donor has at least two samples");
        assigned[empty].push(moved);
    }

    let shards = assigned
        .into_iter()
        .enumerate()
        .map(|(k, mut members)| {
            members.sort_unstable();
            let mut order = members.clone();
            RandomSource::for_role(seed, StreamRole::Validation, &[clients as u64, k as u64]).shuffle(&mut order);
            let n_val = members.len() / 10;
            let mut validation = order[..n_val].to_vec();
            let mut train = order[n_val..].to_vec();
            validation.sort_unstable();
            train.sort_unstable();
            let mut class_histogram = vec![0usize; classes];
            for &i in &members {
                class_histogram[labels[i]] += 1;
            }
            ClientShard {
                client_id: k,
                train,
                validation,
                class_histogram,
            }
        })
        .collect();

    let spec = PartitionSpec {
        dirichlet_alpha,
        clients,
        classes,
        proportions,
        seed,
    };
    Ok((spec, shards))
}

/// Integer split of `total` by fractions `p`; leftovers go to the largest
/// fractional parts, ties to the lower index.
pub fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = p.iter().map(|&v| v * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    let frac = |i: usize| quotas[i] - quotas[i].floor();
    if assigned <= total {
        order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
        for &i in order.iter().cycle().take(total - assigned) {
            counts[i] += 1;
        }
    } else {
        // Only reachable when Σp exceeds 1 by rounding; trim smallest fractions.
        order.sort_by(|&a, &b| frac(a).total_cmp(&frac(b)).then(b.cmp(&a)));
        let mut excess = assigned - total;
        for &i in order.iter().cycle() {
            if excess == 0 {
                break;
            }
            if counts[i] > 0 {
                counts[i] -= 1;
                excess -= 1;
            }
        }
    }
    counts
}

/// Mean over classes of `(max_k p[k][c] − 1/K) / (1 − 1/K)`: 0 for a uniform
/// split, 1 when every class sits on a single client.
pub fn heterogeneity_index(spec: &PartitionSpec) -> f64 {
    let k = spec.clients;
    if k <= 1 || spec.classes == 0 {
        return 0.0;
    }
    let floor = 1.0 / k as f64;
    let total: f64 = (0..spec.classes)
        .map(|c| {
            let max = spec.proportions.iter().map(|row| row[c]).fold(0.0, f64::max);
            (max - floor) / (1.0 - floor)
        })
        .sum();
    total / spec.classes as f64
}

/// Client-specific affine perturbation of vision inputs:
/// `v' = v + strength·(M·v + b)` with `M ~ N(0, 1/d_v)` and `b ~ N(0, 1)`
/// drawn from a stream keyed by `client_id`. Text inputs are left alone by
/// construction; `strength = 0` returns the input unchanged.
pub fn modality_shift(vision: &[f64], d_v: usize, client_id: usize, strength: f64, seed: u64) -> Result<Vec<f64>> {
    if !(strength >= 0.0) || !strength.is_finite() {
        return Err(Error::InvalidArgument(format!("shift strength must be >= 0, got {strength}")));
    }
    if d_v == 0 || !vision.len().is_multiple_of(d_v) {
        return Err(Error::Shape(format!("{} vision values do not split into rows of {d_v}", vision.len())));
    }
    if strength == 0.0 {
        return Ok(vision.to_vec());
    }
    let mut rs = RandomSource::for_role(seed, StreamRole::ModalityShift, &[client_id as u64]);
    let scale = (1.0 / d_v as f64).sqrt();
    let m: Vec<f64> = (0..d_v * d_v).map(|_| scale * rs.standard_normal()).collect();
    let b: Vec<f64> = (0..d_v).map(|_| rs.standard_normal()).collect();
    let mut out = vision.to_vec();
    for (row_in, row_out) in vision.chunks_exact(d_v).zip(out.chunks_exact_mut(d_v)) {
        for o in 0..d_v {
            let mv: f64 = m[o * d_v..(o + 1) * d_v].iter().zip(row_in).map(|(a, x)| a * x).sum();
            row_out[o] += strength * (mv + b[o]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(samples: usize) -> DataConfig {
        DataConfig {
            samples,
            dims: ModelDims::default(),
        }
    }

    fn balanced_labels(n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|i| i % classes).collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&config(500), &mut RandomSource::new(4, 1)).unwrap();
        let b = generate_dataset(&config(500), &mut RandomSource::new(4, 1)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&config(500), &mut RandomSource::new(5, 1)).unwrap();
        assert_ne!(a.labels(), c.labels());
    }

    #[test]
    fn every_class_is_populated() {
        let d = generate_dataset(&config(10_000), &mut RandomSource::new(11, 0)).unwrap();
        assert_eq!(d.class_histogram().len(), 10);
        assert!(d.class_histogram().iter().all(|&h| h > 0), "{:?}", d.class_histogram());
        assert_eq!(d.class_histogram().iter().sum::<usize>(), 10_000);
    }

    #[test]
    fn generation_rejects_bad_config() {
        let mut cfg = config(0);
        assert!(generate_dataset(&cfg, &mut RandomSource::new(1, 1)).is_err());
        cfg.samples = 10;
        cfg.dims.classes = 1;
        assert!(generate_dataset(&cfg, &mut RandomSource::new(1, 1)).is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced_labels(120, 4);
        let (spec, shards) = partition_labels(&labels, 4, 1, 0.3, 9).unwrap();
        assert_eq!(shards.len(), 1);
        let mut all: Vec<usize> = shards[0].train.iter().chain(&shards[0].validation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..120).collect::<Vec<_>>());
        assert_eq!(heterogeneity_index(&spec), 0.0);
    }

    #[test]
    fn validation_is_a_tenth_and_disjoint() {
        let labels = balanced_labels(1000, 10);
        let (_, shards) = partition_labels(&labels, 10, 4, 1.0, 3).unwrap();
        for s in &shards {
            assert_eq!(s.validation.len(), s.size() / 10);
            if s.size() >= 10 {
                assert!(!s.validation.is_empty());
            }
            assert!(s.train.iter().all(|i| s.validation.binary_search(i).is_err()));
        }
    }

    #[test]
    fn huge_alpha_splits_evenly() {
        let labels = balanced_labels(40_000, 10);
        let (spec, shards) = partition_labels(&labels, 10, 4, 1e6, 21).unwrap();
        for s in &shards {
            let size = s.size() as f64;
            assert!((size - 10_000.0).abs() <= 200.0, "{size}");
        }
        assert!(heterogeneity_index(&spec) < 0.05);
    }

    #[test]
    fn small_alpha_is_skewed() {
        let labels = balanced_labels(40_000, 10);
        let (spec, _) = partition_labels(&labels, 10, 8, 0.1, 22).unwrap();
        let mean_max = (0..10)
            .map(|c| spec.proportions.iter().map(|r| r[c]).fold(0.0, f64::max))
            .sum::<f64>()
            / 10.0;
        assert!(mean_max > 0.5, "{mean_max}");
    }

    #[test]
    fn proportions_are_column_stochastic() {
        let labels = balanced_labels(500, 5);
        let (spec, _) = partition_labels(&labels, 5, 7, 0.2, 1).unwrap();
        for c in 0..5 {
            let s: f64 = spec.proportions.iter().map(|r| r[c]).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert!(spec.proportions.iter().flatten().all(|&p| p >= 0.0));
    }

    #[test]
    fn no_client_is_empty_even_under_extreme_skew() {
        let labels = balanced_labels(40, 2);
        for seed in 0..50 {
            let (_, shards) = partition_labels(&labels, 2, 16, 0.05, seed).unwrap();
            assert!(shards.iter().all(|s| s.size() >= 1 && s.n_k() >= 1));
        }
    }

    #[test]
    fn partition_errors() {
        let labels = balanced_labels(5, 2);
        assert!(partition_labels(&labels, 2, 6, 1.0, 0).is_err());
        assert!(partition_labels(&labels, 2, 0, 1.0, 0).is_err());
        assert!(partition_labels(&labels, 2, 2, 0.0, 0).is_err());
    }

    #[test]
    fn heterogeneity_extremes() {
        let uniform = PartitionSpec {
            dirichlet_alpha: 1.0,
            clients: 4,
            classes: 3,
            proportions: vec![vec![0.25; 3]; 4],
            seed: 0,
        };
        assert!(heterogeneity_index(&uniform).abs() < 1e-15);
        let mut one_hot = uniform.clone();
        one_hot.proportions = (0..4).map(|k| (0..3).map(|c| if c == k { 1.0 } else { 0.0 }).collect()).collect();
        one_hot.proportions[3] = vec![0.0; 3];
        assert!((heterogeneity_index(&one_hot) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn largest_remainder_breaks_ties_low() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.1, 0.6, 0.3], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn shift_properties() {
        let mut rs = RandomSource::new(1, 1);
        let v: Vec<f64> = (0..40).map(|_| rs.standard_normal()).collect();
        let same = modality_shift(&v, 8, 3, 0.0, 7).unwrap();
        assert_eq!(
            same.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let a = modality_shift(&v, 8, 3, 0.5, 7).unwrap();
        let b = modality_shift(&v, 8, 3, 0.5, 7).unwrap();
        assert_eq!(a, b);
        let c = modality_shift(&v, 8, 4, 0.5, 7).unwrap();
        assert_ne!(a, c);
        assert!(modality_shift(&v, 8, 4, -0.1, 7).is_err());
    }
}
