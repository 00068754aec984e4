//! Synthetic federated dataset with controllable task and label skew.
//!
//! Each client sees the shared class prototypes through its own random
//! rotation (task shift) and draws labels from its own Dirichlet-skewed
//! class distribution (label skew). Everything is a pure function of the
//! spec's seed.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use std::io::Write;

/// What the label depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One prototype per class; labels are linearly recoverable from the
    /// inputs, so personalization pressure comes from input geometry only.
    Prototype,
    /// Inputs carry two independent concepts, one per half of the feature
    /// vector, and each client labels *pairs* of concepts with its own
    /// table. No single narrow representation can serve every client's
    /// table at once, so the placement of nonlinear capacity matters.
    Conjunction,
}

impl Default for TaskKind {
    fn default() -> Self {
        TaskKind::Prototype
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSpec {
    pub num_clients: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub samples_per_client: usize,
    /// Maximum per-client rotation of the class prototypes, in radians.
    pub theta_max: f64,
    /// Symmetric Dirichlet concentration of per-client label distributions.
    pub label_alpha: f64,
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub seed: u64,
    /// 1 = unimodal classes; 2 = antipodal cluster pairs per class, which
    /// makes the task non-linearly-separable.
    #[serde(default = "default_clusters")]
    pub clusters_per_class: usize,
    #[serde(default)]
    pub task: TaskKind,
}

fn default_clusters() -> usize {
    1
}

impl FederationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::Config("federation.num_clients must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("federation.train_fraction must be in (0, 1)".into()));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.theta_max) {
            return Err(Error::Config("federation.theta_max must be in [0, pi]".into()));
        }
        if self.label_alpha <= 0.0 {
            return Err(Error::Config("federation.label_alpha must be > 0".into()));
        }
        if self.samples_per_client < 4 {
            return Err(Error::Config("federation.samples_per_client must be >= 4".into()));
        }
        if !(1..=2).contains(&self.clusters_per_class) {
            return Err(Error::Config("federation.clusters_per_class must be 1 or 2".into()));
        }
        if self.task == TaskKind::Conjunction {
            if self.input_dim % 2 != 0 || self.input_dim < 4 {
                return Err(Error::Config(
                    "federation.input_dim must be even and >= 4 for the conjunction task".into(),
                ));
            }
            if self.clusters_per_class != 1 {
                return Err(Error::Config(
                    "federation.clusters_per_class must be 1 for the conjunction task".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Shard {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: Shard,
    pub test: Shard,
}

#[derive(Debug, Clone)]
pub struct Federation {
    pub clients: Vec<ClientData>,
    /// Rotated prototypes, per client then per class.
    pub prototypes: Vec<Vec<Vec<f64>>>,
}

/// Pooled test set across all clients, tagged with the client of origin.
#[derive(Debug, Clone, Default)]
pub struct PooledTest {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub origin: Vec<usize>,
}

fn unit_gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// Rotation as a set of disjoint Givens planes. The planes and per-plane
/// fractions come from the rng alone, so for a fixed seed the displacement
/// is a monotone function of `theta_max`.
struct PlaneRotation {
    planes: Vec<(usize, usize)>,
    fractions: Vec<f64>,
}

impl PlaneRotation {
    fn sample(rng: &mut ChaCha8Rng, dim: usize) -> PlaneRotation {
        let mut axes: Vec<usize> = (0..dim).collect();
        // Fisher-Yates
        for i in (1..dim).rev() {
            let j = rng.gen_range(0..=i);
            axes.swap(i, j);
        }
        let planes: Vec<(usize, usize)> =
            axes.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let fractions = planes.iter().map(|_| rng.gen_range(0.5..1.0)).collect();
        PlaneRotation { planes, fractions }
    }

    fn apply(&self, theta_max: f64, v: &mut [f64]) {
        for ((a, b), frac) in self.planes.iter().zip(&self.fractions) {
            let theta = frac * theta_max;
            let (s, c) = theta.sin_cos();
            let (va, vb) = (v[*a], v[*b]);
            v[*a] = c * va - s * vb;
            v[*b] = s * va + c * vb;
        }
    }
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).unwrap();
    let mut w: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(1e-12)) .collect();
    let sum: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= sum;
    }
    w
}

pub fn generate_federation(spec: &FederationSpec) -> Result<Federation> {
    spec.validate()?;
    match spec.task {
        TaskKind::Prototype => generate_prototype(spec),
        TaskKind::Conjunction => generate_conjunction(spec),
    }
}

fn generate_prototype(spec: &FederationSpec) -> Result<Federation> {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xa5a5_5a5a);
    let base: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| unit_gaussian_vec(&mut proto_rng, spec.input_dim))
        .collect();

    let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
    let mut clients = Vec::with_capacity(spec.num_clients);
    let mut prototypes = Vec::with_capacity(spec.num_clients);
    for client in 0..spec.num_clients {
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ client as u64);
        let rotation = PlaneRotation::sample(&mut rng, spec.input_dim);
        let rotated: Vec<Vec<f64>> = base
            .iter()
            .map(|p| {
                let mut v = p.clone();
                rotation.apply(spec.theta_max, &mut v);
                v
            })
            .collect();
        let weights = dirichlet(&mut rng, spec.label_alpha, spec.num_classes);
        let mut train = Shard::default();
        let mut test = Shard::default();
        let n_train = ((spec.samples_per_client as f64) * spec.train_fraction).round() as usize;
        for i in 0..spec.samples_per_client {
            let u: f64 = rng.gen();
            let mut label = spec.num_classes - 1;
            let mut acc = 0.0;
            for (k, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    label = k;
                    break;
                }
            }
            let mut x = rotated[label].clone();
            if spec.clusters_per_class == 2 && rng.gen::<bool>() {
                for v in x.iter_mut() {
                    *v = -*v;
                }
            }
            for v in x.iter_mut() {
                *v += noise.sample(&mut rng);
            }
            if i < n_train {
                train.features.push(x);
                train.labels.push(label);
            } else {
                test.features.push(x);
                test.labels.push(label);
            }
        }
        clients.push(ClientData { train, test });
        prototypes.push(rotated);
    }
    Ok(Federation { clients, prototypes })
}

/// Conjunction task: a sample carries concept `i` in its first half and
/// concept `j` in its second half; client `n` labels it `table_n[i][j]`.
/// Tables are balanced (each label covers `num_classes` pairs) and shuffled
/// independently per client, so the *pairing* is what differs across
/// clients, not the concepts themselves.
fn generate_conjunction(spec: &FederationSpec) -> Result<Federation> {
    let half = spec.input_dim / 2;
    let k = spec.num_classes;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xa5a5_5a5a);
    let concepts_a: Vec<Vec<f64>> =
        (0..k).map(|_| unit_gaussian_vec(&mut proto_rng, half)).collect();
    let concepts_b: Vec<Vec<f64>> =
        (0..k).map(|_| unit_gaussian_vec(&mut proto_rng, half)).collect();

    let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
    let mut clients = Vec::with_capacity(spec.num_clients);
    let mut prototypes = Vec::with_capacity(spec.num_clients);
    for client in 0..spec.num_clients {
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ client as u64);
        let rotation = PlaneRotation::sample(&mut rng, spec.input_dim);
        // Balanced pair -> label table, shuffled per client.
        let mut table: Vec<usize> = (0..k * k).map(|p| p % k).collect();
        for i in (1..table.len()).rev() {
            let j = rng.gen_range(0..=i);
            table.swap(i, j);
        }
        let mut pairs_by_label: Vec<Vec<(usize, usize)>> = vec![Vec::new(); k];
        for (p, &label) in table.iter().enumerate() {
            pairs_by_label[label].push((p / k, p % k));
        }
        let weights = dirichlet(&mut rng, spec.label_alpha, k);
        let mut train = Shard::default();
        let mut test = Shard::default();
        let n_train = ((spec.samples_per_client as f64) * spec.train_fraction).round() as usize;
        for i in 0..spec.samples_per_client {
            let u: f64 = rng.gen();
            let mut label = k - 1;
            let mut acc = 0.0;
            for (l, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    label = l;
                    break;
                }
            }
            let pairs = &pairs_by_label[label];
            let (ca, cb) = pairs[rng.gen_range(0..pairs.len())];
            let mut x: Vec<f64> = concepts_a[ca]
                .iter()
                .chain(concepts_b[cb].iter())
                .copied()
                .collect();
            rotation.apply(spec.theta_max, &mut x);
            for v in x.iter_mut() {
                *v += noise.sample(&mut rng);
            }
            if i < n_train {
                train.features.push(x);
                train.labels.push(label);
            } else {
                test.features.push(x);
                test.labels.push(label);
            }
        }
        // Per-class reference vectors for displacement metrics: the rotated
        // mean of each label's concept pairs.
        let mut class_refs = Vec::with_capacity(k);
        for pairs in &pairs_by_label {
            let mut mean = vec![0.0; spec.input_dim];
            for &(ca, cb) in pairs {
                for (d, v) in concepts_a[ca].iter().chain(concepts_b[cb].iter()).enumerate() {
                    mean[d] += v / pairs.len() as f64;
                }
            }
            rotation.apply(spec.theta_max, &mut mean);
            class_refs.push(mean);
        }
        clients.push(ClientData { train, test });
        prototypes.push(class_refs);
    }
    Ok(Federation { clients, prototypes })
}

/// Concatenation of all per-client test shards, tagged by origin.
pub fn global_test_set(fed: &Federation) -> PooledTest {
    let mut pooled = PooledTest::default();
    for (cid, c) in fed.clients.iter().enumerate() {
        for (x, &y) in c.test.features.iter().zip(&c.test.labels) {
            pooled.features.push(x.clone());
            pooled.labels.push(y);
            pooled.origin.push(cid);
        }
    }
    pooled
}

/// Mean pairwise distance between different clients' views of the same class.
pub fn mean_prototype_displacement(fed: &Federation) -> f64 {
    let n = fed.prototypes.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            for (a, b) in fed.prototypes[i].iter().zip(&fed.prototypes[j]) {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                total += d2.sqrt();
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Export all shards as CSV: `client_id, split, label, x_0..x_{d-1}`.
pub fn export_csv<W: Write>(fed: &Federation, out: &mut W) -> Result<()> {
    let dim = fed
        .clients
        .first()
        .and_then(|c| c.train.features.first())
        .map_or(0, Vec::len);
    let mut header = String::from("client_id,split,label");
    for j in 0..dim {
        header.push_str(&format!(",x_{j}"));
    }
    writeln!(out, "{header}")?;
    for (cid, c) in fed.clients.iter().enumerate() {
        for (split, shard) in [("train", &c.train), ("test", &c.test)] {
            for (x, &y) in shard.features.iter().zip(&shard.labels) {
                let feats: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
                writeln!(out, "{cid},{split},{y},{}", feats.join(","))?;
            }
        }
    }
    Ok(())
}
