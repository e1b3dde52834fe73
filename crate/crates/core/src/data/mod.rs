//! Synthetic data: Gaussian-mixture generation, Dirichlet non-IID
//! partitioning over clients, per-client style shifts, and train/test
//! splitting. Binary shard persistence lives in [`io`].

pub mod io;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derive_rng, stream};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};

/// Labeled feature set. Invariants: one label per feature row, every label
/// `< class_count`, all features finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if !features.is_matrix() {
            return Err(Error::Shape {
                op: "Dataset::new",
                expected: "feature matrix [n, d]".into(),
                got: format!("{:?}", features.shape()),
            });
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape {
                op: "Dataset::new",
                expected: format!("{} labels", features.rows()),
                got: format!("{}", labels.len()),
            });
        }
        if class_count == 0 {
            return Err(Error::Domain {
                op: "Dataset::new",
                message: "class_count must be >= 1".into(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Domain {
                op: "Dataset::new",
                message: format!("label {bad} out of range for {class_count} classes"),
            });
        }
        if !features.all_finite() {
            return Err(Error::NonFinite {
                context: "Dataset::new features".into(),
            });
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Dataset indices carrying class `c`, ascending.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    pub fn counts_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Classes with at least one sample, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        self.counts_per_class()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }

    /// Rows selected by `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features: Tensor::matrix(idx.len(), d, data).unwrap(),
            labels,
            class_count: self.class_count,
        }
    }
}

const MEAN_SAMPLING_ATTEMPTS: usize = 1000;

/// Draws class means with pairwise distance >= `separation` (rejection
/// sampling from N(0, separation^2 I); configurations that leave no room
/// after 1000 attempts per class are rejected), then `per_class` samples per
/// class from N(mean, I). Samples are ordered class-major.
pub fn generate_gaussian_mixture(
    classes: usize,
    input_dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || input_dim == 0 || per_class == 0 {
        return Err(Error::Config(format!(
            "generate_gaussian_mixture: classes ({classes}), input_dim ({input_dim}), and per_class ({per_class}) must all be >= 1"
        )));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::Config(format!(
            "generate_gaussian_mixture: separation must be finite and > 0, got {separation}"
        )));
    }
    let mut rng = derive_rng(seed, &[stream::DATASET]);
    let mut means: Vec<Tensor> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut accepted = None;
        for _ in 0..MEAN_SAMPLING_ATTEMPTS {
            let cand = Tensor::randn(&[input_dim], separation, &mut rng);
            let ok = means.iter().all(|m| {
                let d2: f64 = cand
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() >= separation
            });
            if ok {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(m) => means.push(m),
            None => {
                return Err(Error::Config(format!(
                    "generate_gaussian_mixture: could not place mean for class {c} with pairwise separation {separation} in {input_dim} dimensions"
                )))
            }
        }
    }

    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean.data() {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + z);
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(n, input_dim, data)?, labels, classes)
}

/// Non-IID assignment of a dataset over clients.
///
/// `proportions` is class-major: row `c` holds the K client shares of class
/// `c` and sums to 1. `assignments[k]` lists the dataset indices owned by
/// client `k`, ascending; the lists are disjoint and cover the dataset.
#[derive(Clone, Debug)]
pub struct PartitionPlan {
    pub proportions: Tensor,
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.assignments.len()
    }

    /// Checks the partition invariant: disjoint, complete, ascending.
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let mut seen = vec![false; dataset_len];
        for a in &self.assignments {
            for w in a.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Protocol("assignments not ascending".into()));
                }
            }
            for &i in a {
                if i >= dataset_len || seen[i] {
                    return Err(Error::Protocol(format!(
                        "assignment index {i} out of range or duplicated"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Protocol(
                "assignments do not cover the dataset".into(),
            ));
        }
        Ok(())
    }
}

/// Dirichlet(alpha) label-skew partition with optional Gaussian perturbation
/// of the shares.
///
/// Per class: shares over the K clients are drawn Dirichlet(alpha) (via K
/// Gamma(alpha, 1) draws), perturbed entrywise with N(0, noise_var), clamped
/// at zero, and renormalized; samples are then assigned by walking the share
/// CDF. Clients left empty receive one sample moved from the currently
/// largest client (ties broken toward the smaller client id; the donor's
/// highest-index sample moves).
pub fn dirichlet_partition(
    dataset: &Dataset,
    clients: usize,
    alpha: f64,
    noise_var: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(Error::Config(
            "dirichlet_partition: clients must be >= 1".into(),
        ));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!(
            "dirichlet_partition: alpha must be finite and > 0, got {alpha}"
        )));
    }
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(Error::Config(format!(
            "dirichlet_partition: noise_var must be finite and >= 0, got {noise_var}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Domain {
            op: "dirichlet_partition",
            message: "empty dataset".into(),
        });
    }

    let mut rng = derive_rng(seed, &[stream::PARTITION]);
    let c = dataset.class_count();
    let k = clients;
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated above");
    let noise = if noise_var > 0.0 {
        Some(Normal::new(0.0, noise_var.sqrt()).expect("noise_var validated above"))
    } else {
        None
    };

    let normalize = |shares: &mut [f64]| {
        let sum: f64 = shares.iter().sum();
        if sum > 0.0 {
            shares.iter_mut().for_each(|s| *s /= sum);
        } else {
            // Degenerate row (all Gamma draws underflowed, or noise clamped
            // everything to zero): fall back to uniform shares.
            shares.iter_mut().for_each(|s| *s = 1.0 / k as f64);
        }
    };

    let mut proportions = Vec::with_capacity(c * k);
    let mut plan_assignments: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..c {
        let mut shares: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        normalize(&mut shares);
        if let Some(nd) = &noise {
            for s in shares.iter_mut() {
                *s = (*s + nd.sample(&mut rng)).max(0.0);
            }
            normalize(&mut shares);
        }
        for idx in dataset.class_indices(class) {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = k - 1;
            for (client, &share) in shares.iter().enumerate() {
                acc += share;
                if u < acc {
                    chosen = client;
                    break;
                }
            }
            plan_assignments[chosen].push(idx);
        }
        proportions.extend(shares);
    }

    // Empty-client repair: move one sample from the largest client.
    for empty in 0..k {
        if !plan_assignments[empty].is_empty() {
            continue;
        }
        let donor = (0..k)
            .max_by_key(|&i| (plan_assignments[i].len(), usize::MAX - i))
            .unwrap();
        if plan_assignments[donor].len() < 2 {
            // Nothing can be moved without emptying the donor; leave as is.
            continue;
        }
        let moved = plan_assignments[donor].pop().unwrap();
        plan_assignments[empty].push(moved);
    }

    for a in plan_assignments.iter_mut() {
        a.sort_unstable();
    }

    let plan = PartitionPlan {
        proportions: Tensor::matrix(c, k, proportions)?,
        assignments: plan_assignments,
    };
    plan.validate(dataset.len())?;
    Ok(plan)
}

/// Per-client affine transform plus observation noise:
/// `x' = scale .* x + offset + noise_std * N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleShiftSpec {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise_std: f64,
}

impl StyleShiftSpec {
    /// Identity transform (no shift, no noise).
    pub fn identity(dim: usize) -> Self {
        StyleShiftSpec {
            scale: vec![1.0; dim],
            offset: vec![0.0; dim],
            noise_std: 0.0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.scale.len() != dim || self.offset.len() != dim {
            return Err(Error::Shape {
                op: "StyleShiftSpec::validate",
                expected: format!("scale and offset of length {dim}"),
                got: format!("{} and {}", self.scale.len(), self.offset.len()),
            });
        }
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Domain {
                op: "StyleShiftSpec::validate",
                message: "scale entries must be finite and > 0".into(),
            });
        }
        if !self.offset.iter().all(|&o| o.is_finite()) {
            return Err(Error::Domain {
                op: "StyleShiftSpec::validate",
                message: "offset entries must be finite".into(),
            });
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Domain {
                op: "StyleShiftSpec::validate",
                message: format!("noise_std must be finite and >= 0, got {}", self.noise_std),
            });
        }
        Ok(())
    }

    /// One spec per client: scales uniform in [1-jitter, 1+jitter]
    /// (jitter in [0, 1)), offsets N(0, offset_std^2).
    pub fn generate(
        clients: usize,
        dim: usize,
        scale_jitter: f64,
        offset_std: f64,
        noise_std: f64,
        seed: u64,
    ) -> Result<Vec<StyleShiftSpec>> {
        if !(0.0..1.0).contains(&scale_jitter) {
            return Err(Error::Config(format!(
                "style.scale_jitter must lie in [0, 1), got {scale_jitter}"
            )));
        }
        if !(offset_std >= 0.0) || !(noise_std >= 0.0) {
            return Err(Error::Config(
                "style.offset_std and style.noise_std must be >= 0".into(),
            ));
        }
        let mut specs = Vec::with_capacity(clients);
        for k in 0..clients {
            let mut rng = derive_rng(seed, &[stream::STYLE, k as u64, 0]);
            let scale = (0..dim)
                .map(|_| 1.0 + scale_jitter * rng.gen_range(-1.0..1.0))
                .collect();
            let offset = (0..dim)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * offset_std
                })
                .collect();
            specs.push(StyleShiftSpec {
                scale,
                offset,
                noise_std,
            });
        }
        Ok(specs)
    }
}

/// Materializes per-client shards: selects each client's assigned rows and
/// applies its style transform. Noise draws come from a per-client stream,
/// so shard contents do not depend on the order clients are processed.
pub fn apply_style_shift(
    dataset: &Dataset,
    plan: &PartitionPlan,
    specs: &[StyleShiftSpec],
    seed: u64,
) -> Result<Vec<Dataset>> {
    if specs.len() != plan.clients() {
        return Err(Error::Shape {
            op: "apply_style_shift",
            expected: format!("{} style specs", plan.clients()),
            got: format!("{}", specs.len()),
        });
    }
    let d = dataset.input_dim();
    for s in specs {
        s.validate(d)?;
    }
    let mut shards = Vec::with_capacity(plan.clients());
    for (k, assignment) in plan.assignments.iter().enumerate() {
        let spec = &specs[k];
        let mut rng = derive_rng(seed, &[stream::STYLE, k as u64, 1]);
        let mut data = Vec::with_capacity(assignment.len() * d);
        let mut labels = Vec::with_capacity(assignment.len());
        for &i in assignment {
            let row = dataset.features().row(i);
            for j in 0..d {
                let noise = if spec.noise_std > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    z * spec.noise_std
                } else {
                    0.0
                };
                data.push(spec.scale[j] * row[j] + spec.offset[j] + noise);
            }
            labels.push(dataset.labels()[i]);
        }
        shards.push(Dataset::new(
            Tensor::matrix(assignment.len(), d, data)?,
            labels,
            dataset.class_count(),
        )?);
    }
    Ok(shards)
}

/// Stratified train/test split. Per class with n >= 2 samples, the test side
/// takes `round(test_fraction * n)` clamped to [1, n-1]; singleton classes
/// stay in train. Selection order comes from a seeded shuffle of each class's
/// rows.
pub fn split_train_test<R: Rng>(
    dataset: &Dataset,
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Domain {
            op: "split_train_test",
            message: format!("test_fraction must lie in [0, 1), got {test_fraction}"),
        });
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..dataset.class_count() {
        let mut idx = dataset.class_indices(c);
        if idx.len() < 2 || test_fraction == 0.0 {
            train_idx.extend(idx);
            continue;
        }
        use rand::seq::SliceRandom;
        idx.shuffle(rng);
        let n = idx.len();
        let want = (test_fraction * n as f64).round() as usize;
        let n_test = want.clamp(1, n - 1);
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mixture_is_linearly_separable_at_wide_separation() {
        // Oracle: nearest-estimated-class-mean (LDA with isotropic unit
        // covariance, which matches the generator). At separation 10 the
        // Bayes error is ~phi(-5), so >= 99% train accuracy is expected.
        let ds = generate_gaussian_mixture(2, 2, 200, 10.0, 42).unwrap();
        let mut means = vec![vec![0.0; 2]; 2];
        let counts = ds.counts_per_class();
        for i in 0..ds.len() {
            let y = ds.labels()[i];
            for (m, x) in means[y].iter_mut().zip(ds.features().row(i)) {
                *m += x;
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut correct = 0;
        for i in 0..ds.len() {
            let x = ds.features().row(i);
            let d2 = |m: &[f64]| -> f64 { m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum() };
            let pred = if d2(&means[0]) <= d2(&means[1]) { 0 } else { 1 };
            if pred == ds.labels()[i] {
                correct += 1;
            }
        }
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn mixture_means_respect_separation() {
        // True means are not exposed; estimate them from 200 samples/class
        // (standard error ~0.07 per coordinate) and allow slack for it.
        let sep = 7.0;
        let ds = generate_gaussian_mixture(4, 3, 200, sep, 7).unwrap();
        let counts = ds.counts_per_class();
        let mut means = vec![vec![0.0; 3]; 4];
        for i in 0..ds.len() {
            let y = ds.labels()[i];
            for (m, x) in means[y].iter_mut().zip(ds.features().row(i)) {
                *m += x;
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
        for a in 0..4 {
            for b in a + 1..4 {
                let d: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= sep - 0.5, "classes {a},{b} only {d} apart");
            }
        }
    }

    #[test]
    fn mixture_rejects_impossible_separation() {
        // 40 means pairwise >= 5 apart cannot fit where N(0, 25) puts them
        // on a line; rejection sampling must give up with a config error.
        let err = generate_gaussian_mixture(40, 1, 1, 5.0, 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn mixture_is_deterministic_per_seed() {
        let a = generate_gaussian_mixture(3, 4, 10, 4.0, 9).unwrap();
        let b = generate_gaussian_mixture(3, 4, 10, 4.0, 9).unwrap();
        let c = generate_gaussian_mixture(3, 4, 10, 4.0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mixture_validates_arguments() {
        assert!(generate_gaussian_mixture(0, 2, 5, 1.0, 0).is_err());
        assert!(generate_gaussian_mixture(2, 0, 5, 1.0, 0).is_err());
        assert!(generate_gaussian_mixture(2, 2, 0, 1.0, 0).is_err());
        assert!(generate_gaussian_mixture(2, 2, 5, 0.0, 0).is_err());
        assert!(generate_gaussian_mixture(2, 2, 5, f64::NAN, 0).is_err());
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let ds = generate_gaussian_mixture(4, 2, 25, 5.0, 1).unwrap();
        let plan = dirichlet_partition(&ds, 7, 0.3, 0.02, 1).unwrap();
        plan.validate(ds.len()).unwrap();
        let total: usize = plan.assignments.iter().map(|a| a.len()).sum();
        assert_eq!(total, ds.len());
        for c in 0..4 {
            let row_sum: f64 = (0..7).map(|k| plan.proportions.at2(c, k)).sum();
            assert_abs_diff_eq!(row_sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn partition_huge_alpha_is_nearly_uniform() {
        let ds = generate_gaussian_mixture(3, 2, 40, 5.0, 2).unwrap();
        let plan = dirichlet_partition(&ds, 4, 1e6, 0.0, 2).unwrap();
        for c in 0..3 {
            for k in 0..4 {
                assert!(
                    (plan.proportions.at2(c, k) - 0.25).abs() < 0.01,
                    "share {} for class {c} client {k}",
                    plan.proportions.at2(c, k)
                );
            }
        }
    }

    #[test]
    fn partition_small_alpha_concentrates_classes() {
        // Independent Monte Carlo oracle for E[max share] of Dirichlet(0.1)
        // over 10 clients, computed before checking the partition: with
        // 10_000 draws the mean max share sits near 0.85, far above 0.5.
        let mut rng = crate::rng::derive_rng(999, &[1234]);
        let gamma = Gamma::new(0.1, 1.0).unwrap();
        let mut mc_mean_max = 0.0;
        for _ in 0..10_000 {
            let draws: Vec<f64> = (0..10).map(|_| gamma.sample(&mut rng)).collect();
            let sum: f64 = draws.iter().sum();
            let max = draws.iter().cloned().fold(0.0, f64::max);
            if sum > 0.0 {
                mc_mean_max += max / sum;
            } else {
                mc_mean_max += 1.0;
            }
        }
        mc_mean_max /= 10_000.0;
        assert!(mc_mean_max > 0.6, "oracle disagrees: {mc_mean_max}");

        let ds = generate_gaussian_mixture(6, 2, 50, 5.0, 3).unwrap();
        let plan = dirichlet_partition(&ds, 10, 0.1, 0.0, 3).unwrap();
        let mut mean_max = 0.0;
        for c in 0..6 {
            let row_max = (0..10)
                .map(|k| plan.proportions.at2(c, k))
                .fold(0.0, f64::max);
            mean_max += row_max;
        }
        mean_max /= 6.0;
        assert!(mean_max > 0.5, "mean max share {mean_max}");
    }

    #[test]
    fn partition_repairs_empty_clients_when_possible() {
        // 12 samples over 12 clients at alpha 0.05: raw assignment leaves
        // empties; pigeonhole guarantees a donor with >= 2 samples exists
        // while any client is empty, so repair fills everyone.
        let ds = generate_gaussian_mixture(2, 2, 6, 5.0, 4).unwrap();
        let plan = dirichlet_partition(&ds, 12, 0.05, 0.0, 4).unwrap();
        plan.validate(ds.len()).unwrap();
        for (k, a) in plan.assignments.iter().enumerate() {
            assert!(!a.is_empty(), "client {k} left empty");
        }
    }

    #[test]
    fn partition_validates_arguments() {
        let ds = generate_gaussian_mixture(2, 2, 5, 5.0, 0).unwrap();
        assert!(dirichlet_partition(&ds, 0, 0.1, 0.0, 0).is_err());
        assert!(dirichlet_partition(&ds, 2, 0.0, 0.0, 0).is_err());
        assert!(dirichlet_partition(&ds, 2, 0.1, -1.0, 0).is_err());
    }

    #[test]
    fn identity_style_shift_preserves_rows_exactly() {
        let ds = generate_gaussian_mixture(3, 4, 10, 5.0, 5).unwrap();
        let plan = dirichlet_partition(&ds, 3, 1.0, 0.0, 5).unwrap();
        let specs = vec![StyleShiftSpec::identity(4); 3];
        let shards = apply_style_shift(&ds, &plan, &specs, 5).unwrap();
        for (k, shard) in shards.iter().enumerate() {
            let direct = ds.subset(&plan.assignments[k]);
            assert_eq!(shard, &direct);
        }
    }

    #[test]
    fn affine_style_shift_is_exact_without_noise() {
        let ds = generate_gaussian_mixture(2, 2, 8, 5.0, 6).unwrap();
        let plan = dirichlet_partition(&ds, 2, 1.0, 0.0, 6).unwrap();
        let spec = StyleShiftSpec {
            scale: vec![2.0, 0.5],
            offset: vec![1.0, -3.0],
            noise_std: 0.0,
        };
        let shards = apply_style_shift(&ds, &plan, &[spec.clone(), spec], 6).unwrap();
        for (k, shard) in shards.iter().enumerate() {
            for (r, &i) in plan.assignments[k].iter().enumerate() {
                let orig = ds.features().row(i);
                let got = shard.features().row(r);
                assert_eq!(got[0], 2.0 * orig[0] + 1.0);
                assert_eq!(got[1], 0.5 * orig[1] - 3.0);
            }
        }
    }

    #[test]
    fn style_shift_rejects_nonpositive_scale() {
        let spec = StyleShiftSpec {
            scale: vec![0.0, 1.0],
            offset: vec![0.0, 0.0],
            noise_std: 0.0,
        };
        assert!(spec.validate(2).is_err());
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let ds = generate_gaussian_mixture(3, 2, 20, 5.0, 8).unwrap();
        let mut rng = crate::rng::derive_rng(8, &[crate::rng::stream::SPLIT, 0]);
        let (train, test) = split_train_test(&ds, 0.2, &mut rng).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        // 20 per class at 20% -> exactly 4 test samples per class.
        assert_eq!(test.counts_per_class(), vec![4, 4, 4]);
        assert_eq!(train.counts_per_class(), vec![16, 16, 16]);
    }

    #[test]
    fn split_keeps_singletons_in_train() {
        let features = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let ds = Dataset::new(features, vec![0, 0, 1], 2).unwrap();
        let mut rng = crate::rng::derive_rng(9, &[crate::rng::stream::SPLIT, 0]);
        let (train, test) = split_train_test(&ds, 0.2, &mut rng).unwrap();
        // Class 0 has two samples: one goes to test (clamped to >= 1).
        // Class 1 is a singleton and must stay in train.
        assert_eq!(train.counts_per_class()[1], 1);
        assert_eq!(test.counts_per_class()[1], 0);
        assert_eq!(train.counts_per_class()[0], 1);
        assert_eq!(test.counts_per_class()[0], 1);
    }

    #[test]
    fn dataset_rejects_bad_labels_and_nonfinite() {
        let f = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(Dataset::new(f.clone(), vec![0, 2], 2).is_err());
        let bad = Tensor::matrix(1, 1, vec![f64::NAN]).unwrap();
        assert!(Dataset::new(bad, vec![0], 2).is_err());
    }
}
