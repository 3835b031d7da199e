//! Domain-specific batch normalization.
//!
//! One layer keeps K parallel per-channel parameter sets — learnable gamma
//! and beta plus moving-average population statistics — one set per source
//! domain. Training normalizes by batch statistics of the active domain and
//! folds them into that domain's running averages; evaluation rewrites the
//! normalization as a per-channel affine transform (the "linearized" form)
//! from the population statistics.

use crate::error::{GdError, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Learnable parameters and population statistics for one domain.
#[derive(Debug, Clone)]
pub struct BnParamSet {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub batches_seen: u64,
}

impl BnParamSet {
    fn new(channels: usize) -> Self {
        BnParamSet {
            gamma: Tensor::filled(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            // mean 0 / var 1 before the first batch keeps linearize
            // well-defined at step zero.
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            batches_seen: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DsbnLayer {
    channels: usize,
    eps: f64,
    momentum: f64,
    sets: Vec<BnParamSet>,
}

/// Tape handles produced by a train-mode forward.
pub struct BnTrainHandles {
    pub y: TensorId,
    pub gamma: TensorId,
    pub beta: TensorId,
}

impl DsbnLayer {
    pub fn new(channels: usize, num_domains: usize, eps: f64, momentum: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(GdError::Config(format!("bn eps must be > 0, got {eps}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(GdError::Config(format!(
                "bn momentum must be in [0, 1), got {momentum}"
            )));
        }
        if channels == 0 || num_domains == 0 {
            return Err(GdError::Config(
                "bn layer needs at least one channel and one domain".into(),
            ));
        }
        Ok(DsbnLayer {
            channels,
            eps,
            momentum,
            sets: (0..num_domains)
                .map(|_| BnParamSet::new(channels))
                .collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn num_domains(&self) -> usize {
        self.sets.len()
    }

    pub fn set(&self, domain: usize) -> Result<&BnParamSet> {
        self.sets.get(domain).ok_or_else(|| {
            GdError::Index(format!(
                "domain {domain} out of range for {} BN sets",
                self.sets.len()
            ))
        })
    }

    pub fn set_mut(&mut self, domain: usize) -> Result<&mut BnParamSet> {
        let n = self.sets.len();
        self.sets
            .get_mut(domain)
            .ok_or_else(|| GdError::Index(format!("domain {domain} out of range for {n} BN sets")))
    }

    /// Moving-average update of the population statistics:
    /// running <- m * running + (1 - m) * batch.
    pub fn update_running_stats(
        &mut self,
        domain: usize,
        batch_mean: &[f64],
        batch_var: &[f64],
    ) -> Result<()> {
        let m = self.momentum;
        let channels = self.channels;
        let set = self.set_mut(domain)?;
        if batch_mean.len() != channels || batch_var.len() != channels {
            return Err(GdError::dimension(
                "update_running_stats",
                format!("stat width vs {channels} channels"),
            ));
        }
        for (r, b) in set.running_mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in set.running_var.iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
        set.batches_seen += 1;
        Ok(())
    }

    /// Train-mode forward on the tape for one domain: normalizes by batch
    /// statistics, registers gamma/beta as tape leaves for gradient flow and
    /// folds the batch statistics into the running averages.
    pub fn bn_forward_train(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        domain: usize,
    ) -> Result<BnTrainHandles> {
        let eps = self.eps;
        let set = self.set(domain)?;
        let gamma = tape.leaf(&set.gamma);
        let beta = tape.leaf(&set.beta);
        let y = tape.bn_train(x, gamma, beta, eps)?;
        let (mean, var) = {
            let (m, v) = tape.bn_batch_stats(y);
            (m.to_vec(), v.to_vec())
        };
        self.update_running_stats(domain, &mean, &var)?;
        Ok(BnTrainHandles { y, gamma, beta })
    }

    /// Rewrite eval-mode BN as the per-channel affine y = a x + b:
    /// a = gamma / sqrt(var + eps), b = beta - gamma * mean / sqrt(var + eps).
    pub fn linearize(&self, domain: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let eps = self.eps;
        let set = self.set(domain)?;
        let mut a = vec![0.0; self.channels];
        let mut b = vec![0.0; self.channels];
        for c in 0..self.channels {
            let inv_std = 1.0 / (set.running_var[c] + eps).sqrt();
            a[c] = set.gamma.values()[c] * inv_std;
            b[c] = set.beta.values()[c] - set.gamma.values()[c] * set.running_mean[c] * inv_std;
        }
        Ok((a, b))
    }

    /// Eval-mode BN computed directly from the population statistics, the
    /// reference route the affine form is checked against.
    pub fn bn_forward_eval_direct(&self, domain: usize, x: &Tensor) -> Result<Tensor> {
        let set = self.set(domain)?;
        if x.shape().len() != 2 || x.cols() != self.channels {
            return Err(GdError::dimension(
                "bn_forward_eval_direct",
                format!("input {:?} vs {} channels", x.shape(), self.channels),
            ));
        }
        let (b, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; b * c];
        for r in 0..b {
            for j in 0..c {
                let xhat = (x.values()[r * c + j] - set.running_mean[j])
                    / (set.running_var[j] + self.eps).sqrt();
                out[r * c + j] = set.gamma.values()[j] * xhat + set.beta.values()[j];
            }
        }
        Tensor::new(vec![b, c], out)
    }
}

/// Per-channel affine forward y = a ⊙ x + b outside any tape, used by
/// evaluation paths that do not need gradients.
pub fn bn_forward_affine(x: &Tensor, a: &[f64], b: &[f64]) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != a.len() || a.len() != b.len() {
        return Err(GdError::dimension(
            "bn_forward_affine",
            format!("input {:?} vs widths {}/{}", x.shape(), a.len(), b.len()),
        ));
    }
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = a[j] * x.values()[i * c + j] + b[j];
        }
    }
    Tensor::new(vec![r, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn layer1(eps: f64) -> DsbnLayer {
        DsbnLayer::new(1, 1, eps, 0.9).unwrap()
    }

    #[test]
    fn invalid_construction_rejected() {
        assert!(DsbnLayer::new(4, 2, 0.0, 0.9).is_err());
        assert!(DsbnLayer::new(4, 2, 1e-5, 1.0).is_err());
        assert!(DsbnLayer::new(0, 2, 1e-5, 0.9).is_err());
    }

    #[test]
    fn train_forward_standardizes_two_point_batch() {
        // mean 1, biased var 1 -> [-1, 1] as eps -> 0
        let mut layer = layer1(1e-12);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap());
        let h = layer.bn_forward_train(&mut tape, x, 0).unwrap();
        let y = tape.value(h.y);
        assert!(
            (y[0] + 1.0).abs() < 1e-6 && (y[1] - 1.0).abs() < 1e-6,
            "{y:?}"
        );
    }

    #[test]
    fn constant_batch_maps_to_beta() {
        let mut layer = layer1(1e-5);
        layer.set_mut(0).unwrap().beta.values_mut()[0] = 5.0;
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3, 1], vec![7.0, 7.0, 7.0]).unwrap());
        let h = layer.bn_forward_train(&mut tape, x, 0).unwrap();
        for v in tape.value(h.y) {
            assert!((v - 5.0).abs() < 1e-12, "{v}");
        }
    }

    /// Output channel mean equals beta and output variance equals
    /// gamma^2 sigma^2 / (sigma^2 + eps), recomputed directly.
    #[test]
    fn train_forward_moments_match_direct_recomputation() {
        let mut rng = Rng::new(77);
        let (b, c) = (8, 4);
        let eps = 1e-5;
        let mut layer = DsbnLayer::new(c, 1, eps, 0.9).unwrap();
        for j in 0..c {
            layer.set_mut(0).unwrap().gamma.values_mut()[j] = 0.5 + j as f64 * 0.4;
            layer.set_mut(0).unwrap().beta.values_mut()[j] = -1.0 + j as f64 * 0.7;
        }
        let x = Tensor::randn(vec![b, c], 1.3, &mut rng);
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let h = layer.bn_forward_train(&mut tape, xid, 0).unwrap();
        let y = tape.value(h.y);
        for j in 0..c {
            let col: Vec<f64> = (0..b).map(|r| y[r * c + j]).collect();
            let mean = col.iter().sum::<f64>() / b as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / b as f64;
            let xcol: Vec<f64> = (0..b).map(|r| x.values()[r * c + j]).collect();
            let xmean = xcol.iter().sum::<f64>() / b as f64;
            let xvar = xcol.iter().map(|v| (v - xmean) * (v - xmean)).sum::<f64>() / b as f64;
            let gamma = layer.set(0).unwrap().gamma.values()[j];
            let beta = layer.set(0).unwrap().beta.values()[j];
            assert!(
                (mean - beta).abs() < 1e-10,
                "channel {j} mean {mean} vs beta {beta}"
            );
            let expect = gamma * gamma * xvar / (xvar + eps);
            assert!(
                (var - expect).abs() < 1e-10,
                "channel {j} var {var} vs {expect}"
            );
        }
    }

    #[test]
    fn running_stats_single_update() {
        let mut layer = layer1(1e-5);
        layer.set_mut(0).unwrap().running_mean[0] = 0.0;
        layer.update_running_stats(0, &[1.0], &[1.0]).unwrap();
        let set = layer.set(0).unwrap();
        assert!((set.running_mean[0] - 0.1).abs() < 1e-15);
        assert_eq!(set.batches_seen, 1);
    }

    #[test]
    fn running_stats_fixed_point() {
        let mut layer = layer1(1e-5);
        layer.set_mut(0).unwrap().running_mean[0] = 0.7;
        layer.set_mut(0).unwrap().running_var[0] = 0.3;
        layer.update_running_stats(0, &[0.7], &[0.3]).unwrap();
        let set = layer.set(0).unwrap();
        assert!((set.running_mean[0] - 0.7).abs() < 1e-15);
        assert!((set.running_var[0] - 0.3).abs() < 1e-15);
    }

    /// n identical updates converge geometrically: the distance to the
    /// batch value scales as m^n (closed-form recursion).
    #[test]
    fn running_stats_geometric_convergence() {
        let m: f64 = 0.9;
        let mut layer = layer1(1e-5);
        let target = 2.0;
        for n in 1..=25usize {
            layer.update_running_stats(0, &[target], &[1.0]).unwrap();
            let got = layer.set(0).unwrap().running_mean[0];
            let expect = target + m.powi(n as i32) * (0.0 - target);
            assert!(
                (got - expect).abs() < 1e-12,
                "after {n} updates: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn linearize_identity_transform() {
        // gamma=1, beta=0, mean=0, var=1, eps -> 0 gives a=1, b=0
        let layer = layer1(1e-14);
        let (a, b) = layer.linearize(0).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-6 && b[0].abs() < 1e-12);
    }

    #[test]
    fn linearize_direct_arithmetic() {
        // gamma=2, beta=1, mean=3, var=4, eps -> 0 gives a=1, b=-2
        let mut layer = layer1(1e-14);
        {
            let set = layer.set_mut(0).unwrap();
            set.gamma.values_mut()[0] = 2.0;
            set.beta.values_mut()[0] = 1.0;
            set.running_mean[0] = 3.0;
            set.running_var[0] = 4.0;
        }
        let (a, b) = layer.linearize(0).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-7, "a {}", a[0]);
        assert!((b[0] + 2.0).abs() < 1e-6, "b {}", b[0]);
    }

    /// Linearization equivalence: a*x + b equals eval-mode BN computed
    /// directly from the population statistics, elementwise to 1e-12.
    #[test]
    fn linearize_equals_direct_eval_bn() {
        let mut rng = Rng::new(5);
        for trial in 0..20 {
            let c = 1 + (trial % 5);
            let mut layer = DsbnLayer::new(c, 3, 1e-5, 0.9).unwrap();
            for d in 0..3 {
                let set = layer.set_mut(d).unwrap();
                for j in 0..c {
                    set.gamma.values_mut()[j] = 0.2 + rng.uniform() * 2.0;
                    set.beta.values_mut()[j] = rng.normal();
                    set.running_mean[j] = rng.normal();
                    set.running_var[j] = rng.uniform() * 3.0;
                }
            }
            let x = Tensor::randn(vec![6, c], 2.0, &mut rng);
            for d in 0..3 {
                let direct = layer.bn_forward_eval_direct(d, &x).unwrap();
                let (a, b) = layer.linearize(d).unwrap();
                let affine = bn_forward_affine(&x, &a, &b).unwrap();
                let diff = crate::tensor::max_abs_diff(direct.values(), affine.values());
                assert!(diff <= 1e-12, "trial {trial} domain {d}: {diff}");
            }
        }
    }

    /// A training step on domain j leaves every other domain's parameters
    /// and statistics bitwise unchanged.
    #[test]
    fn domain_isolation_is_bitwise() {
        let mut rng = Rng::new(21);
        let mut layer = DsbnLayer::new(4, 3, 1e-5, 0.9).unwrap();
        let before: Vec<BnParamSet> = (0..3).map(|d| layer.set(d).unwrap().clone()).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::randn(vec![4, 4], 1.0, &mut rng));
        layer.bn_forward_train(&mut tape, x, 1).unwrap();
        for d in [0usize, 2] {
            let (now, was) = (layer.set(d).unwrap(), &before[d]);
            assert_eq!(now.gamma.values(), was.gamma.values());
            assert_eq!(now.beta.values(), was.beta.values());
            assert_eq!(now.running_mean, was.running_mean);
            assert_eq!(now.running_var, was.running_var);
            assert_eq!(now.batches_seen, was.batches_seen);
        }
        assert_ne!(
            layer.set(1).unwrap().running_mean,
            before[1].running_mean,
            "trained domain must have moved"
        );
    }

    /// Scaling the batch by c scales the computed batch variance by c^2 and
    /// leaves the normalized pre-affine output invariant up to the eps
    /// perturbation.
    #[test]
    fn scale_correctness() {
        let mut rng = Rng::new(31);
        let c = 3.0;
        let x = Tensor::randn(vec![8, 2], 1.0, &mut rng);
        let xs = Tensor::new(vec![8, 2], x.values().iter().map(|v| c * v).collect()).unwrap();
        let run = |input: &Tensor| {
            let mut layer = DsbnLayer::new(2, 1, 1e-5, 0.9).unwrap();
            let mut tape = Tape::new();
            let xid = tape.leaf(input);
            let h = layer.bn_forward_train(&mut tape, xid, 0).unwrap();
            let stats = tape.bn_batch_stats(h.y);
            (tape.value(h.y).to_vec(), stats.1.to_vec())
        };
        let (y1, var1) = run(&x);
        let (y2, var2) = run(&xs);
        for j in 0..2 {
            assert!(
                (var2[j] - c * c * var1[j]).abs() < 1e-9 * (1.0 + var2[j].abs()),
                "variance must scale by c^2"
            );
        }
        for (a, b) in y1.iter().zip(&y2) {
            assert!(
                (a - b).abs() < 1e-4,
                "normalized output must be scale-invariant: {a} vs {b}"
            );
        }
    }

    #[test]
    fn domain_out_of_range_is_index_error() {
        let layer = layer1(1e-5);
        assert!(matches!(layer.set(3), Err(GdError::Index(_))));
        assert!(layer.linearize(1).is_err());
    }

    proptest! {
        /// running_var stays nonnegative under any update sequence.
        #[test]
        fn running_var_never_negative(updates in proptest::collection::vec((0.0f64..5.0, -3.0f64..3.0), 1..40)) {
            let mut layer = DsbnLayer::new(1, 1, 1e-5, 0.9).unwrap();
            for (var, mean) in updates {
                layer.update_running_stats(0, &[mean], &[var]).unwrap();
                prop_assert!(layer.set(0).unwrap().running_var[0] >= 0.0);
            }
        }
    }
}
