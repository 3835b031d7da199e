//! The trainable embedding network and its losses.
//!
//! An MLP backbone with domain-specific BN throughout: one DSBN layer on
//! the raw input channels (where per-domain style statistics are directly
//! visible, the analog of a conv stem's first BN), one after each hidden
//! linear layer, and a BN bottleneck on the embedding output. A single
//! classifier head covers the union of all source identities (identity
//! spaces are disjoint across domains, so the union head is well defined).
//! Embeddings are the pre-classifier features.

use serde::{Deserialize, Serialize};

use crate::dsbn::DsbnLayer;
use crate::error::{GdError, Result};
use crate::gdnorm::BnPath;
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_dim: 32,
            hidden: vec![64, 64, 64],
            embed_dim: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearLayer {
    fn new(fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng) -> Self {
        LinearLayer {
            w: Tensor::randn(vec![fan_in, fan_out], std, rng),
            b: Tensor::zeros(vec![fan_out]),
        }
    }
}

/// Identifies one trainable tensor of an [`EmbedNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKey {
    HiddenW(usize),
    HiddenB(usize),
    EmbedW,
    EmbedB,
    Classifier,
    /// (bn layer index, domain slot)
    Gamma(usize, usize),
    /// (bn layer index, domain slot)
    Beta(usize, usize),
}

/// Parameter-to-tape-node associations collected during a forward pass.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    pairs: Vec<(ParamKey, TensorId)>,
}

impl Bindings {
    pub fn push(&mut self, key: ParamKey, id: TensorId) {
        debug_assert!(
            !self.pairs.iter().any(|(k, _)| *k == key),
            "parameter bound twice: {key:?}"
        );
        self.pairs.push((key, id));
    }

    pub fn extend(&mut self, other: Bindings) {
        for (k, id) in other.pairs {
            self.push(k, id);
        }
    }

    pub fn pairs(&self) -> &[(ParamKey, TensorId)] {
        &self.pairs
    }

    pub fn id_of(&self, key: ParamKey) -> Option<TensorId> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, id)| *id)
    }
}

/// How BN layers behave during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Batch-statistic normalization with running-stat updates for one domain.
    TrainDomain(usize),
    /// Eval mode through the linearized population statistics of one domain.
    Domain(usize),
    /// Eval/refine mode through explicit per-layer affine coefficients.
    Path(&'a BnPath),
}

pub struct TrainForward {
    pub emb: TensorId,
    pub binds: Bindings,
    /// BnTrain node per BN layer, for the deferred running-stat update.
    pub bn_nodes: Vec<TensorId>,
}

#[derive(Debug, Clone)]
pub struct EmbedNet {
    arch: ArchConfig,
    pub hidden: Vec<LinearLayer>,
    pub embed: LinearLayer,
    pub dsbn: Vec<DsbnLayer>,
    pub classifier: Tensor,
    num_ids: usize,
}

impl EmbedNet {
    /// Build a freshly initialized network with `num_bn_domains` BN sets per
    /// layer and a classifier over `num_ids` union identities.
    pub fn new(
        arch: ArchConfig,
        num_bn_domains: usize,
        num_ids: usize,
        eps: f64,
        momentum: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if arch.hidden.is_empty() {
            return Err(GdError::Config("at least one hidden layer required".into()));
        }
        if num_ids == 0 {
            return Err(GdError::Config(
                "classifier needs at least one identity".into(),
            ));
        }
        let mut hidden = Vec::new();
        let mut fan_in = arch.input_dim;
        for &width in &arch.hidden {
            let std = (2.0 / fan_in as f64).sqrt();
            hidden.push(LinearLayer::new(fan_in, width, std, rng));
            fan_in = width;
        }
        let embed_std = (2.0 / (fan_in + arch.embed_dim) as f64).sqrt();
        let embed = LinearLayer::new(fan_in, arch.embed_dim, embed_std, rng);

        let mut dsbn = Vec::new();
        // Input normalization: the one place the per-domain style acts on
        // channels directly, before linear mixing spreads it out.
        dsbn.push(DsbnLayer::new(
            arch.input_dim,
            num_bn_domains,
            eps,
            momentum,
        )?);
        for &width in &arch.hidden {
            dsbn.push(DsbnLayer::new(width, num_bn_domains, eps, momentum)?);
        }
        // BN bottleneck on the embedding output.
        dsbn.push(DsbnLayer::new(
            arch.embed_dim,
            num_bn_domains,
            eps,
            momentum,
        )?);

        let cls_std = (2.0 / (arch.embed_dim + num_ids) as f64).sqrt();
        let classifier = Tensor::randn(vec![arch.embed_dim, num_ids], cls_std, rng);

        Ok(EmbedNet {
            arch,
            hidden,
            embed,
            dsbn,
            classifier,
            num_ids,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn num_ids(&self) -> usize {
        self.num_ids
    }

    pub fn num_bn_domains(&self) -> usize {
        self.dsbn[0].num_domains()
    }

    pub fn num_bn_layers(&self) -> usize {
        self.dsbn.len()
    }

    /// Channel width of each BN layer, backbone order.
    pub fn bn_widths(&self) -> Vec<usize> {
        self.dsbn.iter().map(|l| l.channels()).collect()
    }

    pub fn param(&self, key: ParamKey) -> &Tensor {
        match key {
            ParamKey::HiddenW(i) => &self.hidden[i].w,
            ParamKey::HiddenB(i) => &self.hidden[i].b,
            ParamKey::EmbedW => &self.embed.w,
            ParamKey::EmbedB => &self.embed.b,
            ParamKey::Classifier => &self.classifier,
            ParamKey::Gamma(l, d) => &self.dsbn[l].set(d).expect("domain in range").gamma,
            ParamKey::Beta(l, d) => &self.dsbn[l].set(d).expect("domain in range").beta,
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor {
        match key {
            ParamKey::HiddenW(i) => &mut self.hidden[i].w,
            ParamKey::HiddenB(i) => &mut self.hidden[i].b,
            ParamKey::EmbedW => &mut self.embed.w,
            ParamKey::EmbedB => &mut self.embed.b,
            ParamKey::Classifier => &mut self.classifier,
            ParamKey::Gamma(l, d) => &mut self.dsbn[l].set_mut(d).expect("domain in range").gamma,
            ParamKey::Beta(l, d) => &mut self.dsbn[l].set_mut(d).expect("domain in range").beta,
        }
    }

    /// Shared (domain-independent) parameter keys, classifier included.
    pub fn shared_param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for i in 0..self.hidden.len() {
            keys.push(ParamKey::HiddenW(i));
            keys.push(ParamKey::HiddenB(i));
        }
        keys.push(ParamKey::EmbedW);
        keys.push(ParamKey::EmbedB);
        keys.push(ParamKey::Classifier);
        keys
    }

    /// Every trainable parameter key, all domains included.
    pub fn all_param_keys(&self) -> Vec<ParamKey> {
        let mut keys = self.shared_param_keys();
        for l in 0..self.dsbn.len() {
            for d in 0..self.dsbn[l].num_domains() {
                keys.push(ParamKey::Gamma(l, d));
                keys.push(ParamKey::Beta(l, d));
            }
        }
        keys
    }

    pub(crate) fn register_backbone(
        &self,
        tape: &mut Tape,
    ) -> (Vec<(TensorId, TensorId)>, (TensorId, TensorId), Bindings) {
        let mut binds = Bindings::default();
        let mut hidden_ids = Vec::new();
        for (i, layer) in self.hidden.iter().enumerate() {
            let w = tape.leaf(&layer.w);
            let b = tape.leaf(&layer.b);
            binds.push(ParamKey::HiddenW(i), w);
            binds.push(ParamKey::HiddenB(i), b);
            hidden_ids.push((w, b));
        }
        let ew = tape.leaf(&self.embed.w);
        let eb = tape.leaf(&self.embed.b);
        binds.push(ParamKey::EmbedW, ew);
        binds.push(ParamKey::EmbedB, eb);
        (hidden_ids, (ew, eb), binds)
    }

    /// Train-mode forward for one domain slot. Running statistics are NOT
    /// updated here; pass the returned `bn_nodes` to [`Self::apply_bn_updates`].
    pub fn forward_train(&self, tape: &mut Tape, x: &Tensor, slot: usize) -> Result<TrainForward> {
        self.check_input(x)?;
        if slot >= self.num_bn_domains() {
            return Err(GdError::Index(format!(
                "domain slot {slot} out of range for {} BN sets",
                self.num_bn_domains()
            )));
        }
        let (hidden_ids, (ew, eb), mut binds) = self.register_backbone(tape);
        let mut bn_nodes = Vec::new();
        let bn_train_at = |tape: &mut Tape,
                           binds: &mut Bindings,
                           bn_nodes: &mut Vec<TensorId>,
                           l: usize,
                           h: TensorId|
         -> Result<TensorId> {
            let set = self.dsbn[l].set(slot)?;
            let gamma = tape.leaf(&set.gamma);
            let beta = tape.leaf(&set.beta);
            binds.push(ParamKey::Gamma(l, slot), gamma);
            binds.push(ParamKey::Beta(l, slot), beta);
            let y = tape.bn_train(h, gamma, beta, self.dsbn[l].eps())?;
            bn_nodes.push(y);
            Ok(y)
        };
        let mut h = tape.leaf(x);
        h = bn_train_at(tape, &mut binds, &mut bn_nodes, 0, h)?;
        for (i, (w, b)) in hidden_ids.iter().enumerate() {
            h = tape.linear(h, *w, *b)?;
            h = bn_train_at(tape, &mut binds, &mut bn_nodes, i + 1, h)?;
            h = tape.relu(h);
        }
        h = tape.linear(h, ew, eb)?;
        let last = self.dsbn.len() - 1;
        h = bn_train_at(tape, &mut binds, &mut bn_nodes, last, h)?;
        Ok(TrainForward {
            emb: h,
            binds,
            bn_nodes,
        })
    }

    /// Fold the batch statistics captured by a train forward into the
    /// running averages of `slot`.
    pub fn apply_bn_updates(
        &mut self,
        tape: &Tape,
        bn_nodes: &[TensorId],
        slot: usize,
    ) -> Result<()> {
        debug_assert_eq!(bn_nodes.len(), self.dsbn.len());
        for (layer, node) in self.dsbn.iter_mut().zip(bn_nodes) {
            let (mean, var) = {
                let (m, v) = tape.bn_batch_stats(*node);
                (m.to_vec(), v.to_vec())
            };
            layer.update_running_stats(slot, &mean, &var)?;
        }
        Ok(())
    }

    /// Backbone forward against pre-registered weight nodes, with BN layers
    /// applied as per-channel affines from `coeffs`. Shared by the one-path
    /// eval forward and the multi-path refine forward.
    pub(crate) fn forward_core(
        &self,
        tape: &mut Tape,
        x: TensorId,
        hidden_ids: &[(TensorId, TensorId)],
        embed_ids: (TensorId, TensorId),
        coeffs: &[(TensorId, TensorId)],
    ) -> Result<TensorId> {
        if coeffs.len() != self.dsbn.len() {
            return Err(GdError::dimension(
                "forward_core",
                format!(
                    "{} coefficient pairs for {} BN layers",
                    coeffs.len(),
                    self.dsbn.len()
                ),
            ));
        }
        let mut h = tape.affine_rows(x, coeffs[0].0, coeffs[0].1)?;
        for (i, (w, b)) in hidden_ids.iter().enumerate() {
            h = tape.linear(h, *w, *b)?;
            h = tape.affine_rows(h, coeffs[i + 1].0, coeffs[i + 1].1)?;
            h = tape.relu(h);
        }
        h = tape.linear(h, embed_ids.0, embed_ids.1)?;
        let l = self.dsbn.len() - 1;
        h = tape.affine_rows(h, coeffs[l].0, coeffs[l].1)?;
        Ok(h)
    }

    /// Forward with explicit per-layer affine coefficients already on the
    /// tape (sampled-path or linearized-domain coefficients). Returns the
    /// embedding node and bindings for the shared backbone weights.
    pub fn forward_affine_ids(
        &self,
        tape: &mut Tape,
        x: TensorId,
        coeffs: &[(TensorId, TensorId)],
    ) -> Result<(TensorId, Bindings)> {
        let (hidden_ids, embed_ids, binds) = self.register_backbone(tape);
        let emb = self.forward_core(tape, x, &hidden_ids, embed_ids, coeffs)?;
        Ok((emb, binds))
    }

    /// Eval forward along a fixed path; coefficients enter as constants.
    pub fn forward_path(&self, tape: &mut Tape, x: &Tensor, path: &BnPath) -> Result<TensorId> {
        self.check_input(x)?;
        path.check_widths(&self.bn_widths())?;
        let x_id = tape.leaf(x);
        let coeffs: Vec<(TensorId, TensorId)> = path
            .layers
            .iter()
            .map(|pl| (tape.leaf_vec(&pl.a), tape.leaf_vec(&pl.b)))
            .collect();
        let (emb, _) = self.forward_affine_ids(tape, x_id, &coeffs)?;
        Ok(emb)
    }

    /// The eval-mode path of one domain: linearize every BN layer.
    pub fn linearize_path(&self, domain: usize) -> Result<BnPath> {
        let mut layers = Vec::new();
        for l in &self.dsbn {
            let (a, b) = l.linearize(domain)?;
            layers.push(crate::gdnorm::PathLayer { a, b });
        }
        Ok(BnPath { layers })
    }

    /// Umbrella forward covering all three BN modes. Train mode updates the
    /// running statistics as a side effect.
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, mode: BnMode) -> Result<TensorId> {
        match mode {
            BnMode::TrainDomain(k) => {
                let out = self.forward_train(tape, x, k)?;
                self.apply_bn_updates(tape, &out.bn_nodes, k)?;
                Ok(out.emb)
            }
            BnMode::Domain(k) => {
                let path = self.linearize_path(k)?;
                self.forward_path(tape, x, &path)
            }
            BnMode::Path(p) => self.forward_path(tape, x, p),
        }
    }

    /// Logits over the union classifier; binds the classifier weight.
    pub fn classifier_logits(
        &self,
        tape: &mut Tape,
        emb: TensorId,
    ) -> Result<(TensorId, (ParamKey, TensorId))> {
        let w = tape.leaf(&self.classifier);
        let logits = tape.matmul_op(emb, w)?;
        Ok((logits, (ParamKey::Classifier, w)))
    }

    /// Convenience no-grad embedding of a batch along a path.
    pub fn embed_with_path(&self, x: &Tensor, path: &BnPath) -> Result<Tensor> {
        let mut tape = Tape::new();
        let emb = self.forward_path(&mut tape, x, path)?;
        tape.check_finite()?;
        Tensor::new(tape.shape(emb).to_vec(), tape.value(emb).to_vec())
    }

    /// Accumulate tape gradients into the bound parameters.
    pub fn apply_grads(&mut self, tape: &Tape, binds: &Bindings) {
        for (key, id) in binds.pairs() {
            let g = tape.grad(*id).to_vec();
            self.param_mut(*key).accumulate_grad(&g);
        }
    }

    /// SGD over exactly the bound parameters.
    pub fn sgd_step_bound(&mut self, binds: &Bindings, lr: f64, weight_decay: f64) -> Result<()> {
        for (key, _) in binds.pairs() {
            crate::optim::sgd_step([self.param_mut(*key)], lr, weight_decay)?;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.arch.input_dim {
            return Err(GdError::dimension(
                "forward",
                format!("input {:?} vs input_dim {}", x.shape(), self.arch.input_dim),
            ));
        }
        Ok(())
    }
}

/// Softmax cross-entropy over the union-of-identities classifier, mean over
/// the batch.
pub fn identity_loss(tape: &mut Tape, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    tape.softmax_xent(logits, labels)
}

/// Batch-hard triplet loss with Euclidean distances.
pub fn triplet_loss(
    tape: &mut Tape,
    emb: TensorId,
    labels: &[usize],
    margin: f64,
) -> Result<TensorId> {
    tape.triplet_hard(emb, labels, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::max_abs_diff;
    use proptest::prelude::*;

    fn net_with(domains: usize, seed: u64) -> EmbedNet {
        let mut rng = Rng::new(seed);
        EmbedNet::new(
            ArchConfig {
                input_dim: 6,
                hidden: vec![8, 5],
                embed_dim: 4,
            },
            domains,
            10,
            1e-5,
            0.9,
            &mut rng,
        )
        .unwrap()
    }

    fn train_batch(net: &EmbedNet, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(vec![8, net.arch().input_dim], 1.0, &mut rng);
        (x, vec![0, 0, 1, 1, 2, 2, 3, 3])
    }

    #[test]
    fn bn_layer_count_covers_input_hidden_layers_and_bottleneck() {
        let net = net_with(3, 1);
        assert_eq!(net.num_bn_layers(), net.arch().hidden.len() + 2);
        assert_eq!(net.bn_widths(), vec![6, 8, 5, 4]);
    }

    /// Domain(k) forward is definitionally the Path(linearize(k)) forward.
    #[test]
    fn domain_mode_equals_linearized_path_mode() {
        let mut net = net_with(3, 2);
        let (x, _) = train_batch(&net, 3);
        // move stats off init so linearize is nontrivial
        let mut tape = Tape::new();
        let fwd = net.forward_train(&mut tape, &x, 1).unwrap();
        net.apply_bn_updates(&tape, &fwd.bn_nodes, 1).unwrap();

        let mut t1 = Tape::new();
        let e1 = net.forward(&mut t1, &x, BnMode::Domain(1)).unwrap();
        let path = net.linearize_path(1).unwrap();
        let mut t2 = Tape::new();
        let e2 = net.forward(&mut t2, &x, BnMode::Path(&path)).unwrap();
        assert_eq!(t1.value(e1), t2.value(e2), "definitional equivalence");
    }

    /// With identical domains the mean path forward equals any single
    /// domain's forward.
    #[test]
    fn mean_path_equals_domain_forward_for_identical_domains() {
        let mut net = net_with(3, 4);
        let (x, _) = train_batch(&net, 5);
        let gp = crate::gdnorm::estimate_gp(&net, false).unwrap();
        let mp = crate::gdnorm::mean_path(&gp);
        let mut t1 = Tape::new();
        let e1 = net.forward(&mut t1, &x, BnMode::Path(&mp)).unwrap();
        let mut t2 = Tape::new();
        let e2 = net.forward(&mut t2, &x, BnMode::Domain(2)).unwrap();
        let diff = max_abs_diff(t1.value(e1), t2.value(e2));
        assert!(diff <= 1e-12, "{diff}");
    }

    /// Eval mode needs no batch statistics, so B = 1 works.
    #[test]
    fn single_sample_eval_succeeds() {
        let mut net = net_with(2, 6);
        let mut rng = Rng::new(7);
        let x = Tensor::randn(vec![1, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let emb = net.forward(&mut tape, &x, BnMode::Domain(0)).unwrap();
        assert_eq!(tape.shape(emb), &[1, 4]);
        // ... while train mode must reject it
        let mut tape2 = Tape::new();
        assert!(net.forward(&mut tape2, &x, BnMode::TrainDomain(0)).is_err());
    }

    #[test]
    fn forward_mode_bounds_checked() {
        let mut net = net_with(2, 8);
        let (x, _) = train_batch(&net, 9);
        let mut tape = Tape::new();
        assert!(net.forward(&mut tape, &x, BnMode::Domain(5)).is_err());
    }

    #[test]
    fn identity_loss_one_hot_limit() {
        let mut tape = Tape::new();
        // large-margin correct logits -> loss ~ 0
        let logits = tape.leaf(&Tensor::from_rows(&[vec![30.0, 0.0, 0.0]]).unwrap());
        let loss = identity_loss(&mut tape, logits, &[0]).unwrap();
        assert!(tape.scalar(loss) < 1e-12);
    }

    /// Identity loss matches an independent log-sum-exp recomputation.
    #[test]
    fn identity_loss_matches_logsumexp_recomputation() {
        let mut rng = Rng::new(10);
        let b = 5;
        let n = 7;
        let z = Tensor::randn(vec![b, n], 2.0, &mut rng);
        let labels: Vec<usize> = (0..b).map(|i| (i * 3) % n).collect();
        let mut tape = Tape::new();
        let zid = tape.leaf(&z);
        let loss = identity_loss(&mut tape, zid, &labels).unwrap();
        let mut expect = 0.0;
        for r in 0..b {
            let row = &z.values()[r * n..(r + 1) * n];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expect += lse - row[labels[r]];
        }
        expect /= b as f64;
        assert!((tape.scalar(loss) - expect).abs() <= 1e-10);
    }

    #[test]
    fn triplet_two_separated_clusters_is_zero() {
        let mut tape = Tape::new();
        let emb = tape.leaf(
            &Tensor::from_rows(&[
                vec![0.0, 0.0],
                vec![0.0, 0.0],
                vec![10.0, 0.0],
                vec![10.0, 0.0],
            ])
            .unwrap(),
        );
        let loss = triplet_loss(&mut tape, emb, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn triplet_identical_embeddings_equal_margin() {
        let mut tape = Tape::new();
        let rows: Vec<Vec<f64>> = (0..4).map(|_| vec![1.0, 2.0]).collect();
        let emb = tape.leaf(&Tensor::from_rows(&rows).unwrap());
        let loss = triplet_loss(&mut tape, emb, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((tape.scalar(loss) - 0.3).abs() < 1e-15);
    }

    /// Batch-hard mining matches a brute-force all-pairs oracle.
    #[test]
    fn triplet_matches_all_pairs_oracle() {
        let mut rng = Rng::new(11);
        for trial in 0..10 {
            let b = 9;
            let e = 4;
            let emb = Tensor::randn(vec![b, e], 1.0, &mut rng);
            let labels: Vec<usize> = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
            let margin = 0.5;
            let mut tape = Tape::new();
            let eid = tape.leaf(&emb);
            let loss = triplet_loss(&mut tape, eid, &labels, margin).unwrap();
            // oracle: exhaustive pair enumeration
            let d = |i: usize, j: usize| -> f64 {
                (0..e)
                    .map(|k| {
                        let v = emb.values()[i * e + k] - emb.values()[j * e + k];
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt()
            };
            let mut expect = 0.0;
            for i in 0..b {
                let mut dp: f64 = f64::NEG_INFINITY;
                let mut dn: f64 = f64::INFINITY;
                for j in 0..b {
                    if i == j {
                        continue;
                    }
                    if labels[i] == labels[j] {
                        dp = dp.max(d(i, j));
                    } else {
                        dn = dn.min(d(i, j));
                    }
                }
                expect += (dp - dn + margin).max(0.0);
            }
            expect /= b as f64;
            assert!((tape.scalar(loss) - expect).abs() <= 1e-10, "trial {trial}");
        }
    }

    proptest! {
        /// Triplet loss is invariant under any permutation of the batch.
        #[test]
        fn triplet_is_permutation_invariant(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let b = 8;
            let e = 3;
            let emb = Tensor::randn(vec![b, e], 1.0, &mut rng);
            let labels = vec![0usize, 0, 1, 1, 2, 2, 3, 3];
            let mut perm: Vec<usize> = (0..b).collect();
            rng.shuffle(&mut perm);
            let mut tape = Tape::new();
            let eid = tape.leaf(&emb);
            let base = triplet_loss(&mut tape, eid, &labels, 0.4).unwrap();
            let rows: Vec<Vec<f64>> = perm
                .iter()
                .map(|&i| emb.values()[i * e..(i + 1) * e].to_vec())
                .collect();
            let perm_emb = Tensor::from_rows(&rows).unwrap();
            let perm_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let mut tape2 = Tape::new();
            let eid2 = tape2.leaf(&perm_emb);
            let permuted = triplet_loss(&mut tape2, eid2, &perm_labels, 0.4).unwrap();
            prop_assert!((tape.scalar(base) - tape2.scalar(permuted)).abs() < 1e-12);
        }
    }
}
