//! Gaussian-process estimation over linearized BN coefficients, path
//! sampling, and the self-refining training step.
//!
//! Every BN layer of every domain linearizes to per-channel coefficients
//! (a, b). Across the K source domains these form, per layer and channel,
//! an empirical Gaussian (M, Σ²); the factorized collection over depth is
//! the Gaussian process. Paths sampled from it stand in for the BN
//! estimations of potential unseen domains: a refine step forwards a mixed
//! batch through a sampled path and backpropagates through both the
//! sampling reparameterization and the estimate itself, so every domain's
//! gamma/beta keeps co-evolving with the process. Inference uses the mean
//! path and touches no sampling machinery.

use serde::{Deserialize, Serialize};

use crate::datagen::Batch;
use crate::error::{GdError, Result};
use crate::model::{identity_loss, triplet_loss, Bindings, EmbedNet, ParamKey};
use crate::rng::Rng;
use crate::tape::{mean_over_slices, var_over_slices, Tape, TensorId};

/// Per-layer affine coefficients of one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathLayer {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Per-layer, per-channel affine coefficients covering every BN layer of
/// the model — the object sampled from or averaged over the process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnPath {
    pub layers: Vec<PathLayer>,
}

impl BnPath {
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.a.len()).collect()
    }

    pub fn check_widths(&self, expected: &[usize]) -> Result<()> {
        let got = self.widths();
        if got != expected {
            return Err(GdError::dimension(
                "bn_path",
                format!("path widths {got:?} vs model widths {expected:?}"),
            ));
        }
        if self
            .layers
            .iter()
            .any(|l| l.a.len() != l.b.len() || l.a.iter().chain(&l.b).any(|v| !v.is_finite()))
        {
            return Err(GdError::NonFinite("bn path coefficients".into()));
        }
        Ok(())
    }
}

/// Per-layer, per-channel means and variances of the linearized
/// coefficients across domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpLayer {
    pub mean_a: Vec<f64>,
    pub mean_b: Vec<f64>,
    pub var_a: Vec<f64>,
    pub var_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpEstimate {
    pub layers: Vec<GpLayer>,
}

impl GpEstimate {
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.mean_a.len()).collect()
    }
}

/// What multiplies the noise draw in the sampling rule: the per-channel
/// variance (the default) or its square root. Both conventions are
/// implemented so the choice stays testable instead of silently resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    #[default]
    Variance,
    StdDev,
}

/// Fit the per-layer Gaussians from the current model parameters.
///
/// With fewer than two domains the variance is identically zero; that is
/// only permitted when `allow_degenerate` is set, because a silent
/// zero-variance estimate usually means a misconfigured run.
pub fn estimate_gp(net: &EmbedNet, allow_degenerate: bool) -> Result<GpEstimate> {
    estimate_gp_from_layers(&net.dsbn, allow_degenerate)
}

pub fn estimate_gp_from_layers(
    layers: &[crate::dsbn::DsbnLayer],
    allow_degenerate: bool,
) -> Result<GpEstimate> {
    let k = layers
        .first()
        .map(|l| l.num_domains())
        .ok_or_else(|| GdError::contract("estimate over a model with no BN layers"))?;
    if k < 2 && !allow_degenerate {
        return Err(GdError::DegenerateEstimate(format!(
            "need K >= 2 domains for a variance estimate, got K = {k}"
        )));
    }
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let mut a_rows = Vec::with_capacity(k);
        let mut b_rows = Vec::with_capacity(k);
        for d in 0..k {
            let (a, b) = layer.linearize(d)?;
            a_rows.push(a);
            b_rows.push(b);
        }
        let a_refs: Vec<&[f64]> = a_rows.iter().map(|v| v.as_slice()).collect();
        let b_refs: Vec<&[f64]> = b_rows.iter().map(|v| v.as_slice()).collect();
        let mean_a = mean_over_slices(&a_refs);
        let mean_b = mean_over_slices(&b_refs);
        let var_a = var_over_slices(&a_refs, &mean_a);
        let var_b = var_over_slices(&b_refs, &mean_b);
        out.push(GpLayer {
            mean_a,
            mean_b,
            var_a,
            var_b,
        });
    }
    Ok(GpEstimate { layers: out })
}

/// The debiased path used at inference: the per-layer means.
pub fn mean_path(gp: &GpEstimate) -> BnPath {
    BnPath {
        layers: gp
            .layers
            .iter()
            .map(|l| PathLayer {
                a: l.mean_a.clone(),
                b: l.mean_b.clone(),
            })
            .collect(),
    }
}

/// Standard-normal draws shaped like a path, one per coefficient.
#[derive(Debug, Clone)]
pub struct PathNoise {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Draw noise for one path; order is fixed (layers ascending, a before b)
/// so a seed pins the draw exactly.
pub fn draw_path_noise(gp: &GpEstimate, rng: &mut Rng) -> PathNoise {
    PathNoise {
        layers: gp
            .layers
            .iter()
            .map(|l| {
                (
                    rng.normal_vec(l.mean_a.len()),
                    rng.normal_vec(l.mean_b.len()),
                )
            })
            .collect(),
    }
}

fn noise_multiplier(var: &[f64], scale: NoiseScale) -> Vec<f64> {
    match scale {
        NoiseScale::Variance => var.to_vec(),
        NoiseScale::StdDev => var.iter().map(|v| v.sqrt()).collect(),
    }
}

/// Reparameterized sample with externally supplied noise:
/// coefficient = M + λ · mult ⊙ ε, where mult is Σ² (default) or Σ.
pub fn sample_path_with_noise(
    gp: &GpEstimate,
    lambda: f64,
    scale: NoiseScale,
    noise: &PathNoise,
) -> Result<BnPath> {
    if lambda < 0.0 {
        return Err(GdError::contract(format!(
            "sampling ratio lambda must be >= 0, got {lambda}"
        )));
    }
    let layers = gp
        .layers
        .iter()
        .zip(&noise.layers)
        .map(|(l, (ea, eb))| {
            let ma = noise_multiplier(&l.var_a, scale);
            let mb = noise_multiplier(&l.var_b, scale);
            PathLayer {
                a: l.mean_a
                    .iter()
                    .zip(&ma)
                    .zip(ea)
                    .map(|((m, s), e)| m + lambda * s * e)
                    .collect(),
                b: l.mean_b
                    .iter()
                    .zip(&mb)
                    .zip(eb)
                    .map(|((m, s), e)| m + lambda * s * e)
                    .collect(),
            }
        })
        .collect();
    Ok(BnPath { layers })
}

/// Reparameterized sample drawing fresh noise from `rng`.
pub fn sample_path(
    gp: &GpEstimate,
    lambda: f64,
    scale: NoiseScale,
    rng: &mut Rng,
) -> Result<BnPath> {
    let noise = draw_path_noise(gp, rng);
    sample_path_with_noise(gp, lambda, scale, &noise)
}

/// Knobs of the self-refining step.
#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub lambda: f64,
    pub n_paths: usize,
    pub noise_scale: NoiseScale,
    pub triplet_margin: f64,
    pub id_loss_weight: f64,
    pub triplet_loss_weight: f64,
    /// Permit the K = 1 estimate (variance identically zero).
    pub allow_degenerate_gp: bool,
}

/// On-tape Gaussian-process chain plus per-path forwards: builds the loss
/// as a differentiable function of every domain's gamma/beta and the shared
/// weights, with the supplied noise treated as constant. This is the
/// finite-difference-checkable core of [`refine_step`].
pub fn refine_forward(
    net: &EmbedNet,
    tape: &mut Tape,
    batch: &Batch,
    cfg: &RefineConfig,
    noises: &[PathNoise],
) -> Result<(TensorId, Bindings)> {
    if noises.is_empty() {
        return Err(GdError::contract("refine needs at least one sampled path"));
    }
    if cfg.lambda < 0.0 {
        return Err(GdError::contract(format!(
            "sampling ratio lambda must be >= 0, got {}",
            cfg.lambda
        )));
    }
    let k = net.num_bn_domains();
    if k < 2 && !cfg.allow_degenerate_gp {
        return Err(GdError::DegenerateEstimate(format!(
            "refine needs K >= 2 domains unless the degenerate estimate is forced, got K = {k}"
        )));
    }
    for layer in &net.dsbn {
        for d in 0..k {
            if layer.set(d)?.batches_seen == 0 {
                return Err(GdError::contract(format!(
                    "domain {d} has no training-batch history; run a supervised step first"
                )));
            }
        }
    }

    let x_id = tape.leaf(&batch.x);
    let (hidden_ids, embed_ids, mut binds) = net.register_backbone(tape);

    // Linearize every (layer, domain) on the tape: a = gamma * c and
    // b = beta - gamma * (mean * c) with c = 1/sqrt(var + eps) constant,
    // so gradients reach gamma and beta but not the population statistics.
    let mut lin_a: Vec<Vec<TensorId>> = Vec::with_capacity(net.dsbn.len());
    let mut lin_b: Vec<Vec<TensorId>> = Vec::with_capacity(net.dsbn.len());
    for (l, layer) in net.dsbn.iter().enumerate() {
        let mut a_ids = Vec::with_capacity(k);
        let mut b_ids = Vec::with_capacity(k);
        for d in 0..k {
            let set = layer.set(d)?;
            let gamma = tape.leaf(&set.gamma);
            let beta = tape.leaf(&set.beta);
            binds.push(ParamKey::Gamma(l, d), gamma);
            binds.push(ParamKey::Beta(l, d), beta);
            let inv_std: Vec<f64> = set
                .running_var
                .iter()
                .map(|v| 1.0 / (v + layer.eps()).sqrt())
                .collect();
            let mean_scaled: Vec<f64> = set
                .running_mean
                .iter()
                .zip(&inv_std)
                .map(|(m, c)| m * c)
                .collect();
            let a = tape.mul_const_vec(gamma, &inv_std)?;
            let shift = tape.mul_const_vec(gamma, &mean_scaled)?;
            let b = tape.sub(beta, shift)?;
            a_ids.push(a);
            b_ids.push(b);
        }
        lin_a.push(a_ids);
        lin_b.push(b_ids);
    }

    // Per-layer Gaussians over domains.
    let mut gp_ids = Vec::with_capacity(net.dsbn.len());
    for l in 0..net.dsbn.len() {
        let mean_a = tape.mean_over(&lin_a[l])?;
        let var_a = tape.var_over(&lin_a[l])?;
        let mean_b = tape.mean_over(&lin_b[l])?;
        let var_b = tape.var_over(&lin_b[l])?;
        gp_ids.push((mean_a, var_a, mean_b, var_b));
    }

    let cls = tape.leaf(&net.classifier);
    binds.push(ParamKey::Classifier, cls);

    // One forward per sampled path against the same registered weights.
    let mut path_losses = Vec::with_capacity(noises.len());
    for noise in noises {
        let mut coeffs = Vec::with_capacity(net.dsbn.len());
        for (l, (mean_a, var_a, mean_b, var_b)) in gp_ids.iter().enumerate() {
            let sample_coeff =
                |tape: &mut Tape, mean: TensorId, var: TensorId, eps: &[f64]| -> Result<TensorId> {
                    let lam_eps: Vec<f64> = eps.iter().map(|e| cfg.lambda * e).collect();
                    let mult = match cfg.noise_scale {
                        NoiseScale::Variance => var,
                        NoiseScale::StdDev => tape.sqrt(var),
                    };
                    let noise_term = tape.mul_const_vec(mult, &lam_eps)?;
                    tape.add(mean, noise_term)
                };
            let a = sample_coeff(tape, *mean_a, *var_a, &noise.layers[l].0)?;
            let b = sample_coeff(tape, *mean_b, *var_b, &noise.layers[l].1)?;
            coeffs.push((a, b));
        }
        let emb = net.forward_core(tape, x_id, &hidden_ids, embed_ids, &coeffs)?;
        let logits = tape.matmul_op(emb, cls)?;
        let id_l = identity_loss(tape, logits, &batch.labels)?;
        let tri_l = triplet_loss(tape, emb, &batch.labels, cfg.triplet_margin)?;
        let id_w = tape.scale(id_l, cfg.id_loss_weight);
        let tri_w = tape.scale(tri_l, cfg.triplet_loss_weight);
        path_losses.push(tape.add(id_w, tri_w)?);
    }
    let mut total = path_losses[0];
    for l in &path_losses[1..] {
        total = tape.add(total, *l)?;
    }
    let loss = tape.scale(total, 1.0 / noises.len() as f64);
    Ok((loss, binds))
}

/// One self-refining step: re-estimate the process from the current
/// parameters, sample `n_paths` paths, forward the mixed batch through each,
/// backpropagate the averaged identity + triplet loss into every domain's
/// gamma/beta and the shared weights, and apply the optimizer. Returns the
/// averaged loss.
#[allow(clippy::too_many_arguments)]
pub fn refine_step(
    net: &mut EmbedNet,
    batch: &Batch,
    num_source_domains: usize,
    cfg: &RefineConfig,
    lr: f64,
    weight_decay: f64,
    noise_rng: &mut Rng,
) -> Result<f64> {
    check_equal_domain_coverage(batch, num_source_domains)?;
    if cfg.n_paths == 0 {
        return Err(GdError::contract("n_paths must be >= 1"));
    }
    // The estimate is recomputed from the live parameters at every step;
    // it is never cached across steps.
    let gp = estimate_gp(net, cfg.allow_degenerate_gp)?;
    let noises: Vec<PathNoise> = (0..cfg.n_paths)
        .map(|_| draw_path_noise(&gp, noise_rng))
        .collect();
    let mut tape = Tape::new();
    let (loss, binds) = refine_forward(net, &mut tape, batch, cfg, &noises)?;
    tape.check_finite()?;
    tape.backward(loss)?;
    let loss_value = tape.scalar(loss);
    net.apply_grads(&tape, &binds);
    net.sgd_step_bound(&binds, lr, weight_decay)?;
    Ok(loss_value)
}

/// The refine batch must cover every source domain with exactly equal counts.
pub fn check_equal_domain_coverage(batch: &Batch, num_source_domains: usize) -> Result<()> {
    if num_source_domains == 0 {
        return Err(GdError::contract("no source domains"));
    }
    let mut counts = vec![0usize; num_source_domains];
    for &d in &batch.domains {
        if d >= num_source_domains {
            return Err(GdError::Index(format!(
                "batch domain {d} out of range for {num_source_domains} source domains"
            )));
        }
        counts[d] += 1;
    }
    if counts.contains(&0) || counts.windows(2).any(|w| w[0] != w[1]) {
        return Err(GdError::contract(format!(
            "refine batch must sample all source domains equally, got counts {counts:?}"
        )));
    }
    Ok(())
}
