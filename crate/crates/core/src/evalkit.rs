//! Retrieval evaluation: mAP and CMC, single-path / mean-path / ensemble
//! evaluation with forward-pass counting and wall-clock timing, and the
//! lambda sweep and path-spread harnesses.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{DomainDataset, RetrievalSplit, Sample};
use crate::error::{GdError, Result};
use crate::gdnorm::{
    draw_path_noise, mean_path, sample_path_with_noise, BnPath, GpEstimate, NoiseScale,
};
use crate::model::{ArchConfig, EmbedNet};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

/// Ranking metrics plus per-query detail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapCmc {
    pub map: f64,
    /// cmc[k-1] = fraction of queries with a correct match in the top k.
    pub cmc: Vec<f64>,
    pub per_query_ap: Vec<f64>,
}

impl MapCmc {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

/// Metrics plus inference-cost bookkeeping for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub per_query_ap: Vec<f64>,
    /// Wall time of the full evaluation.
    pub total_seconds: f64,
    /// Wall time divided by the number of data batches (single-pass count).
    pub seconds_per_batch: f64,
    /// Network forwards issued; one per batch for a single path, K per
    /// batch for a K-path ensemble.
    pub forward_passes: u64,
    /// Number of data batches in a single pass over query + gallery.
    pub batches: u64,
}

impl RetrievalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    fn from_metrics(m: MapCmc, total_seconds: f64, forward_passes: u64, batches: u64) -> Self {
        RetrievalResult {
            map: m.map,
            cmc: m.cmc,
            per_query_ap: m.per_query_ap,
            total_seconds,
            seconds_per_batch: total_seconds / batches.max(1) as f64,
            forward_passes,
            batches,
        }
    }
}

/// Euclidean distances, query rows x gallery columns.
pub fn distance_matrix(query: &Tensor, gallery: &Tensor) -> Result<Vec<f64>> {
    if query.shape().len() != 2 || gallery.shape().len() != 2 || query.cols() != gallery.cols() {
        return Err(GdError::dimension(
            "distance_matrix",
            format!("{:?} vs {:?}", query.shape(), gallery.shape()),
        ));
    }
    let (nq, ng, e) = (query.rows(), gallery.rows(), query.cols());
    let mut out = vec![0.0; nq * ng];
    for i in 0..nq {
        let qi = &query.values()[i * e..(i + 1) * e];
        for j in 0..ng {
            let gj = &gallery.values()[j * e..(j + 1) * e];
            let mut s = 0.0;
            for k in 0..e {
                let d = qi[k] - gj[k];
                s += d * d;
            }
            out[i * ng + j] = s.sqrt();
        }
    }
    Ok(out)
}

/// mAP / CMC from a precomputed distance matrix. Ranking breaks distance
/// ties by gallery index (stable, documented because AP depends on tie
/// order). AP averages precision at each hit over the number of relevant
/// gallery items; CMC@k is the fraction of queries with a correct match in
/// the top k.
pub fn map_cmc_from_distances(
    dist: &[f64],
    query_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<MapCmc> {
    let nq = query_ids.len();
    let ng = gallery_ids.len();
    if dist.len() != nq * ng {
        return Err(GdError::dimension(
            "map_cmc",
            format!("distance matrix {} vs {nq}x{ng}", dist.len()),
        ));
    }
    if nq == 0 || ng == 0 {
        return Err(GdError::Protocol("empty query or gallery".into()));
    }
    for qid in query_ids {
        if !gallery_ids.contains(qid) {
            return Err(GdError::Protocol(format!(
                "query identity {qid} absent from gallery"
            )));
        }
    }
    let mut per_query_ap = Vec::with_capacity(nq);
    let mut first_hit_counts = vec![0usize; ng];
    for (qi, qid) in query_ids.iter().enumerate() {
        let row = &dist[qi * ng..(qi + 1) * ng];
        let mut order: Vec<usize> = (0..ng).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let relevant = gallery_ids.iter().filter(|g| *g == qid).count();
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first_hit = None;
        for (rank0, &gi) in order.iter().enumerate() {
            if gallery_ids[gi] == *qid {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank0);
                }
            }
        }
        per_query_ap.push(ap / relevant as f64);
        first_hit_counts[first_hit.expect("relevant > 0 guarantees a hit")] += 1;
    }
    let mut cmc = Vec::with_capacity(ng);
    let mut cum = 0usize;
    for count in first_hit_counts {
        cum += count;
        cmc.push(cum as f64 / nq as f64);
    }
    let map = per_query_ap.iter().sum::<f64>() / nq as f64;
    Ok(MapCmc {
        map,
        cmc,
        per_query_ap,
    })
}

/// Rank gallery by Euclidean distance per query and score.
pub fn compute_map_cmc(
    query_emb: &Tensor,
    query_ids: &[usize],
    gallery_emb: &Tensor,
    gallery_ids: &[usize],
) -> Result<MapCmc> {
    if query_emb.rows() != query_ids.len() || gallery_emb.rows() != gallery_ids.len() {
        return Err(GdError::dimension(
            "compute_map_cmc",
            "id count vs embedding rows",
        ));
    }
    let dist = distance_matrix(query_emb, gallery_emb)?;
    map_cmc_from_distances(&dist, query_ids, gallery_ids)
}

fn stack_features(samples: &[Sample]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    Tensor::from_rows(&rows)
}

/// Embed samples along one path in batches, incrementing `forwards` once
/// per network forward.
pub fn embed_split(
    net: &EmbedNet,
    samples: &[Sample],
    path: &BnPath,
    batch_size: usize,
    forwards: &mut u64,
) -> Result<Tensor> {
    let n = samples.len();
    let e = net.arch().embed_dim;
    let mut values = Vec::with_capacity(n * e);
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let x = stack_features(&samples[start..end])?;
        let emb = net.embed_with_path(&x, path)?;
        values.extend_from_slice(emb.values());
        *forwards += 1;
        start = end;
    }
    Tensor::new(vec![n, e], values)
}

fn batch_count(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// Score one fixed path on a retrieval split, timing the run.
pub fn eval_path(
    net: &EmbedNet,
    path: &BnPath,
    split: &RetrievalSplit,
    batch_size: usize,
) -> Result<RetrievalResult> {
    let mut forwards = 0u64;
    let start = Instant::now();
    let qe = embed_split(net, &split.query, path, batch_size, &mut forwards)?;
    let ge = embed_split(net, &split.gallery, path, batch_size, &mut forwards)?;
    let qids: Vec<usize> = split.query.iter().map(|s| s.identity).collect();
    let gids: Vec<usize> = split.gallery.iter().map(|s| s.identity).collect();
    let dist = distance_matrix(&qe, &ge)?;
    let metrics = map_cmc_from_distances(&dist, &qids, &gids)?;
    let total = start.elapsed().as_secs_f64();
    let batches =
        batch_count(split.query.len(), batch_size) + batch_count(split.gallery.len(), batch_size);
    Ok(RetrievalResult::from_metrics(
        metrics, total, forwards, batches,
    ))
}

/// Single forward pass per batch with the debiased mean path.
pub fn eval_mean_path(
    net: &EmbedNet,
    gp: &GpEstimate,
    split: &RetrievalSplit,
    batch_size: usize,
) -> Result<RetrievalResult> {
    eval_path(net, &mean_path(gp), split, batch_size)
}

/// Evaluation through one source domain's linearized BN parameters.
pub fn eval_single_path(
    net: &EmbedNet,
    domain: usize,
    split: &RetrievalSplit,
    batch_size: usize,
) -> Result<RetrievalResult> {
    let path = net.linearize_path(domain)?;
    eval_path(net, &path, split, batch_size)
}

/// How per-path outputs are combined in the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Weighted sum of per-path distance matrices (the retrieval "output"
    /// is the ranking score, so distances are what the mixture combines).
    #[default]
    DistanceWeighted,
    /// Weighted average of embeddings before a single distance computation.
    EmbeddingAverage,
}

/// One path per domain plus mixture weights.
#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    pub paths: Vec<BnPath>,
    pub weights: Vec<f64>,
}

impl EnsembleSpec {
    /// Uniform 1/K weights over the model's domain paths.
    pub fn uniform(net: &EmbedNet) -> Result<Self> {
        let k = net.num_bn_domains();
        let paths = (0..k)
            .map(|d| net.linearize_path(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleSpec {
            paths,
            weights: vec![1.0 / k as f64; k],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.is_empty() || self.paths.len() != self.weights.len() {
            return Err(GdError::contract(format!(
                "{} paths vs {} weights",
                self.paths.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| *w < 0.0) {
            return Err(GdError::contract("ensemble weights must be nonnegative"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GdError::contract(format!(
                "ensemble weights must sum to 1 within 1e-9, got {sum}"
            )));
        }
        Ok(())
    }
}

/// K forward passes per batch, outputs combined per `fusion`.
pub fn eval_ensemble(
    net: &EmbedNet,
    spec: &EnsembleSpec,
    split: &RetrievalSplit,
    batch_size: usize,
    fusion: FusionMode,
) -> Result<RetrievalResult> {
    spec.validate()?;
    let qids: Vec<usize> = split.query.iter().map(|s| s.identity).collect();
    let gids: Vec<usize> = split.gallery.iter().map(|s| s.identity).collect();
    let mut forwards = 0u64;
    let start = Instant::now();
    let metrics = match fusion {
        FusionMode::DistanceWeighted => {
            let mut fused: Option<Vec<f64>> = None;
            for (path, w) in spec.paths.iter().zip(&spec.weights) {
                let qe = embed_split(net, &split.query, path, batch_size, &mut forwards)?;
                let ge = embed_split(net, &split.gallery, path, batch_size, &mut forwards)?;
                let dist = distance_matrix(&qe, &ge)?;
                match &mut fused {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&dist) {
                            *a += w * d;
                        }
                    }
                    None => fused = Some(dist.iter().map(|d| w * d).collect()),
                }
            }
            map_cmc_from_distances(&fused.expect("paths nonempty"), &qids, &gids)?
        }
        FusionMode::EmbeddingAverage => {
            let e = net.arch().embed_dim;
            let mut q_acc = vec![0.0; split.query.len() * e];
            let mut g_acc = vec![0.0; split.gallery.len() * e];
            for (path, w) in spec.paths.iter().zip(&spec.weights) {
                let qe = embed_split(net, &split.query, path, batch_size, &mut forwards)?;
                let ge = embed_split(net, &split.gallery, path, batch_size, &mut forwards)?;
                for (a, v) in q_acc.iter_mut().zip(qe.values()) {
                    *a += w * v;
                }
                for (a, v) in g_acc.iter_mut().zip(ge.values()) {
                    *a += w * v;
                }
            }
            let qe = Tensor::new(vec![split.query.len(), e], q_acc)?;
            let ge = Tensor::new(vec![split.gallery.len(), e], g_acc)?;
            let dist = distance_matrix(&qe, &ge)?;
            map_cmc_from_distances(&dist, &qids, &gids)?
        }
    };
    let total = start.elapsed().as_secs_f64();
    let batches =
        batch_count(split.query.len(), batch_size) + batch_count(split.gallery.len(), batch_size);
    Ok(RetrievalResult::from_metrics(
        metrics, total, forwards, batches,
    ))
}

/// Spread of sampled-path scores at one sampling ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpreadPoint {
    pub lambda: f64,
    pub min_map: f64,
    pub mean_map: f64,
    pub max_map: f64,
    pub mean_path_map: f64,
    pub n_paths: usize,
}

impl SpreadPoint {
    pub fn width(&self) -> f64 {
        self.max_map - self.min_map
    }
}

/// For a fixed trained model, sample `n_paths` paths at each lambda and
/// report the min/mean/max mAP against the mean path. The same noise draws
/// are reused across lambdas (common random numbers), so the spread at one
/// ratio is directly comparable to the next.
#[allow(clippy::too_many_arguments)]
pub fn path_spread(
    net: &EmbedNet,
    gp: &GpEstimate,
    split: &RetrievalSplit,
    lambdas: &[f64],
    n_paths: usize,
    noise_scale: NoiseScale,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<SpreadPoint>> {
    if lambdas.is_empty() || n_paths == 0 {
        return Err(GdError::contract(
            "spread needs a nonempty grid and n_paths >= 1",
        ));
    }
    let mean_path_map = eval_path(net, &mean_path(gp), split, batch_size)?.map;
    let mut rng = Rng::with_stream(seed, streams::EVAL);
    let noises: Vec<_> = (0..n_paths)
        .map(|_| draw_path_noise(gp, &mut rng))
        .collect();
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut maps = Vec::with_capacity(n_paths);
        for noise in &noises {
            let path = sample_path_with_noise(gp, lambda, noise_scale, noise)?;
            maps.push(eval_path(net, &path, split, batch_size)?.map);
        }
        let min = maps.iter().copied().fold(f64::INFINITY, f64::min);
        let max = maps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        out.push(SpreadPoint {
            lambda,
            min_map: min,
            mean_map: mean,
            max_map: max,
            mean_path_map,
            n_paths,
        });
    }
    Ok(out)
}

/// One row of the training-time lambda sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub map: f64,
    pub rank1: f64,
}

/// Train one model per lambda in the grid and score its mean path on the
/// held-out split.
pub fn sweep_lambda(
    arch: &ArchConfig,
    datasets: &[DomainDataset],
    split: &RetrievalSplit,
    base_cfg: &TrainConfig,
    grid: &[f64],
    batch_size: usize,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(GdError::contract("lambda grid must be nonempty"));
    }
    let num_ids: usize = datasets.iter().map(|d| d.ids.len()).sum();
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut cfg = base_cfg.clone();
        cfg.lambda = lambda;
        let mut init_rng = Rng::with_stream(cfg.seed, streams::INIT);
        let mut net = EmbedNet::new(
            arch.clone(),
            datasets.len(),
            num_ids,
            cfg.bn_eps,
            cfg.bn_momentum,
            &mut init_rng,
        )?;
        train(&mut net, datasets, &cfg)?;
        let gp = crate::gdnorm::estimate_gp(&net, cfg.allow_degenerate_gp)?;
        let res = eval_mean_path(&net, &gp, split, batch_size)?;
        rows.push(SweepRow {
            lambda,
            map: res.map,
            rank1: res.rank1(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_domains, GeneratorSpec, RetrievalSplit};
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn ap_precision_at_hit_example() {
        // relevance down the ranking [1, 0, 1] -> AP = (1/1 + 2/3) / 2
        let dist = vec![0.1, 0.2, 0.3];
        let m = map_cmc_from_distances(&dist, &[7], &[7, 1, 7]).unwrap();
        assert_eq!(m.map, (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(m.cmc[0], 1.0);
    }

    #[test]
    fn perfect_embedding_scores_one() {
        // queries coincide with their gallery matches, far from the rest
        let q = Tensor::from_rows(&[vec![0.0, 0.0], vec![10.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![0.0, 0.1], vec![10.0, 0.1], vec![5.0, 9.0]]).unwrap();
        let m = compute_map_cmc(&q, &[0, 1], &g, &[0, 1, 2]).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.cmc[0], 1.0);
    }

    #[test]
    fn query_id_absent_from_gallery_is_protocol_error() {
        let q = Tensor::from_rows(&[vec![0.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            compute_map_cmc(&q, &[3], &g, &[4]),
            Err(GdError::Protocol(_))
        ));
    }

    /// Independent exhaustive oracle: walk the full ranking, averaging
    /// precision at every relevant position; first-hit histogram for CMC.
    fn oracle_map_cmc(q: &Tensor, qids: &[usize], g: &Tensor, gids: &[usize]) -> (f64, Vec<f64>) {
        let (nq, ng, e) = (q.rows(), g.rows(), q.cols());
        let mut aps = Vec::new();
        let mut first_hits = vec![0usize; ng];
        for (i, qid) in qids.iter().enumerate() {
            let mut order: Vec<usize> = (0..ng).collect();
            let dist = |j: usize| -> f64 {
                (0..e)
                    .map(|k| {
                        let d = q.values()[i * e + k] - g.values()[j * e + k];
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            };
            order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
            let mut hits = 0;
            let mut ap = 0.0;
            let mut first = None;
            for (rank, &j) in order.iter().enumerate() {
                if gids[j] == *qid {
                    hits += 1;
                    ap += hits as f64 / (rank + 1) as f64;
                    first.get_or_insert(rank);
                }
            }
            let total = gids.iter().filter(|x| **x == qids[i]).count();
            aps.push(ap / total as f64);
            first_hits[first.unwrap()] += 1;
        }
        let mut cmc = Vec::new();
        let mut cum = 0;
        for c in first_hits {
            cum += c;
            cmc.push(cum as f64 / nq as f64);
        }
        (aps.iter().sum::<f64>() / nq as f64, cmc)
    }

    /// Random small instances match the exhaustive oracle exactly; CMC is
    /// monotone on every one of them.
    #[test]
    fn matches_exhaustive_oracle_exactly() {
        let mut rng = Rng::new(314);
        for trial in 0..100 {
            let nq = 1 + rng.index(10);
            let ng_extra = rng.index(10);
            let e = 2 + rng.index(4);
            // gallery covers every query id, plus distractors
            let qids: Vec<usize> = (0..nq).map(|_| rng.index(5)).collect();
            let mut gids: Vec<usize> = qids.clone();
            for _ in 0..ng_extra {
                gids.push(rng.index(8));
            }
            let q = Tensor::randn(vec![nq, e], 1.0, &mut rng);
            let g = Tensor::randn(vec![gids.len(), e], 1.0, &mut rng);
            let got = compute_map_cmc(&q, &qids, &g, &gids).unwrap();
            let (want_map, want_cmc) = oracle_map_cmc(&q, &qids, &g, &gids);
            assert_eq!(got.map, want_map, "trial {trial}: mAP");
            assert_eq!(got.cmc, want_cmc, "trial {trial}: CMC");
            for w in got.cmc.windows(2) {
                assert!(w[0] <= w[1], "CMC must be nondecreasing");
            }
            assert!(*got.cmc.last().unwrap() <= 1.0 + 1e-15);
            // map equals the mean of per-query APs by construction
            let mean_ap = got.per_query_ap.iter().sum::<f64>() / got.per_query_ap.len() as f64;
            assert_eq!(got.map, mean_ap);
        }
    }

    /// Metrics are invariant under a joint isometry of query and gallery.
    #[test]
    fn isometry_invariance() {
        let mut rng = Rng::new(2718);
        let e = 3;
        let q = Tensor::randn(vec![6, e], 1.0, &mut rng);
        let g = Tensor::randn(vec![12, e], 1.0, &mut rng);
        let qids = vec![0, 1, 2, 0, 1, 2];
        let gids = vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5];
        let base = compute_map_cmc(&q, &qids, &g, &gids).unwrap();

        // Rotation in the (0,1) plane plus a translation.
        let theta: f64 = 0.83;
        let translate = [0.7, -1.2, 0.4];
        let apply = |t: &Tensor| -> Tensor {
            let rows: Vec<Vec<f64>> = (0..t.rows())
                .map(|r| {
                    let v = &t.values()[r * e..(r + 1) * e];
                    vec![
                        v[0] * theta.cos() - v[1] * theta.sin() + translate[0],
                        v[0] * theta.sin() + v[1] * theta.cos() + translate[1],
                        v[2] + translate[2],
                    ]
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let moved = compute_map_cmc(&apply(&q), &qids, &apply(&g), &gids).unwrap();
        assert_eq!(base.map, moved.map);
        assert_eq!(base.cmc, moved.cmc);
    }

    fn trained_free_net(domains: usize) -> EmbedNet {
        let mut rng = Rng::new(55);
        let mut net = EmbedNet::new(
            ArchConfig {
                input_dim: 8,
                hidden: vec![10],
                embed_dim: 6,
            },
            domains,
            12,
            1e-5,
            0.9,
            &mut rng,
        )
        .unwrap();
        // unique per-domain statistics
        for layer in net.dsbn.iter_mut() {
            for d in 0..domains {
                let set = layer.set_mut(d).unwrap();
                for j in 0..set.gamma.numel() {
                    set.gamma.values_mut()[j] = 0.8 + 0.3 * d as f64 + 0.02 * j as f64;
                    set.running_mean[j] = 0.1 * d as f64;
                    set.running_var[j] = 0.5 + 0.2 * d as f64;
                }
                set.batches_seen = 1;
            }
        }
        net
    }

    fn small_split() -> RetrievalSplit {
        let out = gen_domains(&GeneratorSpec {
            seed: 3,
            num_domains: 2,
            ids_per_domain: 6,
            samples_per_id: 4,
            dim: 8,
            held_out_ids: 6,
            held_out_samples_per_id: 4,
            ..GeneratorSpec::default()
        })
        .unwrap();
        RetrievalSplit::from_dataset(&out.held_out, 1).unwrap()
    }

    #[test]
    fn mean_path_issues_one_forward_per_batch() {
        let net = trained_free_net(3);
        let split = small_split();
        let gp = crate::gdnorm::estimate_gp(&net, false).unwrap();
        let res = eval_mean_path(&net, &gp, &split, 4).unwrap();
        assert_eq!(res.forward_passes, res.batches);
        let expect = (split.query.len().div_ceil(4) + split.gallery.len().div_ceil(4)) as u64;
        assert_eq!(res.batches, expect);
    }

    #[test]
    fn ensemble_issues_k_forwards_per_batch() {
        let net = trained_free_net(3);
        let split = small_split();
        let spec = EnsembleSpec::uniform(&net).unwrap();
        let res = eval_ensemble(&net, &spec, &split, 4, FusionMode::DistanceWeighted).unwrap();
        assert_eq!(res.forward_passes, 3 * res.batches);
    }

    #[test]
    fn ensemble_all_weight_on_one_domain_equals_single_path() {
        let net = trained_free_net(3);
        let split = small_split();
        for k in 0..3 {
            let mut weights = vec![0.0; 3];
            weights[k] = 1.0;
            let spec = EnsembleSpec {
                paths: (0..3).map(|d| net.linearize_path(d).unwrap()).collect(),
                weights,
            };
            let ens = eval_ensemble(&net, &spec, &split, 4, FusionMode::DistanceWeighted).unwrap();
            let single = eval_single_path(&net, k, &split, 4).unwrap();
            assert_eq!(ens.map, single.map, "domain {k}");
            assert_eq!(ens.cmc, single.cmc, "domain {k}");
        }
    }

    #[test]
    fn ensemble_of_identical_paths_equals_single_path() {
        let net = trained_free_net(2);
        let split = small_split();
        let p = net.linearize_path(1).unwrap();
        let spec = EnsembleSpec {
            paths: vec![p.clone(), p.clone(), p],
            weights: vec![0.2, 0.5, 0.3],
        };
        let ens = eval_ensemble(&net, &spec, &split, 4, FusionMode::DistanceWeighted).unwrap();
        let single = eval_single_path(&net, 1, &split, 4).unwrap();
        assert!((ens.map - single.map).abs() < 1e-12);
    }

    #[test]
    fn ensemble_weight_validation() {
        let net = trained_free_net(2);
        let bad = EnsembleSpec {
            paths: (0..2).map(|d| net.linearize_path(d).unwrap()).collect(),
            weights: vec![0.7, 0.7],
        };
        assert!(matches!(bad.validate(), Err(GdError::Contract(_))));
        let neg = EnsembleSpec {
            paths: (0..2).map(|d| net.linearize_path(d).unwrap()).collect(),
            weights: vec![1.5, -0.5],
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn identical_domains_make_all_evals_agree() {
        let mut rng = Rng::new(77);
        let net = EmbedNet::new(
            ArchConfig {
                input_dim: 8,
                hidden: vec![10],
                embed_dim: 6,
            },
            3,
            12,
            1e-5,
            0.9,
            &mut rng,
        )
        .unwrap();
        let split = small_split();
        let gp = crate::gdnorm::estimate_gp(&net, false).unwrap();
        let mean = eval_mean_path(&net, &gp, &split, 4).unwrap();
        for k in 0..3 {
            let single = eval_single_path(&net, k, &split, 4).unwrap();
            assert!((mean.map - single.map).abs() <= 1e-12);
        }
    }

    #[test]
    fn eval_is_deterministic_per_checkpoint() {
        let net = trained_free_net(3);
        let split = small_split();
        let gp = crate::gdnorm::estimate_gp(&net, false).unwrap();
        let a = eval_mean_path(&net, &gp, &split, 4).unwrap();
        let b = eval_mean_path(&net, &gp, &split, 4).unwrap();
        assert_eq!(a.map, b.map);
        assert_eq!(a.cmc, b.cmc);
    }

    #[test]
    fn spread_at_lambda_zero_has_zero_width() {
        let net = trained_free_net(3);
        let split = small_split();
        let gp = crate::gdnorm::estimate_gp(&net, false).unwrap();
        let pts = path_spread(
            &net,
            &gp,
            &split,
            &[0.0, 0.3],
            5,
            NoiseScale::Variance,
            9,
            8,
        )
        .unwrap();
        assert_eq!(pts[0].width(), 0.0);
        assert_eq!(pts[0].min_map, pts[0].mean_path_map);
        assert!(pts[1].n_paths == 5);
    }

    #[test]
    fn single_path_out_of_range_is_index_error() {
        let net = trained_free_net(2);
        let split = small_split();
        assert!(matches!(
            eval_single_path(&net, 5, &split, 4),
            Err(GdError::Index(_))
        ));
    }

    proptest! {
        /// CMC is monotone nondecreasing for arbitrary random evaluations.
        #[test]
        fn cmc_monotone(seed in 0u64..300) {
            let mut rng = Rng::new(seed);
            let nq = 1 + rng.index(6);
            let e = 2;
            let qids: Vec<usize> = (0..nq).map(|_| rng.index(4)).collect();
            let mut gids = qids.clone();
            for _ in 0..rng.index(8) {
                gids.push(rng.index(6));
            }
            let q = Tensor::randn(vec![nq, e], 1.0, &mut rng);
            let g = Tensor::randn(vec![gids.len(), e], 1.0, &mut rng);
            let m = compute_map_cmc(&q, &qids, &g, &gids).unwrap();
            for w in m.cmc.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!(m.map >= 0.0 && m.map <= 1.0 + 1e-12);
        }
    }
}
