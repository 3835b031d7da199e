//! Synthetic multi-domain retrieval data.
//!
//! Identities are latent prototypes drawn from a standard normal; each
//! domain applies its own diagonal affine style transform (per-channel scale
//! and shift) plus per-sample noise. Diagonal affine maps are exactly the
//! family BN statistics can capture, so a domain's optimal linearized BN
//! coefficients analytically invert its style map — which makes this a
//! faithful desk-scale probe of the mechanism. The held-out domain shares
//! the generative process but uses fresh identities and an unseen transform.

use serde::{Deserialize, Serialize};

use crate::error::{GdError, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub num_domains: usize,
    pub ids_per_domain: usize,
    pub samples_per_id: usize,
    pub dim: usize,
    /// Magnitude of the per-domain style transforms: per-channel scale
    /// exp(strength * n1) and shift strength * n2 with n ~ N(0,1). Zero
    /// makes every domain transform exactly the identity.
    pub shift_strength: f64,
    /// Per-sample noise standard deviation around the identity prototype.
    pub sample_noise: f64,
    pub held_out_ids: usize,
    pub held_out_samples_per_id: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            seed: 0,
            num_domains: 3,
            ids_per_domain: 32,
            samples_per_id: 16,
            dim: 32,
            shift_strength: 1.3,
            sample_noise: 0.65,
            held_out_ids: 32,
            held_out_samples_per_id: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Sample {
    pub domain: usize,
    pub identity: usize,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub samples: Vec<Sample>,
    /// Sorted, globally unique identity labels present in this dataset.
    pub ids: Vec<usize>,
}

impl DomainDataset {
    pub fn from_samples(domain_id: usize, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(GdError::contract("dataset must not be empty"));
        }
        if samples.iter().any(|s| s.domain != domain_id) {
            return Err(GdError::contract(
                "all samples must carry this dataset's domain id",
            ));
        }
        let mut ids: Vec<usize> = samples.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(DomainDataset {
            domain_id,
            samples,
            ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.samples[0].features.len()
    }

    /// Sample indices grouped by identity, identity-sorted.
    fn by_identity(&self) -> Vec<(usize, Vec<usize>)> {
        self.ids
            .iter()
            .map(|&id| {
                let idx = self
                    .samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.identity == id)
                    .map(|(i, _)| i)
                    .collect();
                (id, idx)
            })
            .collect()
    }
}

/// Query/gallery partition of one dataset.
#[derive(Debug, Clone)]
pub struct RetrievalSplit {
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl RetrievalSplit {
    /// First `queries_per_id` samples of each identity become queries, the
    /// rest gallery. Every query identity therefore appears in the gallery,
    /// and no sample lands in both.
    pub fn from_dataset(ds: &DomainDataset, queries_per_id: usize) -> Result<Self> {
        let mut query = Vec::new();
        let mut gallery = Vec::new();
        for (_, idx) in ds.by_identity() {
            if idx.len() <= queries_per_id {
                return Err(GdError::contract(format!(
                    "identity needs more than {queries_per_id} samples to split"
                )));
            }
            for (pos, &i) in idx.iter().enumerate() {
                if pos < queries_per_id {
                    query.push(ds.samples[i].clone());
                } else {
                    gallery.push(ds.samples[i].clone());
                }
            }
        }
        Ok(RetrievalSplit { query, gallery })
    }
}

/// A training batch: stacked features plus per-row identity and domain.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Batch> {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
        Ok(Batch {
            x: Tensor::from_rows(&rows)?,
            labels: samples.iter().map(|s| s.identity).collect(),
            domains: samples.iter().map(|s| s.domain).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Write a dataset as line-delimited JSON records
/// `{"domain":..,"identity":..,"features":[..]}`.
pub fn write_dataset_jsonl(path: &std::path::Path, ds: &DomainDataset) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in &ds.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset written by [`write_dataset_jsonl`]. f64 values survive the
/// JSON round trip exactly (shortest-roundtrip encoding).
pub fn read_dataset_jsonl(path: &std::path::Path) -> Result<DomainDataset> {
    use std::io::BufRead;
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str::<Sample>(&line)?);
    }
    let domain = samples
        .first()
        .map(|s| s.domain)
        .ok_or_else(|| GdError::contract("dataset file holds no samples"))?;
    DomainDataset::from_samples(domain, samples)
}

/// Per-channel diagonal affine style transform of one domain.
#[derive(Debug, Clone)]
struct StyleTransform {
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl StyleTransform {
    /// Inverse scales are drawn symmetrically around 1 across domains, so
    /// the normalization coefficients the process averages over are
    /// themselves centered — the Gaussian hyper-distribution the estimate
    /// models. (A log-normal scale draw would skew the inverses and bias
    /// every averaged path.)
    fn draw(dim: usize, strength: f64, rng: &mut Rng) -> Self {
        StyleTransform {
            scale: (0..dim)
                .map(|_| 1.0 / (1.0 + strength * rng.normal()).max(0.25))
                .collect(),
            shift: (0..dim).map(|_| strength * rng.normal()).collect(),
        }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.scale)
            .zip(&self.shift)
            .map(|((v, s), t)| s * v + t)
            .collect()
    }
}

pub struct GenOutput {
    pub sources: Vec<DomainDataset>,
    pub held_out: DomainDataset,
}

/// Generate K source domains plus one held-out domain. Pure function of the
/// spec: the same spec reproduces bitwise-identical datasets.
pub fn gen_domains(spec: &GeneratorSpec) -> Result<GenOutput> {
    if spec.num_domains < 2 {
        return Err(GdError::contract(format!(
            "need K >= 2 source domains, got {}",
            spec.num_domains
        )));
    }
    if spec.dim < 2 {
        return Err(GdError::contract(format!(
            "need dim >= 2, got {}",
            spec.dim
        )));
    }
    if spec.ids_per_domain == 0
        || spec.samples_per_id == 0
        || spec.held_out_ids == 0
        || spec.held_out_samples_per_id == 0
    {
        return Err(GdError::contract("counts must be positive"));
    }

    let mut proto_rng = Rng::with_stream(spec.seed, streams::GEN);
    let total_source_ids = spec.num_domains * spec.ids_per_domain;
    let prototypes: Vec<Vec<f64>> = (0..total_source_ids + spec.held_out_ids)
        .map(|_| proto_rng.normal_vec(spec.dim))
        .collect();

    let gen_one =
        |domain: usize, id_range: std::ops::Range<usize>, spi: usize| -> Result<DomainDataset> {
            // Separate per-domain streams allow parallel generation and keep
            // one domain's content independent of the others.
            let mut style_rng =
                Rng::with_stream(spec.seed, streams::GEN ^ ((0x51 + domain as u64) << 8));
            let style = StyleTransform::draw(spec.dim, spec.shift_strength, &mut style_rng);
            let mut noise_rng =
                Rng::with_stream(spec.seed, streams::GEN ^ ((0xA3 + domain as u64) << 16));
            let mut samples = Vec::with_capacity(id_range.len() * spi);
            for id in id_range {
                for _ in 0..spi {
                    // Per-sample noise perturbs the latent point before the
                    // style map: every domain renders the same underlying
                    // variability through its own transform.
                    let z: Vec<f64> = prototypes[id]
                        .iter()
                        .map(|p| p + spec.sample_noise * noise_rng.normal())
                        .collect();
                    samples.push(Sample {
                        domain,
                        identity: id,
                        features: style.apply(&z),
                    });
                }
            }
            DomainDataset::from_samples(domain, samples)
        };

    let mut sources = Vec::with_capacity(spec.num_domains);
    for k in 0..spec.num_domains {
        let lo = k * spec.ids_per_domain;
        sources.push(gen_one(
            k,
            lo..lo + spec.ids_per_domain,
            spec.samples_per_id,
        )?);
    }
    let held_out = gen_one(
        spec.num_domains,
        total_source_ids..total_source_ids + spec.held_out_ids,
        spec.held_out_samples_per_id,
    )?;
    Ok(GenOutput { sources, held_out })
}

/// P distinct identities with Q instances each from a single domain.
pub fn sample_pk_batch(ds: &DomainDataset, p: usize, q: usize, rng: &mut Rng) -> Result<Batch> {
    if p < 1 || q < 1 {
        return Err(GdError::contract("P and Q must be >= 1"));
    }
    let groups = ds.by_identity();
    if groups.len() < p {
        return Err(GdError::contract(format!(
            "dataset has {} identities, need {p}",
            groups.len()
        )));
    }
    if groups.iter().any(|(_, idx)| idx.len() < q) {
        return Err(GdError::contract(format!(
            "every identity needs at least {q} samples"
        )));
    }
    let chosen = rng.distinct_indices(groups.len(), p);
    let mut picked: Vec<&Sample> = Vec::with_capacity(p * q);
    for gi in chosen {
        let (_, idx) = &groups[gi];
        for si in rng.distinct_indices(idx.len(), q) {
            picked.push(&ds.samples[idx[si]]);
        }
    }
    Batch::from_samples(&picked)
}

/// P distinct identities with Q instances each, the identities drawn from
/// the union of all datasets — the batch composition of hybrid-dataset
/// training, where a batch freely mixes domains.
pub fn sample_pk_batch_union(
    datasets: &[DomainDataset],
    p: usize,
    q: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    if p < 1 || q < 1 {
        return Err(GdError::contract("P and Q must be >= 1"));
    }
    // (dataset index, identity, sample indices)
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (di, ds) in datasets.iter().enumerate() {
        for (_, idx) in ds.by_identity() {
            groups.push((di, idx));
        }
    }
    if groups.len() < p {
        return Err(GdError::contract(format!(
            "union has {} identities, need {p}",
            groups.len()
        )));
    }
    let chosen = rng.distinct_indices(groups.len(), p);
    let mut picked: Vec<&Sample> = Vec::with_capacity(p * q);
    for gi in chosen {
        let (di, idx) = &groups[gi];
        if idx.len() < q {
            return Err(GdError::contract(format!(
                "every identity needs at least {q} samples"
            )));
        }
        for si in rng.distinct_indices(idx.len(), q) {
            picked.push(&datasets[*di].samples[idx[si]]);
        }
    }
    Batch::from_samples(&picked)
}

/// A batch spanning all domains with exactly `total / K` samples per domain,
/// identity-balanced within each domain's quota: identities are drawn in
/// pairs so triplet mining always finds positives.
pub fn sample_mixed_batch(
    datasets: &[DomainDataset],
    total: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    let k = datasets.len();
    if k == 0 {
        return Err(GdError::contract("no datasets"));
    }
    if !total.is_multiple_of(k) {
        return Err(GdError::contract(format!(
            "mixed batch size {total} not divisible by {k} domains"
        )));
    }
    let quota = total / k;
    if quota < 2 {
        return Err(GdError::contract(format!(
            "per-domain quota {quota} too small for identity pairs"
        )));
    }
    let mut picked: Vec<&Sample> = Vec::with_capacity(total);
    for ds in datasets {
        let groups = ds.by_identity();
        // 2 instances per identity; one identity absorbs an odd remainder.
        let n_ids = quota / 2;
        if groups.len() < n_ids {
            return Err(GdError::contract(format!(
                "domain {} has {} identities, need {n_ids}",
                ds.domain_id,
                groups.len()
            )));
        }
        let chosen = rng.distinct_indices(groups.len(), n_ids);
        let mut remaining = quota;
        for (slot, gi) in chosen.iter().enumerate() {
            let (_, idx) = &groups[*gi];
            let want = if slot == 0 {
                remaining - 2 * (n_ids - 1)
            } else {
                2
            };
            if idx.len() < want {
                return Err(GdError::contract(format!(
                    "identity needs at least {want} samples for the mixed batch"
                )));
            }
            for si in rng.distinct_indices(idx.len(), want) {
                picked.push(&ds.samples[idx[si]]);
            }
            remaining -= want;
        }
    }
    Batch::from_samples(&picked)
}
