//! Synthetic regulatory world with a planted network, planted regulatory bins
//! and simulated perturbation cells.
//!
//! Cell state on the log2 scale is single-step: every gene `i` carries an
//! activity `u_i` (natural variation, lowered by `s` when its locus is
//! knocked down). Gene `j` then sits at
//! `base_j + u_j·|grn[j,j]| - Σ_{i≠j} u_i·grn[i,j] + module program + noise`,
//! so a knockdown of depth `s` shifts the mean profile by `s·grn[p,·]`.
//! Noise genes outside the network add a random shift per perturbation on
//! top of their per-cell noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CdtError, Result};
use crate::tensor::Tensor;

/// Regulatory marks, in reporting order.
pub const MARKS: [&str; 5] = ["DNase", "CTCF", "H3K27ac", "H3K4me1", "H3K4me3"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_genes: usize,
    pub n_bins: usize,
    pub embed_dim: usize,
    pub hub_count: usize,
    pub targets_per_hub: usize,
    /// Size of the co-regulated module.
    pub module_size: usize,
    /// Hubs feeding every module member.
    pub module_upstream: usize,
    pub module_edge_prob: f64,
    pub background_edge_prob: f64,
    /// Genes with a TSS locus that get perturbation cells, hubs included.
    pub n_perturbed: usize,
    pub n_holdout: usize,
    pub n_snp_loci: usize,
    pub include_snps: bool,
    pub cells_per_gene: usize,
    pub cells_per_snp: usize,
    pub n_ntc: usize,
    /// Extra genes with irreproducible, high-variance expression.
    pub n_noise_genes: usize,
    pub activity_sd: f64,
    /// Natural activity spread of hub genes.
    pub hub_activity_sd: f64,
    pub module_program_sd: f64,
    pub noise_sd: f64,
    /// Per-cell log2 noise of noise genes.
    pub noise_gene_sd: f64,
    /// Per-perturbation log2 shift of noise genes, unrelated to the network
    /// or the DNA window.
    pub noise_gene_shift_sd: f64,
    pub library_sd: f64,
    /// Log2 mean expression spread across genes.
    pub baseline_sd: f64,
    /// Knockdown depth is drawn from `1 ± strength_spread`.
    pub strength_spread: f64,
    /// Planted-bin signal amplitude relative to background bins.
    pub signal_to_noise: f64,
    pub locus_jitter: f64,
    pub offtarget_peak_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            n_genes: 200,
            n_bins: 64,
            embed_dim: 96,
            hub_count: 5,
            targets_per_hub: 20,
            module_size: 16,
            module_upstream: 2,
            module_edge_prob: 0.3,
            background_edge_prob: 0.01,
            n_perturbed: 30,
            n_holdout: 5,
            n_snp_loci: 8,
            include_snps: true,
            cells_per_gene: 24,
            cells_per_snp: 12,
            n_ntc: 200,
            n_noise_genes: 0,
            activity_sd: 0.15,
            hub_activity_sd: 0.3,
            module_program_sd: 0.15,
            noise_sd: 0.15,
            noise_gene_sd: 0.5,
            noise_gene_shift_sd: 1.0,
            library_sd: 0.2,
            baseline_sd: 0.7,
            strength_spread: 0.4,
            signal_to_noise: 3.0,
            locus_jitter: 0.1,
            offtarget_peak_rate: 0.03,
        }
    }
}

impl WorldConfig {
    pub fn total_genes(&self) -> usize {
        self.n_genes + self.n_noise_genes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CdtError::Config(m));
        if self.n_genes < 2 || self.n_bins < 16 || self.embed_dim < 1 {
            return bad("world needs n_genes >= 2, n_bins >= 16, embed_dim >= 1".into());
        }
        let reserved = self.hub_count * (self.targets_per_hub + 1) + self.module_size;
        if reserved >= self.n_genes {
            return bad(format!(
                "{} hubs x {} targets plus a module of {} do not fit in {} genes",
                self.hub_count, self.targets_per_hub, self.module_size, self.n_genes
            ));
        }
        if self.module_size > 0 && self.module_upstream > self.hub_count.saturating_sub(1) {
            return bad("module_upstream must leave the held-out hub out".into());
        }
        if self.n_perturbed < self.hub_count || self.n_perturbed > self.n_genes {
            return bad(format!(
                "n_perturbed {} must cover the {} hubs and fit in {} genes",
                self.n_perturbed, self.hub_count, self.n_genes
            ));
        }
        if self.n_holdout == 0 || self.n_holdout >= self.n_perturbed {
            return bad("n_holdout must be in [1, n_perturbed)".into());
        }
        if self.hub_count == 0 {
            return bad("at least one hub is needed for the held-out hub".into());
        }
        if self.cells_per_gene < 2 || self.n_ntc < 2 {
            return bad("need >= 2 cells per gene and >= 2 NTC cells".into());
        }
        for (name, v) in [
            ("module_edge_prob", self.module_edge_prob),
            ("background_edge_prob", self.background_edge_prob),
            ("offtarget_peak_rate", self.offtarget_peak_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be a probability, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.strength_spread) {
            return bad("strength_spread must be in [0, 1)".into());
        }
        for (name, v) in [
            ("activity_sd", self.activity_sd),
            ("hub_activity_sd", self.hub_activity_sd),
            ("module_program_sd", self.module_program_sd),
            ("noise_sd", self.noise_sd),
            ("noise_gene_sd", self.noise_gene_sd),
            ("noise_gene_shift_sd", self.noise_gene_shift_sd),
            ("library_sd", self.library_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite nonnegative sd, got {v}"));
            }
        }
        if self.signal_to_noise <= 0.0 {
            return bad("signal_to_noise must be positive".into());
        }
        Ok(())
    }
}

/// Derives an independent generator for `(seed, stream, index)`.
pub fn sub_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let mut rng = ChaCha8Rng::seed_from_u64(z);
    rng.set_stream(stream);
    rng
}

const STREAM_GRN: u64 = 1;
const STREAM_LOCI: u64 = 2;
const STREAM_BASE: u64 = 3;
const STREAM_CELLS: u64 = 4;
const STREAM_NOISE_GENES: u64 = 5;
const STREAM_SPLIT: u64 = 6;
const STREAM_NOISE_SHIFT: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Promoter,
    Enhancer,
    Ctcf,
}

/// One planted regulatory element: contiguous bins `[start, end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub kind: ElementKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocusKind {
    Tss,
    Snp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Locus {
    pub id: String,
    pub kind: LocusKind,
    /// Perturbed gene for TSS loci.
    pub gene: Option<usize>,
    /// Knockdown depth in activity units.
    pub strength: f64,
    pub elements: Vec<Element>,
}

/// Half-open bin interval carrying one mark.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Peak {
    pub locus: usize,
    pub start: usize,
    pub end: usize,
    pub mark: String,
}

/// Signed network part of a world.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    /// `[G, G]`, effect of knocking down the row gene on the column gene.
    pub grn: Tensor<f64>,
    pub hubs: Vec<usize>,
    pub heldout_hub: usize,
    pub module: Vec<usize>,
    pub gene_sets: BTreeMap<String, Vec<usize>>,
}

/// Log2 baseline expression of the first `g` genes.
pub fn baseline_expression(cfg: &WorldConfig, g: usize) -> Vec<f64> {
    let mut rng = sub_rng(cfg.seed, STREAM_BASE, 0);
    let mean_log2 = (1e6 / g as f64).log2();
    let nrm = Normal::new(mean_log2, cfg.baseline_sd.max(0.0)).expect("finite baseline spread");
    (0..g).map(|_| nrm.sample(&mut rng)).collect()
}

/// Chooses edge signs so that the expected expression mass moved by the
/// row, fixed edges included, stays near zero. Otherwise CPM
/// renormalization would shift every gene after a hub knockdown.
fn balance_signs(row: &[f64], baseline: &[f64], cols: &[usize], mags: &[f64]) -> Vec<f64> {
    let mass = |j: usize, w: f64| baseline[j].exp2() * (w.exp2() - 1.0);
    let mut running: f64 = row.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(j, &w)| mass(j, w)).sum();
    let mut order: Vec<usize> = (0..cols.len()).collect();
    order.sort_by(|&a, &b| (baseline[cols[b]].exp2() * mags[b]).total_cmp(&(baseline[cols[a]].exp2() * mags[a])));
    let mut out = vec![0.0; cols.len()];
    for k in order {
        let up = running + mass(cols[k], mags[k]);
        let down = running + mass(cols[k], -mags[k]);
        if up.abs() <= down.abs() {
            out[k] = mags[k];
            running = up;
        } else {
            out[k] = -mags[k];
            running = down;
        }
    }
    out
}

/// Generates the planted network over `g` genes.
///
/// The diagonal is negative. The first hub is the held-out hub and has
/// exactly `targets_per_hub` targets. The module members share
/// `module_upstream` hubs and carry mutual edges among themselves.
pub fn generate_regulatory_network(cfg: &WorldConfig, g: usize) -> Result<Network> {
    if cfg.hub_count * (cfg.targets_per_hub + 1) + cfg.module_size >= g.max(1) && cfg.hub_count > 0 {
        return Err(CdtError::Config(format!(
            "{} hubs x {} targets do not fit in {g} genes",
            cfg.hub_count, cfg.targets_per_hub
        )));
    }
    let mut rng = sub_rng(cfg.seed, STREAM_GRN, 0);
    let mut grn = Tensor::<f64>::zeros(vec![g, g]);
    for i in 0..g {
        grn.data_mut()[i * g + i] = -rng.random_range(1.5..2.5);
    }
    let mut pool: Vec<usize> = (0..g).collect();
    pool.shuffle(&mut rng);
    let hubs: Vec<usize> = pool.drain(..cfg.hub_count).collect();
    let mut targets = Vec::new();
    for _ in &hubs {
        targets.push(pool.drain(..cfg.targets_per_hub).collect::<Vec<_>>());
    }
    let module: Vec<usize> = pool.drain(..cfg.module_size).collect();
    let set = |grn: &mut Tensor<f64>, i: usize, j: usize, w: f64| grn.data_mut()[i * g + j] = w;
    for &h in hubs.iter().skip(1).take(cfg.module_upstream) {
        for &m in &module {
            set(&mut grn, h, m, -rng.random_range(0.6..1.0));
        }
    }
    let baseline = baseline_expression(cfg, g);
    for (h, ts) in hubs.iter().zip(&targets) {
        let mags: Vec<f64> = ts.iter().map(|_| rng.random_range(0.8..1.4)).collect();
        for (t, w) in ts.iter().zip(balance_signs(grn.row(*h), &baseline, ts, &mags)) {
            set(&mut grn, *h, *t, w);
        }
    }
    for &a in &module {
        for &b in &module {
            if a != b && rng.random::<f64>() < cfg.module_edge_prob {
                set(&mut grn, a, b, -rng.random_range(0.2..0.4));
            }
        }
    }
    let hub_set: BTreeSet<usize> = hubs.iter().copied().collect();
    for i in 0..g {
        if hub_set.contains(&i) {
            continue;
        }
        for j in 0..g {
            if i != j && grn.data()[i * g + j] == 0.0 && rng.random::<f64>() < cfg.background_edge_prob {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                set(&mut grn, i, j, sign * rng.random_range(0.2..0.5));
            }
        }
    }

    let mut gene_sets = BTreeMap::new();
    if !module.is_empty() {
        let mut m = module.clone();
        m.sort_unstable();
        gene_sets.insert("module".to_string(), m);
    }
    for (k, ts) in targets.iter().enumerate() {
        let mut t = ts.clone();
        t.sort_unstable();
        gene_sets.insert(format!("hub{k}_targets"), t);
    }
    // Unrelated sets of module size as negative controls.
    let decoy = cfg.module_size.max(10).min(g / 2);
    for k in 0..3 {
        let mut all: Vec<usize> = (0..g).collect();
        all.shuffle(&mut rng);
        let mut d: Vec<usize> = all[..decoy].to_vec();
        d.sort_unstable();
        gene_sets.insert(format!("decoy{k}"), d);
    }
    Ok(Network {
        grn,
        heldout_hub: hubs.first().copied().unwrap_or(0),
        hubs,
        module,
        gene_sets,
    })
}

/// Shared ingredients of every locus embedding.
struct EmbeddingBasis {
    background: Vec<f64>,
    motifs: [Vec<f64>; 3],
    strength_dir: Vec<f64>,
}

fn unit_scaled(rng: &mut ChaCha8Rng, e: usize) -> Vec<f64> {
    let nrm = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..e).map(|_| nrm.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm * (e as f64).sqrt()).collect()
}

fn basis(cfg: &WorldConfig) -> EmbeddingBasis {
    let mut rng = sub_rng(cfg.seed, STREAM_LOCI, u64::MAX);
    let nrm = Normal::new(0.0, 1.0).expect("unit normal");
    let background = (0..cfg.n_bins * cfg.embed_dim).map(|_| nrm.sample(&mut rng)).collect();
    let motifs = [
        unit_scaled(&mut rng, cfg.embed_dim),
        unit_scaled(&mut rng, cfg.embed_dim),
        unit_scaled(&mut rng, cfg.embed_dim),
    ];
    let strength_dir = unit_scaled(&mut rng, cfg.embed_dim);
    EmbeddingBasis {
        background,
        motifs,
        strength_dir,
    }
}

fn kind_index(k: ElementKind) -> usize {
    match k {
        ElementKind::Promoter => 0,
        ElementKind::Enhancer => 1,
        ElementKind::Ctcf => 2,
    }
}

/// Marks carried by bin `offset` of an element of `kind`.
pub fn element_marks(kind: ElementKind, offset: usize) -> Vec<&'static str> {
    match (kind, offset) {
        (ElementKind::Promoter, 0) => vec!["DNase", "CTCF", "H3K27ac", "H3K4me3"],
        (ElementKind::Promoter, 1) => vec!["DNase", "H3K27ac", "H3K4me3"],
        (ElementKind::Promoter, _) => vec!["DNase", "H3K27ac", "H3K4me1", "H3K4me3"],
        (ElementKind::Enhancer, 0) => vec!["DNase", "CTCF", "H3K27ac", "H3K4me1"],
        (ElementKind::Enhancer, _) => vec!["DNase", "H3K27ac", "H3K4me1"],
        (ElementKind::Ctcf, _) => vec!["DNase", "CTCF"],
    }
}

fn element_width(kind: ElementKind) -> usize {
    match kind {
        ElementKind::Promoter => 3,
        ElementKind::Enhancer => 2,
        ElementKind::Ctcf => 1,
    }
}

/// Places non-overlapping elements of the given kinds on the bin grid.
fn place_elements(rng: &mut ChaCha8Rng, b: usize, kinds: &[ElementKind]) -> Vec<Element> {
    let mut taken = vec![false; b];
    let mut out = Vec::new();
    for &kind in kinds {
        let w = element_width(kind);
        loop {
            let start = if kind == ElementKind::Promoter {
                // Promoters sit near the locus centre.
                let lo = b / 2 - b / 8;
                rng.random_range(lo..lo + b / 4)
            } else {
                rng.random_range(0..b - w + 1)
            };
            let end = start + w;
            // Keep one free bin on either side so elements never touch.
            let lo = start.saturating_sub(1);
            let hi = (end + 1).min(b);
            if end <= b && !taken[lo..hi].iter().any(|&t| t) {
                taken[start..end].iter_mut().for_each(|t| *t = true);
                out.push(Element { kind, start, end });
                break;
            }
        }
    }
    out.sort_by_key(|e| e.start);
    out
}

/// Embedding `[B, E]` of one locus: shared background plus per-locus jitter,
/// with planted bins carrying an element motif, a locus code and the
/// knockdown strength. Returns the embedding and its peaks.
pub fn generate_locus_embedding(
    cfg: &WorldConfig,
    locus_index: usize,
    locus: &Locus,
) -> (Tensor<f32>, Vec<Peak>) {
    let basis = basis(cfg);
    locus_embedding_with(cfg, &basis, locus_index, locus)
}

fn locus_embedding_with(
    cfg: &WorldConfig,
    basis: &EmbeddingBasis,
    locus_index: usize,
    locus: &Locus,
) -> (Tensor<f32>, Vec<Peak>) {
    let (b, e) = (cfg.n_bins, cfg.embed_dim);
    let mut rng = sub_rng(cfg.seed, STREAM_LOCI, locus_index as u64);
    let nrm = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x: Vec<f64> = basis
        .background
        .iter()
        .map(|v| v + cfg.locus_jitter * nrm.sample(&mut rng))
        .collect();
    let code = unit_scaled(&mut rng, e);
    let mut peaks = Vec::new();
    let amp = cfg.signal_to_noise;
    for el in &locus.elements {
        let motif = &basis.motifs[kind_index(el.kind)];
        for (off, bin) in (el.start..el.end).enumerate() {
            let row = &mut x[bin * e..(bin + 1) * e];
            for k in 0..e {
                let signal = motif[k] + 0.5 * code[k] + (locus.strength - 1.0) * basis.strength_dir[k];
                row[k] = 0.3 * row[k] + amp * signal / 1.2;
            }
            for m in element_marks(el.kind, off) {
                peaks.push(Peak {
                    locus: locus_index,
                    start: bin,
                    end: bin + 1,
                    mark: m.to_string(),
                });
            }
        }
    }
    let planted: BTreeSet<usize> = locus.elements.iter().flat_map(|el| el.start..el.end).collect();
    for bin in 0..b {
        if planted.contains(&bin) {
            continue;
        }
        for m in ["DNase", "H3K4me1"] {
            if rng.random::<f64>() < cfg.offtarget_peak_rate {
                peaks.push(Peak {
                    locus: locus_index,
                    start: bin,
                    end: bin + 1,
                    mark: m.to_string(),
                });
            }
        }
    }
    peaks.sort();
    let t = Tensor::new(vec![b, e], x.iter().map(|&v| v as f32).collect()).expect("shape");
    (t, merge_peaks(peaks))
}

/// Merges touching or overlapping intervals of the same locus and mark.
pub fn merge_peaks(mut peaks: Vec<Peak>) -> Vec<Peak> {
    peaks.sort_by(|a, b| (a.locus, &a.mark, a.start).cmp(&(b.locus, &b.mark, b.start)));
    let mut out: Vec<Peak> = Vec::with_capacity(peaks.len());
    for p in peaks {
        if let Some(last) = out.last_mut() {
            if last.locus == p.locus && last.mark == p.mark && p.start <= last.end {
                last.end = last.end.max(p.end);
                continue;
            }
        }
        out.push(p);
    }
    out.sort();
    out
}

/// A perturbation cell ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSample {
    pub cell_id: usize,
    pub locus: usize,
    /// Perturbed gene id, or the SNP locus id.
    pub perturbed: String,
    /// `log1p(CPM)` per gene.
    pub expr: Vec<f32>,
    /// Log2 fold change against the NTC mean.
    pub target: Vec<f32>,
}

/// `log2((x + 1) / (x̄ + 1))` elementwise on the CPM scale.
pub fn compute_log2fc(expr_cpm: &[f64], ntc_mean_cpm: &[f64]) -> Result<Vec<f64>> {
    if expr_cpm.len() != ntc_mean_cpm.len() {
        return Err(CdtError::shape("compute_log2fc", &[expr_cpm.len()], &[ntc_mean_cpm.len()]));
    }
    if expr_cpm.iter().chain(ntc_mean_cpm).any(|&v| !(v >= 0.0)) {
        return Err(CdtError::Contract("log2FC needs nonnegative CPM values".into()));
    }
    Ok(expr_cpm
        .iter()
        .zip(ntc_mean_cpm)
        .map(|(&x, &m)| ((x + 1.0) / (m + 1.0)).log2())
        .collect())
}

/// Rescales to counts per million.
pub fn cpm_normalize(x: &mut [f64]) {
    let total: f64 = x.iter().sum();
    let s = 1e6 / total;
    x.iter_mut().for_each(|v| *v *= s);
}

/// The complete ground truth.
#[derive(Clone, Debug)]
pub struct GroundTruthWorld {
    pub config: WorldConfig,
    pub genes: Vec<String>,
    pub network: Network,
    /// True for genes added as irreproducible noise.
    pub noise_gene_mask: Vec<bool>,
    /// Log2 baseline expression per gene.
    pub baseline: Vec<f64>,
    pub loci: Vec<Locus>,
    pub embeddings: Vec<Tensor<f32>>,
    pub peaks: Vec<Peak>,
    /// Genes whose cells form the validation split.
    pub holdout: Vec<usize>,
}

/// NTC pool on the CPM scale.
#[derive(Clone, Debug)]
pub struct NtcPool {
    pub cells: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Cells of a world plus the baseline they were scored against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ntc_mean: Vec<f64>,
    pub cells: Vec<CellSample>,
}

impl GroundTruthWorld {
    pub fn generate(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let g_total = cfg.total_genes();
        let g = cfg.n_genes;
        let core = generate_regulatory_network(cfg, g)?;
        // Noise genes are appended with their own stream so the curated part
        // is identical with or without them.
        let mut grn = Tensor::<f64>::zeros(vec![g_total, g_total]);
        for i in 0..g {
            grn.data_mut()[i * g_total..i * g_total + g].copy_from_slice(core.grn.row(i));
        }
        let mut nrng = sub_rng(cfg.seed, STREAM_NOISE_GENES, 0);
        for i in g..g_total {
            grn.data_mut()[i * g_total + i] = -nrng.random_range(1.5..2.5);
        }
        let network = Network { grn, ..core };

        let mut genes: Vec<String> = (0..g).map(|i| format!("G{i:03}")).collect();
        genes.extend((0..cfg.n_noise_genes).map(|i| format!("N{i:03}")));
        let noise_gene_mask = (0..g_total).map(|i| i >= g).collect();

        let mut baseline = baseline_expression(cfg, g);
        let nrm = Normal::new((1e6 / g as f64).log2(), cfg.baseline_sd.max(0.0))
            .map_err(|e| CdtError::Config(e.to_string()))?;
        baseline.extend((g..g_total).map(|_| nrm.sample(&mut nrng)));

        // Perturbed TSS genes: every hub, then module members, then others.
        let mut lrng = sub_rng(cfg.seed, STREAM_LOCI, u64::MAX - 1);
        let mut perturbed: Vec<usize> = network.hubs.clone();
        let mut rest: Vec<usize> = network
            .module
            .iter()
            .copied()
            .take(cfg.n_perturbed.saturating_sub(perturbed.len()) / 2)
            .collect();
        let mut others: Vec<usize> = (0..g)
            .filter(|i| !perturbed.contains(i) && !rest.contains(i))
            .collect();
        others.shuffle(&mut lrng);
        rest.extend(others);
        perturbed.extend(rest.into_iter().take(cfg.n_perturbed - network.hubs.len()));

        let mut loci = Vec::new();
        for &gene in &perturbed {
            let elements = place_elements(
                &mut lrng,
                cfg.n_bins,
                &[ElementKind::Promoter, ElementKind::Enhancer, ElementKind::Ctcf],
            );
            loci.push(Locus {
                id: format!("tss_{}", genes[gene]),
                kind: LocusKind::Tss,
                gene: Some(gene),
                strength: 1.0 + lrng.random_range(-cfg.strength_spread..=cfg.strength_spread),
                elements,
            });
        }
        for k in 0..cfg.n_snp_loci {
            let elements = place_elements(&mut lrng, cfg.n_bins, &[ElementKind::Enhancer, ElementKind::Ctcf]);
            loci.push(Locus {
                id: format!("snp_{k:02}"),
                kind: LocusKind::Snp,
                gene: None,
                strength: 1.0 + lrng.random_range(-cfg.strength_spread..=cfg.strength_spread),
                elements,
            });
        }

        let basis = basis(cfg);
        let mut embeddings = Vec::new();
        let mut peaks = Vec::new();
        for (i, l) in loci.iter().enumerate() {
            let (t, p) = locus_embedding_with(cfg, &basis, i, l);
            embeddings.push(t);
            peaks.extend(p);
        }

        // Held-out hub plus non-hub perturbed genes outside the module.
        let mut srng = sub_rng(cfg.seed, STREAM_SPLIT, 0);
        let mut candidates: Vec<usize> = perturbed
            .iter()
            .copied()
            .filter(|p| !network.hubs.contains(p) && !network.module.contains(p))
            .collect();
        candidates.shuffle(&mut srng);
        let mut holdout = vec![network.heldout_hub];
        holdout.extend(candidates.into_iter().take(cfg.n_holdout - 1));
        holdout.sort_unstable();

        Ok(GroundTruthWorld {
            config: cfg.clone(),
            genes,
            network,
            noise_gene_mask,
            baseline,
            loci,
            embeddings,
            peaks,
            holdout,
        })
    }

    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn gene_index(&self, id: &str) -> Result<usize> {
        self.genes
            .iter()
            .position(|g| g == id)
            .ok_or_else(|| CdtError::Lookup(format!("unknown gene {id}")))
    }

    pub fn locus_of_gene(&self, gene: usize) -> Option<usize> {
        self.loci.iter().position(|l| l.gene == Some(gene))
    }

    /// SNP rows: weak effects on a few genes, drawn per SNP locus.
    fn snp_row(&self, locus: usize) -> Vec<f64> {
        let g = self.n_genes();
        let mut rng = sub_rng(self.config.seed, STREAM_LOCI, 10_000 + locus as u64);
        let mut cols: Vec<usize> = (0..self.config.n_genes).collect();
        cols.shuffle(&mut rng);
        cols.truncate(6.min(cols.len()));
        let mags: Vec<f64> = cols.iter().map(|_| rng.random_range(0.3..0.6)).collect();
        let mut row = vec![0.0; g];
        for (&j, w) in cols.iter().zip(balance_signs(&row.clone(), &self.baseline, &cols, &mags)) {
            row[j] = w;
        }
        row
    }

    /// Expected log2 effect of perturbing `locus`: `strength · grn[gene, ·]`.
    pub fn true_effects(&self, locus: usize) -> Vec<f64> {
        let l = &self.loci[locus];
        match l.gene {
            Some(gene) => self.network.grn.row(gene).iter().map(|w| w * l.strength).collect(),
            None => self.snp_row(locus).iter().map(|w| w * l.strength).collect(),
        }
    }

    /// One cell on the CPM scale. `knockdown` is `(locus, depth)`.
    fn simulate_cell(&self, rng: &mut ChaCha8Rng, knockdown: Option<(usize, f64)>) -> Vec<f64> {
        let cfg = &self.config;
        let g = self.n_genes();
        let grn = self.network.grn.data();
        let nrm = Normal::new(0.0, 1.0).expect("unit normal");
        // Natural activity is scaled so each gene's own log2 spread is its activity sd.
        let mut u: Vec<f64> = (0..g)
            .map(|i| {
                let sd = if self.network.hubs.contains(&i) { cfg.hub_activity_sd } else { cfg.activity_sd };
                sd * nrm.sample(rng) / grn[i * g + i].abs()
            })
            .collect();
        let z = cfg.module_program_sd * nrm.sample(rng);
        let library = (cfg.library_sd * nrm.sample(rng)).exp2();
        let mut log2 = self.baseline.clone();
        if let Some((locus, depth)) = knockdown {
            match self.loci[locus].gene {
                Some(p) => u[p] -= depth,
                None => {
                    for (l, w) in log2.iter_mut().zip(self.snp_row(locus)) {
                        *l += depth * w;
                    }
                }
            }
        }
        for i in 0..g {
            if u[i] == 0.0 {
                continue;
            }
            let row = &grn[i * g..(i + 1) * g];
            for j in 0..g {
                let w = row[j];
                if w != 0.0 {
                    log2[j] -= u[i] * w;
                }
            }
        }
        // The diagonal is negative, so `-u·w` raises a gene with its activity.
        for &m in &self.network.module {
            log2[m] += z;
        }
        for (j, l) in log2.iter_mut().enumerate() {
            let sd = if self.noise_gene_mask[j] { cfg.noise_gene_sd } else { cfg.noise_sd };
            *l += sd * nrm.sample(rng);
        }
        if let Some((locus, _)) = knockdown {
            let mut shift = sub_rng(cfg.seed, STREAM_NOISE_SHIFT, locus as u64);
            for (l, _) in log2.iter_mut().zip(&self.noise_gene_mask).filter(|(_, &m)| m) {
                *l += cfg.noise_gene_shift_sd * nrm.sample(&mut shift);
            }
        }
        let mut x: Vec<f64> = log2.iter().map(|l| l.exp2() * library).collect();
        cpm_normalize(&mut x);
        x
    }

    /// Unperturbed control cells, CPM-normalized, with their column mean.
    pub fn simulate_cell_expression(&self, n_cells: usize, seed: u64) -> Result<NtcPool> {
        if n_cells < 2 {
            return Err(CdtError::Contract("NTC pool needs at least 2 cells".into()));
        }
        let g = self.n_genes();
        let mut cells = Vec::with_capacity(n_cells);
        let mut mean = vec![0.0; g];
        for c in 0..n_cells {
            let mut rng = sub_rng(seed, STREAM_CELLS, c as u64);
            let x = self.simulate_cell(&mut rng, None);
            for (m, v) in mean.iter_mut().zip(&x) {
                *m += v;
            }
            cells.push(x);
        }
        mean.iter_mut().for_each(|m| *m /= n_cells as f64);
        Ok(NtcPool { cells, mean })
    }

    /// A fresh cell with the locus of `gene` knocked down, CPM-normalized.
    pub fn apply_perturbation(&self, gene: &str, cell_index: u64, noise_seed: u64) -> Result<Vec<f64>> {
        let gi = self.gene_index(gene)?;
        let locus = self
            .locus_of_gene(gi)
            .ok_or_else(|| CdtError::Lookup(format!("gene {gene} has no perturbation locus")))?;
        Ok(self.perturb_locus(locus, cell_index, noise_seed))
    }

    pub fn perturb_locus(&self, locus: usize, cell_index: u64, noise_seed: u64) -> Vec<f64> {
        let mut rng = sub_rng(noise_seed, STREAM_CELLS + 100 + locus as u64, cell_index);
        self.simulate_cell(&mut rng, Some((locus, self.loci[locus].strength)))
    }

    /// NTC pool plus perturbation cells for every locus.
    pub fn simulate_dataset(&self) -> Result<Dataset> {
        let cfg = &self.config;
        let ntc = self.simulate_cell_expression(cfg.n_ntc, cfg.seed)?;
        let mut cells = Vec::new();
        for (li, l) in self.loci.iter().enumerate() {
            let n = match l.kind {
                LocusKind::Tss => cfg.cells_per_gene,
                LocusKind::Snp if cfg.include_snps => cfg.cells_per_snp,
                LocusKind::Snp => 0,
            };
            let label = match l.gene {
                Some(g) => self.genes[g].clone(),
                None => l.id.clone(),
            };
            for c in 0..n {
                let x = self.perturb_locus(li, c as u64, cfg.seed);
                let target = compute_log2fc(&x, &ntc.mean)?;
                cells.push(CellSample {
                    cell_id: cells.len(),
                    locus: li,
                    perturbed: label.clone(),
                    expr: x.iter().map(|v| v.ln_1p() as f32).collect(),
                    target: target.iter().map(|&v| v as f32).collect(),
                });
            }
        }
        Ok(Dataset {
            ntc_mean: ntc.mean,
            cells,
        })
    }

    pub fn holdout_ids(&self) -> Vec<String> {
        self.holdout.iter().map(|&g| self.genes[g].clone()).collect()
    }

    /// Per-locus membership of each bin in each mark, `[mark][bin]`.
    pub fn peak_mask(&self, locus: usize) -> Vec<Vec<bool>> {
        let b = self.config.n_bins;
        MARKS
            .iter()
            .map(|m| {
                let mut mask = vec![false; b];
                for p in self.peaks.iter().filter(|p| p.locus == locus && p.mark == *m) {
                    mask[p.start..p.end].iter_mut().for_each(|v| *v = true);
                }
                mask
            })
            .collect()
    }
}

/// Train/validation partition at the gene level.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<CellSample>,
    pub val: Vec<CellSample>,
}

/// Every cell whose perturbed gene is held out goes to validation.
pub fn split_genes(holdout: &[String], cells: &[CellSample]) -> Result<Split> {
    if holdout.is_empty() {
        return Err(CdtError::Config("holdout gene list is empty".into()));
    }
    for h in holdout {
        if !cells.iter().any(|c| &c.perturbed == h) {
            return Err(CdtError::Config(format!("holdout gene {h} has no cells")));
        }
    }
    let (val, train): (Vec<CellSample>, Vec<CellSample>) =
        cells.iter().cloned().partition(|c| holdout.contains(&c.perturbed));
    Ok(Split { train, val })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: WorldConfig,
    genes: Vec<String>,
    hubs: Vec<usize>,
    heldout_hub: usize,
    module: Vec<usize>,
    gene_sets: BTreeMap<String, Vec<usize>>,
    noise_gene_mask: Vec<bool>,
    holdout: Vec<usize>,
    loci: Vec<Locus>,
    files: BTreeMap<String, String>,
}

const WORLD_FORMAT: &str = "cdt-world-v1";

pub const WORLD_MANIFEST: &str = "world.json";

fn write_tensor<T: crate::tensor::Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    t.write_cdtt(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_tensor<T: crate::tensor::Scalar>(path: &Path) -> Result<Tensor<T>> {
    Tensor::read_cdtt(BufReader::new(File::open(path)?))
}

impl GroundTruthWorld {
    /// Writes the manifest, tensors, peaks and cells into `dir`.
    pub fn save(&self, data: &Dataset, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let g = self.n_genes();
        let files: BTreeMap<String, String> = [
            ("grn", "grn.cdtt"),
            ("baseline", "baseline.cdtt"),
            ("embeddings", "embeddings.cdtt"),
            ("peaks", "peaks.bed"),
            ("cells", "cells.tsv"),
            ("expr", "expr.cdtt"),
            ("target", "target.cdtt"),
            ("ntc_mean", "ntc_mean.cdtt"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let manifest = Manifest {
            format: WORLD_FORMAT.into(),
            config: self.config.clone(),
            genes: self.genes.clone(),
            hubs: self.network.hubs.clone(),
            heldout_hub: self.network.heldout_hub,
            module: self.network.module.clone(),
            gene_sets: self.network.gene_sets.clone(),
            noise_gene_mask: self.noise_gene_mask.clone(),
            holdout: self.holdout.clone(),
            loci: self.loci.clone(),
            files: files.clone(),
        };
        let mut w = BufWriter::new(File::create(dir.join(WORLD_MANIFEST))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;

        write_tensor(&dir.join(&files["grn"]), &self.network.grn)?;
        write_tensor(&dir.join(&files["baseline"]), &Tensor::new(vec![g], self.baseline.clone())?)?;
        let (b, e) = (self.config.n_bins, self.config.embed_dim);
        let flat: Vec<f32> = self.embeddings.iter().flat_map(|t| t.data().iter().copied()).collect();
        write_tensor(&dir.join(&files["embeddings"]), &Tensor::new(vec![self.loci.len(), b, e], flat)?)?;

        let mut w = BufWriter::new(File::create(dir.join(&files["peaks"]))?);
        for p in &self.peaks {
            writeln!(w, "{}\t{}\t{}\t{}", self.loci[p.locus].id, p.start, p.end, p.mark)?;
        }
        w.flush()?;

        let mut w = BufWriter::new(File::create(dir.join(&files["cells"]))?);
        writeln!(w, "cell_id\tlocus_id\tperturbed\tsplit")?;
        let holdout = self.holdout_ids();
        for c in &data.cells {
            let split = if holdout.contains(&c.perturbed) { "val" } else { "train" };
            writeln!(w, "{}\t{}\t{}\t{}", c.cell_id, self.loci[c.locus].id, c.perturbed, split)?;
        }
        w.flush()?;

        let n = data.cells.len().max(1);
        let mut expr = Vec::with_capacity(n * g);
        let mut target = Vec::with_capacity(n * g);
        for c in &data.cells {
            expr.extend_from_slice(&c.expr);
            target.extend_from_slice(&c.target);
        }
        if data.cells.is_empty() {
            expr.resize(g, 0.0);
            target.resize(g, 0.0);
        }
        write_tensor(&dir.join(&files["expr"]), &Tensor::new(vec![n, g], expr)?)?;
        write_tensor(&dir.join(&files["target"]), &Tensor::new(vec![n, g], target)?)?;
        write_tensor(&dir.join(&files["ntc_mean"]), &Tensor::new(vec![g], data.ntc_mean.clone())?)?;
        Ok(())
    }

    /// Reads a world written by [`GroundTruthWorld::save`].
    pub fn load(dir: &Path) -> Result<(Self, Dataset)> {
        let mpath = dir.join(WORLD_MANIFEST);
        let m: Manifest = serde_json::from_reader(BufReader::new(File::open(&mpath)?))?;
        if m.format != WORLD_FORMAT {
            return Err(CdtError::Format(format!("{} is not a world manifest", mpath.display())));
        }
        let file = |k: &str| -> Result<std::path::PathBuf> {
            m.files
                .get(k)
                .map(|f| dir.join(f))
                .ok_or_else(|| CdtError::Format(format!("manifest lists no {k} file")))
        };
        let g = m.genes.len();
        let grn: Tensor<f64> = read_tensor(&file("grn")?)?;
        if grn.shape() != [g, g] {
            return Err(CdtError::shape("world grn", grn.shape(), &[g, g]));
        }
        let baseline = read_tensor::<f64>(&file("baseline")?)?.into_data();
        let emb: Tensor<f32> = read_tensor(&file("embeddings")?)?;
        let (b, e) = (m.config.n_bins, m.config.embed_dim);
        if emb.shape() != [m.loci.len(), b, e] {
            return Err(CdtError::shape("world embeddings", emb.shape(), &[m.loci.len(), b, e]));
        }
        let embeddings = emb
            .data()
            .chunks(b * e)
            .map(|c| Tensor::new(vec![b, e], c.to_vec()))
            .collect::<Result<Vec<_>>>()?;

        let locus_index = |id: &str| -> Result<usize> {
            m.loci
                .iter()
                .position(|l| l.id == id)
                .ok_or_else(|| CdtError::Lookup(format!("unknown locus {id}")))
        };
        let mut peaks = Vec::new();
        for line in BufReader::new(File::open(file("peaks")?)?).lines() {
            let line = line?;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(CdtError::Format(format!("bad peak line: {line}")));
            }
            let parse = |s: &str| s.parse::<usize>().map_err(|_| CdtError::Format(format!("bad bin {s}")));
            peaks.push(Peak {
                locus: locus_index(f[0])?,
                start: parse(f[1])?,
                end: parse(f[2])?,
                mark: f[3].to_string(),
            });
        }

        let expr: Tensor<f32> = read_tensor(&file("expr")?)?;
        let target: Tensor<f32> = read_tensor(&file("target")?)?;
        let ntc_mean = read_tensor::<f64>(&file("ntc_mean")?)?.into_data();
        let mut cells = Vec::new();
        let reader = BufReader::new(File::open(file("cells")?)?);
        for (i, line) in reader.lines().skip(1).enumerate() {
            let line = line?;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(CdtError::Format(format!("bad cell line: {line}")));
            }
            cells.push(CellSample {
                cell_id: f[0].parse().map_err(|_| CdtError::Format(format!("bad cell id {}", f[0])))?,
                locus: locus_index(f[1])?,
                perturbed: f[2].to_string(),
                expr: expr.row(i).to_vec(),
                target: target.row(i).to_vec(),
            });
        }

        let network = Network {
            grn,
            hubs: m.hubs,
            heldout_hub: m.heldout_hub,
            module: m.module,
            gene_sets: m.gene_sets,
        };
        Ok((
            GroundTruthWorld {
                config: m.config,
                genes: m.genes,
                network,
                noise_gene_mask: m.noise_gene_mask,
                baseline,
                loci: m.loci,
                embeddings,
                peaks,
                holdout: m.holdout,
            },
            Dataset { ntc_mean, cells },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            cells_per_gene: 4,
            cells_per_snp: 2,
            n_ntc: 20,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn no_hubs_gives_diagonal_network() {
        let cfg = WorldConfig {
            hub_count: 0,
            module_size: 0,
            module_upstream: 0,
            background_edge_prob: 0.0,
            ..WorldConfig::default()
        };
        let net = generate_regulatory_network(&cfg, 50).unwrap();
        for i in 0..50 {
            for j in 0..50 {
                let w = net.grn.at(&[i, j]);
                assert_eq!(w < 0.0, i == j);
                assert_eq!(w == 0.0, i != j);
            }
        }
    }

    #[test]
    fn network_is_deterministic_and_out_degrees_match() {
        let cfg = WorldConfig::default();
        let a = generate_regulatory_network(&cfg, 200).unwrap();
        let b = generate_regulatory_network(&cfg, 200).unwrap();
        assert_eq!(a, b);
        let out_degree = |h: usize| (0..200).filter(|&j| j != h && a.grn.at(&[h, j]) != 0.0).count();
        assert_eq!(out_degree(a.heldout_hub), 20);
        for (k, &h) in a.hubs.iter().enumerate() {
            let extra = if (1..=cfg.module_upstream).contains(&k) { cfg.module_size } else { 0 };
            assert_eq!(out_degree(h), 20 + extra, "hub {k}");
        }
    }

    #[test]
    fn infeasible_hub_counts_rejected() {
        let cfg = WorldConfig {
            hub_count: 10,
            targets_per_hub: 20,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_regulatory_network(&cfg, 200), Err(CdtError::Config(_))));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn module_members_share_upstream_and_mutual_edges() {
        let cfg = WorldConfig::default();
        let net = generate_regulatory_network(&cfg, 200).unwrap();
        for &h in &net.hubs[1..=cfg.module_upstream] {
            assert!(net.module.iter().all(|&m| net.grn.at(&[h, m]) != 0.0));
        }
        let mutual = net
            .module
            .iter()
            .flat_map(|&a| net.module.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| a != b && net.grn.at(&[a, b]) != 0.0)
            .count();
        assert!(mutual > 0);
    }

    #[test]
    fn empty_locus_is_pure_background() {
        let cfg = WorldConfig {
            offtarget_peak_rate: 0.0,
            ..WorldConfig::default()
        };
        let locus = Locus {
            id: "x".into(),
            kind: LocusKind::Tss,
            gene: None,
            strength: 1.0,
            elements: vec![],
        };
        let (t, peaks) = generate_locus_embedding(&cfg, 0, &locus);
        assert!(peaks.is_empty());
        assert_eq!(t.shape(), &[64, 96]);
    }

    #[test]
    fn planted_bins_match_peaks_and_stand_out() {
        let w = GroundTruthWorld::generate(&WorldConfig {
            offtarget_peak_rate: 0.0,
            ..small()
        })
        .unwrap();
        for (li, l) in w.loci.iter().enumerate() {
            let planted: BTreeSet<usize> = l.elements.iter().flat_map(|e| e.start..e.end).collect();
            for (mi, mask) in w.peak_mask(li).iter().enumerate() {
                let expect: usize = l
                    .elements
                    .iter()
                    .map(|e| (0..e.end - e.start).filter(|&o| element_marks(e.kind, o).contains(&MARKS[mi])).count())
                    .sum();
                assert_eq!(mask.iter().filter(|&&v| v).count(), expect);
                assert!(mask.iter().enumerate().all(|(b, &v)| !v || planted.contains(&b)));
            }
            let t = &w.embeddings[li];
            let norm = |b: usize| t.row(b).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let sig: f64 = planted.iter().map(|&b| norm(b)).sum::<f64>() / planted.len() as f64;
            let bg: Vec<usize> = (0..64).filter(|b| !planted.contains(b)).collect();
            let noise: f64 = bg.iter().map(|&b| norm(b)).sum::<f64>() / bg.len() as f64;
            assert!(sig / noise >= 0.8 * w.config.signal_to_noise, "{}", sig / noise);
        }
    }

    #[test]
    fn ntc_pool_is_cpm_normalized() {
        let w = GroundTruthWorld::generate(&small()).unwrap();
        let pool = w.simulate_cell_expression(50, 3).unwrap();
        for c in &pool.cells {
            assert!((c.iter().sum::<f64>() - 1e6).abs() < 0.5);
        }
        for j in 0..w.n_genes() {
            let m = pool.cells.iter().map(|c| c[j]).sum::<f64>() / 50.0;
            assert!((m - pool.mean[j]).abs() < 1e-9 * m.max(1.0));
        }
        assert!(w.simulate_cell_expression(1, 3).is_err());
    }

    #[test]
    fn log2fc_cases() {
        let m = vec![5.0, 0.0, 17.5];
        assert!(compute_log2fc(&m, &m).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(compute_log2fc(&[3.0], &[1.0]).unwrap(), vec![1.0]);
        let v = compute_log2fc(&[0.0], &[1e6]).unwrap()[0];
        assert!((v - (1.0f64 / 1_000_001.0).log2()).abs() < 1e-12);
        assert!((v + 19.93).abs() < 0.01);
        assert!(compute_log2fc(&[-1.0], &[1.0]).is_err());
    }

    #[test]
    fn knockdown_of_two_is_fourfold_down() {
        let cfg = WorldConfig {
            activity_sd: 0.0,
            hub_activity_sd: 0.0,
            module_program_sd: 0.0,
            noise_sd: 0.0,
            library_sd: 0.0,
            strength_spread: 0.0,
            ..small()
        };
        let mut w = GroundTruthWorld::generate(&cfg).unwrap();
        let gene = w.loci[0].gene.unwrap();
        let g = w.n_genes();
        for j in 0..g {
            w.network.grn.data_mut()[gene * g + j] = if j == gene { -2.0 } else { 0.0 };
        }
        let base = w.simulate_cell_expression(2, 1).unwrap().mean;
        let x = w.apply_perturbation(&w.genes[gene].clone(), 0, 1).unwrap();
        // Renormalization lifts the others by the lost mass only.
        let ratio = base[gene] / x[gene];
        let lift = x[(gene + 1) % g] / base[(gene + 1) % g];
        assert!((ratio * lift - 4.0).abs() < 1e-9, "{ratio} {lift}");
        assert!(w.apply_perturbation("nope", 0, 1).is_err());
    }

    #[test]
    fn realized_effects_converge_to_planted_rows() {
        let w = GroundTruthWorld::generate(&WorldConfig::default()).unwrap();
        let ntc = w.simulate_cell_expression(2000, 11).unwrap();
        for locus in 0..w.config.n_perturbed {
            let n = 1000;
            let mut mean = vec![0.0; w.n_genes()];
            for c in 0..n {
                let x = w.perturb_locus(locus, c, 99);
                for (m, v) in mean.iter_mut().zip(compute_log2fc(&x, &ntc.mean).unwrap()) {
                    *m += v / n as f64;
                }
            }
            let truth = w.true_effects(locus);
            let gap = mean.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(gap < 0.1, "locus {locus}: {gap}");
        }
    }

    #[test]
    fn noise_genes_have_inflated_target_variance() {
        let w = GroundTruthWorld::generate(&WorldConfig {
            n_noise_genes: 50,
            ..small()
        })
        .unwrap();
        let data = w.simulate_dataset().unwrap();
        let var = |j: usize| {
            let v: Vec<f64> = data.cells.iter().map(|c| c.target[j] as f64).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let clean: Vec<f64> = (0..w.n_genes()).filter(|&j| !w.noise_gene_mask[j]).map(var).collect();
        let noisy: Vec<f64> = (0..w.n_genes()).filter(|&j| w.noise_gene_mask[j]).map(var).collect();
        let med = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(med(noisy) >= 4.0 * med(clean));
    }

    #[test]
    fn curated_part_unchanged_by_noise_genes() {
        let a = GroundTruthWorld::generate(&small()).unwrap();
        let b = GroundTruthWorld::generate(&WorldConfig {
            n_noise_genes: 30,
            ..small()
        })
        .unwrap();
        assert_eq!(a.loci, b.loci);
        assert_eq!(a.holdout, b.holdout);
        for i in 0..200 {
            assert_eq!(a.network.grn.row(i), &b.network.grn.row(i)[..200]);
        }
    }

    #[test]
    fn split_is_gene_level() {
        let w = GroundTruthWorld::generate(&small()).unwrap();
        let data = w.simulate_dataset().unwrap();
        assert!(split_genes(&[], &data.cells).is_err());
        let hold = w.holdout_ids();
        assert_eq!(hold.len(), 5);
        assert!(hold.contains(&w.genes[w.network.heldout_hub]));
        let s = split_genes(&hold, &data.cells).unwrap();
        let train: BTreeSet<&String> = s.train.iter().map(|c| &c.perturbed).collect();
        assert!(s.val.iter().all(|c| !train.contains(&c.perturbed)));
        assert_eq!(s.val.len(), 5 * w.config.cells_per_gene);
        assert_eq!(s.train.len() + s.val.len(), data.cells.len());
    }

    #[test]
    fn save_and_load_round_trip() {
        let w = GroundTruthWorld::generate(&small()).unwrap();
        let data = w.simulate_dataset().unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.save(&data, dir.path()).unwrap();
        let (w2, d2) = GroundTruthWorld::load(dir.path()).unwrap();
        assert_eq!(w2.genes, w.genes);
        assert_eq!(w2.network, w.network);
        assert_eq!(w2.peaks, w.peaks);
        assert_eq!(w2.embeddings, w.embeddings);
        assert_eq!(d2.cells, data.cells);
        let bed = fs::read_to_string(dir.path().join("peaks.bed")).unwrap();
        let first: Vec<&str> = bed.lines().next().unwrap().split('\t').collect();
        assert_eq!(first.len(), 4);
        assert!(MARKS.contains(&first[3]));
    }

    #[test]
    fn generation_is_a_function_of_the_seed() {
        let a = GroundTruthWorld::generate(&small()).unwrap();
        let b = GroundTruthWorld::generate(&small()).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.simulate_dataset().unwrap().cells, b.simulate_dataset().unwrap().cells);
    }
}
