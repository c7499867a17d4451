//! High-attention genomic bins against peak tracks: Fisher tests, circular
//! permutations, bin classes and threshold sweeps.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdtError, Result};
use crate::stats::{cohens_d, fisher_exact_haldane, kruskal_wallis, Table2x2, TestResult};
use crate::world::sub_rng;

const STREAM_SHIFT: u64 = 41;

/// The `floor(fraction·B)` highest bins, ties at the cut to the lower index.
/// Returned in ascending bin order.
pub fn select_top_bins(att: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CdtError::Config(format!("fraction must be in (0, 1), got {fraction}")));
    }
    let k = (fraction * att.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..att.len()).collect();
    idx.sort_by(|&a, &b| att[b].total_cmp(&att[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Bin mask from half-open intervals on a `b`-bin grid.
pub fn intervals_to_mask(intervals: &[(usize, usize)], b: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; b];
    for &(s, e) in intervals {
        if s >= e || e > b {
            return Err(CdtError::Contract(format!("interval [{s}, {e}) invalid on {b} bins")));
        }
        mask[s..e].iter_mut().for_each(|v| *v = true);
    }
    Ok(mask)
}

/// Fisher result for one mark in one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkEnrichment {
    pub table: Table2x2,
    /// False when the mark has no peaks in the window or covers all of it.
    pub testable: bool,
    pub odds_ratio: f64,
    pub p_value: f64,
}

/// 2×2 table of high-attention bins against peak bins, tested with Fisher.
pub fn mark_enrichment(top_bins: &[usize], peaks: &[bool]) -> Result<MarkEnrichment> {
    let b = peaks.len();
    let mut top = vec![false; b];
    for &i in top_bins {
        if i >= b {
            return Err(CdtError::Contract(format!("bin {i} outside [0, {b})")));
        }
        top[i] = true;
    }
    let mut t = Table2x2::new(0, 0, 0, 0);
    for (&hi, &pk) in top.iter().zip(peaks) {
        match (hi, pk) {
            (true, true) => t.a += 1,
            (true, false) => t.b += 1,
            (false, true) => t.c += 1,
            (false, false) => t.d += 1,
        }
    }
    let n_peak = t.a + t.c;
    let testable = n_peak > 0 && n_peak < b as u64;
    let r = fisher_exact_haldane(t)?;
    Ok(MarkEnrichment {
        table: t,
        testable,
        odds_ratio: r.effect.unwrap_or(f64::NAN),
        p_value: r.p_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    /// Top bins overlapping peaks.
    pub observed: usize,
    pub n_perm: usize,
    pub p_value: f64,
}

/// Shift for permutation `index`, uniform over `[0, b)` or `[1, b)`.
pub fn circular_offset(seed: u64, index: u64, b: usize, exclude_zero: bool) -> usize {
    let mut rng = sub_rng(seed, STREAM_SHIFT, index);
    if exclude_zero && b > 1 {
        rng.random_range(1..b)
    } else {
        rng.random_range(0..b)
    }
}

/// `out[i] = att[(i + offset) % B]`.
pub fn rotate(att: &[f64], offset: usize) -> Vec<f64> {
    let b = att.len();
    (0..b).map(|i| att[(i + offset) % b]).collect()
}

fn overlap_count(att: &[f64], peaks: &[bool], fraction: f64) -> Result<usize> {
    Ok(select_top_bins(att, fraction)?.iter().filter(|&&i| peaks[i]).count())
}

/// Overlap count of top bins with peaks against circularly shifted
/// attention; `p = (1 + #{null >= observed}) / (1 + n_perm)`.
pub fn circular_permutation_test(
    att: &[f64],
    peaks: &[bool],
    fraction: f64,
    n_perm: usize,
    seed: u64,
    exclude_zero: bool,
) -> Result<PermutationResult> {
    if n_perm == 0 {
        return Err(CdtError::Config("n_perm must be >= 1".into()));
    }
    if att.len() != peaks.len() || att.is_empty() {
        return Err(CdtError::shape("circular_permutation_test", &[att.len()], &[peaks.len()]));
    }
    let observed = overlap_count(att, peaks, fraction)?;
    let mut hits = 0usize;
    for k in 0..n_perm {
        let off = circular_offset(seed, k as u64, att.len(), exclude_zero);
        if overlap_count(&rotate(att, off), peaks, fraction)? >= observed {
            hits += 1;
        }
    }
    Ok(PermutationResult {
        observed,
        n_perm,
        p_value: (1 + hits) as f64 / (1 + n_perm) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinClass {
    Promoter,
    ActiveEnhancer,
    CtcfOnly,
    Unannotated,
}

impl BinClass {
    pub const ALL: [BinClass; 4] = [
        BinClass::Promoter,
        BinClass::ActiveEnhancer,
        BinClass::CtcfOnly,
        BinClass::Unannotated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinClass::Promoter => "promoter",
            BinClass::ActiveEnhancer => "active_enhancer",
            BinClass::CtcfOnly => "ctcf_only",
            BinClass::Unannotated => "unannotated",
        }
    }
}

/// Labels every bin: H3K4me3 gives promoter, else H3K27ac gives active
/// enhancer, else CTCF gives ctcf_only. A missing track counts as empty.
pub fn classify_bins(tracks: &BTreeMap<String, Vec<bool>>, b: usize) -> Result<Vec<BinClass>> {
    if let Some((m, t)) = tracks.iter().find(|(_, t)| t.len() != b) {
        return Err(CdtError::Contract(format!("track {m} has {} bins, expected {b}", t.len())));
    }
    let has = |mark: &str, i: usize| tracks.get(mark).is_some_and(|t| t[i]);
    Ok((0..b)
        .map(|i| {
            if has("H3K4me3", i) {
                BinClass::Promoter
            } else if has("H3K27ac", i) {
                BinClass::ActiveEnhancer
            } else if has("CTCF", i) {
                BinClass::CtcfOnly
            } else {
                BinClass::Unannotated
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: BinClass,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Cohen's d against unannotated bins, annotated minus unannotated.
    /// `None` for the unannotated class itself or when undefined.
    pub d_vs_unannotated: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEffects {
    pub classes: Vec<ClassStats>,
    pub kruskal: TestResult,
}

fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Attention per bin class with a Kruskal-Wallis test across the nonempty
/// classes. Identical attention everywhere yields `H = 0`, `p = 1`.
pub fn bin_class_effect_sizes(att: &[f64], classes: &[BinClass]) -> Result<ClassEffects> {
    if att.len() != classes.len() {
        return Err(CdtError::shape("bin_class_effect_sizes", &[att.len()], &[classes.len()]));
    }
    let groups: Vec<(BinClass, Vec<f64>)> = BinClass::ALL
        .iter()
        .map(|&c| (c, (0..att.len()).filter(|&i| classes[i] == c).map(|i| att[i]).collect::<Vec<_>>()))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if groups.len() < 2 {
        return Err(CdtError::Contract("need at least 2 nonempty bin classes".into()));
    }
    let kruskal = if att.iter().all(|&v| v == att[0]) {
        TestResult {
            statistic: 0.0,
            p_value: 1.0,
            effect: None,
            ci_low: None,
            ci_high: None,
        }
    } else {
        let refs: Vec<&[f64]> = groups.iter().map(|g| g.1.as_slice()).collect();
        kruskal_wallis(&refs)?
    };
    let unannotated = groups.iter().find(|g| g.0 == BinClass::Unannotated).map(|g| &g.1);
    let classes = groups
        .iter()
        .map(|(c, v)| ClassStats {
            class: *c,
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: median(v),
            d_vs_unannotated: match unannotated {
                Some(u) if *c != BinClass::Unannotated => cohens_d(v, u).ok(),
                _ => None,
            },
        })
        .collect();
    Ok(ClassEffects { classes, kruskal })
}

/// Top fractions 0.05 to 0.20 in steps of 0.025.
pub fn default_fractions() -> Vec<f64> {
    (0..7).map(|i| 0.05 + 0.025 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub fractions: Vec<f64>,
    pub results: Vec<MarkEnrichment>,
    /// Largest |Δ ln OR| between adjacent fractions.
    pub max_log_or_jump: f64,
}

pub fn threshold_sweep(att: &[f64], peaks: &[bool], fractions: &[f64]) -> Result<ThresholdSweep> {
    if att.len() != peaks.len() {
        return Err(CdtError::shape("threshold_sweep", &[att.len()], &[peaks.len()]));
    }
    let results = fractions
        .iter()
        .map(|&f| mark_enrichment(&select_top_bins(att, f)?, peaks))
        .collect::<Result<Vec<_>>>()?;
    let max_log_or_jump = results
        .windows(2)
        .map(|w| (w[1].odds_ratio.ln() - w[0].odds_ratio.ln()).abs())
        .fold(0.0, f64::max);
    Ok(ThresholdSweep {
        fractions: fractions.to_vec(),
        results,
        max_log_or_jump,
    })
}

/// One cell of the gene × mark enrichment matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentRow {
    pub gene: String,
    pub mark: String,
    pub testable: bool,
    pub overlap: u64,
    pub n_peak_bins: u64,
    pub odds_ratio: f64,
    pub p_value: f64,
    pub perm_p: f64,
}

/// Fisher and circular-permutation tests for every mark in one window.
pub fn enrich_locus(
    gene: &str,
    att: &[f64],
    tracks: &BTreeMap<String, Vec<bool>>,
    fraction: f64,
    n_perm: usize,
    seed: u64,
) -> Result<Vec<EnrichmentRow>> {
    let top = select_top_bins(att, fraction)?;
    tracks
        .iter()
        .map(|(mark, peaks)| {
            let e = mark_enrichment(&top, peaks)?;
            let perm = circular_permutation_test(att, peaks, fraction, n_perm, seed, false)?;
            Ok(EnrichmentRow {
                gene: gene.to_string(),
                mark: mark.clone(),
                testable: e.testable,
                overlap: e.table.a,
                n_peak_bins: e.table.a + e.table.c,
                odds_ratio: e.odds_ratio,
                p_value: e.p_value,
                perm_p: perm.p_value,
            })
        })
        .collect()
}

pub fn write_enrichment_tsv<W: Write>(w: &mut W, rows: &[EnrichmentRow]) -> Result<()> {
    writeln!(w, "gene\tmark\ttestable\toverlap\tn_peak_bins\todds_ratio\tp_value\tperm_p")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}",
            r.gene, r.mark, r.testable, r.overlap, r.n_peak_bins, r.odds_ratio, r.p_value, r.perm_p
        )?;
    }
    Ok(())
}

/// Long format, one line per bin: `gene bin class attention`.
pub fn write_bin_attention_tsv<W: Write>(w: &mut W, gene: &str, att: &[f64], classes: &[BinClass], header: bool) -> Result<()> {
    if header {
        writeln!(w, "gene\tbin\tclass\tattention")?;
    }
    for (i, (a, c)) in att.iter().zip(classes).enumerate() {
        writeln!(w, "{gene}\t{i}\t{}\t{a:.9e}", c.name())?;
    }
    Ok(())
}
