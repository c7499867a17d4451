//! Attention maps turned into network claims: top-N overlaps, gene graphs,
//! Louvain communities and gene-set enrichment.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CdtError, Result};
use crate::model::AttentionBundle;
use crate::stats::{bh_adjust, hypergeom_sf, pearson};
use crate::tensor::{Scalar, Tensor};
use crate::world::sub_rng;

/// Overlap of two gene selections against a universe of `universe` genes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub k: usize,
    pub expected: f64,
    pub fold: f64,
    pub p_value: f64,
    pub universe: usize,
}

fn overlap_stats(k: usize, a: usize, b: usize, universe: usize) -> Result<Overlap> {
    let expected = a as f64 * b as f64 / universe as f64;
    Ok(Overlap {
        k,
        expected,
        fold: k as f64 / expected,
        p_value: hypergeom_sf(k as u64, universe as u64, a as u64, b as u64)?,
        universe,
    })
}

/// Indices sorted by score descending, ties by index ascending.
pub fn rank_desc(scores: &[f64], skip: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != skip).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Overlap between the top `n` genes by attention and the top `n` by
/// |effect|. The query gene, when given, is removed from both rankings
/// and from the universe.
pub fn topn_overlap_enrichment(att: &[f64], effect: &[f64], n: usize, query: Option<usize>) -> Result<Overlap> {
    if att.len() != effect.len() {
        return Err(CdtError::shape("topn_overlap_enrichment", &[att.len()], &[effect.len()]));
    }
    let universe = att.len() - usize::from(query.is_some_and(|q| q < att.len()));
    if n == 0 || n >= universe {
        return Err(CdtError::Contract(format!("N={n} must be in [1, {universe})")));
    }
    let abs: Vec<f64> = effect.iter().map(|v| v.abs()).collect();
    let mut top_a = rank_desc(att, query);
    top_a.truncate(n);
    let mut top_e = rank_desc(&abs, query);
    top_e.truncate(n);
    top_a.sort_unstable();
    let k = top_e.iter().filter(|i| top_a.binary_search(i).is_ok()).count();
    overlap_stats(k, n, n, universe)
}

/// Cosine similarity between rows of a `[G, B]` map.
pub fn cross_attention_gene_similarity<T: Scalar>(cross: &Tensor<T>) -> Result<Tensor<f64>> {
    if cross.rank() != 2 {
        return Err(CdtError::Contract(format!("expected a [G, B] map, got {:?}", cross.shape())));
    }
    let (g, b) = (cross.shape()[0], cross.shape()[1]);
    let rows: Vec<Vec<f64>> = (0..g).map(|i| cross.row(i).iter().map(|v| v.as_f64()).collect()).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(CdtError::Contract(format!("row {i} of the cross-attention map is zero")));
    }
    let mut out = Tensor::<f64>::zeros(vec![g, g]);
    for i in 0..g {
        out.data_mut()[i * g + i] = 1.0;
        for j in i + 1..g {
            let dot: f64 = (0..b).map(|k| rows[i][k] * rows[j][k]).sum();
            let s = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out.data_mut()[i * g + j] = s;
            out.data_mut()[j * g + i] = s;
        }
    }
    Ok(out)
}

/// Weighted gene graph over node indices `0..nodes.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<(usize, usize, f64)>,
    pub directed: bool,
}

/// Keeps off-diagonal entries at or above the `1 − top_fraction` quantile.
///
/// The cut is the value of the `floor(f·G·(G−1))`-th largest entry, so the
/// edge count only exceeds that target through ties at the cut. Zero
/// weights are never kept.
pub fn build_attention_graph<T: Scalar>(m: &Tensor<T>, top_fraction: f64, nodes: &[String]) -> Result<GeneGraph> {
    if !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(CdtError::Config(format!("top_fraction must be in (0, 1), got {top_fraction}")));
    }
    let g = nodes.len();
    if m.shape() != [g, g] {
        return Err(CdtError::shape("build_attention_graph", m.shape(), &[g, g]));
    }
    if m.data().iter().any(|v| !(v.as_f64() >= 0.0)) {
        return Err(CdtError::Contract("attention graph needs a nonnegative matrix".into()));
    }
    let mut off: Vec<f64> = (0..g * g).filter(|i| i / g != i % g).map(|i| m.data()[i].as_f64()).collect();
    let keep = ((top_fraction * off.len() as f64).floor() as usize).max(1).min(off.len().max(1));
    let mut edges = Vec::new();
    if !off.is_empty() {
        off.sort_by(|a, b| b.total_cmp(a));
        let cut = off[keep - 1];
        for i in 0..g {
            for j in 0..g {
                let w = m.data()[i * g + j].as_f64();
                if i != j && w >= cut && w > 0.0 {
                    edges.push((i, j, w));
                }
            }
        }
    }
    Ok(GeneGraph {
        nodes: nodes.to_vec(),
        edges,
        directed: true,
    })
}

/// How directed weights are folded into one undirected weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Symmetrize {
    #[default]
    Max,
    Mean,
}

/// Symmetric adjacency lists, `adj[i]` holding `(j, w)` with `j != i`.
pub fn undirected_adjacency(graph: &GeneGraph, how: Symmetrize) -> Vec<Vec<(usize, f64)>> {
    let mut w: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for &(i, j, x) in &graph.edges {
        if i == j {
            continue;
        }
        let key = (i.min(j), i.max(j));
        let e = w.entry(key).or_insert((0.0, 0.0));
        if i < j {
            e.0 = e.0.max(x);
        } else {
            e.1 = e.1.max(x);
        }
    }
    let mut adj = vec![Vec::new(); graph.nodes.len()];
    for ((i, j), (a, b)) in w {
        let x = match (how, graph.directed) {
            (_, false) | (Symmetrize::Max, true) => a.max(b),
            (Symmetrize::Mean, true) => (a + b) / 2.0,
        };
        if x > 0.0 {
            adj[i].push((j, x));
            adj[j].push((i, x));
        }
    }
    adj
}

/// Community label per node plus its modularity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunityPartition {
    pub membership: Vec<usize>,
    pub modularity: f64,
}

impl CommunityPartition {
    pub fn n_communities(&self) -> usize {
        self.membership.iter().max().map_or(0, |m| m + 1)
    }

    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.membership.len()).filter(|&i| self.membership[i] == c).collect()
    }
}

/// Newman modularity of `membership` on a symmetric adjacency.
pub fn modularity(adj: &[Vec<(usize, f64)>], membership: &[usize], resolution: f64) -> f64 {
    let k: Vec<f64> = adj.iter().map(|r| r.iter().map(|e| e.1).sum()).collect();
    let m2: f64 = k.iter().sum();
    if m2 == 0.0 {
        return 0.0;
    }
    let mut internal = 0.0;
    for (i, row) in adj.iter().enumerate() {
        for &(j, w) in row {
            if membership[i] == membership[j] {
                internal += w;
            }
        }
    }
    let mut tot: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, &c) in membership.iter().enumerate() {
        *tot.entry(c).or_default() += k[i];
    }
    internal / m2 - resolution * tot.values().map(|t| (t / m2).powi(2)).sum::<f64>()
}

/// Weighted graph with self-loops used between Louvain levels. `adj[i]`
/// may contain `(i, w)`, counted once in the degree.
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
}

impl Level {
    fn degrees(&self) -> Vec<f64> {
        self.adj.iter().map(|r| r.iter().map(|e| e.1).sum()).collect()
    }

    /// Local moving phase. Returns the community of every node and whether
    /// any node moved.
    fn local_moves(&self, resolution: f64, order: &[usize]) -> (Vec<usize>, bool) {
        let n = self.adj.len();
        let k = self.degrees();
        let m2: f64 = k.iter().sum();
        let mut comm: Vec<usize> = (0..n).collect();
        let mut tot = k.clone();
        let mut moved_any = false;
        let mut links: BTreeMap<usize, f64> = BTreeMap::new();
        loop {
            let mut moved = false;
            for &i in order {
                links.clear();
                for &(j, w) in &self.adj[i] {
                    if j != i {
                        *links.entry(comm[j]).or_default() += w;
                    }
                }
                let own = comm[i];
                tot[own] -= k[i];
                let gain = |c: usize, l: f64| l - resolution * tot[c] * k[i] / m2;
                let mut best = own;
                let mut best_gain = gain(own, links.get(&own).copied().unwrap_or(0.0));
                for (&c, &l) in &links {
                    let g = gain(c, l);
                    if g > best_gain + 1e-12 {
                        best = c;
                        best_gain = g;
                    }
                }
                tot[best] += k[i];
                if best != own {
                    comm[i] = best;
                    moved = true;
                    moved_any = true;
                }
            }
            if !moved {
                break;
            }
        }
        (comm, moved_any)
    }

    fn aggregate(&self, comm: &[usize], n_comm: usize) -> Level {
        let mut acc: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_comm];
        for (i, row) in self.adj.iter().enumerate() {
            for &(j, w) in row {
                *acc[comm[i]].entry(comm[j]).or_default() += w;
            }
        }
        Level {
            adj: acc.into_iter().map(|m| m.into_iter().collect()).collect(),
        }
    }
}

/// Relabels communities `0..c` by first appearance.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map: HashMap<usize, usize> = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Two-phase Louvain on the max-symmetrized graph. Nodes are visited in a
/// seeded random order at every level.
pub fn louvain_communities(graph: &GeneGraph, resolution: f64, seed: u64, how: Symmetrize) -> Result<CommunityPartition> {
    let adj = undirected_adjacency(graph, how);
    if graph.nodes.is_empty() || adj.iter().all(|r| r.is_empty()) {
        return Err(CdtError::Contract("Louvain needs a graph with at least one edge".into()));
    }
    let mut membership: Vec<usize> = (0..graph.nodes.len()).collect();
    let mut level = Level { adj: adj.clone() };
    let mut best_q = modularity(&adj, &membership, resolution);
    for depth in 0.. {
        let mut order: Vec<usize> = (0..level.adj.len()).collect();
        order.shuffle(&mut sub_rng(seed, 31, depth as u64));
        let (comm, moved) = level.local_moves(resolution, &order);
        if !moved {
            break;
        }
        let (comm, n_comm) = compact(&comm);
        let candidate: Vec<usize> = membership.iter().map(|&c| comm[c]).collect();
        let q = modularity(&adj, &candidate, resolution);
        if q < best_q - 1e-12 {
            break;
        }
        best_q = q;
        membership = candidate;
        level = level.aggregate(&comm, n_comm);
    }
    let (membership, _) = compact(&membership);
    Ok(CommunityPartition {
        modularity: modularity(&adj, &membership, resolution),
        membership,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetEnrichmentRow {
    pub community: usize,
    pub set: String,
    pub community_size: usize,
    pub set_size: usize,
    pub overlap: usize,
    pub p_value: f64,
    pub q_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetEnrichment {
    pub rows: Vec<SetEnrichmentRow>,
    /// Gene sets left out because they were empty.
    pub skipped: Vec<String>,
}

impl SetEnrichment {
    /// Smallest q for `set` across communities.
    pub fn best_for(&self, set: &str) -> Option<&SetEnrichmentRow> {
        self.rows
            .iter()
            .filter(|r| r.set == set)
            .min_by(|a, b| a.q_value.total_cmp(&b.q_value).then(a.community.cmp(&b.community)))
    }
}

/// Hypergeometric test per (community, gene set), BH-adjusted together.
pub fn community_geneset_enrichment(
    partition: &CommunityPartition,
    gene_sets: &BTreeMap<String, Vec<usize>>,
) -> Result<SetEnrichment> {
    let universe = partition.membership.len();
    let mut rows = Vec::new();
    let mut pvals = Vec::new();
    let mut skipped = Vec::new();
    for (name, set) in gene_sets {
        if set.is_empty() {
            skipped.push(name.clone());
            continue;
        }
        if let Some(&g) = set.iter().find(|&&g| g >= universe) {
            return Err(CdtError::Contract(format!("gene set {name} has gene {g} outside the universe")));
        }
        for c in 0..partition.n_communities() {
            let members = partition.members(c);
            let overlap = set.iter().filter(|g| partition.membership[**g] == c).count();
            let p = hypergeom_sf(overlap as u64, universe as u64, set.len() as u64, members.len() as u64)?;
            pvals.push(p);
            rows.push(SetEnrichmentRow {
                community: c,
                set: name.clone(),
                community_size: members.len(),
                set_size: set.len(),
                overlap,
                p_value: p,
                q_value: f64::NAN,
            });
        }
    }
    for (r, q) in rows.iter_mut().zip(bh_adjust(&pvals)?) {
        r.q_value = q;
    }
    Ok(SetEnrichment { rows, skipped })
}

/// Overlap of two gene sets in a universe of `universe` genes.
pub fn convergence_overlap(a: &[usize], b: &[usize], universe: usize) -> Result<Overlap> {
    if a.is_empty() || b.is_empty() {
        return Err(CdtError::Contract("convergence overlap needs two nonempty sets".into()));
    }
    if a.iter().chain(b).any(|&g| g >= universe) {
        return Err(CdtError::Contract("gene outside the universe".into()));
    }
    let mut sa = a.to_vec();
    sa.sort_unstable();
    sa.dedup();
    let mut sb = b.to_vec();
    sb.sort_unstable();
    sb.dedup();
    let k = sb.iter().filter(|g| sa.binary_search(g).is_ok()).count();
    overlap_stats(k, sa.len(), sb.len(), universe)
}

/// Cell-to-cell similarity of one gene's attention row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerCellCorrelation {
    /// Pairwise Pearson r, `None` where a row is constant.
    pub r: Vec<Vec<Option<f64>>>,
    pub mean_r: Option<f64>,
    /// `(gene, variance across cells)`, most variable first.
    pub variable_genes: Vec<(usize, f64)>,
}

/// Head-averaged query row of the last RNA self-attention layer per cell.
pub fn query_rows<T: Scalar>(bundles: &[AttentionBundle<T>], query: usize) -> Result<Vec<Vec<f64>>> {
    bundles
        .iter()
        .map(|b| {
            let t = b
                .rna_self
                .last()
                .ok_or_else(|| CdtError::Contract("bundle has no RNA self-attention layer".into()))?;
            let (h, g) = (t.shape()[0], t.shape()[1]);
            if query >= g {
                return Err(CdtError::Lookup(format!("query gene {query} out of {g}")));
            }
            let mut row = vec![0.0; g];
            for head in 0..h {
                let off = (head * g + query) * g;
                for (r, v) in row.iter_mut().zip(&t.data()[off..off + g]) {
                    *r += v.as_f64() / h as f64;
                }
            }
            Ok(row)
        })
        .collect()
}

pub fn percell_attention_correlation(rows: &[Vec<f64>]) -> Result<PerCellCorrelation> {
    let n = rows.len();
    if n < 2 {
        return Err(CdtError::Contract(format!("need >= 2 cells, got {n}")));
    }
    let g = rows[0].len();
    if rows.iter().any(|r| r.len() != g) {
        return Err(CdtError::Contract("attention rows differ in length".into()));
    }
    let mut r = vec![vec![None; n]; n];
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let self_ok = pearson(&rows[i], &rows[i]).is_ok();
        r[i][i] = self_ok.then_some(1.0);
        for j in i + 1..n {
            let v = pearson(&rows[i], &rows[j]).ok();
            r[i][j] = v;
            r[j][i] = v;
            if let Some(v) = v {
                sum += v;
                count += 1;
            }
        }
    }
    let mut variable_genes: Vec<(usize, f64)> = (0..g)
        .map(|k| {
            let m = rows.iter().map(|row| row[k]).sum::<f64>() / n as f64;
            let v = rows.iter().map(|row| (row[k] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            (k, v)
        })
        .collect();
    variable_genes.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(PerCellCorrelation {
        r,
        mean_r: (count > 0).then(|| sum / count as f64),
        variable_genes,
    })
}

/// `src  dst  weight` per line.
pub fn write_edge_list_tsv<W: Write>(w: &mut W, graph: &GeneGraph) -> Result<()> {
    writeln!(w, "src\tdst\tweight")?;
    for &(i, j, x) in &graph.edges {
        writeln!(w, "{}\t{}\t{:.9e}", graph.nodes[i], graph.nodes[j], x)?;
    }
    Ok(())
}

/// `gene  community` per line.
pub fn write_partition_tsv<W: Write>(w: &mut W, genes: &[String], partition: &CommunityPartition) -> Result<()> {
    writeln!(w, "gene\tcommunity")?;
    for (g, c) in genes.iter().zip(&partition.membership) {
        writeln!(w, "{g}\t{c}")?;
    }
    Ok(())
}
