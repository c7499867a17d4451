//! Optimization of [`ModelParams`] and the evaluation metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::autodiff::{Tape, Var};
use crate::error::{CdtError, Result};
use crate::model::{cell_branch, dna_branch, CheckpointMeta, ModelParams};
use crate::stats::{pearson, spearman};
use crate::tensor::{Scalar, Tensor};
use crate::world::{sub_rng, CellSample, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    /// Epochs without a better validation r before stopping; `None` disables.
    pub early_stop_patience: Option<usize>,
    /// Start the expression projector as a standardization of the training
    /// log1p-CPM values; see [`standardize_expression_projector`].
    pub standardize_input: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Full-scale schedule.
    pub fn full() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 64,
            plateau_factor: 0.5,
            plateau_patience: 10,
            max_epochs: 100,
            early_stop_patience: Some(25),
            standardize_input: true,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            ..TrainConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("clip_norm", self.clip_norm),
            ("plateau_factor", self.plateau_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CdtError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CdtError::Config("weight_decay must be nonnegative".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(CdtError::Config(format!("betas must lie in [0,1), got {:?}", self.betas)));
        }
        if self.batch_size == 0 || self.plateau_patience == 0 || self.early_stop_patience == Some(0) {
            return Err(CdtError::Config("batch_size and patience values must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean squared error over every element.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(CdtError::shape("mse_loss", pred.shape(), target.shape()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2))
        .sum();
    Ok(s / pred.numel() as f64)
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// AdamW with decoupled decay: `θ ← θ − lr·wd·θ`, then the bias-corrected
/// Adam update.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
    names: &[String],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(CdtError::Contract(format!(
            "adamw_step got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(k) = g.iter().position(|v| !v.as_f64().is_finite()) {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            return Err(CdtError::NonFinite(format!(
                "gradient of {name}[{k}] is {} at step {}",
                g[k].as_f64(),
                state.t + 1
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let shrink = 1.0 - lr * cfg.weight_decay;
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64();
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            let theta = x.as_f64() * shrink - lr * mhat / (vhat.sqrt() + cfg.eps);
            *x = T::lit(theta);
        }
    }
    Ok(())
}

/// Halves (by `factor`) the learning rate after `patience` calls without a
/// strict improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Returns true when the learning rate was reduced.
    pub fn step(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Rescales all gradients together when their global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v = T::lit(v.as_f64() * s);
        }
    }
    norm
}

/// Evaluation summary. Correlations that are undefined are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cell_level_pearson: Option<f64>,
    pub cell_level_spearman: Option<f64>,
    pub per_gene_pseudobulk_pearson: BTreeMap<String, Option<f64>>,
    pub mean_pseudobulk_r: Option<f64>,
    pub train_val_gap: Option<f64>,
}

impl EvalReport {
    /// Records `train.cell_level_pearson − self.cell_level_pearson`.
    pub fn with_gap(mut self, train: &EvalReport) -> Self {
        self.train_val_gap = match (train.cell_level_pearson, self.cell_level_pearson) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        self
    }
}

fn defined(r: Result<f64>) -> Option<f64> {
    r.ok().filter(|v| v.is_finite())
}

/// Metrics from precomputed predictions, one `[G]` row per cell.
pub fn evaluate_predictions(preds: &[Vec<f32>], cells: &[&CellSample]) -> Result<EvalReport> {
    if cells.len() < 2 || preds.len() != cells.len() {
        return Err(CdtError::Contract(format!(
            "evaluation needs >= 2 cells with one prediction each (got {} cells, {} predictions)",
            cells.len(),
            preds.len()
        )));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        if preds[i].len() != c.target.len() {
            return Err(CdtError::shape("evaluate", &[preds[i].len()], &[c.target.len()]));
        }
        groups.entry(c.perturbed.as_str()).or_default().push(i);
    }
    if let Some((g, idx)) = groups.iter().find(|(_, v)| v.len() < 2) {
        return Err(CdtError::Contract(format!("{g} has {} evaluation cell(s), need >= 2", idx.len())));
    }
    let flat_p: Vec<f64> = preds.iter().flatten().map(|&v| v as f64).collect();
    let flat_t: Vec<f64> = cells.iter().flat_map(|c| c.target.iter().map(|&v| v as f64)).collect();
    let mut per_gene = BTreeMap::new();
    for (g, idx) in &groups {
        let n = cells[0].target.len();
        let mut mp = vec![0.0; n];
        let mut mt = vec![0.0; n];
        for &i in idx {
            for j in 0..n {
                mp[j] += preds[i][j] as f64;
                mt[j] += cells[i].target[j] as f64;
            }
        }
        per_gene.insert(g.to_string(), defined(pearson(&mp, &mt)));
    }
    let rs: Vec<f64> = per_gene.values().flatten().copied().collect();
    Ok(EvalReport {
        cell_level_pearson: defined(pearson(&flat_p, &flat_t)),
        cell_level_spearman: defined(spearman(&flat_p, &flat_t)),
        mean_pseudobulk_r: (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64),
        per_gene_pseudobulk_pearson: per_gene,
        train_val_gap: None,
    })
}

/// Eval-mode predictions, reusing the DNA branch across cells of a locus.
pub fn predict(params: &ModelParams<f32>, loci: &[Tensor<f32>], cells: &[&CellSample]) -> Result<Vec<Vec<f32>>> {
    let config = params.config();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let mut dna_cache: HashMap<usize, Var> = HashMap::new();
    let mut out = Vec::with_capacity(cells.len());
    for c in cells {
        let dna = match dna_cache.get(&c.locus) {
            Some(&v) => v,
            None => {
                let t = loci
                    .get(c.locus)
                    .ok_or_else(|| CdtError::Lookup(format!("locus {} has no DNA embedding", c.locus)))?;
                let x = tape.constant(t.clone());
                let v = dna_branch(&mut tape, &b, config, x, &mut None)?.out;
                dna_cache.insert(c.locus, v);
                v
            }
        };
        let base = tape.len();
        let expr = tape.constant(Tensor::new(vec![c.expr.len()], c.expr.clone())?);
        let cp = cell_branch(&mut tape, &b, config, dna, expr, &mut None)?;
        out.push(tape.value(cp.pred).data().to_vec());
        tape.truncate(base);
    }
    Ok(out)
}

/// Predicts and scores `cells`.
pub fn evaluate_metrics(params: &ModelParams<f32>, loci: &[Tensor<f32>], cells: &[&CellSample]) -> Result<EvalReport> {
    let preds = predict(params, loci, cells)?;
    evaluate_predictions(&preds, cells)
}

/// Fails when a validation perturbation target also appears in training.
pub fn check_leakage(split: &Split) -> Result<()> {
    let train: BTreeSet<&str> = split.train.iter().map(|c| c.perturbed.as_str()).collect();
    let leaked: BTreeSet<&str> = split
        .val
        .iter()
        .map(|c| c.perturbed.as_str())
        .filter(|p| train.contains(p))
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(CdtError::Leakage(format!(
            "validation genes also perturbed in training: {}",
            leaked.into_iter().collect::<Vec<_>>().join(", ")
        )))
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Cell-level r of the training-mode predictions made during the epoch.
    pub train_r: Option<f64>,
    pub val_r: Option<f64>,
}

/// Result of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation r.
    pub best: ModelParams<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochMetrics>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

/// Forward and backward over one mini-batch. Returns the batch loss, the
/// gradients per parameter tensor and the predictions.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    loci: &[Tensor<f32>],
    cells: &[&CellSample],
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(f64, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    if cells.is_empty() {
        return Err(CdtError::Contract("empty batch".into()));
    }
    let config = params.config();
    let scale = 1.0 / cells.len() as f32;
    let mut grads: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut value = 0.0;
    let mut preds = Vec::with_capacity(cells.len());
    // One small tape per cell keeps the working set in cache.
    for c in cells {
        let dna = loci
            .get(c.locus)
            .ok_or_else(|| CdtError::Lookup(format!("locus {} has no DNA embedding", c.locus)))?;
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, true);
        let x = tape.constant(dna.clone());
        let dna_out = dna_branch(&mut tape, &b, config, x, dropout)?.out;
        let g = c.expr.len();
        let expr = tape.constant(Tensor::new(vec![g], c.expr.clone())?);
        let target = tape.constant(Tensor::new(vec![1, g], c.target.clone())?);
        let cp = cell_branch(&mut tape, &b, config, dna_out, expr, dropout)?;
        let loss = tape.mse(cp.pred, target)?;
        value += tape.value(loss).data()[0] as f64;
        preds.push(tape.value(cp.pred).data().to_vec());
        let vars = b.vars().to_vec();
        tape.backward(loss)?;
        for (acc, &v) in grads.iter_mut().zip(&vars) {
            if let Some(gv) = tape.grad(v) {
                acc.iter_mut().zip(gv).for_each(|(a, &d)| *a += d * scale);
            }
        }
    }
    Ok((value / cells.len() as f64, grads, preds))
}

fn cell_r(preds: &[Vec<f32>], cells: &[&CellSample]) -> Option<f64> {
    let p: Vec<f64> = preds.iter().flatten().map(|&v| v as f64).collect();
    let t: Vec<f64> = cells.iter().flat_map(|c| c.target.iter().map(|&v| v as f64)).collect();
    defined(pearson(&p, &t))
}

const STREAM_SHUFFLE: u64 = 21;
const STREAM_DROPOUT: u64 = 22;
const STREAM_EXPR_INIT: u64 = 23;

/// Data-dependent start for the shared expression projector: with `μ`, `σ`
/// the mean and sd of every log1p-CPM value in `cells`, the affine map
/// becomes `x ↦ (x − μ)/σ · w`, `w ~ N(0, 1)` per component.
///
/// Without it all genes sit near `ln(1e6/G)`, far above their within-gene
/// spread, and the layer norm after the projection hides most of the
/// expression signal.
pub fn standardize_expression_projector(params: &mut ModelParams<f32>, cells: &[CellSample], seed: u64) -> Result<()> {
    let n: usize = cells.iter().map(|c| c.expr.len()).sum();
    if n < 2 {
        return Err(CdtError::Contract("standardizing the input needs training cells".into()));
    }
    let mean = cells.iter().flat_map(|c| &c.expr).map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = cells.iter().flat_map(|c| &c.expr).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(CdtError::Contract("training expression is constant".into()));
    }
    let sd = var.sqrt();
    let nrm = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = sub_rng(seed, STREAM_EXPR_INIT, 0);
    let w: Vec<f64> = (0..params.get("expr.weight")?.numel()).map(|_| nrm.sample(&mut rng) / sd).collect();
    for (dst, v) in params.get_mut("expr.weight")?.data_mut().iter_mut().zip(&w) {
        *dst = *v as f32;
    }
    for (dst, v) in params.get_mut("expr.bias")?.data_mut().iter_mut().zip(&w) {
        *dst = (-v * mean) as f32;
    }
    Ok(())
}

/// Full training recipe: seeded shuffling, AdamW, gradient clipping,
/// plateau scheduling on validation loss, best-validation-r retention and
/// early stopping. With `out` set, writes the metrics log and the best
/// checkpoint there.
pub fn train_loop(
    init: &ModelParams<f32>,
    loci: &[Tensor<f32>],
    split: &Split,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_leakage(split)?;
    let mut params = init.clone();
    if cfg.standardize_input {
        standardize_expression_projector(&mut params, &split.train, cfg.seed)?;
    }
    let mut best = params.clone();
    let mut best_r = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut state = AdamState::new(params.tensors());
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut since_best = 0;
    let mut drop_rng = sub_rng(cfg.seed, STREAM_DROPOUT, 0);
    let val: Vec<&CellSample> = split.val.iter().collect();
    let names = params.names().to_vec();
    let p_drop = params.config().dropout_p;

    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut sub_rng(cfg.seed, STREAM_SHUFFLE, epoch as u64));
        let mut loss_sum = 0.0;
        let mut seen_cells: Vec<&CellSample> = Vec::with_capacity(order.len());
        let mut seen_preds = Vec::with_capacity(order.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&CellSample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let mut dropout = (p_drop > 0.0).then(|| Dropout {
                p: p_drop,
                rng: &mut drop_rng,
            });
            let (loss, mut grads, preds) = batch_gradients(&params, loci, &batch, &mut dropout)?;
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adamw_step(params.tensors_mut(), &grads, &mut state, cfg, sched.lr, &names)?;
            loss_sum += loss * batch.len() as f64;
            seen_cells.extend(batch);
            seen_preds.extend(preds);
        }
        let train_loss = if seen_cells.is_empty() {
            f64::NAN
        } else {
            loss_sum / seen_cells.len() as f64
        };
        let train_r = cell_r(&seen_preds, &seen_cells);

        let (val_loss, val_r) = if val.is_empty() {
            (None, None)
        } else {
            let vp = predict(&params, loci, &val)?;
            let mut s = 0.0;
            for (p, c) in vp.iter().zip(&val) {
                s += p.iter().zip(&c.target).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / p.len() as f64;
            }
            (Some(s / val.len() as f64), cell_r(&vp, &val))
        };
        let m = EpochMetrics {
            epoch,
            lr: sched.lr,
            train_loss,
            val_loss,
            train_r,
            val_r,
        };
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        log.push(m);
        if !train_loss.is_finite() {
            return Err(CdtError::NonFinite(format!("training loss diverged at epoch {epoch}")));
        }

        let score = val_r.unwrap_or(f64::NEG_INFINITY);
        if score > best_r || (val.is_empty() && epoch == cfg.max_epochs) {
            best_r = score;
            best = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(v) = val_loss {
            sched.step(v);
        }
        if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }

    if let Some(dir) = out {
        let meta = CheckpointMeta {
            seed: cfg.seed,
            epoch: best_epoch,
            extra: serde_json::to_value(cfg)?,
        };
        best.save_checkpoint(&dir.join(CHECKPOINT_FILE), &meta)?;
    }
    Ok(TrainOutcome { best, best_epoch, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_cases() {
        let a = Tensor::<f64>::from_fn(vec![3, 4], |i| i as f64 * 0.1);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((mse_loss(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!(mse_loss(&a, &Tensor::zeros(vec![4, 3])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::<f64>::from_fn(vec![5, 7], |_| rng.random::<f64>());
        let t = Tensor::<f64>::from_fn(vec![5, 7], |_| rng.random::<f64>());
        let mut s = 0.0;
        for i in 0..5 {
            for j in 0..7 {
                s += (p.at(&[i, j]) - t.at(&[i, j])).powi(2);
            }
        }
        assert!((mse_loss(&p, &t).unwrap() - s / 35.0).abs() < 1e-7);
    }

    #[test]
    fn standardized_projector_centers_and_scales() {
        let c = ModelConfig { n_genes: 6, n_bins: 4, dna_embed_dim: 3, model_dim: 8, heads: 2, ffn_dim: 8, task_hidden_dim: 4, ..ModelConfig::desk() };
        let mut p = ModelParams::<f32>::init(&c, 1).unwrap();
        let cells: Vec<CellSample> = (0..4)
            .map(|i| CellSample {
                cell_id: i,
                locus: 0,
                perturbed: "G000".into(),
                expr: (0..6).map(|j| 8.0 + 0.1 * (i * 6 + j) as f32).collect(),
                target: vec![0.0; 6],
            })
            .collect();
        standardize_expression_projector(&mut p, &cells, 3).unwrap();
        let xs: Vec<f64> = cells.iter().flat_map(|c| &c.expr).map(|&v| v as f64).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        let (w, b) = (p.get("expr.weight").unwrap(), p.get("expr.bias").unwrap());
        for (wk, bk) in w.data().iter().zip(b.data()) {
            let at_mean = *wk as f64 * mean + *bk as f64;
            let at_sd = *wk as f64 * (mean + sd) + *bk as f64;
            assert!(at_mean.abs() < 1e-4, "{at_mean}");
            assert!((at_sd - *wk as f64 * sd).abs() < 1e-4);
        }
        let again = {
            let mut q = ModelParams::<f32>::init(&c, 1).unwrap();
            standardize_expression_projector(&mut q, &cells, 3).unwrap();
            q
        };
        assert_eq!(again.tensors(), p.tensors());
        assert!(standardize_expression_projector(&mut p, &[], 3).is_err());
    }

    fn cfg(wd: f64) -> TrainConfig {
        TrainConfig {
            weight_decay: wd,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn adamw_zero_grad() {
        let mut p = vec![Tensor::<f64>::full(vec![3], 2.0)];
        let g = vec![vec![0.0; 3]];
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut st, &cfg(0.0), 1e-3, &[]).unwrap();
        assert_eq!(p[0].data(), &[2.0, 2.0, 2.0]);
        adamw_step(&mut p, &g, &mut st, &cfg(0.1), 1e-3, &[]).unwrap();
        assert!(p[0].data().iter().all(|&v| (v - 2.0 * (1.0 - 1e-4)).abs() < 1e-15));
    }

    #[test]
    fn adamw_single_step_closed_form() {
        let c = cfg(0.01);
        let mut p = vec![Tensor::<f64>::full(vec![1], 1.0)];
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &[vec![1.0]], &mut st, &c, 0.1, &[]).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expect = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_nan() {
        let mut p = vec![Tensor::<f64>::full(vec![2], 1.0)];
        let mut st = AdamState::new(&p);
        let err = adamw_step(&mut p, &[vec![0.0, f64::NAN]], &mut st, &cfg(0.0), 0.1, &["w".into()]).unwrap_err();
        assert!(err.to_string().contains("w[1]"), "{err}");
        assert_eq!(p[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn plateau_cases() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 10);
        for k in 0..30 {
            s.step(10.0 - k as f64);
        }
        assert_eq!(s.lr, 1.0);

        // The first call improves on +inf; the next ten do not.
        let mut s = PlateauScheduler::new(1.0, 0.5, 10);
        let halvings = (0..11).filter(|_| s.step(3.0)).count();
        assert_eq!(halvings, 1);
        assert_eq!(s.lr, 0.5);

        let mut s = PlateauScheduler::new(1.0, 0.5, 1);
        s.step(1.0);
        s.step(1.0);
        s.step(1.0);
        assert_eq!(s.lr, 0.25);
    }

    #[test]
    fn clip_cases() {
        let mut g = vec![vec![0.3f64, 0.4]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 0.5);
        assert_eq!(g, vec![vec![0.3, 0.4]]);
        let mut g = vec![vec![1.2f64], vec![1.6]];
        let before = g.clone();
        assert!((clip_grad_norm(&mut g, 1.0) - 2.0).abs() < 1e-12);
        let n: f64 = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let dot: f64 = before.iter().flatten().zip(g.iter().flatten()).map(|(a, b)| a * b).sum();
        assert!((dot / (2.0 * n) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn zero_lr_only_shrinks(vals in proptest::collection::vec(-5.0f64..5.0, 1..20), wd in 0.0f64..0.1) {
            let mut p = vec![Tensor::new(vec![vals.len()], vals.clone()).unwrap()];
            let g = vec![vals.iter().map(|v| v * 3.0 + 1.0).collect::<Vec<_>>()];
            let mut st = AdamState::new(&p);
            adamw_step(&mut p, &g, &mut st, &cfg(wd), 0.0, &[]).unwrap();
            prop_assert_eq!(p[0].data(), vals.as_slice());
        }

        #[test]
        fn clipped_norm_never_exceeds_max(vals in proptest::collection::vec(-10.0f64..10.0, 1..30), max in 0.1f64..5.0) {
            let mut g = vec![vals];
            clip_grad_norm(&mut g, max);
            let n: f64 = g[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n <= max * (1.0 + 1e-12));
        }
    }

    fn cell(id: usize, gene: &str, target: Vec<f32>) -> CellSample {
        CellSample {
            cell_id: id,
            locus: 0,
            perturbed: gene.into(),
            expr: vec![0.0; target.len()],
            target,
        }
    }

    #[test]
    fn evaluation_identities() {
        let cells: Vec<CellSample> = (0..6)
            .map(|i| cell(i, ["a", "b"][i % 2], (0..5).map(|j| ((i * 5 + j) as f32 * 0.7).sin()).collect()))
            .collect();
        let refs: Vec<&CellSample> = cells.iter().collect();
        let same: Vec<Vec<f32>> = cells.iter().map(|c| c.target.clone()).collect();
        let r = evaluate_predictions(&same, &refs).unwrap();
        assert!((r.cell_level_pearson.unwrap() - 1.0).abs() < 1e-9);
        assert!((r.cell_level_spearman.unwrap() - 1.0).abs() < 1e-9);
        assert!(r.per_gene_pseudobulk_pearson.values().all(|v| (v.unwrap() - 1.0).abs() < 1e-9));
        let neg: Vec<Vec<f32>> = same.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        let r = evaluate_predictions(&neg, &refs).unwrap();
        assert!((r.cell_level_pearson.unwrap() + 1.0).abs() < 1e-9);
        assert!((r.mean_pseudobulk_r.unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn evaluation_matches_flat_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cells: Vec<CellSample> = (0..12)
            .map(|i| cell(i, ["a", "b", "c"][i % 3], (0..9).map(|_| rng.random::<f32>()).collect()))
            .collect();
        let preds: Vec<Vec<f32>> = (0..12).map(|_| (0..9).map(|_| rng.random::<f32>()).collect()).collect();
        let refs: Vec<&CellSample> = cells.iter().collect();
        let r = evaluate_predictions(&preds, &refs).unwrap();

        let loop_r = |x: &[f64], y: &[f64]| {
            let n = x.len() as f64;
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..x.len() {
                sx += x[i];
                sy += y[i];
            }
            let (mx, my) = (sx / n, sy / n);
            for i in 0..x.len() {
                sxx += (x[i] - mx) * (x[i] - mx);
                syy += (y[i] - my) * (y[i] - my);
                sxy += (x[i] - mx) * (y[i] - my);
            }
            sxy / (sxx * syy).sqrt()
        };
        let mut fp = Vec::new();
        let mut ft = Vec::new();
        for i in 0..12 {
            for j in 0..9 {
                fp.push(preds[i][j] as f64);
                ft.push(cells[i].target[j] as f64);
            }
        }
        assert!((r.cell_level_pearson.unwrap() - loop_r(&fp, &ft)).abs() < 1e-10);
        for (k, g) in ["a", "b", "c"].iter().enumerate() {
            let mut mp = vec![0.0; 9];
            let mut mt = vec![0.0; 9];
            for i in (k..12).step_by(3) {
                for j in 0..9 {
                    mp[j] += preds[i][j] as f64 / 4.0;
                    mt[j] += cells[i].target[j] as f64 / 4.0;
                }
            }
            let got = r.per_gene_pseudobulk_pearson[*g].unwrap();
            assert!((got - loop_r(&mp, &mt)).abs() < 1e-10);
        }
    }

    #[test]
    fn evaluation_contracts() {
        let cells = [cell(0, "a", vec![1.0, 1.0, 1.0]), cell(1, "a", vec![1.0, 1.0, 1.0])];
        let refs: Vec<&CellSample> = cells.iter().collect();
        let preds = vec![vec![0.0, 1.0, 2.0]; 2];
        let r = evaluate_predictions(&preds, &refs).unwrap();
        assert_eq!(r.cell_level_pearson, None);
        assert_eq!(r.per_gene_pseudobulk_pearson["a"], None);
        assert_eq!(r.mean_pseudobulk_r, None);
        assert!(evaluate_predictions(&preds[..1], &refs[..1]).is_err());
        let lone = [cells[0].clone(), cell(2, "b", vec![0.0, 1.0, 2.0])];
        let lone: Vec<&CellSample> = lone.iter().collect();
        assert!(evaluate_predictions(&preds, &lone).is_err());
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_genes: 6,
            n_bins: 5,
            dna_embed_dim: 4,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            dropout_p: 0.0,
            n_dna_layers: 2,
            n_rna_layers: 1,
            vce_pool_heads: 2,
            task_hidden_dim: 16,
            positional_encoding: false,
            ln_eps: 1e-5,
        }
    }

    fn tiny_data(n: usize) -> (Vec<Tensor<f32>>, Vec<CellSample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let loci: Vec<Tensor<f32>> = (0..2).map(|_| Tensor::from_fn(vec![5, 4], |_| rng.random::<f32>() - 0.5)).collect();
        let cells = (0..n)
            .map(|i| CellSample {
                cell_id: i,
                locus: i % 2,
                perturbed: format!("g{}", i % 2),
                expr: (0..6).map(|_| rng.random::<f32>() * 3.0).collect(),
                target: (0..6).map(|j| if i % 2 == 0 { j as f32 * 0.3 } else { -(j as f32) * 0.2 } + 0.5).collect(),
            })
            .collect();
        (loci, cells)
    }

    #[test]
    fn leakage_aborts() {
        let (loci, cells) = tiny_data(4);
        let split = Split {
            train: cells.clone(),
            val: cells[..1].to_vec(),
        };
        let p = ModelParams::init(&tiny(), 1).unwrap();
        let err = train_loop(&p, &loci, &split, &TrainConfig::desk(), None).unwrap_err();
        assert!(matches!(err, CdtError::Leakage(_)));
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (loci, cells) = tiny_data(4);
        let split = Split { train: cells, val: vec![] };
        let p = ModelParams::init(&tiny(), 1).unwrap();
        let out = train_loop(
            &p,
            &loci,
            &split,
            &TrainConfig {
                max_epochs: 0,
                ..TrainConfig::desk()
            },
            None,
        )
        .unwrap();
        let mut expect = p.clone();
        standardize_expression_projector(&mut expect, &split.train, 0).unwrap();
        assert_eq!(out.best.tensors(), expect.tensors());
        assert!(out.log.is_empty());
    }

    #[test]
    fn overfits_ten_cells_and_is_deterministic() {
        let (loci, cells) = tiny_data(10);
        let split = Split {
            train: cells[..8].to_vec(),
            val: vec![],
        };
        let p = ModelParams::init(&tiny(), 3).unwrap();
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 4,
            max_epochs: 200,
            early_stop_patience: None,
            ..TrainConfig::desk()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = train_loop(&p, &loci, &split, &cfg, Some(dir.path())).unwrap();
        let first = a.log[0].train_loss;
        let last = a.log.last().unwrap().train_loss;
        assert!(last <= 0.5 * first, "{first} -> {last}");
        let b = train_loop(&p, &loci, &split, &cfg, None).unwrap();
        assert_eq!(a.log, b.log);
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 200);
        let first_line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["epoch", "lr", "train_loss", "val_loss", "train_r", "val_r"] {
            assert!(first_line.get(key).is_some(), "{key}");
        }
        let (restored, meta) = ModelParams::<f32>::load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(meta.epoch, a.best_epoch);
        assert_eq!(restored.tensors(), a.best.tensors());
    }

    #[test]
    fn best_checkpoint_tracks_validation_r() {
        let (loci, cells) = tiny_data(12);
        let split = Split {
            train: cells.iter().filter(|c| c.cell_id < 8).cloned().collect(),
            val: cells.iter().filter(|c| c.cell_id >= 8).cloned().map(|mut c| {
                c.perturbed = format!("h{}", c.cell_id % 2);
                c
            }).collect(),
        };
        let p = ModelParams::init(&tiny(), 5).unwrap();
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 4,
            max_epochs: 30,
            early_stop_patience: Some(5),
            ..TrainConfig::desk()
        };
        let out = train_loop(&p, &loci, &split, &cfg, None).unwrap();
        let best = out
            .log
            .iter()
            .filter_map(|m| m.val_r.map(|r| (m.epoch, r)))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        assert_eq!(out.best_epoch, best.0);
        let val: Vec<&CellSample> = split.val.iter().collect();
        let r = evaluate_metrics(&out.best, &loci, &val).unwrap().cell_level_pearson.unwrap();
        assert!((r - best.1).abs() < 1e-9);
        let last = out.log.len();
        assert!(last == 30 || last - out.best_epoch == 5);
    }
}
