//! Input-gradient attribution: how strongly each predicted gene responds to
//! each input gene's expression.

use std::io::Write;

use crate::autodiff::Tape;
use crate::error::{CdtError, Result};
use crate::model::{cell_branch, dna_branch, task_head, ModelParams};
use crate::stats::pearson;
use crate::tensor::{Scalar, Tensor};
use crate::world::CellSample;

/// `grad[i, j]` is the cell-averaged `|∂pred_j / ∂expr_i|` (or the signed
/// derivative), taken with respect to the log1p-CPM input.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMatrix {
    pub grad: Tensor<f64>,
    pub cells_used: usize,
    /// Output genes that were differentiated; other columns are zero.
    pub outputs: Vec<usize>,
    pub signed: bool,
}

/// Jacobian `∂pred_j / ∂expr_i` for one cell as `[G_in][j]` over `outputs`.
///
/// The head only sees the `[1, d]` cell embedding, so the Jacobian is built
/// as (head Jacobian) x (embedding Jacobian): `d` pulls through the encoder
/// plus one cheap pull per output through the head.
pub fn cell_jacobian<T: Scalar>(
    params: &ModelParams<T>,
    dna: &Tensor<T>,
    cell: &CellSample,
    outputs: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let config = params.config();
    let g = config.n_genes;
    if cell.expr.len() != g {
        return Err(CdtError::shape("cell_jacobian", &[cell.expr.len()], &[g]));
    }
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let x = tape.constant(dna.clone());
    let dna_out = dna_branch(&mut tape, &b, config, x, &mut None)?.out;
    let expr: Vec<T> = cell.expr.iter().map(|&v| T::lit(v as f64)).collect();
    let expr = tape.param(Tensor::new(vec![g], expr)?);
    let cp = cell_branch(&mut tape, &b, config, dna_out, expr, &mut None)?;
    let d = tape.value(cp.vce).numel();

    // embedding Jacobian, emb[k][i] = ∂vce_k / ∂expr_i
    let mut emb = vec![vec![0.0; g]; d];
    let mut seed = vec![T::zero(); d];
    for (k, row) in emb.iter_mut().enumerate() {
        seed.fill(T::zero());
        seed[k] = T::one();
        if let Some(gr) = &tape.vjp(cp.vce, &seed)?[expr.index()] {
            row.iter_mut().zip(gr).for_each(|(r, v)| *r = v.as_f64());
        }
    }

    let vce = tape.param(tape.value(cp.vce).clone());
    let pred = task_head(&mut tape, &b, config, vce)?;
    let mut out = vec![vec![0.0; outputs.len()]; g];
    let mut seed = vec![T::zero(); g];
    for (col, &j) in outputs.iter().enumerate() {
        if j >= g {
            return Err(CdtError::Lookup(format!("output gene {j} out of {g}")));
        }
        seed.fill(T::zero());
        seed[j] = T::one();
        let Some(head) = tape.vjp(pred, &seed)?[vce.index()].clone() else {
            continue;
        };
        for (k, h) in head.iter().enumerate() {
            let h = h.as_f64();
            if h != 0.0 {
                for (i, row) in out.iter_mut().enumerate() {
                    row[col] += h * emb[k][i];
                }
            }
        }
    }
    Ok(out)
}

/// Averages per-cell Jacobians over `cells` with dropout off.
/// `gene_subset` limits the output genes; `None` means all of them.
pub fn input_gradient_matrix<T: Scalar>(
    params: &ModelParams<T>,
    loci: &[Tensor<T>],
    cells: &[&CellSample],
    gene_subset: Option<&[usize]>,
    signed: bool,
) -> Result<AttributionMatrix> {
    if cells.is_empty() {
        return Err(CdtError::Contract("attribution needs at least one cell".into()));
    }
    let g = params.config().n_genes;
    let outputs: Vec<usize> = gene_subset.map_or_else(|| (0..g).collect(), <[usize]>::to_vec);
    let mut grad = Tensor::<f64>::zeros(vec![g, g]);
    let w = 1.0 / cells.len() as f64;
    for c in cells {
        let dna = loci
            .get(c.locus)
            .ok_or_else(|| CdtError::Lookup(format!("locus {} has no DNA embedding", c.locus)))?;
        let jac = cell_jacobian(params, dna, c, &outputs)?;
        let data = grad.data_mut();
        for (i, row) in jac.iter().enumerate() {
            for (col, &j) in outputs.iter().enumerate() {
                let v = if signed { row[col] } else { row[col].abs() };
                data[i * g + j] += w * v;
            }
        }
    }
    if !grad.all_finite() {
        return Err(CdtError::NonFinite("attribution matrix".into()));
    }
    Ok(AttributionMatrix {
        grad,
        cells_used: cells.len(),
        outputs,
        signed,
    })
}

/// Pearson r between attribution and a `[G, G]` reference over the
/// off-diagonal entries of the differentiated output columns.
pub fn attribution_correlation(attr: &AttributionMatrix, reference: &Tensor<f64>) -> Result<f64> {
    let g = attr.grad.shape()[0];
    if reference.shape() != attr.grad.shape() {
        return Err(CdtError::shape("attribution_correlation", attr.grad.shape(), reference.shape()));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..g {
        for &j in &attr.outputs {
            if i != j {
                x.push(attr.grad.data()[i * g + j]);
                y.push(reference.data()[i * g + j]);
            }
        }
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(CdtError::Undefined("reference is constant off the diagonal".into()));
    }
    pearson(&x, &y)
}

/// `input  output  value` for every nonzero entry.
pub fn write_attribution_tsv<W: Write>(w: &mut W, genes: &[String], attr: &AttributionMatrix) -> Result<()> {
    let g = genes.len();
    writeln!(w, "input\toutput\tvalue")?;
    for i in 0..g {
        for &j in &attr.outputs {
            let v = attr.grad.data()[i * g + j];
            if v != 0.0 {
                writeln!(w, "{}\t{}\t{v:.9e}", genes[i], genes[j])?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_genes: 12,
            n_bins: 8,
            dna_embed_dim: 6,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            task_hidden_dim: 10,
            ..ModelConfig::desk()
        }
    }

    fn cell(g: usize, seed: u64) -> CellSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CellSample {
            cell_id: seed as usize,
            locus: 0,
            perturbed: "G000".into(),
            expr: (0..g).map(|_| rng.random_range(0.0..3.0)).collect(),
            target: vec![0.0; g],
        }
    }

    fn locus(c: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![c.n_bins, c.dna_embed_dim], |_| rng.random_range(-1.0..1.0))
    }

    fn predict_one(p: &ModelParams<f64>, dna: &Tensor<f64>, expr: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(dna.clone());
        let d = dna_branch(&mut tape, &b, p.config(), x, &mut None).unwrap().out;
        let e = tape.constant(Tensor::new(vec![expr.len()], expr.to_vec()).unwrap());
        let cp = cell_branch(&mut tape, &b, p.config(), d, e, &mut None).unwrap();
        tape.value(cp.pred).data().to_vec()
    }

    #[test]
    fn zero_output_head_gives_zero_matrix() {
        let c = tiny();
        let mut p = ModelParams::<f64>::init(&c, 1).unwrap();
        p.get_mut("head.fc2.weight").unwrap().data_mut().fill(0.0);
        let cells = [cell(12, 1), cell(12, 2)];
        let refs: Vec<&CellSample> = cells.iter().collect();
        let a = input_gradient_matrix(&p, &[locus(&c, 3)], &refs, None, false).unwrap();
        assert!(a.grad.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.cells_used, 2);
    }

    #[test]
    fn matches_finite_differences() {
        let c = tiny();
        let p = ModelParams::<f64>::init(&c, 5).unwrap();
        let dna = locus(&c, 6);
        let cl = cell(12, 7);
        let a = input_gradient_matrix(&p, &[dna.clone()], &[&cl], None, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-5;
        for _ in 0..5 {
            let (i, j) = (rng.random_range(0..12), rng.random_range(0..12));
            let base: Vec<f64> = cl.expr.iter().map(|&v| v as f64).collect();
            let mut up = base.clone();
            up[i] += h;
            let mut dn = base.clone();
            dn[i] -= h;
            let num = (predict_one(&p, &dna, &up)[j] - predict_one(&p, &dna, &dn)[j]) / (2.0 * h);
            let ana = a.grad.at(&[i, j]);
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(rel < 1e-3, "({i},{j}) analytic {ana} numeric {num}");
        }
    }

    #[test]
    fn one_cell_average_is_that_cell() {
        let c = tiny();
        let p = ModelParams::<f64>::init(&c, 2).unwrap();
        let dna = locus(&c, 4);
        let cl = cell(12, 9);
        let a = input_gradient_matrix(&p, &[dna.clone()], &[&cl], None, false).unwrap();
        let outputs: Vec<usize> = (0..12).collect();
        let jac = cell_jacobian(&p, &dna, &cl, &outputs).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(a.grad.at(&[i, j]), jac[i][j].abs());
            }
        }
        assert!(input_gradient_matrix(&p, &[dna], &[], None, false).is_err());
    }

    #[test]
    fn subset_fills_only_requested_columns() {
        let c = tiny();
        let p = ModelParams::<f64>::init(&c, 2).unwrap();
        let dna = locus(&c, 4);
        let cl = cell(12, 9);
        let full = input_gradient_matrix(&p, &[dna.clone()], &[&cl], None, false).unwrap();
        let sub = input_gradient_matrix(&p, &[dna], &[&cl], Some(&[3, 7]), false).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let expect = if j == 3 || j == 7 { full.grad.at(&[i, j]) } else { 0.0 };
                assert_eq!(sub.grad.at(&[i, j]), expect);
            }
        }
    }

    fn random_attr(seed: u64, g: usize) -> AttributionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttributionMatrix {
            grad: Tensor::from_fn(vec![g, g], |_| rng.random()),
            cells_used: 1,
            outputs: (0..g).collect(),
            signed: false,
        }
    }

    #[test]
    fn correlation_self_and_permuted_null() {
        use rand::seq::SliceRandom;
        let a = random_attr(1, 30);
        assert!((attribution_correlation(&a, &a.grad).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0.0;
        for _ in 0..50 {
            let mut v = a.grad.data().to_vec();
            v.shuffle(&mut rng);
            total += attribution_correlation(&a, &Tensor::new(vec![30, 30], v).unwrap()).unwrap();
        }
        assert!((total / 50.0).abs() < 0.02, "{}", total / 50.0);
        let mut flat = Tensor::<f64>::full(vec![30, 30], 0.2);
        flat.data_mut()[0] = 5.0;
        assert!(matches!(attribution_correlation(&a, &flat), Err(CdtError::Undefined(_))));
    }
}
