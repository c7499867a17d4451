//! The dual-modality network: DNA and RNA encoders, self- and cross-attention,
//! virtual cell embedding and task head.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{maybe_dropout, multi_head_attention, AttentionVars, Dropout};
use crate::autodiff::{Tape, Var};
use crate::error::{CdtError, Result};
use crate::tensor::{Scalar, Tensor};
use crate::world::CellSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_genes: usize,
    pub n_bins: usize,
    pub dna_embed_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
    pub n_dna_layers: usize,
    pub n_rna_layers: usize,
    pub vce_pool_heads: usize,
    pub task_hidden_dim: usize,
    /// Adds fixed sinusoidal positions to the projected DNA bins.
    #[serde(default)]
    pub positional_encoding: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Full-scale dimensions: 2361 genes over 896 bins of 3072-dim DNA embeddings.
    pub fn full() -> Self {
        ModelConfig {
            n_genes: 2361,
            n_bins: 896,
            dna_embed_dim: 3072,
            model_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            dropout_p: 0.3,
            n_dna_layers: 2,
            n_rna_layers: 1,
            vce_pool_heads: 4,
            task_hidden_dim: 1024,
            positional_encoding: false,
            ln_eps: 1e-5,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            n_genes: 200,
            n_bins: 64,
            dna_embed_dim: 96,
            model_dim: 32,
            heads: 4,
            ffn_dim: 128,
            dropout_p: 0.1,
            n_dna_layers: 2,
            n_rna_layers: 1,
            vce_pool_heads: 4,
            task_hidden_dim: 64,
            positional_encoding: false,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_genes", self.n_genes),
            ("n_bins", self.n_bins),
            ("dna_embed_dim", self.dna_embed_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vce_pool_heads", self.vce_pool_heads),
            ("task_hidden_dim", self.task_hidden_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(CdtError::Config(format!("{name} must be >= 1")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(CdtError::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % self.vce_pool_heads != 0 {
            return Err(CdtError::Config(format!(
                "model_dim {} is not divisible by vce_pool_heads {}",
                self.model_dim, self.vce_pool_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CdtError::Config(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(CdtError::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Xavier,
    Normal(f64),
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn push_ln(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    out.push(Slot { name: format!("{prefix}.gain"), shape: vec![d], init: Init::Ones });
    out.push(Slot { name: format!("{prefix}.bias"), shape: vec![d], init: Init::Zeros });
}

fn push_linear(out: &mut Vec<Slot>, prefix: &str, d_in: usize, d_out: usize) {
    out.push(Slot { name: format!("{prefix}.weight"), shape: vec![d_in, d_out], init: Init::Xavier });
    out.push(Slot { name: format!("{prefix}.bias"), shape: vec![d_out], init: Init::Zeros });
}

fn push_attention(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{prefix}.{p}"), d, d);
    }
}

fn push_block(out: &mut Vec<Slot>, prefix: &str, c: &ModelConfig, cross: bool) {
    let d = c.model_dim;
    push_ln(out, &format!("{prefix}.ln1"), d);
    if cross {
        push_ln(out, &format!("{prefix}.ln_kv"), d);
    }
    push_attention(out, &format!("{prefix}.attn"), d);
    push_ln(out, &format!("{prefix}.ln2"), d);
    push_linear(out, &format!("{prefix}.ffn1"), d, c.ffn_dim);
    push_linear(out, &format!("{prefix}.ffn2"), c.ffn_dim, d);
}

fn layout(c: &ModelConfig) -> Vec<Slot> {
    let d = c.model_dim;
    let mut out = Vec::new();
    out.push(Slot {
        name: "gene_embedding".into(),
        shape: vec![c.n_genes, d],
        init: Init::Normal(1.0),
    });
    push_linear(&mut out, "expr", 1, d);
    push_ln(&mut out, "expr.ln", d);
    push_linear(&mut out, "dna.proj", c.dna_embed_dim, d);
    push_ln(&mut out, "dna.ln", d);
    for l in 0..c.n_dna_layers {
        push_block(&mut out, &format!("dna.{l}"), c, false);
    }
    for l in 0..c.n_rna_layers {
        push_block(&mut out, &format!("rna.{l}"), c, false);
    }
    push_block(&mut out, "cross", c, true);
    for m in ["rna", "dna"] {
        push_ln(&mut out, &format!("vce.{m}.ln"), d);
        out.push(Slot {
            name: format!("vce.{m}.query"),
            shape: vec![1, d],
            init: Init::Normal(1.0),
        });
        push_attention(&mut out, &format!("vce.{m}.attn"), d);
    }
    push_linear(&mut out, "vce.fuse1", 2 * d, d);
    push_linear(&mut out, "vce.fuse2", d, d);
    push_ln(&mut out, "head.ln", d);
    push_linear(&mut out, "head.fc1", d, c.task_hidden_dim);
    push_linear(&mut out, "head.fc2", c.task_hidden_dim, c.n_genes);
    out
}

/// Number of learned scalars for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    layout(config)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Learned weights in a fixed, named order.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor<T>>,
}

/// Parameters recorded on a tape, addressable by name.
pub struct Bound<'a> {
    vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn attention(&self, prefix: &str) -> AttentionVars {
        let v = |p: &str, t: &str| self.var(&format!("{prefix}.{p}.{t}"));
        AttentionVars {
            wq: v("q", "weight"),
            bq: v("q", "bias"),
            wk: v("k", "weight"),
            bk: v("k", "bias"),
            wv: v("v", "weight"),
            bv: v("v", "bias"),
            wo: v("o", "weight"),
            bo: v("o", "bias"),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Xavier-uniform weights, zero biases, unit norm gains and standard
    /// normal embeddings and pooling queries.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = layout(config);
        let mut tensors = Vec::with_capacity(slots.len());
        for s in &slots {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::full(s.shape.clone(), T::one()),
                Init::Xavier => {
                    let limit = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                    Tensor::from_fn(s.shape.clone(), |_| T::lit(rng.random_range(-limit..limit)))
                }
                Init::Normal(sd) => {
                    let nrm = Normal::new(0.0, sd).expect("positive sd");
                    Tensor::from_fn(s.shape.clone(), |_| T::lit(nrm.sample(&mut rng)))
                }
            };
            tensors.push(t);
        }
        Ok(Self::from_parts(
            config.clone(),
            slots.into_iter().map(|s| s.name).collect(),
            tensors,
        ))
    }

    fn from_parts(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ModelParams {
            config,
            names,
            index,
            tensors,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| CdtError::Lookup(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(CdtError::Lookup(format!("no parameter named {name}"))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams::from_parts(
            self.config.clone(),
            self.names.clone(),
            self.tensors.iter().map(|t| t.cast()).collect(),
        )
    }

    /// Records every parameter as a leaf; `trainable` decides whether they
    /// collect gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: &self.index,
        }
    }

    /// Eval-mode prediction for one cell plus every attention map.
    pub fn forward_predict(
        &self,
        sample: &CellSample,
        loci: &[Tensor<T>],
    ) -> Result<(Vec<T>, AttentionBundle<T>)> {
        let dna = loci.get(sample.locus).ok_or_else(|| {
            CdtError::Lookup(format!(
                "locus {} has no DNA embedding ({} loci known)",
                sample.locus,
                loci.len()
            ))
        })?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let dna_v = tape.constant(dna.clone());
        let expr = tape.constant(Tensor::from_fn(vec![sample.expr.len()], |i| {
            T::lit(sample.expr[i] as f64)
        }));
        let dp = dna_branch(&mut tape, &b, &self.config, dna_v, &mut None)?;
        let cp = cell_branch(&mut tape, &b, &self.config, dp.out, expr, &mut None)?;
        let pred = tape.value(cp.pred).data().to_vec();
        Ok((pred, bundle_from(&tape, &dp, &cp)?))
    }

    /// Writes a JSON header line followed by one CDTT blob per parameter.
    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            meta: meta.clone(),
            dtype: T::DTYPE,
            tensors: self.names.clone(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for t in &self.tensors {
            t.write_cdtt(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(CdtError::Format(format!("not a checkpoint: {}", header.format)));
        }
        header.config.validate()?;
        let expected = layout(&header.config);
        if expected.len() != header.tensors.len()
            || expected.iter().zip(&header.tensors).any(|(s, n)| &s.name != n)
        {
            return Err(CdtError::Format(
                "checkpoint tensor list does not match its config".into(),
            ));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for s in &expected {
            let t = Tensor::<T>::read_cdtt(&mut r)?;
            if t.shape() != s.shape.as_slice() {
                return Err(CdtError::shape("checkpoint", t.shape(), &s.shape));
            }
            tensors.push(t);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CdtError::Format("trailing bytes after checkpoint".into()));
        }
        Ok((
            Self::from_parts(header.config, header.tensors, tensors),
            header.meta,
        ))
    }
}

const CHECKPOINT_FORMAT: &str = "cdt-checkpoint-v1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    /// Free-form record of the training recipe.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
    meta: CheckpointMeta,
    dtype: u8,
    tensors: Vec<String>,
}

/// Attention maps of one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionBundle<T> {
    /// Per DNA layer, `[H, B, B]`.
    pub dna_self: Vec<Tensor<T>>,
    /// Per RNA layer, `[H, G, G]`.
    pub rna_self: Vec<Tensor<T>>,
    /// `[H, G, B]`, RNA queries over DNA bins.
    pub cross: Tensor<T>,
    /// `[P, G]` pooling weights over genes.
    pub vce_rna: Tensor<T>,
    /// `[P, B]` pooling weights over bins.
    pub vce_dna: Tensor<T>,
}

impl<T: Scalar> AttentionBundle<T> {
    pub fn all_maps(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out: Vec<(&'static str, &Tensor<T>)> = Vec::new();
        for t in &self.dna_self {
            out.push(("dna_self", t));
        }
        for t in &self.rna_self {
            out.push(("rna_self", t));
        }
        out.push(("cross", &self.cross));
        out.push(("vce_rna", &self.vce_rna));
        out.push(("vce_dna", &self.vce_dna));
        out
    }
}

fn bundle_from<T: Scalar>(tape: &Tape<T>, dp: &DnaPass, cp: &CellPass) -> Result<AttentionBundle<T>> {
    let squeeze = |v: Var| -> Result<Tensor<T>> {
        let t = tape.value(v).clone();
        let s = t.shape().to_vec();
        t.reshape(vec![s[0], s[2]])
    };
    Ok(AttentionBundle {
        dna_self: dp.weights.iter().map(|&v| tape.value(v).clone()).collect(),
        rna_self: cp.rna_self.iter().map(|&v| tape.value(v).clone()).collect(),
        cross: tape.value(cp.cross).clone(),
        vce_rna: squeeze(cp.pool_rna)?,
        vce_dna: squeeze(cp.pool_dna)?,
    })
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, b: &Bound, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let g = b.var(&format!("{prefix}.gain"));
    let bias = b.var(&format!("{prefix}.bias"));
    tape.layer_norm(x, g, bias, T::lit(eps))
}

fn linear<T: Scalar>(tape: &mut Tape<T>, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, b.var(&format!("{prefix}.weight")))?;
    tape.add_row(y, b.var(&format!("{prefix}.bias")))
}

fn feed_forward<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    x: Var,
    prefix: &str,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let h = linear(tape, b, x, &format!("{prefix}.ffn1"))?;
    let h = tape.gelu(h);
    let h = maybe_dropout(tape, h, dropout)?;
    linear(tape, b, h, &format!("{prefix}.ffn2"))
}

/// Pre-norm block `x + MHA(LN(x))`, then `x + FFN(LN(x))`. Returns the block
/// output and the attention weights `[H, L, L]`.
pub fn self_attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    config: &ModelConfig,
    prefix: &str,
    x: Var,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Var, Var)> {
    let eps = config.ln_eps;
    let h = layer_norm(tape, b, x, &format!("{prefix}.ln1"), eps)?;
    let p = b.attention(&format!("{prefix}.attn"));
    let (a, w) = multi_head_attention(tape, h, h, h, &p, config.heads, dropout)?;
    let a = maybe_dropout(tape, a, dropout)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, b, x, &format!("{prefix}.ln2"), eps)?;
    let f = feed_forward(tape, b, h, prefix, dropout)?;
    let f = maybe_dropout(tape, f, dropout)?;
    Ok((tape.add(x, f)?, w))
}

/// `rna + MHA(q = LN(rna), k = v = LN(dna))`, then the FFN residual. Weights
/// are `[H, G, B]`.
pub fn cross_attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    config: &ModelConfig,
    rna: Var,
    dna: Var,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Var, Var)> {
    let (dr, dd) = (tape.shape(rna)[1], tape.shape(dna)[1]);
    if dr != dd {
        return Err(CdtError::Config(format!(
            "cross-attention needs a shared width, got RNA {dr} and DNA {dd}"
        )));
    }
    let eps = config.ln_eps;
    let q = layer_norm(tape, b, rna, "cross.ln1", eps)?;
    let kv = layer_norm(tape, b, dna, "cross.ln_kv", eps)?;
    let p = b.attention("cross.attn");
    let (a, w) = multi_head_attention(tape, q, kv, kv, &p, config.heads, dropout)?;
    let a = maybe_dropout(tape, a, dropout)?;
    let x = tape.add(rna, a)?;
    let h = layer_norm(tape, b, x, "cross.ln2", eps)?;
    let f = feed_forward(tape, b, h, "cross", dropout)?;
    let f = maybe_dropout(tape, f, dropout)?;
    Ok((tape.add(x, f)?, w))
}

/// `LN(gene_embedding + expr ⊗ w + b)`; `expr` holds `G` log1p-CPM values.
pub fn encode_expression<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    config: &ModelConfig,
    expr: Var,
) -> Result<Var> {
    let g = tape.value(expr).numel();
    if g != config.n_genes {
        return Err(CdtError::shape("encode_expression", &[g], &[config.n_genes]));
    }
    let col = tape.reshape(expr, &[g, 1])?;
    let proj = linear(tape, b, col, "expr")?;
    let x = tape.add(proj, b.var("gene_embedding"))?;
    layer_norm(tape, b, x, "expr.ln", config.ln_eps)
}

/// `LN(dna · W + b)`, `[B, E] -> [B, d]`.
pub fn project_dna<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    config: &ModelConfig,
    dna: Var,
) -> Result<Var> {
    let s = tape.shape(dna).to_vec();
    if s.len() != 2 || s[1] != config.dna_embed_dim {
        return Err(CdtError::shape("project_dna", &s, &[config.n_bins, config.dna_embed_dim]));
    }
    let y = linear(tape, b, dna, "dna.proj")?;
    let y = layer_norm(tape, b, y, "dna.ln", config.ln_eps)?;
    if !config.positional_encoding {
        return Ok(y);
    }
    let d = config.model_dim;
    let pos = Tensor::from_fn(vec![s[0], d], |i| {
        let (p, j) = ((i / d) as f64, i % d);
        let rate = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
        T::lit(if j % 2 == 0 { (p * rate).sin() } else { (p * rate).cos() })
    });
    let pos = tape.constant(pos);
    tape.add(y, pos)
}

fn pool<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    config: &ModelConfig,
    modality: &str,
    x: Var,
) -> Result<(Var, Var)> {
    let h = layer_norm(tape, b, x, &format!("vce.{modality}.ln"), config.ln_eps)?;
    let q = b.var(&format!("vce.{modality}.query"));
    let p = b.attention(&format!("vce.{modality}.attn"));
    multi_head_attention(tape, q, h, h, &p, config.vce_pool_heads, &mut None)
}

/// Learned-query pooling of each modality to `[1, d]`, concatenated and fused
/// by `Linear(2d→d) → GELU → Linear(d→d)`. Returns the embedding and the two
/// pooling maps `[P, 1, G]` and `[P, 1, B]`.
pub fn virtual_cell_embed<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    config: &ModelConfig,
    rna: Var,
    dna: Var,
) -> Result<(Var, Var, Var)> {
    let (pr, wr) = pool(tape, b, config, "rna", rna)?;
    let (pd, wd) = pool(tape, b, config, "dna", dna)?;
    let cat = tape.concat(&[pr, pd])?;
    let h = linear(tape, b, cat, "vce.fuse1")?;
    let h = tape.gelu(h);
    let v = linear(tape, b, h, "vce.fuse2")?;
    Ok((v, wr, wd))
}

/// `LN → Linear(d→hidden) → GELU → Linear(hidden→G)`, giving `[1, G]`.
pub fn task_head<T: Scalar>(tape: &mut Tape<T>, b: &Bound, config: &ModelConfig, vce: Var) -> Result<Var> {
    let h = layer_norm(tape, b, vce, "head.ln", config.ln_eps)?;
    let h = linear(tape, b, h, "head.fc1")?;
    let h = tape.gelu(h);
    linear(tape, b, h, "head.fc2")
}

/// DNA-side activations, shared by every cell at one locus.
#[derive(Clone, Debug)]
pub struct DnaPass {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Cell-side activations.
#[derive(Clone, Debug)]
pub struct CellPass {
    /// `[1, G]` predicted log2 fold changes.
    pub pred: Var,
    pub rna_self: Vec<Var>,
    pub cross: Var,
    pub pool_rna: Var,
    pub pool_dna: Var,
    /// Input to the task head, `[1, d]`.
    pub vce: Var,
}

/// Projection followed by the DNA self-attention stack.
pub fn dna_branch<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    config: &ModelConfig,
    dna: Var,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<DnaPass> {
    let mut x = project_dna(tape, b, config, dna)?;
    let mut weights = Vec::with_capacity(config.n_dna_layers);
    for l in 0..config.n_dna_layers {
        let (y, w) = self_attention_block(tape, b, config, &format!("dna.{l}"), x, dropout)?;
        x = y;
        weights.push(w);
    }
    Ok(DnaPass { out: x, weights })
}

/// Expression encoding, RNA self-attention, cross-attention, pooling and head.
pub fn cell_branch<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    config: &ModelConfig,
    dna_out: Var,
    expr: Var,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<CellPass> {
    let mut x = encode_expression(tape, b, config, expr)?;
    let mut rna_self = Vec::with_capacity(config.n_rna_layers);
    for l in 0..config.n_rna_layers {
        let (y, w) = self_attention_block(tape, b, config, &format!("rna.{l}"), x, dropout)?;
        x = y;
        rna_self.push(w);
    }
    let (x, cross) = cross_attention_block(tape, b, config, x, dna_out, dropout)?;
    let (vce, pool_rna, pool_dna) = virtual_cell_embed(tape, b, config, x, dna_out)?;
    let pred = task_head(tape, b, config, vce)?;
    Ok(CellPass {
        pred,
        rna_self,
        cross,
        pool_rna,
        pool_dna,
        vce,
    })
}

/// Head- and cell-averaged attention maps.
#[derive(Clone, Debug)]
pub struct AttentionSummary {
    /// Per DNA layer, `[B, B]`, averaged over cells of every locus seen.
    pub dna_self: Vec<Tensor<f64>>,
    /// Last RNA layer, `[G, G]`.
    pub rna_self: Tensor<f64>,
    /// `[G, B]`.
    pub cross: Tensor<f64>,
    pub vce_rna: Tensor<f64>,
    pub vce_dna: Tensor<f64>,
    pub n_cells: usize,
    /// Per-cell bundles, kept on request.
    pub per_cell: Vec<AttentionBundle<f32>>,
}

fn head_mean<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    let s = t.shape();
    let heads = s[0];
    let inner: usize = s[1..].iter().product();
    let mut out = vec![0.0; inner];
    for h in 0..heads {
        for (o, v) in out.iter_mut().zip(&t.data()[h * inner..(h + 1) * inner]) {
            *o += v.as_f64();
        }
    }
    let inv = 1.0 / heads as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Runs eval-mode forward passes and averages attention over heads and cells.
///
/// Cells are folded into a running mean one at a time.
pub fn extract_attention_maps(
    samples: &[&CellSample],
    params: &ModelParams<f32>,
    loci: &[Tensor<f32>],
    keep_per_cell: bool,
) -> Result<AttentionSummary> {
    if samples.is_empty() {
        return Err(CdtError::Contract("attention extraction needs at least one cell".into()));
    }
    let c = params.config();
    let mut tape = Tape::<f32>::new();
    let b = params.bind(&mut tape, false);
    let mut dna_cache: HashMap<usize, DnaPass> = HashMap::new();
    let mut order: Vec<usize> = samples.iter().map(|s| s.locus).collect();
    order.sort_unstable();
    order.dedup();
    for &l in &order {
        let dna = loci.get(l).ok_or_else(|| {
            CdtError::Lookup(format!("locus {l} has no DNA embedding ({} loci known)", loci.len()))
        })?;
        let v = tape.constant(dna.clone());
        let dp = dna_branch(&mut tape, &b, c, v, &mut None)?;
        dna_cache.insert(l, dp);
    }
    let base = tape.len();

    let (g, bins) = (c.n_genes, c.n_bins);
    let mut dna_self = vec![vec![0.0; bins * bins]; c.n_dna_layers];
    let mut rna_self = vec![0.0; g * g];
    let mut cross = vec![0.0; g * bins];
    let mut vce_rna = vec![0.0; c.vce_pool_heads * g];
    let mut vce_dna = vec![0.0; c.vce_pool_heads * bins];
    let mut per_cell = Vec::new();
    let fold = |acc: &mut [f64], x: &[f64], n: usize| {
        let w = 1.0 / n as f64;
        for (a, v) in acc.iter_mut().zip(x) {
            *a += (v - *a) * w;
        }
    };
    for (i, s) in samples.iter().enumerate() {
        let n = i + 1;
        tape.truncate(base);
        let dp = dna_cache[&s.locus].clone();
        let expr = tape.constant(Tensor::new(vec![s.expr.len()], s.expr.clone())?);
        let cp = cell_branch(&mut tape, &b, c, dp.out, expr, &mut None)?;
        let bundle = bundle_from(&tape, &dp, &cp)?;
        for (acc, t) in dna_self.iter_mut().zip(&bundle.dna_self) {
            fold(acc, &head_mean(t), n);
        }
        fold(&mut rna_self, &head_mean(bundle.rna_self.last().expect("rna layer")), n);
        fold(&mut cross, &head_mean(&bundle.cross), n);
        fold(&mut vce_rna, &bundle.vce_rna.to_f64_vec(), n);
        fold(&mut vce_dna, &bundle.vce_dna.to_f64_vec(), n);
        if keep_per_cell {
            per_cell.push(bundle);
        }
    }
    Ok(AttentionSummary {
        dna_self: dna_self
            .into_iter()
            .map(|v| Tensor::new(vec![bins, bins], v))
            .collect::<Result<_>>()?,
        rna_self: Tensor::new(vec![g, g], rna_self)?,
        cross: Tensor::new(vec![g, bins], cross)?,
        vce_rna: Tensor::new(vec![c.vce_pool_heads, g], vce_rna)?,
        vce_dna: Tensor::new(vec![c.vce_pool_heads, bins], vce_dna)?,
        n_cells: samples.len(),
        per_cell,
    })
}

/// Writes a matrix as TSV with a header row of column labels and a leading
/// column of row labels.
pub fn write_matrix_tsv<W: Write>(
    mut w: W,
    m: &Tensor<f64>,
    row_labels: &[String],
    col_labels: &[String],
) -> Result<()> {
    let s = m.shape();
    if s.len() != 2 || s[0] != row_labels.len() || s[1] != col_labels.len() {
        return Err(CdtError::shape("matrix tsv", s, &[row_labels.len(), col_labels.len()]));
    }
    write!(w, "id")?;
    for c in col_labels {
        write!(w, "\t{c}")?;
    }
    writeln!(w)?;
    for (r, label) in row_labels.iter().enumerate() {
        write!(w, "{label}")?;
        for v in m.row(r) {
            write!(w, "\t{v:.9e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
