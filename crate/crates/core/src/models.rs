//! The four architectures as composable forward/backward graphs.
//!
//! All four share the head `... -> dropout -> dense softmax(2)`:
//!
//! * `bilstm-slmfcnn` — embedding -> BiLSTM -> parallel conv widths ->
//!   per-width pooling -> concat (flatten is the identity here)
//! * `bilstm` — embedding -> BiLSTM -> [last valid forward state ;
//!   backward state at position 0]
//! * `cnn` — embedding -> single-width conv -> pooling
//! * `cnn-bilstm` — embedding -> single-width conv -> BiLSTM over the
//!   feature map -> state readout
//!
//! The single-width baselines use the largest configured filter width
//! (5 with the default widths [3, 4, 5]).

use crate::embeddings::{lookup_backward, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::layers::{
    bilstm_backward, bilstm_forward, conv_backward, conv_over_time, dense_backward, dense_softmax,
    dropout, max_pool_backward, max_pool_over_time, mean_pool_backward, mean_pool_over_time,
    BiLstmCache, BiLstmParams, ConvActivation, ConvCache, ConvFilter, ConvFilterBank, DenseParams,
    LstmParams, Pooling,
};
use crate::tensor::{Rng, Tensor};
use crate::textproc::{TokenizedDoc, Vocabulary};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

pub const CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Bilstm,
    Cnn,
    CnnBilstm,
    BilstmSlmfcnn,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Bilstm, Arch::Cnn, Arch::CnnBilstm, Arch::BilstmSlmfcnn];

    pub fn tag(&self) -> &'static str {
        match self {
            Arch::Bilstm => "bilstm",
            Arch::Cnn => "cnn",
            Arch::CnnBilstm => "cnn-bilstm",
            Arch::BilstmSlmfcnn => "bilstm-slmfcnn",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(Arch::Bilstm),
            "cnn" => Ok(Arch::Cnn),
            "cnn-bilstm" => Ok(Arch::CnnBilstm),
            "bilstm-slmfcnn" => Ok(Arch::BilstmSlmfcnn),
            other => Err(Error::UnknownArch(other.to_owned())),
        }
    }
}

/// The dense head's activation. Kept as an enum because it is one of the
/// grid-searched knobs, even though softmax is the only value in play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Softmax,
}

/// Tunable training/architecture knobs. Defaults follow the tuned VTC
/// column: dropout 0.5, batch 32, learning rate 2e-5, softmax, filter
/// widths [3, 4, 5] with 100 filters each, 150 hidden units, 300-d
/// embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub activation: Activation,
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub hidden_units: usize,
    pub l2_lambda: f64,
    pub max_len: usize,
    pub epochs: usize,
    pub embedding_dim: usize,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    pub pooling: Pooling,
    pub conv_activation: ConvActivation,
    /// Inverse-frequency class weights on the loss. Off by default.
    pub class_weighting: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            dropout_rate: 0.5,
            batch_size: 32,
            learning_rate: 2e-5,
            activation: Activation::Softmax,
            filter_widths: vec![3, 4, 5],
            filters_per_width: 100,
            hidden_units: 150,
            l2_lambda: 1e-4,
            max_len: 400,
            epochs: 20,
            embedding_dim: 300,
            patience: 3,
            pooling: Pooling::Max,
            conv_activation: ConvActivation::Relu,
            class_weighting: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.learning_rate <= 0.0 {
            return fail(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.filter_widths.is_empty() {
            return fail("filter_widths must be non-empty".into());
        }
        if self.filter_widths.windows(2).any(|w| w[0] > w[1]) {
            return fail(format!("filter_widths {:?} must be sorted", self.filter_widths));
        }
        if self.filter_widths.iter().any(|&w| w == 0) {
            return fail("filter widths must be positive".into());
        }
        let widest = *self.filter_widths.last().unwrap();
        if self.max_len < widest {
            return fail(format!(
                "max_len {} is smaller than the widest filter {widest}",
                self.max_len
            ));
        }
        if self.filters_per_width == 0
            || self.hidden_units == 0
            || self.max_len == 0
            || self.epochs == 0
            || self.embedding_dim == 0
        {
            return fail("counts (filters, hidden units, max_len, epochs, dim) must be >= 1".into());
        }
        if self.l2_lambda < 0.0 {
            return fail(format!("l2_lambda {} must be >= 0", self.l2_lambda));
        }
        Ok(())
    }

    /// Width used by the single-filter baselines: the largest configured
    /// width (5 with the paper defaults).
    pub fn baseline_width(&self) -> usize {
        *self.filter_widths.last().expect("validated non-empty")
    }
}

/// A fully assembled classifier for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub hp: HyperParams,
    pub emb: EmbeddingMatrix,
    pub bilstm: Option<BiLstmParams>,
    pub conv: Option<ConvFilterBank>,
    pub dense: DenseParams,
}

/// Validate that the embedding matrix agrees with the hyperparameters.
fn check_embedding(hp: &HyperParams, emb: &EmbeddingMatrix) -> Result<()> {
    hp.validate()?;
    if emb.dim() != hp.embedding_dim {
        return Err(Error::DimensionMismatch {
            expected: hp.embedding_dim,
            found: emb.dim(),
        });
    }
    Ok(())
}

pub fn build_bilstm_slmfcnn(hp: HyperParams, emb: EmbeddingMatrix, rng: &mut Rng) -> Result<Model> {
    check_embedding(&hp, &emb)?;
    let d = hp.embedding_dim;
    let h = hp.hidden_units;
    let bilstm = BiLstmParams::init(d, h, rng);
    let conv = ConvFilterBank::init(&hp.filter_widths, 2 * h, hp.filters_per_width, rng);
    let dense_in = hp.filter_widths.len() * hp.filters_per_width;
    let dense = DenseParams::init(dense_in, CLASSES, rng);
    Ok(Model {
        arch: Arch::BilstmSlmfcnn,
        hp,
        emb,
        bilstm: Some(bilstm),
        conv: Some(conv),
        dense,
    })
}

pub fn build_bilstm(hp: HyperParams, emb: EmbeddingMatrix, rng: &mut Rng) -> Result<Model> {
    check_embedding(&hp, &emb)?;
    let bilstm = BiLstmParams::init(hp.embedding_dim, hp.hidden_units, rng);
    let dense = DenseParams::init(2 * hp.hidden_units, CLASSES, rng);
    Ok(Model {
        arch: Arch::Bilstm,
        hp,
        emb,
        bilstm: Some(bilstm),
        conv: None,
        dense,
    })
}

pub fn build_cnn(hp: HyperParams, emb: EmbeddingMatrix, rng: &mut Rng) -> Result<Model> {
    check_embedding(&hp, &emb)?;
    let width = hp.baseline_width();
    let conv = ConvFilterBank::init(&[width], hp.embedding_dim, hp.filters_per_width, rng);
    let dense = DenseParams::init(hp.filters_per_width, CLASSES, rng);
    Ok(Model {
        arch: Arch::Cnn,
        hp,
        emb,
        bilstm: None,
        conv: Some(conv),
        dense,
    })
}

pub fn build_cnn_bilstm(hp: HyperParams, emb: EmbeddingMatrix, rng: &mut Rng) -> Result<Model> {
    check_embedding(&hp, &emb)?;
    let width = hp.baseline_width();
    let conv = ConvFilterBank::init(&[width], hp.embedding_dim, hp.filters_per_width, rng);
    let bilstm = BiLstmParams::init(hp.filters_per_width, hp.hidden_units, rng);
    let dense = DenseParams::init(2 * hp.hidden_units, CLASSES, rng);
    Ok(Model {
        arch: Arch::CnnBilstm,
        hp,
        emb,
        bilstm: Some(bilstm),
        conv: Some(conv),
        dense,
    })
}

/// Dispatch on the architecture tag.
pub fn build(arch: Arch, hp: HyperParams, emb: EmbeddingMatrix, rng: &mut Rng) -> Result<Model> {
    match arch {
        Arch::Bilstm => build_bilstm(hp, emb, rng),
        Arch::Cnn => build_cnn(hp, emb, rng),
        Arch::CnnBilstm => build_cnn_bilstm(hp, emb, rng),
        Arch::BilstmSlmfcnn => build_bilstm_slmfcnn(hp, emb, rng),
    }
}

/// Number of sliding-window positions that touch at least one real token.
fn valid_conv_len(true_len: usize, rows: usize, width: usize) -> usize {
    true_len.min(rows - width + 1).max(1)
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Tensor,
    bilstm: Option<BiLstmCache>,
    conv: Vec<ConvCache>,
    conv_rows: Vec<usize>,
    pool_argmax: Vec<Vec<usize>>,
    pool_valid: Vec<usize>,
    head_input: Tensor,
    dropout_mask: Option<Tensor>,
    dropped: Tensor,
    true_len: usize,
}

impl Model {
    /// Run the model on one encoded document. Passing a generator enables
    /// training mode (dropout active); `None` is the eval-mode forward.
    /// Returns class probabilities and the cache for [`Model::backward`].
    pub fn forward(
        &self,
        doc: &TokenizedDoc,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(Tensor, ForwardCache)> {
        let x = self.emb.lookup(doc)?;
        let t = x.rows();
        let ell = doc.true_len.min(t).max(1);

        let mut cache = ForwardCache {
            x: x.clone(),
            bilstm: None,
            conv: Vec::new(),
            conv_rows: Vec::new(),
            pool_argmax: Vec::new(),
            pool_valid: Vec::new(),
            head_input: Tensor::zeros(vec![0]),
            dropout_mask: None,
            dropped: Tensor::zeros(vec![0]),
            true_len: ell,
        };

        let head_input = match self.arch {
            Arch::BilstmSlmfcnn => {
                let bilstm = self.bilstm.as_ref().expect("bilstm present");
                let (states, bc) = bilstm_forward(bilstm, &x, ell)?;
                cache.bilstm = Some(bc);
                let bank = self.conv.as_ref().expect("conv present");
                let mut pooled = Vec::new();
                for filter in &bank.filters {
                    let (map, cc) =
                        conv_over_time(filter, &states, self.hp.conv_activation)?;
                    let valid = valid_conv_len(ell, t, filter.width);
                    pooled.push(self.pool(&map, valid, &mut cache)?);
                    cache.conv.push(cc);
                    cache.conv_rows.push(map.rows());
                }
                let refs: Vec<&Tensor> = pooled.iter().collect();
                Tensor::concat(&refs, 0)? // flatten: already a vector
            }
            Arch::Bilstm => {
                let bilstm = self.bilstm.as_ref().expect("bilstm present");
                let (states, bc) = bilstm_forward(bilstm, &x, ell)?;
                cache.bilstm = Some(bc);
                readout(&states, ell, bilstm.hidden())
            }
            Arch::Cnn => {
                let bank = self.conv.as_ref().expect("conv present");
                let filter = &bank.filters[0];
                let (map, cc) = conv_over_time(filter, &x, self.hp.conv_activation)?;
                let valid = valid_conv_len(ell, t, filter.width);
                let pooled = self.pool(&map, valid, &mut cache)?;
                cache.conv.push(cc);
                cache.conv_rows.push(map.rows());
                pooled
            }
            Arch::CnnBilstm => {
                let bank = self.conv.as_ref().expect("conv present");
                let filter = &bank.filters[0];
                let (map, cc) = conv_over_time(filter, &x, self.hp.conv_activation)?;
                let ell_c = valid_conv_len(ell, t, filter.width);
                cache.conv.push(cc);
                cache.conv_rows.push(map.rows());
                cache.pool_valid.push(ell_c);
                let bilstm = self.bilstm.as_ref().expect("bilstm present");
                let (states, bc) = bilstm_forward(bilstm, &map, ell_c)?;
                cache.bilstm = Some(bc);
                readout(&states, ell_c, bilstm.hidden())
            }
        };

        let training = dropout_rng.is_some();
        let (dropped, mask) = match dropout_rng {
            Some(rng) => dropout(&head_input, self.hp.dropout_rate, rng, training)?,
            None => (head_input.clone(), None),
        };
        let probs = dense_softmax(&self.dense, &dropped)?;

        cache.head_input = head_input;
        cache.dropout_mask = mask;
        cache.dropped = dropped;
        Ok((probs, cache))
    }

    fn pool(&self, map: &Tensor, valid: usize, cache: &mut ForwardCache) -> Result<Tensor> {
        match self.hp.pooling {
            Pooling::Max => {
                let (pooled, argmax) = max_pool_over_time(map, valid)?;
                cache.pool_argmax.push(argmax);
                cache.pool_valid.push(valid);
                Ok(pooled)
            }
            Pooling::Mean => {
                let pooled = mean_pool_over_time(map, valid)?;
                cache.pool_argmax.push(Vec::new());
                cache.pool_valid.push(valid);
                Ok(pooled)
            }
        }
    }

    fn pool_backward(&self, upstream: &Tensor, branch: usize, cache: &ForwardCache) -> Tensor {
        let rows = cache.conv_rows[branch];
        match self.hp.pooling {
            Pooling::Max => max_pool_backward(upstream, &cache.pool_argmax[branch], rows),
            Pooling::Mean => mean_pool_backward(upstream, cache.pool_valid[branch], rows),
        }
    }

    /// Eval-mode class probabilities (dropout off).
    pub fn predict(&self, doc: &TokenizedDoc) -> Result<Tensor> {
        self.forward(doc, None).map(|(probs, _)| probs)
    }

    /// Backpropagate from the gradient w.r.t. the logits. Returns gradients
    /// for every parameter tensor, embedding included (its PAD row stays
    /// zero and a frozen embedding's gradient is simply ignored upstream).
    pub fn backward(
        &self,
        doc: &TokenizedDoc,
        cache: &ForwardCache,
        dlogits: &Tensor,
    ) -> Result<ModelGrads> {
        let mut grads = ModelGrads::zeros_like(self);
        let (ddropped, dense_w, dense_b) = dense_backward(&self.dense, &cache.dropped, dlogits)?;
        grads.dense_w = dense_w;
        grads.dense_b = dense_b;
        let dhead = match &cache.dropout_mask {
            Some(mask) => ddropped.hadamard(mask)?,
            None => ddropped,
        };

        let t = cache.x.rows();
        let ell = cache.true_len;
        match self.arch {
            Arch::BilstmSlmfcnn => {
                let bank = self.conv.as_ref().expect("conv present");
                let bilstm = self.bilstm.as_ref().expect("bilstm present");
                let f = self.hp.filters_per_width;
                let mut dstates = Tensor::zeros(vec![t, 2 * self.hp.hidden_units]);
                let conv_grads = grads.conv.as_mut().expect("conv grads");
                for (branch, filter) in bank.filters.iter().enumerate() {
                    let chunk =
                        Tensor::from_vec(dhead.data()[branch * f..(branch + 1) * f].to_vec());
                    let dmap = self.pool_backward(&chunk, branch, cache);
                    let (dx_conv, dkernel, dbias) =
                        conv_backward(filter, &cache.conv[branch], &dmap)?;
                    conv_grads.filters[branch].kernel = dkernel;
                    conv_grads.filters[branch].bias = dbias;
                    dstates.add_assign(&dx_conv)?;
                }
                let bc = cache.bilstm.as_ref().expect("bilstm cache");
                let (dx, bilstm_grads) = bilstm_backward(bilstm, bc, &dstates)?;
                grads.bilstm = Some(bilstm_grads);
                lookup_backward(&mut grads.emb, doc, &dx);
            }
            Arch::Bilstm => {
                let bilstm = self.bilstm.as_ref().expect("bilstm present");
                let h = bilstm.hidden();
                let dstates = readout_backward(&dhead, t, ell, h);
                let bc = cache.bilstm.as_ref().expect("bilstm cache");
                let (dx, bilstm_grads) = bilstm_backward(bilstm, bc, &dstates)?;
                grads.bilstm = Some(bilstm_grads);
                lookup_backward(&mut grads.emb, doc, &dx);
            }
            Arch::Cnn => {
                let bank = self.conv.as_ref().expect("conv present");
                let dmap = self.pool_backward(&dhead, 0, cache);
                let (dx, dkernel, dbias) = conv_backward(&bank.filters[0], &cache.conv[0], &dmap)?;
                let conv_grads = grads.conv.as_mut().expect("conv grads");
                conv_grads.filters[0].kernel = dkernel;
                conv_grads.filters[0].bias = dbias;
                lookup_backward(&mut grads.emb, doc, &dx);
            }
            Arch::CnnBilstm => {
                let bank = self.conv.as_ref().expect("conv present");
                let bilstm = self.bilstm.as_ref().expect("bilstm present");
                let h = bilstm.hidden();
                let rows = cache.conv_rows[0];
                let ell_c = cache.pool_valid[0];
                let dstates = readout_backward(&dhead, rows, ell_c, h);
                let bc = cache.bilstm.as_ref().expect("bilstm cache");
                let (dmap, bilstm_grads) = bilstm_backward(bilstm, bc, &dstates)?;
                grads.bilstm = Some(bilstm_grads);
                let (dx, dkernel, dbias) = conv_backward(&bank.filters[0], &cache.conv[0], &dmap)?;
                let conv_grads = grads.conv.as_mut().expect("conv grads");
                conv_grads.filters[0].kernel = dkernel;
                conv_grads.filters[0].bias = dbias;
                lookup_backward(&mut grads.emb, doc, &dx);
            }
        }
        Ok(grads)
    }

    /// Total trainable scalar count (embedding included when trainable).
    pub fn param_count(&self) -> usize {
        self.param_slots()
            .iter()
            .filter(|s| s.kind != SlotKind::Embedding || self.emb.trainable)
            .map(|s| s.tensor.len())
            .sum()
    }

    /// The documented stage-by-stage shape chain for this model at its
    /// configured `max_len`.
    pub fn shape_chain(&self) -> Vec<(String, Vec<usize>)> {
        let t = self.hp.max_len;
        let d = self.hp.embedding_dim;
        let h = self.hp.hidden_units;
        let f = self.hp.filters_per_width;
        let mut chain = vec![("embedding".to_owned(), vec![t, d])];
        match self.arch {
            Arch::BilstmSlmfcnn => {
                chain.push(("bilstm".to_owned(), vec![t, 2 * h]));
                for &k in &self.hp.filter_widths {
                    chain.push((format!("conv_w{k}"), vec![t - k + 1, f]));
                }
                for &k in &self.hp.filter_widths {
                    chain.push((format!("pool_w{k}"), vec![f]));
                }
                chain.push((
                    "concat".to_owned(),
                    vec![self.hp.filter_widths.len() * f],
                ));
            }
            Arch::Bilstm => {
                chain.push(("bilstm".to_owned(), vec![t, 2 * h]));
                chain.push(("readout".to_owned(), vec![2 * h]));
            }
            Arch::Cnn => {
                let k = self.hp.baseline_width();
                chain.push((format!("conv_w{k}"), vec![t - k + 1, f]));
                chain.push((format!("pool_w{k}"), vec![f]));
            }
            Arch::CnnBilstm => {
                let k = self.hp.baseline_width();
                chain.push((format!("conv_w{k}"), vec![t - k + 1, f]));
                chain.push(("bilstm".to_owned(), vec![t - k + 1, 2 * h]));
                chain.push(("readout".to_owned(), vec![2 * h]));
            }
        }
        chain.push(("dense_softmax".to_owned(), vec![CLASSES]));
        chain
    }
}

/// BiLSTM sentence readout: last valid forward state next to the backward
/// state at position 0 (the one that has consumed the whole sequence).
fn readout(states: &Tensor, ell: usize, h: usize) -> Tensor {
    let mut out = vec![0.0; 2 * h];
    out[..h].copy_from_slice(&states.row(ell - 1)[..h]);
    out[h..].copy_from_slice(&states.row(0)[h..]);
    Tensor::from_vec(out)
}

fn readout_backward(dreadout: &Tensor, rows: usize, ell: usize, h: usize) -> Tensor {
    let mut dstates = Tensor::zeros(vec![rows, 2 * h]);
    dstates.row_mut(ell - 1)[..h].copy_from_slice(&dreadout.data()[..h]);
    for (dst, src) in dstates.row_mut(0)[h..].iter_mut().zip(&dreadout.data()[h..]) {
        *dst += src;
    }
    dstates
}

/// Gradients mirroring a model's parameter tensors.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub emb: Tensor,
    pub bilstm: Option<BiLstmParams>,
    pub conv: Option<ConvFilterBank>,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        ModelGrads {
            emb: Tensor::zeros_like(&model.emb.weights),
            bilstm: model.bilstm.as_ref().map(|b| BiLstmParams {
                fwd: LstmParams::zeros_like(&b.fwd),
                bwd: LstmParams::zeros_like(&b.bwd),
            }),
            conv: model.conv.as_ref().map(|bank| ConvFilterBank {
                filters: bank
                    .filters
                    .iter()
                    .map(|f| ConvFilter {
                        width: f.width,
                        kernel: Tensor::zeros_like(&f.kernel),
                        bias: Tensor::zeros_like(&f.bias),
                    })
                    .collect(),
            }),
            dense_w: Tensor::zeros_like(&model.dense.w),
            dense_b: Tensor::zeros_like(&model.dense.b),
        }
    }

    /// Accumulate another gradient set (same model) into this one.
    pub fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        for (mine, theirs) in self.slots_mut().into_iter().zip(other.slots()) {
            mine.1.add_assign(theirs.1)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for slot in self.slots_mut() {
            for v in slot.1.data_mut() {
                *v *= s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Embedding,
    Weight,
    Bias,
}

pub struct ParamSlot<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub kind: SlotKind,
}

fn lstm_slot_names(prefix: &str) -> Vec<(String, SlotKind)> {
    let mut out = Vec::new();
    for name in ["w_i", "w_f", "w_o", "w_c", "u_i", "u_f", "u_o", "u_c"] {
        out.push((format!("{prefix}.{name}"), SlotKind::Weight));
    }
    for name in ["b_i", "b_f", "b_o", "b_c"] {
        out.push((format!("{prefix}.{name}"), SlotKind::Bias));
    }
    out
}

fn lstm_tensors(p: &LstmParams) -> Vec<&Tensor> {
    vec![
        &p.w_i, &p.w_f, &p.w_o, &p.w_c, &p.u_i, &p.u_f, &p.u_o, &p.u_c, &p.b_i, &p.b_f, &p.b_o,
        &p.b_c,
    ]
}

fn lstm_tensors_mut(p: &mut LstmParams) -> Vec<&mut Tensor> {
    vec![
        &mut p.w_i, &mut p.w_f, &mut p.w_o, &mut p.w_c, &mut p.u_i, &mut p.u_f, &mut p.u_o,
        &mut p.u_c, &mut p.b_i, &mut p.b_f, &mut p.b_o, &mut p.b_c,
    ]
}

/// Shared slot layout: embedding, BiLSTM (fwd then bwd), conv groups in
/// width order, dense. Order is the contract for optimizer state and
/// checkpoints.
fn slot_layout(
    bilstm: Option<&BiLstmParams>,
    conv: Option<&ConvFilterBank>,
) -> Vec<(String, SlotKind)> {
    let mut names = vec![("embedding".to_owned(), SlotKind::Embedding)];
    if bilstm.is_some() {
        names.extend(lstm_slot_names("bilstm.fwd"));
        names.extend(lstm_slot_names("bilstm.bwd"));
    }
    if let Some(bank) = conv {
        for f in &bank.filters {
            names.push((format!("conv.w{}.kernel", f.width), SlotKind::Weight));
            names.push((format!("conv.w{}.bias", f.width), SlotKind::Bias));
        }
    }
    names.push(("dense.w".to_owned(), SlotKind::Weight));
    names.push(("dense.b".to_owned(), SlotKind::Bias));
    names
}

fn collect_tensors<'a>(
    emb: &'a Tensor,
    bilstm: Option<&'a BiLstmParams>,
    conv: Option<&'a ConvFilterBank>,
    dense_w: &'a Tensor,
    dense_b: &'a Tensor,
) -> Vec<&'a Tensor> {
    let mut out = vec![emb];
    if let Some(b) = bilstm {
        out.extend(lstm_tensors(&b.fwd));
        out.extend(lstm_tensors(&b.bwd));
    }
    if let Some(bank) = conv {
        for f in &bank.filters {
            out.push(&f.kernel);
            out.push(&f.bias);
        }
    }
    out.push(dense_w);
    out.push(dense_b);
    out
}

fn collect_tensors_mut<'a>(
    emb: &'a mut Tensor,
    bilstm: Option<&'a mut BiLstmParams>,
    conv: Option<&'a mut ConvFilterBank>,
    dense_w: &'a mut Tensor,
    dense_b: &'a mut Tensor,
) -> Vec<&'a mut Tensor> {
    let mut out: Vec<&mut Tensor> = vec![emb];
    if let Some(b) = bilstm {
        out.extend(lstm_tensors_mut(&mut b.fwd));
        out.extend(lstm_tensors_mut(&mut b.bwd));
    }
    if let Some(bank) = conv {
        for f in &mut bank.filters {
            out.push(&mut f.kernel);
            out.push(&mut f.bias);
        }
    }
    out.push(dense_w);
    out.push(dense_b);
    out
}

impl Model {
    pub fn param_slots(&self) -> Vec<ParamSlot<'_>> {
        let names = slot_layout(self.bilstm.as_ref(), self.conv.as_ref());
        let tensors = collect_tensors(
            &self.emb.weights,
            self.bilstm.as_ref(),
            self.conv.as_ref(),
            &self.dense.w,
            &self.dense.b,
        );
        names
            .into_iter()
            .zip(tensors)
            .map(|((name, kind), tensor)| ParamSlot { name, tensor, kind })
            .collect()
    }

    pub fn param_slots_mut(&mut self) -> Vec<(String, &mut Tensor, SlotKind)> {
        let names = slot_layout(self.bilstm.as_ref(), self.conv.as_ref());
        let tensors = collect_tensors_mut(
            &mut self.emb.weights,
            self.bilstm.as_mut(),
            self.conv.as_mut(),
            &mut self.dense.w,
            &mut self.dense.b,
        );
        names
            .into_iter()
            .zip(tensors)
            .map(|((name, kind), tensor)| (name, tensor, kind))
            .collect()
    }
}

impl ModelGrads {
    pub fn slots(&self) -> Vec<(String, &Tensor)> {
        let names = slot_layout(self.bilstm.as_ref(), self.conv.as_ref());
        let tensors = collect_tensors(
            &self.emb,
            self.bilstm.as_ref(),
            self.conv.as_ref(),
            &self.dense_w,
            &self.dense_b,
        );
        names
            .into_iter()
            .map(|(name, _)| name)
            .zip(tensors)
            .collect()
    }

    pub fn slots_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names = slot_layout(self.bilstm.as_ref(), self.conv.as_ref());
        let tensors = collect_tensors_mut(
            &mut self.emb,
            self.bilstm.as_mut(),
            self.conv.as_mut(),
            &mut self.dense_w,
            &mut self.dense_b,
        );
        names
            .into_iter()
            .map(|(name, _)| name)
            .zip(tensors)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container

const CKPT_MAGIC: &[u8; 8] = b"URSACKP1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    arch: Arch,
    hyperparams: HyperParams,
    vocab_tokens: Vec<String>,
    vocab_min_freq: usize,
    emb_trainable: bool,
    emb_coverage: f64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Write a versioned binary checkpoint: magic, JSON header, then raw
/// little-endian f64 data per parameter slot. Round-trips bit-exactly.
pub fn save_checkpoint(model: &Model, vocab: &Vocabulary, path: &Path) -> Result<()> {
    let slots = model.param_slots();
    let header = CheckpointHeader {
        version: 1,
        arch: model.arch,
        hyperparams: model.hp.clone(),
        vocab_tokens: vocab.id_ordered_tokens().to_vec(),
        vocab_min_freq: vocab.min_freq(),
        emb_trainable: model.emb.trainable,
        emb_coverage: model.emb.coverage,
        tensors: slots
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                shape: s.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for slot in &slots {
        for v in slot.tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Model, Vocabulary)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }

    let vocab = Vocabulary::from_id_order(header.vocab_tokens, header.vocab_min_freq)?;
    let mut emb = EmbeddingMatrix {
        weights: Tensor::zeros(vec![vocab.size(), header.hyperparams.embedding_dim]),
        trainable: header.emb_trainable,
        coverage: header.emb_coverage,
    };
    emb.trainable = header.emb_trainable;
    let mut model = build(header.arch, header.hyperparams, emb, &mut Rng::new(0))?;

    let mut slots = model.param_slots_mut();
    if slots.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, header lists {}",
            slots.len(),
            header.tensors.len()
        )));
    }
    for (slot, entry) in slots.iter_mut().zip(&header.tensors) {
        if slot.0 != entry.name || slot.1.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: model has {} {:?}, file has {} {:?}",
                slot.0,
                slot.1.shape(),
                entry.name,
                entry.shape
            )));
        }
        let mut buf = [0u8; 8];
        for v in slot.1.data_mut() {
            file.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok((model, vocab))
}
