//! The attribute prototype network: a small trainable encoder, the global
//! classification branch, the prototype branch with its similarity maps, and
//! the joint training objective.
//!
//! The model has two heads over a shared feature map `f(x)` of shape
//! `[h, w, c]`:
//!
//! - the global branch pools `f(x)` into `g(x)` and scores classes through a
//!   bilinear compatibility `g(x)^T V phi(y)` trained with cross-entropy;
//! - the prototype branch holds one prototype vector per attribute and
//!   predicts attribute `k` as the maximum of the similarity map
//!   `<p_k, f_ij(x)>`, trained by regression against the class attribute
//!   vector, a group-lasso decorrelation penalty over prototype channels,
//!   and a compactness penalty pulling each map toward its peak.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeTable, ClassId};
use crate::autodiff::{
    argmax_with_gap, compactness_raw, group_lasso_raw, similarity_maps_raw, NodeId, Tape,
};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Smoothing constant inside the group-lasso norm, keeping it differentiable
/// at zero rows.
pub const AD_EPS: f64 = 1e-12;

/// Whether samples are raw images run through the encoder or precomputed
/// feature maps fed straight to the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    Image,
    Feature,
}

impl std::fmt::Display for DataMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataMode::Image => write!(f, "image"),
            DataMode::Feature => write!(f, "feature"),
        }
    }
}

/// Geometry and behavior flags of a model; stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub mode: DataMode,
    /// Image edge length (image mode; 0 in feature mode).
    pub input_size: usize,
    /// Image channels (image mode; 0 in feature mode).
    pub in_channels: usize,
    /// Output channels of the three conv blocks (image mode).
    pub enc_channels: [usize; 3],
    /// Feature map height/width/channels seen by the heads.
    pub feature_h: usize,
    pub feature_w: usize,
    pub feature_c: usize,
    /// Number of attributes K.
    pub num_attrs: usize,
    /// Use the raw (unclamped) compactness penalty.
    pub cpt_raw: bool,
    /// L2-normalize class attribute vectors before use.
    pub normalize_phi: bool,
}

impl ModelSpec {
    /// Encoder geometry: three 3x3 / stride-2 / pad-1 conv+ReLU blocks, so
    /// each block halves the spatial extent (rounding up).
    pub fn image(
        input_size: usize,
        in_channels: usize,
        enc_channels: [usize; 3],
        num_attrs: usize,
    ) -> Result<ModelSpec> {
        if input_size < 8 {
            return Err(Error::contract(format!(
                "input size {input_size} too small for the three-block encoder"
            )));
        }
        if in_channels == 0 || enc_channels.contains(&0) || num_attrs == 0 {
            return Err(Error::contract("channel counts and K must be positive"));
        }
        let half = |n: usize| n.div_ceil(2);
        let hw = half(half(half(input_size)));
        Ok(ModelSpec {
            mode: DataMode::Image,
            input_size,
            in_channels,
            enc_channels,
            feature_h: hw,
            feature_w: hw,
            feature_c: enc_channels[2],
            num_attrs,
            cpt_raw: false,
            normalize_phi: false,
        })
    }

    /// Head-only geometry over precomputed feature maps.
    pub fn feature(h: usize, w: usize, c: usize, num_attrs: usize) -> Result<ModelSpec> {
        if h == 0 || w == 0 || c == 0 || num_attrs == 0 {
            return Err(Error::contract("feature dims and K must be positive"));
        }
        Ok(ModelSpec {
            mode: DataMode::Feature,
            input_size: 0,
            in_channels: 0,
            enc_channels: [0, 0, 0],
            feature_h: h,
            feature_w: w,
            feature_c: c,
            num_attrs,
            cpt_raw: false,
            normalize_phi: false,
        })
    }

    /// Default configuration: 3x64x64 images, channels 3 -> 16 -> 32 -> 32,
    /// giving an 8x8x32 feature map.
    pub fn standard(num_attrs: usize) -> ModelSpec {
        ModelSpec::image(64, 3, [16, 32, 32], num_attrs).expect("standard geometry is valid")
    }

    /// Tiny configuration for gradient checks: 3x32x32 images down to a
    /// 4x4x3 feature map with K = 6.
    pub fn smoke() -> ModelSpec {
        ModelSpec::image(32, 3, [4, 4, 3], 6).expect("smoke geometry is valid")
    }

    /// Shape of the input tensor a sample must have.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.mode {
            DataMode::Image => vec![self.in_channels, self.input_size, self.input_size],
            DataMode::Feature => vec![self.feature_h, self.feature_w, self.feature_c],
        }
    }
}

/// Sidecar metadata of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub spec: ModelSpec,
    pub epoch: usize,
    pub seed: u64,
}

/// Parameters of the three conv blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub kernels: [Tensor; 3],
    pub biases: [Tensor; 3],
}

/// The full model: optional encoder, embedding matrix `V [c, k]` (no bias),
/// and the prototype bank `P [k, c]` with one row per attribute.
#[derive(Debug, Clone)]
pub struct ApnModel {
    pub spec: ModelSpec,
    pub encoder: Option<EncoderParams>,
    pub v: Tensor,
    pub p: Tensor,
}

/// Fixed parameter-slot names, also the checkpoint file stems.
pub const ENCODER_PARAM_NAMES: [&str; 6] =
    ["enc_k1", "enc_b1", "enc_k2", "enc_b2", "enc_k3", "enc_b3"];

impl ApnModel {
    /// Initialize parameters from a seed: conv kernels and `V` uniform in
    /// `±sqrt(6 / fan_in)`, prototypes uniform in `±1/sqrt(c)` so the
    /// initial similarity maps sit at unit scale, biases zero.
    pub fn init(spec: ModelSpec, seed: u64) -> ApnModel {
        let mut rng = SplitMix64::stream(seed, 1);
        let mut uniform = |shape: &[usize], bound: f64| {
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = rng.uniform_symmetric(bound);
            }
            t
        };
        let encoder = match spec.mode {
            DataMode::Feature => None,
            DataMode::Image => {
                let chain = [
                    spec.in_channels,
                    spec.enc_channels[0],
                    spec.enc_channels[1],
                    spec.enc_channels[2],
                ];
                let mut kernels = Vec::with_capacity(3);
                let mut biases = Vec::with_capacity(3);
                for b in 0..3 {
                    let (c_in, c_out) = (chain[b], chain[b + 1]);
                    let fan_in = (c_in * 9) as f64;
                    kernels.push(uniform(&[c_out, c_in, 3, 3], (6.0 / fan_in).sqrt()));
                    biases.push(Tensor::zeros(&[c_out]));
                }
                Some(EncoderParams {
                    kernels: kernels.try_into().unwrap(),
                    biases: biases.try_into().unwrap(),
                })
            }
        };
        let c = spec.feature_c;
        let k = spec.num_attrs;
        let v = uniform(&[c, k], (6.0 / c as f64).sqrt());
        let p = uniform(&[k, c], 1.0 / (c as f64).sqrt());
        ApnModel {
            spec,
            encoder,
            v,
            p,
        }
    }

    /// Parameter tensors in slot order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::with_capacity(8);
        if let Some(enc) = &self.encoder {
            for b in 0..3 {
                out.push((ENCODER_PARAM_NAMES[2 * b], &enc.kernels[b]));
                out.push((ENCODER_PARAM_NAMES[2 * b + 1], &enc.biases[b]));
            }
        }
        out.push(("V", &self.v));
        out.push(("P", &self.p));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = Vec::with_capacity(8);
        if let Some(enc) = &mut self.encoder {
            let [k1, k2, k3] = &mut enc.kernels;
            let [b1, b2, b3] = &mut enc.biases;
            out.push(("enc_k1", k1));
            out.push(("enc_b1", b1));
            out.push(("enc_k2", k2));
            out.push(("enc_b2", b2));
            out.push(("enc_k3", k3));
            out.push(("enc_b3", b3));
        }
        out.push(("V", &mut self.v));
        out.push(("P", &mut self.p));
        out
    }

    /// Look up a parameter tensor by slot name.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }

    /// Register all parameters as tape leaves.
    pub fn register(&self, tape: &mut Tape) -> ParamNodes {
        let enc = self.encoder.as_ref().map(|e| {
            [
                (tape.leaf(e.kernels[0].clone()), tape.leaf(e.biases[0].clone())),
                (tape.leaf(e.kernels[1].clone()), tape.leaf(e.biases[1].clone())),
                (tape.leaf(e.kernels[2].clone()), tape.leaf(e.biases[2].clone())),
            ]
        });
        ParamNodes {
            enc,
            v: tape.leaf(self.v.clone()),
            p: tape.leaf(self.p.clone()),
        }
    }

    /// Run the encoder on a raw image, producing the `[h, w, c]` feature map
    /// on the tape. In feature mode the sample already is that map and is
    /// recorded as a constant leaf.
    pub fn features_on(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        input: &Tensor,
    ) -> Result<NodeId> {
        let want = self.spec.input_shape();
        if input.shape() != want.as_slice() {
            return Err(Error::dim(format!(
                "sample tensor has shape {:?}, model expects {:?}",
                input.shape(),
                want
            )));
        }
        match self.spec.mode {
            DataMode::Feature => Ok(tape.leaf(input.clone())),
            DataMode::Image => {
                let enc = nodes.enc.as_ref().expect("image-mode model has an encoder");
                let mut x = tape.leaf(input.clone());
                for block in enc {
                    let c = tape.conv2d(x, block.0, block.1, 2, 1)?;
                    x = tape.relu(c);
                }
                tape.chw_to_hwc(x)
            }
        }
    }

    /// Build the joint objective for one batch on the tape.
    ///
    /// The classification, regression and compactness terms are averaged
    /// over the batch; the decorrelation term depends only on the prototype
    /// bank and enters once per batch. Branches whose weight is zero are not
    /// built at all, so a pure classification run never touches `P`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        batch: &[(&Tensor, ClassId)],
        attrs: &AttributeTable,
        weights: &LossWeights,
    ) -> Result<BatchLoss> {
        weights.validate()?;
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let owned;
        let attrs = if self.spec.normalize_phi {
            owned = attrs.normalized();
            &owned
        } else {
            attrs
        };
        if attrs.k() != self.spec.num_attrs {
            return Err(Error::dim(format!(
                "attribute table has K={}, model expects K={}",
                attrs.k(),
                self.spec.num_attrs
            )));
        }
        let phi_seen = tape.leaf(attrs.phi_subset(attrs.seen())?);
        let inv_b = 1.0 / batch.len() as f64;
        let needs_maps = weights.reg > 0.0 || weights.cpt > 0.0;

        let mut cls_terms = Vec::with_capacity(batch.len());
        let mut reg_terms = Vec::with_capacity(batch.len());
        let mut cpt_terms = Vec::with_capacity(batch.len());
        for &(input, class) in batch {
            let label = attrs.seen_label(class).ok_or_else(|| {
                Error::contract(format!("training sample has non-seen class {class}"))
            })?;
            let fmap = self.features_on(tape, nodes, input)?;
            let g = tape.global_avg_pool(fmap)?;
            let proj = tape.vec_mat(g, nodes.v)?;
            let logits = tape.mat_vec(phi_seen, proj)?;
            cls_terms.push((tape.softmax_cross_entropy(logits, label)?, inv_b));

            if needs_maps {
                let maps = tape.similarity_maps(fmap, nodes.p)?;
                if weights.reg > 0.0 {
                    let a_hat = tape.max_pool_maps(maps)?;
                    let target = Tensor::from_vec(&[attrs.k()], attrs.phi_row(class).to_vec())?;
                    reg_terms.push((tape.squared_error(a_hat, &target)?, inv_b));
                }
                if weights.cpt > 0.0 {
                    cpt_terms.push((tape.compactness(maps, !self.spec.cpt_raw)?, inv_b));
                }
            }
        }

        let cls = tape.weighted_sum(&cls_terms)?;
        let mut total_terms = vec![(cls, 1.0)];
        let mut breakdown = LossBreakdown {
            cls: tape.value(cls).item(),
            ..LossBreakdown::default()
        };
        if !reg_terms.is_empty() {
            let reg = tape.weighted_sum(&reg_terms)?;
            breakdown.reg = tape.value(reg).item();
            total_terms.push((reg, weights.reg));
        }
        if weights.ad > 0.0 {
            let ad = tape.group_lasso(nodes.p, attrs.groups(), AD_EPS)?;
            breakdown.ad = tape.value(ad).item();
            total_terms.push((ad, weights.ad));
        }
        if !cpt_terms.is_empty() {
            let cpt = tape.weighted_sum(&cpt_terms)?;
            breakdown.cpt = tape.value(cpt).item();
            total_terms.push((cpt, weights.cpt));
        }
        let total = tape.weighted_sum(&total_terms)?;
        breakdown.total = tape.value(total).item();
        Ok(BatchLoss {
            total,
            breakdown,
        })
    }

    /// Forward pass without gradients: the feature map and pooled global
    /// feature for one sample.
    pub fn forward(&self, input: &Tensor) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape);
        let fmap = self.features_on(&mut tape, &nodes, input)?;
        let g = tape.global_avg_pool(fmap)?;
        Ok(ForwardPass {
            g: tape.value(g).clone(),
            fmap: tape.value(fmap).clone(),
        })
    }

    /// Similarity maps of this model's prototypes over a feature map.
    pub fn similarity_stack(&self, fmap: &Tensor) -> Result<SimilarityStack> {
        SimilarityStack::compute(fmap, &self.p)
    }

    /// Attribute table as the model consumes it (normalized when the
    /// `normalize_phi` flag is set).
    pub fn effective_attrs(&self, attrs: &AttributeTable) -> AttributeTable {
        if self.spec.normalize_phi {
            attrs.normalized()
        } else {
            attrs.clone()
        }
    }

    // -- checkpoints --------------------------------------------------------

    /// Write the checkpoint directory: one APNT file per parameter slot plus
    /// `meta.json`.
    pub fn save_checkpoint(&self, dir: &Path, epoch: usize, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, tensor) in self.params() {
            tensor.save(&dir.join(format!("{name}.apnt")))?;
        }
        let meta = CheckpointMeta {
            version: 1,
            spec: self.spec.clone(),
            epoch,
            seed,
        };
        let path = dir.join("meta.json");
        let body = serde_json::to_string_pretty(&meta).expect("meta serializes");
        std::fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(ApnModel, CheckpointMeta)> {
        let meta_path = dir.join("meta.json");
        let body = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&body)
            .map_err(|e| Error::format("checkpoint metadata", &meta_path, e))?;
        if meta.version != 1 {
            return Err(Error::format(
                "checkpoint metadata",
                &meta_path,
                format!("unsupported version {}", meta.version),
            ));
        }
        let spec = meta.spec.clone();
        let mut model = ApnModel {
            spec: spec.clone(),
            encoder: None,
            v: Tensor::load(&dir.join("V.apnt"))?,
            p: Tensor::load(&dir.join("P.apnt"))?,
        };
        if spec.mode == DataMode::Image {
            let chain = [
                spec.in_channels,
                spec.enc_channels[0],
                spec.enc_channels[1],
                spec.enc_channels[2],
            ];
            let mut kernels = Vec::with_capacity(3);
            let mut biases = Vec::with_capacity(3);
            for b in 0..3 {
                let k = Tensor::load(&dir.join(format!("{}.apnt", ENCODER_PARAM_NAMES[2 * b])))?;
                let bias = Tensor::load(&dir.join(format!("{}.apnt", ENCODER_PARAM_NAMES[2 * b + 1])))?;
                let want_k = [chain[b + 1], chain[b], 3, 3];
                if k.shape() != want_k {
                    return Err(Error::dim(format!(
                        "checkpoint kernel block {b} has shape {:?}, metadata implies {:?}",
                        k.shape(),
                        want_k
                    )));
                }
                if bias.shape() != [chain[b + 1]] {
                    return Err(Error::dim(format!(
                        "checkpoint bias block {b} has shape {:?}, metadata implies [{}]",
                        bias.shape(),
                        chain[b + 1]
                    )));
                }
                kernels.push(k);
                biases.push(bias);
            }
            model.encoder = Some(EncoderParams {
                kernels: kernels.try_into().unwrap(),
                biases: biases.try_into().unwrap(),
            });
        }
        if model.v.shape() != [spec.feature_c, spec.num_attrs] {
            return Err(Error::dim(format!(
                "checkpoint V has shape {:?}, metadata implies [{}, {}]",
                model.v.shape(),
                spec.feature_c,
                spec.num_attrs
            )));
        }
        if model.p.shape() != [spec.num_attrs, spec.feature_c] {
            return Err(Error::dim(format!(
                "checkpoint P has shape {:?}, metadata implies [{}, {}]",
                model.p.shape(),
                spec.num_attrs,
                spec.feature_c
            )));
        }
        Ok((model, meta))
    }
}

/// Tape node ids of the registered parameters, in slot order.
pub struct ParamNodes {
    pub enc: Option<[(NodeId, NodeId); 3]>,
    pub v: NodeId,
    pub p: NodeId,
}

impl ParamNodes {
    /// `(slot name, node id)` pairs matching [`ApnModel::params`] order.
    pub fn named(&self) -> Vec<(&'static str, NodeId)> {
        let mut out = Vec::with_capacity(8);
        if let Some(enc) = &self.enc {
            for (b, (k, bias)) in enc.iter().enumerate() {
                out.push((ENCODER_PARAM_NAMES[2 * b], *k));
                out.push((ENCODER_PARAM_NAMES[2 * b + 1], *bias));
            }
        }
        out.push(("V", self.v));
        out.push(("P", self.p));
        out
    }
}

/// Coefficients of the joint objective; `reg`, `ad`, `cpt` are the paper's
/// lambda_1..3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reg: f64,
    pub ad: f64,
    pub cpt: f64,
}

impl LossWeights {
    /// The defaults from the training protocol: 1, 0.1, 0.2.
    pub fn full() -> LossWeights {
        LossWeights {
            reg: 1.0,
            ad: 0.1,
            cpt: 0.2,
        }
    }

    /// Classification-only baseline.
    pub fn cls_only() -> LossWeights {
        LossWeights {
            reg: 0.0,
            ad: 0.0,
            cpt: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reg < 0.0 || self.ad < 0.0 || self.cpt < 0.0 {
            return Err(Error::contract("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-term means of one batch (unweighted) plus the combined total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub ad: f64,
    pub cpt: f64,
    pub total: f64,
}

/// Loss node plus the logged breakdown for one batch.
pub struct BatchLoss {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// Gradient-free forward result for one sample.
pub struct ForwardPass {
    /// Pooled global feature `g(x)` of shape `[c]`.
    pub g: Tensor,
    /// Feature map `[h, w, c]`.
    pub fmap: Tensor,
}

/// The K similarity maps of one sample with per-map peak bookkeeping.
#[derive(Debug, Clone)]
pub struct SimilarityStack {
    maps: Tensor,
    peaks: Vec<(usize, usize)>,
    values: Vec<f64>,
}

impl SimilarityStack {
    /// `maps[k,i,j] = <protos[k,:], fmap[i,j,:]>` with peaks recorded under
    /// the row-major tie rule.
    pub fn compute(fmap: &Tensor, protos: &Tensor) -> Result<SimilarityStack> {
        if fmap.rank() != 3 || protos.rank() != 2 || fmap.shape()[2] != protos.shape()[1] {
            return Err(Error::dim(format!(
                "similarity stack needs fmap [h,w,c] and prototypes [k,c]; got {:?} and {:?}",
                fmap.shape(),
                protos.shape()
            )));
        }
        let maps = similarity_maps_raw(fmap, protos);
        Ok(SimilarityStack::from_maps(maps))
    }

    /// Wrap precomputed `[k, h, w]` maps, recomputing the peak bookkeeping.
    pub fn from_maps(maps: Tensor) -> SimilarityStack {
        assert_eq!(maps.rank(), 3, "similarity stack needs [k,h,w] maps");
        let (k, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
        let mut peaks = Vec::with_capacity(k);
        let mut values = Vec::with_capacity(k);
        for ki in 0..k {
            let (flat, max, _) = argmax_with_gap(&maps.data()[ki * h * w..(ki + 1) * h * w]);
            peaks.push((flat / w, flat % w));
            values.push(max);
        }
        SimilarityStack { maps, peaks, values }
    }

    pub fn num_maps(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    /// Copy of map `k` as an `[h, w]` tensor.
    pub fn map(&self, k: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        Tensor::from_vec(&[h, w], self.maps.data()[k * h * w..(k + 1) * h * w].to_vec())
            .expect("slice length matches")
    }

    /// Peak coordinate `(i, j)` of map `k`.
    pub fn peaks(&self) -> &[(usize, usize)] {
        &self.peaks
    }

    /// Per-map maxima, i.e. the attribute predictions.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Attribute prediction from similarity maps: the per-map maximum.
pub fn predict_attributes(stack: &SimilarityStack) -> Tensor {
    Tensor::from_vec(&[stack.num_maps()], stack.values().to_vec()).expect("length matches")
}

// ---------------------------------------------------------------------------
// Standalone loss evaluation
// ---------------------------------------------------------------------------
//
// The training path records these on the tape; the functions below evaluate
// the same formulas on plain tensors for reporting and tests. Where there is
// a shared kernel (group lasso, compactness) both paths call it.

/// Class logits of the bilinear compatibility: `logit_i = g^T V phi_i`.
pub fn compatibility_logits(g: &Tensor, v: &Tensor, phi_subset: &Tensor) -> Result<Tensor> {
    if g.rank() != 1 || v.rank() != 2 || g.shape()[0] != v.shape()[0] {
        return Err(Error::dim(format!(
            "compatibility needs g [c] and V [c,k]; got {:?} and {:?}",
            g.shape(),
            v.shape()
        )));
    }
    if phi_subset.rank() != 2 || phi_subset.shape()[1] != v.shape()[1] {
        return Err(Error::dim(format!(
            "class embeddings {:?} do not match V {:?}",
            phi_subset.shape(),
            v.shape()
        )));
    }
    if phi_subset.shape()[0] == 0 {
        return Err(Error::contract("empty class subset"));
    }
    let (c, k) = (v.shape()[0], v.shape()[1]);
    let mut proj = vec![0.0; k];
    for ci in 0..c {
        let gv = g.data()[ci];
        for (pk, &vv) in proj.iter_mut().zip(&v.data()[ci * k..(ci + 1) * k]) {
            *pk += gv * vv;
        }
    }
    let n = phi_subset.shape()[0];
    let mut out = Tensor::zeros(&[n]);
    for i in 0..n {
        let row = &phi_subset.data()[i * k..(i + 1) * k];
        out.data_mut()[i] = row.iter().zip(&proj).map(|(a, b)| a * b).sum();
    }
    Ok(out)
}

/// Cross-entropy of the label under softmax of the logits.
pub fn loss_cls(logits: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let node = tape.leaf(logits.clone());
    let loss = tape.softmax_cross_entropy(node, label)?;
    Ok(tape.value(loss).item())
}

/// Unnormalized squared L2 distance between prediction and target.
pub fn loss_reg(a_hat: &Tensor, phi_y: &Tensor) -> Result<f64> {
    if a_hat.shape() != phi_y.shape() {
        return Err(Error::dim(format!(
            "attribute prediction {:?} vs target {:?}",
            a_hat.shape(),
            phi_y.shape()
        )));
    }
    Ok(a_hat
        .data()
        .iter()
        .zip(phi_y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Group-lasso decorrelation penalty over prototype channels.
pub fn loss_ad(p: &Tensor, groups: &[Vec<usize>]) -> Result<f64> {
    if p.rank() != 2 {
        return Err(Error::dim(format!(
            "prototype bank must be [k,c], got {:?}",
            p.shape()
        )));
    }
    crate::autodiff::validate_partition(groups, p.shape()[0])?;
    Ok(group_lasso_raw(p, groups, AD_EPS))
}

/// Compactness penalty of a similarity stack.
pub fn loss_cpt(stack: &SimilarityStack, clamp: bool) -> f64 {
    compactness_raw(stack.maps(), clamp).0
}
