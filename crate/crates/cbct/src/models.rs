//! The three reconstruction architectures.
//!
//! * `fdkconvnet` — single-branch encoder–decoder post-processing the
//!   sparse FDK slice, with an additive residual output.
//! * `prior_net` — two independent encoders (sparse branch, prior branch)
//!   whose feature maps are concatenated into one decoder at every scale.
//! * `prior_segnet` — `prior_net` plus a parallel instrument-segmentation
//!   block with sigmoid output; both heads consume the features produced
//!   after the last upsampling.
//!
//! Blocks are two 3×3 convolutions with ReLU; channel width doubles per
//! scale. Initialization is He-uniform from the spec seed, drawn in `f64`
//! so the `f32` and `f64` instantiations of one seed share values.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CbctError, Result};
use crate::nn::{AdamState, Element, Tape, Tensor4, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "fdkconvnet")]
    FdkConvNet,
    #[serde(rename = "prior_net")]
    PriorNet,
    #[serde(rename = "prior_segnet")]
    PriorSegNet,
}

impl ModelKind {
    pub fn uses_prior(self) -> bool {
        !matches!(self, ModelKind::FdkConvNet)
    }

    pub fn has_seg_head(self) -> bool {
        matches!(self, ModelKind::PriorSegNet)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::FdkConvNet => "fdkconvnet",
            ModelKind::PriorNet => "prior_net",
            ModelKind::PriorSegNet => "prior_segnet",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = CbctError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fdkconvnet" => Ok(ModelKind::FdkConvNet),
            "prior_net" => Ok(ModelKind::PriorNet),
            "prior_segnet" => Ok(ModelKind::PriorSegNet),
            other => Err(CbctError::InvalidArgument(format!(
                "unknown model kind '{other}' (want fdkconvnet, prior_net or prior_segnet)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_scales: usize,
    pub base_channels: usize,
    pub input_size: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn desk_scale(kind: ModelKind, seed: u64) -> Self {
        ModelSpec {
            kind,
            n_scales: 3,
            base_channels: 16,
            input_size: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scales < 2 {
            return Err(CbctError::InvalidArgument(format!(
                "n_scales must be >= 2, got {}",
                self.n_scales
            )));
        }
        if self.base_channels == 0 {
            return Err(CbctError::InvalidArgument("base_channels must be >= 1".into()));
        }
        let div = 1 << (self.n_scales - 1);
        if self.input_size % div != 0 {
            return Err(CbctError::InvalidArgument(format!(
                "input_size {} not divisible by 2^(n_scales-1) = {div}",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockRef {
    c1: ConvRef,
    c2: ConvRef,
}

/// Two-conv head: 3×3 + ReLU, then 1×1 to a single channel.
#[derive(Debug, Clone, Copy)]
struct HeadRef {
    c1: ConvRef,
    c2: ConvRef,
}

#[derive(Debug, Clone)]
struct Arch {
    enc_sparse: Vec<BlockRef>,
    enc_prior: Vec<BlockRef>,
    fuse: Option<BlockRef>,
    dec: Vec<BlockRef>,
    recon_head: HeadRef,
    seg_head: Option<HeadRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDef {
    pub name: String,
    pub shape: [usize; 4],
}

struct ParamAllocator {
    defs: Vec<ParamDef>,
}

impl ParamAllocator {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvRef {
        let w = self.defs.len();
        self.defs.push(ParamDef {
            name: format!("{name}.weight"),
            shape: [cout, cin, k, k],
        });
        let b = self.defs.len();
        self.defs.push(ParamDef {
            name: format!("{name}.bias"),
            shape: [1, cout, 1, 1],
        });
        ConvRef { w, b }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> BlockRef {
        BlockRef {
            c1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            c2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
        }
    }

    fn head(&mut self, name: &str, cin: usize) -> HeadRef {
        HeadRef {
            c1: self.conv(&format!("{name}.conv1"), cin, cin, 3),
            c2: self.conv(&format!("{name}.conv2"), cin, 1, 1),
        }
    }
}

fn build_arch(spec: &ModelSpec) -> (Arch, Vec<ParamDef>) {
    let mut alloc = ParamAllocator { defs: Vec::new() };
    let c = |s: usize| spec.base_channels << s;
    let last = spec.n_scales - 1;

    let encoder = |alloc: &mut ParamAllocator, prefix: &str| -> Vec<BlockRef> {
        (0..spec.n_scales)
            .map(|s| {
                let cin = if s == 0 { 1 } else { c(s - 1) };
                alloc.block(&format!("{prefix}{s}"), cin, c(s))
            })
            .collect()
    };

    let enc_sparse = encoder(&mut alloc, "enc_sparse");
    let (enc_prior, fuse) = if spec.kind.uses_prior() {
        let enc_prior = encoder(&mut alloc, "enc_prior");
        let fuse = alloc.block("fuse", 2 * c(last), c(last));
        (enc_prior, Some(fuse))
    } else {
        (Vec::new(), None)
    };

    // decoder blocks from deepest to shallowest scale
    let skip_width = if spec.kind.uses_prior() { 2 } else { 1 };
    let dec = (0..last)
        .rev()
        .map(|s| {
            let cin = c(s + 1) + skip_width * c(s);
            alloc.block(&format!("dec{s}"), cin, c(s))
        })
        .collect();

    let recon_head = alloc.head("recon_head", c(0));
    let seg_head = spec
        .kind
        .has_seg_head()
        .then(|| alloc.head("seg_head", c(0)));

    (
        Arch {
            enc_sparse,
            enc_prior,
            fuse,
            dec,
            recon_head,
            seg_head,
        },
        alloc.defs,
    )
}

/// A model: spec plus parameter tensors in declaration order.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub spec: ModelSpec,
    pub defs: Vec<ParamDef>,
    pub params: Vec<Tensor4<F>>,
}

impl<F: Element> Model<F> {
    pub fn param_values(&self) -> Vec<Array4<F>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_param_values(&mut self, values: &[Array4<F>]) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values.iter()) {
            p.value = v.clone();
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Element>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            defs: self.defs.clone(),
            params: self
                .params
                .iter()
                .map(|p| Tensor4::new(p.value.mapv(|v| G::from_f64(v.to_f64().unwrap()))))
                .collect(),
        }
    }
}

/// Deterministic He-uniform build: weights ~ U(−√(6/fan_in), +√(6/fan_in)),
/// biases zero, drawn from the spec seed in declaration order.
pub fn build<F: Element>(spec: &ModelSpec) -> Result<Model<F>> {
    spec.validate()?;
    let (_, defs) = build_arch(spec);
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let params = defs
        .iter()
        .map(|def| {
            let [cout, cin, kh, kw] = def.shape;
            let value = if def.name.ends_with(".bias") {
                Array4::zeros((cout, cin, kh, kw))
            } else {
                let fan_in = (cin * kh * kw) as f64;
                let bound = (6.0 / fan_in).sqrt();
                Array4::from_shape_fn((cout, cin, kh, kw), |_| {
                    F::from_f64(rng.gen_range(-bound..bound))
                })
            };
            Tensor4::new(value)
        })
        .collect();
    Ok(Model {
        spec: spec.clone(),
        defs,
        params,
    })
}

/// Outputs of one forward pass, as tape handles.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub p_r: TensorId,
    pub p_s: Option<TensorId>,
    /// Feature tensor the reconstruction head consumes.
    pub recon_head_input: TensorId,
    /// Feature tensor the segmentation head consumes (Prior-SegNet only).
    pub seg_head_input: Option<TensorId>,
    /// Parameter leaves in declaration order; their gradients appear here
    /// after `tape.backward`.
    pub param_ids: Vec<TensorId>,
}

/// Run the model on a batch. `prior` is required exactly for the
/// dual-branch kinds. Spatial dims must be divisible by `2^(n_scales−1)`.
pub fn forward<F: Element>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    sparse: &Array4<F>,
    prior: Option<&Array4<F>>,
    requires_grad: bool,
) -> Result<Prediction> {
    let spec = &model.spec;
    let (n, cch, h, w) = sparse.dim();
    if cch != 1 {
        return Err(CbctError::InvalidArgument(format!(
            "expected single-channel input, got {cch} channels"
        )));
    }
    let div = 1 << (spec.n_scales - 1);
    if h % div != 0 || w % div != 0 {
        return Err(CbctError::InvalidArgument(format!(
            "input {h}x{w} not divisible by {div}"
        )));
    }
    match (spec.kind.uses_prior(), prior) {
        (true, None) => {
            return Err(CbctError::InvalidArgument(format!(
                "{} needs a prior slice",
                spec.kind.as_str()
            )));
        }
        (false, Some(_)) => {
            return Err(CbctError::InvalidArgument(format!(
                "{} takes no prior slice",
                spec.kind.as_str()
            )));
        }
        _ => {}
    }
    if let Some(p) = prior {
        if p.dim() != (n, 1, h, w) {
            return Err(CbctError::InvalidArgument(
                "prior and sparse slices must share dimensions".into(),
            ));
        }
    }

    let (arch, _) = build_arch(spec);
    let param_ids: Vec<TensorId> = model
        .params
        .iter()
        .map(|p| tape.leaf(p.value.clone(), requires_grad))
        .collect();

    let conv = |tape: &mut Tape<F>, r: ConvRef, x: TensorId, pad: usize| -> Result<TensorId> {
        tape.conv2d(x, param_ids[r.w], param_ids[r.b], 1, pad)
    };
    let block = |tape: &mut Tape<F>, r: BlockRef, x: TensorId| -> Result<TensorId> {
        let y = conv(tape, r.c1, x, 1)?;
        let y = tape.relu(y);
        let y = conv(tape, r.c2, y, 1)?;
        Ok(tape.relu(y))
    };
    let head = |tape: &mut Tape<F>, r: HeadRef, x: TensorId| -> Result<TensorId> {
        let y = conv(tape, r.c1, x, 1)?;
        let y = tape.relu(y);
        conv(tape, r.c2, y, 0)
    };
    let encode = |tape: &mut Tape<F>, blocks: &[BlockRef], x: TensorId| -> Result<Vec<TensorId>> {
        let mut feats = Vec::with_capacity(blocks.len());
        let mut cur = x;
        for (s, b) in blocks.iter().enumerate() {
            if s > 0 {
                cur = tape.maxpool2(cur)?;
            }
            cur = block(tape, *b, cur)?;
            feats.push(cur);
        }
        Ok(feats)
    };

    let sparse_id = tape.leaf(sparse.clone(), false);
    let feats_sparse = encode(tape, &arch.enc_sparse, sparse_id)?;

    let decoded = if spec.kind.uses_prior() {
        let prior_id = tape.leaf(prior.unwrap().clone(), false);
        let feats_prior = encode(tape, &arch.enc_prior, prior_id)?;
        let bottleneck = tape.concat_channels(&[
            *feats_sparse.last().unwrap(),
            *feats_prior.last().unwrap(),
        ])?;
        let mut cur = block(tape, arch.fuse.unwrap(), bottleneck)?;
        for (i, s) in (0..spec.n_scales - 1).rev().enumerate() {
            let up = tape.upsample2(cur);
            let cat = tape.concat_channels(&[up, feats_sparse[s], feats_prior[s]])?;
            cur = block(tape, arch.dec[i], cat)?;
        }
        cur
    } else {
        let mut cur = *feats_sparse.last().unwrap();
        for (i, s) in (0..spec.n_scales - 1).rev().enumerate() {
            let up = tape.upsample2(cur);
            let cat = tape.concat_channels(&[up, feats_sparse[s]])?;
            cur = block(tape, arch.dec[i], cat)?;
        }
        cur
    };

    let recon_out = head(tape, arch.recon_head, decoded)?;
    let p_r = if spec.kind == ModelKind::FdkConvNet {
        // residual correction on top of the sparse FDK input
        tape.add(recon_out, sparse_id)?
    } else {
        recon_out
    };
    let (p_s, seg_head_input) = match arch.seg_head {
        Some(seg) => {
            let logits = head(tape, seg, decoded)?;
            (Some(tape.sigmoid(logits)), Some(decoded))
        }
        None => (None, None),
    };

    Ok(Prediction {
        p_r,
        p_s,
        recon_head_input: decoded,
        seg_head_input,
        param_ids,
    })
}

// ---- checkpoints -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlockDef {
    pub name: String,
    /// `param`, `adam_m` or `adam_v`.
    pub role: String,
    pub shape: [usize; 4],
}

/// Checkpoint sidecar: model spec, training progress, and the list of raw
/// weight blocks in file order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: ModelSpec,
    pub tag: String,
    pub epochs_completed: usize,
    pub step: usize,
    pub best_val_total: f64,
    pub adam: Option<AdamHyper>,
    pub blocks: Vec<BlockDef>,
    pub data: String,
}

/// Write `<stem>.ckpt` (TOML manifest) and `<stem>.weights` (f32 LE blocks
/// in declaration order: parameters, then Adam m and v when present).
pub fn save_checkpoint(
    model: &Model<f32>,
    tag: &str,
    epochs_completed: usize,
    best_val_total: f64,
    adam: Option<&AdamState<f32>>,
    stem: &Path,
) -> Result<()> {
    let mut blocks = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    let mut push_block = |name: &str, role: &str, arr: &Array4<f32>, blocks: &mut Vec<BlockDef>| {
        let d = arr.dim();
        blocks.push(BlockDef {
            name: name.to_string(),
            role: role.to_string(),
            shape: [d.0, d.1, d.2, d.3],
        });
        for v in arr.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (def, p) in model.defs.iter().zip(model.params.iter()) {
        push_block(&def.name, "param", &p.value, &mut blocks);
    }
    if let Some(state) = adam {
        for (def, m) in model.defs.iter().zip(state.m.iter()) {
            push_block(&def.name, "adam_m", m, &mut blocks);
        }
        for (def, v) in model.defs.iter().zip(state.v.iter()) {
            push_block(&def.name, "adam_v", v, &mut blocks);
        }
    }
    let manifest = CheckpointManifest {
        spec: model.spec.clone(),
        tag: tag.to_string(),
        epochs_completed,
        step: adam.map(|a| a.t).unwrap_or(0),
        best_val_total,
        adam: adam.map(|a| AdamHyper {
            lr: a.lr as f64,
            beta1: a.beta1 as f64,
            beta2: a.beta2 as f64,
            eps: a.eps as f64,
            t: a.t,
        }),
        blocks,
        data: format!(
            "{}.weights",
            stem.file_name().unwrap_or_default().to_string_lossy()
        ),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| CbctError::InvalidData(format!("checkpoint manifest: {e}")))?;
    let manifest_path = stem.with_extension("ckpt");
    fs::write(&manifest_path, text).map_err(|e| CbctError::io(&manifest_path, e))?;
    let weights_path = stem.with_extension("weights");
    fs::write(&weights_path, bytes).map_err(|e| CbctError::io(&weights_path, e))?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(
    stem: &Path,
) -> Result<(Model<f32>, CheckpointManifest, Option<AdamState<f32>>)> {
    let manifest_path = if stem.extension().map(|e| e == "ckpt").unwrap_or(false) {
        stem.to_path_buf()
    } else {
        stem.with_extension("ckpt")
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| CbctError::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = toml::from_str(&text)
        .map_err(|e| CbctError::InvalidData(format!("{}: {e}", manifest_path.display())))?;
    let weights_path: PathBuf = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.data);
    let bytes = fs::read(&weights_path).map_err(|e| CbctError::io(&weights_path, e))?;

    let total: usize = manifest
        .blocks
        .iter()
        .map(|b| b.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != total * 4 {
        return Err(CbctError::InvalidData(format!(
            "{}: expected {} bytes, found {}",
            weights_path.display(),
            total * 4,
            bytes.len()
        )));
    }

    let mut model = build::<f32>(&manifest.spec)?;
    let mut cursor = 0usize;
    let mut read_block = |shape: [usize; 4]| -> Array4<f32> {
        let len: usize = shape.iter().product();
        let vals: Vec<f32> = bytes[cursor * 4..(cursor + len) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        cursor += len;
        Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), vals)
            .expect("shape checked")
    };

    let mut params = Vec::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for blockdef in &manifest.blocks {
        let arr = read_block(blockdef.shape);
        match blockdef.role.as_str() {
            "param" => params.push(arr),
            "adam_m" => adam_m.push(arr),
            "adam_v" => adam_v.push(arr),
            other => {
                return Err(CbctError::InvalidData(format!(
                    "unknown checkpoint block role '{other}'"
                )));
            }
        }
    }
    if params.len() != model.params.len() {
        return Err(CbctError::InvalidData(format!(
            "checkpoint has {} parameter blocks, model wants {}",
            params.len(),
            model.params.len()
        )));
    }
    for ((def, p), arr) in model.defs.iter().zip(model.params.iter_mut()).zip(params) {
        let d = arr.dim();
        if [d.0, d.1, d.2, d.3] != def.shape {
            return Err(CbctError::InvalidData(format!(
                "checkpoint block {} has shape {:?}, model wants {:?}",
                def.name,
                d,
                def.shape
            )));
        }
        p.value = arr;
    }
    let adam = match (&manifest.adam, adam_m.is_empty()) {
        (Some(h), false) => {
            if adam_m.len() != model.params.len() || adam_v.len() != model.params.len() {
                return Err(CbctError::InvalidData(
                    "checkpoint Adam blocks do not match parameter count".into(),
                ));
            }
            Some(AdamState {
                lr: h.lr as f32,
                beta1: h.beta1 as f32,
                beta2: h.beta2 as f32,
                eps: h.eps as f32,
                t: h.t,
                m: adam_m,
                v: adam_v,
            })
        }
        _ => None,
    };
    Ok((model, manifest, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            n_scales: 3,
            base_channels: 4,
            input_size: 16,
            seed: 42,
        }
    }

    fn random_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn prior_segnet_shapes_match_contract() {
        let model = build::<f32>(&spec(ModelKind::PriorSegNet)).unwrap();
        let mut tape = Tape::new();
        let sparse = random_input((1, 1, 16, 16), 1);
        let prior = random_input((1, 1, 16, 16), 2);
        let pred = forward(&model, &mut tape, &sparse, Some(&prior), false).unwrap();
        assert_eq!(tape.value(pred.p_r).dim(), (1, 1, 16, 16));
        let p_s = pred.p_s.unwrap();
        assert_eq!(tape.value(p_s).dim(), (1, 1, 16, 16));
        assert!(tape.value(p_s).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn prior_net_has_no_seg_head() {
        let model = build::<f32>(&spec(ModelKind::PriorNet)).unwrap();
        let mut tape = Tape::new();
        let sparse = random_input((2, 1, 16, 16), 3);
        let prior = random_input((2, 1, 16, 16), 4);
        let pred = forward(&model, &mut tape, &sparse, Some(&prior), false).unwrap();
        assert!(pred.p_s.is_none());
        assert!(pred.seg_head_input.is_none());
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = build::<f32>(&spec(ModelKind::PriorSegNet)).unwrap();
        let b = build::<f32>(&spec(ModelKind::PriorSegNet)).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.value, y.value);
        }
        let mut other_seed = spec(ModelKind::PriorSegNet);
        other_seed.seed = 43;
        let c = build::<f32>(&other_seed).unwrap();
        assert_ne!(a.params[0].value, c.params[0].value);
    }

    #[test]
    fn fdkconvnet_with_zero_weights_is_identity() {
        let mut model = build::<f32>(&spec(ModelKind::FdkConvNet)).unwrap();
        for p in model.params.iter_mut() {
            p.value.fill(0.0);
        }
        let mut tape = Tape::new();
        let sparse = random_input((1, 1, 16, 16), 5);
        let pred = forward(&model, &mut tape, &sparse, None, false).unwrap();
        assert_eq!(tape.value(pred.p_r), &sparse);
    }

    #[test]
    fn both_heads_share_the_last_upsampling_features() {
        let model = build::<f32>(&spec(ModelKind::PriorSegNet)).unwrap();
        let mut tape = Tape::new();
        let sparse = random_input((1, 1, 16, 16), 6);
        let prior = random_input((1, 1, 16, 16), 7);
        let pred = forward(&model, &mut tape, &sparse, Some(&prior), false).unwrap();
        assert_eq!(pred.recon_head_input, pred.seg_head_input.unwrap());
    }

    #[test]
    fn prior_input_is_load_bearing() {
        let model = build::<f32>(&spec(ModelKind::PriorNet)).unwrap();
        let mut tape = Tape::new();
        let sparse = random_input((1, 1, 16, 16), 8);
        let prior = random_input((1, 1, 16, 16), 9);
        let pred = forward(&model, &mut tape, &sparse, Some(&prior), false).unwrap();
        let base = tape.value(pred.p_r).clone();

        let mut tape2 = Tape::new();
        let mut perturbed = prior.clone();
        perturbed[[0, 0, 8, 8]] += 0.5;
        let pred2 = forward(&model, &mut tape2, &sparse, Some(&perturbed), false).unwrap();
        let changed = tape2.value(pred2.p_r);
        let diff: f32 = base
            .iter()
            .zip(changed.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0, "perturbing the prior changed nothing");
    }

    #[test]
    fn missing_prior_is_rejected() {
        let model = build::<f32>(&spec(ModelKind::PriorSegNet)).unwrap();
        let mut tape = Tape::new();
        let sparse = random_input((1, 1, 16, 16), 10);
        assert!(forward(&model, &mut tape, &sparse, None, false).is_err());
        let fdk = build::<f32>(&spec(ModelKind::FdkConvNet)).unwrap();
        let prior = random_input((1, 1, 16, 16), 11);
        assert!(forward(&fdk, &mut tape, &sparse, Some(&prior), false).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let model = build::<f32>(&spec(ModelKind::PriorSegNet)).unwrap();
        let adam = AdamState::new(&model.param_values(), 1e-3);
        let stem = dir.path().join("model");
        save_checkpoint(&model, "prior_segnet", 7, 0.123, Some(&adam), &stem).unwrap();
        let (loaded, manifest, loaded_adam) = load_checkpoint(&stem).unwrap();
        assert_eq!(manifest.tag, "prior_segnet");
        assert_eq!(manifest.epochs_completed, 7);
        assert_eq!(loaded.spec, model.spec);
        for (a, b) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.value, b.value);
        }
        let la = loaded_adam.unwrap();
        assert_eq!(la.t, 0);
        assert_eq!(la.m.len(), model.params.len());
    }

    #[test]
    fn invalid_specs_are_rejected()  {
        let mut s = spec(ModelKind::PriorNet);
        s.n_scales = 1;
        assert!(build::<f32>(&s).is_err());
        let mut s2 = spec(ModelKind::PriorNet);
        s2.input_size = 18; // not divisible by 4
        assert!(build::<f32>(&s2).is_err());
    }
}
