//! Ensemble-connection residual network (EcNet).
//!
//! Inside a group, pre-activation bottleneck blocks keep the identity skip
//! `y + F(y)`. Between groups an ensemble boundary concatenates the transform branch
//! with a 2×2-pooled copy of its input, so every earlier branch reaches the final
//! maps, and therefore the pooled classifier, on its own channels.

use std::ops::Range;

use rand::Rng;

use crate::engine::{concat_channels, he_normal, BnMode, BnStats, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Running-statistics momentum: `running ← m·running + (1−m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Running statistics; nothing is updated.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSpec {
    /// Identity bottleneck blocks in the group.
    pub blocks: usize,
    /// Channels produced by the transform branch of the boundary after this group,
    /// `None` for the last group.
    pub boundary_channels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EcNetConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub stem_channels: usize,
    pub groups: Vec<GroupSpec>,
}

impl Default for EcNetConfig {
    /// 32×32 RGB → 16ch stem, three groups of two blocks, boundaries adding 32 and 64
    /// channels: C(I) is 112×8×8.
    fn default() -> Self {
        EcNetConfig {
            input_h: 32,
            input_w: 32,
            stem_channels: 16,
            groups: vec![
                GroupSpec { blocks: 2, boundary_channels: Some(32) },
                GroupSpec { blocks: 2, boundary_channels: Some(64) },
                GroupSpec { blocks: 2, boundary_channels: None },
            ],
        }
    }
}

impl EcNetConfig {
    /// Tiny configuration for exhaustive gradient checks: 8×8 input, 12×4×4 output.
    pub fn toy() -> Self {
        EcNetConfig {
            input_h: 8,
            input_w: 8,
            stem_channels: 4,
            groups: vec![
                GroupSpec { blocks: 1, boundary_channels: Some(8) },
                GroupSpec { blocks: 1, boundary_channels: None },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::invalid("EcNet needs at least one group"));
        }
        if self.stem_channels == 0 || self.stem_channels % 4 != 0 {
            return Err(Error::invalid(format!(
                "stem channels {} must be a positive multiple of 4",
                self.stem_channels
            )));
        }
        let n = self.groups.len();
        for (i, g) in self.groups.iter().enumerate() {
            match g.boundary_channels {
                Some(c) if i + 1 == n => {
                    return Err(Error::invalid(format!(
                        "last group cannot have a boundary (got {c} channels)"
                    )))
                }
                None if i + 1 < n => {
                    return Err(Error::invalid(format!("group {i} needs boundary channels")))
                }
                Some(c) if c == 0 || c % 4 != 0 => {
                    return Err(Error::invalid(format!(
                        "boundary channels {c} must be a positive multiple of 4"
                    )))
                }
                _ => {}
            }
        }
        let scale = 1usize << self.num_boundaries();
        if self.input_h % scale != 0 || self.input_w % scale != 0 {
            return Err(Error::invalid(format!(
                "input {}×{} not divisible by {scale} for {} boundaries",
                self.input_h,
                self.input_w,
                self.num_boundaries()
            )));
        }
        Ok(())
    }

    pub fn num_boundaries(&self) -> usize {
        self.groups.len() - 1
    }

    /// Channels of C(I): stem plus every boundary's transform channels.
    pub fn out_channels(&self) -> usize {
        self.stem_channels
            + self
                .groups
                .iter()
                .filter_map(|g| g.boundary_channels)
                .sum::<usize>()
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let s = 1usize << self.num_boundaries();
        (self.input_h / s, self.input_w / s)
    }

    /// Spatial positions of C(I).
    pub fn positions(&self) -> usize {
        let (h, w) = self.out_hw();
        h * w
    }

    /// Channel ranges of C(I) by origin: the newest boundary comes first, the stem
    /// lineage last.
    pub fn channel_partition(&self) -> Vec<(String, Range<usize>)> {
        let mut lineage: Vec<(String, usize)> = vec![("stem".to_string(), self.stem_channels)];
        for (i, g) in self.groups.iter().enumerate() {
            if let Some(c) = g.boundary_channels {
                lineage.insert(0, (format!("boundary{i}"), c));
            }
        }
        let mut start = 0;
        lineage
            .into_iter()
            .map(|(name, c)| {
                let r = start..start + c;
                start += c;
                (name, r)
            })
            .collect()
    }
}

/// Batch statistics waiting to be folded into running averages.
#[derive(Debug, Default)]
pub struct BnUpdates(Vec<(ParamId, ParamId, BnStats)>);

impl BnUpdates {
    pub fn apply(&self, store: &mut ParamStore) {
        for (mean_id, var_id, stats) in &self.0 {
            for (r, b) in store.value_mut(*mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in store.value_mut(*var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, prefix: &str, c: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[c])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[c])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones(&[c])),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        mode: Mode,
        updates: &mut BnUpdates,
    ) -> Result<Var<'t>> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm(gamma, beta, BnMode::Train)?;
                if let Some(stats) = stats {
                    updates.0.push((self.running_mean, self.running_var, stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.value(self.running_mean).data();
                let var = store.value(self.running_var).data();
                Ok(x.batch_norm(gamma, beta, BnMode::Eval { mean, var })?.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let w = he_normal(&[c_out, c_in, k, k], c_in * k * k, rng);
        Conv {
            weight: store.add(format!("{name}.weight"), w),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(tape.param(store, self.weight), self.stride, self.pad)
    }
}

/// Pre-activation bottleneck: (BN→ReLU→conv) × 3 with 1×1 reduce, 3×3, 1×1 expand.
///
/// An identity block maps `C → C`; the transform of an ensemble boundary maps
/// `C_in → C_new` with a stride-2 middle conv.
#[derive(Debug, Clone)]
pub struct BottleneckBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    stages: [(BatchNorm, Conv); 3],
}

impl BottleneckBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let mid = c_out / 4;
        let stages = [
            (
                BatchNorm::new(store, &format!("{prefix}.bn1"), c_in),
                Conv::new(store, &format!("{prefix}.conv1"), c_in, mid, 1, 1, rng),
            ),
            (
                BatchNorm::new(store, &format!("{prefix}.bn2"), mid),
                Conv::new(store, &format!("{prefix}.conv2"), mid, mid, 3, stride, rng),
            ),
            (
                BatchNorm::new(store, &format!("{prefix}.bn3"), mid),
                Conv::new(store, &format!("{prefix}.conv3"), mid, c_out, 1, 1, rng),
            ),
        ];
        BottleneckBlock {
            in_channels: c_in,
            out_channels: c_out,
            stride,
            stages,
        }
    }

    pub fn conv_weights(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.stages.iter().map(|(_, c)| c.weight)
    }

    /// `F(y)` alone.
    pub fn transform<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        y: Var<'t>,
        mode: Mode,
        updates: &mut BnUpdates,
    ) -> Result<Var<'t>> {
        let s = y.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(
                "bottleneck",
                format!("expected [N,{},H,W], got {s:?}", self.in_channels),
            ));
        }
        let mut h = y;
        for (bn, conv) in &self.stages {
            h = bn.forward(tape, store, h, mode, updates)?.relu();
            h = conv.forward(tape, store, h)?;
        }
        Ok(h)
    }
}

/// `y + F(y)`.
pub fn identity_block_forward<'t>(
    block: &BottleneckBlock,
    tape: &'t Tape,
    store: &ParamStore,
    y: Var<'t>,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Result<Var<'t>> {
    if block.in_channels != block.out_channels || block.stride != 1 {
        return Err(Error::shape(
            "identity_block",
            format!(
                "block maps {}→{} channels with stride {}",
                block.in_channels, block.out_channels, block.stride
            ),
        ));
    }
    let f = block.transform(tape, store, y, mode, updates)?;
    y.add(f)
}

/// `concat(F(y), avg_pool2(y))`: transform channels first, pooled identity last.
pub fn ensemble_connect_forward<'t>(
    boundary: &BottleneckBlock,
    tape: &'t Tape,
    store: &ParamStore,
    y: Var<'t>,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Result<Var<'t>> {
    let s = y.shape();
    if s.len() == 4 && (s[2] % 2 != 0 || s[3] % 2 != 0) {
        return Err(Error::shape(
            "ensemble_connect",
            format!("spatial dims {}×{} must be even", s[2], s[3]),
        ));
    }
    let f = boundary.transform(tape, store, y, mode, updates)?;
    let pooled = y.avg_pool2()?;
    concat_channels(&[f, pooled])
}

#[derive(Debug, Clone)]
pub struct EcNet {
    pub config: EcNetConfig,
    pub stem: Conv,
    pub groups: Vec<Vec<BottleneckBlock>>,
    pub boundaries: Vec<BottleneckBlock>,
    pub final_bn: BatchNorm,
}

/// Outputs of one forward pass over a batch.
pub struct EcOutput<'t> {
    /// C(I): `[N, D, H', W']`.
    pub conv: Var<'t>,
    /// F(I) = GAP(C(I)): `[N, D]`.
    pub pooled: Var<'t>,
    /// Empty in eval mode.
    pub bn_updates: BnUpdates,
}

impl EcNet {
    /// Registers all parameters under `image.`.
    pub fn new<R: Rng>(store: &mut ParamStore, config: EcNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = Conv::new(store, "image.stem", 3, config.stem_channels, 3, 1, rng);
        let mut c = config.stem_channels;
        let mut groups = Vec::new();
        let mut boundaries = Vec::new();
        for (gi, g) in config.groups.iter().enumerate() {
            let blocks = (0..g.blocks)
                .map(|bi| {
                    BottleneckBlock::new(store, &format!("image.group{gi}.block{bi}"), c, c, 1, rng)
                })
                .collect();
            groups.push(blocks);
            if let Some(c_new) = g.boundary_channels {
                boundaries.push(BottleneckBlock::new(
                    store,
                    &format!("image.boundary{gi}"),
                    c,
                    c_new,
                    2,
                    rng,
                ));
                c += c_new;
            }
        }
        let final_bn = BatchNorm::new(store, "image.final_bn", c);
        Ok(EcNet {
            config,
            stem,
            groups,
            boundaries,
            final_bn,
        })
    }

    /// Batch forward over `[N, 3, H, W]` images.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        images: Var<'t>,
        mode: Mode,
    ) -> Result<EcOutput<'t>> {
        let s = images.shape();
        let cfg = &self.config;
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.input_h || s[3] != cfg.input_w {
            return Err(Error::shape(
                "ecnet",
                format!("expected [N,3,{},{}], got {s:?}", cfg.input_h, cfg.input_w),
            ));
        }
        let mut updates = BnUpdates::default();
        let mut y = self.stem.forward(tape, store, images)?;
        for (gi, blocks) in self.groups.iter().enumerate() {
            for b in blocks {
                y = identity_block_forward(b, tape, store, y, mode, &mut updates)?;
            }
            if let Some(boundary) = self.boundaries.get(gi) {
                y = ensemble_connect_forward(boundary, tape, store, y, mode, &mut updates)?;
            }
        }
        let conv = self.final_bn.forward(tape, store, y, mode, &mut updates)?.relu();
        let pooled = conv.global_avg_pool()?;
        Ok(EcOutput {
            conv,
            pooled,
            bn_updates: updates,
        })
    }

    /// Single `H×W×3` image (values in channel-last order) in, `(C(I), F(I))` out.
    pub fn forward_image(&self, store: &ParamStore, image_hwc: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        if image_hwc.shape() != [cfg.input_h, cfg.input_w, 3] {
            return Err(Error::shape(
                "ecnet",
                format!(
                    "expected {}×{}×3 image, got {:?}",
                    cfg.input_h,
                    cfg.input_w,
                    image_hwc.shape()
                ),
            ));
        }
        let tape = Tape::new();
        let x = tape.input(hwc_to_nchw(&[image_hwc.clone()])?);
        let out = self.forward(&tape, store, x, mode)?;
        let conv = out.conv.value().index0(0);
        let pooled = out.pooled.value().index0(0);
        Ok((conv, pooled))
    }

    pub fn conv_weight_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem.weight];
        for b in self.groups.iter().flatten().chain(&self.boundaries) {
            ids.extend(b.conv_weights());
        }
        ids
    }
}

/// Stacks `H×W×3` images into an `[N,3,H,W]` batch.
pub fn hwc_to_nchw(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("hwc_to_nchw", "empty batch"))?;
    let s = first.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("hwc_to_nchw", format!("expected H×W×C, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut data = vec![0.0; images.len() * c * h * w];
    for (n, img) in images.iter().enumerate() {
        if img.shape() != s.as_slice() {
            return Err(Error::shape("hwc_to_nchw", format!("{:?} vs {s:?}", img.shape())));
        }
        let src = img.data();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[((n * c + ch) * h + y) * w + x] = src[(y * w + x) * c + ch];
                }
            }
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// `Σ_m ⟨w_m^c, GAP(slice_m)⟩` for one image, with one weight block per slice.
///
/// `slices[m]` is `[D_m, H, W]` and `weights[m]` is `[D_m, classes]`. This evaluates the
/// per-branch classifier directly, without building the concatenated map.
pub fn decoupled_classifier_reference(slices: &[Tensor], weights: &[Tensor]) -> Result<Vec<f64>> {
    if slices.is_empty() || slices.len() != weights.len() {
        return Err(Error::shape(
            "decoupled_classifier",
            format!("{} slices vs {} weight blocks", slices.len(), weights.len()),
        ));
    }
    let classes = weights[0].shape().get(1).copied().unwrap_or(0);
    let mut logits = vec![0.0; classes];
    for (m, (slice, w)) in slices.iter().zip(weights).enumerate() {
        if slice.rank() != 3 || w.rank() != 2 || w.shape()[0] != slice.shape()[0] || w.shape()[1] != classes {
            return Err(Error::shape(
                "decoupled_classifier",
                format!("slice {m}: map {:?} vs weights {:?}", slice.shape(), w.shape()),
            ));
        }
        let plane = slice.shape()[1] * slice.shape()[2];
        for (k, chan) in slice.data().chunks(plane).enumerate() {
            let mean = chan.iter().sum::<f64>() / plane as f64;
            for (c, l) in logits.iter_mut().enumerate() {
                *l += w.data()[k * classes + c] * mean;
            }
        }
    }
    Ok(logits)
}

/// Cuts a `[D, classes]` weight matrix into row blocks along `ranges`, which must tile
/// `0..D` contiguously, each channel exactly once.
pub fn split_weights(weights: &Tensor, ranges: &[Range<usize>]) -> Result<Vec<Tensor>> {
    let d = weights.shape()[0];
    let classes = weights.shape()[1];
    let mut next = 0;
    for r in ranges {
        if r.start != next || r.end <= r.start {
            return Err(Error::shape(
                "decoupled_classifier",
                format!("partition {ranges:?} does not tile 0..{d}"),
            ));
        }
        next = r.end;
    }
    if next != d {
        return Err(Error::shape(
            "decoupled_classifier",
            format!("partition {ranges:?} does not tile 0..{d}"),
        ));
    }
    Ok(ranges
        .iter()
        .map(|r| {
            Tensor::from_parts(
                vec![r.len(), classes],
                weights.data()[r.start * classes..r.end * classes].to_vec(),
            )
        })
        .collect())
}

/// Channel block `range` of a `[D, H, W]` map.
pub fn channel_slice(map: &Tensor, range: Range<usize>) -> Tensor {
    let plane: usize = map.shape()[1..].iter().product();
    let mut shape = map.shape().to_vec();
    shape[0] = range.len();
    Tensor::from_parts(shape, map.data()[range.start * plane..range.end * plane].to_vec())
}
