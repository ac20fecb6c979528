//! The segmentation network: a compact four-stage convolutional pyramid
//! encoder feeding two parallel decoder streams.
//!
//! The detail stream gates fused features with a spatial mask built from
//! low-level features (channel max -> two k x k convs -> sigmoid). The
//! semantic stream gates low-level features with a spatial-attention mask
//! built from upsampled high-level features, then re-weights channels with
//! an ECA-style channel attention. Each decoder stage emits one
//! full-resolution logit map through a 1x1 head, six signals in total for
//! the full network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Which decoder blocks the network carries. `Baseline` keeps only the
/// plain fuse-convolution decoder; the single-stream variants keep one of
/// the two mask mechanisms. Used by the module ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    DetailOnly,
    SemanticOnly,
    Baseline,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DetailOnly => "detail-only",
            Variant::SemanticOnly => "semantic-only",
            Variant::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "detail-only" | "detail" => Ok(Variant::DetailOnly),
            "semantic-only" | "semantic" => Ok(Variant::SemanticOnly),
            "baseline" => Ok(Variant::Baseline),
            other => Err(format!("unknown variant '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub input_size: usize,
    /// Mask-conv kernel sizes for the three detail blocks, shallowest first.
    pub dem_kernel_sizes: [usize; 3],
    pub ca_kernel: usize,
    /// Swap the mask sources: detail masks from high-level features,
    /// semantic masks from low-level features.
    pub mask_source_swap: bool,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            stage_channels: [16, 32, 64, 128],
            input_size: 64,
            dem_kernel_sizes: [7, 5, 3],
            ca_kernel: 3,
            mask_source_swap: false,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.input_size % 32 != 0 || self.input_size == 0 {
            return Err(TensorError::InvalidArgument {
                op: "ModelConfig",
                msg: format!("input_size {} must be a positive multiple of 32", self.input_size),
            });
        }
        if !self.stage_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(TensorError::InvalidArgument {
                op: "ModelConfig",
                msg: format!("stage_channels {:?} must be strictly increasing", self.stage_channels),
            });
        }
        for &k in self.dem_kernel_sizes.iter().chain([&self.ca_kernel]) {
            if k % 2 == 0 {
                return Err(TensorError::InvalidArgument {
                    op: "ModelConfig",
                    msg: format!("kernel size {k} must be odd"),
                });
            }
        }
        Ok(())
    }
}

/// Flat, ordered parameter storage. The ordering is fixed at construction
/// and is the serialization order of checkpoints.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Push every parameter onto a fresh tape, in order. The returned ids
    /// are what the forward pass wires against.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<TensorId> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct StageParams {
    down: Conv,
    refine: Conv,
}

#[derive(Debug, Clone, Copy)]
struct DemParams {
    mask1: Conv,
    mask2: Conv,
    fuse1: Conv,
    fuse3: Conv,
}

#[derive(Debug, Clone, Copy)]
struct SemParams {
    proj: Conv,
    sa: Conv,
    ca: usize,
}

#[derive(Debug, Clone, Copy)]
struct BaseParams {
    fuse1: Conv,
    fuse3: Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Detail,
    Semantic,
    Plain,
}

impl Stream {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stream::Detail => "detail",
            Stream::Semantic => "semantic",
            Stream::Plain => "plain",
        }
    }
}

/// Which decoder stage and stream produced a supervisory signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub stream: Stream,
    pub stage: usize,
}

/// The full-resolution supervisory logit maps of one forward pass,
/// with provenance tags. The full network produces exactly six.
pub struct SignalSet {
    pub logits: Vec<TensorId>,
    pub provenance: Vec<Provenance>,
}

pub struct FeaturePyramid {
    pub f: [TensorId; 4],
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    stem: Conv,
    stages: [StageParams; 4],
    dems: Vec<DemParams>,
    sems: Vec<SemParams>,
    bases: Vec<BaseParams>,
    heads: Vec<(Conv, Provenance)>,
}

fn init_conv(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) -> Conv {
    let fan_in = cin * k * k;
    let s = (1.0 / fan_in as f64).sqrt();
    let n = cout * cin * k * k;
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 * s - s).collect();
    let w = ps.add(format!("{name}.w"), Tensor::from_vec(&[cout, cin, k, k], data).unwrap());
    let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
    Conv { w, b }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model, TensorError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamSet::new();
        let [c1, c2, c3, c4] = cfg.stage_channels;
        let chans = [c1, c2, c3, c4];

        let stem = init_conv(&mut ps, &mut rng, "enc.stem", c1, cfg.in_channels, 3);
        let mut stages = Vec::with_capacity(4);
        for (i, &c) in chans.iter().enumerate() {
            let cin = if i == 0 { c1 } else { chans[i - 1] };
            stages.push(StageParams {
                down: init_conv(&mut ps, &mut rng, &format!("enc.stage{}.down", i + 1), c, cin, 3),
                refine: init_conv(&mut ps, &mut rng, &format!("enc.stage{}.refine", i + 1), c, c, 3),
            });
        }
        let stages: [StageParams; 4] = stages.try_into().unwrap();

        // decoder stage s (1-based, shallowest first) fuses f_l = f_s with
        // the previous decoder output (or f4 at the deepest stage)
        let fl_ch = |s: usize| chans[s - 1];
        let fh_ch = |s: usize| if s == 3 { c4 } else { chans[s] };

        let (want_detail, want_semantic, want_base) = match cfg.variant {
            Variant::Full => (true, true, false),
            Variant::DetailOnly => (true, false, false),
            Variant::SemanticOnly => (false, true, false),
            Variant::Baseline => (false, false, true),
        };

        let mut dems = Vec::new();
        if want_detail {
            for s in 1..=3 {
                let k = cfg.dem_kernel_sizes[s - 1];
                let name = format!("dem{s}");
                dems.push(DemParams {
                    mask1: init_conv(&mut ps, &mut rng, &format!("{name}.mask1"), 1, 1, k),
                    mask2: init_conv(&mut ps, &mut rng, &format!("{name}.mask2"), 1, 1, k),
                    fuse1: init_conv(&mut ps, &mut rng, &format!("{name}.fuse1"), fl_ch(s), fl_ch(s) + fh_ch(s), 1),
                    fuse3: init_conv(&mut ps, &mut rng, &format!("{name}.fuse3"), fl_ch(s), fl_ch(s), 3),
                });
            }
        }
        let mut sems = Vec::new();
        if want_semantic {
            for s in 1..=3 {
                let name = format!("sem{s}");
                let fan = cfg.ca_kernel;
                let sc = (1.0 / fan as f64).sqrt();
                let ca_data: Vec<f64> = (0..cfg.ca_kernel).map(|_| rng.gen::<f64>() * 2.0 * sc - sc).collect();
                sems.push(SemParams {
                    proj: init_conv(&mut ps, &mut rng, &format!("{name}.proj"), fl_ch(s), fh_ch(s), 1),
                    sa: init_conv(&mut ps, &mut rng, &format!("{name}.sa"), 1, 2, 7),
                    ca: ps.add(format!("{name}.ca"), Tensor::from_vec(&[cfg.ca_kernel], ca_data).unwrap()),
                });
            }
        }
        let mut bases = Vec::new();
        if want_base {
            for s in 1..=3 {
                let name = format!("base{s}");
                bases.push(BaseParams {
                    fuse1: init_conv(&mut ps, &mut rng, &format!("{name}.fuse1"), fl_ch(s), fl_ch(s) + fh_ch(s), 1),
                    fuse3: init_conv(&mut ps, &mut rng, &format!("{name}.fuse3"), fl_ch(s), fl_ch(s), 3),
                });
            }
        }

        let mut heads = Vec::new();
        let mut add_heads = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, stream: Stream, tag: &str| {
            for s in 1..=3 {
                heads.push((
                    init_conv(ps, rng, &format!("head.{tag}{s}"), 1, fl_ch(s), 1),
                    Provenance { stream, stage: s },
                ));
            }
        };
        match cfg.variant {
            Variant::Full => {
                add_heads(&mut ps, &mut rng, Stream::Detail, "detail");
                add_heads(&mut ps, &mut rng, Stream::Semantic, "semantic");
            }
            Variant::DetailOnly => add_heads(&mut ps, &mut rng, Stream::Detail, "detail"),
            Variant::SemanticOnly => add_heads(&mut ps, &mut rng, Stream::Semantic, "semantic"),
            Variant::Baseline => add_heads(&mut ps, &mut rng, Stream::Plain, "plain"),
        }

        Ok(Model { cfg, params: ps, stem, stages, dems, sems, bases, heads })
    }

    pub fn num_signals(&self) -> usize {
        self.heads.len()
    }

    fn conv(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        c: Conv,
        x: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, TensorError> {
        tape.conv2d(x, pids[c.w], pids[c.b], stride, padding)
    }

    /// Four-stage pyramid encoder; strides 4/8/16/32.
    pub fn encoder_forward(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        image: TensorId,
    ) -> Result<FeaturePyramid, TensorError> {
        let (_, cin, h, w) = tape.value(image).dims4()?;
        if cin != self.cfg.in_channels || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(TensorError::InvalidArgument {
                op: "encoder_forward",
                msg: format!(
                    "expected [N,{},{},{}] input, got {:?}",
                    self.cfg.in_channels,
                    self.cfg.input_size,
                    self.cfg.input_size,
                    tape.value(image).shape()
                ),
            });
        }
        let mut x = self.conv(tape, pids, self.stem, image, 2, 1)?;
        x = tape.relu(x);
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            x = self.conv(tape, pids, stage.down, x, 2, 1)?;
            x = tape.relu(x);
            x = self.conv(tape, pids, stage.refine, x, 1, 1)?;
            x = tape.relu(x);
            feats.push(x);
        }
        Ok(FeaturePyramid { f: [feats[0], feats[1], feats[2], feats[3]] })
    }

    /// sigmoid(Conv_k(Conv_k(channel_max(x)))), both convs 1 -> 1 channel.
    pub fn detail_mask(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        stage: usize,
        mask_src: TensorId,
    ) -> Result<TensorId, TensorError> {
        let dem = &self.dems[stage - 1];
        let k = self.cfg.dem_kernel_sizes[stage - 1];
        let pad = (k - 1) / 2;
        let m = tape.channel_max(mask_src)?;
        let m = self.conv(tape, pids, dem.mask1, m, 1, pad)?;
        let m = self.conv(tape, pids, dem.mask2, m, 1, pad)?;
        Ok(tape.sigmoid(m))
    }

    /// Conv_3(ReLU(Conv_1(concat(up2(f_h), f_l)))).
    fn fuse_with(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        c1: Conv,
        c3: Conv,
        f_l: TensorId,
        f_h: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (_, _, h, w) = tape.value(f_l).dims4()?;
        let up = tape.upsample_bilinear(f_h, h, w)?;
        let cat = tape.concat_channels(up, f_l)?;
        let x = self.conv(tape, pids, c1, cat, 1, 0)?;
        let x = tape.relu(x);
        self.conv(tape, pids, c3, x, 1, 1)
    }

    /// Detail block: S_d = M_d * f_Fusion + f_l.
    pub fn dem_forward(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        stage: usize,
        f_l: TensorId,
        f_h: TensorId,
    ) -> Result<TensorId, TensorError> {
        let dem = self.dems[stage - 1];
        let mask_src = if self.cfg.mask_source_swap {
            let (_, _, h, w) = tape.value(f_l).dims4()?;
            tape.upsample_bilinear(f_h, h, w)?
        } else {
            f_l
        };
        let m = self.detail_mask(tape, pids, stage, mask_src)?;
        let fusion = self.fuse_with(tape, pids, dem.fuse1, dem.fuse3, f_l, f_h)?;
        let gated = tape.mul(fusion, m)?;
        tape.add(gated, f_l)
    }

    /// CBAM-style spatial attention: sigmoid(Conv_7([max_c(x); mean_c(x)])).
    pub fn spatial_attention(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        stage: usize,
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        let sem = self.sems[stage - 1];
        let mx = tape.channel_max(x)?;
        let mn = tape.channel_mean(x)?;
        let cat = tape.concat_channels(mx, mn)?;
        let a = self.conv(tape, pids, sem.sa, cat, 1, 3)?;
        Ok(tape.sigmoid(a))
    }

    /// ECA-style channel attention: x * sigmoid(conv1d(GAP(x))).
    pub fn channel_attention(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        stage: usize,
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        let sem = self.sems[stage - 1];
        let g = tape.global_avg_pool(x)?;
        let g = tape.conv1d_channels(g, pids[sem.ca])?;
        let scale = tape.sigmoid(g);
        // broadcast over H,W: expand the [N,C,1,1] scale spatially
        let (_, _, h, w) = tape.value(x).dims4()?;
        let scale = tape.upsample_bilinear(scale, h, w)?;
        tape.mul(x, scale)
    }

    /// Semantic block: S_s = CA(M_s * f_l) + g, g = Conv_1(up2(f_h)).
    pub fn sem_forward(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        stage: usize,
        f_l: TensorId,
        f_h: TensorId,
    ) -> Result<TensorId, TensorError> {
        let sem = self.sems[stage - 1];
        let (_, _, h, w) = tape.value(f_l).dims4()?;
        let up = tape.upsample_bilinear(f_h, h, w)?;
        let g = self.conv(tape, pids, sem.proj, up, 1, 0)?;
        let mask_src = if self.cfg.mask_source_swap { f_l } else { g };
        let m = self.spatial_attention(tape, pids, stage, mask_src)?;
        let gated = tape.mul(f_l, m)?;
        let att = self.channel_attention(tape, pids, stage, gated)?;
        tape.add(att, g)
    }

    /// Plain decoder stage for the baseline variant: fusion only, no masks.
    pub fn base_forward(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        stage: usize,
        f_l: TensorId,
        f_h: TensorId,
    ) -> Result<TensorId, TensorError> {
        let b = self.bases[stage - 1];
        self.fuse_with(tape, pids, b.fuse1, b.fuse3, f_l, f_h)
    }

    /// 1x1 conv to one channel, then bilinear upsampling to input size.
    pub fn signal_head(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        head: Conv,
        feature: TensorId,
    ) -> Result<TensorId, TensorError> {
        let z = self.conv(tape, pids, head, feature, 1, 0)?;
        tape.upsample_bilinear(z, self.cfg.input_size, self.cfg.input_size)
    }

    /// Full forward pass: encoder, both decoder streams chained from the
    /// deepest stage up, one head per decoder output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        image: TensorId,
    ) -> Result<SignalSet, TensorError> {
        let pyr = self.encoder_forward(tape, pids, image)?;
        let [f1, f2, f3, f4] = pyr.f;

        let mut outputs: Vec<(Stream, usize, TensorId)> = Vec::new();
        if !self.dems.is_empty() {
            let d3 = self.dem_forward(tape, pids, 3, f3, f4)?;
            let d2 = self.dem_forward(tape, pids, 2, f2, d3)?;
            let d1 = self.dem_forward(tape, pids, 1, f1, d2)?;
            outputs.extend([(Stream::Detail, 1, d1), (Stream::Detail, 2, d2), (Stream::Detail, 3, d3)]);
        }
        if !self.sems.is_empty() {
            let s3 = self.sem_forward(tape, pids, 3, f3, f4)?;
            let s2 = self.sem_forward(tape, pids, 2, f2, s3)?;
            let s1 = self.sem_forward(tape, pids, 1, f1, s2)?;
            outputs.extend([(Stream::Semantic, 1, s1), (Stream::Semantic, 2, s2), (Stream::Semantic, 3, s3)]);
        }
        if !self.bases.is_empty() {
            let b3 = self.base_forward(tape, pids, 3, f3, f4)?;
            let b2 = self.base_forward(tape, pids, 2, f2, b3)?;
            let b1 = self.base_forward(tape, pids, 1, f1, b2)?;
            outputs.extend([(Stream::Plain, 1, b1), (Stream::Plain, 2, b2), (Stream::Plain, 3, b3)]);
        }

        let mut logits = Vec::with_capacity(self.heads.len());
        let mut provenance = Vec::with_capacity(self.heads.len());
        for (conv, prov) in &self.heads {
            let feat = outputs
                .iter()
                .find(|(st, sg, _)| *st == prov.stream && *sg == prov.stage)
                .map(|(_, _, id)| *id)
                .expect("decoder output for head");
            logits.push(self.signal_head(tape, pids, *conv, feat)?);
            provenance.push(*prov);
        }
        Ok(SignalSet { logits, provenance })
    }
}

/// Inference aggregation: mean over signals of sigmoid(p_i).
pub fn aggregate_signals(tape: &Tape, signals: &SignalSet) -> Result<Tensor, TensorError> {
    let n = signals.logits.len();
    if n == 0 {
        return Err(TensorError::InvalidArgument { op: "aggregate_signals", msg: "no signals".into() });
    }
    let mut out = Tensor::zeros(tape.value(signals.logits[0]).shape());
    for &id in &signals.logits {
        let t = tape.value(id);
        if t.shape() != out.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "aggregate_signals",
                lhs: out.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        for (o, &z) in out.data_mut().iter_mut().zip(t.data().iter()) {
            *o += crate::tensor::sigmoid_scalar(z);
        }
    }
    let inv = 1.0 / n as f64;
    out.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}
