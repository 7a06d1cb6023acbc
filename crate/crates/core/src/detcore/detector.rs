use ndarray::{Array1, Array4, ArrayView4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FeaturePyramid, ImageBatch, NormMode, ParamSet, Phase};
use crate::nn::conv::{conv_backward, conv_forward, ConvCache, ConvGeom};
use crate::nn::norm::{self, BatchStats, BnCache, RunningStats};
use crate::nn::ops::{relu, relu_backward, upsample2, upsample2_backward};
use crate::nn::Act;
use crate::{Error, Real, Result};

/// Stride of each backbone stage relative to its input.
const STAGE_STRIDES: [usize; 4] = [2, 2, 1, 2];
/// Backbone stages feeding the pyramid, finest first (strides 4 and 8).
const PYRAMID_STAGES: [usize; 2] = [2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output channels of the four backbone stages.
    pub stage_channels: Vec<usize>,
    pub fpn_channels: usize,
    /// Keep a second (auxiliary) set of normalization parameters and statistics.
    pub dual_norm: bool,
    pub focal_gamma: f64,
    /// Initial foreground probability encoded in the classification bias.
    pub prior_prob: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            in_channels: 3,
            num_classes: 6,
            stage_channels: vec![16, 32, 32, 64],
            fpn_channels: 32,
            dual_norm: false,
            focal_gamma: 2.0,
            prior_prob: 0.01,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != STAGE_STRIDES.len() {
            return Err(Error::Config(format!(
                "expected {} backbone stages, got {}",
                STAGE_STRIDES.len(),
                self.stage_channels.len()
            )));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.fpn_channels == 0 {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::Config("prior_prob must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Pyramid strides, finest first.
    pub fn strides(&self) -> Vec<usize> {
        PYRAMID_STAGES
            .iter()
            .map(|&s| STAGE_STRIDES[..=s].iter().product())
            .collect()
    }

    pub fn coarsest_stride(&self) -> usize {
        *self.strides().last().expect("at least one level")
    }

    /// Hash of the architecture; the normalization multiplicity is excluded so
    /// single- and dual-norm detectors of the same shape share it.
    pub fn architecture_hash(&self) -> String {
        let canonical = DetectorConfig {
            dual_norm: false,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn stage_geom(&self, i: usize) -> ConvGeom {
        let cin = if i == 0 { self.in_channels } else { self.stage_channels[i - 1] };
        ConvGeom::new(cin, self.stage_channels[i], 3, STAGE_STRIDES[i], 1)
    }

    fn lateral_geom(&self, l: usize) -> ConvGeom {
        ConvGeom::new(self.stage_channels[PYRAMID_STAGES[l]], self.fpn_channels, 1, 1, 0)
    }

    fn head_geom(&self) -> ConvGeom {
        ConvGeom::new(self.fpn_channels, self.fpn_channels, 3, 1, 1)
    }

    fn cls_geom(&self) -> ConvGeom {
        ConvGeom::new(self.fpn_channels, self.num_classes, 1, 1, 0)
    }

    fn reg_geom(&self) -> ConvGeom {
        ConvGeom::new(self.fpn_channels, 4, 1, 1, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct NormIds {
    main: (usize, usize),
    aux: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stage_conv: Vec<usize>,
    stage_norm: Vec<NormIds>,
    lateral: Vec<(usize, usize)>,
    head_conv: (usize, usize),
    head_cls: (usize, usize),
    head_reg: (usize, usize),
}

/// Raw head outputs of one pyramid level, channel-major `[C, N*h*w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelHead<F> {
    /// Classification logits, one row per class.
    pub cls: Act<F>,
    /// Box regression pre-activations `(left, top, right, bottom)`.
    pub reg: Act<F>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<F> {
    pub levels: Vec<LevelHead<F>>,
    pub image_hw: (usize, usize),
}

impl<F: Real> HeadOutput<F> {
    pub fn batch_size(&self) -> usize {
        self.levels.first().map_or(0, |l| l.cls.n)
    }

    pub fn has_non_finite(&self) -> bool {
        self.levels
            .iter()
            .any(|l| l.cls.has_non_finite() || l.reg.has_non_finite())
    }
}

/// Gradients with respect to [`HeadOutput`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<F> {
    pub cls: Vec<Act<F>>,
    pub reg: Vec<Act<F>>,
}

impl<F: Real> HeadGrads<F> {
    pub fn zeros_like(head: &HeadOutput<F>) -> Self {
        HeadGrads {
            cls: head.levels.iter().map(|l| Act { data: ndarray::Array2::zeros(l.cls.data.dim()), ..l.cls.clone() }).collect(),
            reg: head.levels.iter().map(|l| Act { data: ndarray::Array2::zeros(l.reg.data.dim()), ..l.reg.clone() }).collect(),
        }
    }

    pub fn scale(&mut self, s: F) {
        for a in self.cls.iter_mut().chain(self.reg.iter_mut()) {
            a.data.mapv_inplace(|v| v * s);
        }
    }
}

struct StageTape<F> {
    conv: ConvCache<F>,
    norm: BnCache<F>,
    out: Act<F>,
}

struct HeadTape<F> {
    conv: ConvCache<F>,
    hidden: Act<F>,
    cls: ConvCache<F>,
    reg: ConvCache<F>,
}

/// Everything a backward pass needs from one forward call.
pub struct ForwardPass<F> {
    pub mode: NormMode,
    pub phase: Phase,
    stages: Vec<StageTape<F>>,
    lateral: Vec<ConvCache<F>>,
    features: Vec<Act<F>>,
    heads: Vec<HeadTape<F>>,
    head: HeadOutput<F>,
    batch_stats: Vec<BatchStats<F>>,
    strides: Vec<usize>,
}

impl<F> std::fmt::Debug for ForwardPass<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardPass")
            .field("mode", &self.mode)
            .field("phase", &self.phase)
            .field("strides", &self.strides)
            .finish_non_exhaustive()
    }
}

impl<F: Real> ForwardPass<F> {
    pub fn head(&self) -> &HeadOutput<F> {
        &self.head
    }

    /// Pyramid features as `[N, D, h, w]` arrays.
    pub fn pyramid(&self) -> FeaturePyramid<F> {
        FeaturePyramid {
            levels: self.features.iter().map(|a| a.to_nchw()).collect(),
            strides: self.strides.clone(),
        }
    }

    /// Batch statistics observed in a training-phase pass, one per norm layer.
    pub fn batch_stats(&self) -> &[BatchStats<F>] {
        &self.batch_stats
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Want {
    pub params: bool,
    pub input: bool,
}

impl Want {
    pub const PARAMS: Want = Want { params: true, input: false };
    pub const INPUT: Want = Want { params: false, input: true };
    pub const BOTH: Want = Want { params: true, input: true };
}

#[derive(Debug, Clone)]
pub struct Gradients<F> {
    /// One entry per parameter, empty when parameter gradients were not requested.
    pub params: Vec<Array1<F>>,
    pub input: Option<Array4<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector<F> {
    cfg: DetectorConfig,
    params: ParamSet<F>,
    main_stats: Vec<RunningStats<F>>,
    aux_stats: Option<Vec<RunningStats<F>>>,
    layout: Layout,
}

fn build_layout<F: Real>(cfg: &DetectorConfig, params: &mut ParamSet<F>, rng: &mut ChaCha8Rng) -> Layout {
    let mut normal = |n: usize, std: f64| -> Array1<F> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Array1::from_iter((0..n).map(|_| F::lit(dist.sample(rng))))
    };
    let mut stage_conv = Vec::new();
    let mut stage_norm = Vec::new();
    for i in 0..STAGE_STRIDES.len() {
        let g = cfg.stage_geom(i);
        let fan_in = g.patch_len();
        let w = normal(g.cout * fan_in, (2.0 / fan_in as f64).sqrt());
        stage_conv.push(params.push(
            format!("backbone.stage{i}.conv.weight"),
            vec![g.cout, g.cin, 3, 3],
            w,
        ));
        let mut norm_pair = |key: &str| {
            let gamma = params.push(
                format!("backbone.stage{i}.norm.{key}.weight"),
                vec![g.cout],
                Array1::ones(g.cout),
            );
            let beta = params.push(
                format!("backbone.stage{i}.norm.{key}.bias"),
                vec![g.cout],
                Array1::zeros(g.cout),
            );
            (gamma, beta)
        };
        let main = norm_pair("main");
        let aux = cfg.dual_norm.then(|| norm_pair("aux"));
        stage_norm.push(NormIds { main, aux });
    }
    let mut lateral = Vec::new();
    for l in 0..PYRAMID_STAGES.len() {
        let g = cfg.lateral_geom(l);
        let w = normal(g.cout * g.cin, (1.0 / g.cin as f64).sqrt());
        let wid = params.push(format!("neck.lateral{l}.weight"), vec![g.cout, g.cin, 1, 1], w);
        let bid = params.push(format!("neck.lateral{l}.bias"), vec![g.cout], Array1::zeros(g.cout));
        lateral.push((wid, bid));
    }
    let g = cfg.head_geom();
    let w = normal(g.cout * g.patch_len(), (2.0 / g.patch_len() as f64).sqrt());
    let head_conv = (
        params.push("head.conv.weight", vec![g.cout, g.cin, 3, 3], w),
        params.push("head.conv.bias", vec![g.cout], Array1::zeros(g.cout)),
    );
    let g = cfg.cls_geom();
    let prior = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
    let w = normal(g.cout * g.cin, 0.01);
    let head_cls = (
        params.push("head.cls.weight", vec![g.cout, g.cin, 1, 1], w),
        params.push("head.cls.bias", vec![g.cout], Array1::from_elem(g.cout, F::lit(prior))),
    );
    let g = cfg.reg_geom();
    let w = normal(g.cout * g.cin, 0.01);
    let head_reg = (
        params.push("head.reg.weight", vec![g.cout, g.cin, 1, 1], w),
        params.push("head.reg.bias", vec![g.cout], Array1::zeros(g.cout)),
    );
    Layout {
        stage_conv,
        stage_norm,
        lateral,
        head_conv,
        head_cls,
        head_reg,
    }
}

fn accumulate<F: Real>(grads: &mut Option<Vec<Array1<F>>>, id: usize, g: impl AsRef<[F]>) {
    if let Some(grads) = grads.as_mut() {
        let dst = grads[id].as_slice_mut().expect("contiguous gradient");
        for (d, s) in dst.iter_mut().zip(g.as_ref()) {
            *d += *s;
        }
    }
}

fn source_names<F: Real>(det: &Detector<F>) -> Vec<(usize, String)> {
    det.params.names().iter().cloned().enumerate().collect()
}

fn slice_of<F: Real>(a: &ndarray::Array2<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}

impl<F: Real> Detector<F> {
    /// Fresh detector with weights drawn from `seed`.
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layout = build_layout(&cfg, &mut params, &mut rng);
        let main_stats = cfg.stage_channels.iter().map(|&c| RunningStats::new(c)).collect::<Vec<_>>();
        let aux_stats = cfg.dual_norm.then(|| main_stats.clone());
        Ok(Detector {
            cfg,
            params,
            main_stats,
            aux_stats,
            layout,
        })
    }

    /// Copy of `source` with the requested normalization multiplicity.
    /// Auxiliary state, when added, starts as a copy of the main state.
    pub fn initialized_from(source: &Detector<F>, dual_norm: bool) -> Result<Self> {
        let cfg = DetectorConfig {
            dual_norm,
            ..source.cfg.clone()
        };
        let mut det = Detector::new(cfg, 0)?;
        for (id, name) in source_names(&det) {
            let src = source
                .params
                .index_of(&name)
                .or_else(|| source.params.index_of(&name.replace(".norm.aux.", ".norm.main.")))
                .ok_or_else(|| Error::Config(format!("source lacks parameter {name}")))?;
            *det.params.value_mut(id) = source.params.value(src).clone();
        }
        det.main_stats = source.main_stats.clone();
        det.aux_stats = dual_norm.then(|| source.aux_stats.clone().unwrap_or_else(|| source.main_stats.clone()));
        Ok(det)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn strides(&self) -> Vec<usize> {
        self.cfg.strides()
    }

    pub fn running_stats(&self, mode: NormMode) -> Option<&[RunningStats<F>]> {
        match mode {
            NormMode::Main => Some(&self.main_stats),
            NormMode::Auxiliary => self.aux_stats.as_deref(),
        }
    }

    pub fn running_stats_mut(&mut self, mode: NormMode) -> Option<&mut Vec<RunningStats<F>>> {
        match mode {
            NormMode::Main => Some(&mut self.main_stats),
            NormMode::Auxiliary => self.aux_stats.as_mut(),
        }
    }

    /// Folds the batch statistics of a training-phase pass into the running
    /// statistics of `mode`; the other mode's state is untouched.
    pub fn absorb_batch_stats(&mut self, mode: NormMode, stats: &[BatchStats<F>]) -> Result<()> {
        let running = self
            .running_stats_mut(mode)
            .ok_or_else(|| Error::Config("auxiliary normalization requested on a single-norm detector".into()))?;
        if stats.len() != running.len() {
            return Err(Error::Argument(format!(
                "{} batch statistics for {} norm layers",
                stats.len(),
                running.len()
            )));
        }
        for (r, s) in running.iter_mut().zip(stats) {
            r.absorb(s);
        }
        Ok(())
    }

    /// Converts every parameter and statistic to another float type.
    pub fn cast<G: Real>(&self) -> Detector<G> {
        let cast_stats = |s: &Vec<RunningStats<F>>| -> Vec<RunningStats<G>> {
            s.iter()
                .map(|r| RunningStats {
                    mean: r.mean.mapv(|v| G::lit(v.as_f64())),
                    var: r.var.mapv(|v| G::lit(v.as_f64())),
                })
                .collect()
        };
        Detector {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            main_stats: cast_stats(&self.main_stats),
            aux_stats: self.aux_stats.as_ref().map(cast_stats),
            layout: self.layout.clone(),
        }
    }

    /// Named buffers (running statistics) as `(name, values)`.
    pub fn buffers(&self) -> Vec<(String, Array1<F>)> {
        let mut out = Vec::new();
        let mut push = |key: &str, stats: &[RunningStats<F>]| {
            for (i, s) in stats.iter().enumerate() {
                out.push((format!("backbone.stage{i}.norm.{key}.running_mean"), s.mean.clone()));
                out.push((format!("backbone.stage{i}.norm.{key}.running_var"), s.var.clone()));
            }
        };
        push("main", &self.main_stats);
        if let Some(aux) = &self.aux_stats {
            push("aux", aux);
        }
        out
    }

    /// Restores a buffer by name; returns false for unknown names.
    pub fn set_buffer(&mut self, name: &str, values: Array1<F>) -> bool {
        let parse = |name: &str| -> Option<(usize, NormMode, bool)> {
            let rest = name.strip_prefix("backbone.stage")?;
            let (idx, rest) = rest.split_once(".norm.")?;
            let (key, field) = rest.split_once('.')?;
            let mode = match key {
                "main" => NormMode::Main,
                "aux" => NormMode::Auxiliary,
                _ => return None,
            };
            let is_mean = match field {
                "running_mean" => true,
                "running_var" => false,
                _ => return None,
            };
            Some((idx.parse().ok()?, mode, is_mean))
        };
        let Some((idx, mode, is_mean)) = parse(name) else {
            return false;
        };
        let Some(stats) = self.running_stats_mut(mode) else {
            return false;
        };
        let Some(s) = stats.get_mut(idx) else {
            return false;
        };
        if values.len() != s.mean.len() {
            return false;
        }
        if is_mean {
            s.mean = values;
        } else {
            s.var = values;
        }
        true
    }

    fn norm_ids(&self, stage: usize, mode: NormMode) -> Result<(usize, usize)> {
        let ids = &self.layout.stage_norm[stage];
        match mode {
            NormMode::Main => Ok(ids.main),
            NormMode::Auxiliary => ids
                .aux
                .ok_or_else(|| Error::Config("auxiliary normalization requested on a single-norm detector".into())),
        }
    }

    fn check_input(&self, dim: (usize, usize, usize, usize), mode: NormMode) -> Result<()> {
        let (n, c, h, w) = dim;
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!("expected {} channels, got {c}", self.cfg.in_channels)));
        }
        let s = self.cfg.coarsest_stride();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by stride {s}")));
        }
        if mode == NormMode::Auxiliary && !self.cfg.dual_norm {
            return Err(Error::Config("auxiliary normalization requested on a single-norm detector".into()));
        }
        Ok(())
    }

    /// Runs the network, recording what backward needs. Never mutates state:
    /// training-phase batch statistics are returned in the pass and only
    /// reach the running statistics through [`Detector::absorb_batch_stats`].
    pub fn forward(&self, x: ArrayView4<F>, mode: NormMode, phase: Phase) -> Result<ForwardPass<F>> {
        self.check_input(x.dim(), mode)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input pixel".into()));
        }
        let input = Act::from_nchw(x);
        let mut stages: Vec<StageTape<F>> = Vec::with_capacity(STAGE_STRIDES.len());
        let mut batch_stats = Vec::new();
        for i in 0..STAGE_STRIDES.len() {
            let geom = self.cfg.stage_geom(i);
            let (y, conv) = {
                let inp = if i == 0 { &input } else { &stages[i - 1].out };
                conv_forward(inp, self.params.matrix(self.layout.stage_conv[i]), None, &geom)
            };
            let (gid, bid) = self.norm_ids(i, mode)?;
            let (gamma, beta) = (self.params.slice(gid), self.params.slice(bid));
            let (z, norm) = match phase {
                Phase::Train => {
                    let (z, cache, stats) = norm::forward_batch(&y, gamma, beta);
                    batch_stats.push(stats);
                    (z, cache)
                }
                Phase::Eval => {
                    let running = &self.running_stats(mode).expect("checked mode")[i];
                    norm::forward_running(&y, gamma, beta, running)
                }
            };
            stages.push(StageTape {
                conv,
                norm,
                out: relu(z),
            });
        }

        let mut lateral = Vec::with_capacity(PYRAMID_STAGES.len());
        let mut features = Vec::with_capacity(PYRAMID_STAGES.len());
        for (l, &s) in PYRAMID_STAGES.iter().enumerate() {
            let (wid, bid) = self.layout.lateral[l];
            let (y, cache) = conv_forward(
                &stages[s].out,
                self.params.matrix(wid),
                Some(self.params.slice(bid)),
                &self.cfg.lateral_geom(l),
            );
            lateral.push(cache);
            features.push(y);
        }
        for l in (0..features.len() - 1).rev() {
            let up = upsample2(&features[l + 1]);
            features[l].add_assign(&up);
        }

        let strides = self.cfg.strides();
        let mut heads = Vec::with_capacity(features.len());
        let mut levels = Vec::with_capacity(features.len());
        for (f, &stride) in features.iter().zip(&strides) {
            let (cw, cb) = self.layout.head_conv;
            let (h, conv) = conv_forward(f, self.params.matrix(cw), Some(self.params.slice(cb)), &self.cfg.head_geom());
            let hidden = relu(h);
            let (clw, clb) = self.layout.head_cls;
            let (cls, cls_cache) =
                conv_forward(&hidden, self.params.matrix(clw), Some(self.params.slice(clb)), &self.cfg.cls_geom());
            let (rw, rb) = self.layout.head_reg;
            let (reg, reg_cache) =
                conv_forward(&hidden, self.params.matrix(rw), Some(self.params.slice(rb)), &self.cfg.reg_geom());
            heads.push(HeadTape {
                conv,
                hidden,
                cls: cls_cache,
                reg: reg_cache,
            });
            levels.push(LevelHead { cls, reg, stride });
        }
        let (_, _, h, w) = x.dim();
        Ok(ForwardPass {
            mode,
            phase,
            stages,
            lateral,
            features,
            heads,
            head: HeadOutput {
                levels,
                image_hw: (h, w),
            },
            batch_stats,
            strides,
        })
    }

    /// Evaluation-phase feature pyramid of a batch.
    pub fn features(&self, images: &ImageBatch<F>, mode: NormMode) -> Result<FeaturePyramid<F>> {
        Ok(self.forward(images.pixels.view(), mode, Phase::Eval)?.pyramid())
    }

    /// Back-propagates head gradients and/or gradients on the pyramid
    /// features through the recorded pass.
    pub fn backward(
        &self,
        pass: &ForwardPass<F>,
        head_grads: Option<&HeadGrads<F>>,
        feature_grads: Option<&[Array4<F>]>,
        want: Want,
    ) -> Result<Gradients<F>> {
        let nl = pass.features.len();
        let mut grads = want.params.then(|| self.params.zeros_like());
        let mut dfeat: Vec<Act<F>> = match feature_grads {
            Some(fg) => {
                if fg.len() != nl {
                    return Err(Error::Shape(format!("{} feature gradients for {nl} levels", fg.len())));
                }
                let mut out = Vec::with_capacity(nl);
                for (g, f) in fg.iter().zip(&pass.features) {
                    let a = Act::from_nchw(g.view());
                    if a.data.dim() != f.data.dim() || a.h != f.h {
                        return Err(Error::Shape("feature gradient shape mismatch".into()));
                    }
                    out.push(a);
                }
                out
            }
            None => pass
                .features
                .iter()
                .map(|f| Act::zeros(f.channels(), f.n, f.h, f.w))
                .collect(),
        };

        if let Some(hg) = head_grads {
            if hg.cls.len() != nl || hg.reg.len() != nl {
                return Err(Error::Shape("head gradient level count mismatch".into()));
            }
            let (cw, cb) = self.layout.head_conv;
            let (clw, clb) = self.layout.head_cls;
            let (rw, rb) = self.layout.head_reg;
            #[allow(clippy::needless_range_loop)]
            for l in 0..nl {
                let tape = &pass.heads[l];
                let gc = conv_backward(&hg.cls[l], &tape.cls, self.params.matrix(clw), &self.cfg.cls_geom(), true, want.params);
                let gr = conv_backward(&hg.reg[l], &tape.reg, self.params.matrix(rw), &self.cfg.reg_geom(), true, want.params);
                if let (Some(dw), Some(db)) = (&gc.dw, &gc.db) {
                    accumulate(&mut grads, clw, slice_of(dw));
                    accumulate(&mut grads, clb, db.as_slice().expect("contiguous"));
                }
                if let (Some(dw), Some(db)) = (&gr.dw, &gr.db) {
                    accumulate(&mut grads, rw, slice_of(dw));
                    accumulate(&mut grads, rb, db.as_slice().expect("contiguous"));
                }
                let mut dh = gc.dx.expect("requested dx");
                dh.add_assign(&gr.dx.expect("requested dx"));
                let dh = relu_backward(dh, &tape.hidden);
                let gh = conv_backward(&dh, &tape.conv, self.params.matrix(cw), &self.cfg.head_geom(), true, want.params);
                if let (Some(dw), Some(db)) = (&gh.dw, &gh.db) {
                    accumulate(&mut grads, cw, slice_of(dw));
                    accumulate(&mut grads, cb, db.as_slice().expect("contiguous"));
                }
                dfeat[l].add_assign(&gh.dx.expect("requested dx"));
            }
        }

        for l in 0..nl - 1 {
            let d = upsample2_backward(&dfeat[l]);
            dfeat[l + 1].add_assign(&d);
        }

        let mut dstage: Vec<Option<Act<F>>> = (0..STAGE_STRIDES.len()).map(|_| None).collect();
        for (l, &s) in PYRAMID_STAGES.iter().enumerate() {
            let (wid, bid) = self.layout.lateral[l];
            let g = conv_backward(&dfeat[l], &pass.lateral[l], self.params.matrix(wid), &self.cfg.lateral_geom(l), true, want.params);
            if let (Some(dw), Some(db)) = (&g.dw, &g.db) {
                accumulate(&mut grads, wid, slice_of(dw));
                accumulate(&mut grads, bid, db.as_slice().expect("contiguous"));
            }
            dstage[s] = g.dx;
        }

        let mut carry: Option<Act<F>> = None;
        for i in (0..STAGE_STRIDES.len()).rev() {
            let d = match (dstage[i].take(), carry.take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => continue,
            };
            let tape = &pass.stages[i];
            let d = relu_backward(d, &tape.out);
            let (gid, bid) = self.norm_ids(i, pass.mode)?;
            let (dx, dgamma, dbeta) = norm::backward(&d, &tape.norm, self.params.slice(gid), true);
            accumulate(&mut grads, gid, &dgamma);
            accumulate(&mut grads, bid, &dbeta);
            let need_dx = i > 0 || want.input;
            let wid = self.layout.stage_conv[i];
            let g = conv_backward(&dx.expect("requested dx"), &tape.conv, self.params.matrix(wid), &self.cfg.stage_geom(i), need_dx, want.params);
            if let Some(dw) = &g.dw {
                accumulate(&mut grads, wid, slice_of(dw));
            }
            carry = g.dx;
        }

        Ok(Gradients {
            params: grads.unwrap_or_default(),
            input: if want.input { carry.map(|a| a.to_nchw()) } else { None },
        })
    }
}
