//! The segmentation network.
//!
//! ```text
//! frame ─ enc_lo ─┬─ norm ─────────────── indep ─┐
//!                 └─ enc_hi ─ proj ─ norm ─ common ─ fuse ─ decode ─ logits
//! ```
//!
//! On keyframes both branches run. Non-key frames run `enc_lo` only and take
//! `common` from a cached keyframe. Fusion happens at the independent
//! feature's resolution (1/4 of the input); the common feature (1/16) is
//! upsampled to meet it.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 16;
/// Downsampling factor of the independent (shallow) feature.
pub const INDEP_STRIDE: usize = 4;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    /// Channels of the independent feature.
    pub c_f_indep: usize,
    /// Width of the deep encoder.
    pub c_hi: usize,
    /// Channels of the common feature and of the fused feature.
    pub c_common: usize,
    /// Leading independent-feature channels passed to the fusion module.
    pub indep_half: usize,
    pub use_common: bool,
    pub use_indep: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 4,
            in_channels: 3,
            c_f_indep: 16,
            c_hi: 128,
            c_common: 16,
            indep_half: 8,
            use_common: true,
            use_indep: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("num_classes", self.num_classes),
            ("in_channels", self.in_channels),
            ("c_f_indep", self.c_f_indep),
            ("c_hi", self.c_hi),
            ("c_common", self.c_common),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("num_classes must be below 256".into()));
        }
        if self.indep_half > self.c_f_indep {
            return Err(Error::Config(format!(
                "indep_half ({}) exceeds c_f_indep ({})",
                self.indep_half, self.c_f_indep
            )));
        }
        if !self.use_common && !self.use_indep {
            return Err(Error::Config(
                "at least one of use_common / use_indep must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// A frame's two features, both channel-normalized.
#[derive(Clone, Debug)]
pub struct FeaturePair<T> {
    /// `[c_common, H/16, W/16]`
    pub common: Tensor<T>,
    /// `[c_f_indep, H/4, W/4]`
    pub indep: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct KeyframeOutput<T> {
    pub features: FeaturePair<T>,
    /// `[num_classes, H/4, W/4]`
    pub coarse: Tensor<T>,
    /// `[num_classes, H, W]`
    pub full: Tensor<T>,
}

/// Graph handles produced by [`Model::keyframe_graph`].
#[derive(Clone, Copy, Debug)]
pub struct KeyframeVars {
    pub indep: Var,
    pub common: Var,
    pub fused: Var,
    pub coarse: Var,
    pub full: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Layers {
    lo1: ConvLayer,
    lo2: ConvLayer,
    hi1: ConvLayer,
    hi2: ConvLayer,
    proj: ConvLayer,
    ffm: ConvLayer,
    dec: ConvLayer,
    cls: ConvLayer,
}

/// Number of times each stage has run since the last reset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageCounts {
    pub enc_lo: usize,
    pub enc_hi: usize,
    pub fuse: usize,
    pub decode: usize,
}

#[derive(Debug, Default)]
struct Counters {
    enc_lo: AtomicUsize,
    enc_hi: AtomicUsize,
    fuse: AtomicUsize,
    decode: AtomicUsize,
}

#[derive(Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layers: Layers,
    counters: Counters,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            layers: self.layers,
            counters: Counters::default(),
        }
    }
}

/// `(name, c_out, c_in, kernel, stride)` for every layer, in parameter order.
fn layer_specs(cfg: &ModelConfig) -> [(&'static str, usize, usize, usize, usize); 8] {
    [
        ("enc_lo.conv1", cfg.c_f_indep, cfg.in_channels, 3, 2),
        ("enc_lo.conv2", cfg.c_f_indep, cfg.c_f_indep, 3, 2),
        ("enc_hi.conv1", cfg.c_hi, cfg.c_f_indep, 3, 2),
        ("enc_hi.conv2", cfg.c_hi, cfg.c_hi, 3, 2),
        ("enc_hi.proj", cfg.c_common, cfg.c_hi, 1, 1),
        (
            "ffm.conv",
            cfg.c_common,
            cfg.c_common + cfg.indep_half,
            3,
            1,
        ),
        ("dec.conv", cfg.c_common, cfg.c_common, 3, 1),
        ("dec.cls", cfg.num_classes, cfg.c_common, 1, 1),
    ]
}

/// Expected `(name, shape)` of every parameter, in store order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layer_specs(cfg)
        .iter()
        .flat_map(|&(name, co, ci, k, _)| {
            [
                (format!("{name}.weight"), vec![co, ci, k, k]),
                (format!("{name}.bias"), vec![co]),
            ]
        })
        .collect()
}

fn build_layers(cfg: &ModelConfig) -> Layers {
    let specs = layer_specs(cfg);
    let layer = |i: usize| ConvLayer {
        weight: 2 * i,
        bias: 2 * i + 1,
        stride: specs[i].4,
        pad: specs[i].3 / 2,
    };
    Layers {
        lo1: layer(0),
        lo2: layer(1),
        hi1: layer(2),
        hi2: layer(3),
        proj: layer(4),
        ffm: layer(5),
        dec: layer(6),
        cls: layer(7),
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh model with He-normal weights and zero biases, seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for (name, shape) in parameter_layout(&config) {
            let numel: usize = shape.iter().product();
            let value = if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                // Sampled in f64 and rounded so every precision starts from the same weights.
                let data: Vec<T> = (0..numel)
                    .map(|_| T::lit(normal.sample(&mut rng) as f32 as f64))
                    .collect();
                Tensor::new(shape, data)?
            } else {
                Tensor::zeros(shape)
            };
            params.add(name, value)?;
        }
        Self::from_parts(config, params)
    }

    /// Assembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(params.iter()) {
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {:?} {:?} does not match expected {name:?} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Model {
            layers: build_layers(&config),
            config,
            params,
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers,
            counters: Counters::default(),
        }
    }

    pub fn stage_counts(&self) -> StageCounts {
        StageCounts {
            enc_lo: self.counters.enc_lo.load(Ordering::Relaxed),
            enc_hi: self.counters.enc_hi.load(Ordering::Relaxed),
            fuse: self.counters.fuse.load(Ordering::Relaxed),
            decode: self.counters.decode.load(Ordering::Relaxed),
        }
    }

    pub fn reset_stage_counts(&self) {
        for c in [
            &self.counters.enc_lo,
            &self.counters.enc_hi,
            &self.counters.fuse,
            &self.counters.decode,
        ] {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, layer: ConvLayer, relu: bool) -> Result<Var> {
        let w = tape.param(&self.params, layer.weight);
        let b = tape.param(&self.params, layer.bias);
        let y = tape.conv2d(x, w, Some(b), layer.stride, layer.pad)?;
        if relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Shallow encoder: `[3,H,W]` pixels in `[0,255]` to `[c_f_indep,H/4,W/4]`.
    pub fn enc_lo_graph(&self, tape: &mut Tape<T>, frame: Var) -> Result<Var> {
        let (c, h, w) = tape.value(frame).dims3()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "frame has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "frame size {h}x{w} is not a multiple of {INPUT_MULTIPLE}; pad it first \
                 (see model::pad_to_multiple)"
            )));
        }
        self.counters.enc_lo.fetch_add(1, Ordering::Relaxed);
        let x = tape.scale(frame, T::lit(1.0 / 255.0))?;
        let x = self.conv(tape, x, self.layers.lo1, true)?;
        self.conv(tape, x, self.layers.lo2, true)
    }

    /// Deep encoder plus projection and normalization: raw `enc_lo` output to
    /// the common feature `[c_common,H/16,W/16]`.
    pub fn extract_common_graph(&self, tape: &mut Tape<T>, raw_indep: Var) -> Result<Var> {
        self.counters.enc_hi.fetch_add(1, Ordering::Relaxed);
        let x = self.conv(tape, raw_indep, self.layers.hi1, true)?;
        let x = self.conv(tape, x, self.layers.hi2, true)?;
        let x = self.conv(tape, x, self.layers.proj, false)?;
        tape.channel_norm(x, T::lit(NORM_EPS))
    }

    pub fn normalize_graph(&self, tape: &mut Tape<T>, raw_indep: Var) -> Result<Var> {
        tape.channel_norm(raw_indep, T::lit(NORM_EPS))
    }

    /// Feature fusion: upsample `common` to the independent feature's grid,
    /// concatenate the first `indep_half` channels of `indep`, then one
    /// 3x3 conv + ReLU. Disabled branches contribute zeros.
    pub fn fuse_graph(&self, tape: &mut Tape<T>, common: Var, indep: Var) -> Result<Var> {
        let (_, h4, w4) = tape.value(indep).dims3()?;
        let (cc, _, _) = tape.value(common).dims3()?;
        if cc != self.config.c_common {
            return Err(Error::Shape(format!(
                "common feature has {cc} channels, expected {}",
                self.config.c_common
            )));
        }
        self.counters.fuse.fetch_add(1, Ordering::Relaxed);
        let common_up = if self.config.use_common {
            tape.bilinear_resize(common, h4, w4)?
        } else {
            tape.constant(Tensor::zeros([cc, h4, w4]))
        };
        let half = self.config.indep_half;
        let indep_part = if self.config.use_indep {
            tape.slice_channels(indep, 0, half)?
        } else {
            tape.constant(Tensor::zeros([half, h4, w4]))
        };
        let x = tape.concat_channels(common_up, indep_part)?;
        self.conv(tape, x, self.layers.ffm, true)
    }

    /// Decoder: fused feature to `(coarse, full)` logits, the latter resized
    /// by [`INDEP_STRIDE`] to input resolution.
    pub fn decode_graph(&self, tape: &mut Tape<T>, fused: Var) -> Result<(Var, Var)> {
        let (_, h4, w4) = tape.value(fused).dims3()?;
        self.counters.decode.fetch_add(1, Ordering::Relaxed);
        let x = self.conv(tape, fused, self.layers.dec, true)?;
        let coarse = self.conv(tape, x, self.layers.cls, false)?;
        let full = tape.bilinear_resize(coarse, h4 * INDEP_STRIDE, w4 * INDEP_STRIDE)?;
        Ok((coarse, full))
    }

    /// Full keyframe pipeline sharing one `enc_lo` evaluation between branches.
    pub fn keyframe_graph(&self, tape: &mut Tape<T>, frame: Var) -> Result<KeyframeVars> {
        let raw = self.enc_lo_graph(tape, frame)?;
        let indep = self.normalize_graph(tape, raw)?;
        let common = self.extract_common_graph(tape, raw)?;
        let fused = self.fuse_graph(tape, common, indep)?;
        let (coarse, full) = self.decode_graph(tape, fused)?;
        Ok(KeyframeVars {
            indep,
            common,
            fused,
            coarse,
            full,
        })
    }

    pub fn enc_lo(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(frame.clone());
        let y = self.enc_lo_graph(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Normalized independent feature of a frame.
    pub fn independent_feature(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(frame.clone());
        let raw = self.enc_lo_graph(&mut tape, x)?;
        let y = self.normalize_graph(&mut tape, raw)?;
        Ok(tape.value(y).clone())
    }

    /// Channel normalization of a raw `enc_lo` output.
    pub fn normalize(&self, raw_indep: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(raw_indep.clone());
        let y = self.normalize_graph(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn extract_common(&self, raw_indep: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(raw_indep.clone());
        let y = self.extract_common_graph(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn fuse(&self, common: &Tensor<T>, indep: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let c = tape.constant(common.clone());
        let i = tape.constant(indep.clone());
        let y = self.fuse_graph(&mut tape, c, i)?;
        Ok(tape.value(y).clone())
    }

    pub fn decode(&self, fused: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::inference();
        let f = tape.constant(fused.clone());
        let (c, full) = self.decode_graph(&mut tape, f)?;
        Ok((tape.value(c).clone(), tape.value(full).clone()))
    }

    /// `decode(fuse(common, indep))`: prediction for a frame whose normalized
    /// independent feature is `indep`, using a (possibly cached) common feature.
    pub fn predict_with_common(
        &self,
        common: &Tensor<T>,
        indep: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::inference();
        let c = tape.constant(common.clone());
        let i = tape.constant(indep.clone());
        let fused = self.fuse_graph(&mut tape, c, i)?;
        let (coarse, full) = self.decode_graph(&mut tape, fused)?;
        Ok((tape.value(coarse).clone(), tape.value(full).clone()))
    }

    pub fn keyframe_forward(&self, frame: &Tensor<T>) -> Result<KeyframeOutput<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(frame.clone());
        let v = self.keyframe_graph(&mut tape, x)?;
        Ok(KeyframeOutput {
            features: FeaturePair {
                common: tape.value(v.common).clone(),
                indep: tape.value(v.indep).clone(),
            },
            coarse: tape.value(v.coarse).clone(),
            full: tape.value(v.full).clone(),
        })
    }

    /// Non-key path: shallow encoder only, fused with a keyframe's common feature.
    pub fn nonkey_forward(
        &self,
        frame: &Tensor<T>,
        key_common: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::inference();
        let x = tape.constant(frame.clone());
        let raw = self.enc_lo_graph(&mut tape, x)?;
        let indep = self.normalize_graph(&mut tape, raw)?;
        let c = tape.constant(key_common.clone());
        let fused = self.fuse_graph(&mut tape, c, indep)?;
        let (coarse, full) = self.decode_graph(&mut tape, fused)?;
        Ok((tape.value(coarse).clone(), tape.value(full).clone()))
    }

    /// Floating-point operations of one keyframe forward at `height x width`.
    pub fn keyframe_flops(&self, height: usize, width: usize) -> Result<u64> {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros([self.config.in_channels, height, width]));
        self.keyframe_graph(&mut tape, x)?;
        Ok(tape.flops())
    }

    /// Floating-point operations of one non-key forward at `height x width`.
    pub fn nonkey_flops(&self, height: usize, width: usize) -> Result<u64> {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros([self.config.in_channels, height, width]));
        let raw = self.enc_lo_graph(&mut tape, x)?;
        let indep = self.normalize_graph(&mut tape, raw)?;
        let common = tape.constant(Tensor::zeros([
            self.config.c_common,
            height / INPUT_MULTIPLE,
            width / INPUT_MULTIPLE,
        ]));
        let fused = self.fuse_graph(&mut tape, common, indep)?;
        self.decode_graph(&mut tape, fused)?;
        Ok(tape.flops())
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the bottom and right edges of a `[C,H,W]` tensor up to the
/// next multiple of `multiple`.
pub fn pad_to_multiple<T: Scalar>(frame: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let (c, h, w) = frame.dims3()?;
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return Ok(frame.clone());
    }
    let src = frame.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect_index(y, h);
            for x in 0..pw {
                out.push(src[(ch * h + sy) * w + reflect_index(x, w)]);
            }
        }
    }
    Tensor::new([c, ph, pw], out)
}

/// Top-left `height x width` window of a `[C,H,W]` tensor.
pub fn crop<T: Scalar>(t: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (c, h, w) = t.dims3()?;
    if height > h || width > w {
        return Err(Error::Shape(format!(
            "cannot crop {h}x{w} to {height}x{width}"
        )));
    }
    if (height, width) == (h, w) {
        return Ok(t.clone());
    }
    let src = t.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&src[row..row + width]);
        }
    }
    Tensor::new([c, height, width], out)
}
