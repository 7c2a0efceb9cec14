//! Context vectors: raw conditioning inputs, their encoders, and data dropout.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synth::{clamped_window, CoeffSequence};
use crate::error::{Error, Result};
use crate::nn::{Activation, Init, Linear, Mlp};
use crate::numerics::{Bound, ParamSet, Tape, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextConfig {
    /// Number of previous frames in the context.
    pub tau: usize,
    /// The audio window spans `2·audio_radius + 1` frames.
    pub audio_radius: usize,
    pub source_features: usize,
    pub audio_features: usize,
    pub previous_features: usize,
    pub emotion_features: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            tau: 5,
            audio_radius: 2,
            source_features: 16,
            audio_features: 16,
            previous_features: 32,
            emotion_features: 16,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::config("tau must be at least 1"));
        }
        if self.source_features == 0
            || self.audio_features == 0
            || self.previous_features == 0
            || self.emotion_features == 0
        {
            return Err(Error::config("context feature widths must be positive"));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        2 * self.audio_radius + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `[β₀, audio, β^pre, emotion]`.
    Expression,
    /// `[audio, ρ^pre]`; no source frame and no emotion.
    Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Learned,
    /// Raw inputs copied through (emotion as one-hot); used to inspect layouts.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Source,
    Audio,
    Previous,
    Emotion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextLayout {
    pub segments: Vec<(Segment, Range<usize>)>,
}

impl ContextLayout {
    fn from_widths(widths: &[(Segment, usize)]) -> Self {
        let mut at = 0;
        let segments = widths
            .iter()
            .map(|&(s, w)| {
                at += w;
                (s, at - w..at)
            })
            .collect();
        Self { segments }
    }

    pub fn get(&self, seg: Segment) -> Option<Range<usize>> {
        self.segments
            .iter()
            .find(|(s, _)| *s == seg)
            .map(|(_, r)| r.clone())
    }

    pub fn len(&self) -> usize {
        self.segments.last().map(|(_, r)| r.end).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoded context rows with their layout and dropout record.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector<T> {
    pub values: Array2<T>,
    pub layout: ContextLayout,
    /// Rows whose previous-frame segment was zeroed.
    pub dropped: Vec<bool>,
}

impl<T: Scalar> ContextVector<T> {
    pub fn segment(&self, seg: Segment) -> Option<Array2<T>> {
        self.layout
            .get(seg)
            .map(|r| self.values.slice(s![.., r]).to_owned())
    }
}

/// One Bernoulli(p) draw per row.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, p: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::argument(format!(
            "dropout probability {p} outside [0, 1]"
        )));
    }
    Ok((0..rows).map(|_| rng.random::<f64>() < p).collect())
}

/// Zeroes the previous-frame segment of each row with probability `p`.
pub fn apply_data_dropout<T: Scalar, R: Rng + ?Sized>(
    c: &ContextVector<T>,
    p: f64,
    rng: &mut R,
) -> Result<ContextVector<T>> {
    let mask = dropout_mask(c.values.nrows(), p, rng)?;
    let mut out = c.clone();
    if let Some(r) = c.layout.get(Segment::Previous) {
        for (i, &d) in mask.iter().enumerate() {
            if d {
                out.values.slice_mut(s![i, r.clone()]).fill(T::zero());
                out.dropped[i] = true;
            }
        }
    }
    Ok(out)
}

/// Unencoded conditioning inputs, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RawContext<T> {
    /// `β₀` rows (expression only).
    pub source: Option<Array2<T>>,
    pub audio: Array2<T>,
    /// `τ` previous frames, flattened oldest first.
    pub previous: Array2<T>,
    /// Emotion ids (expression only).
    pub classes: Option<Vec<usize>>,
}

impl<T: Scalar> RawContext<T> {
    pub fn rows(&self) -> usize {
        self.audio.nrows()
    }
}

/// Row-by-row builder for [`RawContext`].
#[derive(Debug, Clone)]
pub struct RawBuilder {
    variant: Variant,
    source: Vec<f64>,
    audio: Vec<f64>,
    previous: Vec<f64>,
    classes: Vec<usize>,
    rows: usize,
    widths: (usize, usize, usize),
}

impl RawBuilder {
    pub fn new(variant: Variant, data_dim: usize, cfg: &ContextConfig) -> Self {
        Self {
            variant,
            source: Vec::new(),
            audio: Vec::new(),
            previous: Vec::new(),
            classes: Vec::new(),
            rows: 0,
            widths: (data_dim, cfg.window(), cfg.tau * data_dim),
        }
    }

    /// `source` and `class` are ignored for the pose variant. `previous`
    /// holds exactly `τ` frames, oldest first.
    pub fn push(
        &mut self,
        source: ArrayView1<f64>,
        audio: &[f64],
        previous: &[ArrayView1<f64>],
        class: usize,
    ) {
        assert_eq!(audio.len(), self.widths.1, "audio window width");
        if self.variant == Variant::Expression {
            assert_eq!(source.len(), self.widths.0, "source width");
            self.source.extend(source.iter());
            self.classes.push(class);
        }
        let before = self.previous.len();
        for f in previous {
            self.previous.extend(f.iter());
        }
        assert_eq!(
            self.previous.len() - before,
            self.widths.2,
            "previous-frame width"
        );
        self.audio.extend_from_slice(audio);
        self.rows += 1;
    }

    pub fn finish<T: Scalar>(self) -> RawContext<T> {
        let mat = |v: Vec<f64>, w: usize| {
            Array2::from_shape_vec((self.rows, w), v)
                .unwrap()
                .mapv(T::c)
        };
        let expression = self.variant == Variant::Expression;
        RawContext {
            source: expression.then(|| mat(self.source, self.widths.0)),
            audio: mat(self.audio, self.widths.1),
            previous: mat(self.previous, self.widths.2),
            classes: expression.then_some(self.classes),
        }
    }
}

/// The `τ` frames before `t`, oldest first; positions before the start
/// read `pad` instead.
pub fn previous_frames<'a>(
    frames: &'a Array2<f64>,
    t: usize,
    tau: usize,
    pad: ArrayView1<'a, f64>,
) -> Vec<ArrayView1<'a, f64>> {
    (0..tau)
        .map(|k| {
            let back = tau - k;
            if t >= back {
                frames.row(t - back)
            } else {
                pad
            }
        })
        .collect()
}

/// Maps raw inputs to a context vector. Learned encoders live in a
/// [`ParamSet`] under the given prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoder {
    pub variant: Variant,
    pub kind: EncoderKind,
    pub config: ContextConfig,
    pub data_dim: usize,
    pub classes: usize,
    source: Linear,
    audio: Mlp,
    previous: Linear,
    emotion: String,
}

impl ContextEncoder {
    pub fn new(
        prefix: &str,
        variant: Variant,
        kind: EncoderKind,
        config: ContextConfig,
        data_dim: usize,
        classes: usize,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            variant,
            kind,
            config,
            data_dim,
            classes,
            source: Linear::new(
                &format!("{prefix}.source"),
                data_dim,
                config.source_features,
                true,
            ),
            audio: Mlp::new(
                &format!("{prefix}.audio"),
                &[
                    config.window(),
                    config.audio_features,
                    config.audio_features,
                ],
                Activation::Tanh,
            ),
            previous: Linear::new(
                &format!("{prefix}.previous"),
                config.tau * data_dim,
                config.previous_features,
                true,
            ),
            emotion: format!("{prefix}.emotion"),
        })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        if self.kind == EncoderKind::Identity {
            return;
        }
        self.audio.init(params, rng, Init::Xavier);
        self.previous.init(params, rng, Init::Xavier);
        if self.variant == Variant::Expression {
            self.source.init(params, rng, Init::Xavier);
            params.insert(
                self.emotion.clone(),
                Init::Normal(1.0).sample(self.classes, self.config.emotion_features, rng),
            );
        }
    }

    pub fn layout(&self) -> ContextLayout {
        let c = &self.config;
        let learned = self.kind == EncoderKind::Learned;
        let w = |learned_w: usize, raw_w: usize| if learned { learned_w } else { raw_w };
        let prev = self.previous.out_dim;
        match self.variant {
            Variant::Expression => ContextLayout::from_widths(&[
                (Segment::Source, w(c.source_features, self.data_dim)),
                (Segment::Audio, w(c.audio_features, c.window())),
                (Segment::Previous, w(prev, c.tau * self.data_dim)),
                (Segment::Emotion, w(c.emotion_features, self.classes)),
            ]),
            Variant::Pose => ContextLayout::from_widths(&[
                (Segment::Audio, w(c.audio_features, c.window())),
                (Segment::Previous, w(prev, c.tau * self.data_dim)),
            ]),
        }
    }

    pub fn ctx_dim(&self) -> usize {
        self.layout().len()
    }

    /// Emotion embedding rows for `classes`.
    pub fn embed_emotion<T: Scalar>(&self, b: &Bound<'_, T>, classes: &[usize]) -> Result<Var> {
        crate::flow::check_classes(classes, self.classes)?;
        Ok(match self.kind {
            EncoderKind::Learned => b.tape.gather_rows(b.p(&self.emotion), classes),
            EncoderKind::Identity => b.tape.constant(Array2::from_shape_fn(
                (classes.len(), self.classes),
                |(r, c)| {
                    if classes[r] == c {
                        T::one()
                    } else {
                        T::zero()
                    }
                },
            )),
        })
    }

    pub fn encode_audio<T: Scalar>(&self, b: &Bound<'_, T>, window: Var) -> Var {
        match self.kind {
            EncoderKind::Learned => self.audio.forward(b, window),
            EncoderKind::Identity => window,
        }
    }

    /// Encodes `raw` on the tape. Rows flagged in `dropped` get an all-zero
    /// previous-frame segment.
    pub fn encode<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        raw: &RawContext<T>,
        dropped: &[bool],
    ) -> Result<Var> {
        let g = b.tape;
        let rows = raw.rows();
        if dropped.len() != rows || raw.previous.nrows() != rows {
            return Err(Error::argument("context rows and dropout mask disagree"));
        }
        let learned = self.kind == EncoderKind::Learned;
        let mut prev = g.constant(raw.previous.clone());
        if learned {
            prev = self.previous.forward(b, prev);
        }
        if dropped.iter().any(|&d| d) {
            let keep =
                Array2::from_shape_fn(
                    (rows, 1),
                    |(r, _)| if dropped[r] { T::zero() } else { T::one() },
                );
            prev = g.mul(prev, g.constant(keep));
        }
        let audio = self.encode_audio(b, g.constant(raw.audio.clone()));
        Ok(match self.variant {
            Variant::Expression => {
                let src = raw
                    .source
                    .as_ref()
                    .ok_or_else(|| Error::argument("expression context needs source frames"))?;
                let classes = raw
                    .classes
                    .as_ref()
                    .ok_or_else(|| Error::argument("expression context needs emotion ids"))?;
                let mut source = g.constant(src.clone());
                if learned {
                    source = self.source.forward(b, source);
                }
                let emo = self.embed_emotion(b, classes)?;
                g.concat_cols(&[source, audio, prev, emo])
            }
            Variant::Pose => g.concat_cols(&[audio, prev]),
        })
    }

    /// Array-level encoding on a private tape.
    pub fn encode_values<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        raw: &RawContext<T>,
        dropped: &[bool],
    ) -> Result<ContextVector<T>> {
        let g = Tape::new();
        let b = Bound::new(&g, params);
        let v = self.encode(&b, raw, dropped)?;
        Ok(ContextVector {
            values: g.value(v),
            layout: self.layout(),
            dropped: dropped.to_vec(),
        })
    }

    /// Raw inputs for frame `t` of `seq`, with teacher-forced previous frames.
    pub fn raw_for_frame(&self, seq: &CoeffSequence, t: usize) -> RawBuilder {
        let mut rb = RawBuilder::new(self.variant, self.data_dim, &self.config);
        self.push_frame(&mut rb, seq, t);
        rb
    }

    pub fn push_frame(&self, rb: &mut RawBuilder, seq: &CoeffSequence, t: usize) {
        let window = clamped_window(&seq.audio, t, self.config.audio_radius);
        match self.variant {
            Variant::Expression => {
                let b0 = seq.coeffs.row(0);
                let prev = previous_frames(&seq.coeffs, t, self.config.tau, b0);
                rb.push(b0, &window, &prev, seq.class);
            }
            Variant::Pose => {
                let zero = ndarray::Array1::zeros(self.data_dim);
                let prev: Vec<Vec<f64>> =
                    previous_frames(&seq.pose, t, self.config.tau, zero.view())
                        .iter()
                        .map(|r| r.to_vec())
                        .collect();
                let views: Vec<ArrayView1<f64>> = prev
                    .iter()
                    .map(|v| ArrayView1::from(v.as_slice()))
                    .collect();
                rb.push(zero.view(), &window, &views, 0);
            }
        }
    }

    /// Context for frame `t` of `seq`.
    pub fn assemble<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        seq: &CoeffSequence,
        t: usize,
    ) -> Result<ContextVector<T>> {
        if t >= seq.len() {
            return Err(Error::argument(format!(
                "frame {t} beyond sequence length {}",
                seq.len()
            )));
        }
        let raw = self.raw_for_frame(seq, t).finish();
        self.encode_values(params, &raw, &[false])
    }
}
