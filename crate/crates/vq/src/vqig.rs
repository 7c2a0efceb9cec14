//! Code-predicting image generator: motion mapping, warping, fusion with
//! the source codes, cross-attention, AdaIN modulation and a small
//! transformer over grid cells, decoded by the frozen autoencoder.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use talkflow_core::nn::{Activation, Init, Linear, Mlp};
use talkflow_core::numerics::{Bound, ParamSet, Tape, Var};
use talkflow_core::{Error, Result, Scalar};

use crate::autoencoder::{cell_mean, AeConfig, Discriminator, Encoder, PatchAutoencoder, CODEBOOK};
use crate::codebook::lookup;
use crate::conv::{bilinear_matrix, tile_rows};
use crate::patches::{stack_images, PatchPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqigConfig {
    pub sigma_dim: usize,
    pub beta_dim: usize,
    pub pose_dim: usize,
    /// Side of the low-resolution displacement grid.
    pub warp_grid: usize,
    /// Displacement bound as a fraction of the image side.
    pub max_disp: f64,
    pub heads: usize,
    pub layers: usize,
    pub hidden: usize,
    pub lambda_feat: f64,
    pub lambda_adv: f64,
    /// Weight of the image-level terms once warm-up is over.
    pub image_weight: f64,
    pub warmup: u64,
}

impl Default for VqigConfig {
    fn default() -> Self {
        Self {
            sigma_dim: 16,
            beta_dim: 64,
            pose_dim: 6,
            warp_grid: 4,
            max_disp: 0.25,
            heads: 4,
            layers: 2,
            hidden: 64,
            lambda_feat: 0.25,
            lambda_adv: 0.0,
            image_weight: 1.0,
            warmup: 200,
        }
    }
}

impl VqigConfig {
    pub fn validate(&self, ae: &AeConfig) -> Result<()> {
        if self.heads == 0 || ae.code_dim % self.heads != 0 {
            return Err(Error::config(
                "code dim must be divisible by the head count",
            ));
        }
        if self.sigma_dim == 0 || self.warp_grid == 0 || self.layers == 0 || self.hidden == 0 {
            return Err(Error::config("vqig widths must be positive"));
        }
        if !(self.max_disp > 0.0 && self.max_disp <= 1.0) {
            return Err(Error::config("max_disp must lie in (0, 1]"));
        }
        if self.lambda_feat < 0.0 || self.lambda_adv < 0.0 || self.image_weight < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Multi-head attention with queries from one grid and keys/values from another.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Self {
        let l = |n: &str| Linear::new(&format!("{prefix}.{n}"), dim, dim, true);
        Self {
            q: l("q"),
            k: l("k"),
            v: l("v"),
            o: l("o"),
            heads,
        }
    }

    pub fn init<T: Scalar, R: rand::Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(params, rng, Init::Xavier);
        }
    }

    /// Output and the per-head attention weights (rows are queries).
    pub fn forward<T: Scalar>(
        &self,
        b: &Bound<'_, T>,
        query: Var,
        context: Var,
        batch: usize,
    ) -> (Var, Vec<Var>) {
        let g = b.tape;
        let (q, k, v) = (
            self.q.forward(b, query),
            self.k.forward(b, context),
            self.v.forward(b, context),
        );
        let dh = g.shape(q).1 / self.heads;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            );
            let p = g.softmax_rows(g.scale(g.block_matmul_nt(qh, kh, batch), scale));
            outs.push(g.block_matmul(p, vh, batch));
            probs.push(p);
        }
        (self.o.forward(b, g.concat_cols(&outs)), probs)
    }
}

/// `γ·(x − μ_x) + μ_x + β` per sample and channel, with `γ = 1 + A·σ`, `β = B·σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaIn {
    pub scale: Linear,
    pub shift: Linear,
}

impl AdaIn {
    pub fn new(prefix: &str, sigma_dim: usize, channels: usize) -> Self {
        Self {
            scale: Linear::new(&format!("{prefix}.scale"), sigma_dim, channels, true),
            shift: Linear::new(&format!("{prefix}.shift"), sigma_dim, channels, true),
        }
    }

    pub fn init<T: Scalar, R: rand::Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        self.scale.init(params, rng, Init::Zero);
        self.shift.init(params, rng, Init::Zero);
    }

    pub fn statistics<T: Scalar>(&self, b: &Bound<'_, T>, sigma: Var) -> (Var, Var) {
        let g = b.tape;
        (
            g.add_scalar(self.scale.forward(b, sigma), T::one()),
            self.shift.forward(b, sigma),
        )
    }

    /// `x` has `cells` consecutive rows per sample.
    pub fn forward<T: Scalar>(&self, b: &Bound<'_, T>, x: Var, sigma: Var, cells: usize) -> Var {
        let (gamma, beta) = self.statistics(b, sigma);
        adain_apply(b.tape, x, gamma, beta, cells)
    }
}

pub fn adain_apply<T: Scalar>(g: &Tape<T>, x: Var, gamma: Var, beta: Var, cells: usize) -> Var {
    let mu = g.repeat_rows(g.segment_mean(x, cells), cells);
    let gamma = g.repeat_rows(gamma, cells);
    let beta = g.repeat_rows(beta, cells);
    g.add(g.add(g.mul(gamma, g.sub(x, mu)), mu), beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub attn: CrossAttention,
    pub mlp: Mlp,
}

/// Self-attention stack over grid cells with learned positions and an N-way head.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTransformer {
    pub pos: String,
    pub layers: Vec<TransformerLayer>,
    pub head: Linear,
    pub cells: usize,
}

impl CodeTransformer {
    pub fn new(
        prefix: &str,
        cells: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        hidden: usize,
        codes: usize,
    ) -> Self {
        Self {
            pos: format!("{prefix}.pos"),
            layers: (0..layers)
                .map(|i| TransformerLayer {
                    attn: CrossAttention::new(&format!("{prefix}.{i}.attn"), dim, heads),
                    mlp: Mlp::new(
                        &format!("{prefix}.{i}.mlp"),
                        &[dim, hidden, dim],
                        Activation::Silu,
                    ),
                })
                .collect(),
            head: Linear::new(&format!("{prefix}.head"), dim, codes, true),
            cells,
        }
    }

    pub fn init<T: Scalar, R: rand::Rng + ?Sized>(
        &self,
        params: &mut ParamSet<T>,
        rng: &mut R,
        dim: usize,
    ) {
        params.insert(
            self.pos.clone(),
            Init::Normal(0.02).sample(self.cells, dim, rng),
        );
        for l in &self.layers {
            l.attn.init(params, rng);
            l.mlp.init(params, rng, Init::Xavier);
        }
        self.head.init(params, rng, Init::Xavier);
    }

    pub fn forward<T: Scalar>(&self, b: &Bound<'_, T>, x: Var, batch: usize) -> Var {
        let g = b.tape;
        let mut h = g.add(x, tile_rows(g, b.p(&self.pos), batch));
        for l in &self.layers {
            h = g.add(h, l.attn.forward(b, h, h, batch).0);
            h = g.add(h, l.mlp.forward(b, h));
        }
        self.head.forward(b, h)
    }
}

/// Per-cell argmax; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Array2<T>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy of softmax(logits) against `targets`.
pub fn code_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> Result<f64> {
    if targets.len() != logits.nrows() {
        return Err(Error::argument("one target per cell required"));
    }
    let mut total = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::argument(format!("code index {t} >= {}", row.len())));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / targets.len() as f64)
}

/// One training minibatch with the frozen targets precomputed.
#[derive(Debug, Clone)]
pub struct VqigBatch<T> {
    pub batch: usize,
    pub source: Array2<T>,
    pub target: Array2<T>,
    pub coeffs: Array2<T>,
    /// Quantized source grid.
    pub z_c: Array2<T>,
    pub s_gt: Vec<usize>,
    pub z_c_gt: Array2<T>,
}

impl<T: Scalar> VqigBatch<T> {
    pub fn new(model: &VqigModel<T>, pairs: &[&PatchPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::argument("empty pair batch"));
        }
        let src: Vec<Array2<f64>> = pairs.iter().map(|p| p.source.clone()).collect();
        let tgt: Vec<Array2<f64>> = pairs.iter().map(|p| p.target.clone()).collect();
        let source = stack_images(&src).mapv(T::c);
        let target = stack_images(&tgt).mapv(T::c);
        let coeffs =
            model.coeff_rows(pairs.iter().map(|p| (p.beta.as_slice(), p.rho.as_slice())))?;
        let (z_c, _) = model.quantize_frozen(&source)?;
        let (z_c_gt, s_gt) = model.quantize_frozen(&target)?;
        Ok(Self {
            batch: pairs.len(),
            source,
            target,
            coeffs,
            z_c,
            s_gt,
            z_c_gt,
        })
    }
}

/// Quantities captured at one parameter point so the hard code lookup can
/// be replaced by a smooth surrogate during gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLookup<T> {
    /// `hard − soft` lookup at the base point.
    pub offset: Array2<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VqigTerms {
    pub total: f64,
    pub code: f64,
    pub feat: f64,
    pub rec: f64,
    pub per: f64,
    pub adv_gen: f64,
    pub adv_disc: f64,
    pub accuracy: f64,
}

impl VqigTerms {
    pub fn named(&self) -> Vec<(String, f64)> {
        vec![
            ("total".into(), self.total),
            ("code".into(), self.code),
            ("feat".into(), self.feat),
            ("rec".into(), self.rec),
            ("per".into(), self.per),
            ("adv_gen".into(), self.adv_gen),
            ("adv_disc".into(), self.adv_disc),
            ("accuracy".into(), self.accuracy),
        ]
    }
}

/// Intermediate tape values of one forward pass.
pub struct VqigForward {
    pub sigma: Var,
    pub warped: Var,
    pub z_f: Var,
    pub attn_probs: Vec<Var>,
    pub fused: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqigModel<T> {
    pub config: VqigConfig,
    pub ae_config: AeConfig,
    pub ae: PatchAutoencoder<T>,
    pub mapper: Linear,
    pub warp: Linear,
    pub e_w: Encoder,
    pub fuse: Mlp,
    pub mhca: CrossAttention,
    pub adain: AdaIn,
    pub image_adain: AdaIn,
    pub transformer: CodeTransformer,
    pub discriminator: Option<Discriminator>,
    /// Frozen autoencoder buffers plus the generator's own parameters.
    pub params: ParamSet<T>,
    pub trained_steps: u64,
    upsample: Array2<T>,
}

impl<T: Scalar> VqigModel<T> {
    /// Structure around an autoencoder skeleton; `params` is empty.
    pub fn skeleton(config: VqigConfig, ae_config: AeConfig) -> Result<Self> {
        config.validate(&ae_config)?;
        let ae = PatchAutoencoder::skeleton(AeConfig {
            lambda_adv: 0.0,
            ..ae_config
        })?;
        let d = ae_config.code_dim;
        let gg = config.warp_grid * config.warp_grid;
        Ok(Self {
            mapper: Linear::new(
                "vqig.map",
                config.beta_dim + config.pose_dim,
                config.sigma_dim,
                true,
            ),
            warp: Linear::new("vqig.warp", config.sigma_dim, gg * 2, false),
            e_w: Encoder::new("vqig.ew", &ae_config),
            fuse: Mlp::new("vqig.fuse", &[2 * d, d, d], Activation::Silu),
            mhca: CrossAttention::new("vqig.mhca", d, config.heads),
            adain: AdaIn::new("vqig.adain", config.sigma_dim, d),
            image_adain: AdaIn::new("vqig.img_adain", config.sigma_dim, d),
            transformer: CodeTransformer::new(
                "vqig.t",
                ae_config.cells(),
                d,
                config.heads,
                config.layers,
                config.hidden,
                ae_config.codebook_size,
            ),
            discriminator: (config.lambda_adv > 0.0)
                .then(|| Discriminator::new("vqig.disc", ae_config.resolution)),
            upsample: bilinear_matrix(config.warp_grid, ae_config.resolution).mapv(T::c),
            config,
            ae_config,
            ae,
            params: ParamSet::new(),
            trained_steps: 0,
        })
    }

    /// Wraps a trained autoencoder, whose parameters become fixed buffers.
    pub fn new(config: VqigConfig, ae: &PatchAutoencoder<T>, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(config, ae.config)?;
        for (name, entry) in ae.params.entries() {
            if !name.starts_with("ae.disc") {
                model.params.insert_buffer(name, entry.value.clone());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.mapper.init(&mut model.params, &mut rng, Init::Xavier);
        model
            .warp
            .init(&mut model.params, &mut rng, Init::Normal(0.01));
        ae.encoder
            .copy_into(&ae.params, &model.e_w, &mut model.params);
        model.fuse.init(&mut model.params, &mut rng, Init::Xavier);
        model.mhca.init(&mut model.params, &mut rng);
        model.adain.init(&mut model.params, &mut rng);
        model.image_adain.init(&mut model.params, &mut rng);
        model
            .transformer
            .init(&mut model.params, &mut rng, ae.config.code_dim);
        if let Some(d) = &model.discriminator {
            d.init(&mut model.params, &mut rng);
        }
        Ok(model)
    }

    /// Frozen autoencoder parameters as held by this model.
    pub fn frozen_params(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, entry) in self.params.entries() {
            if name.starts_with("ae.") {
                out.insert_entry(name, entry.value.clone(), entry.trainable);
            }
        }
        out
    }

    pub fn image_weight(&self, step: u64) -> f64 {
        if step < self.config.warmup {
            0.0
        } else {
            self.config.image_weight
        }
    }

    fn check_images(&self, images: &Array2<T>) -> Result<usize> {
        let px = self.ae_config.pixels();
        if images.ncols() != 3 || images.nrows() == 0 || images.nrows() % px != 0 {
            return Err(Error::config(format!(
                "images must be {}×{} RGB pixel rows, got {:?}",
                self.ae_config.resolution,
                self.ae_config.resolution,
                images.dim()
            )));
        }
        Ok(images.nrows() / px)
    }

    pub fn coeff_rows<'a>(
        &self,
        coeffs: impl Iterator<Item = (&'a [f64], &'a [f64])>,
    ) -> Result<Array2<T>> {
        let (bd, pd) = (self.config.beta_dim, self.config.pose_dim);
        let mut rows = Vec::new();
        let mut n = 0;
        for (beta, rho) in coeffs {
            if beta.len() != bd || rho.len() != pd {
                return Err(Error::argument(format!(
                    "coefficient widths ({}, {}) != ({bd}, {pd})",
                    beta.len(),
                    rho.len()
                )));
            }
            rows.extend(beta.iter().chain(rho).map(|&v| T::c(v)));
            n += 1;
        }
        Array2::from_shape_vec((n, bd + pd), rows).map_err(|e| Error::argument(e.to_string()))
    }

    /// `(z_c, s)` of images under the frozen encoder and codebook.
    pub fn quantize_frozen(&self, images: &Array2<T>) -> Result<(Array2<T>, Vec<usize>)> {
        let batch = self.check_images(images)?;
        let g = Tape::new();
        let b = Bound::new(&g, &self.params);
        let z = g.value(
            self.ae
                .encoder
                .forward(&b, g.constant(images.clone()), batch),
        );
        crate::codebook::quantize(z.view(), self.params.expect(CODEBOOK).view())
    }

    pub fn sigma_tape(&self, b: &Bound<'_, T>, coeffs: Var) -> Var {
        self.mapper.forward(b, coeffs)
    }

    /// Per-pixel `(dx, dy)` in pixels.
    pub fn displacement_tape(&self, b: &Bound<'_, T>, sigma: Var, batch: usize) -> Var {
        let g = b.tape;
        let gg = self.config.warp_grid * self.config.warp_grid;
        let max = T::c(self.config.max_disp * self.ae_config.resolution as f64);
        let low = g.scale(g.tanh(self.warp.forward(b, sigma)), max);
        let low = g.gather(low, Rc::new((0..batch * gg * 2).collect()), (batch * gg, 2));
        let up =
            g.constant(ndarray::concatenate(Axis(0), &vec![self.upsample.view(); batch]).unwrap());
        g.block_matmul(up, low, batch)
    }

    pub fn warp_tape(&self, b: &Bound<'_, T>, image: Var, sigma: Var, batch: usize) -> Var {
        let r = self.ae_config.resolution;
        let disp = self.displacement_tape(b, sigma, batch);
        b.tape.grid_sample(image, disp, r, r)
    }

    /// Warps `image` by the field generated from `sigma` (one row per image).
    pub fn warp_image(&self, image: &Array2<T>, sigma: &Array2<T>) -> Result<Array2<T>> {
        let batch = self.check_images(image)?;
        if sigma.dim() != (batch, self.config.sigma_dim) {
            return Err(Error::argument("one motion descriptor per image required"));
        }
        let g = Tape::new();
        let b = Bound::new(&g, &self.params);
        Ok(g.value(self.warp_tape(
            &b,
            g.constant(image.clone()),
            g.constant(sigma.clone()),
            batch,
        )))
    }

    pub fn map_motion(&self, beta: &[f64], rho: &[f64]) -> Result<Array2<T>> {
        let c = self.coeff_rows(std::iter::once((beta, rho)))?;
        let g = Tape::new();
        let b = Bound::new(&g, &self.params);
        Ok(g.value(self.sigma_tape(&b, g.constant(c))))
    }

    /// `φ(concat(z_w, z_c))`, cross-attention against `z_c`, then AdaIN.
    pub fn fuse_and_attend(
        &self,
        b: &Bound<'_, T>,
        z_w: Var,
        z_c: Var,
        sigma: Var,
        batch: usize,
    ) -> Result<(Var, Var, Vec<Var>)> {
        let g = b.tape;
        if g.shape(z_w) != g.shape(z_c) {
            return Err(Error::argument(format!(
                "grid shapes {:?} and {:?} differ",
                g.shape(z_w),
                g.shape(z_c)
            )));
        }
        let z_f = self.fuse.forward(b, g.concat_cols(&[z_w, z_c]));
        let (att, probs) = self.mhca.forward(b, z_f, z_c, batch);
        let fused = self
            .adain
            .forward(b, g.add(z_f, att), sigma, self.ae_config.cells());
        Ok((z_f, fused, probs))
    }

    pub fn forward(
        &self,
        b: &Bound<'_, T>,
        source: Var,
        z_c: Var,
        coeffs: Var,
        batch: usize,
    ) -> Result<VqigForward> {
        let sigma = self.sigma_tape(b, coeffs);
        let warped = self.warp_tape(b, source, sigma, batch);
        let z_w = self.e_w.forward(b, warped, batch);
        let (z_f, fused, attn_probs) = self.fuse_and_attend(b, z_w, z_c, sigma, batch)?;
        let logits = self.transformer.forward(b, fused, batch);
        Ok(VqigForward {
            sigma,
            warped,
            z_f,
            attn_probs,
            fused,
            logits,
        })
    }

    /// Decodes a code grid through image-level AdaIN and the frozen decoder.
    pub fn decode_tape(&self, b: &Bound<'_, T>, codes: Var, sigma: Var, batch: usize) -> Var {
        let z = self
            .image_adain
            .forward(b, codes, sigma, self.ae_config.cells());
        self.ae.decoder.forward(b, z, batch)
    }

    fn soft_lookup(&self, b: &Bound<'_, T>, logits: Var) -> Var {
        let g = b.tape;
        g.matmul(g.softmax_rows(logits), b.p(CODEBOOK))
    }

    pub fn frozen_lookup(
        &self,
        params: &ParamSet<T>,
        vb: &VqigBatch<T>,
    ) -> Result<FrozenLookup<T>> {
        let g = Tape::new();
        let b = Bound::new(&g, params);
        let f = self.forward(
            &b,
            g.constant(vb.source.clone()),
            g.constant(vb.z_c.clone()),
            g.constant(vb.coeffs.clone()),
            vb.batch,
        )?;
        let soft = g.value(self.soft_lookup(&b, f.logits));
        let hard = lookup(
            params.expect(CODEBOOK).view(),
            &argmax_rows(&g.value(f.logits)),
        )?;
        Ok(FrozenLookup {
            offset: hard - soft,
        })
    }

    pub fn loss_tape(
        &self,
        b: &Bound<'_, T>,
        vb: &VqigBatch<T>,
        image_weight: f64,
        frozen: Option<&FrozenLookup<T>>,
    ) -> Result<(Var, VqigTerms)> {
        let g = b.tape;
        let batch = vb.batch;
        let f = self.forward(
            b,
            g.constant(vb.source.clone()),
            g.constant(vb.z_c.clone()),
            g.constant(vb.coeffs.clone()),
            batch,
        )?;
        let n = self.ae_config.codebook_size;
        let rows = vb.s_gt.len();
        if let Some(&bad) = vb.s_gt.iter().find(|&&s| s >= n) {
            return Err(Error::argument(format!("code index {bad} >= {n}")));
        }
        let logp = g.log_softmax_rows(f.logits);
        let picked = g.gather(
            logp,
            Rc::new(
                vb.s_gt
                    .iter()
                    .enumerate()
                    .map(|(r, &s)| r * n + s)
                    .collect(),
            ),
            (rows, 1),
        );
        let code = g.neg(g.mean_all(picked));
        let feat = cell_mean(g, g.square(g.sub(f.fused, g.constant(vb.z_c_gt.clone()))));
        let mut total = g.add(code, g.scale(feat, T::c(self.config.lambda_feat)));
        let predicted = g.with_value(f.logits, argmax_rows);
        let mut terms = VqigTerms {
            code: g.scalar(code).f64(),
            feat: g.scalar(feat).f64(),
            accuracy: predicted
                .iter()
                .zip(&vb.s_gt)
                .filter(|(a, b)| a == b)
                .count() as f64
                / rows as f64,
            ..VqigTerms::default()
        };
        if image_weight > 0.0 {
            let soft = self.soft_lookup(b, f.logits);
            let codes = match frozen {
                None => {
                    let hard = lookup(b.params().expect(CODEBOOK).view(), &predicted)?;
                    g.straight_through(hard, soft)
                }
                Some(fl) => g.add(soft, g.constant(fl.offset.clone())),
            };
            let image = self.decode_tape(b, codes, f.sigma, batch);
            let target = g.constant(vb.target.clone());
            let rec = g.mean_all(g.abs(g.sub(image, target)));
            let per = g.mean_all(g.square(g.sub(
                self.ae.perceptual.forward(b, image, batch),
                self.ae.perceptual.forward(b, target, batch),
            )));
            let mut img = g.add(rec, per);
            terms.rec = g.scalar(rec).f64();
            terms.per = g.scalar(per).f64();
            if let Some(disc) = &self.discriminator {
                let d_gen = disc.forward(b, image, batch, true);
                let d_real = disc.forward(b, target, batch, false);
                let d_fake = disc.forward(b, g.detach(image), batch, false);
                let probs_ok = [d_gen, d_real, d_fake].iter().all(|&d| {
                    g.with_value(d, |v| v.iter().all(|&p| p > T::zero() && p < T::one()))
                });
                if !probs_ok {
                    return Err(Error::numeric("discriminator output outside (0, 1)"));
                }
                let adv_gen = g.neg(g.mean_all(g.ln(d_gen)));
                let objective = g.add(
                    g.mean_all(g.ln(d_real)),
                    g.mean_all(g.ln(g.add_scalar(g.neg(d_fake), T::one()))),
                );
                img = g.add(img, g.scale(adv_gen, T::c(self.config.lambda_adv)));
                total = g.add(total, g.neg(objective));
                terms.adv_gen = g.scalar(adv_gen).f64();
                terms.adv_disc = g.scalar(objective).f64();
            }
            total = g.add(total, g.scale(img, T::c(image_weight)));
        }
        terms.total = g.scalar(total).f64();
        if !terms.total.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite generator loss {terms:?}"
            )));
        }
        Ok((total, terms))
    }

    pub fn loss_and_grads(
        &self,
        params: &ParamSet<T>,
        vb: &VqigBatch<T>,
        image_weight: f64,
        frozen: Option<&FrozenLookup<T>>,
    ) -> Result<(VqigTerms, ParamSet<T>)> {
        let g = Tape::new();
        let b = Bound::new(&g, params);
        let (total, terms) = self.loss_tape(&b, vb, image_weight, frozen)?;
        let grads = g.backward(total);
        Ok((terms, b.grads(&grads)))
    }

    /// Predicted code indices for each pair, in batches.
    pub fn predict_codes(&self, pairs: &[PatchPair]) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(32) {
            let refs: Vec<&PatchPair> = chunk.iter().collect();
            let vb = VqigBatch::new(self, &refs)?;
            let g = Tape::new();
            let b = Bound::new(&g, &self.params);
            let f = self.forward(
                &b,
                g.constant(vb.source.clone()),
                g.constant(vb.z_c.clone()),
                g.constant(vb.coeffs.clone()),
                vb.batch,
            )?;
            let pred = g.with_value(f.logits, argmax_rows);
            let cells = self.ae_config.cells();
            for k in 0..vb.batch {
                out.push((
                    pred[k * cells..(k + 1) * cells].to_vec(),
                    vb.s_gt[k * cells..(k + 1) * cells].to_vec(),
                ));
            }
        }
        Ok(out)
    }

    /// Fraction of cells whose predicted code equals the target's code.
    pub fn code_accuracy(&self, pairs: &[PatchPair]) -> Result<f64> {
        let preds = self.predict_codes(pairs)?;
        let (mut hit, mut n) = (0usize, 0usize);
        for (p, t) in preds {
            hit += p.iter().zip(&t).filter(|(a, b)| a == b).count();
            n += t.len();
        }
        Ok(hit as f64 / n.max(1) as f64)
    }

    /// Renders one frame per coefficient row from the source image.
    pub fn animate(
        &self,
        source: &Array2<f64>,
        betas: &Array2<f64>,
        rhos: &Array2<f64>,
    ) -> Result<Vec<Array2<f64>>> {
        Ok(self
            .animate_with_codes(source, betas, rhos)?
            .into_iter()
            .map(|(f, _)| f)
            .collect())
    }

    /// Frames together with the predicted code index of every grid cell.
    pub fn animate_with_codes(
        &self,
        source: &Array2<f64>,
        betas: &Array2<f64>,
        rhos: &Array2<f64>,
    ) -> Result<Vec<(Array2<f64>, Vec<usize>)>> {
        if source.dim() != (self.ae_config.pixels(), 3) {
            return Err(Error::config(format!(
                "source image {:?} does not match the trained {}×{} resolution",
                source.dim(),
                self.ae_config.resolution,
                self.ae_config.resolution
            )));
        }
        if betas.nrows() != rhos.nrows() {
            return Err(Error::argument(
                "expression and pose tracks differ in length",
            ));
        }
        let src = source.mapv(T::c);
        let (z_c, _) = self.quantize_frozen(&src)?;
        let mut frames = Vec::with_capacity(betas.nrows());
        for (beta, rho) in betas.rows().into_iter().zip(rhos.rows()) {
            let coeffs = self.coeff_rows(std::iter::once((
                beta.to_vec().as_slice(),
                rho.to_vec().as_slice(),
            )))?;
            let g = Tape::new();
            let b = Bound::new(&g, &self.params);
            let f = self.forward(
                &b,
                g.constant(src.clone()),
                g.constant(z_c.clone()),
                g.constant(coeffs),
                1,
            )?;
            let idx = g.with_value(f.logits, argmax_rows);
            let codes = g.constant(lookup(self.params.expect(CODEBOOK).view(), &idx)?);
            let img = self.decode_tape(&b, codes, f.sigma, 1);
            frames.push((g.value(img).mapv(|v| v.f64()), idx));
        }
        Ok(frames)
    }
}
