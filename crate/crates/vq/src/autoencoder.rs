//! Patch autoencoder with a learned codebook, its loss suite and a small
//! discriminator.

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use talkflow_core::nn::{Init, Linear};
use talkflow_core::numerics::{Bound, ParamSet, Tape, Var};
use talkflow_core::{Error, Result, Scalar};

use crate::codebook::{lookup, nearest_codes};
use crate::conv::{upsample2, Conv2d};

pub const CODEBOOK: &str = "ae.codebook";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualKind {
    /// `Φ(I) = I`: the perceptual term is pixel MSE.
    Identity,
    /// Two fixed random convolutions with tanh.
    RandomConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub resolution: usize,
    /// Latent grid side (`m = n`).
    pub grid: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub lambda_feat: f64,
    pub lambda_adv: f64,
    pub perceptual: PerceptualKind,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            grid: 4,
            code_dim: 32,
            codebook_size: 64,
            base_channels: 16,
            max_channels: 64,
            lambda_feat: 0.25,
            lambda_adv: 0.0,
            perceptual: PerceptualKind::Identity,
        }
    }
}

impl AeConfig {
    /// Full-size shapes (512 px, 16×16 grid, d=256, N=1024, λ_adv=0.8).
    pub fn paper_shape() -> Self {
        Self {
            resolution: 512,
            grid: 16,
            code_dim: 256,
            codebook_size: 1024,
            base_channels: 32,
            max_channels: 256,
            lambda_feat: 0.25,
            lambda_adv: 0.8,
            perceptual: PerceptualKind::Identity,
        }
    }

    pub fn stages(&self) -> usize {
        (self.resolution / self.grid).trailing_zeros() as usize
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn channels(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(self.max_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0
            || self.resolution % self.grid != 0
            || !(self.resolution / self.grid).is_power_of_two()
            || self.resolution == self.grid
        {
            return Err(Error::config(
                "resolution / grid must be a power of two greater than one",
            ));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("codebook needs at least two entries"));
        }
        if self.code_dim == 0 || self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.lambda_feat < 0.0 || self.lambda_adv < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Strided convolutions from image to latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub stages: Vec<Conv2d>,
    pub head: Conv2d,
    pub resolution: usize,
}

impl Encoder {
    pub fn new(prefix: &str, cfg: &AeConfig) -> Self {
        let n = cfg.stages();
        let stages = (0..n)
            .map(|i| {
                let cin = if i == 0 { 3 } else { cfg.channels(i - 1) };
                Conv2d::new(&format!("{prefix}.{i}"), cin, cfg.channels(i), 4, 2, 1)
            })
            .collect();
        let head = Conv2d::new(
            &format!("{prefix}.head"),
            cfg.channels(n - 1),
            cfg.code_dim,
            1,
            1,
            0,
        );
        Self {
            stages,
            head,
            resolution: cfg.resolution,
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.stages.iter().chain(std::iter::once(&self.head))
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        for c in self.convs() {
            c.init(params, rng);
        }
    }

    /// `(batch·res², 3) → (batch·grid², d)`.
    pub fn forward<T: Scalar>(&self, b: &Bound<'_, T>, x: Var, batch: usize) -> Var {
        let g = b.tape;
        let (mut h, mut s) = (x, self.resolution);
        for conv in &self.stages {
            let (y, ho, _) = conv.forward(b, h, batch, s, s);
            h = g.silu(y);
            s = ho;
        }
        self.head.forward(b, h, batch, s, s).0
    }

    /// Copies this encoder's weights into `other`'s names.
    pub fn copy_into<T: Scalar>(&self, from: &ParamSet<T>, other: &Encoder, to: &mut ParamSet<T>) {
        for (a, c) in self.convs().zip(other.convs()) {
            to.insert(c.weight.clone(), from.expect(&a.weight).clone());
            to.insert(c.bias.clone(), from.expect(&a.bias).clone());
        }
    }
}

/// Nearest upsampling and 3×3 convolutions from latent grid to image.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub stem: Conv2d,
    pub stages: Vec<Conv2d>,
    pub out: Conv2d,
    pub grid: usize,
}

impl Decoder {
    pub fn new(prefix: &str, cfg: &AeConfig) -> Self {
        let n = cfg.stages();
        let stem = Conv2d::new(
            &format!("{prefix}.stem"),
            cfg.code_dim,
            cfg.channels(n - 1),
            3,
            1,
            1,
        );
        let stages = (0..n)
            .rev()
            .map(|j| {
                let cout = cfg.channels(j.saturating_sub(1));
                Conv2d::new(&format!("{prefix}.{j}"), cfg.channels(j), cout, 3, 1, 1)
            })
            .collect();
        let out = Conv2d::new(&format!("{prefix}.out"), cfg.channels(0), 3, 3, 1, 1);
        Self {
            stem,
            stages,
            out,
            grid: cfg.grid,
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        std::iter::once(&self.stem)
            .chain(self.stages.iter())
            .chain(std::iter::once(&self.out))
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        for c in self.convs() {
            c.init(params, rng);
        }
    }

    pub fn forward<T: Scalar>(&self, b: &Bound<'_, T>, z: Var, batch: usize) -> Var {
        let g = b.tape;
        let s = self.grid;
        let mut h = g.silu(self.stem.forward(b, z, batch, s, s).0);
        let mut s = s;
        for conv in &self.stages {
            let up = upsample2(g, h, batch, s, s);
            s *= 2;
            h = g.silu(conv.forward(b, up, batch, s, s).0);
        }
        self.out.forward(b, h, batch, s, s).0
    }
}

/// Feature map used by the perceptual term.
#[derive(Debug, Clone, PartialEq)]
pub struct Perceptual {
    pub kind: PerceptualKind,
    convs: Vec<Conv2d>,
    resolution: usize,
}

impl Perceptual {
    pub fn new(kind: PerceptualKind, resolution: usize) -> Self {
        let convs = match kind {
            PerceptualKind::Identity => Vec::new(),
            PerceptualKind::RandomConv => vec![
                Conv2d::new("ae.phi.0", 3, 8, 3, 1, 1),
                Conv2d::new("ae.phi.1", 8, 8, 3, 2, 1),
            ],
        };
        Self {
            kind,
            convs,
            resolution,
        }
    }

    /// Weights are fixed buffers.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        for c in &self.convs {
            c.init(params, rng);
            params.set_trainable(&c.weight, false).unwrap();
            params.set_trainable(&c.bias, false).unwrap();
        }
    }

    pub fn forward<T: Scalar>(&self, b: &Bound<'_, T>, x: Var, batch: usize) -> Var {
        let g = b.tape;
        let (mut h, mut s) = (x, self.resolution);
        for c in &self.convs {
            let (y, ho, _) = c.forward(b, h, batch, s, s);
            h = g.tanh(y);
            s = ho;
        }
        h
    }
}

/// Conv–conv–pool–linear critic with a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    head: Linear,
    resolution: usize,
}

impl Discriminator {
    pub fn new(prefix: &str, resolution: usize) -> Self {
        Self {
            convs: vec![
                Conv2d::new(&format!("{prefix}.0"), 3, 8, 4, 2, 1),
                Conv2d::new(&format!("{prefix}.1"), 8, 16, 4, 2, 1),
            ],
            head: Linear::new(&format!("{prefix}.head"), 16, 1, true),
            resolution,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        for c in &self.convs {
            c.init(params, rng);
        }
        self.head.init(params, rng, Init::Xavier);
    }

    /// `(batch, 1)` probabilities. With `frozen`, the critic's own
    /// parameters receive no gradient.
    pub fn forward<T: Scalar>(&self, b: &Bound<'_, T>, x: Var, batch: usize, frozen: bool) -> Var {
        let g = b.tape;
        let p = |n: &str| if frozen { g.detach(b.p(n)) } else { b.p(n) };
        let (mut h, mut s) = (x, self.resolution);
        for c in &self.convs {
            let (ho, _) = c.out_hw(s, s);
            let idx = crate::conv::im2col_index(batch, s, s, c.cin, c.k, c.stride, c.pad);
            let cols = g.gather(h, idx, (batch * ho * ho, c.k * c.k * c.cin));
            h = g.silu(g.add(g.matmul(cols, p(&c.weight)), p(&c.bias)));
            s = ho;
        }
        let pooled = g.segment_mean(h, s * s);
        let logit = g.add(
            g.matmul(pooled, p(&self.head.weight)),
            p(self.head.bias.as_ref().unwrap()),
        );
        g.sigmoid(logit)
    }
}

/// `mean log D(I) + mean log(1 − D(Î))`; the critic maximizes it.
pub fn adv_objective(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::argument("adversarial objective needs outputs"));
    }
    if d_real.iter().chain(d_fake).any(|&d| !(d > 0.0 && d < 1.0)) {
        return Err(Error::numeric("discriminator output outside (0, 1)"));
    }
    let real = d_real.iter().map(|d| d.ln()).sum::<f64>() / d_real.len() as f64;
    let fake = d_fake.iter().map(|d| (1.0 - d).ln()).sum::<f64>() / d_fake.len() as f64;
    Ok(real + fake)
}

fn check_probabilities<T: Scalar>(g: &Tape<T>, d: Var) -> Result<()> {
    if g.with_value(d, |v| v.iter().any(|&p| !(p > T::zero() && p < T::one()))) {
        return Err(Error::numeric("discriminator output outside (0, 1)"));
    }
    Ok(())
}

/// Mean over rows of the per-row sum: the per-cell squared distance.
pub fn cell_mean<T: Scalar>(g: &Tape<T>, x: Var) -> Var {
    let rows = g.shape(x).0;
    g.scale(g.sum_all(x), T::c(1.0 / rows as f64))
}

/// `(L_rec, L_per)` with `Φ = identity`.
pub fn recon_losses(image: ArrayView2<f64>, recon: ArrayView2<f64>) -> Result<(f64, f64)> {
    if image.dim() != recon.dim() {
        return Err(Error::argument("reconstruction shape mismatch"));
    }
    let n = image.len() as f64;
    let rec = image
        .iter()
        .zip(recon.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    let per = image
        .iter()
        .zip(recon.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n;
    Ok((rec, per))
}

/// `(L_code, L_feat)` values, both per-cell squared distances averaged over cells.
pub fn codebook_losses(z_h: ArrayView2<f64>, z_c: ArrayView2<f64>) -> Result<(f64, f64)> {
    if z_h.dim() != z_c.dim() {
        return Err(Error::argument("latent grids are not aligned"));
    }
    let v = z_h
        .iter()
        .zip(z_c.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / z_h.nrows() as f64;
    Ok((v, v))
}

/// Quantizer state captured at one parameter point. Substituting these
/// constants for the stop-gradient operands gives a smooth loss whose true
/// gradient at that point equals the straight-through gradient, which is
/// what finite differences can check.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenQuant<T> {
    pub indices: Vec<usize>,
    pub z_h: Array2<T>,
    pub z_c: Array2<T>,
}

/// Decoder input and the two codebook terms.
pub struct Quantized {
    pub z_q: Var,
    pub code: Var,
    pub feat: Var,
    pub indices: Vec<usize>,
}

pub fn quantize_tape<T: Scalar>(
    b: &Bound<'_, T>,
    z_h: Var,
    codebook: Var,
    frozen: Option<&FrozenQuant<T>>,
) -> Result<Quantized> {
    let g = b.tape;
    match frozen {
        None => {
            let zh_val = g.value(z_h);
            let indices = g.with_value(codebook, |c| nearest_codes(zh_val.view(), c.view()))?;
            let z_c = g.gather_rows(codebook, &indices);
            let code = cell_mean(g, g.square(g.sub(g.detach(z_h), z_c)));
            let feat = cell_mean(g, g.square(g.sub(z_h, g.detach(z_c))));
            let z_q = g.straight_through(g.value(z_c), z_h);
            Ok(Quantized {
                z_q,
                code,
                feat,
                indices,
            })
        }
        Some(f) => {
            let z_c = g.gather_rows(codebook, &f.indices);
            let code = cell_mean(g, g.square(g.sub(g.constant(f.z_h.clone()), z_c)));
            let feat = cell_mean(g, g.square(g.sub(z_h, g.constant(f.z_c.clone()))));
            let z_q = g.add(z_h, g.constant(&f.z_c - &f.z_h));
            Ok(Quantized {
                z_q,
                code,
                feat,
                indices: f.indices.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AeTerms {
    pub total: f64,
    pub rec: f64,
    pub per: f64,
    pub code: f64,
    pub feat: f64,
    pub adv_gen: f64,
    pub adv_disc: f64,
}

impl AeTerms {
    pub fn named(&self) -> Vec<(String, f64)> {
        vec![
            ("total".into(), self.total),
            ("rec".into(), self.rec),
            ("per".into(), self.per),
            ("code".into(), self.code),
            ("feat".into(), self.feat),
            ("adv_gen".into(), self.adv_gen),
            ("adv_disc".into(), self.adv_disc),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchAutoencoder<T> {
    pub config: AeConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub perceptual: Perceptual,
    pub discriminator: Option<Discriminator>,
    pub params: ParamSet<T>,
    pub frozen: bool,
}

impl<T: Scalar> PatchAutoencoder<T> {
    pub fn skeleton(config: AeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::new("ae.enc", &config),
            decoder: Decoder::new("ae.dec", &config),
            perceptual: Perceptual::new(config.perceptual, config.resolution),
            discriminator: (config.lambda_adv > 0.0)
                .then(|| Discriminator::new("ae.disc", config.resolution)),
            config,
            params: ParamSet::new(),
            frozen: false,
        })
    }

    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        let mut ae = Self::skeleton(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ae.encoder.init(&mut ae.params, &mut rng);
        ae.decoder.init(&mut ae.params, &mut rng);
        ae.params.insert(
            CODEBOOK,
            Init::Normal(0.5).sample(config.codebook_size, config.code_dim, &mut rng),
        );
        ae.perceptual.init(&mut ae.params, &mut rng);
        if let Some(d) = &ae.discriminator {
            d.init(&mut ae.params, &mut rng);
        }
        Ok(ae)
    }

    /// Marks encoder, codebook and decoder non-trainable.
    pub fn freeze(&mut self) {
        let names: Vec<String> = self.params.names().map(str::to_owned).collect();
        for n in names {
            self.params.set_trainable(&n, false).unwrap();
        }
        self.frozen = true;
    }

    pub fn codebook(&self) -> &Array2<T> {
        self.params.expect(CODEBOOK)
    }

    fn check_images(&self, images: &Array2<T>) -> Result<usize> {
        let px = self.config.pixels();
        if images.ncols() != 3 || images.nrows() % px != 0 || images.nrows() == 0 {
            return Err(Error::config(format!(
                "expected ({}·B, 3) pixel rows for {}×{} images, got {:?}",
                px,
                self.config.resolution,
                self.config.resolution,
                images.dim()
            )));
        }
        Ok(images.nrows() / px)
    }

    /// Replaces the codebook by distinct encoder cells drawn from `images`, plus small noise.
    pub fn init_codebook_from(&mut self, images: &Array2<T>, seed: u64) -> Result<()> {
        let z = self.encode(images)?;
        let n = self.config.codebook_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<usize> = if z.nrows() >= n {
            sample(&mut rng, z.nrows(), n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..z.nrows())).collect()
        };
        let noise: Array2<T> = Init::Normal(0.01).sample(n, self.config.code_dim, &mut rng);
        let mut codes = lookup(z.view(), &rows)?;
        codes.zip_mut_with(&noise, |c, &n| *c = *c + n);
        *self.params.get_mut(CODEBOOK).unwrap() = codes;
        Ok(())
    }

    pub fn encode(&self, images: &Array2<T>) -> Result<Array2<T>> {
        let batch = self.check_images(images)?;
        let g = Tape::new();
        let b = Bound::new(&g, &self.params);
        Ok(g.value(self.encoder.forward(&b, g.constant(images.clone()), batch)))
    }

    pub fn quantize(&self, images: &Array2<T>) -> Result<(Array2<T>, Vec<usize>)> {
        crate::codebook::quantize(self.encode(images)?.view(), self.codebook().view())
    }

    pub fn decode(&self, z: &Array2<T>) -> Result<Array2<T>> {
        let cells = self.config.cells();
        if z.ncols() != self.config.code_dim || z.nrows() % cells != 0 {
            return Err(Error::argument("latent grid does not match the decoder"));
        }
        let g = Tape::new();
        let b = Bound::new(&g, &self.params);
        Ok(g.value(
            self.decoder
                .forward(&b, g.constant(z.clone()), z.nrows() / cells),
        ))
    }

    /// Encode, quantize, decode.
    pub fn reconstruct(&self, images: &Array2<T>) -> Result<Array2<T>> {
        let (z_c, _) = self.quantize(images)?;
        self.decode(&z_c)
    }

    /// Mean absolute reconstruction error through the quantizer.
    pub fn recon_error(&self, images: &Array2<T>) -> Result<f64> {
        let r = self.reconstruct(images)?;
        Ok((&r - images).iter().map(|v| v.abs().f64()).sum::<f64>() / r.len() as f64)
    }

    pub fn freeze_point(&self, params: &ParamSet<T>, images: &Array2<T>) -> Result<FrozenQuant<T>> {
        let batch = self.check_images(images)?;
        let g = Tape::new();
        let b = Bound::new(&g, params);
        let z_h = g.value(self.encoder.forward(&b, g.constant(images.clone()), batch));
        let (z_c, indices) = crate::codebook::quantize(z_h.view(), params.expect(CODEBOOK).view())?;
        Ok(FrozenQuant { indices, z_h, z_c })
    }

    /// Total loss on the tape and its term values.
    pub fn loss_tape(
        &self,
        b: &Bound<'_, T>,
        images: &Array2<T>,
        frozen: Option<&FrozenQuant<T>>,
    ) -> Result<(Var, AeTerms)> {
        let batch = self.check_images(images)?;
        let g = b.tape;
        let x = g.constant(images.clone());
        let z_h = self.encoder.forward(b, x, batch);
        let q = quantize_tape(b, z_h, b.p(CODEBOOK), frozen)?;
        let recon = self.decoder.forward(b, q.z_q, batch);
        let rec = g.mean_all(g.abs(g.sub(recon, x)));
        let per = g.mean_all(g.square(g.sub(
            self.perceptual.forward(b, recon, batch),
            self.perceptual.forward(b, x, batch),
        )));
        let cfg = &self.config;
        let mut total = g.add(
            g.add(rec, per),
            g.add(q.code, g.scale(q.feat, T::c(cfg.lambda_feat))),
        );
        let mut terms = AeTerms {
            rec: g.scalar(rec).f64(),
            per: g.scalar(per).f64(),
            code: g.scalar(q.code).f64(),
            feat: g.scalar(q.feat).f64(),
            ..AeTerms::default()
        };
        if let (Some(disc), true) = (&self.discriminator, cfg.lambda_adv > 0.0) {
            // generator: non-saturating −log D(Î) with the critic held fixed
            let d_fake_g = disc.forward(b, recon, batch, true);
            check_probabilities(g, d_fake_g)?;
            let adv_gen = g.neg(g.mean_all(g.ln(d_fake_g)));
            // critic: maximize log D(I) + log(1 − D(Î)) on a detached reconstruction
            let d_real = disc.forward(b, x, batch, false);
            let d_fake = disc.forward(b, g.detach(recon), batch, false);
            check_probabilities(g, d_real)?;
            check_probabilities(g, d_fake)?;
            let objective = g.add(
                g.mean_all(g.ln(d_real)),
                g.mean_all(g.ln(g.add_scalar(g.neg(d_fake), T::one()))),
            );
            total = g.add(
                total,
                g.add(g.scale(adv_gen, T::c(cfg.lambda_adv)), g.neg(objective)),
            );
            terms.adv_gen = g.scalar(adv_gen).f64();
            terms.adv_disc = g.scalar(objective).f64();
        }
        terms.total = g.scalar(total).f64();
        if !terms.total.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite autoencoder loss {terms:?}"
            )));
        }
        Ok((total, terms))
    }

    pub fn loss_and_grads(
        &self,
        params: &ParamSet<T>,
        images: &Array2<T>,
        frozen: Option<&FrozenQuant<T>>,
    ) -> Result<(AeTerms, ParamSet<T>)> {
        let g = Tape::new();
        let b = Bound::new(&g, params);
        let (total, terms) = self.loss_tape(&b, images, frozen)?;
        let grads = g.backward(total);
        Ok((terms, b.grads(&grads)))
    }
}
