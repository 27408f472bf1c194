//! The VQ-VAE: strided-conv encoder, nearest-neighbour quantizer over a
//! learned codebook, transposed-conv decoder, and the three-term training
//! objective with a straight-through estimator at the quantizer.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod quantizer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqadError};
use crate::raster::ImageTile;

pub use layers::{Activation, ConvKind, ConvLayer, Real};
pub use loss::{vqvae_loss, LossBreakdown};
pub use quantizer::{quantize, Codebook, LatentField, Quantization};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Channel count of every hidden conv block.
    pub base_width: usize,
    /// Length `D` of each code vector.
    pub latent_dim: usize,
    /// Number `M` of code vectors.
    pub codebook_size: usize,
    /// Spatial reduction between tile and latent grid; one of 2, 4, 8.
    pub downsample_factor: usize,
    pub commitment_beta: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 32,
            latent_dim: 32,
            codebook_size: 256,
            downsample_factor: 4,
            commitment_beta: 0.25,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.downsample_factor, 2 | 4 | 8) {
            return Err(VqadError::Config(format!(
                "downsample factor must be 2, 4 or 8, got {}",
                self.downsample_factor
            )));
        }
        if self.codebook_size < 2 {
            return Err(VqadError::Config(format!(
                "codebook needs at least 2 vectors, got {}",
                self.codebook_size
            )));
        }
        if self.latent_dim == 0 || self.in_channels == 0 || self.base_width == 0 {
            return Err(VqadError::Config(
                "latent_dim, in_channels and base_width must be positive".into(),
            ));
        }
        if !(self.commitment_beta.is_finite() && self.commitment_beta >= 0.0) {
            return Err(VqadError::Config(format!(
                "commitment beta must be finite and nonnegative, got {}",
                self.commitment_beta
            )));
        }
        Ok(())
    }

    /// Number of stride-2 blocks on each side of the bottleneck.
    pub fn depth(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }
}

/// Parameter gradients, one buffer per model tensor in [`VqVae::tensor_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    fn zeros_like(model: &VqVae<T>) -> Self {
        Self {
            tensors: model.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }
}

/// Name and shape of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqVae<T> {
    config: ModelConfig,
    encoder: Vec<ConvLayer<T>>,
    decoder: Vec<ConvLayer<T>>,
    codebook: Codebook<T>,
}

/// The single-precision model used for training and inference.
pub type ModelState = VqVae<f32>;

struct LayerPlan {
    kind: ConvKind,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    activation: Activation,
}

fn architecture(cfg: &ModelConfig) -> (Vec<LayerPlan>, Vec<LayerPlan>) {
    let depth = cfg.depth();
    let w = cfg.base_width;
    let mut enc = Vec::new();
    for i in 0..depth {
        enc.push(LayerPlan {
            kind: ConvKind::Conv,
            cin: if i == 0 { cfg.in_channels } else { w },
            cout: w,
            k: 4,
            stride: 2,
            pad: 1,
            activation: Activation::Relu,
        });
    }
    enc.push(LayerPlan {
        kind: ConvKind::Conv,
        cin: w,
        cout: cfg.latent_dim,
        k: 1,
        stride: 1,
        pad: 0,
        activation: Activation::Identity,
    });
    let mut dec = vec![LayerPlan {
        kind: ConvKind::Conv,
        cin: cfg.latent_dim,
        cout: w,
        k: 1,
        stride: 1,
        pad: 0,
        activation: Activation::Relu,
    }];
    for i in 0..depth {
        let last = i + 1 == depth;
        dec.push(LayerPlan {
            kind: ConvKind::Transposed,
            cin: w,
            cout: if last { cfg.in_channels } else { w },
            k: 4,
            stride: 2,
            pad: 1,
            activation: if last { Activation::Sigmoid } else { Activation::Relu },
        });
    }
    (enc, dec)
}

fn init_layer<T: Real>(plan: &LayerPlan, rng: &mut ChaCha8Rng) -> ConvLayer<T> {
    let taps = plan.k * plan.k;
    let fan_in = match plan.kind {
        ConvKind::Conv => plan.cin * taps,
        // Each output pixel of a stride-s transposed conv sees k^2 / s^2 taps.
        ConvKind::Transposed => (plan.cin * taps / (plan.stride * plan.stride)).max(1),
    };
    let gain = if plan.activation == Activation::Relu { 6.0 } else { 3.0 };
    let bound = (gain / fan_in as f64).sqrt();
    let weight = (0..plan.cin * plan.cout * taps)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)).unwrap())
        .collect();
    ConvLayer {
        kind: plan.kind,
        cin: plan.cin,
        cout: plan.cout,
        k: plan.k,
        stride: plan.stride,
        pad: plan.pad,
        activation: plan.activation,
        weight,
        bias: vec![T::zero(); plan.cout],
    }
}

/// Forward activations of one tile, kept for backpropagation.
struct Trace<T> {
    input: Vec<T>,
    encoder: Vec<layers::LayerCache<T>>,
    z_e: LatentField<T>,
    quantization: Quantization<T>,
    decoder: Vec<layers::LayerCache<T>>,
}

impl<T: Real> VqVae<T> {
    /// Deterministic initialization from `(config, seed)`. Code vectors are
    /// drawn uniformly from `[-1/M, 1/M]` per coordinate.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (enc_plan, dec_plan) = architecture(&config);
        let encoder = enc_plan.iter().map(|p| init_layer(p, &mut rng)).collect();
        let decoder = dec_plan.iter().map(|p| init_layer(p, &mut rng)).collect();

        let (m, d) = (config.codebook_size, config.latent_dim);
        let bound = 1.0 / m as f64;
        let mut vectors: Vec<T> = Vec::with_capacity(m * d);
        for row in 0..m {
            loop {
                let candidate: Vec<T> = (0..d)
                    .map(|_| T::from_f64(rng.gen_range(-bound..=bound)).unwrap())
                    .collect();
                let duplicate = (0..row).any(|r| vectors[r * d..(r + 1) * d] == candidate[..]);
                if !duplicate {
                    vectors.extend(candidate);
                    break;
                }
            }
        }
        let codebook = Codebook::new(m, d, vectors)?;
        Ok(Self {
            config,
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook<T> {
        &self.codebook
    }

    pub fn encoder_layers(&self) -> &[ConvLayer<T>] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[ConvLayer<T>] {
        &self.decoder
    }

    /// Names and shapes of all parameter tensors, in storage order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        for (prefix, layers) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, l) in layers.iter().enumerate() {
                specs.push(TensorSpec {
                    name: format!("{prefix}.{i}.weight"),
                    shape: l.weight_shape(),
                });
                specs.push(TensorSpec {
                    name: format!("{prefix}.{i}.bias"),
                    shape: vec![l.cout],
                });
            }
        }
        specs.push(TensorSpec {
            name: "codebook".into(),
            shape: vec![self.codebook.size(), self.codebook.dim()],
        });
        specs
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in self.encoder.iter().chain(&self.decoder) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(self.codebook.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(self.codebook.as_mut_slice());
        out
    }

    /// Rebuilds a model from its configuration and tensors in storage order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Vec<T>>) -> Result<Self> {
        let mut model = Self::new(config)?;
        let specs = model.tensor_specs();
        if tensors.len() != specs.len() {
            return Err(VqadError::Shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((dst, src), spec) in model.tensors_mut().into_iter().zip(&tensors).zip(&specs) {
            if src.len() != spec.numel() {
                return Err(VqadError::Shape(format!(
                    "tensor {} needs {} values, got {}",
                    spec.name,
                    spec.numel(),
                    src.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        if model.codebook.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(VqadError::Data("codebook entries must be finite".into()));
        }
        Ok(model)
    }

    /// Converts every parameter to another float type.
    pub fn cast<U: Real>(&self) -> VqVae<U> {
        let conv = |l: &ConvLayer<T>| ConvLayer {
            kind: l.kind,
            cin: l.cin,
            cout: l.cout,
            k: l.k,
            stride: l.stride,
            pad: l.pad,
            activation: l.activation,
            weight: l.weight.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
            bias: l.bias.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        };
        VqVae {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(conv).collect(),
            decoder: self.decoder.iter().map(conv).collect(),
            codebook: Codebook::new(
                self.codebook.size(),
                self.codebook.dim(),
                self.codebook
                    .as_slice()
                    .iter()
                    .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                    .collect(),
            )
            .expect("cast preserves codebook shape"),
        }
    }

    /// Latent grid shape `(h, w)` for a tile of the given size.
    pub fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.config.downsample_factor;
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(VqadError::Shape(format!(
                "tile {height}x{width} is not divisible by downsample factor {f}"
            )));
        }
        Ok((height / f, width / f))
    }

    fn check_tile(&self, tile: &ImageTile) -> Result<(usize, usize)> {
        if tile.channels() != self.config.in_channels {
            return Err(VqadError::Shape(format!(
                "model expects {} channels, tile has {}",
                self.config.in_channels,
                tile.channels()
            )));
        }
        self.latent_shape(tile.height(), tile.width())
    }

    fn run_stack(layers: &[ConvLayer<T>], input: &[T], h: usize, w: usize) -> Vec<layers::LayerCache<T>> {
        let mut caches: Vec<layers::LayerCache<T>> = Vec::with_capacity(layers.len());
        for layer in layers {
            let cache = match caches.last() {
                None => layer.forward(input, h, w),
                Some(prev) => layer.forward(&prev.out, prev.out_h, prev.out_w),
            };
            caches.push(cache);
        }
        caches
    }

    fn tile_values(tile: &ImageTile) -> Vec<T> {
        tile.planar().iter().map(|&v| T::from_f32(v).unwrap()).collect()
    }

    pub fn encode(&self, tile: &ImageTile) -> Result<LatentField<T>> {
        let (h, w) = self.check_tile(tile)?;
        let input = Self::tile_values(tile);
        let mut caches = Self::run_stack(&self.encoder, &input, tile.height(), tile.width());
        let out = caches.pop().expect("encoder has layers").out;
        LatentField::new(h, w, self.config.latent_dim, out)
    }

    /// Decodes an arbitrary latent tensor to raw sigmoid outputs, planar `[C, H, W]`.
    pub fn decode_raw(&self, field: &LatentField<T>) -> Result<Vec<T>> {
        if field.dim() != self.config.latent_dim {
            return Err(VqadError::Shape(format!(
                "decoder expects latent dimension {}, got {}",
                self.config.latent_dim,
                field.dim()
            )));
        }
        let mut caches = Self::run_stack(&self.decoder, field.as_slice(), field.height(), field.width());
        Ok(caches.pop().expect("decoder has layers").out)
    }

    pub fn decode_field(&self, field: &LatentField<T>) -> Result<ImageTile> {
        let raw = self.decode_raw(field)?;
        let f = self.config.downsample_factor;
        Ok(ImageTile::from_planar_clamped(
            field.height() * f,
            field.width() * f,
            self.config.in_channels,
            raw.iter().map(|v| v.to_f32().unwrap_or(0.0)).collect(),
        ))
    }

    pub fn decode(&self, q: &Quantization<T>) -> Result<ImageTile> {
        self.decode_field(&q.quantized)
    }

    pub fn quantize(&self, field: &LatentField<T>) -> Result<Quantization<T>> {
        quantize(field, &self.codebook)
    }

    /// encode, quantize, decode.
    pub fn reconstruct(&self, tile: &ImageTile) -> Result<(ImageTile, Quantization<T>)> {
        let z_e = self.encode(tile)?;
        let q = self.quantize(&z_e)?;
        let recon = self.decode(&q)?;
        Ok((recon, q))
    }

    fn trace(&self, tile: &ImageTile) -> Result<Trace<T>> {
        let (h, w) = self.check_tile(tile)?;
        let input = Self::tile_values(tile);
        let encoder = Self::run_stack(&self.encoder, &input, tile.height(), tile.width());
        let z_e = LatentField::new(h, w, self.config.latent_dim, encoder.last().unwrap().out.clone())?;
        let quantization = self.quantize(&z_e)?;
        let decoder = Self::run_stack(&self.decoder, quantization.quantized.as_slice(), h, w);
        Ok(Trace {
            input,
            encoder,
            z_e,
            quantization,
            decoder,
        })
    }

    /// Loss of one tile and the gradient of `weight * total` w.r.t. every
    /// parameter. The decoder-input gradient is copied straight through the
    /// quantizer onto the encoder output; the codebook only receives
    /// gradient from the codebook term.
    pub fn loss_and_grads_weighted(&self, tile: &ImageTile, weight: T) -> Result<(LossBreakdown, Gradients<T>)> {
        let mut tr = self.trace(tile)?;
        let beta = self.config.commitment_beta;
        let recon = &tr.decoder.last().unwrap().out;
        let rec = loss::mse(tile.planar(), recon);
        let gap = loss::latent_gap(&tr.z_e, &tr.quantization.quantized);
        let breakdown = LossBreakdown::new(rec, gap, gap, beta);

        let mut grads = Gradients::zeros_like(self);
        let n_enc = self.encoder.len();
        let two = T::from_f64(2.0).unwrap();

        let pix_scale = two * weight / T::from_usize(recon.len()).unwrap();
        let mut g: Vec<T> = recon
            .iter()
            .zip(&tr.input)
            .map(|(&r, &x)| (r - x) * pix_scale)
            .collect();
        for (i, layer) in self.decoder.iter().enumerate().rev() {
            let slot = 2 * (n_enc + i);
            let (gw, rest) = grads.tensors[slot..].split_at_mut(1);
            g = layer
                .backward(&tr.decoder[i], &mut g, &mut gw[0], &mut rest[0], true)
                .expect("input gradient requested");
        }

        let cells = tr.z_e.height() * tr.z_e.width();
        let plane = cells;
        let dim = tr.z_e.dim();
        let gap_scale = two * weight / T::from_usize(cells).unwrap();
        let beta_t = T::from_f64(beta).unwrap();
        let z_e = tr.z_e.as_slice();
        let z_q = tr.quantization.quantized.as_slice();
        for (gi, (&e, &q)) in g.iter_mut().zip(z_e.iter().zip(z_q)) {
            *gi += beta_t * gap_scale * (e - q);
        }
        let cb_grad = grads.tensors.last_mut().unwrap();
        for (p, &k) in tr.quantization.indices.iter().enumerate() {
            for d in 0..dim {
                cb_grad[k * dim + d] += gap_scale * (z_q[d * plane + p] - z_e[d * plane + p]);
            }
        }

        for i in (0..n_enc).rev() {
            let slot = 2 * i;
            let (gw, rest) = grads.tensors[slot..].split_at_mut(1);
            let next = self.encoder[i].backward(&tr.encoder[i], &mut g, &mut gw[0], &mut rest[0], i > 0);
            if let Some(next) = next {
                g = next;
            }
        }
        tr.encoder.clear();
        Ok((breakdown, grads))
    }

    pub fn loss_and_grads(&self, tile: &ImageTile) -> Result<(LossBreakdown, Gradients<T>)> {
        self.loss_and_grads_weighted(tile, T::one())
    }

    /// Mean loss and gradient over a batch. Per-tile work runs in parallel;
    /// the reduction is serial in batch order so the result does not depend
    /// on the thread count.
    pub fn batch_loss_and_grads(&self, tiles: &[&ImageTile]) -> Result<(LossBreakdown, Gradients<T>)> {
        if tiles.is_empty() {
            return Err(VqadError::Data("empty batch".into()));
        }
        let weight = T::one() / T::from_usize(tiles.len()).unwrap();
        let per_tile: Vec<Result<(LossBreakdown, Gradients<T>)>> = tiles
            .par_iter()
            .map(|t| self.loss_and_grads_weighted(t, weight))
            .collect();
        let mut losses = Vec::with_capacity(tiles.len());
        let mut total: Option<Gradients<T>> = None;
        for r in per_tile {
            let (l, g) = r?;
            losses.push(l);
            match total.as_mut() {
                None => total = Some(g),
                Some(acc) => acc.add_assign(&g),
            }
        }
        Ok((
            LossBreakdown::mean(&losses, self.config.commitment_beta),
            total.expect("nonempty batch"),
        ))
    }
}

/// Builds a freshly initialized single-precision model.
pub fn init_model(config: ModelConfig) -> Result<ModelState> {
    ModelState::new(config)
}
