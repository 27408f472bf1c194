use serde::{Deserialize, Serialize};

use crate::error::{Result, VqadError};
use crate::model::layers::Real;
use crate::model::quantizer::{LatentField, Quantization};
use crate::raster::ImageTile;

/// The three terms of the VQ-VAE objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean squared reconstruction error over all pixels and channels.
    pub reconstruction: f64,
    /// Mean over latent cells of `|sg(z_e) - z_q|^2`; trains the codebook.
    pub codebook: f64,
    /// Mean over latent cells of `|z_e - sg(z_q)|^2`; trains the encoder.
    pub commitment: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(reconstruction: f64, codebook: f64, commitment: f64, beta: f64) -> Self {
        Self {
            reconstruction,
            codebook,
            commitment,
            total: reconstruction + codebook + beta * commitment,
        }
    }

    pub(crate) fn mean(items: &[LossBreakdown], beta: f64) -> Self {
        let n = items.len().max(1) as f64;
        let rec = items.iter().map(|l| l.reconstruction).sum::<f64>() / n;
        let cb = items.iter().map(|l| l.codebook).sum::<f64>() / n;
        let com = items.iter().map(|l| l.commitment).sum::<f64>() / n;
        Self::new(rec, cb, com, beta)
    }
}

pub(crate) fn mse<T: Real>(target: &[f32], recon: &[T]) -> f64 {
    let n = target.len().max(1) as f64;
    target
        .iter()
        .zip(recon)
        .map(|(&t, r)| {
            let d = r.to_f64().unwrap_or(f64::NAN) - t as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

pub(crate) fn latent_gap<T: Real>(z_e: &LatentField<T>, z_q: &LatentField<T>) -> f64 {
    let cells = (z_e.height() * z_e.width()).max(1) as f64;
    z_e.as_slice()
        .iter()
        .zip(z_q.as_slice())
        .map(|(a, b)| {
            let d = (*a - *b).to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum::<f64>()
        / cells
}

/// Evaluates the objective for one tile. The codebook and commitment terms
/// coincide in value; they differ only in which side receives gradient.
pub fn vqvae_loss<T: Real>(
    tile: &ImageTile,
    recon: &ImageTile,
    z_e: &LatentField<T>,
    q: &Quantization<T>,
    beta: f64,
) -> Result<LossBreakdown> {
    if !tile.same_shape(recon) {
        return Err(VqadError::Shape(format!(
            "tile {:?} vs reconstruction {:?}",
            tile.shape(),
            recon.shape()
        )));
    }
    let zq = &q.quantized;
    if z_e.height() != zq.height() || z_e.width() != zq.width() || z_e.dim() != zq.dim() {
        return Err(VqadError::Shape("latent field and quantization differ in shape".into()));
    }
    let rec = mse(tile.planar(), recon.planar());
    let gap = latent_gap(z_e, zq);
    Ok(LossBreakdown::new(rec, gap, gap, beta))
}
