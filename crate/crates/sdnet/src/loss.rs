//! Differentiable training losses (L1, SSIM, identity) and evaluation
//! metrics (PSNR, SSIM).
//!
//! SSIM uses the original convention: 11x11 Gaussian window with sigma 1.5,
//! K1=0.01, K2=0.03, dynamic range 1, valid padding.

use crate::error::{Error, Result};
use crate::model::{sdnet_forward, ModelConfig};
use crate::params::BoundParams;
use crate::tensor::{Element, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Coefficients of the composite loss:
/// alpha * L1 + beta * (1 - SSIM) + lambda * identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, beta: 4.0, lambda: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

/// All loss terms of one (rainy, clean) pair, as scalar tensors on the
/// caller's tape.
pub struct LossTerms<E: Element> {
    pub l1: Tensor<E>,
    pub ssim: Tensor<E>,
    pub identity: Tensor<E>,
    pub total: Tensor<E>,
}

fn check_pair<E: Element>(op: &'static str, pred: &Tensor<E>, target: &Tensor<E>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    check_pair("l1_loss", pred, target)?;
    pred.sub(target)?.abs()?.mean_all()
}

/// Normalized 2-D Gaussian kernel, [size, size].
pub fn gaussian_kernel<E: Element>(size: usize, sigma: f64) -> Result<Tensor<E>> {
    if size == 0 || size % 2 == 0 || sigma <= 0.0 {
        return Err(Error::Config(format!("gaussian kernel needs odd size and sigma > 0, got {size}, {sigma}")));
    }
    let half = (size / 2) as f64;
    let mut w = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - half, j as f64 - half);
            w.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    Tensor::from_vec(w.into_iter().map(|v| E::from_f64(v / sum)).collect(), &[size, size])
}

/// Mean structural similarity over all channels, differentiable w.r.t. both
/// images. Inputs are [H, W, 3] with H, W >= 11.
pub fn ssim<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    check_pair("ssim", pred, target)?;
    if pred.ndim() != 3 {
        return Err(Error::shape("ssim", format!("expected [H,W,C], got {:?}", pred.shape())));
    }
    let kernel = gaussian_kernel::<E>(SSIM_WINDOW, SSIM_SIGMA)?;
    let x = pred.permute(&[2, 0, 1])?;
    let y = target.permute(&[2, 0, 1])?;

    let mu_x = x.depthwise_conv2d(&kernel)?;
    let mu_y = y.depthwise_conv2d(&kernel)?;
    let mu_xx = mu_x.mul(&mu_x)?;
    let mu_yy = mu_y.mul(&mu_y)?;
    let mu_xy = mu_x.mul(&mu_y)?;
    let var_x = x.mul(&x)?.depthwise_conv2d(&kernel)?.sub(&mu_xx)?;
    let var_y = y.mul(&y)?.depthwise_conv2d(&kernel)?.sub(&mu_yy)?;
    let cov = x.mul(&y)?.depthwise_conv2d(&kernel)?.sub(&mu_xy)?;

    let c1 = E::from_f64(SSIM_C1);
    let c2 = E::from_f64(SSIM_C2);
    let two = E::from_f64(2.0);
    let num = mu_xy
        .scale(two)?
        .add_scalar(c1)?
        .mul(&cov.scale(two)?.add_scalar(c2)?)?;
    let den = mu_xx
        .add(&mu_yy)?
        .add_scalar(c1)?
        .mul(&var_x.add(&var_y)?.add_scalar(c2)?)?;
    num.div(&den)?.mean_all()
}

/// Peak signal-to-noise ratio in dB against a [0,1] dynamic range. Returns
/// positive infinity for identical images. Metric only, not differentiable.
pub fn psnr<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<f64> {
    check_pair("psnr", pred, target)?;
    let mse: f64 = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(&a, &b)| {
            let d = Element::to_f64(a) - Element::to_f64(b);
            d * d
        })
        .sum::<f64>()
        / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// L1 between the model's output on the clean image and the clean image
/// itself; gradients flow through the extra forward pass.
pub fn identity_loss<E: Element>(
    clean: &Tensor<E>,
    params: &BoundParams<E>,
    cfg: &ModelConfig,
) -> Result<Tensor<E>> {
    let restored = sdnet_forward(clean, params, cfg)?;
    l1_loss(&restored, clean)
}

/// Combine precomputed scalar terms:
/// alpha * l1 + beta * (1 - ssim) + lambda * identity.
pub fn combine_terms<E: Element>(
    l1: &Tensor<E>,
    ssim: &Tensor<E>,
    identity: &Tensor<E>,
    w: &LossWeights,
) -> Result<Tensor<E>> {
    w.validate()?;
    let one_minus_ssim = ssim.neg()?.add_scalar(E::one())?;
    l1.scale(E::from_f64(w.alpha))?
        .add(&one_minus_ssim.scale(E::from_f64(w.beta))?)?
        .add(&identity.scale(E::from_f64(w.lambda))?)
}

/// All loss terms for one pair: `pred` is the model output on the rainy
/// image, `clean_pred` the model output on the clean image.
pub fn total_loss<E: Element>(
    pred: &Tensor<E>,
    clean: &Tensor<E>,
    clean_pred: &Tensor<E>,
    w: &LossWeights,
) -> Result<LossTerms<E>> {
    let l1 = l1_loss(pred, clean)?;
    let ssim = ssim(pred, clean)?;
    let identity = l1_loss(clean_pred, clean)?;
    let total = combine_terms(&l1, &ssim, &identity, w)?;
    Ok(LossTerms { l1, ssim, identity, total })
}
