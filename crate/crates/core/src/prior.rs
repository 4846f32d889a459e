//! Image noise prior: the noise vector that reconstructs the condition frame
//! from a noised frame latent in one backward-diffusion step, plus the
//! intermediate quantities of its derivation for verification.
//!
//! Everything here is a pure function of its inputs. The prior is always
//! computed on the fly from the current noised latents — it is never cached
//! across steps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::tensor::Tensor;

/// Intermediate quantities of the prior derivation for one clip at one `t`:
/// per-frame residual `delta_z = z0_i - z0_1`, its scaled form
/// `c = sqrt(ab)/sqrt(1-ab) * delta_z`, and the prior itself.
#[derive(Debug, Clone)]
pub struct PriorBundle<S: Scalar = f32> {
    pub prior: Tensor<S>,
    pub residual_item: Tensor<S>,
    pub scaled_residual: Tensor<S>,
    pub t: usize,
}

fn check_frames_vs_condition<S: Scalar>(
    op: &'static str,
    frames: &Tensor<S>,
    cond: &Tensor<S>,
) -> Result<()> {
    let fs = frames.shape();
    if fs.len() < 2 || fs[1..] != *cond.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: fs.to_vec(),
            rhs: cond.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per frame `i`: `(z_t_i - sqrt(ab_t) z0_1) / sqrt(1 - ab_t)`.
pub fn image_noise_prior<S: Scalar>(
    z_t: &Tensor<S>,
    z0_1: &Tensor<S>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<S>> {
    s.check_t(t)?;
    check_frames_vs_condition("image_noise_prior", z_t, z0_1)?;
    let ab = s.alpha_bar(t);
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let frame_elems = z0_1.numel();
    let zd = z_t.data();
    let cd = z0_1.data();
    let data = zd
        .iter()
        .enumerate()
        .map(|(i, &z)| S::from_f64((z.to_f64() - ca * cd[i % frame_elems].to_f64()) / cb))
        .collect();
    drop(zd);
    drop(cd);
    Ok(Tensor::new_raw(z_t.shape().to_vec(), data, false))
}

/// Inverts the prior on one frame: `(z_t_i - sqrt(1-ab_t) prior_i) / sqrt(ab_t)`,
/// the condition latent up to floating-point error.
pub fn reconstruct_first_frame<S: Scalar>(
    z_t_i: &Tensor<S>,
    prior_i: &Tensor<S>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<S>> {
    s.check_t(t)?;
    if z_t_i.shape() != prior_i.shape() {
        return Err(Error::ShapeMismatch {
            op: "reconstruct_first_frame",
            lhs: z_t_i.shape().to_vec(),
            rhs: prior_i.shape().to_vec(),
        });
    }
    let ab = s.alpha_bar(t);
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let zd = z_t_i.data();
    let pd = prior_i.data();
    let data = zd
        .iter()
        .zip(pd.iter())
        .map(|(&z, &p)| S::from_f64((z.to_f64() - cb * p.to_f64()) / ca))
        .collect();
    drop(zd);
    drop(pd);
    Ok(Tensor::new_raw(z_t_i.shape().to_vec(), data, false))
}

/// Training-time decomposition from clean latents. When `eps` is provided the
/// bundle's prior is the true prior of the forward-diffused frames; with
/// `eps = None` the zero-noise convention applies and the prior equals the
/// scaled residual.
pub fn decompose<S: Scalar>(
    z0: &Tensor<S>,
    z0_1: &Tensor<S>,
    t: usize,
    s: &NoiseSchedule,
    eps: Option<&Tensor<S>>,
) -> Result<PriorBundle<S>> {
    s.check_t(t)?;
    check_frames_vs_condition("decompose", z0, z0_1)?;
    let ab = s.alpha_bar(t);
    let ratio = ab.sqrt() / (1.0 - ab).sqrt();
    let frame_elems = z0_1.numel();
    let zd = z0.data();
    let cd = z0_1.data();
    let mut delta = Vec::with_capacity(zd.len());
    let mut scaled = Vec::with_capacity(zd.len());
    for (i, &z) in zd.iter().enumerate() {
        let d = z.to_f64() - cd[i % frame_elems].to_f64();
        delta.push(S::from_f64(d));
        scaled.push(S::from_f64(ratio * d));
    }
    drop(zd);
    drop(cd);
    let shape = z0.shape().to_vec();
    let residual_item = Tensor::new_raw(shape.clone(), delta, false);
    let scaled_residual = Tensor::new_raw(shape, scaled, false);
    let prior = match eps {
        Some(eps) => {
            let z_t = forward_diffuse(z0, t, eps, s)?;
            image_noise_prior(&z_t, z0_1, t, s)?
        }
        None => scaled_residual.clone(),
    };
    Ok(PriorBundle { prior, residual_item, scaled_residual, t })
}
