use super::Result;
use crate::autodiff::{AutodiffError, BackwardFn, Tensor, Var};
use crate::image_io::Image;
use crate::metrics::ssim_gray_with_grad;
use crate::real::Real;

/// Default weight of the structural term.
pub const PERCEPTUAL_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    /// `1 − SSIM`.
    pub perc: f64,
    pub total: f64,
}

fn parts_and_grad(render: &[f64], target: &Image, weight: f64) -> Result<(LossParts, Vec<f64>)> {
    let n = render.len();
    let (w, h) = (target.width, target.height);
    let inv_n = 1.0 / n as f64;
    let mut l1 = 0.0;
    let mut grad = vec![0.0; n];
    for (i, (&r, &t)) in render.iter().zip(&target.data).enumerate() {
        let d = r - t as f64;
        l1 += d.abs();
        grad[i] = if d > 0.0 {
            inv_n
        } else if d < 0.0 {
            -inv_n
        } else {
            0.0
        };
    }
    l1 *= inv_n;
    let gray: Vec<f64> = render.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
    let (s, gs) = ssim_gray_with_grad(gray, target.gray(), w, h)?;
    for (p, g) in gs.iter().enumerate() {
        for ch in 0..3 {
            grad[3 * p + ch] -= weight * g / 3.0;
        }
    }
    let perc = 1.0 - s;
    Ok((
        LossParts {
            l1,
            perc,
            total: l1 + weight * perc,
        },
        grad,
    ))
}

/// `mean|render − target| + weight·(1 − SSIM)`.
pub fn image_loss(render: &Image, target: &Image, weight: f64) -> Result<LossParts> {
    render.check_same_shape(target)?;
    let r: Vec<f64> = render.data.iter().map(|&v| v as f64).collect();
    Ok(parts_and_grad(&r, target, weight)?.0)
}

/// The same loss as a tape node on an `[H, W, 3]` render.
pub fn image_loss_on_tape<'t, T: Real>(render: Var<'t, T>, target: &Image, weight: f64) -> Result<(Var<'t, T>, LossParts)> {
    let shape = render.shape();
    if shape != [target.height, target.width, 3] {
        return Err(AutodiffError::ShapeMismatch {
            op: "image_loss",
            lhs: shape,
            rhs: vec![target.height, target.width, 3],
        }
        .into());
    }
    let r: Vec<f64> = render.value().data().iter().map(|v| v.as_f64()).collect();
    let (parts, grad) = parts_and_grad(&r, target, weight)?;
    let tape = render.tape();
    let out = tape.custom(&[render], move |_| {
        let g: Vec<T> = grad.iter().map(|&v| T::lit(v)).collect();
        let back: BackwardFn<T> = Box::new(move |up| {
            let u = up.item();
            vec![Tensor::new(shape.clone(), g.iter().map(|&v| v * u).collect()).expect("loss grad")]
        });
        Ok((Tensor::scalar(T::lit(parts.total)), back))
    })?;
    Ok((out, parts))
}
