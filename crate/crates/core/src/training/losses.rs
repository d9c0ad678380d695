//! Adversarial objectives and the interpolant gradient penalty.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::{Float, Tensor};

/// Probability clamp for the log-likelihood objective.
pub const PROB_CLAMP: f64 = 1e-7;

/// `eps * a + (1 - eps) * b` with one `eps` per batch sample.
pub fn interpolate<T: Float>(a: &Tensor<T>, b: &Tensor<T>, eps: &[f64]) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.shape().first() != Some(&eps.len()) {
        return Err(Error::shape(
            "interpolate",
            format!("{:?} vs {:?} with {} factors", a.shape(), b.shape(), eps.len()),
        ));
    }
    if eps.iter().any(|e| !(0.0..=1.0).contains(e)) {
        return Err(Error::Config(format!("interpolation factors outside [0, 1]: {eps:?}")));
    }
    let per = a.len() / eps.len().max(1);
    let mut out = a.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let e = T::of(eps[i / per]);
        *v = e * *v + (T::one() - e) * b.data()[i];
    }
    Ok(out)
}

fn nonempty<T: Float>(op: &'static str, v: &Var<'_, T>) -> Result<()> {
    if v.value().is_empty() {
        Err(Error::shape(op, "empty batch"))
    } else {
        Ok(())
    }
}

/// `mean(fake) - mean(real)`.
pub fn critic_loss<'g, T: Float>(fake: Var<'g, T>, real: Var<'g, T>) -> Result<Var<'g, T>> {
    nonempty("critic_loss", &fake)?;
    if fake.shape() != real.shape() {
        return Err(Error::shape(
            "critic_loss",
            format!("{:?} vs {:?}", fake.shape(), real.shape()),
        ));
    }
    Ok(fake.mean() - real.mean())
}

/// `-mean(fake)`.
pub fn generator_loss<'g, T: Float>(fake: Var<'g, T>) -> Result<Var<'g, T>> {
    nonempty("generator_loss", &fake)?;
    Ok(fake.mean().neg())
}

/// Log-likelihood objectives on probabilities: the discriminator's
/// `-mean ln d_real - mean ln(1 - d_fake)` and the non-saturating generator
/// loss `-mean ln d_fake`.
pub fn cgan_losses<'g, T: Float>(d_real: Var<'g, T>, d_fake: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
    nonempty("cgan_losses", &d_real)?;
    nonempty("cgan_losses", &d_fake)?;
    let (lo, hi) = (T::of(PROB_CLAMP), T::of(1.0 - PROB_CLAMP));
    let real = d_real.clamp(lo, hi);
    let fake = d_fake.clamp(lo, hi);
    let d_loss = real.ln().mean().neg() - fake.affine(-T::one(), T::one()).ln().mean();
    Ok((d_loss, cgan_generator_loss(d_fake)?))
}

/// Non-saturating generator loss `-mean ln d_fake`.
pub fn cgan_generator_loss<'g, T: Float>(d_fake: Var<'g, T>) -> Result<Var<'g, T>> {
    nonempty("cgan_generator_loss", &d_fake)?;
    Ok(d_fake
        .clamp(T::of(PROB_CLAMP), T::of(1.0 - PROB_CLAMP))
        .ln()
        .mean()
        .neg())
}

/// `lambda * mean_n (||grad_x D(x_n)||_2 - 1)^2` where `x_hat` is a graph leaf
/// that requires gradients and `score` maps it to one score per sample. The
/// input gradient is built with `create_graph`, so the penalty is itself
/// differentiable with respect to the critic parameters.
pub fn gradient_penalty<'g, T, F>(score: F, x_hat: Var<'g, T>, lambda: f64) -> Result<Var<'g, T>>
where
    T: Float,
    F: FnOnce(Var<'g, T>) -> Result<Var<'g, T>>,
{
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda_gp {lambda} is negative")));
    }
    let g = x_hat.graph();
    let scores = score(x_hat)?;
    let grad = g.grad(scores.sum(), &[x_hat], true)[0];
    if !grad.value().all_finite() {
        return Err(Error::NonFinite("critic input gradient".into()));
    }
    let norms = (grad * grad).sum_per_sample().sqrt();
    let gap = norms.affine(T::one(), -T::one());
    Ok((gap * gap).mean().scale(T::of(lambda)))
}
