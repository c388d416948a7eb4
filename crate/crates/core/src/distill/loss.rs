use crate::error::{Error, Result};
use crate::imaging::{perceptual_dist, perceptual_dist_with_grad, Image};

/// Mean over pairs of `mean|x - y| + perceptual_weight * perceptual_dist(x, y)`,
/// with the gradient of that mean with respect to every render.
///
/// The L1 subgradient at `x = y` is 0. Perceptual terms need sides of at least 16;
/// a weight of 0 skips them and lifts that limit.
pub fn loss_recon(renders: &[Image], targets: &[Image], perceptual_weight: f64) -> Result<(f64, Vec<Image>)> {
    if renders.len() != targets.len() {
        return Err(Error::dims(format!("{} targets", renders.len()), targets.len()));
    }
    if renders.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let pairs = renders.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(renders.len());
    for (x, y) in renders.iter().zip(targets) {
        x.same_dims(y)?;
        let n = x.data().len() as f64;
        let mut l1 = 0.0;
        let mut g: Vec<f64> = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| {
                let d = a - b;
                l1 += d.abs();
                if d > 0.0 {
                    1.0 / (n * pairs)
                } else if d < 0.0 {
                    -1.0 / (n * pairs)
                } else {
                    0.0
                }
            })
            .collect();
        total += l1 / n;
        if perceptual_weight != 0.0 {
            let (p, pg) = perceptual_dist_with_grad(x, y)?;
            total += perceptual_weight * p;
            for (gi, pi) in g.iter_mut().zip(pg.data()) {
                *gi += perceptual_weight * pi / pairs;
            }
        }
        grads.push(Image::from_vec(x.width(), x.height(), g)?);
    }
    Ok((total / pairs, grads))
}

/// Loss value only.
pub fn loss_value(renders: &[Image], targets: &[Image], perceptual_weight: f64) -> Result<f64> {
    if renders.len() != targets.len() {
        return Err(Error::dims(format!("{} targets", renders.len()), targets.len()));
    }
    if renders.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (x, y) in renders.iter().zip(targets) {
        total += x.mean_abs_diff(y)?;
        if perceptual_weight != 0.0 {
            total += perceptual_weight * perceptual_dist(x, y)?;
        }
    }
    Ok(total / renders.len() as f64)
}
