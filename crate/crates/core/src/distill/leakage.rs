use crate::error::{Error, Result};
use crate::field::VoxelField;

/// Ground-truth density below which a node counts as empty.
pub const LEAKAGE_SUPPORT_SIGMA: f64 = 1e-3;
/// Nodes within this many steps (Chebyshev) of the support are not scored.
pub const LEAKAGE_DILATION: usize = 2;

/// Mean density of `field` over nodes that are empty in `gt` and lie outside the
/// dilated support. The mask is built on the ground-truth lattice and looked up by
/// nearest node when the resolutions differ. Returns 0 when no node qualifies.
pub fn leakage_metric(field: &VoxelField, gt: &VoxelField) -> Result<f64> {
    let rg = gt.resolution();
    let rf = field.resolution();
    if rg < 2 || rf < 2 {
        return Err(Error::InvalidParameter("leakage needs resolutions >= 2".into()));
    }
    let gt_sigma = gt.densities();
    let support: Vec<bool> = gt_sigma.iter().map(|&s| s >= LEAKAGE_SUPPORT_SIGMA).collect();
    let dilated = dilate(&support, rg, LEAKAGE_DILATION);

    let sigma = field.densities();
    let map = |i: usize| -> usize { ((i * (rg - 1)) as f64 / (rf - 1) as f64).round() as usize };
    let mut sum = 0.0;
    let mut count = 0usize;
    for z in 0..rf {
        for y in 0..rf {
            for x in 0..rf {
                let g = gt.node_index(map(x), map(y), map(z));
                if !dilated[g] {
                    sum += sigma[field.node_index(x, y, z)];
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Separable max-filter of a cubic mask with half-width `radius`.
fn dilate(mask: &[bool], r: usize, radius: usize) -> Vec<bool> {
    let idx = |x: usize, y: usize, z: usize| (z * r + y) * r + x;
    let mut cur = mask.to_vec();
    for axis in 0..3 {
        let mut next = vec![false; cur.len()];
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    let p = [x, y, z];
                    let lo = p[axis].saturating_sub(radius);
                    let hi = (p[axis] + radius).min(r - 1);
                    next[idx(x, y, z)] = (lo..=hi).any(|v| {
                        let mut q = p;
                        q[axis] = v;
                        cur[idx(q[0], q[1], q[2])]
                    });
                }
            }
        }
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_reaches_chebyshev_neighbors() {
        let r = 7;
        let mut m = vec![false; r * r * r];
        m[(3 * r + 3) * r + 3] = true;
        let d = dilate(&m, r, 2);
        let count = d.iter().filter(|&&b| b).count();
        assert_eq!(count, 125);
        assert!(d[(1 * r + 5) * r + 1]);
        assert!(!d[(0 * r + 3) * r + 3]);
    }
}
