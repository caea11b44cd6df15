//! Corner-aligned trilinear resampling of 3D maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upsamples a rank-3 map so that its corner voxels land on the target's corners.
pub fn trilinear_upsample(map: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    if map.rank() != 3 {
        return Err(Error::Tensor(format!(
            "upsampling needs a 3D map, got shape {:?}",
            map.shape()
        )));
    }
    let src = [map.shape()[0], map.shape()[1], map.shape()[2]];
    if (0..3).any(|a| target[a] < src[a]) {
        return Err(Error::Tensor(format!(
            "target {target:?} is smaller than source {src:?}"
        )));
    }
    let axes: Vec<Vec<(usize, usize, f32)>> = (0..3).map(|a| sample_axis(src[a], target[a])).collect();
    let d = map.data();
    let idx = |x: usize, y: usize, z: usize| (x * src[1] + y) * src[2] + z;
    let mut out = Vec::with_capacity(target.iter().product());
    for &(x0, x1, fx) in &axes[0] {
        for &(y0, y1, fy) in &axes[1] {
            for &(z0, z1, fz) in &axes[2] {
                let c00 = lerp(d[idx(x0, y0, z0)], d[idx(x0, y0, z1)], fz);
                let c01 = lerp(d[idx(x0, y1, z0)], d[idx(x0, y1, z1)], fz);
                let c10 = lerp(d[idx(x1, y0, z0)], d[idx(x1, y0, z1)], fz);
                let c11 = lerp(d[idx(x1, y1, z0)], d[idx(x1, y1, z1)], fz);
                out.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fx));
            }
        }
    }
    Ok(Tensor::from_raw(target.to_vec(), out))
}

/// For each target index: the two bracketing source indices and the fraction between them.
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 2);
            (lo, lo + 1, (pos - lo as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // exact at both ends and bounded by [min(a,b), max(a,b)]
    if a == b {
        a
    } else {
        (a * (1.0 - t) + b * t).clamp(a.min(b), a.max(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_stays_constant() {
        let m = Tensor::filled(&[3, 2, 2], 0.4);
        let up = trilinear_upsample(&m, [9, 5, 7]).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn cube_center_is_corner_average() {
        let m = Tensor::new(vec![2, 2, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = trilinear_upsample(&m, [3, 3, 3]).unwrap();
        assert_eq!(up.get(&[1, 1, 1]), 0.5);
        assert_eq!(up.get(&[0, 0, 0]), 0.0);
        assert_eq!(up.get(&[2, 2, 2]), 1.0);
    }

    #[test]
    fn rejects_shrinking_and_wrong_rank() {
        let m = Tensor::zeros(&[4, 4, 4]);
        assert!(trilinear_upsample(&m, [3, 4, 4]).is_err());
        assert!(trilinear_upsample(&Tensor::zeros(&[4, 4]), [4, 4, 4]).is_err());
    }
}
