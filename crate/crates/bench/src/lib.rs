//! Deterministic inputs shared by the criterion benchmarks in `benches/`.

use dtm_core::model::ImageNetwork;
use dtm_core::{Label, NetworkSpec, Tensor, TransformationModel};

/// A smooth, sign-changing volume so ReLU and max-pool see varied inputs.
pub fn volume(extents: [usize; 3]) -> Tensor {
    let [ex, ey, ez] = extents;
    let mut data = Vec::with_capacity(ex * ey * ez);
    for x in 0..ex {
        for y in 0..ey {
            for z in 0..ez {
                let v = (x as f32 * 0.37).sin() + (y as f32 * 0.23).cos() * 0.7 - (z as f32 * 0.51).sin() * 0.4;
                data.push(v);
            }
        }
    }
    Tensor::new(vec![ex, ey, ez], data).expect("extents match data")
}

/// A CI member with the default architecture for `extents`.
pub fn ci_member(extents: [usize; 3], seed: u64) -> TransformationModel {
    let net = ImageNetwork::initialized(NetworkSpec::default_for(extents), seed).expect("default spec is valid");
    TransformationModel::ci(net).expect("network member")
}

/// Points in `clusters` well-separated Gaussian-like groups in `dim` dimensions.
pub fn clustered_features(n: usize, dim: usize, clusters: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let c = i % clusters;
            (0..dim)
                .map(|d| {
                    let center = if d % clusters == c { 8.0 } else { 0.0 };
                    center + ((i * 31 + d * 17) % 13) as f64 / 13.0 - 0.5
                })
                .collect()
        })
        .collect()
}

/// Scores with interleaved classes and ties.
pub fn scored_labels(n: usize) -> (Vec<f64>, Vec<Label>) {
    let scores = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let labels = (0..n)
        .map(|i| Label::from_positive((i * 7919) % 1000 > 400 + (i % 3) * 100))
        .collect();
    (scores, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_well_formed() {
        let v = volume([8, 8, 4]);
        assert_eq!(v.shape(), &[8, 8, 4]);
        assert!(ci_member([8, 8, 4], 1)
            .transformation_value(Some(&v), None)
            .unwrap()
            .is_finite());
        assert_eq!(clustered_features(30, 10, 3).len(), 30);
        let (_, labels) = scored_labels(200);
        assert!(labels.iter().any(|l| l.is_positive()) && labels.iter().any(|l| !l.is_positive()));
    }
}
