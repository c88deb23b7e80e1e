//! Minimal feed-forward engine: feature maps with exact reverse-mode
//! gradients, and the Adam optimizer.

mod adam;
mod feature_map;

pub use adam::{AdamConfig, AdamState};
pub use feature_map::{FeatureMap, ForwardCache, Gradients, OutputActivation};

use crate::error::Result;
use crate::rng::Rng;

/// Layer widths for an input of dimension `input_dim`: high-dimensional
/// (image-like) inputs get the wide stack.
pub fn default_hidden(input_dim: usize) -> Vec<usize> {
    if input_dim > 16 {
        vec![512, 128]
    } else {
        vec![32, 32]
    }
}

/// `[input, hidden..., output]`.
pub fn layer_dims(input_dim: usize, hidden: &[usize], output_dim: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(output_dim);
    dims
}

pub fn build(
    input_dim: usize,
    hidden: &[usize],
    output_dim: usize,
    output: OutputActivation,
    rng: &mut Rng,
) -> Result<FeatureMap> {
    FeatureMap::new(&layer_dims(input_dim, hidden, output_dim), output, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, Matrix};
    use crate::rng::{stream, Stream};
    use rand::Rng as _;

    fn relu(v: f64) -> f64 {
        v.max(0.0)
    }

    fn rng(seed: u64) -> Rng {
        stream(seed, Stream::Data)
    }

    #[test]
    fn identity_network() {
        let map = FeatureMap::from_layers(
            &[2, 2],
            &[(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0])],
            OutputActivation::Identity,
        )
        .unwrap();
        assert_eq!(map.forward(&[1.0, 2.0]).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_final_layer_gives_zero() {
        let mut map = build(3, &[8, 8], 4, OutputActivation::Identity, &mut rng(1)).unwrap();
        let last = map.num_layers() - 1;
        let start = map.weight_ranges()[last].start;
        let end = map.num_params();
        map.params_mut()[start..end].iter_mut().for_each(|p| *p = 0.0);
        let out = map.forward(&[0.3, -1.0, 2.0]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_matches_hand_forward() {
        let w1 = vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        let b1 = vec![0.1, -0.2, 0.3];
        let w2 = vec![1.0, -2.0, 0.5, 0.3, 0.7, -1.1];
        let b2 = vec![0.05, -0.05];
        let map = FeatureMap::from_layers(
            &[2, 3, 2],
            &[(w1.clone(), b1.clone()), (w2.clone(), b2.clone())],
            OutputActivation::Identity,
        )
        .unwrap();
        let x = [0.8, -0.4];
        let h: Vec<f64> = (0..3)
            .map(|i| relu(w1[2 * i] * x[0] + w1[2 * i + 1] * x[1] + b1[i]))
            .collect();
        let expect: Vec<f64> = (0..2)
            .map(|o| w2[3 * o] * h[0] + w2[3 * o + 1] * h[1] + w2[3 * o + 2] * h[2] + b2[o])
            .collect();
        let got = map.forward(&x).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let map = build(3, &[4], 2, OutputActivation::Identity, &mut rng(2)).unwrap();
        assert!(map.forward(&[1.0]).is_err());
        assert!(map.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn linear_layer_gradient() {
        let map = FeatureMap::from_layers(
            &[3, 2],
            &[(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![0.0, 0.0])],
            OutputActivation::Identity,
        )
        .unwrap();
        let x = [1.5, -2.0, 0.5];
        let (g, gx) = map.backward(&x, &[1.0, 0.0]).unwrap();
        assert_eq!(&g[0..3], &x);
        assert_eq!(&g[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(&g[6..8], &[1.0, 0.0]);
        assert_eq!(gx.as_slice(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let map = build(4, &[6, 5], 3, OutputActivation::Ramp, &mut rng(3)).unwrap();
        let (g, gx) = map.backward(&[0.1, 0.2, -0.3, 0.9], &[0.0; 3]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    fn scalar_objective(map: &FeatureMap, x: &[f64], ct: &[f64]) -> f64 {
        dot(&map.forward(x).unwrap(), ct)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, out) in [(10, OutputActivation::Identity), (11, OutputActivation::Ramp)] {
            let mut r = rng(seed);
            let mut map = build(3, &[5, 4], 3, out, &mut r).unwrap();
            // biases nonzero so ramp outputs sit inside (0, 1) for some units
            for p in map.params_mut().iter_mut() {
                *p += r.random_range(-0.1..0.1);
            }
            let mut checked = 0;
            while checked < 20 {
                let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
                let ct: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
                let cache = map
                    .forward_cached(&Matrix::from_row_major(1, 3, x.clone()).unwrap())
                    .unwrap();
                if cache.kink_margin(out) < 1e-3 {
                    continue;
                }
                checked += 1;
                let (g, gx) = map.backward(&x, &ct).unwrap();
                let h = 1e-5;
                for k in 0..map.num_params() {
                    let mut plus = map.clone();
                    plus.params_mut()[k] += h;
                    let mut minus = map.clone();
                    minus.params_mut()[k] -= h;
                    let fd = (scalar_objective(&plus, &x, &ct) - scalar_objective(&minus, &x, &ct))
                        / (2.0 * h);
                    let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
                    assert!(rel <= 1e-4, "param {k}: fd {fd} analytic {}", g[k]);
                }
                for k in 0..3 {
                    let mut xp = x.clone();
                    xp[k] += h;
                    let mut xm = x.clone();
                    xm[k] -= h;
                    let fd = (scalar_objective(&map, &xp, &ct) - scalar_objective(&map, &xm, &ct))
                        / (2.0 * h);
                    let rel = (fd - gx[k]).abs() / fd.abs().max(gx[k].abs()).max(1e-6);
                    assert!(rel <= 1e-4);
                }
            }
        }
    }

    #[test]
    fn ramp_output_is_bounded() {
        let mut r = rng(12);
        let map = build(2, &[32, 32], 16, OutputActivation::Ramp, &mut r).unwrap();
        let rows: Vec<Vec<f64>> = (0..10_000)
            .map(|_| vec![r.random_range(-50.0..50.0), r.random_range(-50.0..50.0)])
            .collect();
        let out = map.forward_batch(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert!(out.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let mut r = rng(13);
        let map = build(5, &[16, 8], 4, OutputActivation::Identity, &mut r).unwrap();
        let x = [0.1, -0.5, 2.0, 0.0, 1.0];
        let ct = [1.0, -1.0, 0.5, 0.25];
        let a = map.backward(&x, &ct).unwrap();
        let b = map.backward(&x, &ct).unwrap();
        assert_eq!(a, b);
        assert_eq!(map.forward(&x).unwrap(), map.forward(&x).unwrap());
    }

    #[test]
    fn batch_forward_matches_single() {
        let mut r = rng(14);
        let map = build(3, &[7], 2, OutputActivation::Identity, &mut r).unwrap();
        let rows: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let batch = map.forward_batch(&Matrix::from_rows(&rows).unwrap()).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let single = map.forward(row).unwrap();
            for (a, b) in single.iter().zip(batch.row(i)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn initialization_is_bounded_and_seeded() {
        let a = build(10, &[20], 5, OutputActivation::Identity, &mut rng(15)).unwrap();
        let b = build(10, &[20], 5, OutputActivation::Identity, &mut rng(15)).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 30.0).sqrt();
        let (w, bias) = a.layer(0);
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn serialization_roundtrip_is_exact() {
        let mut map = build(3, &[4, 4], 2, OutputActivation::Ramp, &mut rng(16)).unwrap();
        map.set_frozen(true);
        let text = serde_json::to_string_pretty(&map).unwrap();
        let back: FeatureMap = serde_json::from_str(&text).unwrap();
        assert_eq!(back, map);
        assert!(text.contains("\"hidden_activation\": \"relu\""));
        let broken = text.replace("\"relu\"", "\"tanh\"");
        assert!(serde_json::from_str::<FeatureMap>(&broken).is_err());
    }

    #[test]
    fn constant_map_is_frozen_and_constant() {
        let map = FeatureMap::constant(2, 1, 1.0).unwrap();
        assert!(map.is_frozen());
        assert_eq!(map.forward(&[5.0, -3.0]).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut st = AdamState::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 3.0];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert!(st.first_moment().iter().all(|&v| v == 0.0));
        assert!(st.second_moment().iter().all(|&v| v == 0.0));
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_step_size() {
        let mut st = AdamState::new(AdamConfig::default(), 2);
        let mut p = vec![0.0, 0.0];
        st.step(&mut p, &[3.0, -0.01]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-8);
        assert!((p[1] - 1e-3).abs() < 1e-6);
        assert!(st.step(&mut p, &[1.0]).is_err());
    }

    #[test]
    fn adam_matches_hand_trace_on_quadratic() {
        // f(w) = w², w0 = 1, default hyperparameters.
        // t=1: g=2,        m=0.2,          v=0.004,             m̂=2,   v̂=4
        // t=2: g=2w1,      m=0.9m+0.1g,    v=0.999v+0.001g²,    bias corrections 0.19, 0.001999
        let lr = 1e-3;
        let eps: f64 = 1e-8;
        let w1: f64 = 1.0 - lr * 2.0 / (2.0 + eps);
        let g2 = 2.0 * w1;
        let m2 = 0.9 * 0.2 + 0.1 * g2;
        let v2 = 0.999 * 0.004 + 0.001 * g2 * g2;
        let w2 = w1 - lr * (m2 / 0.19) / ((v2 / 0.001999).sqrt() + eps);
        let g3 = 2.0 * w2;
        let m3 = 0.9 * m2 + 0.1 * g3;
        let v3 = 0.999 * v2 + 0.001 * g3 * g3;
        let w3 = w2 - lr * (m3 / 0.271) / ((v3 / 0.002997001).sqrt() + eps);

        let mut st = AdamState::new(AdamConfig::default(), 1);
        let mut w = vec![1.0];
        let mut trace = Vec::new();
        for _ in 0..3 {
            let g = [2.0 * w[0]];
            st.step(&mut w, &g).unwrap();
            trace.push(w[0]);
        }
        for (got, want) in trace.iter().zip([w1, w2, w3]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}
