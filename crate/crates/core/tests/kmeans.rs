use std::f64::consts::TAU;

use proptest::prelude::*;
use tcl_core::numgrad::Tensor;
use tcl_core::pseudo::spherical_kmeans;

fn unit(angle: f64, z: f64) -> Vec<f64> {
    let v = [angle.cos(), angle.sin(), z];
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Best spherical 2-means objective by enumerating every partition: for a
/// fixed partition the optimal centroid is the normalized cluster sum, whose
/// objective is the norm of that sum.
fn brute_force_best(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut best = f64::MIN;
    for mask in 0u32..(1 << n) {
        let mut sums = [vec![0.0; 3], vec![0.0; 3]];
        for (i, p) in points.iter().enumerate() {
            let c = ((mask >> i) & 1) as usize;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        best = best.max(norm(&sums[0]) + norm(&sums[1]));
    }
    best
}

#[test]
fn separated_clusters_reach_the_brute_force_optimum() {
    let mut points = Vec::new();
    for i in 0..5 {
        points.push(unit(0.1 * i as f64, 0.05 * i as f64));
        points.push(unit(2.5 + 0.1 * i as f64, -0.05 * i as f64));
    }
    let features = Tensor::from_rows(&points, 3).unwrap();
    let init = Tensor::from_rows(&[unit(1.0, 0.0), unit(2.0, 0.0)], 3).unwrap();
    let state = spherical_kmeans(&features, &init, 10).unwrap();
    let got = *state.objective_trace.last().unwrap();
    let best = brute_force_best(&points);
    assert!((got - best).abs() < 1e-12, "{got} vs {best}");
    assert_eq!(state.assignment, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
}

proptest! {
    #[test]
    fn objective_is_monotone_and_bounded_by_the_optimum(
        angles in prop::collection::vec((0.0..TAU, -1.0..1.0f64), 2..9),
        a in 0.0..TAU,
        b in 0.0..TAU,
    ) {
        let points: Vec<Vec<f64>> = angles.iter().map(|&(t, z)| unit(t, z)).collect();
        let features = Tensor::from_rows(&points, 3).unwrap();
        let init = Tensor::from_rows(&[unit(a, 0.0), unit(b, 0.3)], 3).unwrap();
        let state = spherical_kmeans(&features, &init, 10).unwrap();
        for w in state.objective_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "trace {:?}", state.objective_trace);
        }
        let best = brute_force_best(&points);
        prop_assert!(*state.objective_trace.last().unwrap() <= best + 1e-12);
        prop_assert_eq!(state.nearest(&features), state.assignment.clone());
        for c in 0..2 {
            prop_assert!((norm(state.centroids.row(c)) - 1.0).abs() < 1e-12);
        }
    }
}
