use approx::assert_relative_eq;
use sma_dpsgd::data::{gen_synthetic, Dataset};
use sma_dpsgd::model::{evaluate, init_model, per_example_grads, Architecture, ModelState};
use sma_dpsgd::numerics::RandomStream;

fn model(arch: Architecture, seed: u64, d: usize, hidden: usize, classes: usize) -> ModelState {
    init_model(RandomStream::init(seed), arch, d, hidden, classes, &[1.0], &[1.0]).unwrap()
}

fn central_difference(model: &ModelState, x: &[f64], y: usize, group: usize, k: usize, h: f64) -> f64 {
    let mut plus = model.clone();
    let mut minus = model.clone();
    let mut flat = plus.groups[group].flat();
    flat[k] += h;
    plus.groups[group].set_flat(&flat).unwrap();
    flat[k] -= 2.0 * h;
    minus.groups[group].set_flat(&flat).unwrap();
    (plus.loss(x, y).unwrap() - minus.loss(x, y).unwrap()) / (2.0 * h)
}

#[test]
fn gradients_match_finite_differences() {
    let h = 1e-5;
    for (arch, seed) in [(Architecture::LogReg, 3), (Architecture::Mlp1, 4), (Architecture::Mlp1, 5)] {
        let m = model(arch, seed, 4, 5, 3);
        let data = gen_synthetic(RandomStream::data(seed), 6, 4, 3).unwrap();
        for i in 0..data.len() {
            let grads = per_example_grads(&m, data.features(i), data.label(i)).unwrap();
            assert_eq!(grads.len(), arch.num_groups());
            for g in &grads {
                for (k, &analytic) in g.flat.iter().enumerate() {
                    let numeric = central_difference(&m, data.features(i), data.label(i), g.group_id, k, h);
                    let scale = analytic.abs().max(numeric.abs()).max(1e-3);
                    assert!(
                        (analytic - numeric).abs() / scale <= 1e-4,
                        "{arch} group {} coord {k}: {analytic} vs {numeric}",
                        g.group_id
                    );
                }
            }
        }
    }
}

#[test]
fn gradients_are_additive_over_examples() {
    // The gradient of a summed loss equals the sum of per-example gradients.
    let m = model(Architecture::Mlp1, 9, 3, 4, 2);
    let data = gen_synthetic(RandomStream::data(9), 4, 3, 2).unwrap();
    let h = 1e-6;
    let total_loss = |m: &ModelState| -> f64 { (0..data.len()).map(|i| m.loss(data.features(i), data.label(i)).unwrap()).sum() };
    for group in 0..2 {
        let summed: Vec<f64> = (0..data.len())
            .map(|i| per_example_grads(&m, data.features(i), data.label(i)).unwrap()[group].flat.clone())
            .fold(vec![0.0; m.groups[group].param_count()], |acc, g| acc.iter().zip(&g).map(|(a, b)| a + b).collect());
        for k in 0..summed.len() {
            let mut plus = m.clone();
            let mut minus = m.clone();
            let mut flat = m.groups[group].flat();
            flat[k] += h;
            plus.groups[group].set_flat(&flat).unwrap();
            flat[k] -= 2.0 * h;
            minus.groups[group].set_flat(&flat).unwrap();
            let numeric = (total_loss(&plus) - total_loss(&minus)) / (2.0 * h);
            assert_relative_eq!(summed[k], numeric, epsilon = 1e-6, max_relative = 1e-4);
        }
    }
}

#[test]
fn gradient_step_decreases_loss() {
    for arch in [Architecture::LogReg, Architecture::Mlp1] {
        let mut m = model(arch, 11, 5, 6, 3);
        let data = gen_synthetic(RandomStream::data(11), 8, 5, 3).unwrap();
        let (x, y) = (data.features(0), data.label(0));
        let before = m.loss(x, y).unwrap();
        let grads = per_example_grads(&m, x, y).unwrap();
        for g in &grads {
            m.groups[g.group_id].update_with(&g.flat, |p, d| p - 1e-3 * d).unwrap();
        }
        assert!(m.loss(x, y).unwrap() < before, "{arch}");
    }
}

#[test]
fn non_private_logreg_learns_synthetic_blobs() {
    let data = gen_synthetic(RandomStream::data(1), 2000, 2, 2).unwrap();
    let mut m = model(Architecture::LogReg, 1, 2, 1, 2);
    for _ in 0..50 {
        let mut total = vec![0.0; m.groups[0].param_count()];
        for i in 0..data.len() {
            let g = &per_example_grads(&m, data.features(i), data.label(i)).unwrap()[0];
            total.iter_mut().zip(&g.flat).for_each(|(t, v)| *t += v);
        }
        m.groups[0].update_with(&total, |p, d| p - 0.5 * d / 2000.0).unwrap();
    }
    assert!(evaluate(&m, &data).unwrap().accuracy >= 0.95);
}

#[test]
fn random_labels_give_chance_accuracy() {
    let base = gen_synthetic(RandomStream::data(5), 5000, 10, 10).unwrap();
    let mut rng = RandomStream::data(6).generator();
    let labels: Vec<usize> = (0..base.len()).map(|_| rng.below(10) as usize).collect();
    let features: Vec<f64> = (0..base.len()).flat_map(|i| base.features(i).to_vec()).collect();
    let shuffled = Dataset::new(features, labels, 10, 10, "random").unwrap();
    let m = model(Architecture::Mlp1, 5, 10, 8, 10);
    let acc = evaluate(&m, &shuffled).unwrap().accuracy;
    assert!((acc - 0.1).abs() <= 0.03, "{acc}");
}
