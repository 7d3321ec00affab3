use proptest::prelude::*;

use pumkit::data::{build_vocabulary, generate_scene, GroupSpec, SceneParams};
use pumkit::layers::{classify, fuse, ClassifierParams, FusionParams, LinearParams};
use pumkit::metrics::{oracle_recall, recall_at_k, PredictionRun, RankedPrediction};
use pumkit::pum::{differential_entropy, predict_averaged, reparameterize_with, GaussianParams};
use pumkit::train::{adam_step, AdamConfig, AdamState};
use pumkit::{RngState, Tape, Tensor};

fn vector(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(64)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn softmax_is_a_distribution(x in vector(1..12)) {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(x).unwrap());
        let s = tape.softmax(a).unwrap();
        let p = tape.value(s).data();
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_centers(x in vector(2..12)) {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(x).unwrap());
        let n = tape.layer_norm(a).unwrap();
        let y = tape.value(n).data();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        let var = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        prop_assert!(var <= 1.0 + 1e-9);
    }

    #[test]
    fn gradient_of_sum_is_additive(x in vector(1..8), seed in any::<u64>()) {
        // d/dx [f(x) + g(x)] = f'(x) + g'(x), recorded on separate tapes.
        let mut rng = RngState::seed(seed);
        let w = Tensor::vector(rng.normals(x.len())).unwrap();
        let x = Tensor::vector(x).unwrap();
        let grad = |both: bool, first: bool| {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let wi = t.leaf(w.clone());
            let f = { let s = t.sigmoid(xi).unwrap(); let m = t.mul(s, wi).unwrap(); t.sum(m).unwrap() };
            let g = { let s = t.square(xi).unwrap(); t.sum(s).unwrap() };
            let root = match (both, first) {
                (true, _) => t.add(f, g).unwrap(),
                (false, true) => f,
                (false, false) => g,
            };
            t.backward(root, &[xi]).unwrap().get(xi).unwrap().clone()
        };
        let total = grad(true, true);
        let (a, b) = (grad(false, true), grad(false, false));
        for i in 0..x.len() {
            prop_assert!((total.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn averaged_prediction_sums_to_one(seed in any::<u64>(), k in 1usize..16, d in 1usize..6, c in 2usize..8) {
        let mut rng = RngState::seed(seed);
        let g = GaussianParams::new(
            Tensor::vector(rng.normals(d)).unwrap(),
            Tensor::vector((0..d).map(|_| rng.uniform_range(1e-3, 3.0)).collect()).unwrap(),
        ).unwrap();
        let cls = ClassifierParams::init(d, c, &mut rng);
        let p = predict_averaged(&g, &cls, k, &mut rng).unwrap();
        prop_assert_eq!(p.len(), c);
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn entropy_shifts_by_half_log_of_scale(seed in any::<u64>(), d in 1usize..10, s in 0.01f64..100.0) {
        let mut rng = RngState::seed(seed);
        let var: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.1, 4.0)).collect();
        let mu = Tensor::zeros(&[d]);
        let g = GaussianParams::new(mu.clone(), Tensor::vector(var.clone()).unwrap()).unwrap();
        let scaled = GaussianParams::new(mu, Tensor::vector(var.iter().map(|v| v * s).collect()).unwrap()).unwrap();
        let diff = differential_entropy(&scaled) - differential_entropy(&g);
        prop_assert!((diff - 0.5 * d as f64 * s.ln()).abs() < 1e-9);
    }

    #[test]
    fn reparameterization_is_affine_in_noise(mu in vector(1..6), seed in any::<u64>()) {
        let d = mu.len();
        let mut rng = RngState::seed(seed);
        let var: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.1, 4.0)).collect();
        let g = GaussianParams::new(Tensor::vector(mu.clone()).unwrap(), Tensor::vector(var.clone()).unwrap()).unwrap();
        let eps = rng.normals(d);
        let z = reparameterize_with(&g, &eps);
        prop_assert!(reparameterize_with(&g, &vec![0.0; d]).data() == &mu[..]);
        for i in 0..d {
            prop_assert!((z.data()[i] - mu[i] - eps[i] * var[i].sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_of_a_vector_with_itself_under_equal_maps(x in vector(1..6)) {
        // Wx = Wy = I gives ReLU(2x) - 0.
        let d = x.len();
        let p = FusionParams::new(LinearParams::identity(d, false), LinearParams::identity(d, false)).unwrap();
        let t = Tensor::vector(x.clone()).unwrap();
        let out = fuse(&t, &t, &p).unwrap();
        for i in 0..d {
            prop_assert_eq!(out.data()[i], (2.0 * x[i]).max(0.0));
        }
    }

    #[test]
    fn classifier_outputs_a_distribution(z in vector(1..6), seed in any::<u64>(), c in 2usize..10) {
        let mut rng = RngState::seed(seed);
        let cls = ClassifierParams::init(z.len(), c, &mut rng);
        let p = classify(&Tensor::vector(z).unwrap(), &cls).unwrap();
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_is_sorted_with_low_index_ties(scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 1.0]), 1..10)) {
        let r = RankedPrediction::from_scores(&scores, None);
        prop_assert_eq!(r.ranking().len(), scores.len());
        for w in r.ranking().windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn oracle_recall_grows_with_runs(seed in any::<u64>(), m in 1usize..6, k in 1usize..3) {
        let mut rng = RngState::seed(seed);
        let c = 5;
        let gts: Vec<Vec<usize>> = (0..4).map(|_| (0..3).map(|_| rng.below(c)).collect()).collect();
        let runs: Vec<PredictionRun> = (0..m)
            .map(|run_index| PredictionRun {
                run_index,
                images: gts
                    .iter()
                    .map(|g| g.iter().map(|_| RankedPrediction::from_scores(&rng.normals(c), None)).collect())
                    .collect(),
            })
            .collect();
        let mut prev = 0.0;
        for upto in 1..=m {
            let r = oracle_recall(&runs[..upto], &gts, k).unwrap().unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(
            oracle_recall(&runs[..1], &gts, k).unwrap().unwrap().to_bits(),
            recall_at_k(&runs[0], &gts, k).unwrap().unwrap().to_bits()
        );
    }

    #[test]
    fn observed_label_is_plausible(seed in any::<u64>(), c in 6usize..20, zipf in 0.2f64..2.0) {
        let mut rng = RngState::seed(seed);
        let groups = GroupSpec { synonymy: 1, hyponymy: 1, multiview: 1 };
        let vocab = build_vocabulary(c, zipf, groups, &mut rng).unwrap();
        let w = &vocab.frequency_weights;
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|p| p[0] >= p[1]));
        let params = SceneParams { n_objects: 3, relations: 4, feature_dim: 4, noise_scale: 0.5 };
        let scene = generate_scene(&vocab, &params, &mut rng).unwrap();
        scene.validate().unwrap();
        for r in &scene.relations {
            prop_assert!(r.plausible.contains(&r.observed));
            prop_assert!(scene.union_features.contains_key(&(r.subject, r.object)));
        }
    }

    #[test]
    fn adam_moves_against_the_gradient(g in vector(1..6)) {
        let mut p = Tensor::zeros(&[g.len()]);
        let grads = vec![Tensor::vector(g.clone()).unwrap()];
        let mut state = AdamState::new(&[&p]);
        let hyper = AdamConfig::default();
        adam_step(&mut [&mut p], &grads, &mut state, &hyper).unwrap();
        for (w, gi) in p.data().iter().zip(&g) {
            if gi.abs() > 1e-6 {
                prop_assert!(w.signum() == -gi.signum());
                prop_assert!(w.abs() <= hyper.lr * (1.0 + 1e-6));
            }
        }
    }
}
