mod common;

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use ndarray::Array3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use stdplm::config::{BackboneConfig, BackboneKind, ModelConfig, Task};
use stdplm::data::masks::{block_closure_violations, condition_missing, generate_cm, generate_rm, load_mask, missing_fraction, save_mask, MaskMeta};
use stdplm::data::synthetic::random_graph;
use stdplm::data::windows::{first_fraction, make_windows};
use stdplm::data::{metrics, split_6_2_2, NormalizationStats};
use stdplm::losses;
use stdplm::model::{Batch, StdPlm};
use stdplm::nn::ParamStore;
use stdplm::sga::SandglassAttention;
use stdplm::spectral::{normalized_laplacian, spectral_basis};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

fn stochastic(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
    random_stochastic(m, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn adjacency(n: usize, p: f64, seed: u64) -> DMatrix<f64> {
    random_adjacency(n, p, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn structure_loss_matches_loops(m in 1usize..5, n in 2usize..9, seed in any::<u64>()) {
        let s = stochastic(m, n, seed);
        let a = adjacency(n, 0.4, seed ^ 1);
        let got = losses::structure_loss(&s, &a).unwrap();
        prop_assert!((got - structure_loss_loops(&s, &a)).abs() <= 1e-10);
        prop_assert!(got <= 0.0);
    }

    #[test]
    fn complete_graph_identity(m in 1usize..6, n in 2usize..10, seed in any::<u64>()) {
        let s = stochastic(m, n, seed);
        let expected = -(m as f64) + s.component_mul(&s).sum();
        prop_assert!((losses::structure_loss(&s, &complete_graph(n)).unwrap() - expected).abs() <= 1e-9);
    }

    #[test]
    fn dirichlet_matches_reference(m in 1usize..5, n in 2usize..9, seed in any::<u64>()) {
        let s = stochastic(m, n, seed);
        let a = adjacency(n, 0.5, seed ^ 2);
        let alpha = losses::alpha_from_graph(&a).unwrap();
        let got = losses::dirichlet_regularizer(&s, &alpha).unwrap();
        let want = dirichlet_regularizer_ref(&s, alpha.alpha.as_slice());
        prop_assert!((got - want).abs() <= 1e-9, "{} vs {}", got, want);
    }

    #[test]
    fn dirichlet_ignores_uniform_shift(m in 1usize..5, n in 2usize..9, c in -2.0f64..2.0, seed in any::<u64>()) {
        // Adding c to every entry moves each column sum by m·c; softmax is shift-invariant.
        let s = stochastic(m, n, seed);
        let alpha = losses::DirichletParams::uniform(n, 1.7).unwrap();
        let shifted = s.map(|v| v + c);
        let a = losses::dirichlet_regularizer(&s, &alpha).unwrap();
        let b = losses::dirichlet_regularizer(&shifted, &alpha).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn dirichlet_with_unit_alpha_is_constant(m in 1usize..5, n in 2usize..9, seed in any::<u64>()) {
        let alpha = losses::DirichletParams::uniform(n, 1.0).unwrap();
        let a = losses::dirichlet_regularizer(&stochastic(m, n, seed), &alpha).unwrap();
        let b = losses::dirichlet_regularizer(&stochastic(m, n, seed ^ 3), &alpha).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn laplacian_spectrum_and_basis(n in 2usize..20, p in 0.1f64..0.9, k in 1usize..24, seed in any::<u64>()) {
        let a = adjacency(n, p, seed);
        let l = normalized_laplacian(&a).unwrap();
        prop_assert!((&l - l.transpose()).amax() <= 1e-12);
        let basis = spectral_basis(&l, k).unwrap();
        prop_assert_eq!(basis.k_effective, k.min(n));
        prop_assert_eq!(basis.vectors.shape(), (n, k));
        prop_assert!(basis.eigenvalues.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        let keff = basis.k_effective;
        let v = basis.vectors.columns(0, keff);
        let gram = v.transpose() * v;
        prop_assert!((gram - DMatrix::<f64>::identity(keff, keff)).amax() <= 1e-6);
        for j in 0..keff {
            let col = basis.vectors.column(j);
            prop_assert!((-1e-9..=2.0 + 1e-9).contains(&basis.eigenvalues[j]));
            // Sign convention: the first largest-magnitude entry is nonnegative.
            let max = col.amax();
            let pivot = col.iter().position(|x| x.abs() >= max - 1e-12).unwrap();
            prop_assert!(col[pivot] >= 0.0);
        }
        let (mut jac, _) = jacobi_eigen(&l);
        jac.sort_by(|a, b| b.total_cmp(a));
        for j in 0..keff {
            prop_assert!((jac[j] - basis.eigenvalues[j]).abs() <= 1e-8);
        }
    }

    #[test]
    fn laplacian_permutation_equivariance(n in 2usize..15, seed in any::<u64>(), perm_seed in any::<u64>()) {
        let a = adjacency(n, 0.4, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let pa = DMatrix::from_fn(n, n, |i, j| a[(perm[i], perm[j])]);
        let l = normalized_laplacian(&a).unwrap();
        let pl = DMatrix::from_fn(n, n, |i, j| l[(perm[i], perm[j])]);
        prop_assert!((normalized_laplacian(&pa).unwrap() - pl).amax() <= 1e-12);
    }

    #[test]
    fn normalization_round_trip(t in 10usize..40, n in 1usize..5, c in 1usize..3, scale in 0.1f32..1000.0, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array3::from_shape_fn((t, n, c), |_| rng.random_range(-1.0f32..1.0) * scale + 50.0);
        let observed = Array3::from_shape_fn((t, n, c), |_| rng.random_bool(0.8));
        let stats = NormalizationStats::fit(x.view(), observed.view(), 0..t).unwrap();
        let back = stats.denormalize(&stats.normalize(&x));
        for (a, b) in x.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(scale));
        }
        prop_assert!(stats.std.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn rm_mask_rate_and_determinism(t in 50usize..200, n in 1usize..30, rate in 0.0f64..1.0, seed in any::<u64>()) {
        let a = generate_rm((t, n, 1), rate, seed).unwrap();
        prop_assert_eq!(&a, &generate_rm((t, n, 1), rate, seed).unwrap());
        let cells = (t * n) as f64;
        // Binomial: allow five standard deviations.
        let tol = 5.0 * (rate * (1.0 - rate) / cells).sqrt() + 1.0 / cells;
        prop_assert!((missing_fraction(&a) - rate).abs() <= tol);
    }

    #[test]
    fn cm_mask_is_block_closed(n in 4usize..30, t in 9usize..90, rate in 0.05f64..0.95, seed in any::<u64>()) {
        let graph = random_graph(n, 0.1, seed).unwrap();
        let cm = generate_cm(&graph, (t, n, 1), rate, seed).unwrap();
        prop_assert_eq!(block_closure_violations(&cm.mask, &cm.regions), 0);
        // Blocks are dropped until the rate is reached, so overshoot is under
        // one block (3 steps times the largest region).
        let largest = (0..=*cm.regions.iter().max().unwrap()).map(|r| cm.regions.iter().filter(|&&x| x == r).count()).max().unwrap();
        let slack = (3 * largest) as f64 / (t * n) as f64;
        let cells = (t * n) as f64;
        let got = missing_fraction(&cm.mask);
        prop_assert!(got >= (rate * cells).round() / cells - 1e-12 && got <= rate + slack + 1e-12, "{} for rate {}", got, rate);
    }

    #[test]
    fn condition_missing_hides_only_observed(n in 1usize..10, t in 2usize..12, lo in 0.0f64..0.5, width in 0.0f64..0.5, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Array3::from_shape_fn((t, n, 1), |_| rng.random_bool(0.7));
        let (model_in, target) = condition_missing(&input, [lo, lo + width], &mut rng).unwrap();
        let n_obs = input.iter().filter(|v| **v).count();
        let hidden = target.iter().filter(|v| **v).count();
        prop_assert!(hidden as f64 >= (lo * n_obs as f64).round() - 1e-9);
        prop_assert!(hidden as f64 <= ((lo + width) * n_obs as f64).round() + 1e-9);
        for ((i, m), tg) in input.iter().zip(model_in.iter()).zip(target.iter()) {
            // hidden ⊆ observed, and the model never sees a hidden cell
            prop_assert!(!*tg || *i);
            prop_assert!(!(*tg && *m));
            prop_assert_eq!(*m || *tg, *i);
        }
    }

    #[test]
    fn mask_file_round_trip(t in 1usize..40, n in 1usize..20, c in 1usize..3, seed in any::<u64>()) {
        let mask = generate_rm((t, n, c), 0.5, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bits");
        let meta = MaskMeta {
            pattern: stdplm::config::MissingPattern::Rm,
            rate: 0.5,
            seed,
            shape: [t, n, c],
            achieved_rate: missing_fraction(&mask),
            regions: None,
        };
        save_mask(&path, &mask, &meta).unwrap();
        let (back, meta_back) = load_mask(&path).unwrap();
        prop_assert_eq!(back, mask);
        prop_assert_eq!(meta_back, meta);
    }

    #[test]
    fn metric_relations(len in 1usize..200, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..len).map(|_| rng.random_range(-10.0..10.0)).collect();
        let t: Vec<f64> = (0..len).map(|_| rng.random_range(0.5..10.0)).collect();
        let mask = vec![true; len];
        let m = metrics(&y, &t, &mask).unwrap();
        prop_assert!(m.mae <= m.rmse + 1e-12);
        prop_assert!(m.mae >= 0.0 && m.mape >= 0.0);
        let exact = metrics(&t, &t, &mask).unwrap();
        prop_assert_eq!((exact.mae, exact.rmse, exact.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn windows_stay_in_range(start in 0usize..50, len in 0usize..200, window in 1usize..20, horizon in 1usize..20, stride in 1usize..5) {
        let range = start..start + len;
        for task in [Task::Forecast, Task::Impute] {
            let ws = make_windows(range.clone(), task, window, horizon, stride);
            let span = if task == Task::Forecast { window + horizon } else { window };
            let expected = if len >= span { (len - span) / stride + 1 } else { 0 };
            prop_assert_eq!(ws.len(), expected);
            for w in &ws {
                prop_assert!(w.input_start >= range.start);
                prop_assert!(w.input_start + span <= range.end);
            }
            let prefix = first_fraction(&ws, 0.3);
            prop_assert_eq!(prefix.len(), (0.3 * ws.len() as f64).floor() as usize);
            prop_assert_eq!(&prefix[..], &ws[..prefix.len()]);
        }
    }

    #[test]
    fn split_partitions_series(t_total in 30usize..5000, window in 1usize..10) {
        let s = split_6_2_2(t_total, window).unwrap();
        prop_assert_eq!(s.train.start, 0);
        prop_assert_eq!(s.train.end, s.val.start);
        prop_assert_eq!(s.val.end, s.test.start);
        prop_assert_eq!(s.test.end, t_total);
        prop_assert!(s.train.len() >= s.val.len() && s.val.len() <= s.test.len());
    }
}

fn tiny_sga(m: usize, d: usize) -> SandglassAttention {
    let cfg = ModelConfig {
        m,
        d_plm: d,
        d_h: 6,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new(Device::Cpu, DType::F64, ChaCha8Rng::seed_from_u64(0));
    SandglassAttention::new(&mut store, &cfg).unwrap()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let idx = Tensor::from_vec(perm.iter().map(|&i| i as u32).collect::<Vec<_>>(), perm.len(), &Device::Cpu).unwrap();
    t.index_select(&idx, 1).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn precoder_weights_are_row_stochastic(m in 1usize..6, n in 1usize..30, seed in any::<u64>()) {
        let sga = tiny_sga(m, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let z: Vec<f64> = (0..2 * n * 8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = Tensor::from_vec(z, (2, n, 8), &Device::Cpu).unwrap();
        let (_, s) = sga.precode(&z).unwrap();
        let rows = stdplm::sga::row_sums(&s).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        prop_assert!(rows.iter().all(|r| (r - 1.0).abs() <= 1e-12));
        prop_assert!(s.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn sandglass_permutation_behavior(n in 2usize..20, seed in any::<u64>(), perm_seed in any::<u64>()) {
        // Precoder output is invariant to node order and S columns follow the
        // permutation; the decoder permutes its output rows.
        let sga = tiny_sga(3, 8);
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::from_vec((0..n * 8).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>(), (1, n, 8), &Device::Cpu).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let zp = permute_rows(&z, &perm);
        let (h, s) = sga.precode(&z).unwrap();
        let (hp, sp) = sga.precode(&zp).unwrap();
        prop_assert!(max_diff(&h, &hp) <= 1e-10);
        let s_perm = s.index_select(&Tensor::from_vec(perm.iter().map(|&i| i as u32).collect::<Vec<_>>(), n, &Device::Cpu).unwrap(), 2).unwrap();
        prop_assert!(max_diff(&s_perm, &sp) <= 1e-12);
        let out = sga.decode(&z, &h).unwrap();
        let outp = sga.decode(&zp, &h).unwrap();
        prop_assert!(max_diff(&permute_rows(&out, &perm), &outp) <= 1e-10);
    }
}

fn small_model(n: usize, c: usize) -> (StdPlm, ModelConfig) {
    let cfg = ModelConfig {
        window: 4,
        horizon: 2,
        channels: c,
        interval_seconds: 3600,
        d_t: 2,
        d_n: 3,
        k: 4,
        m: 3,
        d_h: 4,
        d_plm: 8,
        layers: 1,
        backbone: BackboneConfig {
            kind: BackboneKind::Scratch,
            heads: 2,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    };
    let graph = random_graph(n, 0.3, n as u64).unwrap();
    (StdPlm::new(&cfg, &graph, &Device::Cpu, DType::F64, 2).unwrap(), cfg)
}

fn batch(cfg: &ModelConfig, x: Tensor, mask: Tensor) -> Batch {
    let b = x.dims()[0];
    Batch {
        x,
        mask,
        tod: Tensor::zeros((b, cfg.window), DType::U32, &Device::Cpu).unwrap(),
        dow: Tensor::zeros((b, cfg.window), DType::U32, &Device::Cpu).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn forward_is_deterministic_and_finite(n in 2usize..12, c in 1usize..3, seed in any::<u64>()) {
        let (model, cfg) = small_model(n, c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let len = 2 * cfg.window * n * c;
        let x = Tensor::from_vec((0..len).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>(), (2, cfg.window, n, c), &Device::Cpu).unwrap();
        let mask = Tensor::from_vec((0..len).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect::<Vec<f64>>(), (2, cfg.window, n, c), &Device::Cpu).unwrap();
        let b = batch(&cfg, x, mask);
        let a = model.forward(&b).unwrap();
        let again = model.forward(&b).unwrap();
        let ya = a.y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        prop_assert!(ya.iter().all(|v| v.is_finite()));
        prop_assert_eq!(ya, again.y.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        prop_assert_eq!(a.y.dims(), &[2, n, cfg.horizon * c]);
    }
}

#[test]
fn node_count_mismatch_requests_rebuild() {
    let (mut model, cfg) = small_model(5, 1);
    let x = Tensor::zeros((1, cfg.window, 7, 1), DType::F64, &Device::Cpu).unwrap();
    let b = batch(&cfg, x.clone(), x.ones_like().unwrap());
    assert!(matches!(model.forward(&b), Err(stdplm::Error::RebuildRequired { expected: 5, got: 7 })));
    model.set_graph(&random_graph(7, 0.3, 1).unwrap()).unwrap();
    assert_eq!(model.forward(&b).unwrap().y.dims(), &[1, 7, 2]);
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn uniform_rows_minimize_structure_loss_on_complete_graph(m in 1usize..5, p in 2usize..9, seed in any::<u64>()) {
        let a = complete_graph(p);
        let uniform = DMatrix::from_element(m, p, 1.0 / p as f64);
        let best = losses::structure_loss(&uniform, &a).unwrap();
        prop_assert!((best + (m * (p - 1)) as f64 / p as f64).abs() <= 1e-12);
        prop_assert!(losses::structure_loss(&stochastic(m, p, seed), &a).unwrap() >= best - 1e-12);
    }

    #[test]
    fn masked_l1_ignores_hidden_values(len in 1usize..40, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let t: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        let scrambled: Vec<f64> = y.iter().zip(&mask).map(|(v, m)| if *m { *v } else { 1e6 }).collect();
        let a = losses::masked_l1(&y, &t, &mask).unwrap();
        let b = losses::masked_l1(&scrambled, &t, &mask).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }
}

fn assert_standardized(t: &Tensor) {
    let d = t.dims()[t.rank() - 1];
    for row in t.flatten_to(t.rank() - 2).unwrap().to_vec2::<f64>().unwrap() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-5, "{mean}");
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }
}

#[test]
fn region_and_node_states_are_standardized_at_init() {
    let sga = tiny_sga(4, 8);
    let z = Tensor::randn(0f64, 3.0, (2, 9, 8), &Device::Cpu).unwrap();
    let (h, _) = sga.precode(&z).unwrap();
    assert_standardized(&h);
    let back = Tensor::randn(0f64, 3.0, (2, 4, 8), &Device::Cpu).unwrap();
    assert_standardized(&sga.decode(&z, &back).unwrap());
}

#[test]
fn one_optimizer_step_moves_region_queries() {
    use candle_nn::Optimizer;
    let (model, cfg) = small_model(6, 1);
    let n = 6;
    let x = Tensor::randn(0f64, 1.0, (2, cfg.window, n, 1), &Device::Cpu).unwrap();
    let b = batch(&cfg, x.clone(), x.ones_like().unwrap());
    let out = model.forward(&b).unwrap();
    let target = Tensor::randn(0f64, 1.0, out.y.dims(), &Device::Cpu).unwrap();
    let (loss, terms) = model.objective(&out, &target, &target.ones_like().unwrap(), 0.1).unwrap();
    assert!(terms.total > 0.0);
    let before = model.sga().queries().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let mut opt = candle_nn::AdamW::new(model.store().trainable_vars(), candle_nn::ParamsAdamW { lr: 1e-2, ..Default::default() }).unwrap();
    opt.backward_step(&loss).unwrap();
    let after = model.sga().queries().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(before.iter().zip(&after).any(|(a, b)| a != b));
}
