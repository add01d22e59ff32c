//! Cross-module invariants as property tests.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ormllm::config::RunConfig;
use ormllm::fusion::{self, Tag, Variant};
use ormllm::geometry::{self, CameraIntrinsics, CameraPose, DepthMap, PointCloud};
use ormllm::metrics::{self, EvalCorpus};
use ormllm::pipeline;
use ormllm::scenegen::{self, Predicate};
use ormllm::spatial;
use ormllm::tape::{softmax_rows, Graph};
use ormllm::tensor::{ParamStore, Tensor};
use ormllm::training;

fn small_fusion() -> fusion::FusionConfig {
    fusion::FusionConfig {
        d_token: 16,
        lm_layers: 2,
        lm_heads: 2,
        vocab_size: 12,
        max_seq_len: 64,
        ..Default::default()
    }
}

fn lm_params(seed: u64, cfg: &fusion::FusionConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    fusion::init_lm(&mut store, &mut ormllm::tensor::Init { rng: &mut rng }, cfg);
    store
}

fn pose(yaw: f64, pitch: f64, t: [f64; 3]) -> CameraPose {
    let eye = t;
    let target = [t[0] + yaw.cos() * pitch.cos(), t[1] + yaw.sin() * pitch.cos(), t[2] + pitch.sin()];
    CameraPose::look_at(eye, target).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_positive_and_normalized(rows in prop::collection::vec(prop::collection::vec(-40.0f64..40.0, 5), 1..6)) {
        let mut data: Vec<f64> = rows.concat();
        softmax_rows(&mut data, 5);
        for row in data.chunks(5) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_is_deterministic(seed in 0u64..500) {
        let cfg = small_fusion();
        let mut params = lm_params(seed, &cfg);
        params.set_trainable(|_| true);
        let ids = [4usize, 7, 1, 9, 3];
        let grads = |p: &ParamStore| {
            let mut g = Graph::new();
            let x = fusion::embed_ids(&mut g, p, &ids).unwrap();
            let h = fusion::lm_hidden(&mut g, p, &cfg, x).unwrap();
            let l = fusion::lm_logits(&mut g, p, h).unwrap();
            let loss = fusion::answer_loss(&mut g, l, &[7, 1, 9, 3, 2], &[false, true, true, true, true]).unwrap();
            let gr = g.backward(loss).unwrap();
            (0..p.len()).map(|i| gr.param(i).map(<[f64]>::to_vec)).collect::<Vec<_>>()
        };
        prop_assert_eq!(grads(&params), grads(&params));
    }

    #[test]
    fn world_frame_matches_camera_frame(
        fx in 1.0f64..100.0, fy in 1.0f64..100.0, cx in 0.0f64..32.0, cy in 0.0f64..32.0,
        yaw in -3.1f64..3.1, pitch in -1.2f64..1.2,
        t in prop::array::uniform3(-5.0f64..5.0),
        u in 0.0f64..32.0, v in 0.0f64..32.0, d in 0.1f64..20.0,
    ) {
        let k = CameraIntrinsics::new(fx, fy, cx, cy).unwrap();
        let tp = pose(yaw, pitch, t);
        let world = geometry::back_project_pixel(u, v, d, &k, &tp).unwrap();
        let cam = geometry::back_project_pixel(u, v, d, &k, &CameraPose::IDENTITY).unwrap();
        let back = tp.apply_inverse(&world);
        for i in 0..3 {
            prop_assert!((back[i] - cam[i]).abs() <= 1e-9);
        }
        let (u2, v2, d2) = geometry::project_point(&world, &k, &tp).unwrap();
        prop_assert!((u2 - u).abs() <= 1e-9 && (v2 - v).abs() <= 1e-9 && (d2 - d).abs() <= 1e-9);
    }

    #[test]
    fn point_count_is_valid_pixel_count(vals in prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..20.0], 16)) {
        let depth = DepthMap::new(4, 4, vals).unwrap();
        let k = CameraIntrinsics::new(3.0, 3.0, 2.0, 2.0).unwrap();
        let cloud = geometry::reconstruct_point_cloud(&depth, &k, &CameraPose::IDENTITY);
        prop_assert_eq!(cloud.len(), depth.valid_count());
    }

    #[test]
    fn point_encoder_ignores_order_and_duplicates(
        pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..30),
        perm_seed in any::<u64>(),
        dups in prop::collection::vec(any::<prop::sample::Index>(), 0..10),
    ) {
        use rand::seq::SliceRandom;
        let params = pipeline::init_spatial_params(&RunConfig::default());
        let cloud = |p: Vec<[f64; 3]>| PointCloud { source_pixels: vec![(0, 0); p.len()], points: p };
        let base = spatial::encode_point_cloud(&cloud(pts.clone()), &params).unwrap();
        let mut q = pts.clone();
        q.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        for i in &dups {
            q.push(pts[i.index(pts.len())]);
        }
        let other = spatial::encode_point_cloud(&cloud(q), &params).unwrap();
        prop_assert!(base.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn argmax_ignores_per_pixel_shift(
        logits in prop::collection::vec(-5.0f64..5.0, 4 * 4 * 3),
        shifts in prop::collection::vec(-100.0f64..100.0, 16),
    ) {
        let a = spatial::argmax_map(&logits, 4, 4, 3);
        let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, x)| x + shifts[i / 3]).collect();
        let b = spatial::argmax_map(&shifted, 4, 4, 3);
        // A shift can only matter through rounding at near ties.
        for (i, (x, y)) in a.ids.iter().zip(&b.ids).enumerate() {
            if x != y {
                let row = &logits[i * 3..i * 3 + 3];
                let gap = (row[*x as usize - 1] - row[*y as usize - 1]).abs();
                prop_assert!(gap < 1e-12);
            }
        }
    }

    #[test]
    fn causal_logits_ignore_later_tokens(seed in 0u64..200, p in 0usize..9, noise in -3.0f64..3.0) {
        let cfg = small_fusion();
        let params = lm_params(seed, &cfg);
        let image = Tensor::matrix(2, 16, (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let seq = fusion::build_input_sequence(&image, None, None, &[3, 5, 6, 7, 8, 9, 10, 11], &params, &cfg, Variant::NoDepthSeg).unwrap();
        let base = fusion::lm_forward(&seq, &params, &cfg).unwrap();
        let mut moved = seq.clone();
        let n = moved.len();
        for r in p + 1..n {
            for c in 0..16 {
                moved.tokens.data_mut()[r * 16 + c] += noise * ((r * 16 + c) as f64).cos();
            }
        }
        let out = fusion::lm_forward(&moved, &params, &cfg).unwrap();
        let v = cfg.vocab_size;
        prop_assert_eq!(&base.data()[..(p + 1) * v], &out.data()[..(p + 1) * v]);
    }

    #[test]
    fn contrastive_matches_brute_force(
        n in 1usize..=8,
        seed in any::<u64>(),
        tau in 0.05f64..2.0,
        scales in prop::collection::vec(0.01f64..100.0, 16),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 5;
        let mut row = || (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let v: Vec<Vec<f64>> = (0..n).map(|_| row()).collect();
        let t: Vec<Vec<f64>> = (0..n).map(|_| row()).collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut want = 0.0;
        for i in 0..n {
            let sims: Vec<f64> = (0..n).map(|j| cos(&v[i], &t[j]) / tau).collect();
            let denom: f64 = sims.iter().map(|s| s.exp()).sum();
            want += -(sims[i].exp() / denom).ln();
        }
        want /= n as f64;
        let got = training::contrastive_loss(&v, &t, tau).unwrap();
        prop_assert!((got - want).abs() <= 1e-12, "{} vs {}", got, want);

        let vs: Vec<Vec<f64>> = v.iter().zip(&scales).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect();
        let ts: Vec<Vec<f64>> = t.iter().zip(&scales[8..]).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect();
        let scaled = training::contrastive_loss(&vs, &ts, tau).unwrap();
        prop_assert!((scaled - got).abs() <= 1e-12);
    }

    #[test]
    fn lr_continuous_at_warmup_and_non_negative(total in 2usize..400, warm_frac in 0.0f64..1.0, base in 1e-6f64..1e-1) {
        let warmup = ((total as f64 * warm_frac) as usize).clamp(1, total - 1);
        let mut prev: Option<f64> = None;
        for step in 0..=total {
            let lr = training::lr_at_step(step, total, base, warmup).unwrap();
            prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
            if let Some(p) = prev {
                // No jumps larger than one warmup increment or one cosine step.
                let max_jump = base / warmup as f64 + base * std::f64::consts::PI / (total - warmup) as f64;
                prop_assert!((lr - p).abs() <= max_jump + 1e-15);
            }
            prev = Some(lr);
        }
        let at = training::lr_at_step(warmup, total, base, warmup).unwrap();
        prop_assert!((at - base).abs() <= 1e-12 * base);
    }

    #[test]
    fn scene_relations_are_consistent(seed in any::<u64>()) {
        let scene = scenegen::generate_scene(seed).unwrap();
        let rel = &scene.relations;
        let has = |s, p, o| rel.iter().any(|t| t.subject == s && t.predicate == p && t.object == o);
        for t in rel {
            let converse = match t.predicate {
                Predicate::LeftOf => Some(Predicate::RightOf),
                Predicate::RightOf => Some(Predicate::LeftOf),
                Predicate::InFrontOf => Some(Predicate::Behind),
                Predicate::Behind => Some(Predicate::InFrontOf),
                _ => None,
            };
            if let Some(c) = converse {
                prop_assert!(has(t.object, c, t.subject), "{:?} without converse", t);
            }
            if t.predicate == Predicate::OnTopOf {
                prop_assert!(t.subject != t.object);
                prop_assert!(!has(t.object, Predicate::OnTopOf, t.subject));
            }
        }
        let text = scenegen::template_text(&scene, rel, seed.wrapping_add(1));
        let vocab = scenegen::vocabulary();
        for qa in &text.qa {
            for a in &qa.answers {
                prop_assert!(vocab.encode(a).is_ok(), "answer `{}` outside the vocabulary", a);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sequence_length_and_segment_order(regions in 1usize..6, prompt_len in 1usize..10, v_idx in 0usize..7) {
        let cfg = fusion::FusionConfig { vocab_size: 12, ..small_fusion() };
        let params = lm_params(1, &cfg);
        let variant = Variant::ALL[v_idx];
        let image = Tensor::matrix(4, 16, vec![0.1; 64]).unwrap();
        let seg = Tensor::matrix(regions, 16, vec![0.2; regions * 16]).unwrap();
        let pc = Tensor::matrix(cfg.pc_tokens, 16, vec![0.3; cfg.pc_tokens * 16]).unwrap();
        let prompt: Vec<usize> = (0..prompt_len).map(|i| 3 + i % 9).collect();
        let seq = fusion::build_input_sequence(&image, Some(&seg), Some(&pc), &prompt, &params, &cfg, variant).unwrap();
        let want = 4
            + if variant.seg_tokens() { regions } else { 0 }
            + if variant.pc_tokens() { cfg.pc_tokens } else { 0 }
            + prompt_len;
        prop_assert_eq!(seq.len(), want);
        let order = |t: &Tag| match t { Tag::Image => 0, Tag::Seg => 1, Tag::Pc => 2, Tag::Prompt => 3, Tag::Answer => 4 };
        prop_assert!(seq.tags.windows(2).all(|w| order(&w[0]) <= order(&w[1])));
    }

    #[test]
    fn metrics_bounded_and_order_free(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = common::corpus(&mut rng);
        let build = |its: &[(String, Vec<String>)]| {
            let mut c = EvalCorpus::default();
            for (a, r) in its {
                c.push(a.clone(), r.clone()).unwrap();
            }
            c
        };
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut rng);
        let (a, b) = (build(&items), build(&shuffled));
        let all = |c: &EvalCorpus| [
            metrics::rouge_l(c).unwrap(),
            metrics::meteor_simplified(c).unwrap(),
            metrics::cider(c).unwrap(),
            metrics::em_at_1(c).unwrap(),
        ];
        let (x, y) = (all(&a), all(&b));
        for (i, (p, q)) in x.iter().zip(&y).enumerate() {
            prop_assert!((p - q).abs() <= 1e-9);
            let hi = if i == 2 { 10.0 } else { 100.0 };
            prop_assert!(*p >= 0.0 && *p <= hi + 1e-9);
        }
    }

    #[test]
    fn sgg_equal_sets_give_equal_prf(seed in any::<u64>()) {
        let scene = scenegen::generate_scene(seed).unwrap();
        let answer = scenegen::sgg_answer(&scene.relations);
        let (p, r, f) = metrics::sgg_prf(&metrics::parse_triples(&answer), &scene.relations);
        prop_assert_eq!((p, r, f), (100.0, 100.0, 100.0));
    }
}

#[test]
fn stage_masks_partition_every_tensor() {
    let run = RunConfig::default();
    let fcfg = pipeline::fusion_config(&run, &scenegen::vocabulary()).unwrap();
    let mut all = pipeline::init_lm_params(&run, &fcfg);
    for store in [pipeline::init_spatial_params(&run), pipeline::init_projection_params(&run, &fcfg, Variant::Full)] {
        for (k, v) in store.iter() {
            all.insert(k, v.clone());
        }
    }
    let (s1, s2) = (training::stage_mask(1), training::stage_mask(2));
    for name in all.names() {
        assert!(s1(name) ^ s2(name), "{name} must be trainable in exactly one stage");
    }
}
