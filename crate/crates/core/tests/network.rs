use movin_core::autodiff::Tape;
use movin_core::dataset::TrainingExample;
use movin_core::lidar::PointCloudHistory;
use movin_core::network::{sample_latent, stack_local, ModelConfig, MovinModel, SetAbstraction, LOG_SIGMA_MIN};
use movin_core::seed;
use movin_core::skeleton::{PoseFeatures, Skeleton};
use movin_core::tensor::Tensor;
use movin_core::training::probe_batch;
use nalgebra::Vector3;
use rand::Rng;

fn random_history(points: usize, seed: u64) -> PointCloudHistory {
    let mut rng = seed::rng(seed, &[]);
    let clouds = (0..5)
        .map(|_| {
            (0..points).map(|_| [rng.random_range(-0.5f32..0.5), rng.random_range(0.0f32..1.8), rng.random_range(2.5f32..3.5)]).collect()
        })
        .collect();
    PointCloudHistory::from_clouds(clouds).unwrap()
}

fn default_model() -> MovinModel {
    MovinModel::new(ModelConfig::default(), Skeleton::default_humanoid(), 11).unwrap()
}

fn rest() -> PoseFeatures {
    PoseFeatures::rest(&Skeleton::default_humanoid(), Vector3::new(0.0, 0.9, 3.0), std::f64::consts::PI)
}

fn permuted(history: &PointCloudHistory, frame: usize, seed: u64) -> PointCloudHistory {
    let mut clouds: Vec<Vec<[f32; 3]>> = (0..history.frames()).map(|k| history.cloud(k).to_vec()).collect();
    let mut rng = seed::rng(seed, &[]);
    let n = clouds[frame].len();
    for i in (1..n).rev() {
        clouds[frame].swap(i, rng.random_range(0..=i));
    }
    PointCloudHistory::from_clouds(clouds).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn default_shapes() {
    let m = default_model();
    let h = random_history(256, 1);
    let p = m.embed_pointcloud(&h).unwrap();
    assert_eq!(p.shape(), (5, 64));
    let pose = rest();
    let fx = m.embed_local_pose(&pose.local).unwrap();
    let fg = m.embed_global_pose(&pose.global).unwrap();
    assert_eq!((fx.len(), fg.len()), (64, 64));
    assert_eq!(m.config().sequence_len(), 11);
    let (mu, ls) = m.encode_posterior(&p, Some((&fx, &fg)), (&fx, &fg)).unwrap();
    assert_eq!((mu.len(), ls.len()), (64, 64));
    let (d, gate) = m.decode_moe(&mu, &p, Some((&fx, &fg))).unwrap();
    assert_eq!(d.len(), 128);
    assert_eq!(gate.len(), 8);
    assert!(gate.iter().all(|&w| (0.0..=1.0).contains(&w)));
    assert!((gate.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let out = m.expand_features(&d).unwrap();
    assert_eq!(out.local.len(), 21);
    assert_eq!(out.to_vec().len(), 17 + 21 * 15);
    assert!(out.global.contacts.iter().all(|c| (0.0..=1.0).contains(c)));
}

#[test]
fn shape_mismatches_are_errors() {
    let m = default_model();
    assert!(m.embed_pointcloud(&random_history(100, 1)).is_err());
    let small = PoseFeatures::rest(&Skeleton::default_humanoid(), Vector3::zeros(), 0.0);
    let mut bad = small.local.clone();
    bad.joints.pop();
    assert!(m.embed_local_pose(&bad).is_err());
    assert!(m.decode_moe(&[0.0; 10], &Tensor::zeros(5, 64), None).is_err());
    assert!(m.expand_features(&[0.0; 64]).is_err());
    let mut skel = ModelConfig::default();
    skel.n_joints = 20;
    assert!(MovinModel::new(skel, Skeleton::default_humanoid(), 0).is_err());
}

#[test]
fn point_embedding_ignores_point_order() {
    let m = default_model();
    let h = random_history(256, 2);
    let base = m.embed_pointcloud(&h).unwrap();
    for frame in [0, 3] {
        let p = m.embed_pointcloud(&permuted(&h, frame, 9 + frame as u64)).unwrap();
        assert!(max_diff(base.data(), p.data()) <= 1e-5);
    }

    let tiny = ModelConfig {
        points: 32,
        set_abstraction: vec![
            SetAbstraction { centroids: Some(8), radius: 0.4, group: 6 },
            SetAbstraction { centroids: None, radius: f64::INFINITY, group: 0 },
        ],
        ..ModelConfig::reduced(21)
    };
    let m = MovinModel::new(tiny, Skeleton::default_humanoid(), 3).unwrap();
    let h = random_history(32, 3);
    let base = m.embed_pointcloud(&h).unwrap();
    let p = m.embed_pointcloud(&permuted(&h, 1, 4)).unwrap();
    assert!(max_diff(base.data(), p.data()) <= 1e-5);
}

#[test]
fn zero_cloud_is_finite() {
    let m = default_model();
    let zeros = PointCloudHistory::from_clouds(vec![vec![[0.0; 3]; 256]; 5]).unwrap();
    assert!(m.embed_pointcloud(&zeros).unwrap().is_finite());
}

#[test]
fn local_embedding_is_linear_without_biases() {
    let mut m = default_model();
    for p in m.params_mut().iter_mut() {
        if p.name.starts_with("local.") && p.name.ends_with(".bias") {
            p.value.data_mut().fill(0.0);
        }
    }
    let mut zero = rest().local;
    for j in &mut zero.joints {
        j.pos = Vector3::zeros();
        j.rot = movin_core::rotation::Rot6D([0.0; 6]);
        j.linvel = Vector3::zeros();
        j.angvel = Vector3::zeros();
    }
    assert!(m.embed_local_pose(&zero).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn hand_change_stays_in_its_body_part() {
    let m = default_model();
    let skel = Skeleton::default_humanoid();
    let hand = skel.index_of("LeftHand").unwrap();
    let arm_part = skel.joints()[hand].body_part;
    let a = rest().local;
    let mut b = a.clone();
    b.joints[hand].angvel = Vector3::new(1.0, -2.0, 0.5);
    b.joints[hand].pos.x += 0.1;
    let parts = |x: &movin_core::skeleton::LocalPoseFeature| {
        let mut tape = Tape::new(m.params());
        let c = tape.constant(stack_local(&[x]));
        let v = m.local_parts_tape(&mut tape, c);
        tape.value(v).clone()
    };
    let (pa, pb) = (parts(&a), parts(&b));
    assert_eq!(pa.rows(), skel.part_count());
    for r in 0..pa.rows() {
        let d = max_diff(pa.row(r), pb.row(r));
        if r == arm_part {
            assert!(d > 0.0, "the hand's own part must react");
        } else {
            assert_eq!(d, 0.0, "part {r} changed");
        }
    }
}

#[test]
fn posterior_depends_on_row_order() {
    let m = default_model();
    let p = m.embed_pointcloud(&random_history(256, 5)).unwrap();
    let pose = rest();
    let fx = m.embed_local_pose(&pose.local).unwrap();
    let fg = m.embed_global_pose(&pose.global).unwrap();
    let mut swapped = p.clone();
    for c in 0..64 {
        let (x, y) = (p.get(0, c), p.get(4, c));
        swapped.set(0, c, y);
        swapped.set(4, c, x);
    }
    let (mu_a, _) = m.encode_posterior(&p, Some((&fx, &fg)), (&fx, &fg)).unwrap();
    let (mu_b, _) = m.encode_posterior(&swapped, Some((&fx, &fg)), (&fx, &fg)).unwrap();
    assert!(max_diff(&mu_a, &mu_b) > 1e-6);
    assert!(m.encode_posterior(&p, None, (&fx, &fg)).is_err());
}

#[test]
fn identical_experts_make_gating_irrelevant() {
    let mut m = default_model();
    let k = m.config().n_experts;
    for p in m.params_mut().iter_mut().filter(|p| p.name.starts_with("experts.")) {
        let block = p.value.len() / k;
        let first = p.value.data()[..block].to_vec();
        for e in 1..k {
            p.value.data_mut()[e * block..(e + 1) * block].copy_from_slice(&first);
        }
    }
    let p = m.embed_pointcloud(&random_history(256, 6)).unwrap();
    let pose = rest();
    let fx = m.embed_local_pose(&pose.local).unwrap();
    let fg = m.embed_global_pose(&pose.global).unwrap();
    let z = vec![0.3; 64];
    let (a, gate_a) = m.decode_moe(&z, &p, Some((&fx, &fg))).unwrap();
    let mut rng = seed::rng(1, &[]);
    for p in m.params_mut().iter_mut().filter(|p| p.name.starts_with("gating.")) {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    let (b, gate_b) = m.decode_moe(&z, &p, Some((&fx, &fg))).unwrap();
    assert!(max_diff(&gate_a, &gate_b) > 1e-3);
    assert!(max_diff(&a, &b) < 1e-10);
}

#[test]
fn gating_is_a_distribution_for_extreme_inputs() {
    let m = default_model();
    let p = Tensor::from_vec(5, 64, (0..320).map(|i| (i as f64 - 160.0) * 10.0).collect());
    let big = vec![1e3; 64];
    let (_, gate) = m.decode_moe(&big, &p, Some((&big, &big))).unwrap();
    assert!(gate.iter().all(|w| w.is_finite() && *w >= 0.0));
    assert!((gate.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn latent_sampling() {
    let mut rng = seed::rng(3, &[]);
    let mu = [0.5, -1.0];
    let tiny = 1e-6f64.ln();
    let s = sample_latent(&mu, &[tiny, tiny], &mut rng);
    assert!(max_diff(&s.z, &mu) < 1e-4);
    let s = sample_latent(&mu, &[-1e9, -1e9], &mut rng);
    assert_eq!(s.log_sigma, vec![LOG_SIGMA_MIN; 2]);
    for i in 0..2 {
        assert_eq!(s.z[i], mu[i] + s.log_sigma[i].exp() * s.eps[i]);
    }

    let draws: Vec<f64> = (0..100_000).map(|_| sample_latent(&[0.0], &[0.0], &mut rng).z[0]).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / draws.len() as f64;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "variance {var}");

    let a = sample_latent(&[0.0; 8], &[0.0; 8], &mut seed::rng(5, &[]));
    let b = sample_latent(&[0.0; 8], &[0.0; 8], &mut seed::rng(5, &[]));
    assert_eq!(a, b);
}

#[test]
fn forward_train_is_finite_and_seeded() {
    let m = default_model();
    let example = TrainingExample { history: random_history(256, 7), prev: rest(), cur: rest() };
    let a = m.forward_train(&example, &mut seed::rng(1, &[])).unwrap();
    let b = m.forward_train(&example, &mut seed::rng(1, &[])).unwrap();
    assert_eq!(a, b);
    assert!(a.pose.is_finite());
    assert_eq!(a.latent.z.len(), 64);
    let c = m.forward_train(&example, &mut seed::rng(2, &[])).unwrap();
    assert_ne!(a.latent.z, c.latent.z);
}

#[test]
fn parameter_count_depends_only_on_config() {
    let a = MovinModel::new(ModelConfig::desk(), Skeleton::default_humanoid(), 1).unwrap();
    let b = MovinModel::new(ModelConfig::desk(), Skeleton::default_humanoid(), 2).unwrap();
    assert_eq!(a.parameter_count(), b.parameter_count());
    assert_ne!(a.params().iter().next().unwrap().value, b.params().iter().next().unwrap().value);
    assert!(a.params().all_finite());
    let names: Vec<_> = a.params().iter().map(|p| &p.name).collect();
    let mut dedup = names.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), names.len(), "parameter names must be unique");
    assert!(default_model().parameter_count() > a.parameter_count());
}

#[test]
fn ablations_change_input_shapes() {
    let cfg = ModelConfig { past_clouds: false, ..ModelConfig::desk() };
    let m = MovinModel::new(cfg, Skeleton::default_humanoid(), 1).unwrap();
    assert_eq!(m.embed_pointcloud(&random_history(256, 1)).unwrap().shape(), (1, 32));
    let cfg = ModelConfig { points: 512, ..ModelConfig::desk() };
    let m = MovinModel::new(cfg, Skeleton::default_humanoid(), 1).unwrap();
    assert_eq!(m.embed_pointcloud(&random_history(512, 1)).unwrap().shape(), (5, 32));
    assert!(m.embed_pointcloud(&random_history(256, 1)).is_err());
    let cfg = ModelConfig { autoregressive: false, ..ModelConfig::reduced(21) };
    let m = MovinModel::new(cfg, Skeleton::default_humanoid(), 1).unwrap();
    let batch = probe_batch(&m, 1, 0).unwrap();
    let mut tape = Tape::new(m.params());
    let out = m.forward_train_tape(&mut tape, &batch, &Tensor::zeros(1, 8));
    assert!(tape.value(out.local).is_finite());
}

#[test]
fn predict_matches_zero_latent_decode() {
    let m = default_model();
    let h = random_history(256, 8);
    let prev = rest();
    let p = m.embed_pointcloud(&h).unwrap();
    let fx = m.embed_local_pose(&prev.local).unwrap();
    let fg = m.embed_global_pose(&prev.global).unwrap();
    let (d, _) = m.decode_moe(&[0.0; 64], &p, Some((&fx, &fg))).unwrap();
    let want = m.expand_features(&d).unwrap();
    let got = m.predict(&h, &prev, &[0.0; 64]).unwrap();
    assert!(max_diff(&want.to_vec(), &got.to_vec()) < 1e-12);
}

#[test]
fn batched_forward_matches_single_samples() {
    let m = MovinModel::new(ModelConfig::desk(), Skeleton::default_humanoid(), 4).unwrap();
    let batch = probe_batch(&m, 3, 2).unwrap();
    let eps = Tensor::from_vec(3, 32, (0..96).map(|i| (i as f64 * 0.61).cos()).collect());
    let mut tape = Tape::new(m.params());
    let all = m.forward_train_tape(&mut tape, &batch, &eps);
    let j = 21 * 15;
    for s in 0..3 {
        let one = movin_core::network::Batch {
            groups: vec![batch.groups[s].clone()],
            prev_local: Tensor::from_vec(21, 15, batch.prev_local.data()[s * j..(s + 1) * j].to_vec()),
            prev_global: Tensor::row_vector(batch.prev_global.row(s).to_vec()),
            cur_local: Tensor::from_vec(21, 15, batch.cur_local.data()[s * j..(s + 1) * j].to_vec()),
            cur_global: Tensor::row_vector(batch.cur_global.row(s).to_vec()),
        };
        let mut t1 = Tape::new(m.params());
        let single = m.forward_train_tape(&mut t1, &one, &Tensor::row_vector(eps.row(s).to_vec()));
        assert!(max_diff(tape.value(all.mu).row(s), t1.value(single.mu).row(0)) < 1e-10, "mu {s}");
        assert!(max_diff(tape.value(all.global).row(s), t1.value(single.global).row(0)) < 1e-10, "global {s}");
        assert!(max_diff(&tape.value(all.local).data()[s * j..(s + 1) * j], t1.value(single.local).data()) < 1e-10, "local {s}");
    }
}
