use movin_core::network::{ModelConfig, MovinModel};
use movin_core::skeleton::{Joint, Skeleton};
use movin_core::training::{check_gradients, probe_batch};

fn four_joints() -> Skeleton {
    let j = |name: &str, parent: Option<usize>, offset: [f64; 3], body_part: usize| Joint { name: name.into(), parent, offset, body_part };
    Skeleton::new(
        vec![
            j("Hips", None, [0.0, 0.0, 0.0], 0),
            j("Chest", Some(0), [0.0, 0.3, 0.0], 0),
            j("LeftFoot", Some(0), [0.1, -0.8, 0.0], 1),
            j("RightFoot", Some(0), [-0.1, -0.8, 0.0], 2),
        ],
        2,
        3,
    )
    .unwrap()
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut model = MovinModel::new(ModelConfig::reduced(4), four_joints(), 5).unwrap();
    let batch = probe_batch(&model, 2, 9).unwrap();
    let probes = check_gradients(&mut model, &batch, 1.0, 100, 1e-5, 3);
    let mut worst = 0.0f64;
    for p in &probes {
        let e = p.relative_error(1e-6);
        println!("{:40} {:6} a={:+.6e} n={:+.6e} rel={:.2e}", p.param, p.index, p.analytic, p.numeric, e);
        worst = worst.max(e);
    }
    assert!(worst < 1e-4, "worst relative error {worst:.3e}");
}
