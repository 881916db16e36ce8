use playroom::changemetric::{change_image, label_trajectory, ChangeConfig, MaskNoiseConfig};
use playroom::simworld::{Action, SceneConfig, Simulator, WorldState};
use proptest::prelude::*;

fn sim() -> Simulator {
    Simulator::new(SceneConfig::kitchen1()).unwrap()
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    prop::array::uniform2(0.0f64..1.0)
}

/// A state where the scene has been disturbed by some scripted contact.
fn disturbed(sim: &Simulator, k: usize) -> WorldState {
    let door = sim.scene().object("door").unwrap();
    let mut s = sim.rest_state(sim.handle_position(door, 0.0).unwrap());
    for _ in 0..k {
        s = sim.step(&s, &Action::new(0.0, 1.0, 0.0, 0.0));
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn arm_only_motion_is_invisible(a in point(), b in point(), k in 0usize..4) {
        let sim = sim();
        let base = disturbed(&sim, k);
        let mut s1 = base.clone();
        let mut s2 = base;
        s1.arm.x = a[0];
        s1.arm.y = a[1];
        s2.arm.x = b[0];
        s2.arm.y = b[1];
        let c = change_image(&sim.render(&s1), &sim.render(&s2), &ChangeConfig::default(), 0).unwrap();
        prop_assert_eq!(c.norm, 0.0);
    }

    #[test]
    fn change_is_symmetric(i in 0usize..5, j in 0usize..5, seed in any::<u64>()) {
        let sim = sim();
        let x = sim.render(&disturbed(&sim, i));
        let y = sim.render(&disturbed(&sim, j));
        let cfg = ChangeConfig::default();
        prop_assert_eq!(change_image(&x, &y, &cfg, seed).unwrap(), change_image(&y, &x, &cfg, seed).unwrap());
    }

    #[test]
    fn identical_pairs_never_change(k in 0usize..5, arm in point(), flip in 0.0f64..0.2, seed in any::<u64>()) {
        let sim = sim();
        let mut s = disturbed(&sim, k);
        s.arm.x = arm[0];
        s.arm.y = arm[1];
        let x = sim.render(&s);
        let cfg = ChangeConfig {
            noise: MaskNoiseConfig { flip_prob: flip, dilate_px: 1 },
            ..ChangeConfig::default()
        };
        prop_assert_eq!(change_image(&x, &x, &cfg, seed).unwrap().norm, 0.0);
    }

    #[test]
    fn raising_the_threshold_never_adds_change(t1 in 0.0f64..0.6, dt in 0.0f64..0.4, k in 1usize..6) {
        let sim = sim();
        let x = sim.render(&disturbed(&sim, 0));
        let y = sim.render(&disturbed(&sim, k));
        let lo = ChangeConfig { pixel_threshold: t1, ..ChangeConfig::default() };
        let hi = ChangeConfig { pixel_threshold: t1 + dt, ..ChangeConfig::default() };
        let a = change_image(&x, &y, &lo, 3).unwrap();
        let b = change_image(&x, &y, &hi, 3).unwrap();
        prop_assert!(b.norm <= a.norm);
        prop_assert!(a.grid.iter().zip(&b.grid).all(|(&p, &q)| p || !q));
    }
}

#[test]
fn opening_the_door_registers_growing_change() {
    let sim = sim();
    let obs: Vec<_> = (0..6).map(|k| sim.render(&disturbed(&sim, k))).collect();
    let (labels, total) = label_trajectory(&obs, &ChangeConfig::default(), 0).unwrap();
    assert_eq!(labels[0].norm, 0.0);
    assert!(labels[5].norm > 0.0);
    for w in labels.windows(2) {
        assert!(w[1].norm >= w[0].norm);
    }
    let sum: f64 = labels.iter().map(|c| c.norm).sum();
    assert!((total - sum).abs() < 1e-12);
}
