//! Wiring of the refinement loops on tiny trained networks.

mod common;

use common::tiny_pipeline;
use fbpose_core::feedback::{run_hand_loop_batch, run_joint_loop_batch};
use fbpose_core::joint::train_joint_model;
use fbpose_core::pipeline::{train_hand_model, HandModel};
use fbpose_core::scene::{make_dataset, Dataset, SceneConfig};
use fbpose_core::depth::DepthImage;
use fbpose_core::geometry::CameraIntrinsics;

fn images(d: &Dataset) -> Vec<(&DepthImage, CameraIntrinsics)> {
    d.samples.iter().map(|s| (&s.depth, s.camera)).collect()
}

fn hand_model() -> HandModel {
    let train = make_dataset(24, &SceneConfig::hand_only(), 21).unwrap();
    train_hand_model(&train, &tiny_pipeline()).unwrap().0
}

#[test]
fn zero_updater_keeps_the_initialization() {
    let mut model = hand_model();
    for layer in model.updater.params_mut() {
        for t in layer {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let test = make_dataset(4, &SceneConfig::hand_only(), 22).unwrap();
    for st in run_hand_loop_batch(&images(&test), &model, 3).unwrap() {
        let st = st.unwrap();
        assert_eq!(st.hand.len(), 4);
        for q in &st.hand[1..] {
            assert!(q.iter().zip(&st.hand[0]).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        assert_eq!(st.synthesized.len(), 4);
    }
}

#[test]
fn hand_loop_is_deterministic_and_prefix_stable() {
    let model = hand_model();
    let test = make_dataset(5, &SceneConfig::hand_only(), 23).unwrap();
    let a = run_hand_loop_batch(&images(&test), &model, 2).unwrap();
    let b = run_hand_loop_batch(&images(&test), &model, 2).unwrap();
    let one = run_hand_loop_batch(&images(&test), &model, 1).unwrap();
    for ((a, b), one) in a.into_iter().zip(b).zip(one) {
        let (a, b, one) = (a.unwrap(), b.unwrap(), one.unwrap());
        assert_eq!(a, b);
        assert_eq!(a.hand[..2], one.hand[..]);
        assert!(a.hand.iter().flatten().all(|v| v.is_finite() && v.abs() <= 1.0));
    }
}

#[test]
fn joint_branches_agree_concurrent_and_sequential() {
    let hand = hand_model();
    let cfg = tiny_pipeline();
    let scene = SceneConfig::hand_object();
    let train = make_dataset(24, &scene, 31).unwrap();
    let (model, _) = train_joint_model(&train, &hand.synth, &cfg, scene.object.as_ref().unwrap()).unwrap();
    let test = make_dataset(4, &scene, 32).unwrap();
    let conc = run_joint_loop_batch(&images(&test), &model, 2, true).unwrap();
    let seq = run_joint_loop_batch(&images(&test), &model, 2, false).unwrap();
    for (c, s) in conc.into_iter().zip(seq) {
        let (c, s) = (c.unwrap(), s.unwrap());
        assert_eq!(c, s);
        assert_eq!(c.hand.len(), 3);
        assert_eq!(c.object.len(), 3);
        assert_eq!(c.observed.len(), 2 * cfg.scale.pixels());
        assert!(c.synthesized.iter().all(|v| v.len() == 2 * cfg.scale.pixels()));
    }
}
