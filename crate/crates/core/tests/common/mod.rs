#![allow(dead_code)]

use std::path::Path;

use navidrive::kinematics::{self, Control, ControlSequence, EgoState, KinematicState, Point2, Trajectory};
use navidrive::prompting::parse_reasoning;
use navidrive::scene_log::{Camera, Clip, Command};

/// Clip whose future is the rollout of a gentle left arc, with one small
/// image file per camera written under `dir`.
pub fn clip_in(dir: &Path, clip_id: &str) -> Clip {
    clip_with_images(dir, clip_id, b"pixels")
}

pub fn clip_with_images(dir: &Path, clip_id: &str, bytes: &[u8]) -> Clip {
    let images = Camera::ALL
        .iter()
        .map(|c| {
            let p = dir.join(format!("{clip_id}_{}.jpg", c.name()));
            std::fs::write(&p, bytes).unwrap();
            (*c, p)
        })
        .collect();
    let controls = ControlSequence::new(
        (0..12).map(|t| Control::new(0.2 - 0.02 * t as f64, 0.01 + 0.002 * t as f64)).collect(),
        0.5,
    );
    let future = kinematics::rollout(&controls, &KinematicState::at_origin(5.0)).unwrap();
    let future = Trajectory::new(
        future
            .points
            .iter()
            .map(|p| Point2::new((p.x * 100.0).round() / 100.0, (p.y * 100.0).round() / 100.0))
            .collect(),
        0.5,
    )
    .unwrap();
    let history = Trajectory::new((0..5).map(|t| Point2::new(-2.5 * (4 - t) as f64, 0.0)).collect(), 0.5).unwrap();
    Clip {
        clip_id: clip_id.into(),
        scene_id: "scene-0001".into(),
        history,
        future,
        ego_state: EgoState::new(5.0, 0.0, 0.0),
        command: Command::KeepStraight,
        images,
        gt_controls: None,
        reasoning: Some(parse_reasoning(
            "Scene Description: open road\nRecommended Action: keep lane\nReasoning: clear ahead",
        )),
    }
}
