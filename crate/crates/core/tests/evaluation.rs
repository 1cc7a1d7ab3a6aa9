mod common;

use std::sync::Arc;
use std::time::Duration;

use navidrive::evaluation::{run_eval, EvalOptions};
use navidrive::gateway::mock::{EchoBackend, FnBackend, ScriptedOracle};
use navidrive::gateway::{
    BackendError, BackendReply, ChatBackend, ChatRequest, Driver, Gateway, GatewayError, Navigator, ReasonCache,
    RetryPolicy, Sampling, Usage,
};
use navidrive::kinematics::{Point2, Trajectory};
use navidrive::prompting::{find_clip_marker, serialize_waypoints, AblationFlags, OutputMode};
use navidrive::scene_log::Clip;

fn driver(backend: impl ChatBackend + 'static) -> Driver {
    let retry = RetryPolicy {
        max_attempts: 2,
        initial_backoff: Duration::from_millis(1),
        max_backoff: Duration::from_millis(1),
        multiplier: 1.0,
    };
    Driver::new(Arc::new(Gateway::new(backend, retry, 4)), Sampling::driver_default())
}

fn clips(dir: &std::path::Path, n: usize) -> Vec<Clip> {
    (0..n).map(|i| common::clip_in(dir, &format!("scene-0001_{:03}", 2 * i))).collect()
}

fn marker(r: &ChatRequest) -> String {
    r.messages
        .iter()
        .find_map(|m| find_clip_marker(&m.joined_text()).map(str::to_string))
        .unwrap()
}

#[test]
fn oracle_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let clips = clips(dir.path(), 5);
    let oracle = ScriptedOracle::new(&clips, OutputMode::Waypoint, 0.0, 0).unwrap();
    let report = run_eval(&clips, &driver(oracle), None, &EvalOptions::default()).unwrap();
    assert_eq!(report.failure_count, 0);
    assert_eq!(report.rows.len(), 5);
    let agg = report.aggregates.unwrap();
    for m in [agg.pointwise, agg.cumulative] {
        assert_eq!([m.l2_1s, m.l2_2s, m.l2_3s, m.l2_6s, m.avg_3s, m.avg_6s], [0.0; 6]);
    }
}

#[test]
fn constant_offset_scores_offset_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let clips = clips(dir.path(), 3);
    let by_id: std::collections::HashMap<String, Trajectory> =
        clips.iter().map(|c| (c.clip_id.clone(), c.future.clone())).collect();
    let backend = FnBackend(move |r: &ChatRequest| {
        let gt = &by_id[&marker(r)];
        let shifted = Trajectory {
            points: gt.points.iter().map(|p| Point2::new(p.x + 1.0, p.y)).collect(),
            dt: gt.dt,
        };
        Ok(BackendReply {
            texts: vec![serialize_waypoints(&shifted); r.num_candidates],
            usage: Usage::default(),
        })
    });
    let report = run_eval(&clips, &driver(backend), None, &EvalOptions::default()).unwrap();
    let agg = report.aggregates.unwrap();
    for m in [agg.pointwise, agg.cumulative] {
        for v in [m.l2_1s, m.l2_2s, m.l2_3s, m.l2_6s, m.avg_3s, m.avg_6s] {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }
}

#[test]
fn garbage_clip_falls_back_and_run_completes() {
    let dir = tempfile::tempdir().unwrap();
    let clips = clips(dir.path(), 4);
    let oracle = ScriptedOracle::new(&clips, OutputMode::Waypoint, 0.0, 0).unwrap();
    let bad = clips[2].clip_id.clone();
    let backend = FnBackend(move |r: &ChatRequest| {
        if marker(r) == bad {
            Ok(BackendReply {
                texts: vec!["(1, 2) (3,".into(); r.num_candidates],
                usage: Usage::default(),
            })
        } else {
            oracle.send(r)
        }
    });
    let report = run_eval(&clips, &driver(backend), None, &EvalOptions::default()).unwrap();
    assert_eq!(report.failure_count, 1);
    let row = &report.rows[2];
    assert!(row.parse_failure);
    assert_eq!(row.selected_candidate, None);
    assert_eq!(row.valid_candidates, 0);
    assert!(row.metrics.pointwise.l2_6s > 0.0);
    assert!(report.rows.iter().enumerate().all(|(i, r)| r.parse_failure == (i == 2)));

    let strict = run_eval(
        &clips,
        &driver(ScriptedOracle::new(&clips[..2], OutputMode::Waypoint, 0.0, 0).unwrap()),
        None,
        &EvalOptions {
            include_fallback: false,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    // Clips 2 and 3 are unknown to this oracle: the gateway error is recorded.
    assert_eq!(strict.failure_count, 2);
    assert!(strict.rows[3].error.as_deref().unwrap().contains("no recorded response"));
    assert_eq!(strict.aggregated_clips, 2);
    assert_eq!(strict.aggregates.unwrap().cumulative.avg_6s, 0.0);
}

#[test]
fn rows_are_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let clips = clips(dir.path(), 8);
    let run = |workers| {
        let oracle = ScriptedOracle::new(&clips, OutputMode::Waypoint, 0.3, 9).unwrap();
        run_eval(
            &clips,
            &driver(oracle),
            None,
            &EvalOptions {
                workers,
                ..EvalOptions::default()
            },
        )
        .unwrap()
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert!(one.aggregates.unwrap().pointwise.avg_3s > 0.0);
}

#[test]
fn missing_reasoning_uses_navigator() {
    let dir = tempfile::tempdir().unwrap();
    let mut clips = clips(dir.path(), 2);
    for c in &mut clips {
        c.reasoning = None;
    }
    let oracle = Arc::new(ScriptedOracle::new(&clips, OutputMode::Waypoint, 0.0, 0).unwrap());
    let nav = Navigator::new(
        Arc::new(Gateway::new(oracle.clone(), RetryPolicy::default(), 2)),
        Sampling::navigator_default(),
        ReasonCache::new(dir.path().join("cache")),
    );
    let report = run_eval(&clips, &driver(oracle.clone()), Some(&nav), &EvalOptions::default()).unwrap();
    assert_eq!(report.failure_count, 0);
    assert_eq!(report.config.navigator_model.as_deref(), Some("navigator"));
    assert_eq!(nav.cache.len(), 1, "identical content shares one entry");

    let without = run_eval(&clips, &driver(oracle), None, &EvalOptions::default()).unwrap();
    assert_eq!(without.failure_count, 2);
    let flags_off = run_eval(
        &clips,
        &driver(EchoBackend::new(serialize_waypoints(&clips[0].future))),
        None,
        &EvalOptions {
            flags: AblationFlags::new(false, true, true),
            ..EvalOptions::default()
        },
    )
    .unwrap();
    assert_eq!(flags_off.failure_count, 0);
}

#[test]
fn fatal_backend_errors_become_row_errors() {
    let dir = tempfile::tempdir().unwrap();
    let clips = clips(dir.path(), 2);
    let backend = FnBackend(|_: &ChatRequest| -> Result<BackendReply, BackendError> {
        Err(BackendError::Fatal(GatewayError::Rejected {
            status: 401,
            body: "unauthorized".into(),
        }))
    });
    let report = run_eval(&clips, &driver(backend), None, &EvalOptions::default()).unwrap();
    assert_eq!(report.failure_count, 2);
    assert!(report.rows[0].error.as_deref().unwrap().contains("401"));
}
