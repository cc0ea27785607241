//! Concurrent three-stage execution: tracking on the calling thread, local
//! mapping and loop closing on worker threads over a shared map.
//!
//! Tracking takes short read locks; mutation belongs to the mapping thread.
//! Bundle adjustment extracts the problem under a read lock, solves without
//! any lock, and merges under a write lock, so tracking never waits on a
//! solver. Loop correction holds the write lock for the whole correction
//! transaction, pausing mapping; global BA results are merged under the
//! write lock, re-anchoring keyframes created in the meantime through their
//! spanning-tree parents.

use super::loop_closing::LoopCloser;
use super::mapping::{apply_problem_results, extract_local_problem, LocalMapper};
use super::tracking::Tracker;
use super::{
    dataset_frames, PipelineConfig, PipelineError, RunMode, RunOutput, RunStats, TrajectoryLog,
};
use crate::dataset::Dataset;
use crate::features::Vocabulary;
use crate::geometry::{compose, inverse, SE3Pose};
use crate::map::{MultiKeyFrame, SlamMap};
use crate::optimizer::{Problem, ReprojectionEdge};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};

enum MapperMsg {
    CounterDeltas(Vec<(u64, u32, u32)>),
    NewKeyFrame(MultiKeyFrame),
}

/// Runs the pipeline with concurrent local mapping and loop closing.
/// Trajectories match the deterministic mode in quality but not bit-exactly;
/// acceptance runs use [`super::run`].
pub fn run_threaded(
    dataset: &Dataset,
    mode: RunMode,
    config: &PipelineConfig,
    seed: u64,
) -> Result<RunOutput, PipelineError> {
    let (rig, frames) = dataset_frames(dataset, mode);
    let vocab = Vocabulary::new(config.vocabulary_seed);
    let map = Arc::new(RwLock::new(SlamMap::new(rig.clone(), config.map)));
    let trajectory = Arc::new(Mutex::new(TrajectoryLog::new()));
    let loop_closures = Arc::new(AtomicUsize::new(0));

    let (to_mapper, mapper_rx) = mpsc::channel::<MapperMsg>();
    let (to_loop, loop_rx) = mpsc::channel::<u64>();

    let mapper_handle = {
        let map = Arc::clone(&map);
        let trajectory = Arc::clone(&trajectory);
        let config = *config;
        std::thread::spawn(move || -> Result<(), PipelineError> {
            let mapper = LocalMapper::new(config);
            while let Ok(msg) = mapper_rx.recv() {
                match msg {
                    MapperMsg::CounterDeltas(deltas) => {
                        let mut guard = map.write().expect("map lock");
                        for (pid, visible, found) in deltas {
                            if let Ok(point) = guard.point_mut(pid) {
                                point.visible_count += visible;
                                point.found_count += found;
                            }
                        }
                    }
                    MapperMsg::NewKeyFrame(mkf) => {
                        let mkf_id = mkf.id;
                        // Mutating phase under the write lock.
                        let neighbors = {
                            let mut guard = map.write().expect("map lock");
                            guard.insert_keyframe(mkf)?;
                            guard.cull_recent_points();
                            let neighbors =
                                guard.neighbors(mkf_id, guard.config.neighbor_k)?;
                            let stage = LocalMapper::new(config);
                            stage.fuse_and_create(&mut guard, mkf_id, &neighbors)?;
                            neighbors
                        };
                        // Local BA: extract under read, solve unlocked,
                        // apply under write.
                        let extraction = {
                            let guard = map.read().expect("map lock");
                            extract_local_problem(&guard, mkf_id, &neighbors)?
                        };
                        if let Some(mut extraction) = extraction {
                            extraction.problem.solve(&config.solver_local)?;
                            let mut guard = map.write().expect("map lock");
                            apply_problem_results(&mut guard, &extraction.problem);
                            let culled = guard.cull_redundant_keyframes(&neighbors);
                            if !culled.is_empty() {
                                let mut log = trajectory.lock().expect("trajectory lock");
                                for record in &culled {
                                    log.reanchor(record);
                                }
                            }
                        }
                        let _ = to_loop.send(mkf_id);
                        let _ = &mapper;
                    }
                }
            }
            Ok(())
        })
    };

    let loop_handle = {
        let map = Arc::clone(&map);
        let config = *config;
        let loop_closures = Arc::clone(&loop_closures);
        std::thread::spawn(move || -> Result<(), PipelineError> {
            let mut closer = LoopCloser::new(config);
            while let Ok(mkf_id) = loop_rx.recv() {
                if !config.enable_loop_closing {
                    continue;
                }
                let candidate = {
                    let guard = map.read().expect("map lock");
                    if !guard.has_keyframe(mkf_id) {
                        continue;
                    }
                    closer.detect_loop(&guard, mkf_id)
                };
                let Some(candidate) = candidate else { continue };
                // Correction transaction: exclusive access end to end.
                let corrected = {
                    let mut guard = map.write().expect("map lock");
                    if !guard.has_keyframe(mkf_id) || !guard.has_keyframe(candidate) {
                        continue;
                    }
                    closer.close_loop_correction(&mut guard, mkf_id, candidate)?
                };
                if !corrected {
                    continue;
                }
                loop_closures.fetch_add(1, Ordering::SeqCst);

                // Background global BA: extract, solve, merge with anchoring.
                let (mut problem, extract_poses) = {
                    let guard = map.read().expect("map lock");
                    (
                        global_problem(&guard)?,
                        guard
                            .keyframes()
                            .map(|k| (k.id, k.pose))
                            .collect::<BTreeMap<u64, SE3Pose>>(),
                    )
                };
                if problem.edges.is_empty() {
                    continue;
                }
                problem.solve(&config.solver_global)?;
                let mut guard = map.write().expect("map lock");
                merge_global_results(&mut guard, &problem, &extract_poses);
            }
            Ok(())
        })
    };

    // Tracking stage on this thread.
    let mut tracker = Tracker::new(rig, vocab, *config, seed);
    let mut stats = RunStats::default();
    for frame in &frames {
        stats.n_sum += 1;
        let outcome = {
            let guard = map.read().expect("map lock");
            tracker.handle_frame(&guard, frame)?
        };
        if !outcome.counter_deltas.is_empty() {
            let _ = to_mapper.send(MapperMsg::CounterDeltas(outcome.counter_deltas));
        }
        if let Some(tracked) = &outcome.tracked {
            stats.n_tracked += 1;
            if outcome.relocalized {
                stats.relocalizations += 1;
            }
            trajectory
                .lock()
                .expect("trajectory lock")
                .append(frame.timestamp, tracked.ref_mkf, tracked.rel_to_ref);
        }
        if let Some(mkf) = outcome.new_mkf {
            let _ = to_mapper.send(MapperMsg::NewKeyFrame(mkf));
        }
    }
    drop(to_mapper);
    mapper_handle.join().expect("mapper thread")?;
    loop_handle.join().expect("loop thread")?;

    let map = Arc::try_unwrap(map)
        .map_err(|_| ())
        .expect("threads joined")
        .into_inner()
        .expect("map lock");
    stats.tracking_rate = if stats.n_sum > 0 {
        stats.n_tracked as f64 / stats.n_sum as f64
    } else {
        0.0
    };
    stats.mkf_count = map.keyframe_count();
    stats.point_count = map.point_count();
    stats.loop_closures = loop_closures.load(Ordering::SeqCst);
    let trajectory = Arc::try_unwrap(trajectory)
        .map_err(|_| ())
        .expect("threads joined")
        .into_inner()
        .expect("trajectory lock");
    Ok(RunOutput {
        trajectory: trajectory.finalize(&map),
        stats,
        snapshot: map.snapshot(),
    })
}

fn global_problem(map: &SlamMap) -> Result<Problem, PipelineError> {
    let mut problem = Problem::new(map.rig.clone());
    let initial = map.initial_mkf();
    for mkf in map.keyframes() {
        problem.add_pose(mkf.id, mkf.pose, Some(mkf.id) == initial);
    }
    for point in map.points() {
        problem.add_point(point.id, point.position, false);
        for (observer, (camera, index)) in point.observations.iter() {
            let Some((observed, information)) =
                super::mapping::feature_observation(map, *observer, *camera, *index)
            else {
                continue;
            };
            let mut edge = ReprojectionEdge::new(*observer, *camera, point.id, observed);
            edge.information = information;
            problem.add_edge(edge)?;
        }
    }
    Ok(problem)
}

/// Applies global-BA results, re-anchoring keyframes created during the
/// solve through their spanning-tree parents and points through their
/// first observer.
fn merge_global_results(
    map: &mut SlamMap,
    problem: &Problem,
    extract_poses: &BTreeMap<u64, SE3Pose>,
) {
    let pre_merge: BTreeMap<u64, SE3Pose> = map.keyframes().map(|k| (k.id, k.pose)).collect();
    apply_problem_results(map, problem);
    // New keyframes, ascending id: parents were processed first.
    let new_ids: Vec<u64> = map
        .keyframe_ids()
        .filter(|id| !problem.poses.contains_key(id))
        .collect();
    for id in new_ids {
        let Some(parent) = map.parent(id) else { continue };
        let (Some(parent_pre), Ok(parent_now)) =
            (pre_merge.get(&parent), map.keyframe(parent).map(|k| k.pose))
        else {
            continue;
        };
        if let Ok(mkf) = map.keyframe_mut(id) {
            let rel = compose(&mkf.pose, &inverse(parent_pre));
            mkf.pose = compose(&rel, &parent_now);
        }
    }
    // Points created during the solve follow their anchor observer.
    let pids: Vec<u64> = map.point_ids().collect();
    for pid in pids {
        let Ok(point) = map.point(pid) else { continue };
        if problem.points.contains_key(&pid) {
            continue;
        }
        let Some(anchor) = point.observations.keys().next().copied() else {
            continue;
        };
        let (Some(pre), Ok(now)) = (
            extract_poses.get(&anchor),
            map.keyframe(anchor).map(|k| k.pose),
        ) else {
            continue;
        };
        let position = point.position;
        let corrected =
            crate::geometry::transform_point(&inverse(&now), &crate::geometry::transform_point(pre, &position));
        if let Ok(p) = map.point_mut(pid) {
            p.position = corrected;
        }
    }
}
