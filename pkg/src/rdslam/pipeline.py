"""Sequential (and optional three-stage concurrent) SLAM driver."""

from __future__ import annotations

import contextlib
import logging
import queue
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .features import PredictionVolume, detect
from .geometry import CameraIntrinsics, Pose, interpolate_pose
from .mapping import (
    BootstrapError,
    MappingParams,
    MappingStats,
    bootstrap_two_view,
    cull_and_fuse,
    local_bundle_adjustment,
    map_new_keyframe,
    should_insert_keyframe,
)
from .tracking import TrackingLost, VelocityModel, predict_pose, track_frame
from .worldmap import Frame, Keyframe, WorldMap

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    exit_code = 1


class BootstrapFailure(PipelineError):
    exit_code = 2


class TrackingFailure(PipelineError):
    exit_code = 3

    def __init__(self, msg, frame_index=None, result=None):
        super().__init__(msg)
        self.frame_index = frame_index
        self.result = result


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    tracked: bool
    ref_keyframe: int | None = None
    rel: Pose | None = None  # T_frame T_ref^-1

    def pose(self, wm: WorldMap) -> Pose | None:
        if not self.tracked:
            return None
        return self.rel @ wm.resolve_pose(self.ref_keyframe)


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list[Pose]  # world-to-camera
    frame_indices: np.ndarray

    def positions(self) -> np.ndarray:
        return np.array([p.center() for p in self.poses]).reshape(-1, 3)


@dataclass
class RunResult:
    trajectory: Trajectory
    map: WorldMap
    stats: dict
    records: list[FrameRecord]
    loop_events: list = field(default_factory=list)


@dataclass
class RunOptions:
    mode: object = None  # ParamMode; None means MC
    coarse_to_fine: bool = True
    mapping: MappingParams = field(default_factory=MappingParams)
    bootstrap_parallax_deg: float = 3.0
    bootstrap_max_frames: int = 60
    local_neighbors: int = 10
    loop: str = "off"  # off | detect | on
    loop_params: object = None
    seed: int = 0
    min_probability: float = 0.015
    nms_radius: int = 4
    concurrent: bool = False


class _Timer:
    def __init__(self):
        self.totals = defaultdict(float)

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.totals[name] += time.perf_counter() - self.t0

        return _Ctx()


def make_frame(index: int, timestamp: float, volume: PredictionVolume, opts: RunOptions) -> Frame:
    maps, kps = detect(volume, opts.min_probability, opts.nms_radius)
    return Frame(index, timestamp, maps, kps, volume.embedding)


def _mode(opts):
    from .features import ParamMode

    return opts.mode if opts.mode is not None else ParamMode.MC


class Slam:
    """Frame-at-a-time SLAM state machine used by both execution modes."""

    def __init__(self, K: CameraIntrinsics, opts: RunOptions | None = None):
        self.K = K
        self.opts = opts or RunOptions()
        self.mode = _mode(self.opts)
        self.map: WorldMap | None = None
        self.records: list[FrameRecord] = []
        self.pending: list[Frame] = []
        self.velocity = VelocityModel()
        self.last_pose: Pose | None = None
        self.ref_kf: int | None = None
        self.last_kf_frame = 0
        self.timer = _Timer()
        self.mstats = MappingStats()
        self.loop = None
        self.loop_events = []
        self.rng = np.random.default_rng(self.opts.seed)
        self.n_frames = 0
        self.lock = contextlib.nullcontext()

    # bootstrap

    def _try_bootstrap(self, frame: Frame) -> bool:
        first = self.pending[0]
        try:
            wm = bootstrap_two_view(
                first,
                frame,
                self.K,
                self.mode,
                self.rng,
                self.opts.mapping,
                min_median_parallax_deg=self.opts.bootstrap_parallax_deg,
            )
        except BootstrapError as exc:
            log.debug("bootstrap with frame %d failed: %s", frame.index, exc)
            return False
        kfb = wm.keyframes[1]
        self.map = wm
        self.records.append(FrameRecord(first.index, first.timestamp, True, 0, Pose.identity()))
        # frames between the pair, tracked with an interpolated initial pose
        between = self.pending[1:-1]
        n = len(between) + 1
        for i, f in enumerate(between, start=1):
            init = interpolate_pose(Pose.identity(), kfb.pose, i / n)
            rec = self._track(f, init, 0)
            self.records.append(rec)
            if not rec.tracked:
                raise TrackingFailure(f"lost during bootstrap at frame {f.index}", f.index)
        self.records.append(FrameRecord(frame.index, frame.timestamp, True, 1, Pose.identity()))
        self.records.sort(key=lambda r: r.index)
        self.ref_kf = 1
        self.last_kf_frame = frame.index
        prev = self.records[-2].pose(wm)
        self.last_pose = kfb.pose
        self.velocity = VelocityModel.between(prev, kfb.pose)
        self.pending = []
        self._after_keyframe(1)
        return True

    # tracking

    def _alive(self, kf_id: int) -> int:
        """``kf_id`` or, if it was culled meanwhile, the keyframe it is anchored to."""
        if kf_id in self.map.keyframes:
            return kf_id
        return self.map.resolve_anchor(kf_id)[0]

    def _track(self, frame: Frame, init: Pose, ref: int) -> FrameRecord:
        with self.lock:
            ref = self._alive(ref)
            ids, pos, desc = self.map.landmark_arrays(self.map.local_landmarks(ref, self.opts.local_neighbors))
        with self.timer("tracking"):
            res = track_frame(
                frame.maps, frame.keypoints, ids, pos, desc, init, self.K, self.mode, self.opts.coarse_to_fine
            )
        frame.pose = res.pose
        frame.tracked = True
        self._last_track = res
        with self.lock:
            ref_new = self._reference_for(res, ref)
            frame.ref_keyframe = ref_new
            rel = res.pose @ self.map.keyframes[ref_new].pose.inverse()
        return FrameRecord(frame.index, frame.timestamp, True, ref_new, rel)

    def _reference_for(self, res, fallback: int) -> int:
        counts = defaultdict(int)
        for m in res.matches:
            if m.inlier and m.landmark in self.map.landmarks:
                for k in self.map.landmarks[m.landmark].observations:
                    if k in self.map.keyframes:
                        counts[k] += 1
        if not counts:
            return fallback
        return min(counts, key=lambda k: (-counts[k], -k))

    def process(self, frame: Frame):
        self.n_frames += 1
        if self.map is None:
            self.pending.append(frame)
            if len(self.pending) >= 2 and self._try_bootstrap(frame):
                return
            if len(self.pending) > self.opts.bootstrap_max_frames:
                raise BootstrapFailure("no frame pair with enough parallax")
            return
        self._sync_last_pose()
        init = predict_pose(self.velocity, self.last_pose)
        try:
            rec = self._track(frame, init, self.ref_kf)
        except TrackingLost as exc:
            self.records.append(FrameRecord(frame.index, frame.timestamp, False))
            raise TrackingFailure(str(exc), frame.index) from exc
        self.records.append(rec)
        self.velocity = VelocityModel.between(self.last_pose, frame.pose)
        self.last_pose = frame.pose
        self.ref_kf = rec.ref_keyframe
        res = self._last_track
        with self.lock:
            ref_count = len(self.map.keyframes[self._alive(self.ref_kf)].tracked_landmarks())
        if should_insert_keyframe(
            res.n_inliers, ref_count, frame.index - self.last_kf_frame, self.opts.mapping.kf_ratio, self.opts.mapping.kf_max_gap
        ):
            kf_id = self._insert_keyframe(frame, res)
            rec.ref_keyframe = kf_id
            rec.rel = Pose.identity()
            self.ref_kf = kf_id
            with self.lock:
                self.last_pose = self.map.resolve_pose(kf_id)
            self.last_kf_frame = frame.index

    def _sync_last_pose(self):
        """Hook for the concurrent driver; the sequential map never moves under tracking."""

    # mapping

    def _insert_keyframe(self, frame: Frame, res) -> int:
        with self.lock:
            wm = self.map
            kf_id = wm.new_keyframe_id()
            kf = wm.add_keyframe(Keyframe.from_frame(kf_id, frame, frame.pose, self.mode))
            for m in res.matches:
                if m.inlier and m.landmark in wm.landmarks and kf_id not in wm.landmarks[m.landmark].observations:
                    if kf.landmark_of[m.keypoint] < 0:
                        wm.add_observation(m.landmark, kf_id, m.keypoint)
        self._submit(kf_id)
        return kf_id

    def _submit(self, kf_id: int):
        self._after_keyframe(kf_id)

    def finish(self):
        """Wait for background stages (no-op when sequential)."""

    def _after_keyframe(self, kf_id: int):
        self._map_stage(kf_id)
        self._loop_stage(kf_id)

    def _map_stage(self, kf_id: int):
        with self.lock, self.timer("mapping"):
            wm = self.map
            map_new_keyframe(wm, kf_id, self.K, self.opts.mapping, self.mstats)
            if len(wm.keyframes) >= 2:
                out = local_bundle_adjustment(wm, kf_id, self.opts.mapping)
                self.mstats.add(out.stats)
            neighborhood = [kf_id] + list(wm.keyframes[kf_id].covisibility)
            self.mstats.add(cull_and_fuse(wm, neighborhood, self.opts.mapping, protect={kf_id}))

    def _loop_stage(self, kf_id: int):
        with self.lock:
            if self.opts.loop != "off" and kf_id in self.map.keyframes:
                with self.timer("loop"):
                    self._loop(kf_id)

    def _loop(self, kf_id: int):
        from .loop_closure import LoopCloser

        if self.loop is None:
            self.loop = LoopCloser(self.K, self.opts.loop_params, correct=self.opts.loop == "on")
        ev = self.loop.process(self.map, kf_id)
        if ev is not None:
            self.loop_events.append(ev)

    def result(self) -> RunResult:
        self.finish()
        recs = [r for r in self.records if r.tracked]
        wm = self.map
        poses = [r.pose(wm) for r in recs]
        traj = Trajectory(
            np.array([r.timestamp for r in recs]), poses, np.array([r.index for r in recs], dtype=np.int64)
        )
        n_tracked = sum(1 for r in self.records if r.tracked)
        stats = {
            "frames": self.n_frames,
            "tracked": n_tracked,
            "success_rate": n_tracked / max(self.n_frames, 1),
            "keyframes": len(wm.keyframes) if wm else 0,
            "landmarks": len(wm.landmarks) if wm else 0,
            "loops_detected": sum(1 for e in self.loop_events if e.detected),
            "loops_closed": sum(1 for e in self.loop_events if e.closed),
        }
        for k, v in self.mstats.__dict__.items():
            stats[f"mapping_{k}"] = v
        for k, v in self.timer.totals.items():
            stats[f"time_{k}_s"] = round(v, 3)
        return RunResult(traj, wm, stats, list(self.records), list(self.loop_events))


class ConcurrentSlam(Slam):
    """Tracking on the caller's thread, mapping and loop closure on worker threads.

    Stages share the map under one lock; tracking solves on a snapshot of the
    local landmarks. At most one keyframe waits for mapping, so tracking
    blocks instead of running arbitrarily far ahead of the map.
    """

    def __init__(self, K: CameraIntrinsics, opts: RunOptions | None = None):
        super().__init__(K, opts)
        self.lock = threading.RLock()
        self.map_queue: queue.Queue = queue.Queue(maxsize=1)
        self.loop_queue: queue.Queue = queue.Queue()
        self.errors: list[BaseException] = []
        self.workers = [
            threading.Thread(target=self._worker, args=(self.map_queue, self._mapping_job), daemon=True),
            threading.Thread(target=self._worker, args=(self.loop_queue, self._loop_stage), daemon=True),
        ]
        for w in self.workers:
            w.start()
        self._finished = False

    def _worker(self, q: queue.Queue, job: Callable[[int], None]):
        while True:
            kf_id = q.get()
            try:
                if kf_id is None:
                    return
                if not self.errors:
                    job(kf_id)
            except BaseException as exc:  # surfaced on the tracking thread
                self.errors.append(exc)
            finally:
                q.task_done()

    def _mapping_job(self, kf_id: int):
        self._map_stage(kf_id)
        self.loop_queue.put(kf_id)

    def _raise_pending(self):
        if self.errors:
            raise self.errors[0]

    def _submit(self, kf_id: int):
        self._raise_pending()
        self.map_queue.put(kf_id)

    def _sync_last_pose(self):
        self._raise_pending()
        if not self.records or not self.records[-1].tracked:
            return
        with self.lock:
            rec = self.records[-1]
            alive, rel = self.map.resolve_anchor(rec.ref_keyframe)
            self.last_pose = rec.rel @ rel @ self.map.keyframes[alive].pose

    def finish(self):
        if self._finished:
            return
        self._finished = True
        self.map_queue.put(None)
        self.workers[0].join()
        self.loop_queue.put(None)
        self.workers[1].join()
        self._raise_pending()


def run_frames(
    frames: Iterable[tuple[int, float, PredictionVolume]], K: CameraIntrinsics, opts: RunOptions | None = None
) -> RunResult:
    """Run the sequential pipeline over ``(index, timestamp, volume)`` items.

    Raises:
        BootstrapFailure: no initial map could be built.
        TrackingFailure: tracking was lost; ``exc.result`` holds the partial run.
    """
    opts = opts or RunOptions()
    slam = ConcurrentSlam(K, opts) if opts.concurrent else Slam(K, opts)
    n = 0
    for index, ts, vol in frames:
        n += 1
        frame = make_frame(index, ts, vol, opts)
        try:
            slam.process(frame)
        except TrackingFailure as exc:
            exc.result = slam.result()
            raise
    if slam.map is None:
        raise BootstrapFailure(f"bootstrap failed over {n} frame(s)")
    return slam.result()


def synthetic_frames(gt) -> Iterator[tuple[int, float, PredictionVolume]]:
    from .synth import render_prediction

    for k in range(len(gt.poses)):
        yield k, float(gt.timestamps[k]), render_prediction(gt, k)


@dataclass
class PipelineOutput:
    trajectory: object  # fileio.TrajectoryEstimate
    map: WorldMap | None
    stats: dict
    run: RunResult | None


def options_from_config(cfg) -> RunOptions:
    return RunOptions(
        mode=cfg.param_mode,
        coarse_to_fine=cfg.coarse_to_fine,
        mapping=cfg.mapping,
        bootstrap_parallax_deg=cfg.bootstrap_parallax_deg,
        bootstrap_max_frames=cfg.bootstrap_max_frames,
        local_neighbors=cfg.local_neighbors,
        loop=cfg.loop,
        loop_params=cfg.loop_params,
        seed=cfg.seed,
        min_probability=cfg.min_probability,
        nms_radius=cfg.nms_radius,
        concurrent=cfg.concurrent,
    )


def _ground_truth_stats(run: RunResult, gt, lost_fraction: float) -> dict:
    from .evaluation import EvaluationError, evaluate_ate

    tr = run.trajectory
    try:
        ate = evaluate_ate(tr.timestamps, tr.positions(), gt.timestamps, gt.centers())
    except EvaluationError:
        return {}
    ok = int(np.sum(ate.errors <= lost_fraction * gt.spec.extent))
    return {
        "ate_sim3": ate.rmse,
        "ate_over_extent": ate.rmse / gt.spec.extent,
        "tracked_within_tolerance": ok,
        "success_rate_adjudicated": ok / max(len(gt.poses), 1),
    }


def run_pipeline(cfg) -> PipelineOutput:
    """Run the configured input through the pipeline and write the configured outputs.

    Raises:
        BootstrapFailure, TrackingFailure: as :func:`run_frames`; a tracking
            failure still writes the partial trajectory and carries it as
            ``exc.output``.
        OSError, fileio.FeatureFileError: unreadable input.
    """
    from . import fileio
    from .synth import generate_world

    opts = options_from_config(cfg)
    gt = None
    if cfg.input == "synthetic":
        gt = generate_world(cfg.synth)
        K = gt.K
        frames = synthetic_frames(gt)
    else:
        K = cfg.camera.intrinsics()
        if K is None:
            raise fileio.ConfigError("camera.* intrinsics are required for feature-file input")
        frames = fileio.iter_feature_directory(cfg.input)

    def finish(run: RunResult) -> PipelineOutput:
        traj = fileio.TrajectoryEstimate.from_poses(run.trajectory.timestamps, run.trajectory.poses)
        stats = dict(run.stats)
        if gt is not None:
            stats.update(_ground_truth_stats(run, gt, cfg.lost_fraction))
        if cfg.output.trajectory:
            fileio.write_trajectory(cfg.output.trajectory, traj)
        if cfg.output.map and run.map is not None:
            fileio.write_points(cfg.output.map, run.map.landmark_arrays()[1])
        if cfg.output.stats:
            with open(cfg.output.stats, "w") as fh:
                fh.write(fileio.format_report(stats))
        return PipelineOutput(traj, run.map, stats, run)

    try:
        run = run_frames(frames, K, opts)
    except TrackingFailure as exc:
        if exc.result is not None:
            exc.output = finish(exc.result)
        raise
    return finish(run)
