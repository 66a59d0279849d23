"""Synthetic experiments: convergence basin, keypoint parameterization, loop closure efficacy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ba import bundle_adjust
from .evaluation import evaluate_ate
from .features import ParamMode, detect
from .geometry import Pose, exp_se3
from .loop_closure import LoopEvent
from .pipeline import RunOptions, run_frames, synthetic_frames
from .solver import SolverError
from .synth import GroundTruth, WorldSpec, generate_world, label_keypoints, render_prediction
from .tracking import TrackingLost, track_direct

# --- convergence basin -------------------------------------------------------------


@dataclass
class ConvergenceTrial:
    sequence: int
    offset: tuple[float, float]  # camera-frame translation of the initial center
    coarse_to_fine: bool
    success: bool
    error: float  # final translational error, inf when tracking was lost
    converged: bool


@dataclass
class ConvergenceResult:
    trials: list[ConvergenceTrial]
    diameter: list[float]

    def successes(self, sequence: int, coarse_to_fine: bool) -> int:
        return sum(t.success for t in self.trials if t.sequence == sequence and t.coarse_to_fine == coarse_to_fine)

    @property
    def sequences(self) -> list[int]:
        return sorted({t.sequence for t in self.trials})

    def table(self) -> tuple[list[str], list[list]]:
        head = ["sequence", "dx", "dy", "coarse_to_fine", "success", "error", "converged"]
        rows = [
            [t.sequence, float(t.offset[0]), float(t.offset[1]), int(t.coarse_to_fine), int(t.success), float(t.error), int(t.converged)]
            for t in self.trials
        ]
        return head, rows


def perturbation_grid(n: int, max_norm: float) -> list[tuple[float, float]]:
    """``n x n`` offsets on a square whose corners lie at ``max_norm``."""
    a = max_norm / np.sqrt(2.0)
    g = np.linspace(-a, a, n) if n > 1 else np.zeros(1)
    return [(float(x), float(y)) for x in g for y in g]


def convergence_trial(gt: GroundTruth, maps, X: np.ndarray, target: int, offset, coarse_to_fine: bool, success_fraction: float):
    P = gt.poses[target]
    # shift the camera center by ``offset`` along its own x and y axes
    init = Pose(P.R, P.t - P.R @ np.array([offset[0], offset[1], 0.0]))
    try:
        pose, reports = track_direct(maps, X, init, gt.K, coarse_to_fine)
    except (TrackingLost, SolverError):
        return np.inf, False, False
    err = float(np.linalg.norm(pose.center() - P.center()))
    conv = bool(reports[-1].converged)
    return err, conv, bool(conv and err < success_fraction * gt.spec.extent)


def run_convergence_experiment(
    worlds: list[GroundTruth] | None = None,
    seeds=(0, 1, 2),
    grid: int = 7,
    max_fraction: float = 0.1,
    reference: int = 0,
    target: int = 5,
    success_fraction: float = 0.01,
    min_probability: float = 0.015,
    nms_radius: int = 4,
) -> ConvergenceResult:
    """Direct tracking of one frame against the reference frame's true structure.

    Each sequence is tracked from every offset of a ``grid x grid`` set of
    initial translations (up to ``max_fraction`` of the scene diameter), with
    and without the coarse level. Success means a converged solve with final
    error below ``success_fraction`` of the diameter.
    """
    if worlds is None:
        worlds = [generate_world(WorldSpec(seed=s, n_landmarks=2000)) for s in seeds]
    trials = []
    for q, gt in enumerate(worlds):
        t = gt.tables[reference]
        X = gt.landmarks[t.ids[t.claimed]]
        maps, _ = detect(render_prediction(gt, target), min_probability, nms_radius)
        for off in perturbation_grid(grid, max_fraction * gt.spec.extent):
            for c2f in (True, False):
                err, conv, ok = convergence_trial(gt, maps, X, target, off, c2f, success_fraction)
                trials.append(ConvergenceTrial(q, off, c2f, ok, err, conv))
    return ConvergenceResult(trials, [gt.spec.extent for gt in worlds])


# --- parameterization ablation ----------------------------------------------------


@dataclass
class ParamProblem:
    """One fixed BA instance: tracks of (frame, keypoint) and per-frame keypoints."""

    gt: GroundTruth
    keypoints: list  # KeypointSet per frame
    tracks: list[list[tuple[int, int]]]  # observations, first one is the source frame
    depths: list[float]  # true depth of each track in its source frame
    init_poses: list[Pose]
    exact: bool = False

    def measurements(self, mode: ParamMode, frame: int, kp: int):
        if self.exact:
            table = self.gt.tables[frame]
            lab = self._labels[frame][kp]
            u = table.true_px[self._row[frame][lab]]
            cov = self.keypoints[frame].covs[kp] if mode in (ParamMode.EC, ParamMode.MC) else np.eye(2)
            return u, cov
        u, c = self._meas[mode][frame]
        return u[kp], c[kp]

    def prepare(self, labels):
        self._labels = labels
        self._row = [{int(l): i for i, l in enumerate(t.ids)} for t in self.gt.tables]
        self._meas = {m: [kp.measurements(m) for kp in self.keypoints] for m in ParamMode}


def build_parameterization_problem(
    gt: GroundTruth, adjacent: int = 5, pose_noise: tuple[float, float] = (0.01, 0.002), exact: bool = False, seed: int = 0
) -> ParamProblem:
    """Back-project every frame's labeled keypoints and link them to the next ``adjacent`` frames.

    Associations come from the oracle labels; initial poses are the true
    poses with a seeded perturbation (frame 0 exact, it is the gauge).
    """
    F = len(gt.poses)
    kps = [detect(render_prediction(gt, k))[1] for k in range(F)]
    labels = [label_keypoints(gt, k, kp.means) for k, kp in enumerate(kps)]
    index = [{int(l): i for i, l in enumerate(lab) if l >= 0} for lab in labels]
    depth = [dict(zip(t.ids.tolist(), t.depth.tolist())) for t in gt.tables]
    tracks, depths = [], []
    for k in range(F):
        for i, l in enumerate(labels[k]):
            if l < 0:
                continue
            obs = [(k, i)] + [(j, index[j][int(l)]) for j in range(k + 1, min(F, k + 1 + adjacent)) if int(l) in index[j]]
            if len(obs) >= 2:
                tracks.append(obs)
                depths.append(depth[k][int(l)])
    rng = np.random.default_rng([seed, 7])
    init = [exp_se3(np.r_[rng.normal(0, pose_noise[0], 3), rng.normal(0, pose_noise[1], 3)]) @ p for p in gt.poses]
    init[0] = gt.poses[0]
    prob = ParamProblem(gt, kps, tracks, depths, init, exact)
    prob.prepare(labels)
    return prob


def solve_parameterization(prob: ParamProblem, mode: ParamMode) -> float:
    """Run the fixed BA under one measurement model; returns the Sim3-aligned ATE."""
    gt = prob.gt
    K = gt.K
    pts, kf, pt, u, cv = [], [], [], [], []
    for n, (obs, z) in enumerate(zip(prob.tracks, prob.depths)):
        k, i = obs[0]
        u0, _ = prob.measurements(mode, k, i)
        x = K.backproject(np.asarray(u0)[None])[0] * z
        pts.append(gt.poses[k].inverse().apply(x[None])[0])
        for j, b in obs:
            uj, cj = prob.measurements(mode, j, b)
            kf.append(j)
            pt.append(n)
            u.append(uj)
            cv.append(cj)
    fixed = np.zeros(len(gt.poses), dtype=bool)
    fixed[0] = True
    out = bundle_adjust(K, prob.init_poses, fixed, np.array(pts), np.array(kf), np.array(pt), np.array(u), np.array(cv))
    P = np.array([p.center() for p in out.poses])
    return evaluate_ate(gt.timestamps, P, gt.timestamps, gt.centers()).rmse


@dataclass
class ParameterizationResult:
    ate: dict[ParamMode, np.ndarray]

    def mean(self, mode: ParamMode) -> float:
        return float(np.mean(self.ate[mode]))

    def ci95(self, mode: ParamMode) -> tuple[float, float]:
        a = self.ate[mode]
        h = 1.96 * np.std(a, ddof=1) / np.sqrt(len(a)) if len(a) > 1 else 0.0
        return float(a.mean() - h), float(a.mean() + h)

    def improvement(self, mode: ParamMode) -> float:
        """Relative mean-ATE reduction against the EI baseline."""
        base = self.mean(ParamMode.EI)
        return (base - self.mean(mode)) / base if base > 0 else 0.0

    def overlapping(self, a: ParamMode, b: ParamMode) -> bool:
        la, ha = self.ci95(a)
        lb, hb = self.ci95(b)
        return la <= hb and lb <= ha

    def table(self) -> tuple[list[str], list[list]]:
        head = ["mode", "mean_ate", "ci_low", "ci_high", "improvement_vs_EI"]
        rows = [[m.value, self.mean(m), *self.ci95(m), self.improvement(m)] for m in ParamMode]
        return head, rows


def parameterization_world(seed: int, anisotropic: bool = True, frames: int = 12, landmarks: int = 400, anisotropy: float = 4.0, noise: float = 1.0) -> GroundTruth:
    """Orbit world whose keypoint noise follows each blob's shape (or is isotropic)."""
    if anisotropic:
        spec = WorldSpec(seed=seed, n_landmarks=landmarks, n_frames=frames, anisotropy=anisotropy, anisotropic_jitter=noise)
    else:
        spec = WorldSpec(seed=seed, n_landmarks=landmarks, n_frames=frames, keypoint_jitter=noise)
    return generate_world(spec)


def run_parameterization_experiment(
    seeds=range(20), anisotropic: bool = True, adjacent: int = 5, exact: bool = False, worlds=None, **world_kw
) -> ParameterizationResult:
    """Same BA problem per world, solved once for each of EI, EC, MI and MC."""
    worlds = worlds if worlds is not None else [parameterization_world(s, anisotropic, **world_kw) for s in seeds]
    ate = {m: [] for m in ParamMode}
    for n, gt in enumerate(worlds):
        prob = build_parameterization_problem(gt, adjacent, exact=exact, seed=gt.spec.seed)
        for m in ParamMode:
            ate[m].append(solve_parameterization(prob, m))
    return ParameterizationResult({m: np.array(v) for m, v in ate.items()})


# --- loop closure efficacy ---------------------------------------------------------


@dataclass
class DetectionScore:
    revisits: int = 0
    correct: int = 0
    details: list = field(default_factory=list)  # (keyframe, frame, top-1, best)

    @property
    def rate(self) -> float:
        return self.correct / self.revisits if self.revisits else 1.0


def score_loop_detection(events: list[LoopEvent], gt: GroundTruth, min_overlap: float = 0.5) -> DetectionScore:
    """Top-1 accuracy of loop retrieval against ground-truth view overlap.

    A revisit keyframe is one for which some eligible keyframe re-observes at
    least ``min_overlap`` of its claimed landmarks; it counts as correct when
    the first-ranked candidate is the eligible keyframe with the largest overlap.
    """
    score = DetectionScore()
    for e in events:
        if e.keyframe not in e.frame_of:
            continue
        q = e.frame_of[e.keyframe]
        ov = {k: gt.overlap(q, f) for k, f in e.frame_of.items() if k != e.keyframe}
        if not ov:
            continue
        best = max(ov, key=lambda k: (ov[k], -k))
        if ov[best] < min_overlap:
            continue
        top = e.candidates[0] if e.candidates else None
        score.revisits += 1
        score.correct += int(top == best)
        score.details.append((e.keyframe, q, top, best))
    return score


def loop_world(seed: int, n_frames: int = 300, n_landmarks: int = 1500, jitter: float = 0.5) -> GroundTruth:
    """Closed circular path through a landmark ring; drift accrues from keypoint noise."""
    return generate_world(WorldSpec(seed=seed, n_landmarks=n_landmarks, n_frames=n_frames, trajectory="loop", keypoint_jitter=jitter))


@dataclass
class LoopTrial:
    seed: int
    ate_off: float
    ate_on: float
    detection: DetectionScore
    closed: int
    stats_off: dict
    stats_on: dict


def run_loop_trial(gt: GroundTruth, opts: RunOptions | None = None) -> LoopTrial:
    """Loop stage in detect-only mode (trajectory identical to loop off) and fully on."""
    opts = opts or RunOptions()
    vols = list(synthetic_frames(gt))
    out = {}
    for mode in ("detect", "on"):
        o = RunOptions(**{**opts.__dict__, "loop": mode})
        res = run_frames(iter(vols), gt.K, o)
        tr = res.trajectory
        ate = evaluate_ate(tr.timestamps, tr.positions(), gt.timestamps, gt.centers()).rmse
        out[mode] = (res, ate)
    det = score_loop_detection(out["detect"][0].loop_events, gt)
    return LoopTrial(
        gt.spec.seed, out["detect"][1], out["on"][1], det, out["on"][0].stats["loops_closed"], out["detect"][0].stats, out["on"][0].stats
    )


def run_loop_experiment(seeds=range(5), **world_kw) -> list[LoopTrial]:
    return [run_loop_trial(loop_world(s, **world_kw)) for s in seeds]
