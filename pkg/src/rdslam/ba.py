"""Sparse bundle adjustment over keyframe poses and landmark positions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .geometry import CameraIntrinsics, Pose, exp_se3, hat
from .solver import Policy, RobustKernel, SolveOptions, SolveReport, solve

CHI2_2DOF = 5.991
DENSE_SCHUR_LIMIT = 20_000_000  # entries of the (points, pose cols, 3) coupling array


def _accumulate(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum ``values[i]`` into slot ``index[i]``; faster than ``np.add.at`` for block arrays."""
    shape = values.shape[1:]
    d = int(np.prod(shape)) if shape else 1
    flat = (np.asarray(index)[:, None] * d + np.arange(d)[None, :]).ravel()
    out = np.bincount(flat, weights=values.reshape(len(values), d).ravel(), minlength=n * d)
    return out.reshape((n,) + shape)


@dataclass
class BAState:
    poses: list[Pose]
    points: np.ndarray


class BundleProblem:
    """Whitened reprojection residuals for every (pose, point) observation.

    Poses flagged ``fixed`` contribute no columns. Parameter layout is all free
    pose twists (6 each, left perturbation) followed by all points (3 each).
    ``normal_equations`` accumulates the normal system blockwise and
    ``solve_normal`` eliminates the block-diagonal point system (Schur
    complement) so the reduced system is only ``6 * n_free`` wide.
    """

    def __init__(
        self,
        K: CameraIntrinsics,
        fixed: np.ndarray,
        kf_idx: np.ndarray,
        pt_idx: np.ndarray,
        u: np.ndarray,
        covs: np.ndarray,
        n_points: int,
    ):
        self.K = K
        self.fixed = np.asarray(fixed, dtype=bool)
        self.kf_idx = np.asarray(kf_idx, dtype=np.int64)
        self.pt_idx = np.asarray(pt_idx, dtype=np.int64)
        self.u = np.asarray(u, dtype=float)
        self.W = np.linalg.inv(np.linalg.cholesky(np.asarray(covs, dtype=float)))
        self.n_points = n_points
        self.free_col = np.full(len(self.fixed), -1)
        free = np.flatnonzero(~self.fixed)
        self.free_col[free] = np.arange(len(free)) * 6
        self.n_pose_params = 6 * len(free)
        self.n_params = self.n_pose_params + 3 * n_points
        self._pair_cache = None

    def _camera_points(self, x: BAState):
        R = np.array([p.R for p in x.poses])
        t = np.array([p.t for p in x.poses])
        Rk = R[self.kf_idx]
        Xc = np.einsum("nij,nj->ni", Rk, x.points[self.pt_idx]) + t[self.kf_idx]
        return Rk, Xc

    def errors(self, x: BAState):
        """Pixel errors and a positive-depth mask."""
        _, Xc = self._camera_points(x)
        z = Xc[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        uv = np.column_stack([self.K.fx * Xc[:, 0] / zs + self.K.cx, self.K.fy * Xc[:, 1] / zs + self.K.cy])
        return uv - self.u, front

    def chi2(self, x: BAState) -> np.ndarray:
        e, front = self.errors(x)
        r = np.einsum("nij,nj->ni", self.W, e)
        out = np.sum(r * r, axis=1)
        out[~front] = np.inf
        return out

    def evaluate(self, x: BAState, jacobian: bool = True):
        Rk, Xc = self._camera_points(x)
        z = Xc[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        uv = np.column_stack([self.K.fx * Xc[:, 0] / zs + self.K.cx, self.K.fy * Xc[:, 1] / zs + self.K.cy])
        e = uv - self.u
        e[~front] = np.nan
        r = np.einsum("nij,nj->ni", self.W, e)
        if not jacobian:
            return r, None
        n = len(self.u)
        Jp = np.zeros((n, 2, 3))
        Jp[:, 0, 0] = self.K.fx / zs
        Jp[:, 0, 2] = -self.K.fx * Xc[:, 0] / zs**2
        Jp[:, 1, 1] = self.K.fy / zs
        Jp[:, 1, 2] = -self.K.fy * Xc[:, 1] / zs**2
        WJp = self.W @ Jp
        Jt = np.concatenate([np.broadcast_to(np.eye(3), (n, 3, 3)), -hat(Xc)], axis=2)
        J_pose = WJp @ Jt  # (n, 2, 6)
        J_pt = WJp @ Rk  # (n, 2, 3)
        return r, BundleJacobian(self, J_pose, J_pt)

    def retract(self, x: BAState, delta: np.ndarray) -> BAState:
        poses = list(x.poses)
        for i in np.flatnonzero(~self.fixed):
            c = self.free_col[i]
            d = delta[c : c + 6]
            p = exp_se3(d) @ poses[i]
            poses[i] = p
        pts = x.points + delta[self.n_pose_params :].reshape(-1, 3)
        return BAState(poses, pts)

    def _pairs(self):
        """Observation pairs sharing a point, both on free poses (Schur fill-in)."""
        if self._pair_cache is None:
            obs = np.flatnonzero(self.free_col[self.kf_idx] >= 0)
            obs = obs[np.argsort(self.pt_idx[obs], kind="stable")]
            pts = self.pt_idx[obs]
            _, start, count = np.unique(pts, return_index=True, return_counts=True)
            reps = np.repeat(count, count)  # group size for each obs
            a = np.repeat(np.arange(len(obs)), reps)
            first = np.repeat(np.repeat(start, count), reps)
            offs = np.arange(len(a)) - np.repeat(np.cumsum(reps) - reps, reps)
            self._pair_cache = (obs[a], obs[first + offs])
        return self._pair_cache

    def normal_equations(self, r: np.ndarray, J: "BundleJacobian", w: np.ndarray):
        wr = r * w[:, None]
        fc = self.free_col[self.kf_idx]
        sel = fc >= 0
        JtT = J.pt.transpose(0, 2, 1)
        Hll = _accumulate(self.pt_idx, w[:, None, None] * (JtT @ J.pt), self.n_points)
        gl = _accumulate(self.pt_idx, (JtT @ wr[:, :, None])[:, :, 0], self.n_points)
        nf = self.n_pose_params // 6
        Hpp = np.zeros((nf, 6, 6))
        gp = np.zeros((nf, 6))
        Hpl = np.zeros((len(r), 6, 3))
        if sel.any():
            blk = fc[sel] // 6
            JqT = J.pose[sel].transpose(0, 2, 1)
            Hpp = _accumulate(blk, w[sel, None, None] * (JqT @ J.pose[sel]), nf)
            gp = _accumulate(blk, (JqT @ wr[sel][:, :, None])[:, :, 0], nf)
            Hpl[sel] = w[sel, None, None] * (JqT @ J.pt[sel])
        g = np.concatenate([gp.ravel(), gl.ravel()])
        return BundleNormal(Hpp, Hpl, Hll), g

    def solve_normal(self, H: "BundleNormal", g: np.ndarray, lam: float) -> np.ndarray:
        p = self.n_pose_params
        m = self.n_points
        inv = np.linalg.inv(H.Hll + lam * np.eye(3))
        if not np.all(np.isfinite(inv)):
            raise np.linalg.LinAlgError("singular point block")
        gp, gl = g[:p], g[p:].reshape(m, 3)
        if p == 0:
            return -(inv @ gl[:, :, None]).ravel()
        fc = self.free_col[self.kf_idx]
        sel = fc >= 0
        nf = p // 6
        if m * p * 3 <= DENSE_SCHUR_LIMIT:
            # coupling of every point with every free pose column, laid out (m, 3, p)
            flat = (
                self.pt_idx[sel][:, None, None] * (3 * p)
                + np.arange(3)[None, :, None] * p
                + fc[sel][:, None, None]
                + np.arange(6)[None, None, :]
            )
            vals = H.Hpl[sel].transpose(0, 2, 1)
            Z = np.bincount(flat.ravel(), weights=vals.ravel(), minlength=3 * m * p).reshape(3 * m, p)
            TZ = (inv @ Z.reshape(m, 3, p)).reshape(3 * m, p)
            S = -(Z.T @ TZ)
            rhs = -gp + TZ.T @ gl.ravel()
        else:
            a, b = self._pairs()
            T = H.Hpl @ inv[self.pt_idx]
            blocks = T[a] @ H.Hpl[b].transpose(0, 2, 1)
            rows = (fc[a][:, None, None] + np.arange(6)[None, :, None]) * p
            cols = fc[b][:, None, None] + np.arange(6)[None, None, :]
            S = -np.bincount((rows + cols).ravel(), weights=blocks.ravel(), minlength=p * p).reshape(p, p)
            corr = (T[sel] @ gl[self.pt_idx[sel]][:, :, None])[:, :, 0]
            rhs = -gp + _accumulate(fc[sel] // 6, corr, nf).ravel()
        for i in range(nf):
            S[6 * i : 6 * i + 6, 6 * i : 6 * i + 6] += H.Hpp[i]
        S += lam * np.eye(p)
        try:
            dp = cho_solve(cho_factor(S, lower=True, check_finite=False), rhs)
        except np.linalg.LinAlgError:
            dp = np.linalg.lstsq(S, rhs, rcond=None)[0]
        proj = (H.Hpl[sel].transpose(0, 2, 1) @ dp.reshape(-1, 6)[fc[sel] // 6][:, :, None])[:, :, 0]
        back = -gl - _accumulate(self.pt_idx[sel], proj, m)
        dl = (inv @ back[:, :, None])[:, :, 0]
        out = np.concatenate([dp, dl.ravel()])
        if not np.all(np.isfinite(out)):
            raise np.linalg.LinAlgError("non-finite step")
        return out


@dataclass
class BundleJacobian:
    """Per-observation Jacobian blocks; ``tocsr`` gives the assembled matrix."""

    problem: BundleProblem
    pose: np.ndarray  # (n, 2, 6)
    pt: np.ndarray  # (n, 2, 3)

    @property
    def shape(self):
        return (2 * len(self.pt), self.problem.n_params)

    def tocsr(self) -> sp.csr_matrix:
        pr = self.problem
        n = len(self.pt)
        rows2 = (2 * np.arange(n))[:, None] + np.arange(2)[None, :]
        pc = 3 * pr.pt_idx[:, None] + pr.n_pose_params + np.arange(3)[None, :]
        rows = [np.repeat(rows2[:, :, None], 3, axis=2).ravel()]
        cols = [np.broadcast_to(pc[:, None, :], (n, 2, 3)).ravel()]
        vals = [self.pt.ravel()]
        fc = pr.free_col[pr.kf_idx]
        sel = fc >= 0
        if sel.any():
            m = int(sel.sum())
            cc = fc[sel][:, None] + np.arange(6)[None, :]
            rows.append(np.repeat(rows2[sel][:, :, None], 6, axis=2).ravel())
            cols.append(np.broadcast_to(cc[:, None, :], (m, 2, 6)).ravel())
            vals.append(self.pose[sel].ravel())
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=self.shape)

    def toarray(self) -> np.ndarray:
        return self.tocsr().toarray()


@dataclass
class BundleNormal:
    Hpp: np.ndarray  # (n_free, 6, 6) block diagonal
    Hpl: np.ndarray  # (n_obs, 6, 3), zero for fixed-pose observations
    Hll: np.ndarray  # (n_points, 3, 3) block diagonal


@dataclass
class BAResult:
    poses: list[Pose]
    points: np.ndarray
    inliers: np.ndarray
    reports: list[SolveReport] = field(default_factory=list)


def bundle_adjust(
    K: CameraIntrinsics,
    poses: list[Pose],
    fixed: np.ndarray,
    points: np.ndarray,
    kf_idx: np.ndarray,
    pt_idx: np.ndarray,
    u: np.ndarray,
    covs: np.ndarray,
    outer: int = 2,
    inner: int = 10,
    delta: float = float(np.sqrt(CHI2_2DOF)),
    chi2_threshold: float = CHI2_2DOF,
    update_tolerance: float = 1e-6,
) -> BAResult:
    """LM bundle adjustment with chi-square outlier reclassification between rounds.

    The inlier mask returned is over the input observations, evaluated at the
    final estimate; observations behind the camera are always outliers.
    """
    kf_idx = np.asarray(kf_idx)
    pt_idx = np.asarray(pt_idx)
    state = BAState(list(poses), np.array(points, dtype=float).reshape(-1, 3))
    full = BundleProblem(K, fixed, kf_idx, pt_idx, u, covs, len(state.points))
    inlier = np.isfinite(full.chi2(state))
    opts = SolveOptions(max_iterations=inner, update_tolerance=update_tolerance, policy=Policy.LM)
    kernel = RobustKernel("huber", delta)
    reports = []
    for _ in range(outer):
        if not inlier.any():
            break
        sub = BundleProblem(K, fixed, kf_idx[inlier], pt_idx[inlier], u[inlier], covs[inlier], len(state.points))
        state, rep = solve(sub, state, kernel, opts)
        reports.append(rep)
        inlier = full.chi2(state) < chi2_threshold
    return BAResult(state.poses, state.points, inlier, reports)
