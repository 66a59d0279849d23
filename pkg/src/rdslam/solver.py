"""Robust Gauss-Newton / Levenberg-Marquardt for problems on manifolds.

A problem exposes whitened residual blocks and their Jacobian; the solver owns
robust reweighting, damping and step control. Parameters are opaque to the
solver: the problem's ``retract`` applies a tangent-space update.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    pass


class Policy(enum.Enum):
    GN = "gn"
    LM = "lm"


@dataclass(frozen=True)
class RobustKernel:
    kind: str = "huber"
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("huber", "none"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise ValueError("huber delta must be positive")

    @classmethod
    def none(cls) -> "RobustKernel":
        return cls("none", 1.0)

    def weights(self, norms: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return np.ones_like(norms)
        return huber_weights(norms, self.delta)

    def cost(self, norms: np.ndarray) -> float:
        """Sum of ``rho(|r|)``, with ``rho(s) = s^2`` inside the quadratic region."""
        if self.kind == "none":
            return float(np.sum(norms**2))
        d = self.delta
        inside = norms <= d
        return float(np.sum(np.where(inside, norms**2, 2.0 * d * norms - d * d)))


def huber_weight(residual_norm: float, delta: float) -> float:
    if residual_norm <= delta:
        return 1.0
    return delta / residual_norm


def huber_weights(norms: np.ndarray, delta: float) -> np.ndarray:
    norms = np.asarray(norms, dtype=float)
    return np.where(norms <= delta, 1.0, delta / np.maximum(norms, 1e-300))


@dataclass
class SolveOptions:
    max_iterations: int = 30
    update_tolerance: float = 1e-6
    damping_init: float = 1e-4
    policy: Policy = Policy.LM
    max_halvings: int = 5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.update_tolerance > 0:
            raise ValueError("update_tolerance must be positive")


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    converged: bool = False
    cost_trace: list[float] = field(default_factory=list)


class Problem(Protocol):
    """Residual-and-Jacobian provider.

    ``evaluate`` returns whitened residual blocks of shape ``(m, b)`` and the
    Jacobian of the flattened residual vector w.r.t. the tangent update, shape
    ``(m*b, n)``, dense or scipy sparse. A block's robust weight is computed
    from its norm, so the norm must already be the Mahalanobis distance.

    Optional hooks: ``normal_equations(r, J, w) -> (H, g)`` replaces the
    generic ``J^T W J`` assembly and ``solve_normal(H, g, lam)`` the damped
    linear solve; a problem providing the first must provide the second.
    """

    def evaluate(self, x: Any, jacobian: bool = True) -> tuple[np.ndarray, Any]: ...

    def retract(self, x: Any, delta: np.ndarray) -> Any: ...


def _normal_equations(r: np.ndarray, J, w: np.ndarray):
    b = r.shape[1]
    wr = (r * w[:, None]).ravel()
    wrow = np.repeat(w, b)
    if sp.issparse(J):
        WJ = sp.diags(wrow) @ J
        H = (J.T @ WJ).tocsc()
        g = J.T @ wr
    else:
        WJ = J * wrow[:, None]
        H = J.T @ WJ
        g = J.T @ wr
    return H, np.asarray(g).ravel()


def _solve_linear(H, g: np.ndarray, lam: float) -> np.ndarray:
    n = H.shape[0]
    if sp.issparse(H):
        A = (H + lam * sp.identity(n, format="csc")).tocsc()
        delta = spla.spsolve(A, -g)
    else:
        A = H + lam * np.eye(n)
        try:
            c, low = _cho_factor(A)
            from scipy.linalg import cho_solve

            delta = cho_solve((c, low), -g)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(A, -g, rcond=None)[0]
    if not np.all(np.isfinite(delta)):
        raise np.linalg.LinAlgError("non-finite step")
    return delta


def _cho_factor(A):
    from scipy.linalg import cho_factor

    return cho_factor(A, lower=True, check_finite=False)


def robust_cost(problem: Problem, x: Any, kernel: RobustKernel) -> float:
    r, _ = problem.evaluate(x, jacobian=False)
    return kernel.cost(np.linalg.norm(r, axis=1)) if len(r) else 0.0


def solve(problem: Problem, initial: Any, kernel: RobustKernel, opts: SolveOptions | None = None):
    """Minimize ``sum rho(|r_i|)`` starting from ``initial``.

    Returns ``(x, SolveReport)``. Under the LM policy a step is accepted only
    if it lowers the robust cost, so ``final_cost <= initial_cost`` always.
    Under GN, a cost increase triggers step halving; if every halving fails
    the solver stops at the current point and reports convergence. Hitting
    ``max_iterations`` never does.

    Raises:
        SolverError: on non-finite residuals or an unsolvable normal system.
    """
    opts = opts or SolveOptions()
    solve_normal = getattr(problem, "solve_normal", None)
    normal_equations = getattr(problem, "normal_equations", None) or _normal_equations
    x = initial
    r, J = problem.evaluate(x)
    if not np.all(np.isfinite(r)):
        raise SolverError("non-finite residual at initial point")
    norms = np.linalg.norm(r, axis=1) if len(r) else np.zeros(0)
    cost = kernel.cost(norms)
    report = SolveReport(initial_cost=cost, final_cost=cost, cost_trace=[cost])
    if len(r) == 0:
        report.converged = True
        return x, report
    lam = opts.damping_init if opts.policy is Policy.LM else 0.0

    for it in range(opts.max_iterations):
        report.iterations = it + 1
        w = kernel.weights(norms)
        H, g = normal_equations(r, J, w)
        accepted = False
        step_norm = 0.0
        for _attempt in range(12):
            try:
                if solve_normal is not None:
                    delta = solve_normal(H, g, lam)
                else:
                    delta = _solve_linear(H, g, lam)
            except (np.linalg.LinAlgError, RuntimeError) as exc:
                if opts.policy is Policy.LM and lam < 1e12:
                    lam = max(lam * 10.0, 1e-6)
                    continue
                if opts.policy is Policy.GN and lam == 0.0:
                    lam = 1e-6
                    continue
                raise SolverError("singular normal equations") from exc
            step_norm = float(np.linalg.norm(delta))
            if opts.policy is Policy.GN:
                scale = 1.0
                for _h in range(opts.max_halvings + 1):
                    x_new = problem.retract(x, scale * delta)
                    r_new, _ = problem.evaluate(x_new, jacobian=False)
                    if np.all(np.isfinite(r_new)):
                        c_new = kernel.cost(np.linalg.norm(r_new, axis=1))
                        if c_new <= cost:
                            accepted = True
                            step_norm *= scale
                            break
                    scale *= 0.5
                break
            x_new = problem.retract(x, delta)
            r_new, _ = problem.evaluate(x_new, jacobian=False)
            if np.all(np.isfinite(r_new)):
                c_new = kernel.cost(np.linalg.norm(r_new, axis=1))
                if c_new <= cost:
                    accepted = True
                    lam = max(lam / 10.0, 1e-12)
                    break
            if step_norm < opts.update_tolerance:
                break
            lam *= 10.0
            if lam > 1e12:
                break

        if not accepted:
            # GN: no descent along the step down to the smallest halving, a numerical
            # local minimum. LM: only a vanishing step or gradient counts.
            report.converged = (
                opts.policy is Policy.GN
                or step_norm < opts.update_tolerance
                or float(np.max(np.abs(g))) < 1e-12
            )
            break
        x = x_new
        r, J = problem.evaluate(x)
        norms = np.linalg.norm(r, axis=1)
        cost = kernel.cost(norms)
        report.cost_trace.append(cost)
        if step_norm < opts.update_tolerance:
            report.converged = True
            break
    report.final_cost = cost
    return x, report


def numerical_jacobian(problem: Problem, x: Any, n: int, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the flattened residual w.r.t. the tangent update."""
    r0, _ = problem.evaluate(x, jacobian=False)
    J = np.zeros((r0.size, n))
    for k in range(n):
        d = np.zeros(n)
        d[k] = step
        rp, _ = problem.evaluate(problem.retract(x, d), jacobian=False)
        rm, _ = problem.evaluate(problem.retract(x, -d), jacobian=False)
        J[:, k] = (rp - rm).ravel() / (2.0 * step)
    return J


def jacobian_relative_error(problem: Problem, x: Any, n: int, step: float = 1e-6) -> float:
    """Max relative deviation between analytic and central-difference Jacobians."""
    _, Ja = problem.evaluate(x)
    Ja = Ja.toarray() if hasattr(Ja, "toarray") else np.asarray(Ja)
    Jn = numerical_jacobian(problem, x, n, step)
    scale = max(float(np.abs(Jn).max()), 1e-12)
    return float(np.abs(Ja - Jn).max() / scale)
