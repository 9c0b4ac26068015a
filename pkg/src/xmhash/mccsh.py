"""Stage 1: joint binary codes maximally correlated with every modality's embedding.

Minimizes ``sum_m Tr(Y^m' Lap^m Y^m) - alpha Tr(B' Y^m)`` subject to binary,
independent, balanced ``B`` and ``Y^m' Y^m = N I`` by alternating

* a B-step: the penalized binary problem solved with an exact penalty on the
  bilinear reformulation ``Tr(B'V) = NL`` (projected gradient on the box), and
* a Y-step per modality: an augmented Lagrangian on the orthogonality
  constraint, warm-started from the previous Y.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .spectral import init_embeddings

log = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class EpmConfig:
    rho0: float = 0.1
    sigma_growth: float = 1.05
    eta: float = 0.01
    inner_max_iters: int = 200
    inner_tol: float = 1e-6
    max_outer: int = 1000
    binary_tol: float = 1e-4
    backtrack: bool = True
    warm_start: bool = True
    init_scale: float = 1e-6     # magnitude of the seeded cold-start B
    seed: int = 0

    def __post_init__(self):
        if not self.rho0 > 0:
            raise ValueError("rho0 must be > 0")
        if not self.sigma_growth > 1:
            raise ValueError("sigma_growth must be > 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.inner_max_iters < 1 or self.max_outer < 1:
            raise ValueError("iteration budgets must be >= 1")


@dataclass
class AlConfig:
    mu0: float = 0.01
    mu_growth: float = 2.0
    eps: float = 1e-3
    t_max: int = 60
    inner_max_iters: int = 500
    inner_gtol: float = 1e-6
    feasibility_tol: float = 1e-3

    def __post_init__(self):
        if not self.mu0 > 0:
            raise ValueError("mu0 must be > 0")
        if not self.mu_growth > 1:
            raise ValueError("mu_growth must be > 1")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")


@dataclass
class MccshConfig:
    L: int = 16
    alpha: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    outer_max_iters: int = 20
    outer_tol: float = 1e-5
    init_max_rounds: int = 50
    epm: EpmConfig = field(default_factory=EpmConfig)
    al: AlConfig = field(default_factory=AlConfig)

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("code length L must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if isinstance(self.epm, dict):
            self.epm = EpmConfig(**self.epm)
        if isinstance(self.al, dict):
            self.al = AlConfig(**self.al)


# ---------------------------------------------------------------- objectives


def _check_pair(B, Y):
    if B.shape != Y.shape:
        raise ValueError(f"shape mismatch: B {B.shape} vs Y {Y.shape}")


def objective_j(B, Y, Lap, alpha) -> float:
    """``Tr(Y' Lap Y) - alpha Tr(B' Y)`` for one modality."""
    B, Y, Lap = (np.asarray(a, dtype=np.float64) for a in (B, Y, Lap))
    _check_pair(B, Y)
    if Lap.shape != (Y.shape[0], Y.shape[0]):
        raise ValueError(f"Laplacian shape {Lap.shape} does not match N={Y.shape[0]}")
    return float(np.einsum("ij,ij->", Y, Lap @ Y) - alpha * np.einsum("ij,ij->", B, Y))


def total_objective(B, Ys, laps, alpha) -> float:
    return sum(objective_j(B, Y, Lap, alpha) for Y, Lap in zip(Ys, laps))


def code_penalties(B, lambda1, lambda2) -> float:
    N, L = B.shape
    G = B.T @ B
    G[np.diag_indices(L)] -= N
    col = B.sum(axis=0)
    return 0.25 * lambda1 * float((G * G).sum()) + 0.5 * lambda2 * float(col @ col)


def loss_b(B, Ys, lambda1, lambda2) -> float:
    """Penalized binary objective ``-sum Tr(B'Y^m) + l1/4 |B'B-NI|^2 + l2/2 |B'1|^2``."""
    B = np.asarray(B, dtype=np.float64)
    Ysum = np.sum(Ys, axis=0)
    _check_pair(B, Ysum)
    return -float(np.einsum("ij,ij->", B, Ysum)) + code_penalties(B, lambda1, lambda2)


def q_value(B, Ysum, lambda1, lambda2, rho, V) -> float:
    N, L = B.shape
    return (-float(np.einsum("ij,ij->", B, Ysum)) + code_penalties(B, lambda1, lambda2)
            + rho * (N * L - float(np.einsum("ij,ij->", B, V))))


def grad_q(B, Ys, lambda1, lambda2, rho=0.0, V=None) -> np.ndarray:
    """Gradient of the exact-penalty objective with respect to B.

    ``-sum Y^m + l1 B (B'B - N I) + l2 1 1' B - rho V``; the all-ones term is
    formed from column sums, never as an N x N matrix.
    """
    B = np.asarray(B, dtype=np.float64)
    Ysum = Ys if isinstance(Ys, np.ndarray) and Ys.ndim == 2 else np.sum(Ys, axis=0)
    _check_pair(B, Ysum)
    N, L = B.shape
    G = B.T @ B
    G[np.diag_indices(L)] -= N
    g = -Ysum + lambda1 * (B @ G) + lambda2 * B.sum(axis=0, keepdims=True)
    if V is not None and rho:
        g = g - rho * V
    return g


def snap(B) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    return np.where(np.asarray(B) >= 0, 1.0, -1.0)


# ------------------------------------------------------------------- B-step


@dataclass
class EpmResult:
    B: np.ndarray
    B_relaxed: np.ndarray
    converged: bool
    outer_iters: int
    inner_iters: int
    norm_trace: list
    q_monotone: bool


def update_b_epm(Ys, config: Optional[EpmConfig] = None, lambda1=1.0, lambda2=1.0,
                 B_init=None) -> EpmResult:
    """Binary B minimizing the penalized code loss via the exact penalty method.

    Alternates projected gradient descent on the box ``[-1, 1]`` (step ``eta``,
    halved while the penalized objective would increase), the closed-form
    ``V = sqrt(NL) B / |B|_F`` and ``rho *= sigma_growth`` until every entry is
    within ``binary_tol`` of +-1.  The relaxed iterate is then snapped by sign.
    """
    cfg = config or EpmConfig()
    Ysum = np.sum([np.asarray(Y, dtype=np.float64) for Y in Ys], axis=0)
    N, L = Ysum.shape
    sqrt_nl = np.sqrt(N * L)
    if B_init is None:
        # B = 0 is stationary whenever sum Y^m = 0 (then V stays 0 too), so a
        # cold start gets a tiny seeded perturbation
        B = cfg.init_scale * np.random.default_rng(cfg.seed).uniform(-1.0, 1.0, (N, L))
    else:
        B = np.clip(np.asarray(B_init, dtype=np.float64), -1.0, 1.0)
        _check_pair(B, Ysum)
    V = np.zeros((N, L))
    rho = cfg.rho0
    inner_total = 0
    norm_trace = []
    monotone = True
    converged = False
    outer = 0
    # target W = Ysum + rho V is linear in B, so Q(B) = -<B, W> + penalties + rho N L
    eyeN = N * np.eye(L)

    def _state(Bx):
        G = Bx.T @ Bx - eyeN
        col = Bx.sum(axis=0)
        pen = 0.25 * lambda1 * float((G * G).sum()) + 0.5 * lambda2 * float(col @ col)
        return G, col, pen

    for outer in range(1, cfg.max_outer + 1):
        W = Ysum + rho * V
        const = rho * N * L
        G, col, pen = _state(B)
        q = -float(np.einsum("ij,ij->", B, W)) + pen + const
        for _ in range(cfg.inner_max_iters):
            inner_total += 1
            g = -W + lambda1 * (B @ G) + lambda2 * col
            step = cfg.eta
            while True:
                Bn = np.clip(B - step * g, -1.0, 1.0)
                Gn, coln, penn = _state(Bn)
                qn = -float(np.einsum("ij,ij->", Bn, W)) + penn + const
                if qn <= q or not cfg.backtrack:
                    break
                step *= 0.5
                if step < 1e-14:
                    Bn, qn, Gn, coln = B, q, G, col
                    break
            if qn > q:
                monotone = False
            delta = np.abs(Bn - B).max()
            B, q, G, col = Bn, qn, Gn, coln
            if delta < cfg.inner_tol:
                break
        nrm = np.linalg.norm(B)
        norm_trace.append(float(nrm))
        V = (sqrt_nl / nrm) * B if nrm > 0 else np.zeros_like(B)
        rho *= cfg.sigma_growth
        if np.max(1.0 - np.abs(B)) < cfg.binary_tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"EPM did not reach binary values within {cfg.max_outer} outer iterations; "
                      "returning the sign-snapped iterate", ConvergenceWarning, stacklevel=2)
    return EpmResult(snap(B), B, converged, outer, inner_total, norm_trace, monotone)


# ------------------------------------------------------------------- Y-step


def al_loss(Y, Lap, B, alpha, Gamma, mu) -> float:
    """Augmented Lagrangian ``J - Tr(Gamma' Phi) + mu/2 |Phi|^2``, ``Phi = Y'Y - N I``."""
    N, L = Y.shape
    Phi = Y.T @ Y - N * np.eye(L)
    return (objective_j(B, Y, Lap, alpha) - float(np.einsum("ij,ij->", Gamma, Phi))
            + 0.5 * mu * float((Phi * Phi).sum()))


def al_grad(Y, Lap, B, alpha, Gamma, mu) -> np.ndarray:
    """``2 Lap Y - alpha B - 2 Y Gamma + 2 mu Y Phi`` for symmetric Gamma."""
    N, L = Y.shape
    Phi = Y.T @ Y - N * np.eye(L)
    return 2.0 * (Lap @ Y) - alpha * B - 2.0 * (Y @ Gamma) + 2.0 * mu * (Y @ Phi)


def initial_multiplier(Y0, Lap, B, alpha) -> np.ndarray:
    """Stationarity-based multiplier at a feasible start, symmetrized.

    Only the symmetric part of Gamma enters the loss since Phi is symmetric.
    """
    G = np.linalg.solve(Y0.T @ Y0, Y0.T @ (Lap @ Y0 - 0.5 * alpha * B))
    return 0.5 * (G + G.T)


def _al_parts(Y, LY, B, alpha, Gamma, mu):
    """AL value and gradient from a precomputed ``Lap @ Y``."""
    N, L = Y.shape
    Phi = Y.T @ Y - N * np.eye(L)
    f = (float(np.einsum("ij,ij->", Y, LY)) - alpha * float(np.einsum("ij,ij->", B, Y))
         - float(np.einsum("ij,ij->", Gamma, Phi)) + 0.5 * mu * float((Phi * Phi).sum()))
    return f, Phi


def _minimize_al(Y, Lap, B, alpha, Gamma, mu, max_iters, gtol):
    """Gradient descent with Barzilai-Borwein trial steps and Armijo backtracking.

    ``Lap @ Y`` is carried along; a trial point reuses ``Lap @ g`` so
    backtracking needs no extra products with the Laplacian.
    """
    LY = Lap @ Y
    f, Phi = _al_parts(Y, LY, B, alpha, Gamma, mu)
    g = 2.0 * LY - alpha * B - 2.0 * (Y @ Gamma) + 2.0 * mu * (Y @ Phi)
    step = 1.0 / (2.0 + 2.0 * mu * Y.shape[0] + np.abs(Gamma).sum())
    it = 0
    for it in range(1, max_iters + 1):
        gg = float((g * g).sum())
        if np.sqrt(gg) <= gtol:
            break
        Lg = Lap @ g
        t = step
        while True:
            Yn = Y - t * g
            LYn = LY - t * Lg
            fn, Phin = _al_parts(Yn, LYn, B, alpha, Gamma, mu)
            if fn <= f - 1e-4 * t * gg:
                break
            t *= 0.5
            if t < 1e-16:
                return Y, f, it
        gn = 2.0 * LYn - alpha * B - 2.0 * (Yn @ Gamma) + 2.0 * mu * (Yn @ Phin)
        s, yv = Yn - Y, gn - g
        sy = float((s * yv).sum())
        step = float((s * s).sum()) / sy if sy > 0 else 2.0 * t
        Y, LY, f, g = Yn, LYn, fn, gn
        if it % 50 == 0:
            # refresh to keep the carried product from drifting
            LY = Lap @ Y
    return Y, f, it


@dataclass
class AlResult:
    Y: np.ndarray
    J: float
    residual: float
    feasible: bool
    iterations: int
    inner_iterations: int
    residual_trace: list
    j_trace: list


def update_y_al(Lap, B, alpha, Y_init, config: Optional[AlConfig] = None) -> AlResult:
    """Solve ``min Tr(Y'LapY) - alpha Tr(B'Y)  s.t.  Y'Y = N I`` by augmented Lagrangian.

    Stops once the objective changes by less than ``eps * N * L`` between outer
    iterations *and* ``|Y'Y - N I|_F <= feasibility_tol * N``.
    """
    cfg = config or AlConfig()
    Lap = np.asarray(Lap, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    Y = np.array(Y_init, dtype=np.float64, copy=True)
    _check_pair(B, Y)
    N, L = Y.shape
    eye = np.eye(L)
    mu = cfg.mu0
    Gamma = initial_multiplier(Y, Lap, B, alpha)
    J = objective_j(B, Y, Lap, alpha)
    gscale = np.sqrt(N * L)
    feas_tol = cfg.feasibility_tol * N
    residual = float(np.linalg.norm(Y.T @ Y - N * eye))
    res_trace, j_trace = [residual], [J]
    inner_total = 0
    t = 0
    for t in range(1, cfg.t_max + 1):
        Y, _, n_inner = _minimize_al(Y, Lap, B, alpha, Gamma, mu, cfg.inner_max_iters,
                                     cfg.inner_gtol * gscale * (1.0 + mu * N))
        inner_total += n_inner
        Phi = Y.T @ Y - N * eye
        residual = float(np.linalg.norm(Phi))
        J_new = objective_j(B, Y, Lap, alpha)
        res_trace.append(residual)
        j_trace.append(J_new)
        done = abs(J_new - J) < cfg.eps * N * L and residual <= feas_tol
        J = J_new
        if done:
            break
        Gamma = Gamma - mu * Phi
        mu *= cfg.mu_growth
    feasible = residual <= feas_tol
    if not feasible:
        warnings.warn(f"augmented Lagrangian stopped with residual {residual:.3g} > {feas_tol:.3g}",
                      ConvergenceWarning, stacklevel=2)
    return AlResult(Y, J, residual, feasible, t, inner_total, res_trace, j_trace)


# -------------------------------------------------------------------- driver


@dataclass
class BinaryCodes:
    B: np.ndarray
    B_relaxed: np.ndarray
    objective_trace: list
    surrogate_trace: list
    per_modality_trace: list
    epm_iterations: list
    al_iterations: list
    al_residuals: list
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.float64)


def surrogate_objective(B, Ys, laps, alpha, lambda1, lambda2) -> float:
    """``sum_m J(B, Y^m) + alpha * code_penalties(B)``: the quantity both steps decrease."""
    return total_objective(B, Ys, laps, alpha) + alpha * code_penalties(B, lambda1, lambda2)


def run_mccsh(laplacians, config: Optional[MccshConfig] = None):
    """Alternate B- and Y-steps from rotation-aligned spectral embeddings.

    A step whose result is worse than the current iterate (on the penalized
    code loss for B, on ``J`` for a feasible Y) is rejected, so the surrogate
    trace never increases.

    Returns
    -------
    codes : BinaryCodes
    Ys : list of (N, L) embeddings at termination
    """
    cfg = config or MccshConfig()
    laps = [np.asarray(Lap, dtype=np.float64) for Lap in laplacians]
    N = laps[0].shape[0]
    L = cfg.L
    embeddings, _ = init_embeddings(laps, L, max_rounds=cfg.init_max_rounds)
    Ys = [e.Y for e in embeddings]
    B = None
    B_relaxed = None
    obj_trace, sur_trace, per_mod, epm_iters, al_iters, al_res, notes = [], [], [], [], [], [], []
    scale = N * L * len(laps)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        for it in range(cfg.outer_max_iters):
            start = B_relaxed if (cfg.epm.warm_start and B_relaxed is not None) else None
            res = update_b_epm(Ys, cfg.epm, cfg.lambda1, cfg.lambda2, B_init=start)
            if B is None or loss_b(res.B, Ys, cfg.lambda1, cfg.lambda2) <= loss_b(B, Ys, cfg.lambda1, cfg.lambda2):
                B, B_relaxed = res.B, res.B_relaxed
            epm_iters.append(res.outer_iters)
            iters, resids = [], []
            for m, Lap in enumerate(laps):
                out = update_y_al(Lap, B, cfg.alpha, Ys[m], cfg.al)
                if out.feasible and out.J <= objective_j(B, Ys[m], Lap, cfg.alpha):
                    Ys[m] = out.Y
                iters.append(out.iterations)
                resids.append(out.residual)
            al_iters.append(iters)
            al_res.append(resids)
            js = [objective_j(B, Y, Lap, cfg.alpha) for Y, Lap in zip(Ys, laps)]
            per_mod.append(js)
            obj_trace.append(sum(js))
            sur_trace.append(sum(js) + cfg.alpha * code_penalties(B, cfg.lambda1, cfg.lambda2))
            log.debug("mccsh iter %d: J=%.6g surrogate=%.6g", it, obj_trace[-1], sur_trace[-1])
            if len(sur_trace) > 1 and abs(sur_trace[-1] - sur_trace[-2]) < cfg.outer_tol * scale:
                break
    notes = [str(w.message) for w in caught]
    codes = BinaryCodes(B, B_relaxed, obj_trace, sur_trace, per_mod, epm_iters, al_iters, al_res, notes)
    return codes, Ys
