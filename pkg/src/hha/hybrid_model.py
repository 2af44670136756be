"""Recurrent-only switching linear dynamical system.

Discrete modes are emitted by a softmax over the current continuous state and
control, and each mode owns an affine Gaussian dynamics model::

    P(z[t+1] | x[t], u[t]) = softmax(W_x x[t] + W_u u[t] + r)
    x[t+1] = A[z] x[t] + B[z] u[t] + b[z] + noise,  noise ~ N(0, diag(Q[z]))

Observations are the states themselves (identity emissions). Parameters are
estimated by hard EM: Viterbi mode assignment alternated with ridge
regression per mode and softmax regression for the recurrence weights.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import log_softmax, logsumexp

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class HybridSystemParams:
    """Point estimate of every rSLDS parameter.

    Shapes: ``A (K, M, M)``, ``B (K, M, N)``, ``b (K, M)``, ``Q (K, M)``,
    ``W_x (K, M)``, ``W_u (K, N)``, ``r (K,)``, ``S (M,)``.
    """

    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    W_x: np.ndarray
    W_u: np.ndarray
    r: np.ndarray
    S: np.ndarray = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        self.W_x = np.asarray(self.W_x, dtype=float)
        self.W_u = np.asarray(self.W_u, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        if self.S is None:
            self.S = np.full(self.A.shape[1], 1e-6)
        self.S = np.asarray(self.S, dtype=float)
        self.validate()

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def M(self) -> int:
        return self.A.shape[1]

    @property
    def N(self) -> int:
        return self.B.shape[2]

    def validate(self):
        K, M = self.A.shape[:2]
        if self.A.shape != (K, M, M):
            raise ValueError(f"A has shape {self.A.shape}, expected (K, M, M)")
        if self.B.ndim != 3 or self.B.shape[:2] != (K, M):
            raise ValueError(f"B has shape {self.B.shape}, expected (K, M, N)")
        N = self.B.shape[2]
        expected = {
            "b": (K, M),
            "Q": (K, M),
            "W_x": (K, M),
            "W_u": (K, N),
            "r": (K,),
            "S": (M,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        for name in ("A", "B", "b", "Q", "W_x", "W_u", "r", "S"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")
        if np.any(self.Q <= 0) or np.any(self.S <= 0):
            raise ValueError("noise variances must be strictly positive")

    def copy(self) -> "HybridSystemParams":
        return HybridSystemParams(
            self.A.copy(), self.B.copy(), self.b.copy(), self.Q.copy(),
            self.W_x.copy(), self.W_u.copy(), self.r.copy(), self.S.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "M": self.M,
            "N": self.N,
            "modes": [
                {
                    "A": self.A[k].tolist(),
                    "B": self.B[k].tolist(),
                    "b": self.b[k].tolist(),
                    "Q": self.Q[k].tolist(),
                }
                for k in range(self.K)
            ],
            "recurrence": {
                "W_x": self.W_x.tolist(),
                "W_u": self.W_u.tolist(),
                "r": self.r.tolist(),
            },
            "emission": {"S": self.S.tolist()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HybridSystemParams":
        K, M, N = int(doc["K"]), int(doc["M"]), int(doc["N"])
        modes = doc["modes"]
        if len(modes) != K:
            raise ValueError(f"document lists {len(modes)} modes, header says {K}")
        rec = doc["recurrence"]
        params = cls(
            A=np.array([m["A"] for m in modes], dtype=float).reshape(K, M, M),
            B=np.array([m["B"] for m in modes], dtype=float).reshape(K, M, N),
            b=np.array([m["b"] for m in modes], dtype=float).reshape(K, M),
            Q=np.array([m["Q"] for m in modes], dtype=float).reshape(K, M),
            W_x=np.array(rec["W_x"], dtype=float).reshape(K, M),
            W_u=np.array(rec["W_u"], dtype=float).reshape(K, N),
            r=np.array(rec["r"], dtype=float).reshape(K),
            S=np.array(doc.get("emission", {}).get("S", [1e-6] * M), dtype=float),
        )
        return params

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "HybridSystemParams":
        return cls.from_dict(json.loads(text))


@dataclass
class Trajectory:
    """Aligned time series. ``controls[t]`` is the input applied at ``states[t]``."""

    states: np.ndarray
    controls: np.ndarray
    modes: np.ndarray = None
    rewards: np.ndarray = None
    switch_flags: np.ndarray = field(default=None)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        L = self.states.shape[0]
        self.controls = np.asarray(self.controls, dtype=float).reshape(L, -1)
        self.modes = (
            np.zeros(L, dtype=int) if self.modes is None else np.asarray(self.modes, dtype=int)
        )
        self.rewards = (
            np.zeros(L) if self.rewards is None else np.asarray(self.rewards, dtype=float)
        )
        if self.switch_flags is None:
            self.switch_flags = switch_flags_from_modes(self.modes)
        self.switch_flags = np.asarray(self.switch_flags, dtype=bool)
        if not (len(self.modes) == len(self.rewards) == len(self.switch_flags) == L):
            raise ValueError("trajectory fields must have equal length")
        if L and np.any(self.modes < 0):
            raise ValueError("mode indices must be non-negative")

    def __len__(self):
        return self.states.shape[0]


def switch_flags_from_modes(modes) -> np.ndarray:
    modes = np.asarray(modes)
    flags = np.zeros(len(modes), dtype=bool)
    if len(modes) > 1:
        flags[1:] = modes[1:] != modes[:-1]
    return flags


def _logits(x, u, params: HybridSystemParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != params.M or u.shape[-1] != params.N:
        raise ValueError(
            f"expected x with {params.M} and u with {params.N} trailing entries, "
            f"got {x.shape} and {u.shape}"
        )
    return x @ params.W_x.T + u @ params.W_u.T + params.r


def mode_transition_probs(x, u, params: HybridSystemParams) -> np.ndarray:
    """Softmax over modes for the next step; works on single points or batches."""
    v = _logits(x, u, params)
    v = v - v.max(axis=-1, keepdims=True)
    e = np.exp(v)
    return e / e.sum(axis=-1, keepdims=True)


def most_likely_mode(x, u, params: HybridSystemParams) -> int:
    # np.argmax returns the first maximum, which gives the lowest-index tie-break
    return int(np.argmax(_logits(x, u, params)))


def classify(states, controls, params: HybridSystemParams) -> np.ndarray:
    """Vectorized most_likely_mode over rows."""
    return np.argmax(_logits(states, controls, params), axis=-1)


def step_dynamics(x, u, z: int, params: HybridSystemParams, noise_seed=None) -> np.ndarray:
    if not 0 <= int(z) < params.K:
        raise ValueError(f"mode index {z} outside [0, {params.K})")
    z = int(z)
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    mean = params.A[z] @ x + params.B[z] @ u + params.b[z]
    if noise_seed is None:
        return mean
    rng = np.random.default_rng(noise_seed)
    return mean + rng.standard_normal(params.M) * np.sqrt(params.Q[z])


def simulate(
    params: HybridSystemParams,
    x0,
    control_sequence,
    seed=None,
    deterministic: bool = False,
) -> Trajectory:
    """Roll the generative model forward from ``x0``.

    With ``deterministic=True`` process noise is switched off and each next
    mode is the argmax of the recurrence instead of a categorical draw.
    """
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=float)
    controls = np.asarray(control_sequence, dtype=float).reshape(-1, params.N)
    T = controls.shape[0]
    states = np.empty((T + 1, params.M))
    modes = np.empty(T + 1, dtype=int)
    states[0] = x0

    def draw(p):
        if deterministic:
            return int(np.argmax(p))
        return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), params.K - 1))

    modes[0] = draw(mode_transition_probs(x0, np.zeros(params.N), params))
    for t in range(T):
        x, u, z = states[t], controls[t], modes[t]
        states[t + 1] = step_dynamics(x, u, z, params, None if deterministic else rng)
        modes[t + 1] = draw(mode_transition_probs(x, u, params))
    padded = np.vstack([controls, np.zeros((1, params.N))])
    return Trajectory(states, padded, modes)


def _dynamics_loglik(params: HybridSystemParams, X, U, Xn) -> np.ndarray:
    """Per-mode Gaussian log-density of each transition, shape (n, K)."""
    pred = np.einsum("kij,nj->nki", params.A, X) + np.einsum("kij,nj->nki", params.B, U)
    pred += params.b[None]
    res = Xn[:, None, :] - pred
    return -0.5 * (np.sum(np.log(params.Q), axis=1)[None] + params.M * LOG_2PI) - 0.5 * np.sum(
        res**2 / params.Q[None], axis=2
    )


def _recurrence_logprob(params: HybridSystemParams, X, U) -> np.ndarray:
    return log_softmax(_logits(X, U, params), axis=-1)


def log_likelihood(params: HybridSystemParams, trajectory: Trajectory) -> float:
    """Complete-data log density of ``trajectory`` given its mode labels."""
    if np.any(params.Q <= 0):
        raise ValueError("process noise variances must be positive")
    L = len(trajectory)
    if L < 2:
        return 0.0
    z = trajectory.modes
    if np.any(z >= params.K):
        raise ValueError("trajectory carries mode labels outside [0, K)")
    X, U, Xn = trajectory.states[:-1], trajectory.controls[:-1], trajectory.states[1:]
    idx = np.arange(L - 1)
    gauss = _dynamics_loglik(params, X, U, Xn)[idx, z[:-1]]
    trans = _recurrence_logprob(params, X, U)[idx, z[1:]]
    return float(gauss.sum() + trans.sum())


def viterbi(log_emission: np.ndarray, log_transition: np.ndarray) -> np.ndarray:
    """Most probable state path.

    ``log_emission`` is (L, K); ``log_transition[t, i, j]`` scores moving from
    state ``i`` at ``t`` to ``j`` at ``t + 1`` and has shape (L - 1, K, K).
    """
    L, K = log_emission.shape
    score = log_emission[0].copy()
    back = np.zeros((L, K), dtype=int)
    for t in range(1, L):
        cand = score[:, None] + log_transition[t - 1]
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(K)] + log_emission[t]
    path = np.empty(L, dtype=int)
    path[-1] = int(np.argmax(score))
    for t in range(L - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


# --- softmax regression ---------------------------------------------------


def softmax_regression_loglik(W: np.ndarray, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean log-likelihood; ``W`` is (K, D + 1) with the bias in the last column."""
    logits = features @ W[:, :-1].T + W[:, -1]
    return float(np.mean(logits[np.arange(len(labels)), labels] - logsumexp(logits, axis=1)))


def softmax_regression_grad(W: np.ndarray, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logits = features @ W[:, :-1].T + W[:, -1]
    P = np.exp(log_softmax(logits, axis=1))
    Y = np.zeros_like(P)
    Y[np.arange(len(labels)), labels] = 1.0
    D = (Y - P) / len(labels)
    return np.hstack([D.T @ features, D.sum(axis=0)[:, None]])


def _standardizer(X, U):
    F = np.hstack([X, U])
    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mu, sd


def fit_recurrence(
    X: np.ndarray,
    U: np.ndarray,
    labels: np.ndarray,
    K: int,
    init: tuple | None = None,
    lr: float = 0.1,
    max_iters: int = 500,
    grad_tol: float = 1e-6,
):
    """Full-batch gradient ascent for the recurrence weights.

    Optimization runs on standardized inputs; the returned ``(W_x, W_u, r)``
    are mapped back to raw state/control units.
    """
    mu, sd = _standardizer(X, U)
    M = X.shape[1]
    D = X.shape[1] + U.shape[1]
    if init is None:
        W = np.zeros((K, D + 1))
    else:
        Wraw = np.hstack([init[0], init[1]])
        W = np.hstack([Wraw * sd, (init[2] + Wraw @ mu)[:, None]])
    # class-major layout: reductions over the K classes run along axis 0,
    # which is much faster than reducing short rows
    Ft = np.vstack([((np.hstack([X, U]) - mu) / sd).T, np.ones((1, len(X)))])
    Yt = np.zeros((K, len(labels)))
    Yt[labels, np.arange(len(labels))] = 1.0
    FtT = Ft.T.copy()
    scale = 1.0 / len(labels)
    for _ in range(max_iters):
        # same quantity as softmax_regression_grad, inlined for speed
        V = W @ Ft
        V -= V.max(axis=0)
        np.exp(V, out=V)
        V /= V.sum(axis=0)
        g = ((Yt - V) @ FtT) * scale
        if np.sqrt(np.sum(g * g)) < grad_tol:
            break
        W += lr * g
    Wraw = W[:, :-1] / sd
    r = W[:, -1] - Wraw @ mu
    return Wraw[:, :M], Wraw[:, M:], r


# --- hard EM ---------------------------------------------------------------


@dataclass
class FitConfig:
    max_iters: int = 50
    tol: float = 1e-6
    ridge: float = 1e-4
    q_min: float = 1e-8
    recurrence_lr: float = 0.1
    recurrence_iters: int = 500
    recurrence_grad_tol: float = 1e-6
    init_window: int = 10
    seed: int = 0


@dataclass
class FitResult:
    params: HybridSystemParams
    labels: list
    history: list
    converged: bool
    active_modes: int


def _stack(dataset: Sequence[Trajectory]):
    X, U, Xn, owner = [], [], [], []
    for i, traj in enumerate(dataset):
        if len(traj) < 2:
            continue
        X.append(traj.states[:-1])
        U.append(traj.controls[:-1])
        Xn.append(traj.states[1:])
        owner.append(np.full(len(traj) - 1, i))
    return np.vstack(X), np.vstack(U), np.vstack(Xn), np.concatenate(owner)


def _feature_scale(X, U) -> np.ndarray:
    """RMS of each regressor column (state, control, constant)."""
    Phi = np.hstack([X, U, np.ones((len(X), 1))])
    s = np.sqrt(np.mean(Phi**2, axis=0))
    s[s < 1e-12] = 1.0
    return s


def _ridge_dynamics(X, U, Xn, ridge, q_min, scale=None):
    """Ridge regression of ``Xn`` on ``[X, U, 1]`` plus the matching noise variances.

    Shrinkage is toward persistence (``A = I``, ``B = 0``, ``b = 0``) with
    penalty ``ridge * sum((scale * (theta - theta_0))**2)``, so its strength
    does not depend on the units of each regressor.
    """
    M = X.shape[1]
    Phi = np.hstack([X, U, np.ones((len(X), 1))])
    w = np.ones(Phi.shape[1]) if scale is None else scale**2
    G = Phi.T @ Phi + ridge * np.diag(w)
    delta = np.linalg.solve(G, Phi.T @ (Xn - X))
    rss = np.sum((Xn - X - Phi @ delta) ** 2, axis=0)
    pen = ridge * np.sum(w[:, None] * delta**2, axis=0)
    Q = np.maximum((rss + pen) / len(X), q_min)
    theta = delta.copy()
    theta[:M] += np.eye(M)
    return theta, Q


def _m_step_dynamics(params, X, U, Xn, z, cfg: FitConfig, scale):
    M, N = params.M, params.N
    for k in range(params.K):
        sel = z == k
        if sel.sum() < M + N + 1:
            continue
        theta, Q = _ridge_dynamics(X[sel], U[sel], Xn[sel], cfg.ridge, cfg.q_min, scale)
        params.A[k] = theta[:M].T
        params.B[k] = theta[M : M + N].T
        params.b[k] = theta[-1]
        params.Q[k] = Q


def _ridge_penalty(params, ridge, scale):
    M, N = params.M, params.N
    w = scale**2
    theta_sq = (
        np.sum(w[:M] * (params.A - np.eye(M)) ** 2, axis=2)
        + np.sum(w[M : M + N] * params.B**2, axis=2)
        + w[-1] * params.b**2
    )  # (K, M), weighted squared norm of each output row
    return 0.5 * ridge * np.sum(theta_sq / params.Q)


def _transition_targets(dataset, labels):
    """Next-mode label for every stacked transition."""
    return np.concatenate([lab[1:] for traj, lab in zip(dataset, labels) if len(traj) >= 2])


def complete_data_objective(params, dataset, labels, ridge=0.0, scale=None) -> float:
    """Summed log-likelihood over trajectories minus the ridge penalty."""
    total = 0.0
    for traj, lab in zip(dataset, labels):
        t = Trajectory(traj.states, traj.controls, lab)
        total += log_likelihood(params, t)
    if ridge:
        total -= _ridge_penalty(params, ridge, scale)
    return total


def _windowed_features(traj: Trajectory, window: int, ridge: float) -> np.ndarray:
    """Local regression coefficients plus local mean state, one row per transition."""
    X, U, Xn = traj.states[:-1], traj.controls[:-1], traj.states[1:]
    n = len(X)
    half = max(window // 2, 1)
    Phi = np.hstack([X, U, np.ones((n, 1))])
    D = Phi.shape[1]
    # sliding-window sums of the normal equations via prefix sums
    def window_sum(a):
        c = np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(a, axis=0)])
        lo = np.clip(np.arange(n) - half, 0, n)
        hi = np.clip(np.arange(n) + half + 1, 0, n)
        return c[hi] - c[lo], (hi - lo)

    G, count = window_sum(Phi[:, :, None] * Phi[:, None, :])
    H, _ = window_sum(Phi[:, :, None] * Xn[:, None, :])
    G = G + ridge * np.eye(D)
    theta = np.linalg.solve(G, H)
    mean_state = window_sum(X)[0] / count[:, None]
    return np.hstack([theta.reshape(n, -1), mean_state])


def _initial_labels(dataset, K, cfg: FitConfig) -> list:
    feats = [_windowed_features(t, cfg.init_window, 1e-3) for t in dataset if len(t) >= 2]
    F = np.vstack(feats)
    sd = F.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Fs = (F - F.mean(axis=0)) / sd
    if K == 1:
        flat = np.zeros(len(Fs), dtype=int)
    else:
        _, flat = kmeans2(Fs, K, minit="++", seed=cfg.seed)
    labels, pos = [], 0
    for traj in dataset:
        L = len(traj)
        if L < 2:
            labels.append(np.zeros(L, dtype=int))
            continue
        lab = np.empty(L, dtype=int)
        lab[:-1] = flat[pos : pos + L - 1]
        lab[-1] = lab[-2]
        labels.append(lab)
        pos += L - 1
    return labels


def _e_step(params, dataset):
    """Most likely mode sequence for every trajectory.

    In the recurrence-only model the score of ``z[t+1]`` depends on
    ``x[t], u[t]`` but not on ``z[t]``, so the Viterbi path decouples into an
    independent argmax per step (``viterbi`` gives the same path).
    """
    labels = []
    for traj in dataset:
        L = len(traj)
        if L < 2:
            labels.append(np.zeros(L, dtype=int))
            continue
        X, U, Xn = traj.states[:-1], traj.controls[:-1], traj.states[1:]
        score = np.zeros((L, params.K))
        score[:-1] = _dynamics_loglik(params, X, U, Xn)
        score[1:] += _recurrence_logprob(params, X, U)
        labels.append(np.argmax(score, axis=1))
    return labels


def _empty_params(K, M, N) -> HybridSystemParams:
    return HybridSystemParams(
        A=np.tile(np.eye(M), (K, 1, 1)),
        B=np.zeros((K, M, N)),
        b=np.zeros((K, M)),
        Q=np.ones((K, M)),
        W_x=np.zeros((K, M)),
        W_u=np.zeros((K, N)),
        r=np.zeros(K),
    )


def fit_em(dataset: Sequence[Trajectory], K: int, config: FitConfig | None = None) -> FitResult:
    """Hard-EM coordinate ascent. Returns parameters, labels and objective trace."""
    cfg = config or FitConfig()
    dataset = [t for t in dataset]
    if K < 1:
        raise ValueError("K must be at least 1")
    if not dataset or sum(max(len(t) - 1, 0) for t in dataset) == 0:
        raise ValueError("dataset contains no transitions")
    M = dataset[0].states.shape[1]
    N = dataset[0].controls.shape[1]
    X, U, Xn, _ = _stack(dataset)
    if len(X) < M + N + 1:
        raise ValueError(f"need at least {M + N + 1} transitions, got {len(X)}")

    params = _empty_params(K, M, N)
    # initial dynamics fit on the pooled data, so modes that receive too few
    # points still start from a sensible model
    scale = _feature_scale(X, U)
    theta, Q = _ridge_dynamics(X, U, Xn, cfg.ridge, cfg.q_min, scale)
    params.A[:] = theta[:M].T
    params.B[:] = theta[M : M + N].T
    params.b[:] = theta[-1]
    params.Q[:] = Q

    labels = _initial_labels(dataset, K, cfg)
    history = []
    converged = False

    def m_step(params, labels, warm):
        z = np.concatenate([lab[:-1] for t, lab in zip(dataset, labels) if len(t) >= 2])
        _m_step_dynamics(params, X, U, Xn, z, cfg, scale)
        zn = _transition_targets(dataset, labels)
        params.W_x, params.W_u, params.r = fit_recurrence(
            X, U, zn, K,
            init=(params.W_x, params.W_u, params.r) if warm else None,
            lr=cfg.recurrence_lr,
            max_iters=cfg.recurrence_iters,
            grad_tol=cfg.recurrence_grad_tol,
        )

    def objective(params, labels):
        return complete_data_objective(params, dataset, labels, cfg.ridge, scale)

    m_step(params, labels, warm=False)
    history.append(objective(params, labels))
    for _ in range(cfg.max_iters):
        new_labels = _e_step(params, dataset)
        fixed_point = all(np.array_equal(a, b) for a, b in zip(new_labels, labels))
        labels = new_labels
        m_step(params, labels, warm=True)
        history.append(objective(params, labels))
        if fixed_point or abs(history[-1] - history[-2]) < cfg.tol * max(1.0, abs(history[-2])):
            converged = True
            break

    used = np.unique(np.concatenate(labels))
    if K >= 2 and len(used) < 2:
        logger.warning("hard EM assigned every point to a single mode")
    params.validate()
    return FitResult(params, labels, history, converged, int(len(used)))


def fit(dataset: Sequence[Trajectory], K: int, config: FitConfig | None = None) -> HybridSystemParams:
    return fit_em(dataset, K, config).params
