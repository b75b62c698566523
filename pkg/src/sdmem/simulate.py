"""Euler-Maruyama simulation of subject populations.

Every subject owns a random stream keyed by ``(seed, *stream_key, subject)``
through :class:`numpy.random.SeedSequence`. The stream first yields the random
effect, then an optional initial state, then the Wiener increments in fixed
chunks, so a subject's path does not depend on how many other subjects are
simulated alongside it or on which worker runs it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteStateError, PlanError
from .model import ModelSpec, SubjectConfig, Theta, Trajectory, check_spd

CHUNK = 4096
GRID_TOL = 1e-12


@dataclass(frozen=True)
class SimPlan:
    fine_step: float
    thin_factor: int
    n_subjects: int
    seed: int
    theta_true: Theta
    subject_template: Union[SubjectConfig, Sequence[SubjectConfig]]
    # x0_sampler(rng, subject_index) -> x0, drawn after phi when given
    x0_sampler: Optional[Callable] = None

    def __post_init__(self):
        if self.fine_step <= 0 or self.thin_factor < 1 or self.n_subjects < 1:
            raise PlanError("fine_step, thin_factor and n_subjects must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise PlanError("seed must be an unsigned 64-bit integer")
        if not isinstance(self.subject_template, SubjectConfig):
            if len(self.subject_template) != self.n_subjects:
                raise PlanError("need one SubjectConfig per subject")
        for i in range(self.n_subjects):
            self.fine_steps(self.subject(i))

    @property
    def obs_step(self) -> float:
        return self.fine_step * self.thin_factor

    def subject(self, i: int) -> SubjectConfig:
        if isinstance(self.subject_template, SubjectConfig):
            return self.subject_template
        return self.subject_template[i]

    def fine_steps(self, subject: SubjectConfig) -> int:
        """Number of fine Euler steps covering ``[t0, horizon]``."""
        span = subject.horizon - subject.t0
        n = int(round(span / self.fine_step))
        if n < 1 or abs(n * self.fine_step - span) > GRID_TOL * max(span, 1.0) * 10:
            raise PlanError(f"fine_step {self.fine_step} does not divide the horizon {span}")
        if n % self.thin_factor:
            raise PlanError(f"{n} fine steps not divisible by thin factor {self.thin_factor}")
        if subject.grid is not None:
            expected = subject.t0 + self.fine_step * np.arange(0, n + 1, self.thin_factor)
            if len(subject.grid) != len(expected) or np.max(np.abs(subject.grid - expected)) > GRID_TOL * 10 * max(span, 1.0):
                raise PlanError("subject grid is not the thinned fine grid")
        return n


@dataclass(frozen=True)
class RealizedSubject:
    trajectory: Trajectory
    phi: np.ndarray
    seed_stream: Tuple[int, ...]


def subject_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def draw_random_effect(omega, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """phi = L z with L the Cholesky factor of ``omega``; ``size`` draws stack along axis 0."""
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    check_spd(omega, "omega")
    L = np.linalg.cholesky(omega)
    if size is None:
        return L @ rng.standard_normal(omega.shape[0])
    return rng.standard_normal((size, omega.shape[0])) @ L.T


def _euler_batch(model: ModelSpec, subjects, mu, phis, plan: SimPlan, rngs, ids) -> List[Trajectory]:
    """Simulate several subjects sharing one time grid, vectorized across subjects."""
    n_fine = plan.fine_steps(subjects[0])
    t0 = subjects[0].t0
    if any(plan.fine_steps(s) != n_fine or s.t0 != t0 for s in subjects):
        raise PlanError("batched subjects must share their time grid")
    N, r, b = len(subjects), model.state_dim, plan.thin_factor
    delta = plan.fine_step
    sq = np.sqrt(delta)
    drift = model.make_drift(mu, phis)
    n_obs = n_fine // b + 1
    obs_t = t0 + delta * b * np.arange(n_obs)
    obs_t[-1] = subjects[0].horizon
    states = np.empty((n_obs, N, r))
    x = np.stack([np.asarray(s.x0, float) for s in subjects]).reshape(N, r)
    states[0] = x
    sigma_const = model.sigma(t0, x) if model.constant_diffusion else None

    k = 0
    while k < n_fine:
        m = min(CHUNK, n_fine - k)
        xi = np.stack([g.standard_normal((m, r)) for g in rngs], axis=1) * sq
        t_chunk = t0 + delta * np.arange(k, k + m)
        cov = np.stack([s.covariates_at(t_chunk) for s in subjects], axis=1)
        if sigma_const is not None:
            xi = np.einsum("nij,knj->kni", sigma_const, xi)
        for j in range(m):
            t = t_chunk[j]
            noise = xi[j] if sigma_const is not None else np.einsum("nij,nj->ni", model.sigma(t, x), xi[j])
            x = x + drift(t, x, cov[j]) * delta + noise
            step = k + j + 1
            if step % b == 0:
                states[step // b] = x
                if not np.all(np.isfinite(x)):
                    bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0]
                    raise NonFiniteStateError(
                        f"non-finite state for subject {ids[bad]} at t={t + delta:.6g}",
                        time=float(t + delta),
                        subject_id=ids[bad],
                    )
        k += m

    trajs = []
    for i, s in enumerate(subjects):
        trajs.append(Trajectory(obs_t, states[:, i, :], s.covariates_at(obs_t), ids[i]))
    return trajs


def euler_maruyama(model: ModelSpec, subject: SubjectConfig, mu, phi, plan: SimPlan,
                   rng: np.random.Generator, subject_id=0) -> Trajectory:
    """Euler-Maruyama path on the fine grid, thinned to every ``plan.thin_factor``-th point."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    return _euler_batch(model, [subject], np.asarray(mu, float), phi, plan, [rng], [subject_id])[0]


def simulate_population(model: ModelSpec, plan: SimPlan, stream_key: Sequence[int] = ()) -> List[RealizedSubject]:
    """Simulate ``plan.n_subjects`` independent subjects.

    Subject ``i`` draws from the stream ``(plan.seed, *stream_key, i)``. Subjects
    with a common grid are integrated together.
    """
    theta = plan.theta_true
    stream_key = tuple(int(k) for k in stream_key)
    rngs, phis, configs = [], [], []
    for i in range(plan.n_subjects):
        rng = subject_rng(plan.seed, *stream_key, i)
        phi = draw_random_effect(theta.omega, rng)
        cfg = plan.subject(i)
        if plan.x0_sampler is not None:
            cfg = SubjectConfig(plan.x0_sampler(rng, i), cfg.horizon, cfg.covariate_track, cfg.t0, cfg.grid)
        rngs.append(rng)
        phis.append(phi)
        configs.append(cfg)

    groups = {}
    for i, cfg in enumerate(configs):
        groups.setdefault((plan.fine_steps(cfg), cfg.t0), []).append(i)
    trajs = [None] * plan.n_subjects
    for idx in groups.values():
        out = _euler_batch(model, [configs[i] for i in idx], theta.mu, np.stack([phis[i] for i in idx]),
                           plan, [rngs[i] for i in idx], idx)
        for i, tr in zip(idx, out):
            trajs[i] = tr
    return [RealizedSubject(trajs[i], phis[i], (int(plan.seed),) + stream_key + (i,))
            for i in range(plan.n_subjects)]
