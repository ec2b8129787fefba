"""Deterministic localization iterations.

One step replaces every sensor's state with the convex combination of its
m+1 triangulation neighbors' states (optionally blended with its own state
through a relaxation gain). Anchor rows never move. Updates are synchronous:
all rows read iteration t to produce t+1, so a step is a pure function and
rows could be computed in parallel against the immutable previous state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .system import AnchorBlock, SystemMatrices

_INIT_STREAM = 202  # seed-stream tag for initial guesses

MODES = ("diloc", "diloc_rel")


class EngineError(ValueError):
    pass


class DimensionMismatchError(EngineError):
    pass


class InvalidAlphaError(EngineError):
    pass


@dataclass(frozen=True)
class IterationState:
    """Stacked node states: m+1 anchor rows (fixed) above M sensor rows."""

    C: np.ndarray
    t: int = 0
    alpha: float = 1.0

    @property
    def m(self) -> int:
        return self.C.shape[1]

    @property
    def U(self) -> np.ndarray:
        return self.C[: self.m + 1]

    @property
    def X(self) -> np.ndarray:
        return self.C[self.m + 1 :]


@dataclass
class RunTrace:
    """Per-iteration record of one run plus protocol cost accounting.

    ``step_norms[k]`` is the max-norm state change of iteration k+1;
    ``oracle_errors`` holds max-norm distances to the reference positions and
    exists only when ground truth was supplied. Snapshots keep (iteration,
    sensor-state copy) pairs at multiples of the stride, plus the final state
    whatever the stride.
    """

    mode: str
    seed: int | None
    per_sensor_messages: int
    per_sensor_flops: int
    n_sensors: int
    step_norms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alphas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    oracle_errors: np.ndarray | None = None
    snapshots: list = field(default_factory=list)
    converged_at: int | None = None
    final_state: np.ndarray | None = None

    @property
    def iterations(self) -> int:
        return len(self.step_norms)

    def messages_total(self, upto: int | None = None) -> int:
        t = self.iterations if upto is None else upto
        return self.per_sensor_messages * self.n_sensors * t

    def decay_rate_estimate(self, tail: int = 200) -> float | None:
        """Geometric decay ratio fitted to the tail of the step norms."""
        vals = self.step_norms[self.step_norms > 0.0]
        if len(vals) < 8:
            return None
        vals = vals[-min(tail, len(vals) // 2) :]
        if len(vals) < 4:
            return None
        slope = np.polyfit(np.arange(len(vals)), np.log(vals), 1)[0]
        return float(np.exp(slope))


def initial_state(anchors: AnchorBlock, n_sensors: int, seed=0) -> IterationState:
    """Random initial guess, i.i.d. uniform over the anchor bounding box.

    The guess does not need to start inside the anchor hull; convergence does
    not depend on it.
    """
    U = np.asarray(anchors.U, dtype=float)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _INIT_STREAM])
    X0 = rng.uniform(U.min(axis=0), U.max(axis=0), size=(n_sensors, U.shape[1]))
    return IterationState(np.vstack([U, X0]), t=0)


def state_from_guess(anchors: AnchorBlock, X0) -> IterationState:
    X0 = np.asarray(X0, dtype=float)
    return IterationState(np.vstack([np.asarray(anchors.U, dtype=float), X0]), t=0)


def _check_dims(state: IterationState, sys: SystemMatrices, anchors: AnchorBlock):
    if state.m != sys.m or state.X.shape[0] != sys.M:
        raise DimensionMismatchError(
            f"state holds {state.X.shape[0]} sensors in dimension {state.m}, "
            f"system expects {sys.M} in dimension {sys.m}"
        )
    if np.asarray(anchors.U).shape != (sys.m + 1, sys.m):
        raise DimensionMismatchError("anchor block shape does not match the system")


def diloc_step(state: IterationState, sys: SystemMatrices, anchors: AnchorBlock) -> IterationState:
    """One synchronous update: sensor rows become P X(t) + B U."""
    _check_dims(state, sys, anchors)
    total = sys.P @ state.X + sys.B @ np.asarray(anchors.U, dtype=float)
    return IterationState(np.vstack([state.U, total]), t=state.t + 1, alpha=1.0)


def diloc_rel_step(
    state: IterationState, sys: SystemMatrices, anchors: AnchorBlock, alpha: float
) -> IterationState:
    """Relaxed update (1 - alpha) X(t) + alpha (P X(t) + B U); alpha in (0, 1].

    alpha = 1 reduces to the plain update and reproduces it bit for bit.
    """
    if not 0.0 < alpha <= 1.0:
        raise InvalidAlphaError(f"relaxation parameter must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return diloc_step(state, sys, anchors)
    _check_dims(state, sys, anchors)
    total = sys.P @ state.X + sys.B @ np.asarray(anchors.U, dtype=float)
    new_x = (1.0 - alpha) * state.X + alpha * total
    return IterationState(np.vstack([state.U, new_x]), t=state.t + 1, alpha=alpha)


def flops_per_sensor(mode: str, m: int) -> int:
    """Arithmetic per sensor per iteration: m+1 multiplies and m adds, plus
    two blend operations when relaxation is active."""
    return 2 * m + 1 if mode == "diloc" else 2 * m + 3


def run_to_convergence(
    initial: IterationState,
    sys: SystemMatrices,
    anchors: AnchorBlock,
    mode: str = "diloc",
    alpha: float = 1.0,
    step_tol: float = 1e-10,
    max_iters: int = 100_000,
    snapshot_stride: int = 10,
    oracle: np.ndarray | None = None,
    seed: int | None = None,
) -> RunTrace:
    """Iterate until the successive-step max norm drops below step_tol.

    Non-convergence within max_iters is reported through the trace, not
    raised. ``oracle`` (reference sensor positions) only adds an error
    column; the stopping rule never reads it.
    """
    if mode not in MODES:
        raise EngineError(f"mode must be one of {MODES}, got {mode!r}")
    if step_tol < 0:
        raise EngineError("step_tol must be nonnegative")
    _check_dims(initial, sys, anchors)
    m = sys.m
    trace = RunTrace(
        mode=mode,
        seed=seed,
        per_sensor_messages=m + 1,
        per_sensor_flops=flops_per_sensor(mode, m),
        n_sensors=sys.M,
    )
    step_norms, alphas, oracle_errors = [], [], []
    state = initial
    for _ in range(int(max_iters)):
        new = (
            diloc_step(state, sys, anchors)
            if mode == "diloc"
            else diloc_rel_step(state, sys, anchors, alpha)
        )
        step_norm = float(np.abs(new.X - state.X).max()) if sys.M else 0.0
        step_norms.append(step_norm)
        alphas.append(1.0 if mode == "diloc" else alpha)
        if oracle is not None:
            oracle_errors.append(float(np.abs(new.X - oracle).max()) if sys.M else 0.0)
        state = new
        if snapshot_stride and state.t % snapshot_stride == 0:
            trace.snapshots.append((state.t, state.X.copy()))
        if step_norm < step_tol:
            trace.converged_at = state.t
            break
    if not trace.snapshots or trace.snapshots[-1][0] != state.t:
        trace.snapshots.append((state.t, state.X.copy()))
    trace.step_norms = np.array(step_norms)
    trace.alphas = np.array(alphas)
    trace.oracle_errors = np.array(oracle_errors) if oracle is not None else None
    trace.final_state = state.X.copy()
    return trace
