"""Discrete-time spiking neuron dynamics and analysis tools.

Four update rules share one integrate-and-fire skeleton. Per step, a drive
term F is added to the membrane potential, the potential is clamped to
+-v_clip, a spike is emitted when the potential reaches the firing
threshold, and a soft reset subtracts the threshold so residual drive is
preserved. The drive per kind:

    vanilla              F = i
    adaptive-threshold   F = i, with v_th' = alpha * v_th + spike * delta_h
    second-order         F = a*v^2 + b*v + c*i
    double-neuron        F = g*v^2 + m*u + i, with u' = u + n*u (+ jump on spike)

Default coefficients are the pre-learned values: (a, b, c) =
(0.1014, -0.0832, 0.9506), alpha = 0.95, delta_h = 0.1, g = 0.001,
m = n = -0.05.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

# Fire on numerically exact threshold crossings: constant drives such as
# i = 0.25 must spike on the step where the accumulated potential lands on
# the threshold, despite float rounding.
SPIKE_EPS = 1e-9


class NumericDomainError(ValueError):
    """Non-finite current or state fed into a dynamics update."""


class DegenerateDynamicsError(ValueError):
    """Analysis requested for a dynamics without the needed structure."""


class DynamicsKind(enum.Enum):
    VANILLA = "vanilla"
    ADAPTIVE_THRESHOLD = "adaptive-threshold"
    SECOND_ORDER = "second-order"
    DOUBLE_NEURON = "double-neuron"


_KIND_ALIASES = {
    "vanilla": DynamicsKind.VANILLA,
    "adaptive-threshold": DynamicsKind.ADAPTIVE_THRESHOLD,
    "adaptive_threshold": DynamicsKind.ADAPTIVE_THRESHOLD,
    "second-order": DynamicsKind.SECOND_ORDER,
    "second_order": DynamicsKind.SECOND_ORDER,
    "double-neuron": DynamicsKind.DOUBLE_NEURON,
    "double_neuron": DynamicsKind.DOUBLE_NEURON,
}


@dataclass(frozen=True)
class DynamicsSpec:
    """Parameters of one neuron dynamics plus shared firing constants.

    Only the fields of the active kind are consulted; the rest are ignored.
    """

    kind: DynamicsKind
    v_th0: float = 1.0
    tau: float = 1.0
    alpha: float = 0.95
    delta_h: float = 0.1
    a: float = 0.1014
    b: float = -0.0832
    c: float = 0.9506
    g: float = 0.001
    m: float = -0.05
    n: float = -0.05
    v_clip: float = 5.0
    u_jump: float = 1.0
    c_m: float = 1.0

    def __post_init__(self):
        if self.v_th0 <= 0:
            raise ValueError(f"v_th0 must be positive, got {self.v_th0}")
        if self.tau != 1.0:
            raise ValueError(f"tau is fixed to 1.0, got {self.tau}")
        if self.c_m != 1.0:
            raise ValueError(f"c_m is fixed to 1.0, got {self.c_m}")
        if self.v_clip <= self.v_th0:
            raise ValueError(f"v_clip {self.v_clip} must exceed v_th0 {self.v_th0}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.u_jump < 0:
            raise ValueError(f"u_jump must be nonnegative, got {self.u_jump}")

    @classmethod
    def from_name(cls, name, **overrides):
        key = name.strip().lower()
        if key not in _KIND_ALIASES:
            raise ValueError(f"unknown dynamics '{name}' (choose from {sorted(set(_KIND_ALIASES))})")
        return cls(kind=_KIND_ALIASES[key], **overrides)

    def with_overrides(self, **overrides):
        return replace(self, **overrides)

    def to_dict(self):
        d = {"kind": self.kind.value}
        for name in ("v_th0", "tau", "alpha", "delta_h", "a", "b", "c", "g", "m", "n",
                     "v_clip", "u_jump", "c_m"):
            d[name] = getattr(self, name)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        return cls.from_name(kind, **d)


@dataclass
class NeuronState:
    """Membrane potential, current threshold, inhibitory potential, last spike."""

    v: float = 0.0
    v_th: float = 1.0
    u: float = 0.0
    spike: bool = False


def initial_state(spec):
    return NeuronState(v=0.0, v_th=spec.v_th0, u=0.0, spike=False)


def drive(spec, state, i):
    """Potential increment F for one step. Pure; no state mutation."""
    if not (math.isfinite(i) and math.isfinite(state.v) and math.isfinite(state.u)):
        raise NumericDomainError(f"non-finite input to drive: i={i}, v={state.v}, u={state.u}")
    k = spec.kind
    if k in (DynamicsKind.VANILLA, DynamicsKind.ADAPTIVE_THRESHOLD):
        return i
    if k is DynamicsKind.SECOND_ORDER:
        return spec.a * state.v * state.v + spec.b * state.v + spec.c * i
    return spec.g * state.v * state.v + spec.m * state.u + i


def step(spec, state, i):
    """Advance one frame; returns (new state, spike flag).

    Order of operations: drive, clamp, spike decision against the current
    threshold, soft reset, then threshold decay/jump and inhibitory update.
    """
    f = drive(spec, state, i)
    v = min(max(state.v + f, -spec.v_clip), spec.v_clip)
    spike = v >= state.v_th - SPIKE_EPS
    if spike:
        v -= state.v_th
    v_th = state.v_th
    if spec.kind is DynamicsKind.ADAPTIVE_THRESHOLD:
        v_th = spec.alpha * v_th + (spec.delta_h if spike else 0.0)
    u = state.u
    if spec.kind is DynamicsKind.DOUBLE_NEURON:
        u = u + spec.n * u
        if spike:
            u += spec.u_jump
    return NeuronState(v=v, v_th=v_th, u=u, spike=spike), spike


@dataclass
class SimulationTrace:
    """Per-step record of a driven neuron.

    `potentials` holds the post-update, pre-reset membrane potential (the
    value the spike decision saw); `thresholds` holds the threshold that
    decision compared against.
    """

    currents: np.ndarray
    potentials: np.ndarray
    thresholds: np.ndarray
    inhibitions: np.ndarray
    spikes: np.ndarray
    spike_count: int = field(init=False)

    def __post_init__(self):
        self.spike_count = int(np.count_nonzero(self.spikes))

    def __len__(self):
        return len(self.spikes)


def simulate(spec, currents):
    """Run `step` from the initial state over a current sequence."""
    currents = np.asarray(currents, dtype=np.float64)
    n = len(currents)
    pots = np.empty(n)
    ths = np.empty(n)
    inh = np.empty(n)
    spikes = np.zeros(n, dtype=bool)
    state = initial_state(spec)
    for t, i in enumerate(currents):
        ths[t] = state.v_th
        inh[t] = state.u
        new, fired = step(spec, state, float(i))
        # reconstruct the pre-reset peak for the trace
        pots[t] = new.v + (state.v_th if fired else 0.0)
        spikes[t] = fired
        state = new
    return SimulationTrace(currents=currents.copy(), potentials=pots, thresholds=ths,
                           inhibitions=inh, spikes=spikes)


def triangle_wave(lo, hi, period, length):
    """Piecewise-linear wave rising from `lo` to `hi` and back, starting at `lo`."""
    if lo >= hi:
        raise ValueError(f"triangle_wave: need lo < hi, got {lo} >= {hi}")
    if period < 2:
        raise ValueError(f"triangle_wave: period must be >= 2, got {period}")
    half = period / 2.0
    phase = np.arange(length) % period
    frac = phase / half
    frac = np.where(frac <= 1.0, frac, 2.0 - frac)
    return lo + (hi - lo) * frac


@dataclass
class FixedPointReport:
    """Real equilibria of the second-order drive at a constant current."""

    input_current: float
    roots: list
    stability: list  # "attractor" | "repulsor" per root
    critical_current: float | None

    def to_dict(self):
        return {
            "input_current": self.input_current,
            "roots": list(self.roots),
            "stability": list(self.stability),
            "critical_current": self.critical_current,
        }


def fixed_points(spec, i):
    """Roots of a*v^2 + b*v + c*i = 0 with their stability.

    A root r is an attractor iff the drive's slope 2*a*r + b is negative.
    The critical current b^2 / (4*a*c) is the smallest constant input at
    which no real equilibrium survives (only defined when a*c > 0).
    """
    if spec.kind is not DynamicsKind.SECOND_ORDER:
        raise DegenerateDynamicsError(f"fixed points require second-order dynamics, got {spec.kind.value}")
    a, b, c = spec.a, spec.b, spec.c
    if a == 0:
        raise DegenerateDynamicsError("fixed points undefined for a == 0 (dynamics degenerate to first order)")
    const = c * i
    disc = b * b - 4.0 * a * const
    if disc < 0:
        roots = []
    elif disc == 0:
        roots = [-b / (2.0 * a)]
    else:
        sq = math.sqrt(disc)
        q = -0.5 * (b + math.copysign(sq, b if b != 0 else 1.0))
        r1 = q / a
        r2 = const / q if q != 0 else 0.0
        roots = sorted((r1, r2))
    stability = ["attractor" if 2.0 * a * r + b < 0 else "repulsor" for r in roots]
    critical = (b * b) / (4.0 * a * c) if a * c > 0 else None
    return FixedPointReport(input_current=i, roots=roots, stability=stability,
                            critical_current=critical)


@dataclass
class RateConsistencyReport:
    """Soft-reset rate identity for a vanilla neuron at constant current.

    With soft reset, the firing rate after t steps satisfies exactly
    rate = i / v_th - v_t / (t * v_th), where v_t is the residual potential.
    """

    input_current: float
    steps: int
    rate: float
    residual_potential: float
    ann_rate_term: float

    def identity_gap(self):
        return abs(self.rate - (self.ann_rate_term - self.residual_potential / (self.steps * self.v_th)))

    # v_th is recoverable from the ann term, but keep it explicit for the gap
    @property
    def v_th(self):
        return self.input_current / self.ann_rate_term if self.ann_rate_term else 1.0


def rate_consistency(i, steps, v_th=1.0):
    """Simulate a vanilla soft-reset neuron and report the rate identity terms."""
    if i < 0:
        raise ValueError(f"rate_consistency: current must be nonnegative, got {i}")
    if steps < 1:
        raise ValueError(f"rate_consistency: steps must be >= 1, got {steps}")
    spec = DynamicsSpec(kind=DynamicsKind.VANILLA, v_th0=v_th,
                        v_clip=max(5.0, v_th + abs(i) + 1.0))
    state = initial_state(spec)
    count = 0
    for _ in range(steps):
        state, fired = step(spec, state, i)
        count += int(fired)
    return RateConsistencyReport(
        input_current=i,
        steps=steps,
        rate=count / steps,
        residual_potential=state.v,
        ann_rate_term=i / v_th,
    )


def write_trace_csv(trace, fh):
    """One row per step: step, i, v, v_th, u, spike (0/1)."""
    writer = csv.writer(fh)
    writer.writerow(["step", "i", "v", "v_th", "u", "spike"])
    for t in range(len(trace)):
        writer.writerow([
            t + 1,
            f"{trace.currents[t]:.17g}",
            f"{trace.potentials[t]:.17g}",
            f"{trace.thresholds[t]:.17g}",
            f"{trace.inhibitions[t]:.17g}",
            int(trace.spikes[t]),
        ])


def trace_summary(trace):
    return {
        "steps": len(trace),
        "spike_count": trace.spike_count,
        "spike_steps": [int(t) + 1 for t in np.flatnonzero(trace.spikes)],
        "final_potential": float(trace.potentials[-1]) if len(trace) else 0.0,
    }
