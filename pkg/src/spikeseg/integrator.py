"""Continuous integrate-and-fire boundary detection over encoder states.

A learned 1-D convolution maps hidden states to one sigmoid current per
frame. A dynamics neuron integrates the currents; every spike marks a
segment boundary and emits the accumulated, potential-weighted sum of
hidden states since the previous boundary:

    S_t = S_{t-1} + w_t * h_t,   w_t = clamp(v_t, 0, v_th)

where v_t is the post-update, pre-reset membrane potential. The weight is
continuous in the inputs, so gradients flow into both the currents and the
hidden states without any surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dynamics import SPIKE_EPS, DynamicsKind


class DegenerateInputError(ValueError):
    """Currents cannot be rescaled (zero total drive)."""


@dataclass
class IntegrationTrace:
    """Per-frame record of one integrate-and-fire pass.

    `currents` are the values actually integrated (post-scaling when the
    caller rescales for training); `potentials` are post-update, pre-reset.
    `fired_states` stacks one row per emitted state ([n_emitted, d_model]);
    `accumulated_drive` is the running sum of max(0, F_t) / v_th kept as a
    graph node so it can serve as a differentiable spike-count proxy.
    """

    currents: np.ndarray
    potentials: np.ndarray
    spikes: np.ndarray
    boundary_frames: list
    fired_states: Tensor | None
    accumulated_drive: Tensor
    spike_count: int
    tail_fired: bool = False


def init_current_params(rng, d_model, channels=256, kernel=3, prefix="boundary"):
    """Parameters for compute_currents: conv (kernel x d_model -> channels),
    then a linear projection to one scalar per frame."""
    p = {}
    p[f"{prefix}.conv.w"] = Tensor(
        ad.uniform_init(rng, (kernel * d_model, channels), kernel * d_model, channels),
        requires_grad=True,
    )
    p[f"{prefix}.conv.b"] = Tensor(np.zeros(channels), requires_grad=True)
    p[f"{prefix}.out.w"] = Tensor(
        ad.uniform_init(rng, (channels, 1), channels, 1), requires_grad=True
    )
    p[f"{prefix}.out.b"] = Tensor(np.zeros(1), requires_grad=True)
    return p


def compute_currents(params, h, prefix="boundary"):
    """Map hidden states [T, d_model] to one current per frame, in (0, 1).

    Same-length 1-D convolution, rectification, linear projection to a
    scalar, sigmoid. The rectification matters: without it the whole head
    is linear in h and cannot express change-magnitude (boundary) features;
    with it the conv channels act as signed local differences whose
    rectified sum approximates |change|.
    """
    w = params[f"{prefix}.conv.w"]
    kernel = w.shape[0] // h.shape[1]
    conv = ad.relu(ad.conv1d(h, w, params[f"{prefix}.conv.b"], stride=1, pad=kernel // 2))
    lin = ad.matmul(conv, params[f"{prefix}.out.w"]) + params[f"{prefix}.out.b"]
    return ad.sigmoid(ad.reshape(lin, (h.shape[0],)))


def scale_currents(currents, target_len, v_th=1.0):
    """Rescale so the total drive equals exactly target_len thresholds.

    Training-time alignment aid for vanilla dynamics: with the total drive
    pinned to N * v_th, the neuron fires exactly N times.
    """
    if target_len < 1:
        raise ValueError(f"scale_currents: target_len must be >= 1, got {target_len}")
    total = ad.sum_(currents)
    if total.item() <= 0.0:
        raise DegenerateInputError("scale_currents: total current is zero")
    return ad.mul(currents, ad.mul(ad.reciprocal(total), float(target_len) * v_th))


def scale_currents_capped(currents, target_len, v_th=1.0):
    """Like scale_currents, but no frame ends up above one threshold.

    A frame can discharge at most one threshold per step, so proportional
    scaling alone cannot promise target_len spikes when one frame hogs more
    than v_th of drive. Frames that scaling would push past v_th are pinned
    there and the rest of the budget is redistributed proportionally over
    the remainder. Needs at least target_len frames.
    """
    if target_len < 1:
        raise ValueError(f"scale_currents_capped: target_len must be >= 1, got {target_len}")
    vals = currents.data
    T = vals.shape[0]
    target = float(target_len) * v_th
    if T * v_th < target:
        raise DegenerateInputError(
            f"scale_currents_capped: cannot place {target_len} thresholds in {T} frames"
        )
    if vals.sum() <= 0.0:
        raise DegenerateInputError("scale_currents_capped: total current is zero")

    capped = np.zeros(T, dtype=bool)
    uniform_fallback = False
    for _ in range(T):
        remaining = target - capped.sum() * v_th
        free_sum = vals[~capped].sum()
        if remaining <= 0.0:
            break
        if free_sum <= 0.0:
            uniform_fallback = True
            break
        s = remaining / free_sum
        over = ~capped & (vals * s >= v_th)
        if not over.any():
            break
        capped |= over

    free = Tensor((~capped).astype(np.float64))
    n_capped = int(capped.sum())
    remaining = target - n_capped * v_th
    base = Tensor(capped.astype(np.float64) * v_th)
    if remaining <= 0.0:
        return base + Tensor(np.zeros(T))
    if uniform_fallback:
        # no usable drive left: spread the remainder evenly, no gradient path
        n_free = T - n_capped
        return base + Tensor((~capped).astype(np.float64) * (remaining / n_free))
    scale = ad.mul(ad.reciprocal(ad.sum_(ad.mul(currents, free))), remaining)
    return ad.add(ad.mul(ad.mul(currents, free), scale), base)


def integrate_and_fire(h, currents, spec, training=True):
    """Run a dynamics neuron over per-frame currents and emit fired states.

    Mirrors dynamics.step exactly (same trajectories), but keeps the
    membrane potential as a graph node so the emission weights stay
    differentiable. On a spike the running state is emitted and reset to
    zero. A trailing partial accumulation is dropped in training mode; in
    inference mode it is emitted iff the residual drive exceeds half a
    threshold.
    """
    T = currents.shape[0]
    if h.shape[0] != T:
        raise ad.ShapeError(f"integrate_and_fire: {h.shape[0]} hidden frames vs {T} currents")
    d = h.shape[1]
    kind = spec.kind

    v = Tensor(np.zeros(1))
    acc = Tensor(np.zeros(1))
    s = Tensor(np.zeros((1, d)))
    v_th = spec.v_th0
    u = 0.0

    potentials = np.empty(T)
    spikes = np.zeros(T, dtype=bool)
    fired = []
    frames = []

    for t in range(T):
        i_t = ad.narrow(currents, 0, t, 1)
        if kind in (DynamicsKind.VANILLA, DynamicsKind.ADAPTIVE_THRESHOLD):
            f = i_t
        elif kind is DynamicsKind.SECOND_ORDER:
            f = ad.mul(ad.mul(v, v), spec.a) + ad.mul(v, spec.b) + ad.mul(i_t, spec.c)
        else:
            f = ad.mul(ad.mul(v, v), spec.g) + ad.add(i_t, spec.m * u)
        v = ad.clamp(ad.add(v, f), -spec.v_clip, spec.v_clip)
        acc = ad.add(acc, ad.mul(ad.relu(f), 1.0 / v_th))

        peak = float(v.data[0])
        potentials[t] = peak
        fire = peak >= v_th - SPIKE_EPS

        w = ad.clamp(v, 0.0, v_th)
        s = ad.add(s, ad.mul(w, ad.narrow(h, 0, t, 1)))

        if fire:
            spikes[t] = True
            fired.append(s)
            frames.append(t)
            s = Tensor(np.zeros((1, d)))
            v = ad.sub(v, v_th)
        if kind is DynamicsKind.ADAPTIVE_THRESHOLD:
            v_th = spec.alpha * v_th + (spec.delta_h if fire else 0.0)
        elif kind is DynamicsKind.DOUBLE_NEURON:
            u = u + spec.n * u
            if fire:
                u += spec.u_jump

    spike_count = len(frames)
    tail_fired = False
    if not training and T > 0:
        residual = float(acc.data[0]) - spike_count
        if residual > 0.5:
            fired.append(s)
            frames.append(T - 1)
            tail_fired = True

    fired_states = ad.cat(fired, axis=0) if fired else None
    return IntegrationTrace(
        currents=currents.data.copy(),
        potentials=potentials,
        spikes=spikes,
        boundary_frames=frames,
        fired_states=fired_states,
        accumulated_drive=acc,
        spike_count=spike_count,
        tail_fired=tail_fired,
    )


def quantity_proxy(trace):
    """Differentiable stand-in for the spike count: the accumulated drive."""
    return trace.accumulated_drive


def pad_or_truncate_states(fired_states, target_len, d_model):
    """Fit emitted states to the target token count for teacher forcing.

    Extra states are dropped from the end; missing ones are zero rows.
    """
    if fired_states is None:
        return Tensor(np.zeros((target_len, d_model)))
    n = fired_states.shape[0]
    if n == target_len:
        return fired_states
    if n > target_len:
        return ad.narrow(fired_states, 0, 0, target_len)
    return ad.cat([fired_states, Tensor(np.zeros((target_len - n, d_model)))], axis=0)
