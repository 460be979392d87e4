"""Training loop, optimizer, evaluation, and the noise-robustness protocol.

One training step: encode each utterance of the batch, compute boundary
currents (rescaled to the target count for vanilla dynamics), integrate and
fire, decode teacher-forced, combine the cross-entropy, auxiliary CTC and
quantity losses, average over the batch, and take a clipped Adam step under
an inverse square root learning-rate schedule. Everything is deterministic
given (seed, config): identical runs produce byte-identical logs and
checkpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (
    BLANK_ID,
    BOS_ID,
    EOS_ID,
    CmvnStats,
    Manifest,
    Vocabulary,
    apply_cmvn,
    compute_cmvn,
    make_batches,
    save_cmvn,
)
from .dynamics import DynamicsKind, DynamicsSpec
from .integrator import (
    integrate_and_fire,
    pad_or_truncate_states,
    quantity_proxy,
    scale_currents_capped,
)
from .losses import LossWeights, boundary_accuracy, ce_loss, combined_loss, ctc_loss, per, quantity_loss
from .model import Model, ModelConfig


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; the last good checkpoint is kept on disk."""


def lr_at(step, peak, warmup):
    """Inverse square root schedule: peak * min(step/warmup, sqrt(warmup/step))."""
    if step < 1:
        raise ValueError(f"lr_at: step must be >= 1, got {step}")
    return peak * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class AdamState:
    """Bias-corrected first/second moment accumulators, one slot per parameter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    peak_lr: float = 5e-4
    warmup: int = 400

    @classmethod
    def for_params(cls, params, peak_lr=5e-4, warmup=400, beta1=0.9, beta2=0.98):
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            beta1=beta1,
            beta2=beta2,
            peak_lr=peak_lr,
            warmup=warmup,
        )


def adam_step(params, state):
    """One scheduled, bias-corrected Adam update from the stored gradients.

    Returns (applied, lr). A non-finite gradient rejects the whole step and
    leaves parameters and moments untouched.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return False, lr_at(state.step + 1, state.peak_lr, state.warmup)
    state.step += 1
    lr = lr_at(state.step, state.peak_lr, state.warmup)
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / b1c
        v_hat = state.v[name] / b2c
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True, lr


def clip_global_norm(params, max_norm=5.0):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def utterance_loss(model, spec, weights, utt, training=True, rng=None):
    """Forward pass for one utterance; returns (loss, parts, spike_count, n_target).

    Vanilla dynamics train on currents rescaled so the neuron fires exactly
    once per target token; the quantity loss always sees the pre-scale
    drive, otherwise it would be identically zero under scaling.
    """
    n_target = len(utt.tokens)
    h = model.encode(Tensor(utt.features), training=training, rng=rng)
    raw = model.currents(h)
    if spec.kind is DynamicsKind.VANILLA and training:
        integrated = scale_currents_capped(raw, n_target, spec.v_th0)
        proxy = ad.mul(ad.sum_(raw), 1.0 / spec.v_th0)
    else:
        integrated = raw
        proxy = None
    trace = integrate_and_fire(h, integrated, spec, training=training)
    if proxy is None:
        proxy = quantity_proxy(trace)
    memory = pad_or_truncate_states(trace.fired_states, n_target, model.config.d_model)
    logits = model.decode_logits(memory, [BOS_ID] + list(utt.tokens), training=training, rng=rng)
    ce = ce_loss(ad.log_softmax_rows(logits), list(utt.tokens) + [EOS_ID])
    ctc = ctc_loss(model.ctc_log_probs(h), utt.tokens, BLANK_ID)
    qua = quantity_loss(proxy, n_target)
    loss = combined_loss(ce, ctc, qua, weights)
    parts = {"ce": ce.item(), "ctc": ctc.item(), "qua": qua.item()}
    return loss, parts, trace.spike_count, n_target


def _prune_checkpoints(out_dir, keep=3):
    ckpts = sorted(out_dir.glob("ckpt_step*.ckpt"), key=lambda p: int(p.stem.split("step")[1]))
    for old in ckpts[:-keep]:
        old.unlink()


def _checkpoint_meta(config, spec, vocab, stats, step):
    return {
        "config": config.to_dict(),
        "dynamics": spec.to_dict(),
        "vocab": vocab.to_dict(),
        "cmvn": stats.to_dict(),
        "step": step,
    }


def train(
    manifest,
    config,
    spec,
    weights=None,
    steps=3000,
    seed=0,
    out_dir="run",
    batch_size=4,
    peak_lr=5e-4,
    warmup=400,
    ckpt_every=200,
    grad_clip=5.0,
):
    """Train on a raw manifest; returns a summary dict.

    Normalization statistics are estimated on this manifest, persisted next
    to the checkpoints, and baked into every checkpoint's metadata so
    evaluation applies the exact same shift/scale to held-out data.
    """
    if weights is None:
        weights = LossWeights()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    stats = compute_cmvn(manifest)
    normed = apply_cmvn(manifest, stats)
    save_cmvn(stats, out_dir / "cmvn.json")

    rng = np.random.default_rng(seed)
    model = Model(config, rng)
    opt = AdamState.for_params(model.params, peak_lr=peak_lr, warmup=warmup)
    batches = make_batches(normed.utterances, batch_size)

    log_path = out_dir / "train_log.jsonl"
    final_path = out_dir / "model_final.ckpt"
    order = rng.permutation(len(batches))
    cursor = 0
    rejected = 0
    scaled_checks = 0
    last_ckpt = None

    with open(log_path, "w") as log:
        for step_no in range(1, steps + 1):
            if cursor >= len(order):
                order = rng.permutation(len(batches))
                cursor = 0
            batch = batches[order[cursor]]
            cursor += 1

            losses = []
            agg = {"ce": 0.0, "ctc": 0.0, "qua": 0.0}
            for utt in batch:
                loss, parts, fired, n_target = utterance_loss(
                    model, spec, weights, utt, training=True, rng=rng
                )
                if spec.kind is DynamicsKind.VANILLA:
                    # scaled mode pins the total drive to n_target thresholds
                    assert fired == n_target, (
                        f"scaled vanilla fired {fired} spikes for {n_target} tokens ({utt.id})"
                    )
                    scaled_checks += 1
                losses.append(loss)
                for k in agg:
                    agg[k] += parts[k] / len(batch)

            total = losses[0]
            for extra in losses[1:]:
                total = ad.add(total, extra)
            total = ad.mul(total, 1.0 / len(batch))
            total_val = total.item()
            if not math.isfinite(total_val):
                log.write(json.dumps({"step": step_no, "event": "diverged"}) + "\n")
                raise TrainingDivergedError(
                    f"non-finite loss at step {step_no}; last checkpoint: {last_ckpt}"
                )

            ad.zero_grads(model.params.values())
            total.backward()
            clip_global_norm(model.params, grad_clip)
            applied, lr = adam_step(model.params, opt)
            if not applied:
                rejected += 1

            log.write(
                json.dumps(
                    {
                        "step": step_no,
                        "lr": lr,
                        "ce": agg["ce"],
                        "ctc": agg["ctc"],
                        "qua": agg["qua"],
                        "total": total_val,
                    },
                    sort_keys=True,
                )
                + "\n"
            )

            if ckpt_every and step_no % ckpt_every == 0:
                path = out_dir / f"ckpt_step{step_no}.ckpt"
                ad.save_checkpoint(
                    path, model.params, _checkpoint_meta(config, spec, manifest.vocab, stats, step_no)
                )
                last_ckpt = path
                _prune_checkpoints(out_dir)

    ad.save_checkpoint(
        final_path, model.params, _checkpoint_meta(config, spec, manifest.vocab, stats, steps)
    )
    return {
        "checkpoint": str(final_path),
        "log": str(log_path),
        "steps": steps,
        "rejected_steps": rejected,
        "scaled_count_checks": scaled_checks,
        "final_loss": total_val,
    }


def load_model(checkpoint):
    """Rebuild (model, dynamics spec, vocabulary, cmvn stats) from a checkpoint."""
    arrays, meta = ad.load_checkpoint(checkpoint)
    config = ModelConfig.from_dict(meta["config"])
    model = Model(config)
    model.load_arrays(arrays)
    spec = DynamicsSpec.from_dict(meta["dynamics"])
    vocab = Vocabulary.from_dict(meta["vocab"])
    stats = CmvnStats.from_dict(meta["cmvn"])
    return model, spec, vocab, stats


def _predicted_boundaries(trace, total_frames):
    """Map down-sampled spike indices to original frame counts.

    Down-sampled frame j covers original frames [4j+1, 4j+4] (1-based), so
    its centre 4j+2 is within 2 frames of any boundary inside the block.
    """
    return [min(4 * j + 2, total_frames) for j in trace.boundary_frames]


def decode_utterance(model, spec, utt, beam=5):
    """Inference for one normalized utterance; returns (hypothesis, trace)."""
    with ad.no_grad():
        h = model.encode(Tensor(utt.features))
        currents = model.currents(h)
        trace = integrate_and_fire(h, currents, spec, training=False)
        if trace.fired_states is None:
            return [], trace
        hyp = model.beam_search(trace.fired_states, beam=beam)
    return hyp, trace


def evaluate(checkpoint, manifest, beam=5, boundary_tol=2, noise_high=0.0, noise_seed=0):
    """Decode every utterance; report PER, boundary recall, spike statistics.

    `manifest` is raw; the checkpoint's persisted normalization is applied
    first, then optional uniform noise in [0, noise_high) per element.
    """
    model, spec, vocab, stats = load_model(checkpoint)
    normed = apply_cmvn(manifest, stats)
    if noise_high > 0:
        nrng = np.random.default_rng(noise_seed)
        for utt in normed.utterances:
            utt.features = utt.features + nrng.uniform(0.0, noise_high, size=utt.features.shape)
    pers = []
    recalls = []
    spike_counts = []
    target_lens = []
    for utt in normed.utterances:
        hyp, trace = decode_utterance(model, spec, utt, beam=beam)
        pers.append(per(utt.tokens, hyp))
        pred = _predicted_boundaries(trace, utt.features.shape[0])
        recalls.append(boundary_accuracy(pred, utt.boundaries, boundary_tol))
        spike_counts.append(trace.spike_count + int(trace.tail_fired))
        target_lens.append(len(utt.tokens))
    return {
        "per_mean": float(np.mean(pers)),
        "per_std": float(np.std(pers)),
        "boundary_recall": float(np.mean(recalls)),
        "spikes_per_utt": float(np.mean(spike_counts)),
        "mean_target_len": float(np.mean(target_lens)),
        "n_utts": len(pers),
        "beam": beam,
    }


def robustness_eval(checkpoint, manifest, noise_high=0.01, seed=0, beam=5):
    """PER before/after adding uniform input noise, plus the relative change."""
    if noise_high < 0:
        raise ValueError(f"noise_high must be nonnegative, got {noise_high}")
    clean = evaluate(checkpoint, manifest, beam=beam)
    noisy = evaluate(checkpoint, manifest, beam=beam, noise_high=noise_high, noise_seed=seed)
    pc, pn = clean["per_mean"], noisy["per_mean"]
    if pn == pc:
        rel = 0.0
    elif pc == 0.0:
        rel = math.inf
    else:
        rel = (pn - pc) / pc
    return {
        "per_clean": pc,
        "per_noisy": pn,
        "relative_change": rel,
        "noise_high": noise_high,
        "boundary_recall_clean": clean["boundary_recall"],
        "boundary_recall_noisy": noisy["boundary_recall"],
    }
