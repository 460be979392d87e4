"""Spiking transformer encoder-decoder.

Encoder: two stride-2 GLU convolution layers (4x temporal down-sampling), a
linear map to the model width, additive sinusoidal positions, then pre-norm
blocks of exactly six sub-blocks: multi-head self-attention, residual,
dense, spiking activation, dense, residual. The activation between the two
dense layers is either a single-step integrate-and-fire unit (threshold on
the accumulated pre-activation, rectangular surrogate gradient) or ReLU,
so the same architecture runs as a spiking or an artificial transformer.

Decoder: autoregressive pre-norm transformer over token embeddings with
causal self-attention and cross-attention to the fired boundary states.
Inference uses length-normalized beam search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS_ID, EOS_ID, N_SPECIALS
from .integrator import compute_currents, init_current_params

ACTIVATIONS = ("spike", "relu")


class ConfigError(ValueError):
    """Inconsistent model configuration."""


class UtteranceTooShortError(ValueError):
    """Fewer frames than the convolution frontend can down-sample."""


class DecodeContextError(ValueError):
    """Decoding was requested without any fired encoder states."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_feat: int
    n_enc_blocks: int = 2
    n_dec_blocks: int = 2
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 4
    activation: str = "spike"
    dropout: float = 0.2
    frontend_channels: tuple = (32, 64)
    boundary_channels: int = 256
    v_th: float = 1.0
    surrogate_width: float = 0.5

    def __post_init__(self):
        if self.n_enc_blocks < 1:
            raise ConfigError(f"n_enc_blocks must be >= 1, got {self.n_enc_blocks}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even for sinusoidal positions, got {self.d_model}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got '{self.activation}'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if any(c % 2 for c in self.frontend_channels):
            raise ConfigError(f"frontend channels must be even (GLU halves them), got {self.frontend_channels}")
        if self.vocab_size <= N_SPECIALS:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no real tokens")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["frontend_channels"] = list(self.frontend_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["frontend_channels"] = tuple(d.get("frontend_channels", (32, 64)))
        return cls(**d)


def sinusoidal_positions(length, d_model):
    pos = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.exp(-math.log(10000.0) * np.arange(0, d_model, 2) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos * freqs)
    pe[:, 1::2] = np.cos(pos * freqs)
    return pe


def causal_mask(length):
    """Additive mask: 0 on/below the diagonal, a large negative above."""
    return np.triu(np.full((length, length), -1e30), k=1)


class Model:
    """Parameter container plus the forward passes built on the graph ops."""

    def __init__(self, config, rng=None):
        self.config = config
        self.params = {}
        if rng is None:
            rng = np.random.default_rng(0)
        self._build(rng)

    # -- parameter construction -------------------------------------------

    def _linear(self, rng, name, d_in, d_out):
        self.params[f"{name}.w"] = Tensor(
            ad.uniform_init(rng, (d_in, d_out), d_in, d_out), requires_grad=True
        )
        self.params[f"{name}.b"] = Tensor(np.zeros(d_out), requires_grad=True)

    def _norm(self, name, d):
        self.params[f"{name}.g"] = Tensor(np.ones(d), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(d), requires_grad=True)

    def _attention_params(self, rng, name, d):
        for part in ("q", "k", "v", "o"):
            self._linear(rng, f"{name}.{part}", d, d)

    def _build(self, rng):
        cfg = self.config
        d = cfg.d_model
        c1, c2 = cfg.frontend_channels
        self.params["front.conv1.w"] = Tensor(
            ad.uniform_init(rng, (5 * cfg.d_feat, c1), 5 * cfg.d_feat, c1), requires_grad=True
        )
        self.params["front.conv1.b"] = Tensor(np.zeros(c1), requires_grad=True)
        self.params["front.conv2.w"] = Tensor(
            ad.uniform_init(rng, (5 * (c1 // 2), c2), 5 * (c1 // 2), c2), requires_grad=True
        )
        self.params["front.conv2.b"] = Tensor(np.zeros(c2), requires_grad=True)
        self._linear(rng, "front.proj", c2 // 2, d)

        for i in range(cfg.n_enc_blocks):
            pfx = f"enc.{i}"
            self._norm(f"{pfx}.ln1", d)
            self._attention_params(rng, f"{pfx}.attn", d)
            self._norm(f"{pfx}.ln2", d)
            self._linear(rng, f"{pfx}.ff1", d, cfg.d_ff)
            self._linear(rng, f"{pfx}.ff2", cfg.d_ff, d)
        self._norm("enc.ln_out", d)

        self.params.update(
            init_current_params(rng, d, channels=cfg.boundary_channels, kernel=3)
        )
        self._linear(rng, "ctc", d, cfg.vocab_size)

        self.params["dec.embed"] = Tensor(
            ad.uniform_init(rng, (cfg.vocab_size, d), cfg.vocab_size, d), requires_grad=True
        )
        self._norm("dec.ln_mem", d)
        for i in range(cfg.n_dec_blocks):
            pfx = f"dec.{i}"
            self._norm(f"{pfx}.ln1", d)
            self._attention_params(rng, f"{pfx}.self", d)
            self._norm(f"{pfx}.ln2", d)
            self._attention_params(rng, f"{pfx}.cross", d)
            self._norm(f"{pfx}.ln3", d)
            self._linear(rng, f"{pfx}.ff1", d, cfg.d_ff)
            self._linear(rng, f"{pfx}.ff2", cfg.d_ff, d)
        self._norm("dec.ln_out", d)
        self._linear(rng, "dec.out", d, cfg.vocab_size)

    # -- shared pieces ------------------------------------------------------

    def _ln(self, name, x):
        p = self.params
        return ad.layer_norm_rows(x) * p[f"{name}.g"] + p[f"{name}.b"]

    def _lin(self, name, x):
        p = self.params
        return ad.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]

    def _dropout(self, x, training, rng):
        rate = self.config.dropout
        if not training or rate == 0.0 or rng is None:
            return x
        return ad.dropout(x, rate, ad.make_dropout_mask(rng, x.shape, rate))

    def _activation(self, x):
        if self.config.activation == "spike":
            return ad.spike_fn(x, self.config.v_th, self.config.surrogate_width)
        return ad.relu(x)

    def _mha(self, name, q_in, k_in, v_in, mask=None):
        cfg = self.config
        dh = cfg.d_model // cfg.n_heads
        scale = 1.0 / math.sqrt(dh)
        q = self._lin(f"{name}.q", q_in)
        k = self._lin(f"{name}.k", k_in)
        v = self._lin(f"{name}.v", v_in)
        heads = []
        for i in range(cfg.n_heads):
            qh = ad.narrow(q, 1, i * dh, dh)
            kh = ad.narrow(k, 1, i * dh, dh)
            vh = ad.narrow(v, 1, i * dh, dh)
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
            if mask is not None:
                scores = ad.add(scores, Tensor(mask))
            heads.append(ad.matmul(ad.softmax_rows(scores), vh))
        return self._lin(f"{name}.o", ad.cat(heads, axis=1))

    def _ffn(self, pfx, x):
        return self._lin(f"{pfx}.ff2", self._activation(self._lin(f"{pfx}.ff1", x)))

    # -- encoder ------------------------------------------------------------

    def frontend(self, features, training=False, rng=None):
        """[T, d_feat] -> [ceil(T/4), d_model] via two stride-2 GLU convolutions."""
        if features.shape[0] < 4:
            raise UtteranceTooShortError(
                f"frontend needs at least 4 frames, got {features.shape[0]}"
            )
        p = self.params
        x = ad.glu(ad.conv1d(features, p["front.conv1.w"], p["front.conv1.b"], stride=2, pad=2))
        x = self._dropout(x, training, rng)
        x = ad.glu(ad.conv1d(x, p["front.conv2.w"], p["front.conv2.b"], stride=2, pad=2))
        x = self._dropout(x, training, rng)
        return self._lin("front.proj", x)

    def _enc_block(self, i, x, training, rng):
        pfx = f"enc.{i}"
        att = self._mha(f"{pfx}.attn", *[self._ln(f"{pfx}.ln1", x)] * 3)
        x = ad.add(x, self._dropout(att, training, rng))
        ff = self._ffn(pfx, self._ln(f"{pfx}.ln2", x))
        return ad.add(x, self._dropout(ff, training, rng))

    def encode(self, features, training=False, rng=None):
        """Full encoder: frontend, positions, blocks, final norm."""
        if not isinstance(features, Tensor):
            features = Tensor(features)
        x = self.frontend(features, training, rng)
        x = ad.add(x, Tensor(sinusoidal_positions(x.shape[0], self.config.d_model)))
        for i in range(self.config.n_enc_blocks):
            x = self._enc_block(i, x, training, rng)
        return self._ln("enc.ln_out", x)

    def ctc_log_probs(self, h):
        """Auxiliary frame-wise log posteriors over the vocabulary (with blank)."""
        return ad.log_softmax_rows(self._lin("ctc", h))

    def currents(self, h):
        return compute_currents(self.params, h)

    # -- decoder ------------------------------------------------------------

    def _dec_block(self, i, x, memory, mask, training, rng):
        pfx = f"dec.{i}"
        att = self._mha(f"{pfx}.self", *[self._ln(f"{pfx}.ln1", x)] * 3, mask=mask)
        x = ad.add(x, self._dropout(att, training, rng))
        cross = self._mha(f"{pfx}.cross", self._ln(f"{pfx}.ln2", x), memory, memory)
        x = ad.add(x, self._dropout(cross, training, rng))
        ff = self._ffn(pfx, self._ln(f"{pfx}.ln3", x))
        return ad.add(x, self._dropout(ff, training, rng))

    def decode_logits(self, memory, tokens_in, training=False, rng=None):
        """Teacher-forced pass: logits for every position of `tokens_in`."""
        if memory is None or memory.shape[0] == 0:
            raise DecodeContextError("decode called with no fired states")
        # positions on the memory let cross-attention align output slot i
        # with fired state i instead of relying on content alone
        mem = ad.add(
            self._ln("dec.ln_mem", memory),
            Tensor(sinusoidal_positions(memory.shape[0], self.config.d_model)),
        )
        # scale embeddings so token identity is not drowned by the positions
        x = ad.mul(ad.embedding(self.params["dec.embed"], tokens_in), math.sqrt(self.config.d_model))
        x = ad.add(x, Tensor(sinusoidal_positions(len(tokens_in), self.config.d_model)))
        x = self._dropout(x, training, rng)
        mask = causal_mask(len(tokens_in))
        for i in range(self.config.n_dec_blocks):
            x = self._dec_block(i, x, mem, mask, training, rng)
        return self._lin("dec.out", self._ln("dec.ln_out", x))

    def decode_log_probs(self, memory, prefix):
        """Log probabilities of the next token after `prefix` (inference)."""
        with ad.no_grad():
            logits = self.decode_logits(memory, [BOS_ID] + list(prefix))
        row = logits.data[-1]
        z = row - row.max()
        return z - math.log(np.exp(z).sum())

    def beam_search(self, memory, beam=5, max_len=None):
        """Length-normalized beam search; returns real token ids, no eos."""
        if memory is None or memory.shape[0] == 0:
            raise DecodeContextError("beam search called with no fired states")
        if max_len is None:
            max_len = memory.shape[0] + 5
        candidates = [EOS_ID] + list(range(N_SPECIALS, self.config.vocab_size))
        return beam_search_core(
            lambda prefix: self.decode_log_probs(memory, prefix),
            candidates,
            EOS_ID,
            beam,
            max_len,
        )

    # -- persistence ----------------------------------------------------------

    def load_arrays(self, arrays):
        for name, t in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter '{name}'")
            if tuple(arrays[name].shape) != t.shape:
                raise ad.ShapeError(
                    f"parameter '{name}': checkpoint shape {arrays[name].shape} vs model {t.shape}"
                )
            t.data = np.asarray(arrays[name], dtype=np.float64)


def beam_search_core(step_fn, candidates, eos_id, beam, max_len):
    """Breadth-limited best-first search with length normalization.

    Hypotheses that emit `eos_id` (or hit `max_len`) move to a finished pool
    scored by total log-probability divided by length (eos included); alive
    prefixes are pruned to the `beam` best by cumulative log-probability.
    Ties break toward ascending token ids. Returns the best finished
    hypothesis without the final eos.
    """
    if beam < 1:
        raise ValueError(f"beam width must be >= 1, got {beam}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    alive = [((), 0.0)]
    finished = []
    for t in range(max_len):
        expansions = []
        for toks, lp in alive:
            logp = step_fn(list(toks))
            for c in candidates:
                expansions.append((toks + (c,), lp + float(logp[c])))
        alive = []
        for toks, lp in expansions:
            if toks[-1] == eos_id:
                finished.append((lp / len(toks), toks[:-1]))
            elif t == max_len - 1:
                finished.append((lp / len(toks), toks))
            else:
                alive.append((toks, lp))
        alive.sort(key=lambda e: (-e[1], e[0]))
        alive = alive[:beam]
        if not alive:
            break
    if not finished:
        return []
    finished.sort(key=lambda e: (-e[0], e[1]))
    return list(finished[0][1])
