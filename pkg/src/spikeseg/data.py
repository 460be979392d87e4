"""Synthetic segmentation corpora, normalization, and manifest file I/O.

An utterance is a feature matrix [T, d_feat] plus a target token sequence.
The synthetic generator gives every vocabulary token a fixed class-mean
vector; a token emits a segment of 3-8 frames of that mean plus Gaussian
noise, and the segment ends are recorded as reference boundaries.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
BLANK_ID = 3
N_SPECIALS = 4

_SPECIAL_TOKENS = {"<pad>": PAD_ID, "<bos>": BOS_ID, "<eos>": EOS_ID, "<blank>": BLANK_ID}


@dataclass(frozen=True)
class Vocabulary:
    """Token-string to id map including the four specials."""

    token_to_id: dict

    @classmethod
    def make(cls, n_tokens):
        mapping = dict(_SPECIAL_TOKENS)
        for k in range(n_tokens):
            mapping[f"t{k}"] = N_SPECIALS + k
        return cls(token_to_id=mapping)

    @property
    def size(self):
        return len(self.token_to_id)

    @property
    def real_ids(self):
        return [i for i in self.token_to_id.values() if i >= N_SPECIALS]

    def to_dict(self):
        return dict(self.token_to_id)

    @classmethod
    def from_dict(cls, d):
        return cls(token_to_id={k: int(v) for k, v in d.items()})


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, d_feat]
    tokens: list  # real token ids, no specials
    boundaries: list  # segment ends as cumulative frame counts (1-based)

    def __post_init__(self):
        if self.features.shape[0] < 4:
            raise ValueError(f"utterance {self.id}: needs at least 4 frames, got {self.features.shape[0]}")
        if not self.tokens:
            raise ValueError(f"utterance {self.id}: empty token sequence")


@dataclass
class Manifest:
    utterances: list
    vocab: Vocabulary
    split: str = "train"

    def __post_init__(self):
        valid = set(self.vocab.token_to_id.values())
        for utt in self.utterances:
            for tok in utt.tokens:
                if tok not in valid:
                    raise ValueError(f"utterance {utt.id}: token id {tok} not in vocabulary")

    def __len__(self):
        return len(self.utterances)


def _downsampled_len(T):
    # two stride-2 convolutions with same padding
    return math.ceil(T / 4)


def synth_corpus(vocab_size, n_utts, d_feat, seed, split="train"):
    """Deterministic synthetic corpus; same seed, same bytes.

    Per utterance: 3-10 tokens, each a segment of 3-8 frames of its class
    mean plus N(0, 0.1^2) noise. Segment lengths are resampled until the
    4x-downsampled length leaves one frame of slack beyond the minimum CTC
    alignment, so every utterance is trainable.
    """
    if vocab_size < 2:
        raise ValueError(f"synth_corpus: vocab_size must be >= 2, got {vocab_size}")
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.make(vocab_size)
    means = rng.normal(0.0, 1.0, size=(vocab_size, d_feat))
    utts = []
    for u in range(n_utts):
        n_tok = int(rng.integers(3, 11))
        toks = rng.integers(0, vocab_size, size=n_tok)
        reps = sum(1 for i in range(1, n_tok) if toks[i] == toks[i - 1])
        need = n_tok + reps + 1
        while True:
            lens = rng.integers(3, 9, size=n_tok)
            if _downsampled_len(int(lens.sum())) >= need:
                break
        frames = []
        bounds = []
        total = 0
        for tok, seg in zip(toks, lens):
            frames.append(means[tok] + rng.normal(0.0, 0.1, size=(int(seg), d_feat)))
            total += int(seg)
            bounds.append(total)
        utts.append(
            Utterance(
                id=f"{split}-{u:04d}",
                features=np.vstack(frames),
                tokens=[N_SPECIALS + int(t) for t in toks],
                boundaries=bounds,
            )
        )
    return Manifest(utterances=utts, vocab=vocab, split=split)


def split_manifest(manifest, n_train, eval_name="eval"):
    """Split one corpus into train/eval manifests sharing the vocabulary."""
    if not 0 < n_train < len(manifest):
        raise ValueError(f"split_manifest: n_train {n_train} out of range for {len(manifest)} utterances")
    train = Manifest(manifest.utterances[:n_train], manifest.vocab, split=manifest.split)
    evals = Manifest(manifest.utterances[n_train:], manifest.vocab, split=eval_name)
    return train, evals


# ---------------------------------------------------------------------------
# normalization


@dataclass
class CmvnStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64))


def compute_cmvn(manifest, std_floor=1e-8):
    """Corpus-global per-dimension mean and floored standard deviation."""
    if not manifest.utterances:
        raise ValueError("compute_cmvn: empty manifest")
    stacked = np.vstack([u.features for u in manifest.utterances])
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), std_floor)
    return CmvnStats(mean=mean, std=std)


def apply_cmvn(manifest, stats):
    """Shift/scale every utterance with persisted statistics (no re-estimation)."""
    utts = [
        Utterance(
            id=u.id,
            features=(u.features - stats.mean) / stats.std,
            tokens=list(u.tokens),
            boundaries=list(u.boundaries),
        )
        for u in manifest.utterances
    ]
    return Manifest(utterances=utts, vocab=manifest.vocab, split=manifest.split)


def cmvn(manifest):
    """Normalize a training manifest; returns (normalized manifest, stats)."""
    stats = compute_cmvn(manifest)
    return apply_cmvn(manifest, stats), stats


def save_cmvn(stats, path):
    with open(path, "w") as fh:
        json.dump(stats.to_dict(), fh, sort_keys=True)


def load_cmvn(path):
    with open(path) as fh:
        return CmvnStats.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# file formats


def _write_features_csv(features, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in features:
            writer.writerow([f"{v:.17g}" for v in row])


def _read_features_csv(path):
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.asarray(rows, dtype=np.float64)


def save_manifest(manifest, out_dir, name="manifest.json"):
    """Write manifest JSON plus one feature CSV per utterance under feats/."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for utt in manifest.utterances:
        rel = f"feats/{utt.id}.csv"
        _write_features_csv(utt.features, out_dir / rel)
        entries.append(
            {
                "id": utt.id,
                "features": rel,
                "tokens": [int(t) for t in utt.tokens],
                "boundaries": [int(b) for b in utt.boundaries],
            }
        )
    doc = {"vocab": manifest.vocab.to_dict(), "split": manifest.split, "utterances": entries}
    path = out_dir / name
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
    return path


def load_manifest(path):
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    base = path.parent
    utts = [
        Utterance(
            id=e["id"],
            features=_read_features_csv(base / e["features"]),
            tokens=[int(t) for t in e["tokens"]],
            boundaries=[int(b) for b in e["boundaries"]],
        )
        for e in doc["utterances"]
    ]
    return Manifest(utterances=utts, vocab=Vocabulary.from_dict(doc["vocab"]),
                    split=doc.get("split", "train"))


def make_batches(utterances, batch_size=4):
    """Length-sorted batches of at most `batch_size` utterances."""
    order = sorted(utterances, key=lambda u: (u.features.shape[0], u.id))
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
