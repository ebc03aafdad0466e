"""Entropy-based choice of rollout positions.

Entropies are taken from the next-token distributions of one forward pass,
smoothed with a moving average, and one position is drawn per contiguous
chunk of the sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("entropy_weighted", "uniform", "argmax_entropy", "argmin_entropy")


@dataclass
class EntropyProfile:
    raw: np.ndarray
    smoothed: np.ndarray | None = None
    kernel: int | None = None

    @property
    def values(self) -> np.ndarray:
        """The profile used for selection: smoothed if available."""
        return self.raw if self.smoothed is None else self.smoothed

    def __len__(self) -> int:
        return len(self.raw)


@dataclass(frozen=True)
class SelectionConfig:
    c: int = 8
    tau: float = 1.0
    strategy: str = "entropy_weighted"
    pool_kernel: int | None = None  # None: use the rollout length k
    seed: int = 0

    def __post_init__(self):
        if self.c < 1:
            raise ValueError("SelectionConfig requires c >= 1")
        if not self.tau > 0:
            raise ValueError("SelectionConfig requires tau > 0")
        if self.pool_kernel is not None and self.pool_kernel < 1:
            raise ValueError("SelectionConfig requires pool_kernel >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


@dataclass
class SelectedPositions:
    positions: np.ndarray
    probabilities: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)


def token_entropy(logits) -> EntropyProfile:
    """Entropy (nats) of softmax(logits[t]) for every row t."""
    x = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    H = -(np.exp(logp) * logp).sum(axis=-1)
    return EntropyProfile(np.maximum(H, 0.0))


def smooth_entropy(profile: EntropyProfile, kernel: int) -> EntropyProfile:
    """Centred moving average; windows are truncated at the sequence ends."""
    if kernel < 1:
        raise ValueError("kernel must be >= 1")
    raw = np.asarray(profile.raw, dtype=np.float64)
    T = len(raw)
    half = kernel // 2
    csum = np.concatenate([[0.0], np.cumsum(raw)])
    lo = np.maximum(np.arange(T) - half, 0)
    hi = np.minimum(np.arange(T) + half + 1, T)
    smoothed = raw.copy() if kernel == 1 else (csum[hi] - csum[lo]) / (hi - lo)
    return EntropyProfile(profile.raw, smoothed, kernel)


def chunk_bounds(T: int, c: int) -> list[tuple[int, int]]:
    """``c`` contiguous chunks of length T // c; the remainder joins the last chunk."""
    size = T // c
    return [(i * size, (i + 1) * size if i < c - 1 else T) for i in range(c)]


def chunk_candidates(profile: EntropyProfile, config: SelectionConfig, k: int):
    """Per chunk: candidate positions and their selection probabilities.

    A position t is a candidate only if the k ground-truth tokens after it
    exist (t <= T - k - 1).
    """
    H = np.asarray(profile.values, dtype=np.float64)
    T = len(H)
    if T < config.c * (k + 1):
        raise ValueError(f"sequence of length {T} too short for c={config.c} chunks with k={k}; "
                         "reduce c or k")
    out = []
    for a, b in chunk_bounds(T, config.c):
        cand = np.arange(a, min(b, T - k))
        if len(cand) == 0:
            raise ValueError(f"chunk [{a}, {b}) has no position with {k} tokens of headroom; "
                             "reduce c or k")
        h = H[cand]
        if config.strategy == "entropy_weighted":
            z = h / config.tau
            w = np.exp(z - z.max())
            probs = w / w.sum()
        elif config.strategy == "uniform":
            probs = np.full(len(cand), 1.0 / len(cand))
        else:
            # argmax/argmin return the first extreme index, i.e. the lowest position
            j = int(np.argmax(h) if config.strategy == "argmax_entropy" else np.argmin(h))
            probs = np.zeros(len(cand))
            probs[j] = 1.0
        out.append((cand, probs))
    return out


def sample_positions(profile: EntropyProfile, config: SelectionConfig, k: int,
                     rng: np.random.Generator | None = None) -> SelectedPositions:
    """Draw one rollout position per chunk according to ``config.strategy``."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    positions, probs = [], []
    for cand, p in chunk_candidates(profile, config, k):
        if config.strategy in ("argmax_entropy", "argmin_entropy"):
            j = int(np.argmax(p))
        else:
            j = int(rng.choice(len(cand), p=p))
        positions.append(int(cand[j]))
        probs.append(float(p[j]))
    return SelectedPositions(np.array(positions, dtype=np.int64), np.array(probs))


def select_for_logits(logits, config: SelectionConfig, k: int, rng=None,
                      limit: int | None = None) -> tuple[EntropyProfile, SelectedPositions]:
    """Entropy -> smoothing -> chunked sampling for one forward pass.

    ``limit`` restricts selection to the first ``limit`` rows (e.g. a prompt span).
    """
    x = getattr(logits, "data", logits)
    if limit is not None:
        x = x[:limit]
    profile = smooth_entropy(token_entropy(x), config.pool_kernel or k)
    return profile, sample_positions(profile, config, k, rng)
