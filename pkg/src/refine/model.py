"""A small autoregressive language model with fast-weight sequence mixing.

Each layer is a pre-norm residual block ``x + mixer(norm(x))`` followed by
``x + ffn(norm(x))``. The mixer keeps a d_fast x d_fast memory W that is read
with the query (``W q``) and then written with the delta rule on the
(normalised) key and value of the same token. The memory starts at zero for
every sequence.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Array

UPDATE_MODES = ("per_token_delta", "chunked")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 258
    d_model: int = 32
    n_layers: int = 2
    d_fast: int = 16
    eta: float = 0.5
    update_mode: str = "per_token_delta"
    chunk_size: int = 16
    max_seq_len: int = 512
    d_ff: int | None = None

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "d_fast", "chunk_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive int, got {value!r}")
        if self.d_ff is not None and self.d_ff < 1:
            raise ValueError(f"ModelConfig.d_ff must be a positive int, got {self.d_ff!r}")
        if not self.eta > 0:
            raise ValueError(f"ModelConfig.eta must be > 0, got {self.eta!r}")
        if self.d_fast > self.d_model:
            raise ValueError("ModelConfig requires d_fast <= d_model")
        if self.chunk_size > self.max_seq_len:
            raise ValueError("ModelConfig requires chunk_size <= max_seq_len")
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"update_mode must be one of {UPDATE_MODES}, got {self.update_mode!r}")

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def scan_chunk(self) -> int:
        return 1 if self.update_mode == "per_token_delta" else self.chunk_size


class ModelParams:
    """Slow parameters of the model: a config plus named arrays."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Array]):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Array:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def replace(self, tensors: dict[str, Array]) -> ModelParams:
        return ModelParams(self.config, tensors)

    def tracked(self) -> ModelParams:
        """Copy whose arrays require gradients (leaves for a fresh tape)."""
        return ModelParams(self.config, {k: Array._wrap(v.data, requires_grad=True)
                                         for k, v in self.tensors.items()})

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.config, {k: Array._wrap(v.data.astype(dtype))
                                         for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.tensors.values()))

    def equal(self, other: ModelParams) -> bool:
        """Bitwise equality of config and every tensor."""
        if self.config != other.config or self.names() != other.names():
            return False
        return all(np.array_equal(self[k].data, other[k].data) and
                   self[k].data.dtype == other[k].data.dtype for k in self.tensors)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, ff, V = config.d_model, config.d_fast, config.ff_dim, config.vocab_size
    shapes = {"embed": (V, d)}
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "norm1": (d,), p + "wq": (d, f), p + "wk": (d, f), p + "wv": (d, f),
            p + "wo": (f, d), p + "norm2": (d,), p + "w1": (d, ff), p + "b1": (ff,),
            p + "w2": (ff, d), p + "b2": (d,),
        })
    shapes["norm_f"] = (d,)
    shapes["head"] = (d, V)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic init: uniform(+-1/sqrt(fan_in)) projections, unit norms, zero biases."""
    rng = np.random.default_rng(seed)
    dtype = nx.get_dtype()
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("norm"):
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        elif leaf == "embed":
            data = rng.uniform(-1.0, 1.0, size=shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Array(data.astype(dtype), name=name)
    return ModelParams(config, tensors)


# --------------------------------------------------------- fast-weight memory

@dataclass(frozen=True)
class FastWeightState:
    """Per-layer fast weights after ``position`` tokens have been incorporated.

    In chunked mode ``pending_keys``/``pending_values`` hold the keys and
    values of the current, not yet applied, chunk.
    """

    matrices: tuple[np.ndarray, ...]
    position: int = 0
    pending_keys: tuple[np.ndarray, ...] = ()
    pending_values: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        for W in self.matrices:
            if not np.all(np.isfinite(W)):
                raise ValueError("FastWeightState contains non-finite entries")
        if self.position < 0:
            raise ValueError("FastWeightState position must be >= 0")

    @classmethod
    def zeros(cls, config: ModelConfig) -> FastWeightState:
        dt = nx.get_dtype()
        d = config.d_fast
        return cls(tuple(np.zeros((d, d), dtype=dt) for _ in range(config.n_layers)), 0,
                   tuple(np.zeros((0, d), dtype=dt) for _ in range(config.n_layers)),
                   tuple(np.zeros((0, d), dtype=dt) for _ in range(config.n_layers)))

    def n_pending(self) -> int:
        return len(self.pending_keys[0]) if self.pending_keys else 0


def _check_finite(*xs):
    for x in xs:
        if not np.all(np.isfinite(x)):
            raise ValueError("fast-weight update received non-finite input")


def _chunk_update(W: np.ndarray, K: np.ndarray, V: np.ndarray, eta: float) -> np.ndarray:
    # K, V: (n, d_fast) rows; one step on the mean squared-error gradient
    err = W @ K.T - V.T
    return W - (eta / len(K)) * (err @ K)


def delta_rule_step(W: np.ndarray, k: np.ndarray, v: np.ndarray, eta: float) -> np.ndarray:
    """One delta-rule write: ``W - eta * (W k - v) k^T``. Returns a new matrix."""
    W, k, v = np.asarray(W), np.asarray(k), np.asarray(v)
    if k.shape != (W.shape[1],) or v.shape != (W.shape[0],):
        raise nx.ShapeError(f"delta_rule_step: W {W.shape}, k {k.shape}, v {v.shape} do not conform")
    _check_finite(W, k, v, eta)
    return _chunk_update(W, k[None, :].astype(W.dtype), v[None, :].astype(W.dtype), eta)


def chunked_update_step(W: np.ndarray, keys, values, eta: float) -> np.ndarray:
    """Apply the mean delta-rule gradient of a whole chunk in one write."""
    W = np.asarray(W)
    K = np.atleast_2d(np.asarray(keys, dtype=W.dtype))
    V = np.atleast_2d(np.asarray(values, dtype=W.dtype))
    if np.asarray(keys).size == 0:
        raise ValueError("chunked_update_step: empty chunk")
    if K.shape != V.shape or K.shape[1] != W.shape[1]:
        raise nx.ShapeError(f"chunked_update_step: keys {K.shape}, values {V.shape}, W {W.shape}")
    _check_finite(W, K, V, eta)
    return _chunk_update(W, K, V, eta)


def apply(W: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Read the memory: ``W q``."""
    W, q = np.asarray(W), np.asarray(q)
    if q.shape != (W.shape[1],):
        raise nx.ShapeError(f"apply: W {W.shape} and q {q.shape} do not conform")
    return W @ q


def fast_weight_scan(q: Array, k: Array, v: Array, w0: Array, eta: float, chunk: int,
                     pending_k: np.ndarray | None = None, pending_v: np.ndarray | None = None):
    """Read-then-write pass of the memory over a sequence.

    Every token reads the memory as it stood at the start of its chunk; a
    chunk is written once it holds ``chunk`` key/value pairs (pending pairs
    from an earlier call count toward the first chunk). ``chunk == 1`` is
    the per-token delta rule.

    Returns ``(y, states, (tail_k, tail_v))`` where ``states`` stacks the
    memory at every chunk boundary starting with ``w0``.
    """
    Q, K, Vv, W0 = q.data, k.data, v.data, w0.data
    T, d = Q.shape
    dt = Q.dtype
    if pending_k is None:
        pending_k = np.zeros((0, d), dtype=dt)
        pending_v = np.zeros((0, d), dtype=dt)
    n_pend = len(pending_k)

    if chunk == 1 and n_pend == 0:
        return _per_token_scan(q, k, v, w0, eta)

    Y = np.empty_like(Q)
    W = W0
    states = [W0]
    chunks = []  # (first_new_token, stop_token, K_chunk, V_chunk, n_constant_rows)
    start = 0
    need = chunk - n_pend
    const_k, const_v = pending_k, pending_v
    i = 0
    while i < T:
        stop = min(T, start + need)
        Y[start:stop] = Q[start:stop] @ W.T
        if stop - start == need:
            Kc = np.concatenate([const_k, K[start:stop]])
            Vc = np.concatenate([const_v, Vv[start:stop]])
            W = _chunk_update(W, Kc, Vc, eta).astype(dt)
            chunks.append((start, stop, Kc, Vc, len(const_k)))
            states.append(W)
            const_k = const_k[:0]
            const_v = const_v[:0]
            start, need = stop, chunk
        i = stop
    tail_k = np.concatenate([const_k, K[start:T]])
    tail_v = np.concatenate([const_v, Vv[start:T]])
    S = np.stack(states)

    def bw(gy, gS):
        gq = np.zeros_like(Q)
        gk = np.zeros_like(K)
        gv = np.zeros_like(Vv)
        G = gS[-1].copy()
        # reads of the incomplete tail use the last boundary state
        if start < T:
            Wl = S[-1]
            gq[start:T] = gy[start:T] @ Wl
            G += gy[start:T].T @ Q[start:T]
        for j in range(len(chunks) - 1, -1, -1):
            a, b, Kc, Vc, nc = chunks[j]
            Wj = S[j]
            s = eta / len(Kc)
            err = Wj @ Kc.T - Vc.T
            GK = G @ Kc.T
            gKc = -s * (err.T @ G + GK.T @ Wj)
            gVc = s * GK.T
            gk[a:b] += gKc[nc:]
            gv[a:b] += gVc[nc:]
            G = G - s * (GK @ Kc)
            gq[a:b] = gy[a:b] @ Wj
            G += gy[a:b].T @ Q[a:b] + gS[j]
        return gq, gk, gv, G

    y, states_arr = nx.record_op((Y, S), (q, k, v, w0), bw)
    return y, states_arr, (tail_k, tail_v)


def _per_token_scan(q: Array, k: Array, v: Array, w0: Array, eta: float):
    Q, K, Vv = q.data, k.data, v.data
    T, d = Q.shape
    S = np.empty((T + 1, d, d), dtype=Q.dtype)
    S[0] = w0.data
    Y = np.empty_like(Q)
    for i in range(T):
        W = S[i]
        Y[i] = W @ Q[i]
        S[i + 1] = W - eta * np.outer(W @ K[i] - Vv[i], K[i])

    def bw(gy, gS):
        gq = np.empty_like(Q)
        gk = np.empty_like(K)
        gv = np.empty_like(Vv)
        G = gS[T].copy()
        for i in range(T - 1, -1, -1):
            W, ki = S[i], K[i]
            err = W @ ki - Vv[i]
            Gk = G @ ki
            gk[i] = -eta * (G.T @ err + W.T @ Gk)
            gv[i] = eta * Gk
            G -= eta * np.outer(Gk, ki)
            gq[i] = W.T @ gy[i]
            G += np.outer(gy[i], Q[i])
            G += gS[i]
        return gq, gk, gv, G

    y, states = nx.record_op((Y, S), (q, k, v, w0), bw)
    empty = np.zeros((0, d), dtype=Q.dtype)
    return y, states, (empty, empty)


# ------------------------------------------------------------------- forward

@dataclass
class ForwardOutput:
    logits: Array
    hidden: Array
    states: list[Array] | None
    final_state: FastWeightState
    token_logprobs: np.ndarray = field(repr=False, default=None)
    ids: np.ndarray = field(repr=False, default=None)

    @property
    def length(self) -> int:
        return self.logits.shape[0]


def _as_ids(config: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(getattr(tokens, "ids", tokens), dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        bad = int(ids[(ids < 0) | (ids >= config.vocab_size)][0])
        raise ValueError(f"token id {bad} outside vocabulary of size {config.vocab_size}")
    return ids


def forward_sequence(params: ModelParams, tokens, capture_states: bool = False,
                     init_state: FastWeightState | None = None,
                     init_matrices: list[Array] | None = None,
                     position: int = 0) -> ForwardOutput:
    """Run the model over ``tokens`` (a TokenSequence or int array).

    ``init_state`` continues from a cached memory; ``init_matrices`` does the
    same with (possibly tracked) arrays so gradients reach the state that was
    branched from; ``position`` then gives the number of tokens already read.
    Both default to the zero memory.
    """
    cfg = params.config
    ids = _as_ids(cfg, tokens)
    T = len(ids)
    if T == 0:
        raise ValueError("forward_sequence needs at least one token")
    pos0 = init_state.position if init_state is not None else position
    if pos0 + T > cfg.max_seq_len:
        raise ValueError(f"sequence of length {pos0 + T} exceeds max_seq_len {cfg.max_seq_len}")
    dt = params["embed"].data.dtype
    x = nx.gather_rows(params["embed"], ids)
    states, finals, tails_k, tails_v = [], [], [], []
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        h = nx.rms_norm(x, params[p + "norm1"])
        q = h @ params[p + "wq"]
        k = nx.l2_normalize(h @ params[p + "wk"])
        v = h @ params[p + "wv"]
        pend_k = pend_v = None
        if init_matrices is not None:
            w0 = init_matrices[l]
        elif init_state is not None:
            w0 = Array._wrap(init_state.matrices[l].astype(dt))
            if init_state.pending_keys:
                pend_k = init_state.pending_keys[l].astype(dt)
                pend_v = init_state.pending_values[l].astype(dt)
        else:
            w0 = Array._wrap(np.zeros((cfg.d_fast, cfg.d_fast), dtype=dt))
        y, S, (tk, tv) = fast_weight_scan(q, k, v, w0, cfg.eta, cfg.scan_chunk, pend_k, pend_v)
        states.append(S)
        finals.append(S.data[-1])
        tails_k.append(tk)
        tails_v.append(tv)
        x = x + y @ params[p + "wo"]
        h2 = nx.rms_norm(x, params[p + "norm2"])
        x = x + nx.add(nx.silu(nx.add(h2 @ params[p + "w1"], params[p + "b1"])) @ params[p + "w2"],
                       params[p + "b2"])
    hidden = nx.rms_norm(x, params["norm_f"])
    logits = hidden @ params["head"]
    final = FastWeightState(tuple(finals), pos0 + T, tuple(tails_k), tuple(tails_v))
    ls = nx._log_softmax64(logits.data[:-1])
    token_lp = ls[np.arange(T - 1), ids[1:]] if T > 1 else np.zeros(0)
    return ForwardOutput(logits, hidden, states if capture_states else None, final, token_lp, ids)


def state_at(out: ForwardOutput, t: int, config: ModelConfig) -> FastWeightState:
    """Memory after the first ``t`` tokens, read from captured per-token states."""
    if config.update_mode != "per_token_delta":
        raise ValueError("state_at needs per-token states; re-forward the prefix in chunked mode")
    if out.states is None:
        raise ValueError("forward output was produced without capture_states")
    if not 0 <= t < len(out.states[0]):
        raise IndexError(f"position {t} outside captured range [0, {len(out.states[0]) - 1}]")
    d = config.d_fast
    empty = tuple(np.zeros((0, d), dtype=s.data.dtype) for s in out.states)
    return FastWeightState(tuple(s.data[t] for s in out.states), t, empty, empty)


# ------------------------------------------------------------------ generation

@dataclass(frozen=True)
class PrefixState:
    """Memory after ``x[:t]`` plus the token ``x[t]`` that has not been read yet."""

    state: FastWeightState
    next_token: int

    @property
    def position(self) -> int:
        return self.state.position


@dataclass
class Generation:
    tokens: np.ndarray
    hidden: np.ndarray
    logprobs: np.ndarray
    state: FastWeightState


def _draw(logits: np.ndarray, temperature: float, rng) -> tuple[int, float]:
    ls = nx._log_softmax64(logits)
    if temperature <= 0.0:
        tok = int(np.argmax(ls))
    else:
        probs = np.exp(nx._log_softmax64(logits.astype(np.float64) / temperature))
        cdf = np.cumsum(probs)
        tok = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(cdf) - 1))
    return tok, float(ls[tok])


def generate(params: ModelParams, prefix: PrefixState, steps: int, temperature: float = 0.0,
             seed=None) -> Generation:
    """Continue a prefix for ``steps`` tokens.

    ``temperature == 0`` decodes greedily; otherwise tokens are sampled from
    ``softmax(logits / temperature)`` using ``seed`` (an int or a numpy
    Generator). Log-probabilities are those of the untempered policy.
    """
    cfg = params.config
    if steps < 1:
        raise ValueError("generate needs steps >= 1")
    if prefix.position + 1 + steps > cfg.max_seq_len:
        raise ValueError(f"generating {steps} tokens from position {prefix.position} exceeds "
                         f"max_seq_len {cfg.max_seq_len}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = forward_sequence(params, [prefix.next_token], init_state=prefix.state)
    tokens, hiddens, lps = [], [], []
    for _ in range(steps):
        tok, lp = _draw(out.logits.data[-1], temperature, rng)
        tokens.append(tok)
        lps.append(lp)
        out = forward_sequence(params, [tok], init_state=out.final_state)
        hiddens.append(out.hidden.data[-1])
    return Generation(np.array(tokens, dtype=np.int64), np.stack(hiddens),
                      np.array(lps), out.final_state)


def greedy_continue(params: ModelParams, prompt_ids, steps: int) -> np.ndarray:
    """Greedy continuation of a full prompt (used for answers and evaluation)."""
    ids = _as_ids(params.config, prompt_ids)
    if len(ids) > 1:
        state = forward_sequence(params, ids[:-1]).final_state
    else:
        state = FastWeightState.zeros(params.config)
    return generate(params, PrefixState(state, int(ids[-1])), steps).tokens


# ----------------------------------------------------------------- checkpoint

MAGIC = b"RFNW"
FORMAT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    """Write ``params`` in the RFNW binary format (little endian)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(dataclasses.asdict(params.config), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, arr in params.tensors.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.data.astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not an RFNW checkpoint (bad magic)")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = take("<I")
    config = ModelConfig(**json.loads(blob[off:off + n].decode()))
    off += n
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<I")
        name = blob[off:off + n].decode()
        off += n
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        size = int(np.prod(shape)) * 4
        if off + size > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        data = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off).reshape(shape)
        off += size
        tensors[name] = Array(data.astype(np.float32), name=name)
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes after checkpoint payload")
    expected = param_shapes(config)
    if {k: v.shape for k, v in tensors.items()} != expected:
        raise ValueError(f"{path}: parameter shapes do not match the stored config")
    return ModelParams(config, tensors)
