"""Homogeneous clustering encoder-decoder captioner."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .attention import ClusterMode, Dropout, LayerBlockParams, decoder_block, encoder_block
from .rng import SplitMix64, xavier_uniform
from .tensor import Tensor

BOS, EOS, PAD = 0, 1, 2

VARIANTS = {
    # name: (encoder clustering, decoder clustering)
    "base": (False, False),
    "acf1": (True, False),
    "acf2": (False, True),
    "acf": (True, True),
}


@dataclass
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    d_ff: Optional[int] = None
    m_e: int = 3
    m_d: int = 3
    grid_h: int = 8
    grid_w: int = 8
    d_in: int = 8
    vocab_size: int = 21
    max_caption_len: int = 24
    cluster_mode: str = ClusterMode.LOG_MASK.value
    use_downup: bool = False
    encoder_cluster: bool = True
    decoder_cluster: bool = True
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d
        self.cluster_mode = ClusterMode(self.cluster_mode).value
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if self.m_e < 1 or self.m_d < 1:
            raise ValueError("encoder and decoder depth must be >= 1")
        if self.vocab_size <= max(BOS, EOS, PAD):
            raise ValueError("vocabulary must include the BOS/EOS/PAD ids 0, 1, 2")
        if self.max_caption_len < 1:
            raise ValueError("max_caption_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def variant(self) -> str:
        flags = (self.encoder_cluster, self.decoder_cluster)
        return next(k for k, v in VARIANTS.items() if v == flags)

    def with_variant(self, name: str) -> "ModelConfig":
        enc, dec = VARIANTS[name]
        return dataclasses.replace(self, encoder_cluster=enc, decoder_cluster=dec)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d // 2])
    return table


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses and lists, yielding ``(dotted_name, tensor)`` pairs."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is not None:
                yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from named_parameters(value, f"{prefix}.{i}")


@dataclass
class GridProjection:
    weight: Tensor
    bias: Tensor


@dataclass
class OutputProjection:
    weight: Tensor
    bias: Tensor


@dataclass
class CaptionerModel:
    config: ModelConfig
    tok_embed: Tensor
    grid_proj: GridProjection
    encoder: list[LayerBlockParams]
    decoder: list[LayerBlockParams]
    out_proj: OutputProjection
    _params: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def init(cls, config: ModelConfig) -> "CaptionerModel":
        c = config
        rng = SplitMix64(c.seed)
        tok = Tensor(xavier_uniform(rng, c.vocab_size, c.d), requires_grad=True)
        grid = GridProjection(
            Tensor(xavier_uniform(rng, c.d_in, c.d), requires_grad=True),
            Tensor(np.zeros(c.d), requires_grad=True),
        )
        enc = [LayerBlockParams.init_encoder(rng, c.d, c.n_heads, c.d_ff) for _ in range(c.m_e)]
        dec = [LayerBlockParams.init_decoder(rng, c.d, c.n_heads, c.d_ff) for _ in range(c.m_d)]
        out = OutputProjection(
            Tensor(xavier_uniform(rng, c.d, c.vocab_size), requires_grad=True),
            Tensor(np.zeros(c.vocab_size), requires_grad=True),
        )
        return cls(c, tok, grid, enc, dec, out)

    def __post_init__(self):
        params = {}
        for name, p in named_parameters(self):
            if name.startswith("config") or name.startswith("_params"):
                continue
            if name in params:
                raise ValueError(f"duplicate parameter name {name}")
            p.name = name
            params[name] = p
        self._params = params
        c = self.config
        self._grid_pos = sinusoid_table(c.n_cells, c.d)
        self._tok_pos = sinusoid_table(c.max_caption_len, c.d)

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    @property
    def mode(self) -> ClusterMode:
        return ClusterMode(self.config.cluster_mode)

    # -- forward -----------------------------------------------------------

    def dropout(self, step: int) -> Optional[Dropout]:
        """Dropout for optimizer step ``step``, or ``None`` when disabled."""
        if self.config.dropout == 0.0:
            return None
        return Dropout(self.config.dropout, np.random.default_rng([self.config.seed, step]))

    def encode(self, featmap, drop: Optional[Dropout] = None) -> tuple[Tensor, list[Tensor]]:
        """Grid features ``[..., grid_h, grid_w, d_in]`` -> memory ``[..., n, d]`` and C~ trace."""
        c = self.config
        featmap = T.as_tensor(featmap)
        if featmap.shape[-3:] != (c.grid_h, c.grid_w, c.d_in):
            raise T.ShapeError(
                f"feature map {featmap.shape} does not match grid {c.grid_h}x{c.grid_w}x{c.d_in}"
            )
        lead = featmap.shape[:-3]
        flat = T.reshape(featmap, lead + (c.n_cells, c.d_in))
        x = T.add(T.add(T.matmul(flat, self.grid_proj.weight), self.grid_proj.bias), self._grid_pos)
        if drop is not None:
            x = drop(x)
        trace: list[Tensor] = []
        c_accum = None
        for block in self.encoder:
            x, c_accum = encoder_block(
                block, x, (c.grid_h, c.grid_w), c.n_heads, c_accum,
                mode=self.mode, use_cluster=c.encoder_cluster, downup=c.use_downup, drop=drop,
            )
            if c_accum is not None:
                trace.append(c_accum)
        return x, trace

    def decode_teacher_forced(
        self, memory: Tensor, tokens, drop: Optional[Dropout] = None
    ) -> tuple[Tensor, list[Tensor]]:
        """Token ids ``[..., t]`` (BOS first) -> logits ``[..., t, vocab]``; position i predicts i+1."""
        c = self.config
        tokens = np.asarray(tokens, dtype=np.intp)
        t = tokens.shape[-1]
        if not 1 <= t <= c.max_caption_len:
            raise ValueError(f"caption length {t} outside [1, {c.max_caption_len}]")
        if tokens.min() < 0 or tokens.max() >= c.vocab_size:
            raise IndexError(f"token id out of range [0, {c.vocab_size})")
        y = T.add(T.embedding(self.tok_embed, tokens), self._tok_pos[:t])
        if drop is not None:
            y = drop(y)
        trace: list[Tensor] = []
        c_accum = None
        for block in self.decoder:
            y, c_accum = decoder_block(
                block, y, memory, c.n_heads, c_accum,
                mode=self.mode, use_cluster=c.decoder_cluster, drop=drop,
            )
            if c_accum is not None:
                trace.append(c_accum)
        logits = T.add(T.matmul(y, self.out_proj.weight), self.out_proj.bias)
        return logits, trace

    def forward(self, featmap, tokens, drop: Optional[Dropout] = None) -> Tensor:
        memory, _ = self.encode(featmap, drop)
        logits, _ = self.decode_teacher_forced(memory, tokens, drop)
        return logits


def cross_entropy(logits: Tensor, targets, pad_id: int = PAD) -> Tensor:
    """Mean negative log-likelihood over non-pad targets.

    ``logits`` ``[t, V]`` with ``targets`` ``[t]`` gives the per-sequence mean.
    With a leading batch axis the per-sequence means are averaged.
    """
    logits = T.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.shape[:-1] != targets.shape:
        raise T.ShapeError(f"logits {logits.shape} and targets {targets.shape} disagree")
    single = targets.ndim == 1
    if single:
        targets = targets[None]
        logits = T.reshape(logits, (1,) + logits.shape)
    keep = targets != pad_id
    counts = keep.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("cross_entropy over an all-pad target sequence")
    b, t = targets.shape
    logp = T.log_softmax(logits)
    picked = logp[np.arange(b)[:, None], np.arange(t)[None, :], np.where(keep, targets, 0)]
    weights = keep / counts[:, None] / b
    return T.neg(T.sum_(T.mul(picked, weights)))


# -- generation ---------------------------------------------------------------

def _step_logprobs(model: CaptionerModel, memory: Tensor, prefixes: np.ndarray) -> np.ndarray:
    logits, _ = model.decode_teacher_forced(memory, prefixes)
    last = logits.data[..., -1, :]
    z = last - last.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode(model: CaptionerModel, featmaps) -> list[list[int]]:
    """Greedy captions for a batch ``[B, h, w, d_in]``; C is recomputed over each prefix."""
    featmaps = np.asarray(T.as_tensor(featmaps).data)
    b = featmaps.shape[0]
    memory, _ = model.encode(featmaps)
    prefixes = np.full((b, 1), BOS, dtype=np.intp)
    done = np.zeros(b, dtype=bool)
    out: list[list[int]] = [[] for _ in range(b)]
    for _ in range(model.config.max_caption_len):
        nxt = np.argmax(_step_logprobs(model, memory, prefixes), axis=-1)
        for i in range(b):
            if done[i]:
                continue
            if nxt[i] == EOS:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        if done.all() or prefixes.shape[1] == model.config.max_caption_len:
            break
        prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
    return out


def beam_decode(model: CaptionerModel, featmap, k: int) -> list[int]:
    """Beam search with width ``k`` ranking by length-normalised log-probability."""
    if k < 1:
        raise ValueError("beam width must be >= 1")
    featmap = np.asarray(T.as_tensor(featmap).data)
    memory, _ = model.encode(featmap[None])
    cap = model.config.max_caption_len
    alive: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(cap):
        prefixes = np.array([[BOS] + toks for toks, _ in alive], dtype=np.intp)
        mem = T.Tensor(np.broadcast_to(memory.data, (len(alive),) + memory.shape[1:]))
        logp = _step_logprobs(model, mem, prefixes)
        total = np.array([s for _, s in alive])[:, None] + logp
        order = np.argsort(-total.ravel(), kind="stable")[:k]
        vocab = logp.shape[-1]
        new_alive = []
        for flat in order:
            h, tok = divmod(int(flat), vocab)
            toks, score = alive[h][0], float(total.ravel()[flat])
            if tok == EOS:
                finished.append((toks, score / (len(toks) + 1)))
            else:
                new_alive.append((toks + [tok], score))
        alive = new_alive
        if not alive:
            break
    finished.extend((toks, score / len(toks)) for toks, score in alive)
    best = max(range(len(finished)), key=lambda i: (finished[i][1], -i))
    return finished[best][0]


def generate(model: CaptionerModel, featmap, strategy: str = "greedy", beam: int = 1) -> list[int]:
    """Caption token ids (no BOS/EOS) for one feature map."""
    if strategy == "greedy":
        return greedy_decode(model, np.asarray(T.as_tensor(featmap).data)[None])[0]
    if strategy == "beam":
        return beam_decode(model, featmap, beam)
    raise ValueError(f"unknown decoding strategy {strategy!r}")
