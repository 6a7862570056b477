"""Transformer encoder-decoder with the fusion adapter and two heads.

Layout: pre-LN encoder blocks -> final LN gives ``H`` -> fusion adapter gives
``H_hat`` -> (a) masked mean pool + linear intent head, (b) pre-LN decoder with
causal self-attention and cross-attention over ``H_hat`` -> LM head.

Parameters are plain numpy arrays in an ordered ``dict``; forward functions
take a mapping of name -> :class:`~mmcsg.tensor.Tensor` so the same code runs
with or without a tape.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import fusion
from . import tensor as T
from .tensor import Tape, Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
NEG_INF = -1e9


class InputError(ValueError):
    """Bad token ids, labels or lengths."""


class NumericError(ArithmeticError):
    """A forward pass produced NaN or Inf."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 0  # 0 means 4 * d_model
    max_src_len: int = 480
    max_tgt_len: int = 50
    n_intents: int = 7
    d_audio: int = 16
    d_visual: int = 16
    d_personal: int = 8
    gate_activation: str = "none"
    loss_alpha1: float = 0.2
    loss_alpha2: float = 0.8
    modalities: tuple[str, ...] = fusion.MODALITIES
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.modalities) - set(fusion.MODALITIES)
        if unknown:
            raise ValueError(f"unknown modality name(s): {sorted(unknown)}")
        self.modalities = tuple(m for m in fusion.MODALITIES if m in self.modalities)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if abs(self.loss_alpha1 + self.loss_alpha2 - 1.0) > 1e-12:
            raise ValueError("loss_alpha1 + loss_alpha2 must equal 1")
        if min(self.loss_alpha1, self.loss_alpha2) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gate_activation not in fusion.GATE_ACTIVATIONS:
            raise ValueError(f"gate_activation must be one of {fusion.GATE_ACTIVATIONS}")
        if self.vocab_size <= EOS or self.n_intents < 1:
            raise ValueError("vocab_size and n_intents must be positive")

    @property
    def ffn_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def modality_dims(self) -> dict[str, int]:
        return {"audio": self.d_audio, "visual": self.d_visual, "personal": self.d_personal}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["modalities"] = tuple(d.get("modalities", fusion.MODALITIES))
        return cls(**d)


# ------------------------------------------------------------------ registry

def _block_shapes(prefix: str, d: int, ff: int, attn: Sequence[str]) -> dict:
    shapes = {}
    for i, name in enumerate(attn, start=1):
        shapes[f"{prefix}.ln{i}.g"] = (1, d)
        shapes[f"{prefix}.ln{i}.b"] = (1, d)
        for w in ("W_q", "W_k", "W_v", "W_o"):
            shapes[f"{prefix}.{name}.{w}"] = (d, d)
    n = len(attn) + 1
    shapes[f"{prefix}.ln{n}.g"] = (1, d)
    shapes[f"{prefix}.ln{n}.b"] = (1, d)
    shapes[f"{prefix}.ffn.W1"] = (d, ff)
    shapes[f"{prefix}.ffn.b1"] = (1, ff)
    shapes[f"{prefix}.ffn.W2"] = (ff, d)
    shapes[f"{prefix}.ffn.b2"] = (1, d)
    return shapes


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in checkpoint order."""
    d, ff = config.d_model, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {"embed.tokens": (config.vocab_size, d)}
    for i in range(config.n_encoder_layers):
        shapes.update(_block_shapes(f"enc.{i}", d, ff, ["self_attn"]))
    shapes["enc.ln.g"] = (1, d)
    shapes["enc.ln.b"] = (1, d)
    shapes.update(fusion.param_shapes(d, config.modality_dims))
    for i in range(config.n_decoder_layers):
        shapes.update(_block_shapes(f"dec.{i}", d, ff, ["self_attn", "cross_attn"]))
    shapes["dec.ln.g"] = (1, d)
    shapes["dec.ln.b"] = (1, d)
    shapes["intent.W"] = (d, config.n_intents)
    shapes["intent.b"] = (1, config.n_intents)
    shapes["lm.W"] = (d, config.vocab_size)
    shapes["lm.b"] = (1, config.vocab_size)
    return shapes


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    fusion_params = fusion.init_params(config.d_model, config.modality_dims, rng)
    for name, shape in param_shapes(config).items():
        if name.startswith("fusion."):
            params[name] = fusion_params[name]
        elif name == "embed.tokens":
            params[name] = rng.normal(0.0, 1.0, size=shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2")):
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def positional_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: d // 2])
    return table


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _positions(n: int, d: int) -> np.ndarray:
    key = (n, d)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = positional_table(n, d)
    return _PE_CACHE[key]


# ----------------------------------------------------------------- sublayers

def _embed(ids: Sequence[int], P: Mapping[str, Tensor], d: int) -> Tensor:
    x = T.embedding(P["embed.tokens"], ids)
    return T.add(x, T.constant(_positions(len(ids), d)))


def _ln(x: Tensor, P: Mapping[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, P[prefix + ".g"], P[prefix + ".b"])


def multi_head_attention(xq: Tensor, xkv: Tensor, P: Mapping[str, Tensor], prefix: str,
                         n_heads: int, mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    """Returns the projected output and the (h x lq x lk) attention weights."""
    dh = xq.shape[1] // n_heads
    q = T.split_heads(T.matmul(xq, P[prefix + ".W_q"]), n_heads)
    k = T.split_heads(T.matmul(xkv, P[prefix + ".W_k"]), n_heads)
    v = T.split_heads(T.matmul(xkv, P[prefix + ".W_v"]), n_heads)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    weights = T.softmax_rows(scores, mask)
    out = T.merge_heads(T.matmul(weights, v))
    return T.matmul(out, P[prefix + ".W_o"]), weights


def _ffn(x: Tensor, P: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = T.relu(T.add_row(T.matmul(x, P[prefix + ".W1"]), P[prefix + ".b1"]))
    return T.add_row(T.matmul(h, P[prefix + ".W2"]), P[prefix + ".b2"])


def _key_mask(pad: np.ndarray, lq: int) -> np.ndarray | None:
    if not pad.any():
        return None
    return np.broadcast_to(np.where(pad, NEG_INF, 0.0), (lq, pad.size))


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF), k=1)


# -------------------------------------------------------------------- encoder

@dataclass
class EncoderTrace:
    pad_mask: np.ndarray
    truncated: bool = False
    fusion: fusion.FusionTrace | None = None


def modality_tensors(vectors: Mapping[str, np.ndarray | None]) -> dict[str, Tensor | None]:
    out = {}
    for m in fusion.MODALITIES:
        v = vectors.get(m)
        out[m] = None if v is None else T.constant(np.asarray(v, dtype=np.float64).reshape(1, -1))
    return out


def encoder_forward(src_ids: Sequence[int], modality_vectors: Mapping[str, np.ndarray | None],
                    P: Mapping[str, Tensor], config: ModelConfig, *,
                    use_fusion: bool = True,
                    force_lambda: float | None = None,
                    force_gates: float | None = None) -> tuple[Tensor, Tensor, EncoderTrace]:
    """Encode one source sequence; returns ``(H, H_hat, trace)``.

    ``use_fusion=False`` is the plain text-only transformer (``H_hat is H``).
    """
    ids = list(src_ids)
    truncated = len(ids) > config.max_src_len
    if truncated:
        ids = ids[: config.max_src_len]
    if any(i < 0 or i >= config.vocab_size for i in ids):
        raise InputError(f"source id out of range [0, {config.vocab_size})")
    pad = np.asarray(ids) == PAD
    if pad.all():
        raise InputError("empty source")
    d = config.d_model
    mask = _key_mask(pad, len(ids))
    x = _embed(ids, P, d)
    for i in range(config.n_encoder_layers):
        p = f"enc.{i}"
        h = _ln(x, P, p + ".ln1")
        a, _ = multi_head_attention(h, h, P, p + ".self_attn", config.n_heads, mask)
        x = T.add(x, a)
        x = T.add(x, _ffn(_ln(x, P, p + ".ln2"), P, p + ".ffn"))
    H = _ln(x, P, "enc.ln")
    trace = EncoderTrace(pad_mask=pad, truncated=truncated)
    if not use_fusion:
        return H, H, trace
    H_hat, trace.fusion = fusion.fusion_forward(
        H, modality_tensors(modality_vectors), P, enabled=config.modalities,
        gate_activation=config.gate_activation, force_lambda=force_lambda,
        force_gates=force_gates)
    return H, H_hat, trace


def intent_logits(H_hat: Tensor, src_pad_mask: np.ndarray, P: Mapping[str, Tensor]) -> Tensor:
    """Masked mean over source positions, then the linear intent head."""
    keep = ~np.asarray(src_pad_mask, dtype=bool)
    pool = T.constant((keep / keep.sum())[None, :])
    pooled = T.matmul(pool, H_hat)
    return T.add(T.matmul(pooled, P["intent.W"]), P["intent.b"])


# -------------------------------------------------------------------- decoder

def decoder_forward(tgt_ids: Sequence[int], H_hat: Tensor, src_pad_mask: np.ndarray,
                    P: Mapping[str, Tensor], config: ModelConfig,
                    return_attention: bool = False):
    """Next-token logits (t x vocab) for a decoder input starting with BOS.

    With ``return_attention`` also returns the per-layer cross-attention
    weights (h x t x l).
    """
    ids = list(tgt_ids)
    t = len(ids)
    if t == 0 or t > config.max_tgt_len:
        raise InputError(f"target length {t} outside [1, {config.max_tgt_len}]")
    if any(i < 0 or i >= config.vocab_size for i in ids):
        raise InputError(f"target id out of range [0, {config.vocab_size})")
    self_mask = _causal_mask(t)
    tgt_pad = np.asarray(ids) == PAD
    if tgt_pad.any():
        self_mask = self_mask + np.where(tgt_pad, NEG_INF, 0.0)[None, :]
        # a query must always see itself, or a pad row becomes all -inf
        np.fill_diagonal(self_mask, 0.0)
    cross_mask = _key_mask(np.asarray(src_pad_mask, dtype=bool), t)
    x = _embed(ids, P, config.d_model)
    cross = []
    for i in range(config.n_decoder_layers):
        p = f"dec.{i}"
        h = _ln(x, P, p + ".ln1")
        a, _ = multi_head_attention(h, h, P, p + ".self_attn", config.n_heads, self_mask)
        x = T.add(x, a)
        h = _ln(x, P, p + ".ln2")
        a, w = multi_head_attention(h, H_hat, P, p + ".cross_attn", config.n_heads, cross_mask)
        cross.append(w)
        x = T.add(x, a)
        x = T.add(x, _ffn(_ln(x, P, p + ".ln3"), P, p + ".ffn"))
    x = _ln(x, P, "dec.ln")
    logits = T.add_row(T.matmul(x, P["lm.W"]), P["lm.b"])
    if return_attention:
        return logits, cross
    return logits


# ----------------------------------------------------------------------- loss

def joint_loss(intent_logits_: Tensor, intent_label: int, lm_logits: Tensor,
               tgt_ids: Sequence[int], config: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """``(L, CL, GL)`` with ``L = alpha1 * CL + alpha2 * GL``.

    ``tgt_ids`` is the full target (BOS ... EOS); ``lm_logits`` are the
    decoder outputs for ``tgt_ids[:-1]`` and are scored against
    ``tgt_ids[1:]``, skipping PAD targets.
    """
    n_int = intent_logits_.shape[-1]
    if not 0 <= intent_label < n_int:
        raise InputError(f"intent label {intent_label} outside [0, {n_int})")
    labels = np.asarray(tgt_ids[1:], dtype=np.int64)
    if lm_logits.shape[0] != labels.size:
        raise InputError(f"{lm_logits.shape[0]} logit rows for {labels.size} shifted targets")
    CL = T.cross_entropy(intent_logits_, [intent_label])
    GL = T.cross_entropy(lm_logits, labels, (labels != PAD).astype(np.float64))
    L = T.add(T.scale(CL, config.loss_alpha1), T.scale(GL, config.loss_alpha2))
    return L, CL, GL


# ------------------------------------------------------------- whole example

def bundle_vectors(bundle) -> dict[str, np.ndarray]:
    return {"audio": bundle.audio_vec, "visual": bundle.video_vec,
            "personal": bundle.personal_vec}


def bundle_target(bundle, target: str = "mcs") -> list[int]:
    ids = bundle.tgt_ids if target == "mcs" else bundle.doctor_tgt_ids
    if ids is None:
        raise InputError(f"session {bundle.session_id} has no {target} target")
    return list(ids)


@dataclass
class StepResult:
    L: float
    CL: float
    GL: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def forward_loss(bundle, P: Mapping[str, Tensor], config: ModelConfig,
                 target: str = "mcs") -> tuple[Tensor, Tensor, Tensor]:
    tgt = bundle_target(bundle, target)
    tgt = tgt[: config.max_tgt_len + 1]
    _, H_hat, trace = encoder_forward(bundle.src_ids, bundle_vectors(bundle), P, config)
    il = intent_logits(H_hat, trace.pad_mask, P)
    lm = decoder_forward(tgt[:-1], H_hat, trace.pad_mask, P, config)
    return joint_loss(il, bundle.intent, lm, tgt, config)


def model_forward_backward(bundle, params: Mapping[str, np.ndarray], config: ModelConfig,
                           target: str = "mcs") -> StepResult:
    """Loss values and a gradient for every registered parameter."""
    names = list(params)
    P = as_tensors(params, requires_grad=True)
    with Tape() as tape:
        L, CL, GL = forward_loss(bundle, P, config, target)
    if not np.isfinite(L.data):
        raise NumericError(_nonfinite_report(params, tape))
    grads = tape.gradient(L, [P[n] for n in names])
    return StepResult(float(L.data), float(CL.data), float(GL.data), dict(zip(names, grads)))


def _nonfinite_report(params: Mapping[str, np.ndarray], tape: Tape) -> str:
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            return f"non-finite loss: parameter {name!r} contains NaN/Inf"
    node = tape.first_nonfinite()
    if node is not None:
        idx = tape.nodes.index(node)
        return f"non-finite loss: first NaN/Inf produced by op {node.op!r} (tape node {idx})"
    return "non-finite loss"


# ------------------------------------------------------------------- decoding

def greedy_decode(src_ids: Sequence[int], modality_vectors: Mapping[str, np.ndarray | None],
                  params: Mapping[str, np.ndarray] | Mapping[str, Tensor], config: ModelConfig,
                  max_len: int = 50) -> list[int]:
    """Argmax decoding until EOS or ``max_len`` tokens; BOS/EOS are stripped.

    ``np.argmax`` returns the first maximum, so ties go to the lowest id.
    """
    P = _tensor_view(params)
    max_len = min(max_len, config.max_tgt_len)
    _, H_hat, trace = encoder_forward(src_ids, modality_vectors, P, config)
    out = [BOS]
    while len(out) - 1 < max_len:
        logits = decoder_forward(out, H_hat, trace.pad_mask, P, config)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == EOS:
            break
        out.append(nxt)
    return out[1:]


def predict_intent(src_ids: Sequence[int], modality_vectors: Mapping[str, np.ndarray | None],
                   params, config: ModelConfig) -> int:
    P = _tensor_view(params)
    _, H_hat, trace = encoder_forward(src_ids, modality_vectors, P, config)
    return int(np.argmax(intent_logits(H_hat, trace.pad_mask, P).data))


def _tensor_view(params) -> Mapping[str, Tensor]:
    first = next(iter(params.values()))
    return params if isinstance(first, Tensor) else as_tensors(params)
