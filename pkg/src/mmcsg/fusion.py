"""Contextualized M-modality fusion adapter.

Takes the encoder's text states ``H`` (l x d) and one session-level vector per
modality (audio, visual, personal), and returns the fused states ``H_hat``::

    Q, K, V      = H W_Q, H W_K, H W_V
    lam_k        = sigmoid(K W_k1 + (M U_k) W_k2)          # l x 1, per modality
    K_hat        = (1 - lam_k) * K + lam_k * (M U_k)       # M broadcast over rows
    H_m          = softmax(Q K_hat^T / sqrt(d)) V_hat
    g_m          = [H ; H_m] G_m + b_m                     # affine, optional sigmoid
    H_hat        = H + g_p * H_p + g_a * H_a + g_v * H_v

The gate weights are named ``G`` here rather than reusing ``W_v``, which the
value projection already claims.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

MODALITIES = ("audio", "visual", "personal")
GATE_ACTIVATIONS = ("none", "sigmoid")


def param_shapes(d: int, modality_dims: Mapping[str, int]) -> dict[str, tuple[int, ...]]:
    """Registry of fusion parameter names and shapes, in a fixed order."""
    shapes: dict[str, tuple[int, ...]] = {
        "fusion.W_Q": (d, d),
        "fusion.W_K": (d, d),
        "fusion.W_V": (d, d),
    }
    for m in MODALITIES:
        dm = modality_dims[m]
        shapes[f"fusion.{m}.U_k"] = (dm, d)
        shapes[f"fusion.{m}.U_v"] = (dm, d)
        shapes[f"fusion.{m}.W_k1"] = (d, 1)
        shapes[f"fusion.{m}.W_k2"] = (d, 1)
        shapes[f"fusion.{m}.W_v1"] = (d, 1)
        shapes[f"fusion.{m}.W_v2"] = (d, 1)
        shapes[f"fusion.{m}.G"] = (2 * d, d)
        shapes[f"fusion.{m}.b"] = (1, d)
    return shapes


def init_params(d: int, modality_dims: Mapping[str, int],
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(d, modality_dims).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


@dataclass
class FusionTrace:
    Q: Tensor | None = None
    K: Tensor | None = None
    V: Tensor | None = None
    lambda_k: dict[str, Tensor] = field(default_factory=dict)
    lambda_v: dict[str, Tensor] = field(default_factory=dict)
    K_hat: dict[str, Tensor] = field(default_factory=dict)
    V_hat: dict[str, Tensor] = field(default_factory=dict)
    H_m: dict[str, Tensor] = field(default_factory=dict)
    gates: dict[str, Tensor] = field(default_factory=dict)
    H_hat: Tensor | None = None


def project_qkv(H: Tensor, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    return (T.matmul(H, params["fusion.W_Q"]),
            T.matmul(H, params["fusion.W_K"]),
            T.matmul(H, params["fusion.W_V"]))


def _modality_rows(M_row: Tensor, U: Tensor) -> Tensor:
    if M_row.data.ndim != 2 or M_row.shape[0] != 1 or M_row.shape[1] != U.shape[0]:
        raise DimensionError(
            f"modality vector {M_row.shape} does not match projection {U.shape}")
    return T.matmul(M_row, U)


def gate_lambdas(K: Tensor, V: Tensor, M_row: Tensor, params: Mapping[str, Tensor],
                 modality: str) -> tuple[Tensor, Tensor]:
    """Per-position mixing weights (l x 1) for keys and values."""
    p = f"fusion.{modality}."
    l = K.shape[0]
    MU_k = _modality_rows(M_row, params[p + "U_k"])
    MU_v = _modality_rows(M_row, params[p + "U_v"])
    lam_k = T.sigmoid(T.add(T.matmul(K, params[p + "W_k1"]),
                            T.broadcast_row(T.matmul(MU_k, params[p + "W_k2"]), l)))
    lam_v = T.sigmoid(T.add(T.matmul(V, params[p + "W_v1"]),
                            T.broadcast_row(T.matmul(MU_v, params[p + "W_v2"]), l)))
    return lam_k, lam_v


def _interpolate(X: Tensor, MU: Tensor, lam: Tensor) -> Tensor:
    l, d = X.shape
    if lam.shape != (l, 1):
        raise DimensionError(f"lambda shape {lam.shape}, expected {(l, 1)}")
    lam_d = T.broadcast_col(lam, d)
    keep = T.sub(T.constant(np.ones((l, d))), lam_d)
    return T.add(T.mul(keep, X), T.mul(lam_d, T.broadcast_row(MU, l)))


def contextual_kv(K: Tensor, V: Tensor, M_row: Tensor, lam_k: Tensor, lam_v: Tensor,
                  params: Mapping[str, Tensor], modality: str) -> tuple[Tensor, Tensor]:
    p = f"fusion.{modality}."
    K_hat = _interpolate(K, _modality_rows(M_row, params[p + "U_k"]), lam_k)
    V_hat = _interpolate(V, _modality_rows(M_row, params[p + "U_v"]), lam_v)
    return K_hat, V_hat


def modality_attention(Q: Tensor, K_hat: Tensor, V_hat: Tensor) -> Tensor:
    """Single-head scaled dot-product attention with d_k = d."""
    d = Q.shape[-1]
    scores = T.scale(T.matmul(Q, T.transpose(K_hat)), 1.0 / math.sqrt(d))
    return T.matmul(T.softmax_rows(scores), V_hat)


def compound_gates(H: Tensor, H_a: Tensor, H_v: Tensor, H_p: Tensor,
                   params: Mapping[str, Tensor],
                   gate_activation: str = "none") -> tuple[Tensor, Tensor, Tensor]:
    """Returns (g_a, g_v, g_p)."""
    return tuple(_gate(H, Hm, params, m, gate_activation)
                 for Hm, m in ((H_a, "audio"), (H_v, "visual"), (H_p, "personal")))


def _gate(H: Tensor, H_m: Tensor, params: Mapping[str, Tensor], modality: str,
          gate_activation: str) -> Tensor:
    p = f"fusion.{modality}."
    g = T.add_row(T.matmul(T.concat_last_axis(H, H_m), params[p + "G"]), params[p + "b"])
    if gate_activation == "sigmoid":
        g = T.sigmoid(g)
    elif gate_activation != "none":
        raise ValueError(f"unknown gate activation {gate_activation!r}")
    return g


def fuse(H: Tensor, H_a: Tensor, H_v: Tensor, H_p: Tensor,
         g_a: Tensor, g_v: Tensor, g_p: Tensor) -> Tensor:
    out = T.add(H, T.mul(g_p, H_p))
    out = T.add(out, T.mul(g_a, H_a))
    return T.add(out, T.mul(g_v, H_v))


def fusion_forward(H: Tensor, modality_vectors: Mapping[str, Tensor | None],
                   params: Mapping[str, Tensor],
                   enabled: tuple[str, ...] | frozenset = MODALITIES,
                   gate_activation: str = "none",
                   force_lambda: float | None = None,
                   force_gates: float | None = None) -> tuple[Tensor, FusionTrace]:
    """Run the whole adapter and keep every intermediate.

    A disabled modality (or one whose vector is ``None``) contributes zero
    attention output and a zero gate, so ablations share this code path.
    ``force_lambda`` / ``force_gates`` pin those quantities to a constant and
    exist for identity checks.
    """
    l, d = H.shape
    trace = FusionTrace()
    Q, K, V = project_qkv(H, params)
    trace.Q, trace.K, trace.V = Q, K, V
    zeros = T.constant(np.zeros((l, d)))

    attended: dict[str, Tensor] = {}
    for m in MODALITIES:
        M_row = modality_vectors.get(m)
        if m not in enabled or M_row is None:
            attended[m] = zeros
            continue
        try:
            if force_lambda is None:
                lam_k, lam_v = gate_lambdas(K, V, M_row, params, m)
            else:
                lam_k = lam_v = T.constant(np.full((l, 1), float(force_lambda)))
            K_hat, V_hat = contextual_kv(K, V, M_row, lam_k, lam_v, params, m)
            H_m = modality_attention(Q, K_hat, V_hat)
        except DimensionError as exc:
            raise DimensionError(f"{m}: {exc}") from exc
        trace.lambda_k[m], trace.lambda_v[m] = lam_k, lam_v
        trace.K_hat[m], trace.V_hat[m] = K_hat, V_hat
        attended[m] = H_m
    trace.H_m = dict(attended)

    gates = {}
    for m in MODALITIES:
        if attended[m] is zeros:
            gates[m] = zeros
        elif force_gates is not None:
            gates[m] = T.constant(np.full((l, d), float(force_gates)))
        else:
            gates[m] = _gate(H, attended[m], params, m, gate_activation)
    trace.gates = gates

    H_hat = fuse(H, attended["audio"], attended["visual"], attended["personal"],
                 gates["audio"], gates["visual"], gates["personal"])
    trace.H_hat = H_hat
    return H_hat, trace
