"""Adam, the training loop and the finite-difference gradient check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Lcg64
from .evaluation import decode_sessions, intent_accuracy, mean_token_f1
from .model import (BOS, EOS, ModelConfig, as_tensors, bundle_target,
                    forward_loss, init_params, model_forward_backward)


class ConsistencyError(KeyError):
    """Gradients and parameters disagree on names."""


@dataclass
class TrainConfig:
    learning_rate: float = 3e-5
    batch_size: int = 16
    epochs: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    seed: int = 0
    target: str = "mcs"
    validate: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive, epochs >= 0")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.target not in ("mcs", "doctor"):
            raise ValueError("target must be 'mcs' or 'doctor'")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> tuple[dict, AdamState]:
    missing = [k for k in params if k not in grads]
    if missing:
        raise ConsistencyError(f"no gradient for parameter(s): {', '.join(missing)}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.t += 1
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, g in grads.items():
        if name not in params:
            raise ConsistencyError(f"gradient for unknown parameter {name!r}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        params[name] = params[name] - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return params, state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: Mapping[str, np.ndarray],
                        max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def batch_gradients(batch: Sequence, params: Mapping[str, np.ndarray], config: ModelConfig,
                    target: str = "mcs") -> tuple[float, float, float, dict[str, np.ndarray]]:
    """Mean losses and mean gradient over a batch, summed in batch order."""
    total = None
    L = CL = GL = 0.0
    for bundle in batch:
        res = model_forward_backward(bundle, params, config, target)
        L, CL, GL = L + res.L, CL + res.CL, GL + res.GL
        if total is None:
            total = res.grads
        else:
            for k, g in res.grads.items():
                total[k] = total[k] + g
    n = len(batch)
    return L / n, CL / n, GL / n, {k: g / n for k, g in total.items()}


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    order = Lcg64(seed * 1_000_003 + epoch).shuffle(list(range(n)))
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(config: ModelConfig, params: dict[str, np.ndarray], train_set: Sequence,
          val_set: Sequence, tc: TrainConfig,
          on_record: Callable[[dict], None] | None = None) -> tuple[dict, list[dict]]:
    """Run ``tc.epochs`` epochs of Adam on ``train_set``.

    Returns the final parameters and the log: one record per step
    (``epoch, step, L, CL, GL``) followed, per epoch, by a record with the
    epoch means and validation intent accuracy / token F1.
    """
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    state = AdamState()
    log: list[dict] = []

    def emit(rec: dict) -> None:
        log.append(rec)
        if on_record is not None:
            on_record(rec)

    step = 0
    for epoch in range(1, tc.epochs + 1):
        sums = np.zeros(3)
        batches = epoch_batches(len(train_set), tc.batch_size, tc.seed, epoch)
        for idx in batches:
            L, CL, GL, grads = batch_gradients([train_set[i] for i in idx], params, config,
                                               tc.target)
            grads, _ = clip_by_global_norm(grads, tc.grad_clip_norm)
            params, state = adam_step(params, grads, state, tc)
            step += 1
            sums += (L, CL, GL)
            emit({"epoch": epoch, "step": step, "L": L, "CL": CL, "GL": GL})
        means = sums / max(len(batches), 1)
        rec = {"epoch": epoch, "mean_L": float(means[0]), "mean_CL": float(means[1]),
               "mean_GL": float(means[2])}
        if tc.validate and len(val_set):
            preds = decode_sessions(val_set, params, config)
            refs = [bundle_target(b, tc.target) for b in val_set]
            rec["val_intent_acc"] = intent_accuracy(val_set, params, config)
            rec["val_token_f1"] = mean_token_f1(preds, refs)
        emit(rec)
    return params, log


# ------------------------------------------------------------- gradient check

def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, index,
                       step: float = 1e-6) -> float:
    """d fn / d x[index] by central differences; ``x`` is restored afterwards."""
    orig = x[index]
    x[index] = orig + step
    up = fn(x)
    x[index] = orig - step
    down = fn(x)
    x[index] = orig
    return (up - down) / (2.0 * step)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float]
    checked: dict[str, int]

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_rel_error.items():
            status = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{status:4s} {name:32s} max_rel_err={err:.3e} n={self.checked[name]}")
        return out


def tiny_config(**overrides) -> ModelConfig:
    """d=8, one encoder and one decoder layer, vocab 20, all modalities."""
    base = dict(vocab_size=20, d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=1,
                d_ff=16, max_src_len=16, max_tgt_len=8, n_intents=7, d_audio=3, d_visual=5,
                d_personal=8)
    base.update(overrides)
    return ModelConfig(**base)


def probe_bundle(config: ModelConfig, seed: int = 0, src_len: int = 6, tgt_len: int = 5):
    """A random session sized for ``config``."""
    from .features import ModalityBundle

    rng = np.random.default_rng(seed)
    b = ModalityBundle(
        session_id="probe", transcript="", audio_vec=rng.uniform(-2, 2, config.d_audio),
        video_vec=rng.uniform(-2, 2, config.d_visual), gender="female",
        age_group=int(rng.integers(6)), intent=int(rng.integers(config.n_intents)), mcs="")
    b.src_ids = [BOS, *rng.integers(4, config.vocab_size, src_len - 2).tolist(), EOS]
    b.tgt_ids = [BOS, *rng.integers(4, config.vocab_size, tgt_len - 2).tolist(), EOS]
    return b


def grad_check(config: ModelConfig, tolerance: float = 1e-4, trials: int = 20,
               seed: int = 0, step: float = 1e-6, bundle=None,
               params: dict[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare backprop against central differences for every parameter.

    ``trials`` coordinates are sampled per parameter tensor (all of them when
    the tensor is smaller).  Failures are reported, never raised.
    """
    bundle = bundle if bundle is not None else probe_bundle(config, seed)
    params = params if params is not None else init_params(config)
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    analytic = model_forward_backward(bundle, params, config).grads
    rng = np.random.default_rng(seed)
    errors, checked = {}, {}
    for name, value in params.items():
        def loss_at(_x, name=name):
            return float(forward_loss(bundle, as_tensors(params), config)[0].data)

        size = value.size
        picks = range(size) if size <= trials else rng.choice(size, trials, replace=False)
        worst = 0.0
        for flat in picks:
            idx = np.unravel_index(int(flat), value.shape)
            num = central_difference(loss_at, params[name], idx, step)
            worst = max(worst, relative_error(float(analytic[name][idx]), num))
        errors[name] = worst
        checked[name] = len(picks)
    return GradCheckReport(tolerance, errors, checked)
