"""Analytic reverse-mode gradients for every trainable adapter parameter.

``backward`` runs the exact chain rule through the frozen host stack and
whichever adapter family is attached: gate gradients pass through the full
softmax Jacobian diag(g) - g g^T, the communication matrix receives
gradient through the router path only (experts consume the uncommunicated
representations), and shared B matrices accumulate the sum of all aliasing
layers' contributions under a single handle.

``finite_difference_oracle`` recomputes the same gradients scalar by
scalar with central differences and is kept deliberately independent of
the analytic path; ``gradcheck`` compares the two.  ``adamw_step`` is the
standard decoupled-weight-decay update used by the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .adapters import (
    AdapterConfig,
    AdapterStack,
    LoRAAdapter,
    MoELoRALayer,
    TalkLoRALayer,
    batch_forward,
)
from .linalg import softmax_rows, spectral_norm

LOSS_KINDS = ("mean-squared-error", "softmax-cross-entropy")


@dataclass(frozen=True)
class LossSpec:
    """Loss on the model output; always mean-reduced over the batch."""

    kind: str = "mean-squared-error"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected {LOSS_KINDS}")


class NonFiniteLossError(ValueError):
    """Loss became NaN/Inf; carries the index of the offending sample."""

    def __init__(self, sample_index: int):
        self.sample_index = sample_index
        super().__init__(f"non-finite loss at sample index {sample_index}")


def _per_sample_losses(z: np.ndarray, targets: np.ndarray, spec: LossSpec) -> np.ndarray:
    # overflow to inf is fine here: non-finite losses are detected and
    # reported with the offending sample index
    with np.errstate(over="ignore", invalid="ignore"):
        if spec.kind == "mean-squared-error":
            return np.mean((z - targets) ** 2, axis=1)
        probs = softmax_rows(z)
        idx = np.arange(z.shape[0])
        return -np.log(probs[idx, targets.astype(int)])


def loss_value(z: np.ndarray, targets: np.ndarray, spec: LossSpec) -> float:
    per_sample = _per_sample_losses(z, targets, spec)
    if not np.isfinite(per_sample).all():
        raise NonFiniteLossError(int(np.argmax(~np.isfinite(per_sample))))
    return float(per_sample.mean())


def loss_and_grad(
    z: np.ndarray, targets: np.ndarray, spec: LossSpec
) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient with respect to the model output."""
    value = loss_value(z, targets, spec)
    batch = z.shape[0]
    if spec.kind == "mean-squared-error":
        grad = 2.0 * (z - targets) / (batch * z.shape[1])
    else:
        probs = softmax_rows(z)
        onehot = np.zeros_like(probs)
        onehot[np.arange(batch), targets.astype(int)] = 1.0
        grad = (probs - onehot) / batch
    return value, grad


def model_forward(
    frozen_layers: list,
    stack: AdapterStack,
    x: np.ndarray,
    dropout_scales: Optional[list] = None,
) -> tuple[np.ndarray, list]:
    """Adapted forward through the frozen stack; tanh between layers.

    ``dropout_scales`` optionally holds one (batch, d_layer) array of
    mask/(1-p) factors per layer applied to the adapter-path input only;
    the frozen path always sees the clean activations.
    """
    if len(frozen_layers) != len(stack.adapters):
        raise ValueError(
            f"frozen stack has {len(frozen_layers)} layers but adapter stack "
            f"has {len(stack.adapters)}"
        )
    caches = []
    h = x
    last = len(frozen_layers) - 1
    for i, fl in enumerate(frozen_layers):
        scale = dropout_scales[i] if dropout_scales is not None else None
        xa = h * scale if scale is not None else None
        cache = batch_forward(fl.w0, stack.adapters[i], h, stack.slot_cfg(i),
                              xa=xa, drop_scale=scale)
        caches.append(cache)
        h = cache.z if i == last else np.tanh(cache.z)
    return h, caches


def _softmax_backward(gates: np.ndarray, g_gates: np.ndarray) -> np.ndarray:
    """Row-wise (diag(g) - g g^T) applied to the gate gradient."""
    inner = (gates * g_gates).sum(axis=1, keepdims=True)
    return gates * (g_gates - inner)


def _lora_backward(ad: LoRAAdapter, cfg: AdapterConfig, cache, gz):
    gd = cfg.scaling * gz
    gb = gd.T @ cache.h[0]
    gh = gd @ ad.b
    ga = gh.T @ cache.xa
    gxa = gh @ ad.a
    return gxa, {"A0": ga, "B0": gb}


def _moelora_backward(ml: MoELoRALayer, cfg: AdapterConfig, cache, gz):
    n = cfg.experts
    gd = cfg.scaling * gz
    grads = {}
    g_gates = np.stack([(gd * y_i).sum(axis=1) for y_i in cache.yexp], axis=1)
    g_logits = _softmax_backward(cache.gates, g_gates)
    grads["Wg"] = g_logits.T @ cache.router_in
    gxa = g_logits @ ml.router_wg
    for i in range(n):
        gy = cache.gates[:, i : i + 1] * gd
        grads[f"B{i}"] = gy.T @ cache.h[i]
        gh = gy @ ml.b[i]
        grads[f"A{i}"] = gh.T @ cache.xa
        gxa = gxa + gh @ ml.a[i]
    return gxa, grads


def _talklora_backward(tl: TalkLoRALayer, cfg: AdapterConfig, cache, gz):
    n, r_e = cfg.experts, cfg.expert_rank
    batch = gz.shape[0]
    gd = cfg.scaling * gz
    grads = {}
    g_gates = np.stack([(gd * y_i).sum(axis=1) for y_i in cache.yexp], axis=1)
    g_logits = _softmax_backward(cache.gates, g_gates)
    grads["Wg"] = g_logits.T @ cache.router_in
    ght_flat = g_logits @ tl.router_wg  # (B, r) gradient at the router input
    ght = ght_flat.reshape(batch, n, r_e).transpose(1, 0, 2)  # (n, B, r_e)
    h_st = np.stack(cache.h, axis=0)
    if cfg.talking_enabled:
        grads["C"] = ght.reshape(n, -1) @ h_st.reshape(n, -1).T
        gh_router = (tl.c.T @ ght.reshape(n, -1)).reshape(n, batch, r_e)
    else:
        grads["C"] = np.zeros_like(tl.c)  # communication unused in this ablation
        gh_router = ght
    gxa = np.zeros_like(cache.xa)
    for i in range(n):
        gy = cache.gates[:, i : i + 1] * gd
        grads[f"B{i}"] = gy.T @ cache.p[i]
        gp = gy @ tl.b[i]
        grads[f"E{i}"] = gp.T @ cache.h[i]
        gh = gh_router[i] + gp @ tl.e[i]
        grads[f"A{i}"] = gh.T @ cache.xa
        gxa = gxa + gh @ tl.a[i]
    return gxa, grads


def _layer_backward(adapter, cfg, cache, gz):
    if isinstance(adapter, LoRAAdapter):
        gxa, grads = _lora_backward(adapter, cfg, cache, gz)
    elif isinstance(adapter, MoELoRALayer):
        gxa, grads = _moelora_backward(adapter, cfg, cache, gz)
    else:
        gxa, grads = _talklora_backward(adapter, cfg, cache, gz)
    if cache.drop_scale is not None:
        gxa = gxa * cache.drop_scale
    return gxa, grads


def backward(
    stack: AdapterStack,
    frozen_layers: list,
    batch: tuple,
    loss: LossSpec,
    dropout_scales: Optional[list] = None,
) -> tuple[float, dict]:
    """Loss value and exact analytic gradients for every trainable tensor.

    The returned dict has exactly one entry per handle of
    ``stack.named_parameters()``; shared B entries hold the sum of all
    aliasing layers' contributions, accumulated in fixed layer order.
    """
    inputs, targets = batch
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("batch inputs must be a nonempty (batch, d) array")
    z, caches = model_forward(frozen_layers, stack, inputs, dropout_scales)
    value, gz = loss_and_grad(z, np.asarray(targets), loss)
    grads = {handle: np.zeros_like(arr) for handle, arr in stack.named_parameters()}
    gx = gz
    for i in reversed(range(len(frozen_layers))):
        if i < len(frozen_layers) - 1:
            act = caches[i + 1].x  # tanh(z_i), stored as the next layer's input
            gx = gx * (1.0 - act * act)
        gxa, layer_grads = _layer_backward(
            stack.adapters[i], stack.slot_cfg(i), caches[i], gx
        )
        for role, handle, _ in stack.slot_handles(i):
            grads[handle] += layer_grads[role]
        gx = gx @ frozen_layers[i].w0 + gxa
    return value, grads


def _reference_loss(
    stack: AdapterStack,
    frozen_layers: list,
    params: dict,
    x: np.ndarray,
    targets: np.ndarray,
    loss: LossSpec,
    dropout_scales: Optional[list],
):
    """Naive re-implementation of the adapted forward pass plus loss.

    Deliberately independent of the production forward: per-expert loops,
    explicit softmax, and whatever dtype the supplied arrays carry (the
    verification suite passes extended precision).  Parameters are looked
    up by handle in ``params`` so shared tensors alias automatically.
    """
    h = x
    last = len(frozen_layers) - 1
    for i in range(last + 1):
        cfg = stack.slot_cfg(i)
        roles = {role: params[handle] for role, handle, _ in stack.slot_handles(i)}
        w0 = frozen_layers[i].w0.astype(x.dtype)
        scale = cfg.scaling
        xa = h * dropout_scales[i].astype(x.dtype) if dropout_scales else h
        n = cfg.experts
        if stack.method == "lora":
            delta = scale * ((xa @ roles["A0"].T) @ roles["B0"].T)
        else:
            hs = [xa @ roles[f"A{j}"].T for j in range(n)]
            if stack.method == "moelora":
                logits = xa @ roles["Wg"].T
                outs = [hs[j] @ roles[f"B{j}"].T for j in range(n)]
            else:
                if cfg.talking_enabled:
                    c = roles["C"]
                    mixed = [
                        sum(c[a, b] * hs[b] for b in range(n)) for a in range(n)
                    ]
                else:
                    mixed = hs
                logits = np.concatenate(mixed, axis=1) @ roles["Wg"].T
                outs = [
                    (hs[j] @ roles[f"E{j}"].T) @ roles[f"B{j}"].T for j in range(n)
                ]
            shifted = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            gates = e / e.sum(axis=1, keepdims=True)
            delta = scale * sum(
                gates[:, j : j + 1] * outs[j] for j in range(n)
            )
        z = h @ w0.T + delta
        h = np.tanh(z) if i < last else z
    if loss.kind == "mean-squared-error":
        return np.mean((h - targets.astype(x.dtype)) ** 2)
    shifted = h - h.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    idx = np.arange(h.shape[0])
    return np.mean(-np.log(probs[idx, targets.astype(int)]))


def finite_difference_oracle(
    stack: AdapterStack,
    frozen_layers: list,
    batch: tuple,
    loss: LossSpec,
    epsilon: float = 1e-5,
    dropout_scales: Optional[list] = None,
    dtype=np.float64,
) -> dict:
    """Central-difference gradients, one scalar parameter at a time.

    Evaluates a naive reference forward (independent of both the
    production forward and the analytic backward) at theta +/- epsilon for
    every trainable scalar.  Shared parameters are perturbed once; the
    handle-keyed lookup aliases their effect into every layer, which is
    exactly the summed gradient the analytic side must reproduce.
    ``dtype`` selects the evaluation precision; ``np.longdouble`` pushes
    the roundoff floor of the differences far below float64 levels.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    inputs, targets = batch
    x = np.asarray(inputs, dtype=dtype)
    targets = np.asarray(targets)
    params = {h: arr.astype(dtype) for h, arr in stack.named_parameters()}
    eps = dtype(epsilon)

    grads = {}
    for handle, arr in stack.named_parameters():
        work = params[handle]
        g = np.zeros_like(arr)
        flat = work.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + eps
            f_plus = _reference_loss(
                stack, frozen_layers, params, x, targets, loss, dropout_scales
            )
            flat[j] = original - eps
            f_minus = _reference_loss(
                stack, frozen_layers, params, x, targets, loss, dropout_scales
            )
            flat[j] = original
            gflat[j] = float((f_plus - f_minus) / (2.0 * eps))
        grads[handle] = g
    return grads


def relative_errors(analytic: dict, numeric: dict) -> dict:
    """Symmetric relative error |ga - gn| / max(1e-8, |ga| + |gn|), per handle."""
    if set(analytic) != set(numeric):
        raise ValueError("gradient sets carry different handles")
    out = {}
    for handle in analytic:
        ga, gn = analytic[handle], numeric[handle]
        denom = np.maximum(1e-8, np.abs(ga) + np.abs(gn))
        out[handle] = float(np.max(np.abs(ga - gn) / denom)) if ga.size else 0.0
    return out


@dataclass
class GradcheckReport:
    max_relative_error: float
    worst_handle: str
    per_handle: dict

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_relative_error < tol


def gradcheck(
    stack: AdapterStack,
    frozen_layers: list,
    batch: tuple,
    loss: LossSpec,
    epsilon: float = 1e-5,
    dropout_scales: Optional[list] = None,
    dtype=np.float64,
) -> GradcheckReport:
    """Compare analytic gradients against the central-difference oracle."""
    _, analytic = backward(stack, frozen_layers, batch, loss, dropout_scales)
    numeric = finite_difference_oracle(
        stack, frozen_layers, batch, loss, epsilon, dropout_scales, dtype
    )
    errs = relative_errors(analytic, numeric)
    worst = max(errs, key=errs.get)
    return GradcheckReport(
        max_relative_error=errs[worst], worst_handle=worst, per_handle=errs
    )


@dataclass(frozen=True)
class AdamWHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


class AdamWState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params):
        items = params.named_parameters() if hasattr(params, "named_parameters") else params
        self.step = 0
        self.m = {handle: np.zeros_like(arr) for handle, arr in items}
        self.v = {handle: np.zeros_like(arr) for handle, arr in items}


def adamw_step(params, grads: dict, state: AdamWState, hyper: AdamWHyper) -> None:
    """One decoupled-weight-decay Adam update, in place on the parameters.

    ``params`` is a sequence of (handle, array) pairs (or an object with
    ``named_parameters()``); every handle must appear in ``grads`` and in
    the state.  Weight decay multiplies parameters by (1 - lr * wd) after
    the gradient step, independent of the adaptive scaling.
    """
    items = params.named_parameters() if hasattr(params, "named_parameters") else params
    state.step += 1
    t = state.step
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for handle, arr in items:
        g = grads[handle]
        m = state.m[handle]
        v = state.v[handle]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        arr -= hyper.lr * update
        if hyper.weight_decay != 0.0:
            arr -= hyper.lr * hyper.weight_decay * arr


def apply_spectral_clip(stack: AdapterStack) -> None:
    """Project every communication matrix onto the spectral-norm ball.

    No-op unless the stack is TalkLoRA with ``spectral_clip_c`` set; when a
    C matrix exceeds the clip, it is rescaled by clip / sigma_max, which
    enforces the non-expansiveness assumption by construction.
    """
    clip = stack.cfg.spectral_clip_c
    if clip is None or stack.method != "talklora":
        return
    for adapter in stack.adapters:
        sigma = spectral_norm(adapter.c)
        if sigma > clip:
            adapter.c *= clip / sigma


def stack_adamw_step(
    stack: AdapterStack, grads: dict, state: AdamWState, hyper: AdamWHyper
) -> None:
    """AdamW over a whole stack, then the configured C projection."""
    adamw_step(stack, grads, state, hyper)
    apply_spectral_clip(stack)
