"""Forward semantics of the LoRA, MoELoRA and TalkLoRA adapter families.

LoRA adds a single low-rank update B A to a frozen weight.  MoELoRA splits
the rank budget across n experts B_i A_i combined by a softmax router over
the raw input.  TalkLoRA additionally factors each expert's up-projection
through a small square E_i, mixes the per-expert low-rank representations
h_j = A_j x through a learnable n x n communication matrix before routing,
and shares the B_i matrices across adaptation layers of the same
projection type.

Expert outputs always use the uncommunicated h_i; the communicated
representations feed only the router.  All math is float64 and every
random draw comes from a named :class:`~talklora.linalg.RngState` stream,
so construction is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import ModelGeometry, PROJECTION_TAGS
from .linalg import RngState, as_matrix, as_vector, kaiming_init, softmax_rows, zero_init

METHODS = ("lora", "moelora", "talklora")


@dataclass(frozen=True)
class AdapterConfig:
    """Family-level hyperparameters shared by all adapter constructors.

    ``input_dim``/``output_dim`` may stay ``None`` for configs used to
    build stacks over a model geometry (each slot fills in its own dims);
    single-layer constructors require them.
    """

    total_rank: int
    experts: int = 1
    input_dim: Optional[int] = None
    output_dim: Optional[int] = None
    lora_alpha: float = 16.0
    share_b: bool = True
    talking_enabled: bool = True
    spectral_clip_c: Optional[float] = None

    def __post_init__(self):
        if self.total_rank < 1:
            raise ValueError(f"total_rank must be positive, got {self.total_rank}")
        if self.experts < 1:
            raise ValueError(f"experts must be positive, got {self.experts}")
        if self.total_rank % self.experts != 0:
            raise ValueError(
                f"experts ({self.experts}) must divide total_rank ({self.total_rank})"
            )
        if self.lora_alpha <= 0:
            raise ValueError(f"lora_alpha must be positive, got {self.lora_alpha}")
        if self.spectral_clip_c is not None and self.spectral_clip_c <= 0:
            raise ValueError("spectral_clip_c must be positive when set")
        if (self.input_dim is None) != (self.output_dim is None):
            raise ValueError("input_dim and output_dim must be set together")
        if self.input_dim is not None:
            if self.input_dim < 1 or self.output_dim < 1:
                raise ValueError("input_dim/output_dim must be positive")
            if self.total_rank > min(self.input_dim, self.output_dim):
                raise ValueError(
                    f"total_rank {self.total_rank} exceeds min(input_dim, output_dim) "
                    f"= {min(self.input_dim, self.output_dim)} (low-rank regime)"
                )

    @property
    def expert_rank(self) -> int:
        return self.total_rank // self.experts

    @property
    def scaling(self) -> float:
        """Multiplier lora_alpha / total_rank applied to the adapter delta."""
        return self.lora_alpha / self.total_rank

    def with_dims(self, d_in: int, d_out: int) -> "AdapterConfig":
        return replace(self, input_dim=d_in, output_dim=d_out)

    def require_dims(self) -> tuple[int, int]:
        if self.input_dim is None or self.output_dim is None:
            raise ValueError("this operation needs input_dim/output_dim on the config")
        return self.input_dim, self.output_dim


@dataclass
class FrozenLinear:
    """Pretrained weight w0 (k x d); never mutated by training."""

    w0: np.ndarray

    def __post_init__(self):
        self.w0 = np.array(as_matrix(self.w0, "w0"), dtype=np.float64)
        self.w0.setflags(write=False)

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]


@dataclass
class LoRAAdapter:
    a: np.ndarray  # (r, d), Kaiming at construction
    b: np.ndarray  # (k, r), zero at construction


@dataclass
class MoELoRALayer:
    a: list  # n matrices (r_e, d)
    b: list  # n matrices (k, r_e)
    router_wg: np.ndarray  # (n, d)


@dataclass
class TalkLoRALayer:
    a: list  # n matrices (r_e, d)
    e: list  # n matrices (r_e, r_e)
    b: list  # n matrices (k, r_e); aliases into a shared store when b_shared
    c: np.ndarray  # (n, n) communication matrix
    router_wg: np.ndarray  # (n, r)
    b_shared: bool = False


@dataclass
class SharedProjectionStore:
    """Cross-layer shared up-projections, keyed by projection tag.

    Every layer built with sharing enabled holds references to the same
    underlying arrays, so one gradient update is visible to all of them.
    """

    entries: dict = field(default_factory=dict)  # tag -> list of (k, r_e) arrays

    def get(self, tag: str) -> list:
        return self.entries[tag]

    @property
    def tags(self) -> tuple:
        return tuple(self.entries.keys())


def init_lora(cfg: AdapterConfig, rng: RngState) -> LoRAAdapter:
    d, k = cfg.require_dims()
    return LoRAAdapter(
        a=kaiming_init(cfg.total_rank, d, rng.split("A0")),
        b=zero_init(k, cfg.total_rank),
    )


def init_moelora(cfg: AdapterConfig, rng: RngState) -> MoELoRALayer:
    d, k = cfg.require_dims()
    r_e, n = cfg.expert_rank, cfg.experts
    return MoELoRALayer(
        a=[kaiming_init(r_e, d, rng.split(f"A{i}")) for i in range(n)],
        b=[zero_init(k, r_e) for _ in range(n)],
        router_wg=kaiming_init(n, d, rng.split("Wg")),
    )


def init_talklora(
    cfg: AdapterConfig, rng: RngState, shared_b: Optional[list] = None
) -> TalkLoRALayer:
    d, k = cfg.require_dims()
    r_e, n = cfg.expert_rank, cfg.experts
    if shared_b is not None:
        if len(shared_b) != n or any(m.shape != (k, r_e) for m in shared_b):
            raise ValueError("shared B store entries do not match this layer's shapes")
        b = list(shared_b)
    else:
        b = [zero_init(k, r_e) for _ in range(n)]
    return TalkLoRALayer(
        a=[kaiming_init(r_e, d, rng.split(f"A{i}")) for i in range(n)],
        e=[kaiming_init(r_e, r_e, rng.split(f"E{i}")) for i in range(n)],
        b=b,
        c=kaiming_init(n, n, rng.split("C")),
        router_wg=kaiming_init(n, cfg.total_rank, rng.split("Wg")),
        b_shared=shared_b is not None,
    )


@dataclass
class ForwardTrace:
    """Intermediate quantities of one gated-adapter forward pass."""

    h: np.ndarray  # (n, r_e) per-expert low-rank representations
    h_tilde: np.ndarray  # (n, r_e) communicated representations (== h without talking)
    gates: np.ndarray  # (n,) softmax routing weights
    expert_outputs: np.ndarray  # (n, k), unweighted B_i E_i h_i (or B_i A_i x)
    y: np.ndarray  # (k,) full layer output
    delta: np.ndarray  # (k,) adapter contribution, y - w0 @ x computed exactly

    def __post_init__(self):
        if not (self.gates > 0).all():
            raise ValueError("gate vector must be entrywise positive")
        if abs(self.gates.sum() - 1.0) > 1e-12:
            raise ValueError("gate vector must sum to 1 within 1e-12")


@dataclass
class LayerCache:
    """Batched forward intermediates retained for the backward pass."""

    x: np.ndarray  # (B, d) clean layer input
    xa: np.ndarray  # (B, d) adapter-path input (after dropout, == x otherwise)
    drop_scale: Optional[np.ndarray]  # (B, d) mask/(1-p), None without dropout
    h: Optional[list]  # per-expert (B, r_e)
    router_in: Optional[np.ndarray]  # what router_wg multiplied: (B, r) or (B, d)
    gates: Optional[np.ndarray]  # (B, n)
    p: Optional[list]  # talklora only: per-expert E_i h_i, (B, r_e)
    yexp: Optional[list]  # per-expert outputs (B, k)
    delta: np.ndarray  # (B, k)
    z: np.ndarray  # (B, k) = x @ w0.T + delta


def _mix_representations(c: np.ndarray, h: list) -> list:
    """Apply the communication matrix across the expert axis."""
    n = len(h)
    stacked = np.stack(h, axis=0)  # (n, B, r_e)
    mixed = (c @ stacked.reshape(n, -1)).reshape(stacked.shape)
    return [mixed[i] for i in range(n)]


def lora_batch_forward(
    w0: np.ndarray,
    ad: LoRAAdapter,
    x: np.ndarray,
    cfg: AdapterConfig,
    xa: Optional[np.ndarray] = None,
    drop_scale: Optional[np.ndarray] = None,
) -> LayerCache:
    xa = x if xa is None else xa
    h = xa @ ad.a.T
    yexp = h @ ad.b.T
    delta = cfg.scaling * yexp
    return LayerCache(
        x=x, xa=xa, drop_scale=drop_scale,
        h=[h], router_in=None, gates=None, p=None, yexp=[yexp],
        delta=delta, z=x @ w0.T + delta,
    )


def moelora_batch_forward(
    w0: np.ndarray,
    ml: MoELoRALayer,
    x: np.ndarray,
    cfg: AdapterConfig,
    xa: Optional[np.ndarray] = None,
    drop_scale: Optional[np.ndarray] = None,
) -> LayerCache:
    xa = x if xa is None else xa
    h = [xa @ a_i.T for a_i in ml.a]
    gates = softmax_rows(xa @ ml.router_wg.T)  # router reads the raw input
    yexp = [h_i @ b_i.T for h_i, b_i in zip(h, ml.b)]
    mix = gates[:, 0:1] * yexp[0]
    for i in range(1, cfg.experts):
        mix = mix + gates[:, i : i + 1] * yexp[i]
    delta = cfg.scaling * mix
    return LayerCache(
        x=x, xa=xa, drop_scale=drop_scale,
        h=h, router_in=xa, gates=gates, p=None, yexp=yexp,
        delta=delta, z=x @ w0.T + delta,
    )


def talklora_batch_forward(
    w0: np.ndarray,
    tl: TalkLoRALayer,
    x: np.ndarray,
    cfg: AdapterConfig,
    xa: Optional[np.ndarray] = None,
    drop_scale: Optional[np.ndarray] = None,
) -> LayerCache:
    xa = x if xa is None else xa
    n = cfg.experts
    h = [xa @ a_i.T for a_i in tl.a]
    h_tilde = _mix_representations(tl.c, h) if cfg.talking_enabled else h
    router_in = np.concatenate(h_tilde, axis=1)  # (B, r) = [h~_1, ..., h~_n]
    gates = softmax_rows(router_in @ tl.router_wg.T)
    p = [h_i @ e_i.T for h_i, e_i in zip(h, tl.e)]  # experts use uncommunicated h
    yexp = [p_i @ b_i.T for p_i, b_i in zip(p, tl.b)]
    mix = gates[:, 0:1] * yexp[0]
    for i in range(1, n):
        mix = mix + gates[:, i : i + 1] * yexp[i]
    delta = cfg.scaling * mix
    return LayerCache(
        x=x, xa=xa, drop_scale=drop_scale,
        h=h, router_in=router_in, gates=gates, p=p, yexp=yexp,
        delta=delta, z=x @ w0.T + delta,
    )


def batch_forward(w0, adapter, x, cfg, xa=None, drop_scale=None) -> LayerCache:
    if isinstance(adapter, LoRAAdapter):
        return lora_batch_forward(w0, adapter, x, cfg, xa, drop_scale)
    if isinstance(adapter, MoELoRALayer):
        return moelora_batch_forward(w0, adapter, x, cfg, xa, drop_scale)
    if isinstance(adapter, TalkLoRALayer):
        return talklora_batch_forward(w0, adapter, x, cfg, xa, drop_scale)
    raise TypeError(f"unknown adapter type {type(adapter).__name__}")


def _check_input(layer: FrozenLinear, x: np.ndarray, cfg: AdapterConfig) -> np.ndarray:
    x = as_vector(x, "x")
    if x.shape[0] != layer.d_in:
        raise ValueError(
            f"input length {x.shape[0]} does not match w0 input dim {layer.d_in}"
        )
    if cfg.input_dim is not None and cfg.input_dim != layer.d_in:
        raise ValueError(
            f"config input_dim {cfg.input_dim} does not match w0 input dim {layer.d_in}"
        )
    return x


def lora_forward(
    layer: FrozenLinear, ad: LoRAAdapter, x, cfg: AdapterConfig
) -> np.ndarray:
    """y = w0 x + (alpha/r) B A x."""
    x = _check_input(layer, x, cfg)
    if ad.a.shape != (cfg.total_rank, layer.d_in) or ad.b.shape != (
        layer.d_out,
        cfg.total_rank,
    ):
        raise ValueError(
            f"adapter shapes A{ad.a.shape} / B{ad.b.shape} inconsistent with "
            f"w0 {layer.w0.shape} and rank {cfg.total_rank}"
        )
    return lora_batch_forward(layer.w0, ad, x[None, :], cfg).z[0]


def lora_merge(layer: FrozenLinear, ad: LoRAAdapter, cfg: AdapterConfig) -> np.ndarray:
    """Fold the low-rank update into the frozen weight: w0 + (alpha/r) B A."""
    if ad.b.shape[0] != layer.d_out or ad.a.shape[1] != layer.d_in:
        raise ValueError(
            f"cannot merge: A{ad.a.shape} / B{ad.b.shape} vs w0 {layer.w0.shape}"
        )
    return layer.w0 + cfg.scaling * (ad.b @ ad.a)


def _trace_from_cache(cache: LayerCache) -> ForwardTrace:
    h = np.stack([h_i[0] for h_i in cache.h], axis=0)
    if cache.p is not None:
        # talklora: router input is the concatenated communicated h~
        h_tilde = cache.router_in[0].reshape(h.shape)
    else:
        h_tilde = h.copy()  # no communication exists: mirrors h
    return ForwardTrace(
        h=h,
        h_tilde=h_tilde,
        gates=cache.gates[0].copy(),
        expert_outputs=np.stack([y_i[0] for y_i in cache.yexp], axis=0),
        y=cache.z[0],
        delta=cache.delta[0],
    )


def moelora_forward(
    layer: FrozenLinear, ml: MoELoRALayer, x, cfg: AdapterConfig
) -> tuple[np.ndarray, ForwardTrace]:
    """y = w0 x + (alpha/r) sum_i g_i(x) B_i A_i x with g = softmax(W_g x)."""
    x = _check_input(layer, x, cfg)
    cache = moelora_batch_forward(layer.w0, ml, x[None, :], cfg)
    return cache.z[0], _trace_from_cache(cache)


def talking_mix(c, h) -> np.ndarray:
    """Communicated representations h~_i = sum_j C_ij h_j.

    ``h`` is a sequence of n equal-length vectors (or an (n, r_e) array);
    the result has the same shape.  Equivalent to (C kron I) applied to the
    stacked representation.
    """
    c = as_matrix(c, "c")
    if isinstance(h, np.ndarray) and h.ndim == 2:
        stacked = h.astype(np.float64, copy=False)
    else:
        rows = [as_vector(h_j, f"h[{j}]") for j, h_j in enumerate(h)]
        lengths = {r.shape[0] for r in rows}
        if len(lengths) != 1:
            raise ValueError(f"expert representations differ in length: {sorted(lengths)}")
        stacked = np.stack(rows, axis=0)
    n = stacked.shape[0]
    if c.shape != (n, n):
        raise ValueError(f"communication matrix is {c.shape}, expected ({n}, {n})")
    return c @ stacked


def talklora_forward(
    layer: FrozenLinear, tl: TalkLoRALayer, x, cfg: AdapterConfig
) -> tuple[np.ndarray, ForwardTrace]:
    """Full TalkLoRA layer forward.

    h_i = A_i x feeds the experts directly; the communicated h~ = C-mixed h
    (identity when talking is disabled) feeds only the router.  Output is
    w0 x + (alpha/r) sum_i g_i B_i E_i h_i.
    """
    x = _check_input(layer, x, cfg)
    cache = talklora_batch_forward(layer.w0, tl, x[None, :], cfg)
    return cache.z[0], _trace_from_cache(cache)


def router_gates(tl: TalkLoRALayer, x: np.ndarray, talking_enabled: bool = True) -> np.ndarray:
    """Routing function alone: gates for a batch of inputs (B, d) -> (B, n)."""
    h = [x @ a_i.T for a_i in tl.a]
    h_tilde = _mix_representations(tl.c, h) if talking_enabled else h
    return softmax_rows(np.concatenate(h_tilde, axis=1) @ tl.router_wg.T)


@dataclass(frozen=True)
class LayerSlot:
    """One adaptation site: (depth index, projection tag, dims)."""

    layer: int
    tag: str
    d_in: int
    d_out: int

    @property
    def name(self) -> str:
        return f"L{self.layer:02d}.{self.tag}"


class AdapterStack:
    """All adapters of one method over a list of slots, plus the shared store.

    Parameter arrays are reachable through stable string handles; shared B
    matrices appear exactly once, under ``shared.<tag>.B<i>`` handles.
    Forward passes never mutate parameters; optimizer steps mutate them in
    place through :meth:`named_parameters`.
    """

    def __init__(self, method: str, cfg: AdapterConfig, slots: list, adapters: list,
                 shared: Optional[SharedProjectionStore]):
        self.method = method
        self.cfg = cfg
        self.slots = slots
        self.adapters = adapters
        self.shared = shared
        self._params = self._collect_parameters()
        self._by_handle = dict(self._params)

    def slot_cfg(self, i: int) -> AdapterConfig:
        slot = self.slots[i]
        return self.cfg.with_dims(slot.d_in, slot.d_out)

    def _slot_roles(self, i: int) -> list:
        """(role, handle, array) triples for slot i, sharing-resolved."""
        slot, ad = self.slots[i], self.adapters[i]
        n = self.cfg.experts
        out = []
        if isinstance(ad, LoRAAdapter):
            out.append(("A0", f"{slot.name}.A0", ad.a))
            out.append(("B0", f"{slot.name}.B0", ad.b))
        elif isinstance(ad, MoELoRALayer):
            for j in range(n):
                out.append((f"A{j}", f"{slot.name}.A{j}", ad.a[j]))
            for j in range(n):
                out.append((f"B{j}", f"{slot.name}.B{j}", ad.b[j]))
            out.append(("Wg", f"{slot.name}.Wg", ad.router_wg))
        else:
            for j in range(n):
                out.append((f"A{j}", f"{slot.name}.A{j}", ad.a[j]))
            for j in range(n):
                out.append((f"E{j}", f"{slot.name}.E{j}", ad.e[j]))
            out.append(("C", f"{slot.name}.C", ad.c))
            out.append(("Wg", f"{slot.name}.Wg", ad.router_wg))
            for j in range(n):
                handle = (
                    f"shared.{slot.tag}.B{j}" if ad.b_shared else f"{slot.name}.B{j}"
                )
                out.append((f"B{j}", handle, ad.b[j]))
        return out

    def _collect_parameters(self) -> list:
        seen = set()
        params = []
        for i in range(len(self.slots)):
            for _, handle, arr in self._slot_roles(i):
                if handle in seen:
                    continue  # shared B already recorded
                seen.add(handle)
                params.append((handle, arr))
        return params

    def named_parameters(self) -> list:
        """(handle, array) pairs in a fixed order; shared tensors once."""
        return list(self._params)

    def parameter(self, handle: str) -> np.ndarray:
        return self._by_handle[handle]

    @property
    def handles(self) -> list:
        return [h for h, _ in self._params]

    def slot_handles(self, i: int) -> list:
        """(role, handle, array) for backward-pass gradient accumulation."""
        return self._slot_roles(i)

    def trainable_count(self) -> int:
        return sum(arr.size for _, arr in self._params)


def build_stack_from_slots(
    method: str, cfg: AdapterConfig, slots: Sequence[LayerSlot], rng: RngState
) -> AdapterStack:
    """Construct fresh adapters for every slot, wiring shared B when asked."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if not slots:
        raise ValueError("at least one slot is required")
    shared = None
    if method == "talklora" and cfg.share_b:
        shared = SharedProjectionStore()
        out_dims: dict = {}
        for slot in slots:
            if slot.tag in out_dims and out_dims[slot.tag] != slot.d_out:
                raise ValueError(
                    f"cannot share B across tag {slot.tag!r}: output dims differ "
                    f"({out_dims[slot.tag]} vs {slot.d_out})"
                )
            out_dims[slot.tag] = slot.d_out
            if slot.tag not in shared.entries:
                shared.entries[slot.tag] = [
                    zero_init(slot.d_out, cfg.expert_rank) for _ in range(cfg.experts)
                ]
    adapters = []
    for slot in slots:
        slot_cfg = cfg.with_dims(slot.d_in, slot.d_out)
        slot_rng = rng.split(f"init.{slot.name}")
        if method == "lora":
            adapters.append(init_lora(slot_cfg, slot_rng))
        elif method == "moelora":
            adapters.append(init_moelora(slot_cfg, slot_rng))
        else:
            shared_b = shared.entries[slot.tag] if shared is not None else None
            adapters.append(init_talklora(slot_cfg, slot_rng, shared_b=shared_b))
    return AdapterStack(method, cfg, list(slots), adapters, shared)


def build_frozen_stack(
    input_dim: int, output_dim: int, depth: int, rng: RngState
) -> list:
    """Frozen host model: ``depth`` linear layers with tanh between them.

    Hidden layers are square (input_dim x input_dim); the last layer maps
    to output_dim and has no activation after it.  Weights are Kaiming
    draws from named streams, so the host is bit-reproducible from the
    seed and is never trained.
    """
    if depth < 1:
        raise ValueError(f"depth must be positive, got {depth}")
    layers = []
    for i in range(depth):
        d_out = output_dim if i == depth - 1 else input_dim
        layers.append(
            FrozenLinear(kaiming_init(d_out, input_dim, rng.split(f"frozen.L{i:02d}")))
        )
    return layers


def frozen_stack_slots(frozen_layers) -> list:
    """Adaptation slots for a frozen stack, tagged by layer shape.

    Layers with identical shapes share a tag, which is what makes
    cross-layer B sharing shape-compatible in the synthetic model.
    """
    slots = []
    for i, fl in enumerate(frozen_layers):
        slots.append(LayerSlot(i, f"{fl.d_in}x{fl.d_out}", fl.d_in, fl.d_out))
    return slots


def build_adapter_stack(
    geom: ModelGeometry,
    method: str,
    cfg: AdapterConfig,
    targets,
    rng: RngState,
) -> AdapterStack:
    """One adapter per (transformer layer, target projection) of a geometry.

    Targets must name projections present in the geometry; they are laid
    out in canonical tag order, layer-major, so construction order (and
    hence every random draw) is deterministic.
    """
    targets = set(targets)
    if not targets:
        raise ValueError("targets must be a nonempty set of projection tags")
    unknown = targets - set(geom.tags)
    if unknown:
        raise ValueError(
            f"unknown target tags {sorted(unknown)}; geometry {geom.name!r} "
            f"offers {list(geom.tags)}"
        )
    canonical = [t for t in PROJECTION_TAGS if t in targets]
    canonical += [t for t in geom.tags if t in targets and t not in canonical]
    slots = []
    for layer in range(geom.layers):
        for tag in canonical:
            proj = geom.projection(tag)
            slots.append(LayerSlot(layer, tag, proj.d_in, proj.d_out))
    return build_stack_from_slots(method, cfg, slots, rng)
