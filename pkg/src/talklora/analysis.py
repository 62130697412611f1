"""Verification analyses: budgets, stability certificates, routing statistics.

This is where the family's analyzable claims become executable checks:
parameter accounting against published model geometries, the routing
Lipschitz certificate (observed gate perturbations vs the alpha*beta
bound), spectral-norm audits of the communication matrices, the
degeneracy / expressive-power probes, and routing-load balance reports.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .adapters import (
    AdapterConfig,
    AdapterStack,
    TalkLoRALayer,
    build_frozen_stack,
    build_stack_from_slots,
    frozen_stack_slots,
    router_gates,
    talking_mix,
)
from .autodiff import LossSpec, model_forward
from .geometry import ModelGeometry
from .linalg import RngState, spectral_norm
from .tasks import ClusterTaskSpec, TrainConfig, generate_cluster_task, train

NONEXPANSIVE_SLACK = 1e-9


@dataclass(frozen=True)
class ParamBudget:
    """Trainable-parameter count, share of the host model, and role breakdown."""

    trainable: int
    total: int
    percent: float
    breakdown: dict

    def __post_init__(self):
        if sum(self.breakdown.values()) != self.trainable:
            raise ValueError("breakdown does not reconcile with the trainable count")


def count_params(
    geom: ModelGeometry, method: str, cfg: AdapterConfig, targets
) -> ParamBudget:
    """Closed-form parameter budget for one method over a geometry.

    Per (layer, target): LoRA allocates r(d_in + d_out); MoELoRA adds the
    router n*d_in; TalkLoRA allocates r*d_in for the A_i, r^2/n for the
    E_i, n^2 for C and n*r for the router, with the B_i counted once per
    target when sharing is on (otherwise once per layer).
    """
    targets = set(targets)
    if not targets:
        raise ValueError("targets must be nonempty")
    unknown = targets - set(geom.tags)
    if unknown:
        raise ValueError(f"unknown target tags {sorted(unknown)} for {geom.name!r}")
    r, n, layers = cfg.total_rank, cfg.experts, geom.layers
    breakdown: dict = {}
    if method == "lora":
        breakdown["A"] = sum(layers * r * geom.projection(t).d_in for t in targets)
        breakdown["B"] = sum(layers * r * geom.projection(t).d_out for t in targets)
    elif method == "moelora":
        breakdown["A"] = sum(layers * r * geom.projection(t).d_in for t in targets)
        breakdown["B"] = sum(layers * r * geom.projection(t).d_out for t in targets)
        breakdown["Wg"] = sum(layers * n * geom.projection(t).d_in for t in targets)
    elif method == "talklora":
        r_e = cfg.expert_rank
        breakdown["A"] = sum(layers * r * geom.projection(t).d_in for t in targets)
        breakdown["E"] = layers * len(targets) * n * r_e * r_e
        breakdown["C"] = layers * len(targets) * n * n
        breakdown["Wg"] = layers * len(targets) * n * r
        b_layers = 1 if cfg.share_b else layers
        breakdown["B"] = sum(b_layers * r * geom.projection(t).d_out for t in targets)
    else:
        raise ValueError(f"unknown method {method!r}")
    trainable = sum(breakdown.values())
    return ParamBudget(
        trainable=trainable,
        total=geom.total_params,
        percent=100.0 * trainable / geom.total_params,
        breakdown=breakdown,
    )


def budget_to_dict(budget: ParamBudget) -> dict:
    return {
        "schema": "param-budget-v1",
        "trainable": budget.trainable,
        "total": budget.total,
        "percent": budget.percent,
        "breakdown": dict(sorted(budget.breakdown.items())),
    }


@dataclass(frozen=True)
class StabilityCertificate:
    """Empirical check of the routing Lipschitz bound |g(x+dx)-g(x)| <= alpha*beta*|dx|.

    alpha is the spectral norm of the vertically stacked A_i (the full
    low-rank projection), beta that of the router weights, c_norm that of
    the effective communication operator (1.0 when talking is disabled,
    i.e. identity).  The verdict asserts the bound only in the regime the
    theory covers: it requires c_norm <= 1 and no observed violation.
    """

    alpha: float
    beta: float
    c_norm: float
    bound: float
    trials: int
    max_observed_ratio: float
    verdict: bool


def stability_certificate(
    tl: TalkLoRALayer,
    trials: int,
    delta_scale: float,
    rng: RngState,
    talking_enabled: bool = True,
) -> StabilityCertificate:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if delta_scale < 0:
        raise ValueError("delta_scale must be nonnegative")
    alpha = spectral_norm(np.vstack(tl.a))
    beta = spectral_norm(tl.router_wg)
    c_norm = spectral_norm(tl.c) if talking_enabled else 1.0
    bound = alpha * beta
    d = tl.a[0].shape[1]
    gen = rng.generator()
    x = gen.normal(size=(trials, d))
    dx = delta_scale * gen.normal(size=(trials, d))
    g0 = router_gates(tl, x, talking_enabled)
    g1 = router_gates(tl, x + dx, talking_enabled)
    diff = np.linalg.norm(g1 - g0, axis=1)
    dx_norm = np.linalg.norm(dx, axis=1)
    valid = dx_norm > 0
    max_ratio = float((diff[valid] / dx_norm[valid]).max()) if valid.any() else 0.0
    verdict = (c_norm <= 1.0 + NONEXPANSIVE_SLACK) and (
        max_ratio <= bound * (1.0 + 1e-9)
    )
    return StabilityCertificate(
        alpha=alpha,
        beta=beta,
        c_norm=c_norm,
        bound=bound,
        trials=trials,
        max_observed_ratio=max_ratio,
        verdict=verdict,
    )


def certificate_to_dict(cert: StabilityCertificate) -> dict:
    return {
        "schema": "stability-certificate-v1",
        "alpha": cert.alpha,
        "beta": cert.beta,
        "c_norm": cert.c_norm,
        "bound": cert.bound,
        "trials": cert.trials,
        "max_observed_ratio": cert.max_observed_ratio,
        "verdict": cert.verdict,
    }


@dataclass(frozen=True)
class NonexpansiveAudit:
    """Spectral norms of every communication matrix in a stack."""

    rows: list  # (layer, tag, sigma_max)
    fraction_within: float  # share of entries with sigma <= 1 + 1e-9


def nonexpansive_audit(stack: AdapterStack) -> NonexpansiveAudit:
    if stack.method != "talklora":
        raise ValueError("non-expansive audit applies to TalkLoRA stacks only")
    rows = []
    within = 0
    for slot, adapter in zip(stack.slots, stack.adapters):
        sigma = spectral_norm(adapter.c)
        rows.append((slot.layer, slot.tag, sigma))
        if sigma <= 1.0 + NONEXPANSIVE_SLACK:
            within += 1
    return NonexpansiveAudit(rows=rows, fraction_within=within / len(rows))


def nonexpansive_csv_lines(audit: NonexpansiveAudit) -> list:
    lines = ["#schema=nonexpansive-v1", "layer,tag,sigma_max"]
    for layer, tag, sigma in audit.rows:
        lines.append(f"{layer},{tag},{sigma:.17g}")
    return lines


def shannon_entropy(p: np.ndarray) -> float:
    """Natural-log entropy with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass(frozen=True)
class RoutingLoadReport:
    """Per-layer routing statistics (mean gate weights and their spread)."""

    mean_gates: np.ndarray  # (layers, experts)
    entropy: np.ndarray  # (layers,), in [0, ln n]
    max_share: np.ndarray  # (layers,)
    load_cv: float  # coefficient of variation of global expert loads

    @property
    def mean_entropy(self) -> float:
        return float(self.entropy.mean())


def routing_load(stack: AdapterStack, frozen_layers: list, data) -> RoutingLoadReport:
    """Mean gate vectors, their entropies and the global load spread.

    ``data`` is either an (N, d) input array or a dataset object exposing
    ``x_eval``.  Plain LoRA stacks have no router and are rejected.
    """
    if stack.method == "lora":
        raise ValueError("routing_load needs a gated stack (moelora or talklora)")
    x = data.x_eval if hasattr(data, "x_eval") else np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("data must be a nonempty (N, d) array")
    _, caches = model_forward(frozen_layers, stack, x)
    mean_gates = np.stack([cache.gates.mean(axis=0) for cache in caches], axis=0)
    entropy = np.array([shannon_entropy(row) for row in mean_gates])
    max_share = mean_gates.max(axis=1)
    loads = mean_gates.mean(axis=0)
    load_cv = float(loads.std() / loads.mean())
    return RoutingLoadReport(
        mean_gates=mean_gates, entropy=entropy, max_share=max_share, load_cv=load_cv
    )


def routing_load_csv_lines(report: RoutingLoadReport) -> list:
    lines = ["#schema=routing-load-v1", "layer,expert,mean_gate,entropy,max_share"]
    layers, experts = report.mean_gates.shape
    for layer in range(layers):
        for expert in range(experts):
            lines.append(
                f"{layer},{expert},{report.mean_gates[layer, expert]:.17g},"
                f"{report.entropy[layer]:.17g},{report.max_share[layer]:.17g}"
            )
    return lines


@dataclass(frozen=True)
class DegeneracyReport:
    """Expressive-power probes of the communication matrix.

    identity_max_diff: largest |h~ - h| under C = I (must be exactly 0).
    isolation_max_diff: largest change in h~_i (i != j) after perturbing
    A_j under a diagonal C (must be exactly 0: experts stay independent).
    cross_influence_min: smallest witnessed change of h~_1 after
    perturbing A_2 once C_12 != 0 (must be strictly positive).
    """

    trials: int
    identity_max_diff: float
    isolation_max_diff: float
    cross_influence_min: float

    @property
    def passed(self) -> bool:
        return (
            self.identity_max_diff == 0.0
            and self.isolation_max_diff == 0.0
            and self.cross_influence_min > 0.0
        )


def degeneracy_check(
    tl: TalkLoRALayer, trials: int, rng: RngState
) -> DegeneracyReport:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    n = len(tl.a)
    if n < 2:
        raise ValueError("degeneracy probes need at least 2 experts")
    d = tl.a[0].shape[1]
    gen = rng.generator()
    identity_max = 0.0
    isolation_max = 0.0
    cross_min = np.inf

    eye = np.eye(n)
    diagonal_c = np.diag(np.diag(tl.c))
    cross_c = tl.c.copy()
    if not np.any(cross_c - np.diag(np.diag(cross_c))):
        cross_c[0, 1] = 1.0  # guarantee an off-diagonal channel to witness

    for _ in range(trials):
        x = gen.normal(size=d)
        h = np.stack([a_i @ x for a_i in tl.a], axis=0)
        # (a) identity communication is an exact pass-through
        identity_max = max(identity_max, float(np.abs(talking_mix(eye, h) - h).max()))
        # (b) diagonal C: perturbing A_j cannot reach h~_i for i != j
        j = int(gen.integers(0, n))
        perturbed = [a_i.copy() for a_i in tl.a]
        perturbed[j] = perturbed[j] + gen.normal(size=perturbed[j].shape)
        h_pert = np.stack([a_i @ x for a_i in perturbed], axis=0)
        before = talking_mix(diagonal_c, h)
        after = talking_mix(diagonal_c, h_pert)
        others = [i for i in range(n) if i != j]
        isolation_max = max(
            isolation_max, float(np.abs(after[others] - before[others]).max())
        )
        # (c) off-diagonal C_12 != 0: h~_1 must feel a perturbation of A_2
        delta_a2 = gen.normal(size=tl.a[1].shape)
        h_cross = h.copy()
        h_cross[1] = (tl.a[1] + delta_a2) @ x
        change = float(
            np.abs(talking_mix(cross_c, h_cross)[0] - talking_mix(cross_c, h)[0]).max()
        )
        cross_min = min(cross_min, change)

    return DegeneracyReport(
        trials=trials,
        identity_max_diff=identity_max,
        isolation_max_diff=isolation_max,
        cross_influence_min=float(cross_min),
    )


def communication_heatmap(stack: AdapterStack) -> list:
    """Per-layer C matrices normalized to [-1, 1] by their max-abs entry.

    Zero matrices pass through unchanged; the operation is idempotent.
    Returns (layer, tag, normalized C) triples.
    """
    if stack.method != "talklora":
        raise ValueError("communication heatmap applies to TalkLoRA stacks only")
    out = []
    for slot, adapter in zip(stack.slots, stack.adapters):
        peak = np.abs(adapter.c).max()
        normalized = adapter.c / peak if peak > 0 else adapter.c.copy()
        out.append((slot.layer, slot.tag, normalized))
    return out


def heatmap_csv_lines(heatmap: list) -> list:
    lines = ["#schema=heatmap-v1", "layer,tag,row,col,value"]
    for layer, tag, c in heatmap:
        for i in range(c.shape[0]):
            for j in range(c.shape[1]):
                lines.append(f"{layer},{tag},{i},{j},{c[i, j]:.17g}")
    return lines


# Protocol of the routing-balance comparison: a 4-cluster regression task
# with heavy intra-cluster noise, adapted with 4 experts under the
# non-expansive regime (spectral clip 1.0) that the stability analysis
# assumes; the ablation arm differs only in talking_enabled.
BALANCE_TASK = dict(
    clusters=4, input_dim=16, output_dim=16, samples_per_cluster=250, noise_std=4.0
)
BALANCE_ADAPTER = dict(total_rank=8, experts=4, lora_alpha=16.0, spectral_clip_c=1.0)
BALANCE_TRAIN = dict(
    epochs=40, batch_size=32, lr=1e-2, warmup_steps=100, eval_every=10**6, dropout=0.05
)
BALANCE_DEPTH = 4


@dataclass(frozen=True)
class BalanceResult:
    seeds: tuple
    entropy_talking: tuple
    entropy_ablated: tuple

    @property
    def mean_talking(self) -> float:
        return float(np.mean(self.entropy_talking))

    @property
    def mean_ablated(self) -> float:
        return float(np.mean(self.entropy_ablated))

    @property
    def direction_holds(self) -> bool:
        return self.mean_talking >= self.mean_ablated


def routing_balance_experiment(seeds=(0, 1, 2, 3, 4)) -> BalanceResult:
    """Train talking vs no-talking on the m=n cluster task and compare entropy.

    Both arms share the task, the frozen host, every hyperparameter and
    the seeds; only ``talking_enabled`` differs.  Returns the per-seed
    mean routing entropies (averaged over layers) after training.
    """
    ent_on, ent_off = [], []
    for seed in seeds:
        data = generate_cluster_task(ClusterTaskSpec(seed=seed, **BALANCE_TASK))
        for talking, sink in ((True, ent_on), (False, ent_off)):
            rng = RngState(1000 + seed)
            frozen = build_frozen_stack(
                BALANCE_TASK["input_dim"], BALANCE_TASK["output_dim"],
                BALANCE_DEPTH, rng,
            )
            cfg = AdapterConfig(talking_enabled=talking, **BALANCE_ADAPTER)
            stack = build_stack_from_slots(
                "talklora", cfg, frozen_stack_slots(frozen), rng
            )
            tc = TrainConfig(seed=seed, **BALANCE_TRAIN)
            train(stack, frozen, data, tc, LossSpec())
            report = routing_load(stack, frozen, data)
            sink.append(report.mean_entropy)
    return BalanceResult(
        seeds=tuple(seeds),
        entropy_talking=tuple(ent_on),
        entropy_ablated=tuple(ent_off),
    )
