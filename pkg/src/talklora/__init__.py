"""Desk-scale laboratory for the LoRA / MoELoRA / TalkLoRA adapter family.

Exact forward and backward math for all three adapter families, synthetic
training workloads, and the analyses that make the family's claims
checkable on a laptop: parameter budgets against published model
geometries, routing-stability certificates, non-expansive communication
audits, degeneracy checks, and routing-load statistics.
"""

from .adapters import (
    AdapterConfig,
    AdapterStack,
    ForwardTrace,
    FrozenLinear,
    LoRAAdapter,
    MoELoRALayer,
    SharedProjectionStore,
    TalkLoRALayer,
    build_adapter_stack,
    build_frozen_stack,
    build_stack_from_slots,
    frozen_stack_slots,
    init_lora,
    init_moelora,
    init_talklora,
    lora_forward,
    lora_merge,
    moelora_forward,
    talking_mix,
    talklora_forward,
)
from .analysis import (
    ParamBudget,
    RoutingLoadReport,
    StabilityCertificate,
    communication_heatmap,
    count_params,
    degeneracy_check,
    nonexpansive_audit,
    routing_balance_experiment,
    routing_load,
    stability_certificate,
)
from .autodiff import (
    AdamWHyper,
    AdamWState,
    LossSpec,
    adamw_step,
    backward,
    finite_difference_oracle,
    gradcheck,
    model_forward,
    stack_adamw_step,
)
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .geometry import ModelGeometry, bundled_geometry, load_geometry
from .linalg import (
    RngState,
    kaiming_init,
    matmul,
    operator_norm_bound_check,
    softmax,
    spectral_norm,
    zero_init,
)
from .tasks import (
    ClusterTaskSpec,
    TrainConfig,
    TrainLog,
    evaluate,
    generate_cluster_task,
    train,
)

__all__ = [
    "AdapterConfig",
    "AdapterStack",
    "AdamWHyper",
    "AdamWState",
    "ClusterTaskSpec",
    "ForwardTrace",
    "FrozenLinear",
    "LoRAAdapter",
    "LossSpec",
    "MoELoRALayer",
    "ModelGeometry",
    "ParamBudget",
    "RngState",
    "RoutingLoadReport",
    "SharedProjectionStore",
    "StabilityCertificate",
    "TalkLoRALayer",
    "TrainConfig",
    "TrainLog",
    "adamw_step",
    "backward",
    "build_adapter_stack",
    "build_frozen_stack",
    "build_stack_from_slots",
    "bundled_geometry",
    "communication_heatmap",
    "count_params",
    "degeneracy_check",
    "evaluate",
    "finite_difference_oracle",
    "frozen_stack_slots",
    "generate_cluster_task",
    "gradcheck",
    "init_lora",
    "init_moelora",
    "init_talklora",
    "kaiming_init",
    "load_checkpoint",
    "load_geometry",
    "lora_forward",
    "lora_merge",
    "matmul",
    "model_forward",
    "moelora_forward",
    "nonexpansive_audit",
    "operator_norm_bound_check",
    "read_header",
    "routing_balance_experiment",
    "routing_load",
    "save_checkpoint",
    "softmax",
    "spectral_norm",
    "stability_certificate",
    "stack_adamw_step",
    "talking_mix",
    "talklora_forward",
    "train",
    "zero_init",
]

__version__ = "0.1.0"
