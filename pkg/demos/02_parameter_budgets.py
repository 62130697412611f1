"""Parameter budgets of each method over published model geometries.

Reproduces the trainable-parameter share column reported for LoRA and
TalkLoRA on Qwen2.5-7B, LLaMA2-7B and LLaMA3-8B, and shows where
TalkLoRA's savings come from (shared B plus tiny E/C/router additions).
"""

from talklora import AdapterConfig, bundled_geometry, count_params

TARGETS = {"Q", "K", "V", "Up", "Down"}

print(f"{'geometry':12s} {'method':9s} {'rank':>4s} {'experts':>7s} "
      f"{'trainable':>12s} {'share %':>8s}")
print("-" * 60)
for geom_name in ("qwen2.5-7b", "llama2-7b", "llama3-8b"):
    geom = bundled_geometry(geom_name)
    for method, rank, experts in [
        ("lora", 16, 1), ("lora", 32, 1),
        ("talklora", 16, 4), ("talklora", 32, 4),
    ]:
        cfg = AdapterConfig(total_rank=rank, experts=experts,
                            lora_alpha=float(rank))
        budget = count_params(geom, method, cfg, TARGETS)
        print(f"{geom.name:12s} {method:9s} {rank:4d} {experts:7d} "
              f"{budget.trainable:12,d} {budget.percent:8.3f}")
    print()

print("Where TalkLoRA r=32 n=4 on LLaMA3-8B spends its budget:")
geom = bundled_geometry("llama3-8b")
budget = count_params(
    geom, "talklora", AdapterConfig(total_rank=32, experts=4), TARGETS
)
for role, count in sorted(budget.breakdown.items()):
    print(f"  {role:3s}: {count:12,d}  ({100 * count / budget.trainable:5.1f}% "
          f"of trainable)")
print("\nSharing B across the 32 layers is what roughly halves the budget")
print("relative to LoRA at the same total rank; E, C and the router cost")
print("almost nothing at this scale.")

lora = count_params(geom, "lora", AdapterConfig(total_rank=32, experts=1), TARGETS)
print(f"\nTalkLoRA/LoRA share at r=32: {budget.percent / lora.percent:.3f} "
      f"({budget.percent:.2f}% vs {lora.percent:.2f}%)")
