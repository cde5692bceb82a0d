"""Trainable-parameter counts for LLaMA shapes, computed from shapes alone."""

from dlqat.audit import SHAPE_CATALOG, audit_params
from dlqat.quant import QuantSpec

print(f"{'arch':<11}{'granularity':<13}{'groups':>12}{'s,b':>12}{'m,A,B':>12}{'fraction':>10}")
for arch in ("llama-7b", "llama-13b"):
    for label, group in (("per-channel", None), ("g128", 128)):
        a = audit_params(arch, QuantSpec(4, group), rank=16)
        print(f"{arch:<11}{label:<13}{a.groups / 1e6:>11.2f}M{a.count_sb / 1e6:>11.2f}M"
              f"{a.count_mAB / 1e6:>11.2f}M{a.fraction_of_total:>10.3%}")
print("\ntotal parameters:", {k: f"{v.total_params / 1e9:.2f}G" for k, v in SHAPE_CATALOG.items()})
