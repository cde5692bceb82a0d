"""Analytic trainable-parameter counts from architecture shapes alone."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .quant import QuantSpec


@dataclass(frozen=True)
class ArchShape:
    n_layers: int
    d_model: int
    ffn_hidden: int
    vocab_size: int = 32000

    def linear_shapes(self) -> list[tuple[str, int, int]]:
        """(name, C_out, C_in) for every q, k, v, o, gate, up, down projection."""
        d, f = self.d_model, self.ffn_hidden
        per_layer = [("q", d, d), ("k", d, d), ("v", d, d), ("o", d, d),
                     ("gate", f, d), ("up", f, d), ("down", d, f)]
        return [(f"layers.{i}.{kind}", co, ci) for i in range(self.n_layers) for kind, co, ci in per_layer]

    @property
    def total_params(self) -> int:
        """Projections, two norm gains per layer, final norm, untied embedding and head."""
        d, f = self.d_model, self.ffn_hidden
        per_layer = 4 * d * d + 3 * d * f + 2 * d
        return self.n_layers * per_layer + 2 * self.vocab_size * d + d


SHAPE_CATALOG: dict[str, ArchShape] = {
    "llama-7b": ArchShape(32, 4096, 11008),
    "llama-13b": ArchShape(40, 5120, 13824),
    "llama2-7b": ArchShape(32, 4096, 11008),
    "llama2-13b": ArchShape(40, 5120, 13824),
}


@dataclass(frozen=True)
class ParamAudit:
    groups: int
    count_sb: int
    count_m: int
    count_AB: int
    total: int

    @property
    def count_mAB(self) -> int:
        return self.count_m + self.count_AB

    @property
    def fraction_of_total(self) -> float:
        return self.count_mAB / self.total

    def as_dict(self) -> dict:
        out = asdict(self)
        out["count_mAB"] = self.count_mAB
        out["fraction_of_total"] = self.fraction_of_total
        return out


def audit_shapes(shapes, spec: QuantSpec, rank: int, total: int | None = None) -> ParamAudit:
    """Count s/b, m and LoRA parameters for (name, C_out, C_in) linear shapes."""
    groups = sum(spec.n_groups(c_out, c_in) for _, c_out, c_in in shapes)
    ab = sum(rank * (c_in + c_out) for _, c_out, c_in in shapes)
    if total is None:
        total = sum(c_out * c_in for _, c_out, c_in in shapes)
    return ParamAudit(groups=groups, count_sb=2 * groups, count_m=groups, count_AB=ab, total=total)


def audit_params(arch: str | ArchShape, spec: QuantSpec, rank: int = 16) -> ParamAudit:
    if isinstance(arch, str):
        try:
            arch = SHAPE_CATALOG[arch]
        except KeyError:
            known = ", ".join(sorted(SHAPE_CATALOG))
            raise KeyError(f"unknown architecture {arch!r}; known: {known}") from None
    return audit_shapes(arch.linear_shapes(), spec, rank, arch.total_params)
