"""Whole-network parameter/MAC accounting and reconciliation against the reference counts.

Two independent routes produce every total: enumeration of the built graph
and closed-form arithmetic over the config. ``audit`` compares them per
sub-structure and raises on any difference.

The reference table lists e.g. 97.7M parameters for the 8-stack baseline.
The numbers line up with the float32 storage size in MiB
(``params * 4 / 2**20``) of the width-256 networks, not with raw counts;
the report shows both readings.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

from . import blocks as B
from .errors import ConsistencyError
from .hourglass import REFERENCE_PARAMS_M, PRESETS, NetworkConfig, StackedHourglass, build_network, with_width

BYTES_PER_PARAM = 4
MIB = 2 ** 20


def mib(params: int) -> float:
    return params * BYTES_PER_PARAM / MIB


def _groups(i: int) -> Dict[str, str]:
    return {"hg": f"stacks.{i}.hourglass", "res": f"stacks.{i}.post_block",
            "fc": f"stacks.{i}.head", "score": f"stacks.{i}.head",
            "fc_": f"stacks.{i}.remap", "score_": f"stacks.{i}.remap"}


def enumerated_breakdown(net: StackedHourglass) -> Dict[str, int]:
    """Parameter totals per sub-structure, read off the built graph."""
    out = {"stem": net.children["stem"].num_parameters()}
    for i in range(net.config.num_stacks):
        names = _groups(i)
        for child, layer in net.stack(i).children.items():
            key = names[child]
            out[key] = out.get(key, 0) + layer.num_parameters()
    return out


def closed_form_breakdown(cfg: NetworkConfig) -> Dict[str, int]:
    c, j, s0 = cfg.hg_channels, cfg.num_joints, cfg.stem_width
    blk = B.block_param_closed_form
    out = {"stem": 3 * s0 * 49 + 2 * s0 + sum(blk(spec) for _, spec in cfg.stem_blocks())}
    per_hg = (3 * cfg.hg_depth + 1) * cfg.blocks_per_scale * blk(cfg.block(c, c))
    for i in range(cfg.num_stacks):
        out[f"stacks.{i}.hourglass"] = per_hg
        out[f"stacks.{i}.post_block"] = blk(cfg.block(c, c))
        out[f"stacks.{i}.head"] = (c * c + 2 * c) + (c * j + j)
        if i < cfg.num_stacks - 1:
            out[f"stacks.{i}.remap"] = (c * c + c) + (j * c + c)
    return out


def closed_form_macs(cfg: NetworkConfig) -> int:
    c, j, s0 = cfg.hg_channels, cfg.num_joints, cfg.stem_width
    blk = B.block_mac_closed_form
    r2, r4 = cfg.input_res // 2, cfg.input_res // 4
    (_, res1), (_, res2), (_, res3) = cfg.stem_blocks()
    total = r2 * r2 * s0 * 3 * 49 + blk(res1, r2, r2) + blk(res2, r4, r4) + blk(res3, r4, r4)
    spec = cfg.block(c, c)
    hg = 0
    for level in range(cfg.hg_depth):
        r = r4 >> level
        hg += blk(spec, r, r) + 2 * blk(spec, r // 2, r // 2)
    r = r4 >> cfg.hg_depth
    hg += blk(spec, r, r)
    hg *= cfg.blocks_per_scale
    px = r4 * r4
    per_stack = hg + blk(spec, r4, r4) + px * (c * c + c * j)
    remap = px * (c * c + j * c)
    return total + cfg.num_stacks * per_stack + (cfg.num_stacks - 1) * remap


@dataclass
class Audit:
    config: NetworkConfig
    params: int
    closed_form_params: int
    macs: int
    closed_form_macs: int
    breakdown: Dict[str, int]

    @property
    def consistent(self) -> bool:
        return self.params == self.closed_form_params and self.macs == self.closed_form_macs


def audit(cfg: NetworkConfig, strict: bool = True) -> Audit:
    """Builds ``cfg`` (uninitialized) and cross-checks both counting routes."""
    net = build_network(cfg, seed=None)
    enum = enumerated_breakdown(net)
    closed = closed_form_breakdown(cfg)
    macs = net.trace((1, 3, cfg.input_res, cfg.input_res))[1]
    result = Audit(cfg, net.num_parameters(), sum(closed.values()), macs, closed_form_macs(cfg), enum)
    if strict:
        diff = {k: (enum.get(k), closed.get(k)) for k in set(enum) | set(closed) if enum.get(k) != closed.get(k)}
        if diff or not result.consistent:
            raise ConsistencyError(f"enumeration and closed form disagree for {cfg}: {diff or result}")
    return result


@dataclass
class ReconRow:
    name: str
    reference: float
    params: Dict[int, int]
    breakdown: Dict[int, Dict[str, int]] = field(default_factory=dict)
    consistent: bool = True

    def value_mib(self, width: int) -> float:
        return mib(self.params[width])

    def dev_mib(self, width: int) -> float:
        return 100.0 * (self.value_mib(width) / self.reference - 1)

    def dev_raw(self, width: int) -> float:
        return 100.0 * (self.params[width] / 1e6 / self.reference - 1)

    def best_width(self) -> int:
        return min(self.params, key=lambda w: abs(self.dev_mib(w)))


def reconcile_reference(widths: Sequence[int] = (128, 256)) -> List[ReconRow]:
    rows = []
    for name, cfg in PRESETS.items():
        row = ReconRow(name, REFERENCE_PARAMS_M[name], {})
        for w in widths:
            a = audit(with_width(cfg, w), strict=False)
            row.params[w] = a.params
            row.breakdown[w] = a.breakdown
            row.consistent &= a.consistent and a.params == sum(closed_form_breakdown(a.config).values())
        rows.append(row)
    return rows


def ordering_matches(rows: Sequence[ReconRow], width: int) -> bool:
    by_reference = [r.name for r in sorted(rows, key=lambda r: r.reference)]
    by_ours = [r.name for r in sorted(rows, key=lambda r: r.params[width])]
    return by_reference == by_ours


def itemize(row: ReconRow, width: int) -> List[str]:
    """Per-sub-structure share of a row's count, in float32 MiB."""
    bd = row.breakdown[width]
    merged: Dict[str, int] = {}
    for key, n in bd.items():
        part = key.split(".")[-1]
        merged[part] = merged.get(part, 0) + n
    total = sum(merged.values())
    return [f"{part}={mib(n):.3f}MiB ({100.0 * n / total:.1f}%)" for part, n in merged.items()]


def format_reconciliation(rows: Sequence[ReconRow]) -> str:
    widths = sorted(rows[0].params)
    head = ["config", "reference"]
    for w in widths:
        head += [f"params@{w}", f"MiB@{w}", f"dev%@{w}", f"rawdev%@{w}"]
    head += ["best_width", "audit"]
    lines = ["\t".join(head)]
    for r in rows:
        cells = [r.name, f"{r.reference:.1f}"]
        for w in widths:
            cells += [str(r.params[w]), f"{r.value_mib(w):.2f}", f"{r.dev_mib(w):+.1f}", f"{r.dev_raw(w):+.1f}"]
        cells += [str(r.best_width()), "ok" if r.consistent else "MISMATCH"]
        lines.append("\t".join(cells))
    lines.append("")
    for w in widths:
        lines.append(f"ordering@{w}: {'match' if ordering_matches(rows, w) else 'MISMATCH'}")
    lines.append("")
    lines.append("residual deviation by sub-structure (best width):")
    for r in rows:
        w = r.best_width()
        lines.append(f"{r.name}@{w} ({r.dev_mib(w):+.1f}%): " + ", ".join(itemize(r, w)))
    return "\n".join(lines) + "\n"
