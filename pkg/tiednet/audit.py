"""
Parameter and multiply-accumulate auditing.

Parameters are counted over DISTINCT Parameter objects, so a tied or
stage-shared matrix contributes its entries once no matter how many layers
read it. MACs follow the profiler convention: a [m×k]·[k×n] product is
m·k·n MACs, a convolution N·C_out·H'·W'·C_in·kh·kw, attention adds
B·h·T²·(d/h) for QK^T and again for AV; norms, activations, softmax, biases
and pooling are free.
"""
import json
from collections import Counter
from typing import Dict, List, Optional

import pandas as pd
from pydantic import BaseModel

from .logger import get_logger

logger = get_logger(__name__)

MAC_UNIT = 'GMACs (reported as FLOPs, the usual ViT/ResNet convention)'


class LayerAudit(BaseModel):
    name: str
    params: int
    matrix_params: int
    macs: int
    shared: bool


class AuditReport(BaseModel):
    """
    Totals and per-layer rows of one model audit.

    `resolution` is None for a parameter-only audit; `total_macs` and every
    row's `macs` are then 0.
    """
    total_params: int
    total_macs: int
    resolution: Optional[int]
    layers: List[LayerAudit]
    groups: Dict[str, int]
    policy: str
    unit: str = MAC_UNIT
    family: str
    variant: str
    config: dict

    def to_json(self):
        return json.dumps(self.model_dump(), indent=2, allow_nan=False)

    def to_frame(self):
        return pd.DataFrame([layer.model_dump() for layer in self.layers])

    def to_text(self):
        frame = self.to_frame()
        frame['name'] = [
            f'{row.name} (shared)' if row.shared else row.name for row in self.layers
        ]
        frame = frame.drop(columns=['shared'])
        lines = [
            f'model: {self.family}-{self.variant}',
            f'policy: {self.policy}',
            frame.to_string(index=False),
            f'total params: {self.total_params:,} ({self.total_params / 1e6:.2f}M)',
        ]
        if self.resolution is not None:
            lines.append(
                f'total MACs @ {self.resolution}x{self.resolution}: '
                f'{self.total_macs:,} ({self.total_macs / 1e9:.3f} {self.unit})'
            )
        return '\n'.join(lines)


def _distinct(params):
    unique = {}
    for param in params:
        unique.setdefault(id(param), param)
    return list(unique.values())


def param_count(module):
    """Entries of the distinct Parameters reachable from any module."""
    return sum(p.size for p in _distinct(module.parameters()))


def _audit(model, resolution):
    if resolution is None:
        rows = [(name, module, 0) for name, module in model.layer_rows()]
    else:
        rows = list(model.profile_rows(resolution))

    row_params = [_distinct(module.parameters()) for _, module, _ in rows]
    # How many rows read each Parameter.
    readers = Counter(id(param) for params in row_params for param in params)

    layers = []
    groups = {}
    for (name, _, macs), params in zip(rows, row_params):
        layers.append(LayerAudit(
            name=name,
            params=sum(p.size for p in params),
            matrix_params=sum(p.size for p in params if len(p.dims) >= 2),
            macs=int(macs),
            shared=any(readers[id(p)] > 1 for p in params),
        ))
        group = groups.setdefault(name.split('.')[0], {})
        group.update((id(p), p) for p in params)

    total_params = param_count(model)
    covered = sum(p.size for p in _distinct(p for params in row_params for p in params))
    if covered != total_params:
        logger.warning(f'audit rows cover {covered:,} of {total_params:,} parameters')

    cfg = model.config
    return AuditReport(
        total_params=total_params,
        total_macs=sum(layer.macs for layer in layers),
        resolution=resolution,
        layers=layers,
        groups={name: sum(p.size for p in members.values()) for name, members in groups.items()},
        policy=model.tying_policy(),
        family=cfg.family,
        variant=cfg.variant,
        config=cfg.model_dump(mode='json'),
    )


def count_params(model):
    """
    Counts parameters of a built model.

    Args:
        model (Model): The model to audit.

    Returns:
        AuditReport: Totals and rows with `macs` left at 0 and no resolution.
    """
    return _audit(model, None)


def count_macs(model, resolution=None):
    """
    Counts parameters and the MACs of one forward pass on a single image.

    Args:
        model (Model): The model to audit.
        resolution (int, optional): Square input side; the configured
            image size when omitted.

    Returns:
        AuditReport: The full report.
    """
    resolution = model.config.image_size if resolution is None else resolution
    return _audit(model, resolution)


class Comparison(BaseModel):
    """
    Side-by-side summary of two audits (b relative to a). A ratio is None
    when its reference total is 0.
    """
    a: str
    b: str
    params_a: int
    params_b: int
    params_ratio: Optional[float]
    macs_a: int
    macs_b: int
    macs_ratio: Optional[float]
    group_ratios: Dict[str, Optional[float]]
    layers: List[dict]

    def to_json(self):
        return json.dumps(self.model_dump(), indent=2, allow_nan=False)

    def to_text(self):
        frame = pd.DataFrame(self.layers)
        lines = [
            f'a: {self.a}',
            f'b: {self.b}',
            f'params: {self.params_a:,} -> {self.params_b:,}',
            f'params ratio: {_fmt_ratio(self.params_ratio)}',
            f'macs: {self.macs_a:,} -> {self.macs_b:,}',
            f'macs ratio: {_fmt_ratio(self.macs_ratio)}',
        ]
        lines.extend(f'{group} params ratio: {_fmt_ratio(ratio)}'
                     for group, ratio in self.group_ratios.items())
        if not frame.empty:
            lines.append(frame.to_string(index=False))
        return '\n'.join(lines)


def _ratio(numerator, denominator):
    # None (JSON null) when the reference total is 0, e.g. MACs of a params-only audit.
    return numerator / denominator if denominator else None


def _fmt_ratio(ratio):
    return 'n/a' if ratio is None else f'{ratio:.3f}'


def compare_report(a, b):
    """
    Compares two audit reports.

    Args:
        a (AuditReport): The reference (usually the baseline).
        b (AuditReport): The candidate (usually the pe variant).

    Returns:
        Comparison: Totals, ratios (b / a) overall and per common group,
            and per-layer differences on the union of layer names.
    """
    if a.family != b.family:
        logger.warning(f'comparing different families: {a.family} vs {b.family}')

    left = a.to_frame()[['name', 'params', 'macs']]
    right = b.to_frame()[['name', 'params', 'macs']]
    merged = left.merge(right, on='name', how='outer', suffixes=('_a', '_b'), sort=False)
    order = list(left['name']) + [name for name in right['name'] if name not in set(left['name'])]
    merged = merged.set_index('name').loc[order].reset_index()
    merged = merged.fillna(0)
    for column in ('params_a', 'params_b', 'macs_a', 'macs_b'):
        merged[column] = merged[column].astype('int64')
    merged['params_diff'] = merged['params_b'] - merged['params_a']
    merged['macs_diff'] = merged['macs_b'] - merged['macs_a']
    merged = merged[['name', 'params_a', 'params_b', 'params_diff',
                     'macs_a', 'macs_b', 'macs_diff']]

    common = [group for group in a.groups if group in b.groups]
    return Comparison(
        a=f'{a.family}-{a.variant}',
        b=f'{b.family}-{b.variant}',
        params_a=a.total_params,
        params_b=b.total_params,
        params_ratio=_ratio(b.total_params, a.total_params),
        macs_a=a.total_macs,
        macs_b=b.total_macs,
        macs_ratio=_ratio(b.total_macs, a.total_macs),
        group_ratios={g: _ratio(b.groups[g], a.groups[g]) for g in common},
        layers=[
            {key: (value.item() if hasattr(value, 'item') else value)
             for key, value in row.items()}
            for row in merged.to_dict(orient='records')
        ],
    )
