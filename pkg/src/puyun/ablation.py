"""
Architecture strings such as ``768d+(6,6,6,6)@K5+[resize]``.

Grammar::

    spec   := [dim "d+"] [blocks "@"] "K" int ["+[" merge "]"]
    blocks := "(" int "," int "," int "," int ")"
    merge  := "resize" | "pixelshuffle+resize"

Omitted fields inherit from a base spec (by default the first row of the
ablation table), so ``K9`` means "the base architecture with kernel 9".
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import UsageError
from .model import MERGE_MODES, ModelConfig


class AblationParseError(UsageError):
    def __init__(self, text: str, pos: int, msg: str):
        self.text = text
        self.pos = pos
        super().__init__(f"{msg} at position {pos} in {text!r}")


@dataclass(frozen=True)
class AblationSpec:
    embed_dim: int
    blocks: tuple
    kernel_K: int
    merge: str

    def model_config(self, base: Optional[ModelConfig] = None, dim_scale: float = 1.0,
                     block_scale: float = 1.0) -> ModelConfig:
        """Model config for this row, optionally shrunk for desk-scale runs."""
        base = base or ModelConfig()
        dim = max(1, int(round(self.embed_dim * dim_scale)))
        blocks = tuple(max(1, int(round(b * block_scale))) for b in self.blocks)
        return base.with_(embed_dim=dim, blocks_per_stage=blocks, kernel_K=self.kernel_K,
                          merge=self.merge)


ABLATION_ROWS = (
    "768d+(6,6,6,6)@K5+[resize]",
    "K7",
    "K9",
    "K11",
    "K9+[pixelshuffle+resize]",
    "(12,12,12,12)@K9+[pixelshuffle+resize]",
    "1536d+(12,12,12,12)@K9+[pixelshuffle+resize]",
)

BASE_SPEC = AblationSpec(768, (6, 6, 6, 6), 5, "resize")

_INT = re.compile(r"[0-9]+")


def parse_ablation(text: str, base: Optional[AblationSpec] = BASE_SPEC) -> AblationSpec:
    """Parse an architecture string; missing fields come from ``base``."""
    pos = 0
    n = len(text)
    dim = blocks = merge = None

    def expect(s):
        nonlocal pos
        if not text.startswith(s, pos):
            raise AblationParseError(text, pos, f"expected {s!r}")
        pos += len(s)

    def integer():
        nonlocal pos
        m = _INT.match(text, pos)
        if not m:
            raise AblationParseError(text, pos, "expected integer")
        pos = m.end()
        value = int(m.group())
        if value <= 0:
            raise AblationParseError(text, m.start(), "integer must be positive")
        return value

    m = _INT.match(text, pos)
    if m and m.end() < n and text[m.end()] == "d":
        dim = integer()
        expect("d+")
    if pos < n and text[pos] == "(":
        expect("(")
        vals = [integer()]
        for _ in range(3):
            expect(",")
            vals.append(integer())
        expect(")")
        expect("@")
        blocks = tuple(vals)
    expect("K")
    k = integer()
    if pos < n:
        expect("+[")
        end = text.find("]", pos)
        if end < 0:
            raise AblationParseError(text, pos, "unterminated merge mode")
        merge = text[pos:end]
        if merge not in MERGE_MODES:
            raise AblationParseError(text, pos, f"unknown merge mode {merge!r}")
        pos = end + 1
    if pos != n:
        raise AblationParseError(text, pos, "trailing characters")
    if base is None and (dim is None or blocks is None or merge is None):
        raise AblationParseError(text, 0, "incomplete spec and no base to inherit from")
    return AblationSpec(
        dim if dim is not None else base.embed_dim,
        blocks if blocks is not None else base.blocks,
        k,
        merge if merge is not None else base.merge,
    )


def render_ablation(spec: AblationSpec, base: Optional[AblationSpec] = None) -> str:
    """Inverse of :func:`parse_ablation`; with ``base`` only differing fields are written."""
    parts = ""
    if base is None or spec.embed_dim != base.embed_dim:
        parts += f"{spec.embed_dim}d+"
    if base is None or spec.blocks != base.blocks:
        parts += "(" + ",".join(str(b) for b in spec.blocks) + ")@"
    parts += f"K{spec.kernel_K}"
    if base is None or spec.merge != base.merge:
        parts += f"+[{spec.merge}]"
    return parts


def ablation_specs() -> list:
    return [parse_ablation(s) for s in ABLATION_ROWS]


REPORT_CHANNELS = ("z@500", "2t", "10u", "msl")


def run_ablation(specs, dataset, train_config, base_config=None, dim_scale: float = 1.0,
                 block_scale: float = 1.0, split: str = "test", stride: int = 4):
    """Train each architecture and score one-step RMSE on ``split``.

    Returns ``(columns, rows)`` where each row is ``(label, [rmse per column])``
    in the order the specs were given. ``specs`` is a list of strings; delta
    strings inherit from the first row's base.
    """
    from .evaluation import rmse, truth_windows
    from .forecast import rollout
    from .training import pretrain_single_step

    base_config = base_config or ModelConfig(variables=dataset.variables, grid=dataset.grid)
    names = dataset.variables.channel_names
    columns = [c for c in REPORT_CHANNELS if c in names] or list(names)
    idx = [names.index(c) for c in columns]
    times = dataset.split_range(split)
    inits = list(range(times.start + 1, times.stop - 1, stride))
    truths = truth_windows(dataset, inits, 1)
    rows = []
    for text in specs:
        spec = parse_ablation(text)
        cfg = spec.model_config(base_config, dim_scale, block_scale)
        params, _ = pretrain_single_step(dataset, cfg, train_config)
        preds = np.stack([rollout(params, (dataset.state(t - 1), dataset.state(t)), 1, cfg).values
                          for t in inits])
        scores = rmse(preds, truths, dataset.grid)[:, 0]
        rows.append((text, [float(scores[i]) for i in idx]))
    return columns, rows
