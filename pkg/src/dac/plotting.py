"""Scatter plots of clustered 2-d datasets as standalone SVG files."""

import numpy as np

from .errors import ContractError

PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
]

_SIZE = 640
_MARGIN = 30


def emit_plot(X, labels, path):
    """Write one SVG scatter, one deterministic color per cluster label."""
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        X = X.reshape(0, 2)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ContractError(f"emit_plot needs [n, 2] data, got shape {X.shape}")
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.size != X.shape[0]:
        raise ContractError(f"{labels.size} labels for {X.shape[0]} points")
    if X.shape[0]:
        lo = X.min(axis=0)
        hi = X.max(axis=0)
        span = np.maximum(hi - lo, 1e-9)
    else:
        lo, span = np.zeros(2), np.ones(2)
    scale = (_SIZE - 2 * _MARGIN) / span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SIZE}" height="{_SIZE}" '
        f'viewBox="0 0 {_SIZE} {_SIZE}">',
        f'<rect width="{_SIZE}" height="{_SIZE}" fill="white"/>',
    ]
    ids = {lab: i for i, lab in enumerate(sorted(set(labels.tolist())))}
    for (x1, x2), lab in zip(X, labels):
        cx = _MARGIN + (x1 - lo[0]) * scale[0]
        cy = _SIZE - _MARGIN - (x2 - lo[1]) * scale[1]  # y grows upward
        color = PALETTE[ids[lab] % len(PALETTE)]
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2.5" fill="{color}"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
