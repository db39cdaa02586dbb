"""Time-channel attention over the candidate window.

One step scores every (channel, frame-offset) cell of the window with a
tanh-bounded affine map of the previous decoder state, the previous attention
matrix, the pooled phase differences, and the window content; normalizes the
scores jointly over all cells; and re-weights the window cell-by-cell without
summing anything away.

All flattening is row-major (channel-major, then frame, then feature), fixed
here and relied on everywhere weight shapes appear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .features import CandidateWindow


@dataclass
class AttentionParams:
    """Weights of the energy map, all acting on the right of row vectors.

    w_state: (H, N*l)        previous decoder output -> cell scores
    w_attn:  (N*l, N*l)      flattened previous attention -> cell scores
    w_feat:  (N*l*d, N*l)    flattened window features -> cell scores
    w_phase: (P*l*B, N*l)    flattened pooled phase -> cell scores, or None
    bias:    (N*l,)
    """

    w_state: np.ndarray
    w_attn: np.ndarray
    w_feat: np.ndarray
    w_phase: np.ndarray | None
    bias: np.ndarray


def _check_dim(name: str, expected: int, actual: int) -> None:
    if expected != actual:
        raise ConfigError(f"{name}: expected dim {expected}, got {actual}")


def energy(
    s_prev: np.ndarray,
    attn_prev: np.ndarray,
    window: CandidateWindow,
    params: AttentionParams,
) -> np.ndarray:
    """(N, l) energy matrix, every entry in [-1, 1]."""
    n_channels, n_ctx, _ = window.feats.shape
    cells = n_channels * n_ctx
    _check_dim("w_state rows vs state", params.w_state.shape[0], s_prev.shape[0])
    _check_dim("w_state cols vs window cells", params.w_state.shape[1], cells)
    _check_dim("w_attn rows vs window cells", params.w_attn.shape[0], attn_prev.size)
    _check_dim("w_feat rows vs window features", params.w_feat.shape[0], window.feats.size)
    pre = (
        s_prev @ params.w_state
        + attn_prev.ravel() @ params.w_attn
        + window.feats.ravel() @ params.w_feat
        + params.bias
    )
    if params.w_phase is not None:
        if window.phase is None:
            raise ConfigError("params expect a phase slab but the window has none")
        _check_dim("w_phase rows vs phase slab", params.w_phase.shape[0], window.phase.size)
        pre = pre + window.phase.ravel() @ params.w_phase
    return np.tanh(pre).reshape(n_channels, n_ctx)


def normalize(energies: np.ndarray) -> np.ndarray:
    """Joint softmax over all N*l cells, max-subtracted for stability."""
    flat = energies.ravel()
    exp = np.exp(flat - flat.max())
    return (exp / exp.sum()).reshape(energies.shape)


def reweight(attn: np.ndarray, window: CandidateWindow) -> np.ndarray:
    """(N, l, d) slab scaled per cell; no summation over channels or frames."""
    if attn.shape != window.feats.shape[:2]:
        raise ConfigError(
            f"attention {attn.shape} does not match window cells {window.feats.shape[:2]}"
        )
    return attn[:, :, None] * window.feats


def uniform_attention(n_channels: int, n_ctx: int) -> np.ndarray:
    """The first-step attention matrix: 1/(N*l) everywhere."""
    return np.full((n_channels, n_ctx), 1.0 / (n_channels * n_ctx))


def attend_step(
    s_prev: np.ndarray,
    attn_prev: np.ndarray,
    window: CandidateWindow,
    params: AttentionParams,
) -> tuple[np.ndarray, np.ndarray]:
    """One attention step: returns (attention matrix, flattened re-weighted input)."""
    attn = normalize(energy(s_prev, attn_prev, window, params))
    return attn, reweight(attn, window).ravel()
