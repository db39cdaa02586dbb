"""Frame classifier: simplified LSTM (no peepholes, no gate biases) over the
re-weighted candidate windows, with a softmax output layer.

The LSTM output vector doubles as the conditioning input of the next
attention step, so the forward pass threads two recurrences: the cell/output
state and the attention matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .attend import AttentionParams, attend_step, uniform_attention
from .errors import ConfigError
from .features import FeatureTensor


@dataclass(frozen=True)
class ModelDims:
    """Everything that fixes parameter shapes."""

    channels: int
    context: int = 7
    feat_dim: int = 40
    hidden: int = 64
    classes: int = 10
    phase_bands: int | None = None  # None: phase does not feed the energy map
    attention: bool = True  # False: attention frozen at the uniform matrix

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("need at least one channel")
        if self.context < 1 or self.context % 2 == 0:
            raise ConfigError(f"context must be odd and positive, got {self.context}")

    @property
    def cells(self) -> int:
        return self.channels * self.context

    @property
    def pairs(self) -> int:
        return comb(self.channels, 2)

    @property
    def input_dim(self) -> int:
        return self.channels * self.context * self.feat_dim

    @property
    def phase_dim(self) -> int:
        return 0 if self.phase_bands is None else self.pairs * self.context * self.phase_bands


@dataclass
class LstmParams:
    """Gate weights (input-side and recurrent) plus the output layer.

    Gates carry no biases; the output layer keeps one so class priors stay
    expressible.
    """

    w_xi: np.ndarray
    w_xf: np.ndarray
    w_xc: np.ndarray
    w_xo: np.ndarray
    w_hi: np.ndarray
    w_hf: np.ndarray
    w_hc: np.ndarray
    w_ho: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray


@dataclass
class LstmState:
    c: np.ndarray  # cell vector
    s: np.ndarray  # block output, also the attention conditioning


@dataclass
class ModelParams:
    """All trainable weights; attention is None for frozen-uniform variants."""

    attention: AttentionParams | None
    lstm: LstmParams


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_step(x: np.ndarray, state: LstmState, params: LstmParams) -> LstmState:
    """One recurrence step; the recurrent input is the previous block output."""
    gate_i = _sigmoid(x @ params.w_xi + state.s @ params.w_hi)
    gate_f = _sigmoid(x @ params.w_xf + state.s @ params.w_hf)
    cell = gate_f * state.c + gate_i * np.tanh(x @ params.w_xc + state.s @ params.w_hc)
    gate_o = _sigmoid(x @ params.w_xo + state.s @ params.w_ho)
    return LstmState(c=cell, s=gate_o * np.tanh(cell))


def output_probs(s: np.ndarray, params: LstmParams) -> np.ndarray:
    """Class probabilities from one output vector, max-subtracted softmax."""
    logits = s @ params.w_out + params.b_out
    exp = np.exp(logits - logits.max())
    return exp / exp.sum()


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Per-frame argmax; ties resolve to the lowest index."""
    return np.argmax(probs, axis=1)


def window_indices(n_frames: int, context: int) -> np.ndarray:
    """(T, l) frame indices of every candidate window, edges replicated."""
    half = (context - 1) // 2
    idx = np.arange(n_frames)[:, None] + np.arange(-half, half + 1)[None, :]
    return np.clip(idx, 0, n_frames - 1)


@dataclass
class ForwardTrace:
    """Full per-frame record of one utterance pass.

    probs/attention/cells/outs are the public trace; the remaining arrays are
    the intermediates the backward pass replays.
    """

    probs: np.ndarray  # (T, K)
    attention: np.ndarray  # (T, N, l)
    cells: np.ndarray  # (T, H)
    outs: np.ndarray  # (T, H)
    energies: np.ndarray | None  # (T, N*l) tanh outputs; None when frozen
    gate_i: np.ndarray
    gate_f: np.ndarray
    gate_o: np.ndarray
    gate_g: np.ndarray  # cell candidate tanh
    xhat: np.ndarray  # (T, N*l*d) re-weighted inputs
    feat_windows: np.ndarray  # (T, N, l, d)
    phase_vec: np.ndarray | None  # (T, P*l*B)

    def state_at(self, t: int) -> LstmState:
        return LstmState(c=self.cells[t], s=self.outs[t])


def _as_values(feats) -> np.ndarray:
    return feats.values if isinstance(feats, FeatureTensor) else np.asarray(feats)


def stack_gate_weights(params: LstmParams) -> tuple[np.ndarray, np.ndarray]:
    """Column-stacked gate weights, order (i, f, g, o)."""
    w_x = np.hstack([params.w_xi, params.w_xf, params.w_xc, params.w_xo])
    w_h = np.hstack([params.w_hi, params.w_hf, params.w_hc, params.w_ho])
    return w_x, w_h


def forward_utterance(
    feats,
    phase: np.ndarray | None,
    params: ModelParams,
    dims: ModelDims,
) -> ForwardTrace:
    """Run build-window -> attend -> LSTM -> softmax over every frame.

    feats: (T, N, d) array or FeatureTensor; phase: pooled (T, P, B) array,
    required exactly when dims.phase_bands is set.
    """
    values = _as_values(feats)
    n_frames, n_channels, feat_dim = values.shape
    if (n_channels, feat_dim) != (dims.channels, dims.feat_dim):
        raise ConfigError(
            f"features are {n_channels}x{feat_dim} per frame, "
            f"model expects {dims.channels}x{dims.feat_dim}"
        )
    if (phase is None) != (dims.phase_bands is None):
        raise ConfigError("phase input and dims.phase_bands must be set together")
    if params.attention is None and dims.attention:
        raise ConfigError("dims expect trained attention but params have none")

    idx = window_indices(n_frames, dims.context)
    windows = np.ascontiguousarray(values[idx].transpose(0, 2, 1, 3))  # (T, N, l, d)
    feat_vec = windows.reshape(n_frames, dims.input_dim)
    phase_vec = None
    if phase is not None:
        phase = np.asarray(phase)
        phase_vec = np.ascontiguousarray(phase[idx].transpose(0, 2, 1, 3)).reshape(
            n_frames, dims.phase_dim
        )

    hidden = params.lstm.w_hi.shape[0]
    cells_dim = dims.cells
    att = params.attention
    if att is not None:
        # The window- and phase-dependent energy terms do not depend on the
        # recurrent state, so batch them over all frames up front.
        energy_const = feat_vec @ att.w_feat + att.bias
        if att.w_phase is not None:
            if phase_vec is None:
                raise ConfigError("params expect a phase slab but none was given")
            energy_const = energy_const + phase_vec @ att.w_phase
    w_x_all, w_h_all = stack_gate_weights(params.lstm)

    attention = np.empty((n_frames, n_channels, dims.context))
    energies = np.empty((n_frames, cells_dim)) if att is not None else None
    gate_i = np.empty((n_frames, hidden))
    gate_f = np.empty((n_frames, hidden))
    gate_o = np.empty((n_frames, hidden))
    gate_g = np.empty((n_frames, hidden))
    cell_trace = np.empty((n_frames, hidden))
    out_trace = np.empty((n_frames, hidden))
    xhat = np.empty((n_frames, dims.input_dim))

    s_prev = np.zeros(hidden)
    c_prev = np.zeros(hidden)
    a_prev = uniform_attention(n_channels, dims.context).ravel()
    uniform = a_prev.copy()

    for t in range(n_frames):
        if att is not None:
            e_t = np.tanh(energy_const[t] + s_prev @ att.w_state + a_prev @ att.w_attn)
            energies[t] = e_t
            exp = np.exp(e_t - e_t.max())
            a_t = exp / exp.sum()
        else:
            a_t = uniform
        attention[t] = a_t.reshape(n_channels, dims.context)
        x_t = (a_t[:, None] * feat_vec[t].reshape(cells_dim, feat_dim)).ravel()
        xhat[t] = x_t

        pre = x_t @ w_x_all + s_prev @ w_h_all
        i_t = _sigmoid(pre[:hidden])
        f_t = _sigmoid(pre[hidden : 2 * hidden])
        g_t = np.tanh(pre[2 * hidden : 3 * hidden])
        o_t = _sigmoid(pre[3 * hidden :])
        c_t = f_t * c_prev + i_t * g_t
        s_t = o_t * np.tanh(c_t)

        gate_i[t], gate_f[t], gate_g[t], gate_o[t] = i_t, f_t, g_t, o_t
        cell_trace[t], out_trace[t] = c_t, s_t
        s_prev, c_prev, a_prev = s_t, c_t, a_t

    logits = out_trace @ params.lstm.w_out + params.lstm.b_out
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)

    return ForwardTrace(
        probs=probs,
        attention=attention,
        cells=cell_trace,
        outs=out_trace,
        energies=energies,
        gate_i=gate_i,
        gate_f=gate_f,
        gate_o=gate_o,
        gate_g=gate_g,
        xhat=xhat,
        feat_windows=windows,
        phase_vec=phase_vec,
    )
