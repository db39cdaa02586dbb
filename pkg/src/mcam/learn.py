"""Training engine: cross-entropy loss, exact reverse-mode gradients through
the unrolled attention+LSTM recurrences, global-norm clipping, and plain SGD
with the step-decay schedule.

Two signals recur backward through time: the gradient of the block output
(which feeds both the next LSTM step and the next energy map) and the
gradient of the attention matrix (which feeds the next energy map).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .acoustic import (
    ForwardTrace,
    LstmParams,
    ModelDims,
    ModelParams,
    forward_utterance,
    predict_labels,
    stack_gate_weights,
)
from .attend import AttentionParams, uniform_attention
from .errors import ConfigError, NumericalError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.4
    decay_factor: float = 0.5
    decay_after_epoch: int = 2
    clip_norm: float = 1.0
    epochs: int = 5
    init_range: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must be in (0, 1]")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.init_range <= 0:
            raise ConfigError("init_range must be positive")


@dataclass
class Utterance:
    """One training example: features, pooled phase (optional), frame labels."""

    feats: np.ndarray  # (T, N, d)
    phase: np.ndarray | None  # (T, P, B) pooled
    labels: np.ndarray  # (T,)


@dataclass
class Dataset:
    train: list[Utterance]
    dev: list[Utterance]


@dataclass
class GradientSet:
    """Same layout as ModelParams; every block mirrors a weight block."""

    attention: AttentionParams | None
    lstm: LstmParams


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_accuracy: float
    learning_rate: float


def param_items(params: ModelParams | GradientSet) -> list[tuple[str, np.ndarray]]:
    """Named parameter blocks in a fixed order (checkpoints, clipping, tests)."""
    items: list[tuple[str, np.ndarray]] = []
    att = params.attention
    if att is not None:
        items.append(("attention.w_state", att.w_state))
        items.append(("attention.w_attn", att.w_attn))
        items.append(("attention.w_feat", att.w_feat))
        if att.w_phase is not None:
            items.append(("attention.w_phase", att.w_phase))
        items.append(("attention.bias", att.bias))
    lstm = params.lstm
    for name in ("w_xi", "w_xf", "w_xc", "w_xo", "w_hi", "w_hf", "w_hc", "w_ho", "w_out", "b_out"):
        items.append((f"lstm.{name}", getattr(lstm, name)))
    return items


def init_params(dims: ModelDims, init_range: float = 0.03, seed=0) -> ModelParams:
    """Every weight i.i.d. uniform(-init_range, init_range), one seeded stream.

    seed may be an int or an already-seeded numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def draw(*shape):
        return rng.uniform(-init_range, init_range, size=shape)

    attention = None
    if dims.attention:
        attention = AttentionParams(
            w_state=draw(dims.hidden, dims.cells),
            w_attn=draw(dims.cells, dims.cells),
            w_feat=draw(dims.input_dim, dims.cells),
            w_phase=draw(dims.phase_dim, dims.cells) if dims.phase_bands else None,
            bias=draw(dims.cells),
        )
    lstm = LstmParams(
        w_xi=draw(dims.input_dim, dims.hidden),
        w_xf=draw(dims.input_dim, dims.hidden),
        w_xc=draw(dims.input_dim, dims.hidden),
        w_xo=draw(dims.input_dim, dims.hidden),
        w_hi=draw(dims.hidden, dims.hidden),
        w_hf=draw(dims.hidden, dims.hidden),
        w_hc=draw(dims.hidden, dims.hidden),
        w_ho=draw(dims.hidden, dims.hidden),
        w_out=draw(dims.hidden, dims.classes),
        b_out=draw(dims.classes),
    )
    return ModelParams(attention=attention, lstm=lstm)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean per-frame negative log probability of the true label."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ConfigError(
            f"labels must be in 0..{probs.shape[1] - 1}, got range "
            f"{labels.min()}..{labels.max()}"
        )
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def backward(
    utt: Utterance, params: ModelParams, dims: ModelDims
) -> tuple[float, GradientSet]:
    """Loss and exact gradients for one utterance (recomputes the forward pass)."""
    trace = forward_utterance(utt.feats, utt.phase, params, dims)
    loss, grads = backward_from_trace(trace, utt.labels, params, dims)
    return loss, grads


def backward_from_trace(
    trace: ForwardTrace, labels: np.ndarray, params: ModelParams, dims: ModelDims
) -> tuple[float, GradientSet]:
    labels = np.asarray(labels)
    n_frames = trace.probs.shape[0]
    if len(labels) != n_frames:
        raise ConfigError(f"{len(labels)} labels for {n_frames} frames")
    loss = cross_entropy(trace.probs, labels)

    hidden = trace.cells.shape[1]
    picked = trace.probs[np.arange(n_frames), labels]
    dlogits = trace.probs.copy()
    dlogits[np.arange(n_frames), labels] -= 1.0
    dlogits /= n_frames
    dlogits[picked < PROB_FLOOR] = 0.0  # the loss floor cuts these frames off

    lstm = params.lstm
    d_w_out = trace.outs.T @ dlogits
    d_b_out = dlogits.sum(axis=0)
    ds_from_out = dlogits @ lstm.w_out.T

    att = params.attention
    trainable_attention = att is not None
    w_x_all, w_h_all = stack_gate_weights(lstm)
    cells_dim = dims.cells
    feat_dim = dims.feat_dim

    du = np.empty((n_frames, 4 * hidden))
    dz = np.empty((n_frames, cells_dim)) if trainable_attention else None
    ds_next = np.zeros(hidden)
    dc_next = np.zeros(hidden)
    da_next = np.zeros(cells_dim)
    gi, gf, gg, go = trace.gate_i, trace.gate_f, trace.gate_g, trace.gate_o
    for t in range(n_frames - 1, -1, -1):
        ds = ds_from_out[t] + ds_next
        tanh_c = np.tanh(trace.cells[t])
        d_o = ds * tanh_c
        dc = ds * go[t] * (1.0 - tanh_c**2) + dc_next
        c_prev = trace.cells[t - 1] if t > 0 else 0.0
        d_i = dc * gg[t]
        d_f = dc * c_prev
        d_g = dc * gi[t]
        dc_next = dc * gf[t]
        du_t = du[t]
        du_t[:hidden] = d_i * gi[t] * (1.0 - gi[t])
        du_t[hidden : 2 * hidden] = d_f * gf[t] * (1.0 - gf[t])
        du_t[2 * hidden : 3 * hidden] = d_g * (1.0 - gg[t] ** 2)
        du_t[3 * hidden :] = d_o * go[t] * (1.0 - go[t])
        dxhat = du_t @ w_x_all.T
        ds_prev = du_t @ w_h_all.T
        if trainable_attention:
            # reweight: each cell's weight scales d feature values of the window
            da = (
                dxhat.reshape(cells_dim, feat_dim) * trace.feat_windows[t].reshape(cells_dim, feat_dim)
            ).sum(axis=1)
            da += da_next
            a_t = trace.attention[t].ravel()
            de = a_t * (da - da @ a_t)  # joint softmax backward
            dz[t] = de * (1.0 - trace.energies[t] ** 2)
            ds_prev = ds_prev + dz[t] @ att.w_state.T
            da_next = dz[t] @ att.w_attn.T
        ds_next = ds_prev

    d_x_all = trace.xhat.T @ du
    outs_prev = np.vstack([np.zeros((1, hidden)), trace.outs[:-1]])
    d_h_all = outs_prev.T @ du

    grad_attention = None
    if trainable_attention:
        feat_vec = trace.feat_windows.reshape(n_frames, dims.input_dim)
        attn_prev = np.empty((n_frames, cells_dim))
        attn_prev[0] = uniform_attention(dims.channels, dims.context).ravel()
        attn_prev[1:] = trace.attention[:-1].reshape(n_frames - 1, cells_dim)
        grad_attention = AttentionParams(
            w_state=outs_prev.T @ dz,
            w_attn=attn_prev.T @ dz,
            w_feat=feat_vec.T @ dz,
            w_phase=trace.phase_vec.T @ dz if att.w_phase is not None else None,
            bias=dz.sum(axis=0),
        )

    grad_lstm = LstmParams(
        w_xi=d_x_all[:, :hidden],
        w_xf=d_x_all[:, hidden : 2 * hidden],
        w_xc=d_x_all[:, 2 * hidden : 3 * hidden],
        w_xo=d_x_all[:, 3 * hidden :],
        w_hi=d_h_all[:, :hidden],
        w_hf=d_h_all[:, hidden : 2 * hidden],
        w_hc=d_h_all[:, 2 * hidden : 3 * hidden],
        w_ho=d_h_all[:, 3 * hidden :],
        w_out=d_w_out,
        b_out=d_b_out,
    )
    grads = GradientSet(attention=grad_attention, lstm=grad_lstm)
    for name, block in param_items(grads):
        if not np.isfinite(block).all():
            raise NumericalError(f"non-finite gradient in {name}")
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    return loss, grads


def global_norm(grads: GradientSet) -> float:
    total = 0.0
    for _, block in param_items(grads):
        total += float(np.sum(block * block))
    return float(np.sqrt(total))


def clip_gradients(grads: GradientSet, max_norm: float = 1.0) -> GradientSet:
    """Scale all blocks jointly so the global L2 norm is at most max_norm.

    Mutates and returns grads; direction is preserved exactly.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for _, block in param_items(grads):
            block *= scale
    return grads


def sgd_step(params: ModelParams, grads: GradientSet, learning_rate: float) -> ModelParams:
    """In-place p <- p - lr * g over every block; returns params."""
    for (_, p_block), (_, g_block) in zip(param_items(params), param_items(grads)):
        p_block -= learning_rate * g_block
    return params


def frame_accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ConfigError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ConfigError("cannot score empty sequences")
    return float(np.mean(preds == labels))


def evaluate_frames(
    utts: list[Utterance], params: ModelParams, dims: ModelDims
) -> tuple[float, float]:
    """(frame accuracy, mean loss) over a list of utterances."""
    correct = 0
    total = 0
    losses = []
    for utt in utts:
        trace = forward_utterance(utt.feats, utt.phase, params, dims)
        preds = predict_labels(trace.probs)
        correct += int(np.sum(preds == utt.labels))
        total += len(utt.labels)
        losses.append(cross_entropy(trace.probs, utt.labels))
    return correct / total, float(np.mean(losses))


def epoch_learning_rate(config: TrainConfig, epoch: int) -> float:
    """Constant until decay_after_epoch, then multiplied by decay_factor per epoch."""
    return config.learning_rate * config.decay_factor ** max(0, epoch - config.decay_after_epoch)


def train(
    dataset: Dataset, dims: ModelDims, config: TrainConfig
) -> tuple[ModelParams, list[EpochStats]]:
    """SGD over shuffled utterances; returns the best-dev params and history.

    The whole run is a pure function of (dataset, dims, config): one PCG64
    stream seeded by config.seed drives both init and the epoch shuffles.
    """
    config.validate()
    if not dataset.train or not dataset.dev:
        raise ConfigError("dataset needs non-empty train and dev splits")
    rng = np.random.default_rng(config.seed)
    params = init_params(dims, config.init_range, rng)
    history: list[EpochStats] = []
    best_accuracy = -1.0
    best_params = copy.deepcopy(params)
    for epoch in range(1, config.epochs + 1):
        lr = epoch_learning_rate(config, epoch)
        order = rng.permutation(len(dataset.train))
        losses = np.empty(len(order))
        for pos, utt_idx in enumerate(order):
            try:
                loss, grads = backward(dataset.train[utt_idx], params, dims)
            except NumericalError as err:
                raise NumericalError(
                    f"diverged at epoch {epoch}, utterance {utt_idx}: {err}"
                ) from err
            clip_gradients(grads, config.clip_norm)
            sgd_step(params, grads, lr)
            losses[pos] = loss
        dev_accuracy, _ = evaluate_frames(dataset.dev, params, dims)
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=float(losses.mean()),
                dev_accuracy=dev_accuracy,
                learning_rate=lr,
            )
        )
        if dev_accuracy > best_accuracy:
            best_accuracy = dev_accuracy
            best_params = copy.deepcopy(params)
    return best_params, history
