"""Lightweight recurrent risk head over descriptor series.

Three cell kinds (vanilla tanh RNN, GRU, LSTM) implemented directly in
numpy with full backpropagation through time, trained with binary
cross-entropy on the last step (the trace label describes the whole trace)
or averaged over steps.  A sigmoid readout turns each hidden state into a
per-step risk score in (0, 1).

Gate orders are fixed and part of the checkpoint contract:
    rnn:  [h]           h' = tanh(W x + U h + b)
    gru:  [z, r, n]     h' = (1 - z) * h + z * tanh(Wn x + Un (r*h) + bn)
    lstm: [i, f, g, o]  c' = f*c + i*g;  h' = o * tanh(c')

Weights initialize uniform(-1/sqrt(hidden), +1/sqrt(hidden)), biases zero
except the LSTM forget-gate bias, which starts at +1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericalError
from .features import FEATURE_NAMES, FeatureConfig
from .monitor import (
    ActivationTrace,
    DescriptorSeries,
    feature_stats,
    run_trace,
    truncate_series,
)
from .optim import clip_global_norm, make_optimizer
from .rng import make_rng

__all__ = [
    "CELL_KINDS",
    "GATE_ORDERS",
    "RecurrentHeadParams",
    "TrainConfig",
    "init_head",
    "head_param_count",
    "head_forward",
    "head_backward",
    "head_train",
    "score_series",
    "auroc",
    "eval_early_detection",
    "eval_window_ablation",
]

CELL_KINDS = ("rnn", "gru", "lstm")
GATE_ORDERS = {"rnn": ("h",), "gru": ("z", "r", "n"), "lstm": ("i", "f", "g", "o")}
MAX_HEAD_PARAMS = 10_000
SCORE_EPS = 1e-15


@dataclass
class RecurrentHeadParams:
    """Weights of one recurrent risk head.

    ``w_in`` stacks the per-gate input matrices ((gates * hidden) x input),
    ``w_rec`` the recurrent ones, ``b`` the gate biases; ``w_out``/``b_out``
    form the sigmoid readout.  ``standardization`` holds the per-feature
    (mean, std) pairs from training, applied to inputs in ``head_forward``.
    """

    cell: str
    input_dim: int
    hidden_dim: int
    w_in: np.ndarray
    w_rec: np.ndarray
    b: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    standardization: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"unknown cell {self.cell!r}; expected {CELL_KINDS}")
        g = len(GATE_ORDERS[self.cell])
        h, d = self.hidden_dim, self.input_dim
        expected = {
            "w_in": (g * h, d),
            "w_rec": (g * h, h),
            "b": (g * h,),
            "w_out": (h,),
            "b_out": (1,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ContractError(
                    f"{name} has shape {getattr(self, name).shape}, "
                    f"expected {shape} for cell {self.cell!r}"
                )
        if head_param_count(self.cell, d, h) > MAX_HEAD_PARAMS:
            raise ConfigError(
                f"head would have {head_param_count(self.cell, d, h)} parameters; "
                f"the risk head stays below {MAX_HEAD_PARAMS}"
            )

    def leaves(self) -> list[np.ndarray]:
        return [self.w_in, self.w_rec, self.b, self.w_out, self.b_out]

    def copy(self) -> "RecurrentHeadParams":
        return RecurrentHeadParams(
            cell=self.cell,
            input_dim=self.input_dim,
            hidden_dim=self.hidden_dim,
            w_in=self.w_in.copy(),
            w_rec=self.w_rec.copy(),
            b=self.b.copy(),
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
            standardization=None
            if self.standardization is None
            else (self.standardization[0].copy(), self.standardization[1].copy()),
        )


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for head training."""

    learning_rate: float = 3e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    loss_mode: str = "last_step"
    optimizer: str = "adam"
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (self.learning_rate >= 0.0):
            raise ConfigError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss_mode not in ("last_step", "mean_steps"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if not (self.grad_clip > 0.0):
            raise ConfigError("grad_clip must be positive")


def head_param_count(cell: str, input_dim: int, hidden_dim: int) -> int:
    """Exact parameter count: gates*(h*in + h*h + h) + (h + 1)."""
    g = len(GATE_ORDERS[cell])
    h, d = hidden_dim, input_dim
    return g * (h * d + h * h + h) + (h + 1)


def init_head(
    cell: str,
    input_dim: int = len(FEATURE_NAMES),
    hidden_dim: int = 16,
    seed: int = 0,
) -> RecurrentHeadParams:
    """Uniform(-1/sqrt(h), +1/sqrt(h)) weights, zero biases, LSTM forget +1."""
    if cell not in CELL_KINDS:
        raise ConfigError(f"unknown cell {cell!r}; expected {CELL_KINDS}")
    g = len(GATE_ORDERS[cell])
    h, d = hidden_dim, input_dim
    rng = make_rng(seed)
    bound = 1.0 / np.sqrt(h)

    def u(shape):
        return (2.0 * rng.random(shape) - 1.0) * bound

    b = np.zeros(g * h)
    if cell == "lstm":
        b[h : 2 * h] = 1.0  # forget-gate bias
    return RecurrentHeadParams(
        cell=cell,
        input_dim=d,
        hidden_dim=h,
        w_in=u((g * h, d)),
        w_rec=u((g * h, h)),
        b=b,
        w_out=u((h,)),
        b_out=np.zeros(1),
    )


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _forward_states(params: RecurrentHeadParams, x: np.ndarray) -> dict:
    """Run the cell over a (T, input_dim) matrix; cache everything for BPTT."""
    t_len = x.shape[0]
    h = params.hidden_dim
    cell = params.cell
    pre_in = x @ params.w_in.T + params.b  # (T, g*h)
    hs = np.zeros((t_len + 1, h))  # hs[0] is the initial zero state
    cache: dict = {"x": x, "hs": hs, "cell": cell}
    if cell == "rnn":
        for t in range(t_len):
            a = pre_in[t] + params.w_rec @ hs[t]
            hs[t + 1] = np.tanh(a)
    elif cell == "gru":
        zs = np.zeros((t_len, h))
        rs = np.zeros((t_len, h))
        ns = np.zeros((t_len, h))
        rh = np.zeros((t_len, h))
        wz, wr, wn = params.w_rec[:h], params.w_rec[h : 2 * h], params.w_rec[2 * h :]
        for t in range(t_len):
            z = _sigmoid(pre_in[t, :h] + wz @ hs[t])
            r = _sigmoid(pre_in[t, h : 2 * h] + wr @ hs[t])
            gated = r * hs[t]
            n = np.tanh(pre_in[t, 2 * h :] + wn @ gated)
            hs[t + 1] = (1.0 - z) * hs[t] + z * n
            zs[t], rs[t], ns[t], rh[t] = z, r, n, gated
        cache.update(zs=zs, rs=rs, ns=ns, rh=rh)
    else:  # lstm
        is_ = np.zeros((t_len, h))
        fs = np.zeros((t_len, h))
        gs = np.zeros((t_len, h))
        os_ = np.zeros((t_len, h))
        cs = np.zeros((t_len + 1, h))
        wi, wf = params.w_rec[:h], params.w_rec[h : 2 * h]
        wg, wo = params.w_rec[2 * h : 3 * h], params.w_rec[3 * h :]
        for t in range(t_len):
            i = _sigmoid(pre_in[t, :h] + wi @ hs[t])
            f = _sigmoid(pre_in[t, h : 2 * h] + wf @ hs[t])
            g = np.tanh(pre_in[t, 2 * h : 3 * h] + wg @ hs[t])
            o = _sigmoid(pre_in[t, 3 * h :] + wo @ hs[t])
            cs[t + 1] = f * cs[t] + i * g
            hs[t + 1] = o * np.tanh(cs[t + 1])
            is_[t], fs[t], gs[t], os_[t] = i, f, g, o
        cache.update(is_=is_, fs=fs, gs=gs, os_=os_, cs=cs)
    logits = hs[1:] @ params.w_out + params.b_out[0]
    cache["logits"] = logits
    return cache


def _backward_states(
    params: RecurrentHeadParams, cache: dict, dlogits: np.ndarray
) -> list[np.ndarray]:
    """Exact BPTT gradients for the cached forward pass."""
    x, hs = cache["x"], cache["hs"]
    t_len = x.shape[0]
    h = params.hidden_dim
    cell = params.cell
    g = len(GATE_ORDERS[cell])
    da = np.zeros((t_len, g * h))  # pre-activation grads per gate
    d_w_out = (dlogits[:, None] * hs[1:]).sum(axis=0)
    d_b_out = np.array([dlogits.sum()])
    dh = np.zeros(h)
    if cell == "rnn":
        for t in range(t_len - 1, -1, -1):
            dht = dh + dlogits[t] * params.w_out
            step = dht * (1.0 - hs[t + 1] ** 2)
            da[t] = step
            dh = params.w_rec.T @ step
    elif cell == "gru":
        zs, rs, ns, rh = cache["zs"], cache["rs"], cache["ns"], cache["rh"]
        wz, wr, wn = params.w_rec[:h], params.w_rec[h : 2 * h], params.w_rec[2 * h :]
        for t in range(t_len - 1, -1, -1):
            dht = dh + dlogits[t] * params.w_out
            z, r, n = zs[t], rs[t], ns[t]
            h_prev = hs[t]
            dz = dht * (n - h_prev)
            dn = dht * z
            dh = dht * (1.0 - z)
            dan = dn * (1.0 - n * n)
            drh = wn.T @ dan
            dr = drh * h_prev
            dh = dh + drh * r
            dar = dr * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            da[t, :h] = daz
            da[t, h : 2 * h] = dar
            da[t, 2 * h :] = dan
            dh = dh + wz.T @ daz + wr.T @ dar
    else:  # lstm
        is_, fs, gs, os_, cs = (
            cache["is_"],
            cache["fs"],
            cache["gs"],
            cache["os_"],
            cache["cs"],
        )
        wi, wf = params.w_rec[:h], params.w_rec[h : 2 * h]
        wg, wo = params.w_rec[2 * h : 3 * h], params.w_rec[3 * h :]
        dc = np.zeros(h)
        for t in range(t_len - 1, -1, -1):
            dht = dh + dlogits[t] * params.w_out
            i, f, gg, o = is_[t], fs[t], gs[t], os_[t]
            tc = np.tanh(cs[t + 1])
            do = dht * tc
            dct = dc + dht * o * (1.0 - tc * tc)
            di = dct * gg
            df = dct * cs[t]
            dg = dct * i
            dc = dct * f
            dai = di * i * (1.0 - i)
            daf = df * f * (1.0 - f)
            dag = dg * (1.0 - gg * gg)
            dao = do * o * (1.0 - o)
            da[t, :h] = dai
            da[t, h : 2 * h] = daf
            da[t, 2 * h : 3 * h] = dag
            da[t, 3 * h :] = dao
            dh = wi.T @ dai + wf.T @ daf + wg.T @ dag + wo.T @ dao
    d_w_in = da.T @ x
    if cell == "gru":
        # the candidate gate sees r*h, not h, as its recurrent input
        d_w_rec = np.concatenate(
            [
                da[:, :h].T @ hs[:-1],
                da[:, h : 2 * h].T @ hs[:-1],
                da[:, 2 * h :].T @ cache["rh"],
            ],
            axis=0,
        )
    else:
        d_w_rec = da.T @ hs[:-1]
    d_b = da.sum(axis=0)
    return [d_w_in, d_w_rec, d_b, d_w_out, d_b_out]


def _series_matrix(
    params: RecurrentHeadParams, series: DescriptorSeries
) -> np.ndarray:
    mat = series.matrix()
    if mat.shape[1] != params.input_dim:
        raise ContractError(
            f"series feature width {mat.shape[1]} != head input_dim {params.input_dim}"
        )
    if params.standardization is not None:
        if series.standardization is not None:
            raise ContractError(
                "series is already standardized; the head would re-standardize"
            )
        mean, std = params.standardization
        mat = (mat - mean) / std
    return mat


def head_forward(
    params: RecurrentHeadParams, series: DescriptorSeries
) -> np.ndarray:
    """Per-step risk scores in the open interval (0, 1).

    Applies the head's stored standardization, runs the cell, and clips the
    sigmoid output away from exactly 0/1 at machine precision.
    """
    mat = _series_matrix(params, series)
    cache = _forward_states(params, mat)
    probs = _sigmoid(cache["logits"])
    return np.clip(probs, SCORE_EPS, 1.0 - 1e-16)


def head_backward(
    params: RecurrentHeadParams,
    batch: list[DescriptorSeries],
    labels: np.ndarray,
    loss_mode: str = "last_step",
) -> tuple[float, list[np.ndarray]]:
    """Mean BCE loss over the batch and exact BPTT gradients.

    ``loss_mode="last_step"`` scores only the final step of each series;
    ``"mean_steps"`` averages the BCE over all steps.  Raises NumericalError
    naming the offending trace if a loss comes out non-finite.
    """
    if not batch:
        raise ConfigError("empty batch")
    labels = np.asarray(labels, dtype=float)
    if labels.shape != (len(batch),) or not np.all(np.isin(labels, (0.0, 1.0))):
        raise ConfigError("labels must be one binary value per series")
    if loss_mode not in ("last_step", "mean_steps"):
        raise ConfigError(f"unknown loss_mode {loss_mode!r}")
    total_loss = 0.0
    grads: list[np.ndarray] | None = None
    scale = 1.0 / len(batch)
    for series, y in zip(batch, labels):
        mat = _series_matrix(params, series)
        cache = _forward_states(params, mat)
        logits = cache["logits"]
        probs = _sigmoid(logits)
        dlogits = np.zeros_like(logits)
        if loss_mode == "last_step":
            loss = float(_softplus(logits[-1]) - y * logits[-1])
            dlogits[-1] = (probs[-1] - y) * scale
        else:
            loss = float(np.mean(_softplus(logits) - y * logits))
            dlogits = (probs - y) * (scale / logits.size)
        if not np.isfinite(loss):
            raise NumericalError(
                f"non-finite loss on trace {series.trace_id!r}"
            )
        total_loss += loss * scale
        series_grads = _backward_states(params, cache, dlogits)
        if grads is None:
            grads = series_grads
        else:
            for acc, g in zip(grads, series_grads):
                acc += g
    return total_loss, grads


def score_series(params: RecurrentHeadParams, series: DescriptorSeries) -> float:
    """Risk score at the last available step of a series."""
    return float(head_forward(params, series)[-1])


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUROC by the rank formulation: P(random positive outranks a random
    negative), with ties counted half.  Exact midrank computation."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("AUROC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = float(ranks[np.asarray(labels) == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _split_series(
    corpus: list[DescriptorSeries],
) -> dict[str, list[DescriptorSeries]]:
    splits: dict[str, list[DescriptorSeries]] = {"train": [], "val": [], "test": []}
    for series in corpus:
        name = series.meta.get("split")
        if name not in splits:
            raise ConfigError(
                f"series {series.trace_id!r} is missing split metadata "
                "(expected meta['split'] in train/val/test)"
            )
        splits[name].append(series)
    return splits


def head_train(
    corpus: list[DescriptorSeries],
    config: TrainConfig = TrainConfig(),
    cell: str = "gru",
    hidden_dim: int = 16,
) -> tuple[RecurrentHeadParams, list[dict]]:
    """Train a risk head on a split-tagged descriptor corpus.

    Standardization statistics come from the training split only and are
    stored on the returned head.  Mini-batches follow a seeded permutation
    per epoch; the checkpoint with the best validation AUROC (earliest on
    ties) is returned together with the per-epoch history of train loss,
    validation loss, and validation AUROC.
    """
    splits = _split_series(corpus)
    train, val = splits["train"], splits["val"]
    if not train or not val:
        raise ConfigError("corpus needs non-empty train and val splits")
    y_train = np.array([s.risk_label for s in train], dtype=float)
    y_val = np.array([s.risk_label for s in val], dtype=float)
    if len(set(y_train)) < 2 or len(set(y_val)) < 2:
        raise ConfigError("train and val splits must each contain both labels")
    mean, std = feature_stats(train)
    params = init_head(
        cell,
        input_dim=len(FEATURE_NAMES),
        hidden_dim=hidden_dim,
        seed=config.seed,
    )
    params.standardization = (mean, std)
    optimizer = make_optimizer(config.optimizer, config.learning_rate)
    shuffle_rng = make_rng(config.seed)
    history: list[dict] = []
    best_auroc = -1.0
    best_params = params.copy()
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(len(train))
        batch_losses = []
        for start in range(0, len(train), config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch = [train[i] for i in idx]
            loss, grads = head_backward(
                params, batch, y_train[idx], config.loss_mode
            )
            clip_global_norm(grads, config.grad_clip)
            optimizer.step(params.leaves(), grads)
            batch_losses.append(loss)
        val_loss, _ = head_backward(params, val, y_val, config.loss_mode)
        val_scores = np.array([score_series(params, s) for s in val])
        val_auroc = auroc(val_scores, y_val)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(batch_losses)),
                "val_loss": float(val_loss),
                "val_auroc": float(val_auroc),
            }
        )
        if val_auroc > best_auroc:
            best_auroc = val_auroc
            best_params = params.copy()
    return best_params, history


def eval_early_detection(
    params: RecurrentHeadParams,
    corpus: list[DescriptorSeries],
    token_budgets: list[int],
) -> list[tuple[int, float]]:
    """AUROC as a function of the token budget.

    Each series is truncated to the descriptors computable within the
    budget and scored at its last available step.
    """
    labels = np.array([s.risk_label for s in corpus])
    curve = []
    for budget in token_budgets:
        scores = np.array(
            [score_series(params, truncate_series(s, budget)) for s in corpus]
        )
        curve.append((int(budget), float(auroc(scores, labels))))
    return curve


def _median_per_token_latency(
    params: RecurrentHeadParams,
    trace: ActivationTrace,
    window_len: int,
    feature_config: FeatureConfig,
    reps: int = 5,
) -> float:
    """Median wall-clock descriptor+head cost per token over >= 5 repeats."""
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        series = run_trace(trace, window_len=window_len, config=feature_config)
        head_forward(params, series)
        times.append((time.perf_counter() - start) / trace.length)
    return float(np.median(times))


def eval_window_ablation(
    cell: str,
    window_lengths: list[int],
    traces: list[ActivationTrace],
    train_config: TrainConfig = TrainConfig(),
    feature_config: FeatureConfig = FeatureConfig(),
) -> list[dict]:
    """Window-length ablation: re-extract, retrain, and time per length.

    For each window length the descriptor corpus is rebuilt from the same
    traces, a fresh head is trained with the same config and seed, the
    test-split AUROC is computed from last-step scores, and the per-token
    descriptor+head latency is measured as a median of 5 repetitions.
    """
    rows = []
    for window_len in window_lengths:
        if window_len < 4:
            raise ConfigError(f"window length {window_len} is below the minimum 4")
        corpus = [
            run_trace(t, window_len=window_len, config=feature_config)
            for t in traces
        ]
        params, _ = head_train(corpus, train_config, cell=cell)
        test = _split_series(corpus)["test"]
        if not test:
            raise ConfigError("ablation corpus has no test split")
        labels = np.array([s.risk_label for s in test])
        scores = np.array([score_series(params, s) for s in test])
        latency_trace = next(
            t for t in traces if t.meta.get("split") == "test"
        )
        rows.append(
            {
                "window_len": int(window_len),
                "auroc": float(auroc(scores, labels)),
                "per_token_latency_s": _median_per_token_latency(
                    params, latency_trace, window_len, feature_config
                ),
            }
        )
    return rows
