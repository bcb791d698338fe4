"""Losses, optimizer, schedule and the full-batch transductive training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .chem import featurize
from .config import RunConfig
from .data import DataError, Dataset, SplitMask, higher_is_better, metric_name, rmse, roc_auc
from .encoder import GinParams, MoleculeBatch, batch_graphs, encode_chunked, glorot
from .fingerprint import ecfp, fingerprint_matrix
from .gsl import (DENSE_LIMIT, AnchorSet, AnchorState, GslParams, anchor_gsl_iterate,
                  anchor_pair_adjacency, build_msg, build_msg_sparse, gcn_forward, gsl_iterate,
                  normalize_constant)
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


# ---------------------------------------------------------------- configs

@dataclass
class LossConfig:
    task: str
    mu: float = 0.5
    eps_y: float = 0.01
    raw_sum: bool = False

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.eps_y <= 0:
            raise ValueError("eps_y must be > 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")


@dataclass
class ScheduleConfig:
    max_lr: float = 1e-3
    warmup_epochs: int = 2
    final_lr: float = 1e-9
    max_epoch: int = 300

    def lr_at(self, epoch: int) -> float:
        """Linear warm-up to ``max_lr``, then linear decay reaching ``final_lr`` on the last epoch."""
        if not 0 <= epoch < self.max_epoch:
            raise ValueError(f"epoch {epoch} outside [0, {self.max_epoch})")
        w = self.warmup_epochs
        if epoch < w:
            return self.max_lr * (epoch + 1) / w
        span = self.max_epoch - 1 - w
        frac = 1.0 if span <= 0 else (epoch - w) / span
        return (1.0 - frac) * self.max_lr + frac * self.final_lr


# ---------------------------------------------------------------- losses

def pred_loss(out: Tensor, y: np.ndarray, present: np.ndarray, rows, task: str) -> Tensor:
    """BCE-with-logits (classification) or MSE (regression) over labelled training entries."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("pred_loss: empty training mask")
    sel = T.take_rows(out, rows)
    yy = np.nan_to_num(y[rows])
    mm = present[rows].astype(np.float64)
    if mm.sum() == 0:
        raise ValueError("pred_loss: no labels present in the selected rows")
    if task == "classification":
        return T.bce_with_logits(sel, yy, mm)
    err = T.mul(T.sub(sel, Tensor(yy)), Tensor(mm))
    return T.scalar_mul(T.sum(T.pow(err, 2.0)), 1.0 / mm.sum())


def upper_pairs(rows) -> tuple[np.ndarray, np.ndarray]:
    """All unordered pairs i < j (by position) of the given node indices."""
    rows = np.asarray(rows, dtype=np.int64)
    a, b = np.triu_indices(len(rows), k=1)
    return rows[a], rows[b]


def classification_targets(y: np.ndarray, present: np.ndarray, ri, ci):
    """Target adjacency for pairs: fraction of co-labelled tasks on which the labels agree.

    Pairs sharing no labelled task are dropped.  Returns ``(ri, ci, target)``.
    """
    both = present[ri] & present[ci]
    agree = (y[ri] == y[ci]) & both
    n_both = both.sum(axis=1)
    keep = n_both > 0
    target = agree[keep].sum(axis=1) / n_both[keep]
    return ri[keep], ci[keep], target.astype(np.float64)


def regression_pairs(y: np.ndarray, present: np.ndarray, ri, ci, eps_y: float):
    """Pairs whose targets differ by more than ``eps_y`` on some co-labelled task."""
    both = present[ri] & present[ci]
    diff = np.abs(np.nan_to_num(y[ri]) - np.nan_to_num(y[ci]))
    keep = ((diff > eps_y) & both).any(axis=1)
    return ri[keep], ci[keep]


def sample_upper_pairs(rows, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``k`` unordered pairs i < j drawn uniformly, with replacement, from ``rows``."""
    rows = np.asarray(rows, dtype=np.int64)
    n = len(rows)
    a = rng.integers(0, n, size=k)
    b = rng.integers(0, n - 1, size=k)
    b += b >= a
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return rows[lo], rows[hi]


def pair_targets(y: np.ndarray, present: np.ndarray, ri, ci, task: str, eps_y: float):
    """Filter candidate pairs and attach their structure targets."""
    if task == "classification":
        return classification_targets(y, present, ri, ci)
    ri, ci = regression_pairs(y, present, ri, ci, eps_y)
    return ri, ci, np.zeros(len(ri))


def pair_loss(values: Tensor, target: np.ndarray, raw_sum: bool = False, scale: float = 1.0) -> Tensor:
    """Sum of squared deviations over pairs; divided by the pair count unless ``raw_sum``.

    ``scale`` multiplies the raw sum (used when ``values`` is a sample of a larger pair set).
    """
    n = values.shape[0]
    if n == 0:
        return Tensor(np.asarray(0.0))
    sq = T.sum(T.pow(T.sub(values, Tensor(target)), 2.0))
    return T.scalar_mul(sq, scale if raw_sum else 1.0 / n)


def gsl_loss_classification(a_tilde: Tensor, y: np.ndarray, present: np.ndarray, rows,
                            raw_sum: bool = False) -> Tensor:
    y = np.asarray(y, dtype=np.float64).reshape(a_tilde.shape[0], -1)
    present = np.asarray(present, dtype=bool).reshape(y.shape)
    ri, ci, target = classification_targets(y, present, *upper_pairs(rows))
    return pair_loss(T.gather(a_tilde, ri, ci), target, raw_sum)


def gsl_loss_regression(a_tilde: Tensor, y: np.ndarray, present: np.ndarray, rows, eps_y: float,
                        raw_sum: bool = False) -> Tensor:
    y = np.asarray(y, dtype=np.float64).reshape(a_tilde.shape[0], -1)
    present = np.asarray(present, dtype=bool).reshape(y.shape)
    ri, ci = regression_pairs(y, present, *upper_pairs(rows), eps_y)
    return pair_loss(T.gather(a_tilde, ri, ci), np.zeros(len(ri)), raw_sum)


def total_loss(pred: Tensor, gsl: Tensor | None, mu: float) -> Tensor:
    if gsl is None or mu == 0:
        return pred
    return T.add(pred, T.scalar_mul(gsl, mu))


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with L2 weight decay added to the gradient."""

    def __init__(self, params: list[Tensor], weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0

    def step(self, lr: float):
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- model

@dataclass
class Model:
    gin: GinParams
    gsl: GslParams
    fc_w: Tensor
    fc_b: Tensor
    variant: str = "full"

    @classmethod
    def init(cls, d_atom: int, n_tasks: int, cfg: RunConfig, rng: np.random.Generator) -> "Model":
        gin = GinParams.init(d_atom, cfg.gin_hidden_size, cfg.gin_layers, rng, cfg.readout)
        gsl = GslParams.init(gin.d_mol, cfg.gsl_hidden_size, cfg.gsl_gnn_layers, cfg.gsl_perspective, rng,
                             skip_conn=cfg.gsl_skip_conn, update_ratio=cfg.gsl_update_ratio,
                             epsilon=cfg.gsl_epsilon, n_iter=cfg.gsl_iter, adj_norm=cfg.gsl_adj_norm)
        d_in = gin.d_mol if cfg.variant == "not-any" else cfg.gsl_hidden_size
        fc_w = Tensor(glorot(rng, d_in, n_tasks), requires_grad=True)
        fc_b = Tensor(np.zeros(n_tasks), requires_grad=True)
        return cls(gin, gsl, fc_w, fc_b, cfg.variant)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.gin.named_parameters("gin")
        if self.variant != "not-any":
            out += self.gsl.named_parameters("gsl")
        out += [("fc.w", self.fc_w), ("fc.b", self.fc_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def predict(h: Tensor, fc_w: Tensor, fc_b: Tensor) -> Tensor:
    """Linear head: one logit (classification) or standardized value (regression) per task."""
    return T.add(T.matmul(h, fc_w), fc_b)


# ---------------------------------------------------------------- context

@dataclass
class Context:
    """Everything fixed for a run: graphs, similarity graph, targets and pair sets."""

    dataset: Dataset
    split: SplitMask
    batch: MoleculeBatch
    a0: np.ndarray | sp.csr_matrix
    a0_norm: sp.csr_matrix | None
    anchors: AnchorSet | None
    y_scaled: np.ndarray
    present: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    loss: LossConfig
    pair_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pair_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pair_target: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sampled_pairs: bool = False            # draw structure-loss pairs per step instead of listing them
    nodes: np.ndarray | None = None        # training subgraph when test nodes are held out
    learned_mask: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.dataset)

    @property
    def dense(self) -> bool:
        return self.anchors is None


def standardization(dataset: Dataset, rows) -> tuple[np.ndarray, np.ndarray]:
    if dataset.task == "classification":
        return np.zeros(dataset.n_tasks), np.ones(dataset.n_tasks)
    y = dataset.labels[np.asarray(rows)]
    mean = np.nanmean(y, axis=0)
    std = np.nanstd(y, axis=0)
    return mean, np.where(std > 0, std, 1.0)


def build_context(dataset: Dataset, cfg: RunConfig, split: SplitMask,
                  anchors: np.ndarray | None = None, rng: np.random.Generator | None = None,
                  scaling: tuple[np.ndarray, np.ndarray] | None = None) -> Context:
    """Prepare a run.  ``anchors`` fixes the anchor set; otherwise it is drawn from ``rng``."""
    split.check_partition(len(dataset))
    n = len(dataset)
    if cfg.anchors == 0 and n > DENSE_LIMIT:
        raise ValueError(f"{n} molecules exceed the dense limit of {DENSE_LIMIT}; set anchors > 0")
    batch = batch_graphs(dataset.graphs, [featurize(g) for g in dataset.graphs])
    fps = fingerprint_matrix([ecfp(g, cfg.ecfp_radius, cfg.ecfp_bits) for g in dataset.graphs])

    anchor_set = None
    a0_norm = None
    if cfg.anchors > 0:
        a0 = build_msg_sparse(fps, cfg.tc_epsilon)
        if cfg.variant == "only-gsl":
            a0 = sp.identity(n, format="csr")
        a0_norm = sp.csr_matrix(normalize_constant(a0, cfg.gsl_adj_norm))
        if anchors is None:
            if rng is None:
                raise ValueError("need an rng to sample anchors")
            anchor_set = AnchorSet.sample(split.train, min(cfg.anchors, len(split.train)), rng)
        else:
            anchor_set = AnchorSet(np.asarray(anchors, dtype=np.int64))
    else:
        a0 = build_msg(fps, cfg.tc_epsilon)
        if cfg.variant == "only-gsl":
            a0 = np.eye(n)

    mean, std = scaling if scaling is not None else standardization(dataset, split.train)
    y_scaled = (dataset.labels - mean) / std
    present = dataset.present
    loss = LossConfig(dataset.task, 0.0 if cfg.variant in ("no-gsl-loss", "not-any", "only-a0") else cfg.gsl_coff,
                      cfg.eps_y, cfg.gsl_loss_raw_sum)

    ctx = Context(dataset, split, batch, a0, a0_norm, anchor_set, y_scaled, present,
                  np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64), loss)

    if cfg.exclude_test_from_msg:
        if not ctx.dense:
            raise ValueError("exclude_test_from_msg needs the dense graph")
        ctx.nodes = np.sort(np.concatenate([split.train, split.valid]))
        keep = np.ones(n, dtype=bool)
        keep[split.test] = False
        ctx.learned_mask = np.outer(keep, keep).astype(np.float64)

    if loss.mu > 0:
        n_train = len(split.train)
        if not ctx.dense and n_train * (n_train - 1) // 2 > cfg.gsl_loss_pairs:
            # listing every pair would cost O(n_train^2) memory
            ctx.sampled_pairs = True
        else:
            ctx.pair_rows, ctx.pair_cols, ctx.pair_target = pair_targets(
                y_scaled, present, *upper_pairs(split.train), dataset.task, cfg.eps_y)
    return ctx


# ---------------------------------------------------------------- forward

@dataclass
class Forward:
    out: Tensor                      # (N, n_tasks) logits or standardized values
    h: Tensor                        # final node embeddings fed to the head
    x_r: Tensor
    a_tilde: Tensor | None = None    # dense fused adjacency
    anchor_state: AnchorState | None = None
    nodes: np.ndarray | None = None  # row i of ``out`` is molecule nodes[i]


def _constant_norm(mode: str) -> str:
    return "row" if mode == "separate" else mode


def _a0_only_anchor(a0_norm: sp.csr_matrix, x: Tensor, weights, dropout, rng, training) -> Tensor:
    h = x
    for k, w in enumerate(weights):
        h = T.dropout(h, dropout, rng, training)
        h = T.spmm(a0_norm, T.matmul(h, w))
        if k < len(weights) - 1:
            h = T.relu(h)
    return h


def forward(model: Model, ctx: Context, cfg: RunConfig, training: bool = False,
            rng: np.random.Generator | None = None, inference_graph: bool = True) -> Forward:
    """Encode, refine and predict.

    With held-out test nodes, training steps (``inference_graph=False``) run on
    the train+valid subgraph; inference uses every node and masks learned edges
    that touch a test molecule.
    """
    p = cfg.dropout
    x_r = encode_chunked(ctx.batch, model.gin, cfg.encoder_chunk, p, rng, training)
    if cfg.freeze_encoder:
        x_r = x_r.detach()
    nodes = None
    a0 = ctx.a0
    mask = None
    if ctx.nodes is not None:
        if inference_graph:
            mask = ctx.learned_mask
        else:
            nodes = ctx.nodes
            x_r = T.take_rows(x_r, nodes)
            a0 = a0[np.ix_(nodes, nodes)]

    variant = model.variant
    if variant == "not-any":
        return Forward(predict(x_r, model.fc_w, model.fc_b), x_r, x_r, nodes=nodes)
    if variant == "only-a0":
        if ctx.dense:
            h = gcn_forward(Tensor(a0), x_r, model.gsl.gcn, _constant_norm(model.gsl.adj_norm), dropout=p, rng=rng,
                            training=training)
        else:
            h = _a0_only_anchor(ctx.a0_norm, x_r, model.gsl.gcn, p, rng, training)
        return Forward(predict(h, model.fc_w, model.fc_b), h, x_r, a_tilde=None, nodes=nodes)
    if ctx.dense:
        h, a_tilde = gsl_iterate(x_r, a0, model.gsl, p, rng, training, learned_mask=mask)
        return Forward(predict(h, model.fc_w, model.fc_b), h, x_r, a_tilde=a_tilde, nodes=nodes)
    state = anchor_gsl_iterate(x_r, ctx.a0_norm, ctx.anchors, model.gsl, p, rng, training)
    return Forward(predict(state.h, model.fc_w, model.fc_b), state.h, x_r, anchor_state=state)


@dataclass
class Losses:
    total: Tensor
    pred: Tensor
    gsl: Tensor | None


def compute_losses(model: Model, fwd: Forward, ctx: Context, cfg: RunConfig,
                   rng: np.random.Generator | None = None) -> Losses:
    """Prediction loss on training rows plus the weighted structure loss on training pairs.

    In anchor mode with more than ``cfg.gsl_loss_pairs`` training pairs, the
    structure loss uses a fresh uniform sample of that many pairs per call.
    """
    rows = np.asarray(ctx.split.train)
    y, present = ctx.y_scaled, ctx.present
    pr, pc, target = ctx.pair_rows, ctx.pair_cols, ctx.pair_target
    if fwd.nodes is not None:
        pos = np.full(ctx.n, -1, dtype=np.int64)
        pos[fwd.nodes] = np.arange(len(fwd.nodes))
        rows = pos[rows]
        y, present = y[fwd.nodes], present[fwd.nodes]
        pr, pc = pos[pr], pos[pc]
    lp = pred_loss(fwd.out, y, present, rows, ctx.dataset.task)

    lg = None
    if ctx.loss.mu > 0 and len(pr):
        if fwd.a_tilde is not None:
            lg = pair_loss(T.gather(fwd.a_tilde, pr, pc), target, ctx.loss.raw_sum)
        elif fwd.anchor_state is not None:
            vals = anchor_pair_adjacency(fwd.anchor_state, ctx.a0, pr, pc, model.gsl)
            lg = pair_loss(vals, target, ctx.loss.raw_sum)
    elif ctx.loss.mu > 0 and ctx.sampled_pairs and fwd.anchor_state is not None:
        train = np.asarray(ctx.split.train)
        n_total = len(train) * (len(train) - 1) // 2
        k = cfg.gsl_loss_pairs
        pr, pc = sample_upper_pairs(train, k, rng or np.random.default_rng(0))
        pr, pc, target = pair_targets(ctx.y_scaled, ctx.present, pr, pc, ctx.dataset.task, cfg.eps_y)
        if len(pr):
            vals = anchor_pair_adjacency(fwd.anchor_state, ctx.a0, pr, pc, model.gsl)
            lg = pair_loss(vals, target, ctx.loss.raw_sum, scale=n_total / k)
    return Losses(total_loss(lp, lg, ctx.loss.mu), lp, lg)


# ---------------------------------------------------------------- evaluation

@dataclass
class Evaluation:
    predictions: np.ndarray          # probabilities or de-standardized values, (N, n_tasks)
    embeddings: np.ndarray
    metrics: dict[str, float]
    a_tilde: np.ndarray | None = None
    anchor_state: AnchorState | None = None


def _score(task: str, pred: np.ndarray, labels: np.ndarray, rows) -> float:
    rows = np.asarray(rows)
    if rows.size == 0:
        return float("nan")
    try:
        if task == "classification":
            return roc_auc(pred[rows], labels[rows])
        return rmse(pred[rows], labels[rows])
    except DataError as exc:
        log.warning("metric undefined: %s", exc)
        return float("nan")


def evaluate_model(model: Model, ctx: Context, cfg: RunConfig, keep_graph: bool = False) -> Evaluation:
    """Deterministic inference pass over all molecules."""
    fwd = forward(model, ctx, cfg, training=False)
    out = fwd.out.data
    if ctx.dataset.task == "classification":
        pred = T._sigmoid(out)
    else:
        pred = out * ctx.y_std + ctx.y_mean
    labels = ctx.dataset.labels
    metrics = {part: _score(ctx.dataset.task, pred, labels, getattr(ctx.split, part))
               for part in ("train", "valid", "test")}
    a_tilde = fwd.a_tilde.data if (keep_graph and fwd.a_tilde is not None) else None
    return Evaluation(pred, fwd.h.data, metrics, a_tilde, fwd.anchor_state if keep_graph else None)


# ---------------------------------------------------------------- training loop

@dataclass
class FitResult:
    model: Model
    context: Context
    history: list[dict]
    best_epoch: int
    evaluation: Evaluation
    seed: int

    @property
    def metric(self) -> str:
        return metric_name(self.context.dataset.task)

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable arrays needed to reproduce inference."""
        out = {"buffer.y_mean": self.context.y_mean, "buffer.y_std": self.context.y_std}
        if self.context.anchors is not None:
            out["buffer.anchors"] = self.context.anchors.indices.astype(np.float64)
        return out


def fit(dataset: Dataset, cfg: RunConfig, split: SplitMask, seed: int = 0,
        callback=None) -> FitResult:
    """Train one model; returns the best-validation parameters and the per-epoch history."""
    init_ss, drop_ss, anchor_ss, pair_ss = np.random.SeedSequence(seed).spawn(4)
    init_rng = np.random.default_rng(init_ss)
    drop_rng = np.random.default_rng(drop_ss)
    pair_rng = np.random.default_rng(pair_ss)
    ctx = build_context(dataset, cfg, split, rng=np.random.default_rng(anchor_ss))
    model = Model.init(ctx.batch.features.shape[1], dataset.n_tasks, cfg, init_rng)
    params = model.parameters()
    opt = Adam(params, cfg.weight_decay)
    schedule = ScheduleConfig(cfg.max_lr, cfg.warmup_epochs, cfg.final_lr, cfg.max_epoch)
    better = (lambda a, b: a > b) if higher_is_better(dataset.task) else (lambda a, b: a < b)

    history = []
    best_state, best_value, best_epoch = None, None, -1
    for epoch in range(cfg.max_epoch):
        lr = schedule.lr_at(epoch)
        opt.zero_grad()
        with Tape():
            fwd = forward(model, ctx, cfg, training=True, rng=drop_rng, inference_graph=False)
            losses = compute_losses(model, fwd, ctx, cfg, pair_rng)
            backward(losses.total)
        value = float(losses.total.data)
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite training loss at epoch {epoch}: pred={float(losses.pred.data)}, "
                                  f"gsl={float(losses.gsl.data) if losses.gsl is not None else 0.0}, lr={lr:.3g}")
        opt.step(lr)
        ev = evaluate_model(model, ctx, cfg)
        valid = ev.metrics["valid"]
        row = {"epoch": epoch, "lr": lr, "train_loss": value, "pred_loss": float(losses.pred.data),
               "gsl_loss": float(losses.gsl.data) if losses.gsl is not None else 0.0, "valid_metric": valid}
        history.append(row)
        if callback is not None:
            callback(row)
        if best_value is None or (np.isfinite(valid) and better(valid, best_value)) or not np.isfinite(best_value):
            best_state, best_value, best_epoch = model.state_dict(), valid, epoch
    model.load_state_dict(best_state)
    final = evaluate_model(model, ctx, cfg)
    log.info("seed %d: best epoch %d, %s", seed, best_epoch, final.metrics)
    return FitResult(model, ctx, history, best_epoch, final, seed)


def restore(dataset: Dataset, cfg: RunConfig, split: SplitMask, state: dict[str, np.ndarray]) -> tuple[Model, Context]:
    """Rebuild a trained model and its context from saved parameters and buffers."""
    anchors = state.get("buffer.anchors")
    scaling = (state["buffer.y_mean"], state["buffer.y_std"]) if "buffer.y_mean" in state else None
    ctx = build_context(dataset, cfg, split, anchors=None if anchors is None else anchors.astype(np.int64),
                        scaling=scaling)
    model = Model.init(ctx.batch.features.shape[1], dataset.n_tasks, cfg, np.random.default_rng(0))
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith("buffer.")})
    return model, ctx

