"""K-means initialization and the joint finetuning loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fusion
from .branches import AutoencoderBranch, encode, decode, flatten_grads
from .data import ConstraintSet, MultiViewDataset
from .errors import (
    CheckpointError, ConfigError, DivergenceError, NumericalError, PreconditionError, ShapeError,
)
from .fusion import ClusterState, LossReport
from .metrics import evaluate
from .nncore import AdamState, adam_step, backward, forward
from .serialize import read_versioned, write_versioned

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "MVSC-CHECKPOINT"


# ------------------------------------------------------------------- k-means


def _sq_dists(points, centers):
    d = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def inertia(points, centers, labels) -> float:
    diff = np.asarray(points) - np.asarray(centers)[labels]
    return float(np.sum(diff * diff))


def _kmeanspp(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[j] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centers[j : j + 1])[:, 0])
    return centers


def _lloyd(points, centers, max_iter, tol):
    k = centers.shape[0]
    for _ in range(max_iter):
        d = _sq_dists(points, centers)
        labels = np.argmin(d, axis=1)
        new = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
            else:
                # empty cluster: move it onto the point worst served by its center
                far = int(np.argmax(d[np.arange(len(points)), labels]))
                new[j] = points[far]
                labels[far] = j
                d[far] = 0.0
        shift = float(np.sum((new - centers) ** 2))
        centers = new
        if shift < tol:
            break
    labels = np.argmin(_sq_dists(points, centers), axis=1)
    return centers, labels


def kmeans(points, k, seed=0, max_iter=300, tol=1e-10, n_init=10):
    """Lloyd's algorithm from k-means++ seeds; the lowest-inertia restart wins.

    Returns ``(centers, labels)``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or n < k:
        raise PreconditionError(f"k-means needs 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centers, labels = _lloyd(points, _kmeanspp(points, k, rng), max_iter, tol)
        score = inertia(points, centers, labels)
        if best is None or score < best[0]:
            best = (score, centers, labels)
    return best[1], best[2].astype(np.int64)


# ------------------------------------------------------------ configuration


@dataclass
class TrainingConfig:
    k: int
    gamma: float = 0.1
    lam: float = 1e-6
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 1e-3
    batch_size: int = 256
    update_interval: int | None = None  # None -> ceil(n / batch_size)
    delta: float = 1e-4
    max_iter: int = 20000
    seed: int = 0
    fsp: bool = True
    semi: bool = True

    def validate(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.update_interval is not None and self.update_interval < 1:
            raise ConfigError("update interval must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.gamma < 0 or self.lam < 0 or self.beta < 0:
            raise ConfigError("gamma, lambda and beta must be non-negative")
        return self

    @property
    def effective_lam(self) -> float:
        return self.lam if self.semi else 0.0

    @property
    def uses_constraints(self) -> bool:
        return self.semi and self.lam > 0

    def interval_for(self, n) -> int:
        return self.update_interval or math.ceil(n / self.batch_size)


@dataclass
class TrainRecord:
    iteration: int
    losses: LossReport
    change_fraction: float | None = None
    rec_per_view: list = field(default_factory=list)
    metrics: dict | None = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "losses": asdict(self.losses),
            "change_fraction": self.change_fraction,
            "rec_per_view": list(self.rec_per_view),
            "metrics": self.metrics,
        }

    @classmethod
    def from_dict(cls, d) -> "TrainRecord":
        return cls(
            d["iteration"], LossReport(**d["losses"]), d["change_fraction"], d["rec_per_view"], d["metrics"]
        )


CSV_COLUMNS = ["iteration", "L_rec", "L_clu", "L_con", "L", "change_fraction", "ACC", "NMI", "ARI"]


def format_record_csv(history) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in history:
        m = r.metrics or {}
        vals = [
            str(r.iteration),
            repr(r.losses.L_rec),
            repr(r.losses.L_clu),
            repr(r.losses.L_con),
            repr(r.losses.L),
            "" if r.change_fraction is None else repr(r.change_fraction),
        ] + ["" if key not in m else repr(m[key]) for key in ("ACC", "NMI", "ARI")]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------- initialization


def embed(branches, views) -> list[np.ndarray]:
    return [encode(b, x) for b, x in zip(branches, views)]


def init_cluster_state(branches, dataset: MultiViewDataset, k, seed=0, alpha=1.0):
    """K-means on the concatenated embeddings, centers sliced back per view.

    View logits start at zero, i.e. every view weight is 1/V.
    Returns ``(state, labels)``.
    """
    if dataset.n < k:
        raise PreconditionError(f"cannot form {k} clusters from {dataset.n} samples")
    z = embed(branches, dataset.views)
    centers, labels = kmeans(np.hstack(z), k, seed=seed)
    blocks = fusion.split_views(centers, [zv.shape[1] for zv in z])
    state = ClusterState([b.copy() for b in blocks], np.zeros((k, len(z))), alpha)
    return state, labels


def stopping_check(s_prev, s_curr, delta):
    """Fraction of samples whose pseudo-label changed; halt when it is <= delta."""
    s_prev = np.asarray(s_prev)
    s_curr = np.asarray(s_curr)
    if s_prev.shape != s_curr.shape:
        raise ShapeError(f"label vectors differ in length: {s_prev.size} vs {s_curr.size}")
    n = s_prev.size
    same = int(np.count_nonzero(s_prev == s_curr))
    fraction = (n - same) / n if n else 0.0
    return fraction <= delta, fraction


# ----------------------------------------------------------------- finetune


@dataclass
class FinetuneResult:
    labels: np.ndarray
    state: ClusterState
    branches: list
    history: list
    iterations: int
    halted: bool


class Finetuner:
    """Mini-batch joint optimization of encoders, decoders, centers and view logits.

    The target distribution P and pseudo-labels are refreshed from the full
    dataset every ``update_interval`` iterations and held fixed in between.
    Inputs are copied; the caller's branches and state are never mutated.
    """

    def __init__(self, branches, dataset, constraints, config, state, init_labels=None):
        config.validate()
        if len(branches) != dataset.n_views or state.n_views != dataset.n_views:
            raise ShapeError("branch, view and center counts must agree")
        if config.uses_constraints and (constraints is None or len(constraints) == 0):
            raise ConfigError("the pairwise-constraint loss is enabled but no constraints were supplied")
        if constraints is not None and len(constraints) and constraints.n != dataset.n:
            if max(constraints.i.max(), constraints.k.max()) >= dataset.n:
                raise ConfigError("constraint indices exceed the dataset size")
        if state.n_clusters != config.k:
            raise ConfigError(f"cluster state has {state.n_clusters} clusters, config says {config.k}")

        self.dataset = dataset
        self.constraints = constraints
        self.config = config
        self.branches = [b.copy() for b in branches]
        self.state = state.copy()
        self.state.alpha = config.alpha
        self.interval = config.interval_for(dataset.n)
        self.rng = np.random.default_rng(config.seed)
        self.adam = AdamState(lr=config.lr)
        self.t = 0
        self.order = np.zeros(0, dtype=np.int64)
        self.pos = 0
        self.labels = None if init_labels is None else np.asarray(init_labels, dtype=np.int64)
        self.P = None
        self.history: list[TrainRecord] = []
        self.halted = False

    # parameters updated by the optimizer, in a fixed order
    def _params(self):
        out = []
        for b in self.branches:
            out.extend(b.encoder_params())
            if self.config.fsp:
                out.extend(b.decoder_params())
        return out + self.state.params()

    def _next_batch(self):
        n, m = self.dataset.n, self.config.batch_size
        if self.pos >= self.order.size:
            self.order = self.rng.permutation(n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + m]
        self.pos += idx.size
        return idx

    def losses_full(self):
        """Full-dataset losses and pseudo-labels at the current parameters."""
        views = self.dataset.views
        z = embed(self.branches, views)
        q = fusion.soft_assignment(z, self.state)
        rec = [float(np.sum((decode(b, zv) - x) ** 2)) for b, zv, x in zip(self.branches, z, views)]
        return z, q, rec

    def refresh(self):
        cfg = self.config
        z, q, rec = self.losses_full()
        p = fusion.target_distribution(q)
        labels = fusion.pseudo_labels(q)
        fraction, halt = None, False
        if self.t > 0 and self.labels is not None:
            halt, fraction = stopping_check(self.labels, labels, cfg.delta)
        self.P, self.labels = p, labels

        l_con = 0.0
        if cfg.uses_constraints:
            l_con = fusion.constraint_loss(np.hstack(z), self.constraints)
        try:
            l_clu = fusion.clustering_loss(p, q)
        except NumericalError as exc:
            raise DivergenceError(f"non-finite loss at iteration {self.t}", iteration=self.t) from exc
        report = fusion.total_loss(sum(rec) if cfg.fsp else 0.0, l_clu, l_con, cfg.gamma, cfg.effective_lam)
        if not np.isfinite(report.L):
            raise DivergenceError(f"non-finite loss at iteration {self.t}", iteration=self.t)
        metrics = None
        if self.dataset.labels is not None:
            metrics = evaluate(self.dataset.labels, labels)
        self.history.append(TrainRecord(self.t, report, fraction, rec, metrics))
        log.debug("iter %d L=%.6g change=%s metrics=%s", self.t, report.L, fraction, metrics)
        if halt:
            self.halted = True
        return halt

    def step(self):
        """One iteration: refresh when due, then one optimizer update.

        Returns False once training has halted or hit the iteration cap.
        """
        cfg = self.config
        if self.halted or self.t >= cfg.max_iter:
            return False
        if self.t % self.interval == 0 and self.refresh():
            return False

        views = self.dataset.views
        idx = self._next_batch()
        scale = 1.0 / idx.size
        n_views = len(views)

        enc_caches, zb = [], []
        for b, x in zip(self.branches, views):
            out, cache = forward(b.encoder, x[idx])
            zb.append(out)
            enc_caches.append(cache)
        dz = [np.zeros_like(zv) for zv in zb]
        dec_grads = [None] * n_views
        objective = 0.0

        if cfg.fsp:
            for v, (b, x) in enumerate(zip(self.branches, views)):
                xhat, cache = forward(b.decoder, zb[v])
                diff = xhat - x[idx]
                objective += scale * float(np.sum(diff * diff))
                grads, dzr = backward(b.decoder, cache, 2.0 * scale * diff)
                dec_grads[v] = flatten_grads(grads)
                dz[v] += dzr

        dcenters = [np.zeros_like(m) for m in self.state.centers]
        dlogits = np.zeros_like(self.state.weight_logits)
        if cfg.gamma > 0:
            pb = self.P[idx]
            try:
                l_clu = fusion.clustering_loss(pb, fusion.soft_assignment(zb, self.state))
            except NumericalError as exc:
                raise DivergenceError(f"non-finite loss at iteration {self.t}", iteration=self.t) from exc
            objective += cfg.gamma * scale * l_clu
            gz, gm, gw = fusion.grad_clu(zb, self.state, pb)
            w = cfg.gamma * scale
            for v in range(n_views):
                dz[v] += w * gz[v]
                dcenters[v] = w * gm[v]
            dlogits = w * gw

        enc_grads = []
        for v, b in enumerate(self.branches):
            grads, _ = backward(b.encoder, enc_caches[v], dz[v])
            enc_grads.append(flatten_grads(grads))

        if cfg.uses_constraints:
            objective += self._constraint_grads(enc_grads, scale)

        if not np.isfinite(objective):
            raise DivergenceError(f"non-finite loss at iteration {self.t}", iteration=self.t)

        grads = []
        for v in range(n_views):
            grads.extend(enc_grads[v])
            if cfg.fsp:
                grads.extend(dec_grads[v])
        grads.extend(dcenters)
        grads.append(dlogits)
        adam_step(self.adam, self._params(), grads)
        self.t += 1
        return True

    def _constraint_grads(self, enc_grads, scale):
        """Sampled constraint loss; adds encoder gradients in place, returns its objective share."""
        cfg, cs, views = self.config, self.constraints, self.dataset.views
        total = len(cs)
        count = min(cfg.batch_size, total)
        pick = np.sort(self.rng.choice(total, size=count, replace=False))
        ends, inverse = np.unique(np.concatenate([cs.i[pick], cs.k[pick]]), return_inverse=True)
        local = ConstraintSet(inverse[:count], inverse[count:], cs.c[pick], ends.size)
        weight = cfg.lam * scale * total / count

        outs, caches = [], []
        for b, x in zip(self.branches, views):
            out, cache = forward(b.encoder, x[ends])
            outs.append(out)
            caches.append(cache)
        zc = np.hstack(outs)
        value = weight * fusion.constraint_loss(zc, local)
        gz = fusion.split_views(weight * fusion.grad_con(zc, local), [o.shape[1] for o in outs])
        for v, b in enumerate(self.branches):
            grads, _ = backward(b.encoder, caches[v], gz[v])
            for acc_g, g in zip(enc_grads[v], flatten_grads(grads)):
                acc_g += g
        return value

    def run(self) -> FinetuneResult:
        while self.step():
            pass
        return self.result()

    def result(self) -> FinetuneResult:
        return FinetuneResult(
            self.labels.copy() if self.labels is not None else None,
            self.state.copy(),
            [b.copy() for b in self.branches],
            list(self.history),
            self.t,
            self.halted,
        )

    # ---- checkpoint support

    def progress_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "t": self.t,
            "order": self.order.tolist(),
            "pos": self.pos,
            "labels": None if self.labels is None else self.labels.tolist(),
            "P": None if self.P is None else self.P.tolist(),
            "halted": self.halted,
            "rng": self.rng.bit_generator.state,
            "adam": self.adam.to_dict(),
            "history": [r.to_dict() for r in self.history],
        }

    @classmethod
    def resume(cls, checkpoint, dataset, constraints=None) -> "Finetuner":
        prog = checkpoint.progress
        if prog is None:
            raise PreconditionError("checkpoint holds no finetuning progress to resume")
        config = TrainingConfig(**prog["config"])
        ft = cls(checkpoint.branches, dataset, constraints, config, checkpoint.state)
        # adopt the stored objects directly so the optimizer moments stay aligned
        ft.branches = checkpoint.branches
        ft.state = checkpoint.state
        ft.t = prog["t"]
        ft.order = np.asarray(prog["order"], dtype=np.int64)
        ft.pos = prog["pos"]
        ft.labels = None if prog["labels"] is None else np.asarray(prog["labels"], dtype=np.int64)
        ft.P = None if prog["P"] is None else np.asarray(prog["P"], dtype=np.float64).reshape(dataset.n, -1)
        ft.halted = prog["halted"]
        ft.rng.bit_generator.state = prog["rng"]
        ft.adam = AdamState.from_dict(prog["adam"])
        ft.history = [TrainRecord.from_dict(r) for r in prog["history"]]
        return ft


def finetune(branches, dataset, constraints, config, state=None, init_labels=None) -> FinetuneResult:
    """Initialize (if needed) and run finetuning to the stopping criterion or ``max_iter``."""
    config.validate()
    if state is None:
        state, init_labels = init_cluster_state(branches, dataset, config.k, config.seed, config.alpha)
    return Finetuner(branches, dataset, constraints, config, state, init_labels).run()


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    branches: list
    state: ClusterState | None = None
    progress: dict | None = None


def save_checkpoint(path, branches, state=None, finetuner=None):
    payload = {
        "branches": [b.to_dict() for b in branches],
        "cluster_state": None if state is None else state.to_dict(),
        "progress": None if finetuner is None else finetuner.progress_dict(),
    }
    write_versioned(path, CHECKPOINT_MAGIC, payload)


def save_finetuner(path, finetuner: Finetuner):
    save_checkpoint(path, finetuner.branches, finetuner.state, finetuner)


def load_checkpoint(path) -> Checkpoint:
    d = read_versioned(path, CHECKPOINT_MAGIC)
    try:
        branches = [AutoencoderBranch.from_dict(b) for b in d["branches"]]
        state = None if d["cluster_state"] is None else ClusterState.from_dict(d["cluster_state"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return Checkpoint(branches, state, d.get("progress"))
