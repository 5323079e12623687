"""Clustering head: view weights, fused soft assignment, target distribution,
the three finetuning losses and their analytic gradients.

Notation used in the code: for sample i, cluster j, view v

    dist[v][i, j]   = ||z_i^v - m_j^v||^2 / alpha
    kern[v][i, j]   = (1 + dist)^(-(alpha + 1) / 2)
    mix[i, j]       = sum_v pi[j, v] * kern[v][i, j]
    q[i, j]         = mix[i, j] / sum_j' mix[i, j']
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError

Q_FLOOR = 1e-12


@dataclass
class ClusterState:
    centers: list  # per view, (K, d_v)
    weight_logits: np.ndarray  # (K, V)
    alpha: float = 1.0

    def __post_init__(self):
        self.centers = [np.asarray(m, dtype=np.float64) for m in self.centers]
        self.weight_logits = np.asarray(self.weight_logits, dtype=np.float64)
        k = self.centers[0].shape[0] if self.centers else 0
        if k < 1:
            raise ShapeError("need at least one cluster")
        if any(m.ndim != 2 or m.shape[0] != k for m in self.centers):
            raise ShapeError("every view needs a (K, d_v) center matrix")
        if self.weight_logits.shape != (k, len(self.centers)):
            raise ShapeError(
                f"weight logits shape {self.weight_logits.shape}, expected {(k, len(self.centers))}"
            )
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def n_clusters(self) -> int:
        return self.centers[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.centers)

    @property
    def view_dims(self) -> list[int]:
        return [m.shape[1] for m in self.centers]

    def params(self) -> list[np.ndarray]:
        return self.centers + [self.weight_logits]

    def copy(self) -> "ClusterState":
        return ClusterState([m.copy() for m in self.centers], self.weight_logits.copy(), self.alpha)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "centers": [m.tolist() for m in self.centers],
            "weight_logits": self.weight_logits.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "ClusterState":
        k = len(d["weight_logits"])
        centers = [np.asarray(m, dtype=np.float64).reshape(k, -1) for m in d["centers"]]
        return cls(centers, np.asarray(d["weight_logits"], dtype=np.float64).reshape(k, -1), d["alpha"])


@dataclass
class AssignmentState:
    Q: np.ndarray
    P: np.ndarray
    S: np.ndarray


@dataclass
class LossReport:
    L_rec: float
    L_clu: float
    L_con: float
    L: float
    gamma: float
    lam: float


def view_weights(w) -> np.ndarray:
    """Row-wise softmax over views: pi[j, v] = exp(w[j, v]) / sum_v' exp(w[j, v'])."""
    w = np.asarray(w, dtype=np.float64)
    e = np.exp(w - w.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _kernels(views_z, state: ClusterState):
    if len(views_z) != state.n_views:
        raise ShapeError(f"{len(views_z)} embedding views for {state.n_views} center views")
    alpha = state.alpha
    dists, kerns = [], []
    for z, m in zip(views_z, state.centers):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != m.shape[1]:
            raise ShapeError(f"embedding shape {z.shape} does not match centers {m.shape}")
        diff = z[:, None, :] - m[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff) / alpha
        dists.append(d)
        kerns.append((1.0 + d) ** (-(alpha + 1.0) / 2.0))
    return dists, kerns


def soft_assignment_parts(views_z, state: ClusterState) -> dict:
    """Soft assignment plus the intermediates the gradient needs."""
    dists, kerns = _kernels(views_z, state)
    pi = view_weights(state.weight_logits)
    mix = sum(pi[:, v][None, :] * kerns[v] for v in range(state.n_views))
    norm = mix.sum(axis=1, keepdims=True)
    return {"dist": dists, "kern": kerns, "pi": pi, "mix": mix, "norm": norm, "Q": mix / norm}


def soft_assignment(views_z, state: ClusterState) -> np.ndarray:
    """Fused Student-t soft assignment Q (n, K); rows sum to 1."""
    return soft_assignment_parts(views_z, state)["Q"]


def target_distribution(q) -> np.ndarray:
    """Sharpened target p_ij proportional to q_ij^2 / f_j, f_j = sum_i q_ij.

    Clusters with zero soft frequency get zero target mass.
    """
    q = np.asarray(q, dtype=np.float64)
    freq = q.sum(axis=0)
    live = freq > 0
    weight = np.zeros_like(q)
    weight[:, live] = q[:, live] ** 2 / freq[live]
    return weight / weight.sum(axis=1, keepdims=True)


def clustering_loss(p, q) -> float:
    """KL(P || Q) summed over samples, with 0 log 0 = 0 and q floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"P shape {p.shape} vs Q shape {q.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise NumericalError("non-finite entries in P or Q")
    mask = p > 0
    pm = p[mask]
    val = float(np.sum(pm * (np.log(pm) - np.log(np.maximum(q[mask], Q_FLOOR)))))
    if not np.isfinite(val):
        raise NumericalError("non-finite clustering loss")
    return val


def _check_pairs(z, constraints):
    z = np.asarray(z, dtype=np.float64)
    if len(constraints) and (
        max(constraints.i.max(), constraints.k.max()) >= z.shape[0]
        or min(constraints.i.min(), constraints.k.min()) < 0
    ):
        raise IndexError(f"constraint index out of range for {z.shape[0]} embeddings")
    return z


def constraint_loss(z_concat, constraints) -> float:
    """sum_i sum_k c_ik ||z_i - z_k||^2 over the symmetric matrix.

    Every stored unordered pair therefore counts twice.
    """
    z = _check_pairs(z_concat, constraints)
    if len(constraints) == 0:
        return 0.0
    diff = z[constraints.i] - z[constraints.k]
    return float(2.0 * np.sum(constraints.c * np.einsum("ij,ij->i", diff, diff)))


def grad_con(z_concat, constraints) -> np.ndarray:
    """Gradient of constraint_loss w.r.t. every row of ``z_concat``.

    Under the double-count convention each pair adds 4 c (z_i - z_k) to row i
    and the negative to row k.
    """
    z = _check_pairs(z_concat, constraints)
    grad = np.zeros_like(z)
    if len(constraints) == 0:
        return grad
    contrib = 4.0 * constraints.c[:, None] * (z[constraints.i] - z[constraints.k])
    np.add.at(grad, constraints.i, contrib)
    np.add.at(grad, constraints.k, -contrib)
    return grad


def split_views(z_concat, dims) -> list[np.ndarray]:
    """Cut a concatenated (n, sum d_v) matrix back into per-view blocks."""
    z_concat = np.asarray(z_concat)
    if z_concat.shape[1] != sum(dims):
        raise ShapeError(f"width {z_concat.shape[1]} does not match view dims {dims}")
    return np.split(z_concat, np.cumsum(dims)[:-1], axis=1)


def total_loss(L_rec, L_clu, L_con, gamma, lam) -> LossReport:
    return LossReport(
        float(L_rec), float(L_clu), float(L_con), float(L_rec + gamma * L_clu + lam * L_con),
        float(gamma), float(lam),
    )


def grad_clu(views_z, state: ClusterState, p):
    """Gradients of KL(P || Q) with P held fixed.

    Returns ``(dz, dcenters, dlogits)``: per-view (n, d_v) arrays, per-view
    (K, d_v) arrays and a (K, V) array.
    """
    parts = soft_assignment_parts(views_z, state)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != parts["Q"].shape:
        raise ShapeError(f"P shape {p.shape} vs Q shape {parts['Q'].shape}")
    alpha = state.alpha
    mix, norm, pi = parts["mix"], parts["norm"], parts["pi"]

    # L = sum_ij p_ij (log p_ij - log mix_ij + log norm_i)
    # dL/dmix_ij = -p_ij / mix_ij + (sum_j' p_ij') / norm_i
    # mix is floored like q so a vanishing kernel cannot blow up the gradient
    g_mix = -p / np.maximum(mix, Q_FLOOR * norm) + p.sum(axis=1, keepdims=True) / norm

    dz, dcenters = [], []
    g_pi = np.zeros_like(pi)
    for v, (z, m) in enumerate(zip(views_z, state.centers)):
        z = np.asarray(z, dtype=np.float64)
        kern, dist = parts["kern"][v], parts["dist"][v]
        g_pi[:, v] = np.sum(g_mix * kern, axis=0)
        # dkern/ddist = -(alpha+1)/2 * (1+dist)^(-(alpha+3)/2) = -(alpha+1)/2 * kern / (1+dist)
        g_dist = g_mix * pi[:, v][None, :] * (-(alpha + 1.0) / 2.0) * kern / (1.0 + dist)
        # ddist/dz_i = 2 (z_i - m_j) / alpha ; ddist/dm_j = -2 (z_i - m_j) / alpha
        coef = 2.0 / alpha * g_dist
        dz.append(coef.sum(axis=1, keepdims=True) * z - coef @ m)
        dcenters.append(-(coef.T @ z - coef.sum(axis=0)[:, None] * m))

    # softmax backprop per cluster row
    dlogits = pi * (g_pi - np.sum(pi * g_pi, axis=1, keepdims=True))
    return dz, dcenters, dlogits


def pseudo_labels(q) -> np.ndarray:
    """argmax_j q_ij per row; ties go to the lowest index."""
    return np.argmax(np.asarray(q), axis=1).astype(np.int64)
