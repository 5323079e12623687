"""Per-view fully connected autoencoders and their unsupervised pretraining."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, PreconditionError, ShapeError
from .nncore import AdamState, DenseLayer, adam_step, backward, forward
from .serialize import read_versioned, write_versioned

log = logging.getLogger(__name__)

BRANCH_MAGIC = "MVSC-BRANCH"

# fully connected encoder shapes: first view, then every additional view
_REFERENCE_SHAPES = [([500, 500, 2000], 10), ([500, 256], 50)]
_REFERENCE_WIDTH = 500
_MIN_HIDDEN = 64


@dataclass
class AutoencoderBranch:
    encoder: list
    decoder: list

    def __post_init__(self):
        if not self.encoder or not self.decoder:
            raise ShapeError("encoder and decoder need at least one layer each")
        enc_widths = [self.encoder[0].in_dim] + [l.out_dim for l in self.encoder]
        dec_widths = [self.decoder[0].in_dim] + [l.out_dim for l in self.decoder]
        if dec_widths != enc_widths[::-1]:
            raise ShapeError(f"decoder widths {dec_widths} do not mirror encoder {enc_widths}")
        for seq in (self.encoder, self.decoder):
            for a, b in zip(seq, seq[1:]):
                if a.out_dim != b.in_dim:
                    raise ShapeError("consecutive layer widths disagree")

    @property
    def input_dim(self) -> int:
        return self.encoder[0].in_dim

    @property
    def embedding_dim(self) -> int:
        return self.encoder[-1].out_dim

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [l.out_dim for l in self.encoder]

    def encoder_params(self) -> list[np.ndarray]:
        return [p for layer in self.encoder for p in layer.params()]

    def decoder_params(self) -> list[np.ndarray]:
        return [p for layer in self.decoder for p in layer.params()]

    def params(self) -> list[np.ndarray]:
        return self.encoder_params() + self.decoder_params()

    def copy(self) -> "AutoencoderBranch":
        return AutoencoderBranch([l.copy() for l in self.encoder], [l.copy() for l in self.decoder])

    def to_dict(self) -> dict:
        def dump(layers):
            return [
                {"weight": l.weight.tolist(), "bias": l.bias.tolist(), "activation": l.activation}
                for l in layers
            ]

        return {"widths": self.widths, "encoder": dump(self.encoder), "decoder": dump(self.decoder)}

    @classmethod
    def from_dict(cls, d) -> "AutoencoderBranch":
        def load(items):
            return [
                DenseLayer(
                    np.asarray(it["weight"], dtype=np.float64).reshape(len(it["bias"]), -1),
                    np.asarray(it["bias"], dtype=np.float64),
                    it["activation"],
                )
                for it in items
            ]

        branch = cls(load(d["encoder"]), load(d["decoder"]))
        if branch.widths != list(d["widths"]):
            raise ShapeError(f"stored widths {d['widths']} disagree with layer shapes {branch.widths}")
        return branch


def build_branch(input_dim, hidden, embedding_dim, seed=0, zero=False) -> AutoencoderBranch:
    """Mirror-image autoencoder with ReLU inside and linear embedding/output layers."""
    hidden = list(hidden)
    if embedding_dim < 1 or input_dim < 1 or any(h < 1 for h in hidden):
        raise ShapeError("all layer widths must be positive")
    if embedding_dim >= input_dim:
        raise ShapeError(f"embedding width {embedding_dim} must be below input width {input_dim}")
    widths = [input_dim] + hidden + [embedding_dim]
    seeds = np.random.default_rng(seed).integers(0, 2**32, size=2 * (len(widths) - 1))

    def stack(ws, seed_block):
        layers = []
        for depth, (a, b) in enumerate(zip(ws, ws[1:])):
            act = "identity" if depth == len(ws) - 2 else "relu"
            if zero:
                layers.append(DenseLayer.zeros(a, b, act))
            else:
                layers.append(DenseLayer.create(a, b, act, seed=int(seed_block[depth])))
        return layers

    half = len(widths) - 1
    return AutoencoderBranch(stack(widths, seeds[:half]), stack(widths[::-1], seeds[half:]))


def default_layer_spec(view_index, input_dim) -> tuple[list[int], int]:
    """Hidden widths and embedding width for a view.

    Uses the reference SAE shapes ([500, 500, 2000] -> 10 for the first view,
    [500, 256] -> 50 for the rest) shrunk proportionally when the input is
    narrower than 500. Hidden widths never shrink below 64 and the embedding
    is capped at half the input width.
    """
    hidden, emb = _REFERENCE_SHAPES[0 if view_index == 0 else 1]
    scale = min(1.0, input_dim / _REFERENCE_WIDTH)
    hidden = [max(min(h, _MIN_HIDDEN), math.ceil(h * scale)) for h in hidden]
    emb = max(1, min(emb, input_dim // 2))
    return hidden, emb


def build_branches(dims, seed=0, layer_specs=None) -> list[AutoencoderBranch]:
    branches = []
    for v, d in enumerate(dims):
        hidden, emb = layer_specs[v] if layer_specs is not None else default_layer_spec(v, d)
        branches.append(build_branch(d, hidden, emb, seed=seed * 1000 + v))
    return branches


def _check_input(branch, x, width, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what} expects (n, {width}) input, got {x.shape}")
    return x


def encode(branch: AutoencoderBranch, x) -> np.ndarray:
    x = _check_input(branch, x, branch.input_dim, "encode")
    return forward(branch.encoder, x)[0]


def decode(branch: AutoencoderBranch, z) -> np.ndarray:
    z = _check_input(branch, z, branch.embedding_dim, "decode")
    return forward(branch.decoder, z)[0]


def reconstruction_loss(branch: AutoencoderBranch, x) -> float:
    """Sum of squared reconstruction errors over samples and features."""
    x = np.asarray(x, dtype=np.float64)
    diff = decode(branch, encode(branch, x)) - x
    return float(np.sum(diff * diff))


def total_reconstruction_loss(branches, views) -> float:
    return float(sum(reconstruction_loss(b, x) for b, x in zip(branches, views)))


def flatten_grads(layer_grads) -> list[np.ndarray]:
    return [g for pair in layer_grads for g in pair]


def reconstruction_grads(branch: AutoencoderBranch, x, scale=1.0):
    """Loss and gradients of ``scale * sum ||x - g(f(x))||^2``.

    Returns ``(loss, encoder_grads, decoder_grads)`` with gradients flattened
    in the order of ``encoder_params()`` / ``decoder_params()``; ``loss`` is
    unscaled.
    """
    x = _check_input(branch, x, branch.input_dim, "reconstruction_grads")
    z, enc_cache = forward(branch.encoder, x)
    xhat, dec_cache = forward(branch.decoder, z)
    diff = xhat - x
    loss = float(np.sum(diff * diff))
    dec_grads, dz = backward(branch.decoder, dec_cache, 2.0 * scale * diff)
    enc_grads, _ = backward(branch.encoder, enc_cache, dz)
    return loss, flatten_grads(enc_grads), flatten_grads(dec_grads)


def pretrain(branches, dataset, epochs=400, batch_size=256, lr=1e-3, seed=0, callback=None):
    """Train each branch on its own view by minimizing reconstruction error.

    Only ``dataset.views`` is read. Each step minimizes the batch mean of the
    per-sample squared error; the final short batch of an epoch is kept.

    Returns ``history``, an (epochs, V) array of per-epoch mean per-sample losses.
    """
    if epochs < 1:
        raise PreconditionError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise PreconditionError(f"batch_size must be >= 1, got {batch_size}")
    views = dataset.views
    if len(views) != len(branches):
        raise ShapeError(f"{len(branches)} branches for {len(views)} views")
    n = views[0].shape[0]
    rng = np.random.default_rng(seed)
    states = [AdamState(lr=lr) for _ in branches]
    history = np.zeros((epochs, len(branches)))

    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = np.zeros(len(branches))
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            for v, (branch, x) in enumerate(zip(branches, views)):
                loss, eg, dg = reconstruction_grads(branch, x[idx], scale=1.0 / idx.size)
                if not np.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite reconstruction loss in view {v} at epoch {epoch}",
                        view=v,
                        epoch=epoch,
                    )
                sums[v] += loss
                adam_step(states[v], branch.params(), eg + dg)
        history[epoch] = sums / n
        if callback is not None:
            callback(epoch, history[epoch])
        if epoch % 50 == 0 or epoch == epochs - 1:
            log.debug("pretrain epoch %d losses %s", epoch, history[epoch])
    return history


def save_branch(branch: AutoencoderBranch, path):
    write_versioned(path, BRANCH_MAGIC, branch.to_dict())


def load_branch(path) -> AutoencoderBranch:
    return AutoencoderBranch.from_dict(read_versioned(path, BRANCH_MAGIC))
