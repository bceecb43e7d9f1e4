"""Neural tensor completion: multi-init embeddings aggregated by a small
convolutional head.

For an index tuple, each initialization group contributes an R x M matrix
(one embedding row per mode, stacked as columns). The S groups form the
input channels of a two-stage convolution (first across modes, then across
components) followed by a dense layer and a scalar output, with rectifiers
between hidden layers. Forward and backward passes are written out
explicitly so training stays deterministic and the gradients are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DesignSpace, Normalizer, ObservationSet
from .errors import ContractError, DegenerateDataError


@dataclass
class EmbeddingBank:
    """S initialization groups, each holding one I_m x R matrix per mode."""

    groups: list  # list[list[np.ndarray]]

    def __post_init__(self):
        if not self.groups or not all(self.groups):
            raise ContractError("embedding bank needs at least one group with one mode")
        self.groups = [[np.asarray(e, dtype=float) for e in group] for group in self.groups]
        ranks = {e.shape[1] for group in self.groups for e in group}
        if len(ranks) != 1:
            raise ContractError("all embeddings must share one column count")
        mode_counts = {len(group) for group in self.groups}
        if len(mode_counts) != 1:
            raise ContractError("all groups must cover the same modes")
        shapes = {tuple(e.shape[0] for e in group) for group in self.groups}
        if len(shapes) != 1:
            raise ContractError("all groups must share the mode sizes")
        if not all(np.all(np.isfinite(e)) for group in self.groups for e in group):
            raise ContractError("embedding entries must be finite")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_modes(self) -> int:
        return len(self.groups[0])

    @property
    def rank(self) -> int:
        return self.groups[0][0].shape[1]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(e.shape[0] for e in self.groups[0])


@dataclass
class ConvHead:
    """Aggregation head: mode-axis conv, rank-axis conv, dense, scalar out.

    mode_kernels (C, S, M) collapse the mode axis of the (S, R, M) stack,
    rank_kernels (C, C, R) collapse the component axis, then a dense layer
    (H, C) and an output vector (H,) produce the scalar.
    """

    mode_kernels: np.ndarray
    mode_bias: np.ndarray
    rank_kernels: np.ndarray
    rank_bias: np.ndarray
    dense_w: np.ndarray
    dense_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    def __post_init__(self):
        arrays = [
            np.asarray(getattr(self, name), dtype=float)
            for name in (
                "mode_kernels",
                "mode_bias",
                "rank_kernels",
                "rank_bias",
                "dense_w",
                "dense_b",
                "out_w",
                "out_b",
            )
        ]
        (
            self.mode_kernels,
            self.mode_bias,
            self.rank_kernels,
            self.rank_bias,
            self.dense_w,
            self.dense_b,
            self.out_w,
            self.out_b,
        ) = arrays
        c = self.mode_kernels.shape[0]
        if self.mode_bias.shape != (c,):
            raise ContractError("mode bias width must match mode kernel count")
        if self.rank_kernels.ndim != 3 or self.rank_kernels.shape[1] != c:
            raise ContractError("rank kernels must consume the mode-conv channels")
        c2 = self.rank_kernels.shape[0]
        if self.rank_bias.shape != (c2,):
            raise ContractError("rank bias width must match rank kernel count")
        if self.dense_w.ndim != 2 or self.dense_w.shape[1] != c2:
            raise ContractError("dense layer must consume the rank-conv channels")
        h = self.dense_w.shape[0]
        if self.dense_b.shape != (h,) or self.out_w.shape != (h,):
            raise ContractError("dense bias and output weights must match the hidden width")
        if self.out_b.shape != ():
            raise ContractError("output bias must be a scalar")

    @property
    def channels(self) -> int:
        return self.mode_kernels.shape[0]

    @property
    def hidden_units(self) -> int:
        return self.dense_w.shape[0]

    @property
    def n_groups(self) -> int:
        return self.mode_kernels.shape[1]

    @property
    def n_modes(self) -> int:
        return self.mode_kernels.shape[2]

    @property
    def rank(self) -> int:
        return self.rank_kernels.shape[2]


def init_embedding_bank(shape, rank: int, n_groups: int, seed: int) -> EmbeddingBank:
    """Seeded Gaussian(0, 0.5) embeddings, one independent draw per group."""
    if n_groups < 1:
        raise ContractError("need at least one initialization group")
    rng = np.random.default_rng(seed)
    groups = [
        [rng.normal(0.0, 0.5, size=(int(s), rank)) for s in shape] for _ in range(n_groups)
    ]
    return EmbeddingBank(groups)


def init_conv_head(
    rank: int, n_modes: int, n_groups: int, channels: int, hidden_units: int, seed: int
) -> ConvHead:
    """He-scaled Gaussian kernels with small positive biases (keeps the
    rectifiers initially active)."""
    rng = np.random.default_rng(seed)

    def draw(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    return ConvHead(
        mode_kernels=draw((channels, n_groups, n_modes), n_groups * n_modes),
        mode_bias=np.full(channels, 0.01),
        rank_kernels=draw((channels, channels, rank), channels * rank),
        rank_bias=np.full(channels, 0.01),
        dense_w=draw((hidden_units, channels), channels),
        dense_b=np.full(hidden_units, 0.01),
        out_w=draw((hidden_units,), hidden_units),
        out_b=np.zeros(()),
    )


def summing_head(n_groups: int, rank: int, n_modes: int) -> ConvHead:
    """Head whose output is the plain sum of all stack entries (exact on
    non-negative pre-activations); the reference configuration for shape and
    reduction checks."""
    return ConvHead(
        mode_kernels=np.ones((1, n_groups, n_modes)),
        mode_bias=np.zeros(1),
        rank_kernels=np.ones((1, 1, rank)),
        rank_bias=np.zeros(1),
        dense_w=np.ones((1, 1)),
        dense_b=np.zeros(1),
        out_w=np.ones(1),
        out_b=np.zeros(()),
    )


def _check_compatible(bank: EmbeddingBank, head: ConvHead) -> None:
    if bank.n_groups != head.n_groups or bank.n_modes != head.n_modes:
        raise ContractError("bank and head disagree on groups or modes")
    if bank.rank != head.rank:
        raise ContractError("bank and head disagree on rank")


def _gather(bank: EmbeddingBank, indices: np.ndarray) -> np.ndarray:
    """Stack gathered embedding rows into (n, S, R, M)."""
    n = indices.shape[0]
    x = np.empty((n, bank.n_groups, bank.rank, bank.n_modes))
    for s, group in enumerate(bank.groups):
        for m, emb in enumerate(group):
            x[:, s, :, m] = emb[indices[:, m]]
    return x


def _validate_indices(indices, shape) -> np.ndarray:
    indices = np.atleast_2d(np.asarray(indices, dtype=np.int64))
    if indices.shape[1] != len(shape):
        raise IndexError(f"index arity {indices.shape[1]} != mode count {len(shape)}")
    if indices.size and (indices.min() < 0 or np.any(indices >= np.asarray(shape))):
        raise IndexError("index out of range")
    return indices


def _forward(bank: EmbeddingBank, head: ConvHead, indices: np.ndarray):
    """Batched forward pass; returns predictions plus the cache backward needs."""
    x = _gather(bank, indices)
    z1 = np.einsum("nsrm,csm->ncr", x, head.mode_kernels) + head.mode_bias[None, :, None]
    a1 = np.maximum(z1, 0.0)
    z2 = np.einsum("ncr,dcr->nd", a1, head.rank_kernels) + head.rank_bias
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ head.dense_w.T + head.dense_b
    a3 = np.maximum(z3, 0.0)
    preds = a3 @ head.out_w + head.out_b
    return preds, (x, z1, a1, z2, a2, z3, a3)


def neural_forward(bank: EmbeddingBank, head: ConvHead, index) -> float:
    """Scalar prediction for one index tuple."""
    _check_compatible(bank, head)
    indices = _validate_indices([tuple(index)], bank.shape)
    preds, _ = _forward(bank, head, indices)
    return float(preds[0])


def predict_batch(bank: EmbeddingBank, head: ConvHead, indices) -> np.ndarray:
    _check_compatible(bank, head)
    indices = _validate_indices(indices, bank.shape)
    if indices.size == 0:
        return np.zeros(0)
    preds, _ = _forward(bank, head, indices)
    return preds


def _backward(bank: EmbeddingBank, head: ConvHead, indices, cache, dpreds):
    """Gradients of sum(dpreds * preds) in canonical parameter order."""
    x, z1, a1, z2, a2, z3, a3 = cache

    g_out_b = np.asarray(dpreds.sum())
    g_out_w = a3.T @ dpreds
    da3 = np.outer(dpreds, head.out_w)
    dz3 = da3 * (z3 > 0)
    g_dense_w = dz3.T @ a2
    g_dense_b = dz3.sum(axis=0)
    da2 = dz3 @ head.dense_w
    dz2 = da2 * (z2 > 0)
    g_rank_k = np.einsum("nd,ncr->dcr", dz2, a1)
    g_rank_b = dz2.sum(axis=0)
    da1 = np.einsum("nd,dcr->ncr", dz2, head.rank_kernels)
    dz1 = da1 * (z1 > 0)
    g_mode_k = np.einsum("ncr,nsrm->csm", dz1, x)
    g_mode_b = dz1.sum(axis=(0, 2))
    dx = np.einsum("ncr,csm->nsrm", dz1, head.mode_kernels)

    g_bank = [[np.zeros_like(e) for e in group] for group in bank.groups]
    for s in range(bank.n_groups):
        for m in range(bank.n_modes):
            np.add.at(g_bank[s][m], indices[:, m], dx[:, s, :, m])

    flat = [g for group in g_bank for g in group]
    flat += [g_mode_k, g_mode_b, g_rank_k, g_rank_b, g_dense_w, g_dense_b, g_out_w, g_out_b]
    return flat


def pack_params(bank: EmbeddingBank, head: ConvHead) -> list:
    """Canonical flat parameter list: embeddings group-major, then head."""
    flat = [e for group in bank.groups for e in group]
    flat += [
        head.mode_kernels,
        head.mode_bias,
        head.rank_kernels,
        head.rank_bias,
        head.dense_w,
        head.dense_b,
        head.out_w,
        head.out_b,
    ]
    return flat


def unpack_params(params: list, n_groups: int, n_modes: int):
    """Inverse of pack_params."""
    n_emb = n_groups * n_modes
    if len(params) != n_emb + 8:
        raise ContractError("parameter list has unexpected arity")
    groups = [
        [params[s * n_modes + m] for m in range(n_modes)] for s in range(n_groups)
    ]
    bank = EmbeddingBank(groups)
    head = ConvHead(*params[n_emb:])
    return bank, head


def neural_loss(bank: EmbeddingBank, head: ConvHead, obs: ObservationSet) -> float:
    """Masked MSE of the neural prediction over the observed entries."""
    if obs.n == 0:
        raise DegenerateDataError("masked MSE is undefined on an empty observation set")
    preds = predict_batch(bank, head, obs.indices)
    return float(np.mean((preds - obs.values) ** 2))


def neural_grad(bank: EmbeddingBank, head: ConvHead, obs: ObservationSet) -> list:
    """Exact masked-MSE gradient for every bank and head parameter, in
    pack_params order."""
    _check_compatible(bank, head)
    if obs.n == 0:
        raise DegenerateDataError("gradient is undefined on an empty observation set")
    indices = _validate_indices(obs.indices, bank.shape)
    preds, cache = _forward(bank, head, indices)
    dpreds = (2.0 / obs.n) * (preds - obs.values)
    return _backward(bank, head, indices, cache, dpreds)


@dataclass
class NeuralModel:
    """A trained neural completion model plus its usage context."""

    bank: EmbeddingBank
    head: ConvHead
    space: DesignSpace
    normalizer: Normalizer | None = None
    kind: str = "costco"

    @property
    def rank(self) -> int:
        return self.bank.rank

    @property
    def shape(self) -> tuple[int, ...]:
        return self.bank.shape

    def predict(self, indices) -> np.ndarray:
        return predict_batch(self.bank, self.head, indices)


def costco_fit(
    obs_train: ObservationSet,
    cfg,
    n_init_groups: int = 3,
    conv_channels: int = 8,
    hidden_units: int = 16,
):
    """Train embeddings and head jointly with the shared Adam engine."""
    from .optim import Trainable, _carve_validation, run_restarts

    if n_init_groups < 1:
        raise ContractError("need at least one initialization group")
    if obs_train.n == 0:
        raise DegenerateDataError("cannot fit on an empty observation set")
    shape = obs_train.space.shape()
    n_modes = len(shape)

    fit_obs, val_obs = _carve_validation(obs_train, cfg)

    def init(seed):
        bank = init_embedding_bank(shape, cfg.rank, n_init_groups, seed)
        head = init_conv_head(
            cfg.rank, n_modes, n_init_groups, conv_channels, hidden_units, seed + 1
        )
        return pack_params(bank, head)

    def objective(params):
        bank, head = unpack_params(params, n_init_groups, n_modes)
        preds, cache = _forward(bank, head, fit_obs.indices)
        residuals = preds - fit_obs.values
        loss = float(np.mean(residuals**2))
        grads = _backward(bank, head, fit_obs.indices, cache, (2.0 / fit_obs.n) * residuals)
        return loss, grads

    def loss_only(params):
        bank, head = unpack_params(params, n_init_groups, n_modes)
        return neural_loss(bank, head, fit_obs)

    def val_loss(params):
        bank, head = unpack_params(params, n_init_groups, n_modes)
        return neural_loss(bank, head, val_obs)

    trainable = Trainable(
        init=init,
        loss_and_grad=objective,
        loss=loss_only,
        val_loss=val_loss if val_obs is not None else None,
    )
    params, report = run_restarts(trainable, cfg)
    bank, head = unpack_params(params, n_init_groups, n_modes)
    model = NeuralModel(
        bank=bank,
        head=head,
        space=obs_train.space,
        normalizer=obs_train.normalizer,
    )
    return model, report
