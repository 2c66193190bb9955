"""Vector quantizers with sparse-regression reconstruction.

The family covers six variants:

``svq``
    Sparse quantization: each token is reconstructed as a least-squares
    combination of its nearest codewords. The support is the k nearest
    codewords (Euclidean); a ridge-regularized solve produces
    coefficients, and if more than ``t`` are nonzero only the ``t``
    largest-magnitude ones are kept and the system is re-solved on the
    reduced support.
``vq``
    Plain nearest-neighbor quantization.
``vq_cosine``
    Nearest neighbor under cosine similarity.
``vq_kmeans``
    Plain nearest-neighbor with a k-means-initialized codebook (the
    quantization step itself is identical to ``vq``).
``vq_recursive``
    Multi-stage residual quantization: each stage snaps the residual
    left by the previous stages to its own codebook.
``vq_adaptive``
    Sparse regression over the whole codebook (no nearest-neighbor
    snap); the support is the t largest-magnitude coefficients of a
    full ridge regression, and codewords move only through gradients of
    the reconstruction.

Every variant wires its output straight-through: the forward value is
the reconstruction, while the backward pass treats quantization as the
identity on its input. Codebooks learn through the commitment loss,
whose first term pulls selected codewords toward the tokens they
reconstruct.

Discrete choices (which codewords form a support) are made on detached
values and treated as constants of the step. The final least-squares
solve is part of the gradient graph, so codebook and encoder gradients
both see the exact reconstruction function that produced the forward
value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, NumericError, ShapeMismatchError, UsageError

VARIANT_TAGS = ("svq", "vq", "vq_cosine", "vq_kmeans", "vq_recursive", "vq_adaptive")


@dataclass
class SparseRegressionConfig:
    """Knobs of the sparse reconstruction.

    ``k_neighbors`` codewords form the candidate support, at most
    ``max_nonzeros`` survive. ``ridge`` keeps the normal equations
    solvable when neighbors are nearly collinear.
    """

    k_neighbors: int = 8
    max_nonzeros: int = 4
    nonnegative: bool = False
    ridge: float = 1e-8

    def validate(self, codebook_size: int) -> None:
        if not 1 <= self.max_nonzeros <= self.k_neighbors:
            raise ConfigurationError(
                f"need 1 <= max_nonzeros ({self.max_nonzeros}) <= "
                f"k_neighbors ({self.k_neighbors})")
        if self.k_neighbors > codebook_size:
            raise ConfigurationError(
                f"k_neighbors ({self.k_neighbors}) exceeds codebook size "
                f"({codebook_size})")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be nonnegative")


@dataclass
class QuantizerVariant:
    """Which quantizer to run and its variant-specific settings."""

    tag: str = "svq"
    stages: Optional[int] = None          # recursive only
    sparse_cfg: Optional[SparseRegressionConfig] = None   # svq / adaptive

    def validate(self) -> None:
        if self.tag not in VARIANT_TAGS:
            raise ConfigurationError(f"unknown quantizer variant {self.tag!r}")
        if self.stages is not None:
            if self.tag != "vq_recursive":
                raise ConfigurationError(
                    f"stages only applies to vq_recursive, not {self.tag}")
            if self.stages < 1:
                raise ConfigurationError("stages must be >= 1")
        if self.sparse_cfg is not None and self.tag not in ("svq", "vq_adaptive"):
            raise ConfigurationError(
                f"sparse regression settings do not apply to {self.tag}")

    def resolved_stages(self) -> int:
        return 3 if self.stages is None else self.stages

    def resolved_sparse_cfg(self) -> SparseRegressionConfig:
        return self.sparse_cfg or SparseRegressionConfig()


@dataclass
class Codebook:
    """A learnable matrix of codewords plus usage statistics."""

    Z: T.Tensor
    seed: int
    usage_counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.usage_counts is None:
            self.usage_counts = np.zeros(self.C, dtype=np.int64)

    @property
    def C(self) -> int:
        return self.Z.data.shape[0]

    @property
    def D(self) -> int:
        return self.Z.data.shape[1]

    @classmethod
    def random(cls, C: int, D: int, seed: int) -> "Codebook":
        cb = cls(Z=T.zeros((C, D), requires_grad=True), seed=seed)
        return init_codebook(cb, "random")

    def reset_usage(self) -> None:
        self.usage_counts[:] = 0


@dataclass
class QuantizeResult:
    """Outcome of quantizing a batch of tokens.

    ``quantized`` carries the reconstruction forward and the identity
    backward. ``codeword_indices`` is per-token: a single index for
    nearest-neighbor variants, a support row for sparse ones, one column
    per stage for the recursive one.
    """

    quantized: T.Tensor
    commitment_loss: T.Tensor
    codeword_indices: np.ndarray
    coefficients: Optional[np.ndarray] = None


@dataclass
class FrozenQuantize:
    """Snapshot of the discrete state and stop-gradient copies of one
    quantize call.

    Stop-gradient operands are constants of the defined derivative, so a
    finite-difference oracle has to hold them (and the discrete codeword
    selections) at their base-point values while parameters move. Passing
    a snapshot back into :func:`quantize` evaluates exactly that frozen
    surrogate; at the base point it reproduces the live forward values
    bit for bit.
    """

    codeword_indices: np.ndarray
    fallback: Optional[np.ndarray]
    correction: np.ndarray      # q - tokens at the base point
    tokens_frozen: np.ndarray   # sg[x] copy
    recon_frozen: np.ndarray    # sg[q] copy


# ---------------------------------------------------------------------------
# distance machinery
# ---------------------------------------------------------------------------

def _sq_distances(tokens: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances [n, C] via the quadratic expansion."""
    tn = (tokens * tokens).sum(axis=1)[:, None]
    zn = (Z * Z).sum(axis=1)[None, :]
    d2 = tn - 2.0 * tokens @ Z.T + zn
    np.maximum(d2, 0.0, out=d2)
    return d2


def _cosine_similarities(tokens: np.ndarray, Z: np.ndarray) -> np.ndarray:
    tnorm = np.linalg.norm(tokens, axis=1)
    znorm = np.linalg.norm(Z, axis=1)
    if np.any(tnorm == 0.0):
        raise NumericError("cosine metric undefined for zero input vector")
    if np.any(znorm == 0.0):
        raise NumericError("cosine metric undefined: codebook has a zero codeword")
    return (tokens @ Z.T) / (tnorm[:, None] * znorm[None, :])


def _nearest_indices(tokens: np.ndarray, Z: np.ndarray,
                     metric: str = "euclidean") -> np.ndarray:
    """Per-token nearest codeword; ties resolve to the lowest index."""
    if metric == "euclidean":
        return np.argmin(_sq_distances(tokens, Z), axis=1)
    if metric == "cosine":
        return np.argmax(_cosine_similarities(tokens, Z), axis=1)
    raise ConfigurationError(f"unknown metric {metric!r}")


def nearest_codeword(x, cb: Codebook, metric: str = "euclidean"):
    """Index of the nearest codeword to a single vector, plus its distance.

    Euclidean returns the actual distance; cosine returns 1 - similarity.
    Ties break toward the lowest index.
    """
    xv = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if xv.shape[1] != cb.D:
        raise ShapeMismatchError(
            f"vector has dimension {xv.shape[1]}, codebook dimension {cb.D}")
    idx = int(_nearest_indices(xv, cb.Z.data, metric)[0])
    if metric == "euclidean":
        dist = float(np.linalg.norm(xv[0] - cb.Z.data[idx]))
    else:
        dist = 1.0 - float(_cosine_similarities(xv, cb.Z.data)[0, idx])
    return idx, dist


# ---------------------------------------------------------------------------
# sparse regression (support selection on detached values)
# ---------------------------------------------------------------------------

def _ridge_solve_batch(Zs: np.ndarray, x: np.ndarray, ridge: float) -> np.ndarray:
    """Solve min ||x - Zs^T w||^2 + ridge ||w||^2 for each row batch.

    Zs: [n, k, D], x: [n, D] -> coefficients [n, k].
    """
    k = Zs.shape[1]
    G = Zs @ Zs.swapaxes(-1, -2) + ridge * np.eye(k)
    rhs = (Zs @ x[:, :, None])
    try:
        w = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"sparse regression system singular: {exc}") from exc
    return w[:, :, 0]


def _nnls_batch(Zs: np.ndarray, x: np.ndarray, ridge: float) -> np.ndarray:
    from scipy.optimize import nnls

    n, k, D = Zs.shape
    aug = np.sqrt(ridge) * np.eye(k)
    out = np.zeros((n, k))
    for i in range(n):
        A = np.vstack([Zs[i].T, aug])
        b = np.concatenate([x[i], np.zeros(k)])
        out[i], _ = nnls(A, b)
    return out


def _select_support(tokens: np.ndarray, Z: np.ndarray,
                    cfg: SparseRegressionConfig) -> np.ndarray:
    """Support indices [n, m] (m <= max_nonzeros) for svq-style regression.

    The k nearest codewords are the candidates. When more than t survive
    the candidate solve, the t largest-magnitude coefficients are kept;
    magnitude ties resolve toward the nearer codeword.
    """
    k, t = cfg.k_neighbors, cfg.max_nonzeros
    d2 = _sq_distances(tokens, Z)
    order = np.argsort(d2, axis=1, kind="stable")
    support = order[:, :k]
    if k == t and not cfg.nonnegative:
        return support
    Zs = Z[support]
    if cfg.nonnegative:
        w = _nnls_batch(Zs, tokens, cfg.ridge)
    else:
        w = _ridge_solve_batch(Zs, tokens, cfg.ridge)
    keep = np.argsort(-np.abs(w), axis=1, kind="stable")[:, :t]
    return np.take_along_axis(support, keep, axis=1)


def _select_support_full(tokens: np.ndarray, Z: np.ndarray,
                         cfg: SparseRegressionConfig) -> np.ndarray:
    """Adaptive-codebook support: t largest ridge coefficients over the
    whole codebook, computed in the cheap dual form
    w = Z (Z^T Z + ridge I)^{-1} x.
    """
    D = Z.shape[1]
    t = cfg.max_nonzeros
    M = Z.T @ Z + cfg.ridge * np.eye(D)
    try:
        B = np.linalg.solve(M, tokens.T)          # [D, n]
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"adaptive regression system singular: {exc}") from exc
    W = (Z @ B).T                                  # [n, C]
    return np.argsort(-np.abs(W), axis=1, kind="stable")[:, :t]


def _reconstruct_on_support(tokens_t: T.Tensor, Z_t: T.Tensor,
                            support: np.ndarray, ridge: float):
    """Differentiable ridge least squares on a fixed support.

    Returns (reconstruction [n, D] Tensor, coefficients [n, m] ndarray).
    Gradients flow into the codebook through the selected rows and into
    the tokens through the right-hand side of the solve.
    """
    n, D = tokens_t.data.shape
    m = support.shape[1]
    Zs = T.take_rows(Z_t, support)                         # [n, m, D]
    rhs = T.matmul(Zs, T.reshape(tokens_t, (n, D, 1)))     # [n, m, 1]
    G = T.matmul(Zs, T.swapaxes(Zs, -1, -2))               # [n, m, m]
    M = T.add(G, T.Tensor(ridge * np.eye(m)))
    w = T.linsolve(M, rhs)                                 # [n, m, 1]
    recon = T.reshape(T.matmul(T.swapaxes(Zs, -1, -2), w), (n, D))
    return recon, w.data[:, :, 0].copy()


def sparse_reconstruct(x, cb: Codebook,
                       cfg: Optional[SparseRegressionConfig] = None):
    """Sparse combination of a vector's nearest codewords.

    Returns (reconstruction [D], support indices, coefficients). The
    nearest-neighbor snap is the anchor the regression refines: if the
    thresholded solve ends up worse than the snap itself (ridge
    shrinkage, or the threshold dropped the nearest codeword), the snap
    wins. The reconstruction error therefore never exceeds the plain
    nearest-neighbor error.

    This is the value-level entry point; :func:`quantize` builds the
    same reconstruction inside the gradient graph.
    """
    cfg = cfg or SparseRegressionConfig()
    cfg.validate(cb.C)
    xv = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if xv.shape[1] != cb.D:
        raise ShapeMismatchError(
            f"vector has dimension {xv.shape[1]}, codebook dimension {cb.D}")
    support = _select_support(xv, cb.Z.data, cfg)
    if cfg.nonnegative:
        w = _nnls_batch(cb.Z.data[support], xv, cfg.ridge)
        pos = w[0] > 0
        if not np.any(pos):
            pos[:] = True
        support = support[:, pos]
        w = _ridge_solve_batch(cb.Z.data[support], xv, cfg.ridge)
    else:
        w = _ridge_solve_batch(cb.Z.data[support], xv, cfg.ridge)
    recon = (w[0][:, None] * cb.Z.data[support[0]]).sum(axis=0)

    nn_idx = int(_nearest_indices(xv, cb.Z.data)[0])
    if np.linalg.norm(xv[0] - recon) > np.linalg.norm(xv[0] - cb.Z.data[nn_idx]):
        return cb.Z.data[nn_idx].copy(), np.array([nn_idx]), np.array([1.0])
    return recon, support[0].copy(), w[0].copy()


# ---------------------------------------------------------------------------
# commitment loss
# ---------------------------------------------------------------------------

def commitment_loss(x: T.Tensor, q: T.Tensor) -> T.Tensor:
    """||sg[x] - q||^2 + ||x - sg[q]||^2, averaged over tokens.

    The stop-gradients split the training signal: the first term moves
    the reconstruction (hence the codebook), the second moves whatever
    produced ``x``.
    """
    if x.data.shape != q.data.shape:
        raise ShapeMismatchError(
            f"commitment loss operands differ: {x.shape} vs {q.shape}")
    n_tokens = x.data.shape[0] if x.data.ndim >= 2 else 1
    d1 = T.sub(T.stop_gradient(x), q)
    d2 = T.sub(x, T.stop_gradient(q))
    total = T.add(T.tsum(T.mul(d1, d1)), T.tsum(T.mul(d2, d2)))
    return T.scale(total, 1.0 / n_tokens)


# ---------------------------------------------------------------------------
# quantize
# ---------------------------------------------------------------------------

def _as_single(cb, variant_tag: str) -> Codebook:
    if isinstance(cb, Codebook):
        return cb
    raise ConfigurationError(
        f"variant {variant_tag} expects a single codebook")


def quantize(tokens: T.Tensor, cb, variant: QuantizerVariant,
             frozen: Optional[FrozenQuantize] = None,
             capture: Optional[dict] = None) -> QuantizeResult:
    """Quantize token rows [n_tokens, D] through the selected variant.

    ``cb`` is a single :class:`Codebook`, except for ``vq_recursive``
    which takes one codebook per stage. The output is wired
    straight-through; the commitment loss follows the two-term
    stop-gradient form averaged over tokens.

    ``frozen`` re-evaluates the call as the stop-gradient surrogate (see
    :class:`FrozenQuantize`): discrete selections and sg copies come from
    the snapshot while everything smooth stays live. ``capture``, if a
    dict, receives this call's snapshot under the key ``"frozen"``.
    """
    variant.validate()
    if tokens.data.ndim != 2:
        raise ShapeMismatchError(
            f"quantize expects [n_tokens, D], got {tokens.shape}")
    n, D = tokens.data.shape
    xd = tokens.data
    fallback = None

    if variant.tag == "vq_recursive":
        if isinstance(cb, Codebook):
            raise ConfigurationError(
                "vq_recursive needs one codebook per stage (a sequence)")
        books: Sequence[Codebook] = list(cb)
        if len(books) != variant.resolved_stages():
            raise ConfigurationError(
                f"vq_recursive configured for {variant.resolved_stages()} "
                f"stages but got {len(books)} codebooks")
        for book in books:
            if book.D != D:
                raise ShapeMismatchError("stage codebook dimension mismatch")
        if frozen is None:
            residual = xd.copy()
            stage_idx = []
            for book in books:
                idx = _nearest_indices(residual, book.Z.data)
                np.add.at(book.usage_counts, idx, 1)
                residual -= book.Z.data[idx]
                stage_idx.append(idx)
            selection = np.stack(stage_idx, axis=1)
        else:
            selection = frozen.codeword_indices
        q = None
        for s, book in enumerate(books):
            qs = T.take_rows(book.Z, selection[:, s])
            q = qs if q is None else T.add(q, qs)
        reported = selection
        coeffs = None

    elif variant.tag in ("vq", "vq_cosine", "vq_kmeans"):
        book = _as_single(cb, variant.tag)
        if book.D != D:
            raise ShapeMismatchError(
                f"tokens have dimension {D}, codebook dimension {book.D}")
        if frozen is None:
            metric = "cosine" if variant.tag == "vq_cosine" else "euclidean"
            selection = _nearest_indices(xd, book.Z.data, metric)
            np.add.at(book.usage_counts, selection, 1)
        else:
            selection = frozen.codeword_indices
        q = T.take_rows(book.Z, selection)
        reported = selection
        coeffs = None

    else:  # svq / vq_adaptive
        book = _as_single(cb, variant.tag)
        if book.D != D:
            raise ShapeMismatchError(
                f"tokens have dimension {D}, codebook dimension {book.D}")
        cfg = variant.resolved_sparse_cfg()
        cfg.validate(book.C)
        if frozen is None:
            if variant.tag == "svq":
                selection = _select_support(xd, book.Z.data, cfg)
            else:  # no nearest-neighbor snap for the adaptive codebook
                selection = _select_support_full(xd, book.Z.data, cfg)
        else:
            selection = frozen.codeword_indices
        q, coeffs = _reconstruct_on_support(tokens, book.Z, selection, cfg.ridge)
        reported = selection

        if variant.tag == "svq":
            # The nearest-neighbor snap is the anchor the regression
            # refines; keep it wherever the thresholded solve is worse.
            # fallback[i] is the snap index, or -1 where the solve won.
            if frozen is None:
                anchor = _nearest_indices(xd, book.Z.data)
                sparse_err = np.linalg.norm(xd - q.data, axis=1)
                nn_err = np.linalg.norm(xd - book.Z.data[anchor], axis=1)
                fallback = np.where(sparse_err > nn_err, anchor, -1)
            else:
                fallback = frozen.fallback
            fb = fallback >= 0
            if np.any(fb):
                snap_idx = np.where(fb, fallback, 0)
                keep = np.repeat((~fb).astype(np.float64)[:, None], D, axis=1)
                q_nn = T.take_rows(book.Z, snap_idx)
                q = T.add(T.mul(T.Tensor(keep), q),
                          T.mul(T.Tensor(1.0 - keep), q_nn))
                m = selection.shape[1]
                reported = selection.copy()
                coeffs = coeffs.copy()
                reported[fb] = np.repeat(fallback[fb][:, None], m, axis=1)
                coeffs[fb] = 0.0
                coeffs[fb, 0] = 1.0
            if frozen is None:
                np.add.at(book.usage_counts, anchor, 1)
        elif frozen is None:
            pick = np.argmax(np.abs(coeffs), axis=1)
            anchor = selection[np.arange(n), pick]
            np.add.at(book.usage_counts, anchor, 1)

    if frozen is None:
        quantized = T.add(tokens, T.stop_gradient(T.sub(q, tokens)))
        commit = commitment_loss(tokens, q)
    else:
        quantized = T.add(tokens, T.Tensor(frozen.correction))
        d1 = T.sub(T.Tensor(frozen.tokens_frozen), q)
        d2 = T.sub(tokens, T.Tensor(frozen.recon_frozen))
        total = T.add(T.tsum(T.mul(d1, d1)), T.tsum(T.mul(d2, d2)))
        commit = T.scale(total, 1.0 / n)

    if capture is not None:
        capture["frozen"] = FrozenQuantize(
            codeword_indices=np.array(selection, copy=True),
            fallback=None if fallback is None else fallback.copy(),
            correction=q.data - tokens.data,
            tokens_frozen=tokens.data.copy(),
            recon_frozen=q.data.copy(),
        )

    return QuantizeResult(quantized=quantized, commitment_loss=commit,
                          codeword_indices=reported, coefficients=coeffs)



# ---------------------------------------------------------------------------
# codebook initialization and statistics
# ---------------------------------------------------------------------------

def lloyd_kmeans(data: np.ndarray, k: int, seed: int, max_iter: int = 50,
                 tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids [k, D], objective history). The objective (sum of
    squared distances to the assigned centroid) is recorded after every
    assignment step and is non-increasing. Empty clusters keep their
    previous centroid. Deterministic under the seed.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n < k:
        raise ConfigurationError(
            f"k-means needs at least {k} samples, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, data.shape[1]))
    centroids[0] = data[rng.integers(n)]
    d2 = ((data - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = data[rng.integers(n)]
        else:
            centroids[j] = data[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((data - centroids[j]) ** 2).sum(axis=1))

    history = []
    for _ in range(max_iter):
        dist = _sq_distances(data, centroids)
        assign = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(n), assign].sum()))
        new_centroids = centroids.copy()
        for j in range(k):
            members = data[assign == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    dist = _sq_distances(data, centroids)
    history.append(float(dist[np.arange(n), np.argmin(dist, axis=1)].sum()))
    return centroids, history


def init_codebook(cb: Codebook, mode: str = "random",
                  data: Optional[np.ndarray] = None) -> Codebook:
    """Fill codewords in place: i.i.d. Normal(0, 1/D) entries, or k-means
    centroids of a token sample. Deterministic under ``cb.seed``.
    """
    if mode == "random":
        rng = np.random.default_rng(cb.seed)
        cb.Z.data[:] = rng.normal(0.0, 1.0 / np.sqrt(cb.D), size=(cb.C, cb.D))
    elif mode == "kmeans":
        if data is None or np.asarray(data).shape[0] < cb.C:
            have = 0 if data is None else np.asarray(data).shape[0]
            raise ConfigurationError(
                f"k-means init needs at least {cb.C} sample tokens, got {have}")
        centroids, _ = lloyd_kmeans(np.asarray(data, dtype=np.float64),
                                    cb.C, cb.seed)
        cb.Z.data[:] = centroids
    else:
        raise ConfigurationError(f"unknown init mode {mode!r}")
    cb.reset_usage()
    return cb


def codebook_stats(cb: Codebook) -> dict:
    """Perplexity, dead-codeword count, and the raw usage histogram."""
    total = int(cb.usage_counts.sum())
    if total == 0:
        raise UsageError("no tokens quantized since the last reset")
    p = cb.usage_counts / total
    nz = p[p > 0]
    perplexity = float(np.exp(-(nz * np.log(nz)).sum()))
    return {
        "perplexity": perplexity,
        "dead_count": int((cb.usage_counts == 0).sum()),
        "usage": cb.usage_counts.copy(),
    }


# ---------------------------------------------------------------------------
# model-facing bundle
# ---------------------------------------------------------------------------

class Quantizer:
    """Owns the codebook(s) for one model slot and dispatches quantize."""

    def __init__(self, variant: QuantizerVariant, dim: int,
                 codebook_size: int, seed: int):
        variant.validate()
        self.variant = variant
        self.dim = dim
        self.codebook_size = codebook_size
        if variant.tag == "vq_recursive":
            self.codebooks = [Codebook.random(codebook_size, dim, seed + s)
                              for s in range(variant.resolved_stages())]
        else:
            self.codebooks = [Codebook.random(codebook_size, dim, seed)]

    def quantize(self, tokens: T.Tensor) -> QuantizeResult:
        return self.quantize_with(tokens)

    def quantize_with(self, tokens: T.Tensor,
                      frozen: Optional[FrozenQuantize] = None,
                      capture: Optional[dict] = None) -> QuantizeResult:
        cb = self.codebooks if self.variant.tag == "vq_recursive" else self.codebooks[0]
        return quantize(tokens, cb, self.variant, frozen=frozen, capture=capture)

    def parameters(self) -> dict:
        if len(self.codebooks) == 1:
            return {"quantizer.codebook": self.codebooks[0].Z}
        return {f"quantizer.stage{i}.codebook": cb.Z
                for i, cb in enumerate(self.codebooks)}

    def reset_usage(self) -> None:
        for cb in self.codebooks:
            cb.reset_usage()

    def stats(self) -> dict:
        return codebook_stats(self.codebooks[0])
