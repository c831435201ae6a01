"""Dense float64 matrix primitives: PCA, cosine similarity, log-sum-exp, RNG.

Matrices are plain 2-D C-contiguous ``numpy.ndarray`` of float64. Everything
here is a pure function over immutable inputs and safe to call from several
threads at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, DimensionError, EmptyInput, ZeroVector

# Above this input dimension the covariance matrix gets memory heavy, so PCA
# switches to the SVD of the centered data matrix.
_COVARIANCE_ROUTE_MAX_DIM = 1024

_ZERO_NORM_TOL = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``a`` to a 2-D float64 array with finite entries."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise DimensionError(f"{name} contains non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Validate and convert ``a`` to a 1-D float64 array."""
    v = np.ascontiguousarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator derived from ``seed`` and a stream key.

    Uses numpy's PCG64 seeded through ``SeedSequence(seed, spawn_key=stream)``,
    so every subsystem draws from an independent stream that is a pure
    function of the single run seed. Identical (seed, stream) gives an
    identical number stream on every platform.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=stream))


@dataclass(frozen=True)
class PcaModel:
    """Fitted PCA projection.

    ``components`` has orthonormal columns (d_in x d_out), ordered by
    descending ``explained_variance``. Sign convention: in each component the
    entry of largest magnitude is non-negative, first index winning ties, so
    serialized models reproduce bit-exactly across runs.
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def d_in(self) -> int:
        return self.components.shape[0]

    @property
    def d_out(self) -> int:
        return self.components.shape[1]


def _fix_component_signs(components: np.ndarray) -> np.ndarray:
    # argmax returns the first maximal index, which is the tie rule we want
    lead = np.argmax(np.abs(components), axis=0)
    signs = np.where(components[lead, np.arange(components.shape[1])] < 0, -1.0, 1.0)
    return components * signs


def pca_fit(X, d_out: int, method: str = "auto") -> PcaModel:
    """Fit PCA on the rows of ``X`` keeping the top ``d_out`` components.

    Centers by column means and takes the leading eigenvectors of the sample
    covariance (divisor N-1). ``method`` selects the linear-algebra route:
    ``"eig"`` decomposes the d_in x d_in covariance, ``"svd"`` decomposes the
    centered matrix, ``"auto"`` picks eig for d_in <= 1024 and svd above.
    """
    X = as_matrix(X, "X")
    n, d_in = X.shape
    if n < 2:
        raise DegenerateInput(f"PCA needs at least 2 rows, got {n}")
    if not (1 <= d_out <= min(n - 1, d_in)):
        raise DimensionError(
            f"d_out={d_out} outside [1, min(N-1, d_in)] = [1, {min(n - 1, d_in)}]"
        )
    if method == "auto":
        method = "eig" if d_in <= _COVARIANCE_ROUTE_MAX_DIM else "svd"

    mean = X.mean(axis=0)
    Xc = X - mean
    if method == "eig":
        cov = (Xc.T @ Xc) / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1][:d_out]
        variance = eigvals[order]
        components = eigvecs[:, order]
    elif method == "svd":
        _, s, vt = np.linalg.svd(Xc, full_matrices=False)
        variance = (s[:d_out] ** 2) / (n - 1)
        components = vt[:d_out].T
    else:
        raise DimensionError(f"unknown PCA method {method!r}")

    variance = np.maximum(variance, 0.0)  # eigh can return -1e-17 for rank-deficient data
    return PcaModel(
        mean=mean,
        components=_fix_component_signs(components),
        explained_variance=variance,
    )


def pca_transform(model: PcaModel, X) -> np.ndarray:
    """Project rows of ``X`` onto the fitted components: ``(X - mean) @ C``."""
    X = as_matrix(X, "X")
    if X.shape[1] != model.d_in:
        raise DimensionError(
            f"X has {X.shape[1]} columns, PCA model expects {model.d_in}"
        )
    return (X - model.mean) @ model.components


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"vectors differ in length: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < _ZERO_NORM_TOL or nb < _ZERO_NORM_TOL:
        raise ZeroVector("cosine similarity undefined for (near-)zero vectors")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(Z: np.ndarray) -> np.ndarray:
    """Unit-normalize each row; raises ZeroVector on a (near-)zero row."""
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms < _ZERO_NORM_TOL):
        raise ZeroVector("cannot normalize a (near-)zero latent row")
    return Z / norms[:, None]


def logsumexp(xs, axis=None) -> np.ndarray | float:
    """log(sum(exp(xs))) by max-shift; exact for constant inputs.

    Supports -inf entries (treated as missing terms). With ``axis=None`` the
    input is flattened and a float is returned.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise EmptyInput("logsumexp of an empty collection")
    m = np.max(xs, axis=axis, keepdims=axis is not None)
    shifted = np.exp(xs - m)
    out = m.squeeze(axis) if axis is not None else m
    out = out + np.log(np.sum(shifted, axis=axis))
    return out if axis is not None else float(out)
