"""Per-view MLP autoencoders with explicit forward and backward passes.

Every encoder layer is affine -> batch norm -> ReLU, including the latent
layer. Decoder hidden layers mirror that; the output layer is affine ->
sigmoid with no batch norm, which is why inputs must be min-max scaled to
[0, 1] first.

Training-mode forward uses batch statistics and keeps a trace for the
backward pass. Evaluation-mode forward uses the running statistics and
processes one row at a time, so a sample's latent and reconstruction are
bit-identical no matter which other rows share the call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import BatchTooSmall, DimensionError, StaleTrace

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


class DenseLayer:
    """Affine map with optional batch norm and a fixed activation."""

    def __init__(self, W, b, activation: str, batch_norm: bool):
        if activation not in ("relu", "sigmoid", "identity"):
            raise DimensionError(f"unknown activation {activation!r}")
        self.W = W
        self.b = b
        self.activation = activation
        self.batch_norm = batch_norm
        if batch_norm:
            d_out = W.shape[1]
            self.bn_gamma = np.ones(d_out)
            self.bn_beta = np.zeros(d_out)
            self.running_mean = np.zeros(d_out)
            self.running_var = np.ones(d_out)

    def _activate(self, pre):
        if self.activation == "relu":
            return np.maximum(pre, 0.0)
        if self.activation == "sigmoid":
            return expit(pre)
        return pre

    def forward_train(self, x):
        """Batched forward with batch statistics; returns (out, cache)."""
        pre = x @ self.W
        pre += self.b
        cache = {"x": x}
        if self.batch_norm:
            mu = pre.mean(axis=0)
            pre -= mu
            # biased variance, matching the backward formula
            var = np.einsum("ij,ij->j", pre, pre) / pre.shape[0]
            inv_std = 1.0 / np.sqrt(var + _BN_EPS)
            # centered pre is cached unscaled; inv_std folds into the gamma
            # factor here and into per-feature coefficients in backward
            act_in = pre * (self.bn_gamma * inv_std)
            act_in += self.bn_beta
            self.running_mean = (1 - _BN_MOMENTUM) * self.running_mean + _BN_MOMENTUM * mu
            self.running_var = (1 - _BN_MOMENTUM) * self.running_var + _BN_MOMENTUM * var
            cache["centered"] = pre
            cache["inv_std"] = inv_std
        else:
            act_in = pre
        cache["act_in"] = act_in
        if self.activation == "relu":
            # safe in place: the backward mask (act_in > 0) is unchanged by
            # clamping negatives to zero
            out = np.maximum(act_in, 0.0, out=act_in)
        else:
            out = self._activate(act_in)
        cache["out"] = out
        return out, cache

    def forward_eval(self, X):
        """Eval-mode forward using running statistics; rows are independent."""
        pre = X @ self.W + self.b
        if self.batch_norm:
            xhat = (pre - self.running_mean) / np.sqrt(self.running_var + _BN_EPS)
            pre = self.bn_gamma * xhat + self.bn_beta
        return self._activate(pre)

    def backward(self, dout, cache, grads, prefix, need_dx: bool = True):
        """Accumulate parameter grads into ``grads`` and return d(input).

        ``dout`` is consumed as scratch; callers must not reuse it.
        """
        if self.activation == "relu":
            d = np.multiply(dout, cache["act_in"] > 0, out=dout)
        elif self.activation == "sigmoid":
            s = cache["out"]
            d = dout * s * (1.0 - s)
        else:
            d = dout
        if self.batch_norm:
            xc, inv_std = cache["centered"], cache["inv_std"]
            n = d.shape[0]
            raw = np.einsum("ij,ij->j", d, xc)
            g_beta = d.sum(axis=0)
            grads[f"{prefix}/bn_gamma"] = raw * inv_std
            grads[f"{prefix}/bn_beta"] = g_beta
            # dx = (gamma*inv_std) * (d - mean(d) - xhat * mean(d*xhat)),
            # reusing the parameter-grad sums for both feature-wise means
            d -= g_beta * (1.0 / n)
            d -= xc * (raw * (inv_std * inv_std / n))
            d *= self.bn_gamma * inv_std
        grads[f"{prefix}/W"] = cache["x"].T @ d
        grads[f"{prefix}/b"] = d.sum(axis=0)
        return d @ self.W.T if need_dx else None

    def named_params(self, prefix):
        out = {f"{prefix}/W": self.W, f"{prefix}/b": self.b}
        if self.batch_norm:
            out[f"{prefix}/bn_gamma"] = self.bn_gamma
            out[f"{prefix}/bn_beta"] = self.bn_beta
        return out

    def state_arrays(self, prefix):
        """Everything that must persist, trainable or not."""
        out = self.named_params(prefix)
        if self.batch_norm:
            out[f"{prefix}/running_mean"] = self.running_mean
            out[f"{prefix}/running_var"] = self.running_var
        return out


@dataclass
class ForwardTrace:
    """Cached activations from one training-mode pass through a view."""

    latent: np.ndarray
    recon: np.ndarray
    enc_caches: list
    dec_caches: list
    version: int


class ViewAutoencoder:
    """Encoder/decoder pair for one view.

    ``version`` counts optimizer steps; traces remember the version they were
    computed under and refuse to backpropagate through newer parameters.
    """

    def __init__(self, encoder: list[DenseLayer], decoder: list[DenseLayer]):
        self.encoder = encoder
        self.decoder = decoder
        self.version = 0

    @property
    def input_dim(self) -> int:
        return self.encoder[0].W.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.encoder[-1].W.shape[1]

    def _check_input(self, X):
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionError(
                f"expected (*, {self.input_dim}) input, got {X.shape}"
            )

    def forward_train(self, X) -> ForwardTrace:
        self._check_input(X)
        if X.shape[0] < 2:
            raise BatchTooSmall(
                f"batch statistics need at least 2 rows, got {X.shape[0]}"
            )
        out = X
        enc_caches = []
        for layer in self.encoder:
            out, cache = layer.forward_train(out)
            enc_caches.append(cache)
        latent = out
        dec_caches = []
        for layer in self.decoder:
            out, cache = layer.forward_train(out)
            dec_caches.append(cache)
        return ForwardTrace(
            latent=latent,
            recon=out,
            enc_caches=enc_caches,
            dec_caches=dec_caches,
            version=self.version,
        )

    def backward(self, trace: ForwardTrace, d_recon, d_latent=None) -> dict:
        """Grads of a scalar loss given d(loss)/d(recon) and optionally an
        extra d(loss)/d(latent) injected at the encoder output."""
        if trace.version != self.version:
            raise StaleTrace(
                f"trace from version {trace.version}, model at {self.version}"
            )
        grads: dict[str, np.ndarray] = {}
        d = d_recon
        for i in range(len(self.decoder) - 1, -1, -1):
            d = self.decoder[i].backward(d, trace.dec_caches[i], grads, f"dec{i}")
        if d_latent is not None:
            d = d + d_latent
        for i in range(len(self.encoder) - 1, -1, -1):
            d = self.encoder[i].backward(
                d, trace.enc_caches[i], grads, f"enc{i}", need_dx=i > 0
            )
        return grads

    def encode_eval(self, X) -> np.ndarray:
        self._check_input(X)
        Z = X
        for layer in self.encoder:
            Z = layer.forward_eval(Z)
        return Z

    def reconstruct_eval(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Eval pass on running statistics; returns (latents, reconstructions)."""
        self._check_input(X)
        Z = self.encode_eval(X)
        R = Z
        for layer in self.decoder:
            R = layer.forward_eval(R)
        return Z, R

    def recon_scores(self, X) -> np.ndarray:
        """Per-sample squared reconstruction error, summed over dimensions."""
        _, R = self.reconstruct_eval(X)
        return recon_errors(X, R)

    def named_params(self) -> dict:
        out = {}
        for i, layer in enumerate(self.encoder):
            out.update(layer.named_params(f"enc{i}"))
        for i, layer in enumerate(self.decoder):
            out.update(layer.named_params(f"dec{i}"))
        return out

    def state_arrays(self) -> dict:
        out = {}
        for i, layer in enumerate(self.encoder):
            out.update(layer.state_arrays(f"enc{i}"))
        for i, layer in enumerate(self.decoder):
            out.update(layer.state_arrays(f"dec{i}"))
        return out


def recon_errors(X, R) -> np.ndarray:
    """Row-wise squared L2 distance between inputs and reconstructions."""
    if X.shape != R.shape:
        raise DimensionError(f"shape mismatch {X.shape} vs {R.shape}")
    D = X - R
    return np.einsum("ij,ij->i", D, D)


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_autoencoder(
    input_dim: int,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (512, 256),
    latent_dim: int = 128,
) -> ViewAutoencoder:
    """Symmetric autoencoder: d -> hidden... -> latent -> reversed hidden -> d.

    Weights are Glorot-uniform from ``rng`` (drawn encoder first, layer by
    layer), biases zero, batch norm at identity.  Hidden layers are
    batch-normed ReLU, the latent projection is batch-normed linear, the
    decoder output is a plain sigmoid.
    """
    if input_dim < 1 or latent_dim < 1 or any(h < 1 for h in hidden):
        raise DimensionError("layer widths must be positive")
    enc_dims = [input_dim, *hidden, latent_dim]
    dec_dims = [latent_dim, *reversed(hidden), input_dim]
    encoder = [
        DenseLayer(_glorot(rng, a, b), np.zeros(b), "relu", batch_norm=True)
        for a, b in zip(enc_dims[:-2], enc_dims[1:-1])
    ]
    # latent projection stays linear: rectified codes live in one orthant,
    # which wrecks cosine matching and can zero out whole rows
    encoder.append(
        DenseLayer(
            _glorot(rng, enc_dims[-2], enc_dims[-1]),
            np.zeros(enc_dims[-1]),
            "identity",
            batch_norm=True,
        )
    )
    decoder = [
        DenseLayer(_glorot(rng, a, b), np.zeros(b), "relu", batch_norm=True)
        for a, b in zip(dec_dims[:-2], dec_dims[1:-1])
    ]
    decoder.append(
        DenseLayer(
            _glorot(rng, dec_dims[-2], dec_dims[-1]),
            np.zeros(dec_dims[-1]),
            "sigmoid",
            batch_norm=False,
        )
    )
    return ViewAutoencoder(encoder, decoder)
