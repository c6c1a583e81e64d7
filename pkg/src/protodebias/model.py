"""Encoders and classifier heads.

The dual encoder maps an image to two latent codes: a causal code meant to
carry class morphology and a spurious code meant to absorb acquisition
artifacts. By default the branches are fully separate networks so that no
parameter is shared between the codes; `share_stem=True` shares the conv
trunk and separates only the projection heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigurationError
from .nn import ConvEncoder, ConvTrunk, Linear, MLP

_ENCODE_CHUNK = 256


@dataclass(frozen=True)
class EncoderSpec:
    latent_dim: int = 64
    width: int = 16
    depth: int = 3
    share_stem: bool = False
    in_channels: int = 3
    unit_norm: bool = False

    def validate(self) -> None:
        if self.latent_dim < 1 or self.width < 1 or not (1 <= self.depth <= 4):
            raise ConfigurationError("encoder spec out of range")


@dataclass
class LatentPair:
    z_c: np.ndarray
    z_s: np.ndarray


def to_nchw(pixels: np.ndarray) -> np.ndarray:
    """(H,W,3) or (N,H,W,3) float array -> (N,3,H,W)."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


class DualEncoder:
    """Two-branch encoder producing (z_c, z_s)."""

    def __init__(self, rng: np.random.Generator, spec: EncoderSpec):
        spec.validate()
        self.spec = spec
        if spec.share_stem:
            trunk = ConvTrunk(rng, spec.in_channels, spec.width, spec.depth)
            self.enc_c = ConvEncoder(rng, spec.in_channels, spec.width, spec.depth,
                                     spec.latent_dim, trunk=trunk,
                                     unit_norm=spec.unit_norm)
            self.enc_s = ConvEncoder(rng, spec.in_channels, spec.width, spec.depth,
                                     spec.latent_dim, trunk=trunk,
                                     unit_norm=spec.unit_norm)
        else:
            self.enc_c = ConvEncoder(rng, spec.in_channels, spec.width, spec.depth,
                                     spec.latent_dim, unit_norm=spec.unit_norm)
            self.enc_s = ConvEncoder(rng, spec.in_channels, spec.width, spec.depth,
                                     spec.latent_dim, unit_norm=spec.unit_norm)

    def forward_var(self, x: Var) -> tuple[Var, Var]:
        return self.enc_c(x), self.enc_s(x)

    def encode(self, pixels: np.ndarray) -> LatentPair:
        """Numpy inference path. Accepts one (H,W,3) image or an (N,H,W,3)
        batch; batches are processed in chunks to bound memory."""
        arr = np.asarray(pixels, dtype=np.float64)
        single = arr.ndim == 3
        x = to_nchw(arr)
        zc_parts, zs_parts = [], []
        for lo in range(0, x.shape[0], _ENCODE_CHUNK):
            chunk = Var(x[lo:lo + _ENCODE_CHUNK])
            zc, zs = self.forward_var(chunk)
            zc_parts.append(zc.data)
            zs_parts.append(zs.data)
        z_c = np.concatenate(zc_parts, axis=0)
        z_s = np.concatenate(zs_parts, axis=0)
        if single:
            return LatentPair(z_c[0], z_s[0])
        return LatentPair(z_c, z_s)

    def params(self) -> dict[str, Var]:
        out = {f"enc_c.{k}": v for k, v in self.enc_c.params().items()}
        out.update({f"enc_s.{k}": v for k, v in self.enc_s.params().items()})
        return out


class FusionNet:
    """Maps a (causal code, spurious prototype) pair to class logits.

    `hidden=0` gives a single linear map, which the hand-arithmetic tests
    use.
    """

    def __init__(self, rng: np.random.Generator, latent_dim: int, num_classes: int,
                 hidden: int = 128):
        dims = [2 * latent_dim, num_classes] if hidden == 0 else [2 * latent_dim, hidden, num_classes]
        self.net = MLP(rng, dims)
        self.latent_dim = latent_dim
        self.num_classes = num_classes

    def forward_var(self, z_c: Var, p_s: Var) -> Var:
        return self.net(ad.concat([z_c, p_s], axis=1))

    def fuse_logits(self, z_c: np.ndarray, p_s: np.ndarray) -> np.ndarray:
        """Numpy path: (N,D),(N,D) -> (N,C) logits, or 1-D inputs -> (C,)."""
        zc = np.atleast_2d(np.asarray(z_c, dtype=np.float64))
        ps = np.atleast_2d(np.asarray(p_s, dtype=np.float64))
        out = self.forward_var(Var(zc), Var(ps)).data
        if np.asarray(z_c).ndim == 1:
            return out[0]
        return out

    def params(self) -> dict[str, Var]:
        return self.net.params()


class ErmClassifier:
    """Single-branch baseline: encoder features straight into a linear head,
    trained with plain cross-entropy. No prototypes, no adjustment."""

    def __init__(self, rng: np.random.Generator, spec: EncoderSpec, num_classes: int):
        spec.validate()
        self.spec = spec
        self.encoder = ConvEncoder(rng, spec.in_channels, spec.width, spec.depth,
                                   spec.latent_dim)
        self.head = Linear(rng, spec.latent_dim, num_classes)
        self.num_classes = num_classes

    def forward_var(self, x: Var) -> Var:
        return self.head(ad.relu(self.encoder(x)))

    def predict_probs(self, pixels: np.ndarray) -> np.ndarray:
        arr = np.asarray(pixels, dtype=np.float64)
        single = arr.ndim == 3
        x = to_nchw(arr)
        parts = []
        for lo in range(0, x.shape[0], _ENCODE_CHUNK):
            logits = self.forward_var(Var(x[lo:lo + _ENCODE_CHUNK]))
            parts.append(ad.softmax(logits, axis=1).data)
        probs = np.concatenate(parts, axis=0)
        return probs[0] if single else probs

    def params(self) -> dict[str, Var]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"head.{k}": v for k, v in self.head.params().items()})
        return out
