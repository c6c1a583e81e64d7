"""Prototype libraries over the two latent spaces and their losses.

The causal library holds K prototypes per class (class-major layout) and
classifies by distance: class scores aggregate exp(-distance) over the
class's own prototypes. Causal prototypes are periodically projected onto
the nearest same-class training latent, so every served prototype is a real
training case with recorded provenance.

The spurious library is a free dictionary of M prototypes with no class
structure; it is shaped by a clustering pull plus a batch-assignment
entropy bonus that keeps the dictionary diverse.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ContractViolation

_ENTROPY_EPS = 1e-300


class CausalLibrary:
    """K-per-class prototype matrix with class map and provenance."""

    def __init__(self, prototypes: Var, class_of: np.ndarray,
                 provenance: list[str | None] | None = None):
        class_of = np.asarray(class_of, dtype=np.int64)
        if prototypes.data.ndim != 2 or class_of.shape != (prototypes.data.shape[0],):
            raise ContractViolation("prototype matrix and class map are inconsistent")
        self.prototypes = prototypes
        self.class_of = class_of
        self.num_classes = int(class_of.max()) + 1
        counts = np.bincount(class_of, minlength=self.num_classes)
        if np.any(counts == 0):
            raise ContractViolation("every class needs at least one prototype")
        self.provenance: list[str | None] = (
            list(provenance) if provenance is not None else [None] * len(class_of)
        )
        self._by_class = [np.flatnonzero(class_of == c) for c in range(self.num_classes)]

    @classmethod
    def init_random(cls, rng: np.random.Generator, num_classes: int, k_per_class: int,
                    dim: int, scale: float = 0.1) -> "CausalLibrary":
        if num_classes < 1 or k_per_class < 1:
            raise ContractViolation("num_classes and k_per_class must be positive")
        total = num_classes * k_per_class
        protos = ad.parameter(rng.normal(0.0, scale, size=(total, dim)))
        class_of = np.repeat(np.arange(num_classes), k_per_class)
        return cls(protos, class_of)

    def class_indices(self, y: int) -> np.ndarray:
        if not 0 <= y < self.num_classes:
            raise ContractViolation(f"class {y} outside library range")
        return self._by_class[y]

    @property
    def total(self) -> int:
        return self.prototypes.data.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.data.shape[1]

    def is_projected(self) -> bool:
        return all(p is not None for p in self.provenance)


class SpuriousLibrary:
    """Free dictionary of M prototypes. Pass `shared` to alias another
    library's matrix (the shared-dictionary ablation): both views then train
    the same parameters and M becomes that matrix's row count."""

    def __init__(self, rng: np.random.Generator | None = None, m: int = 0, dim: int = 0,
                 scale: float = 0.1, shared: Var | None = None):
        if shared is not None:
            self.prototypes = shared
        else:
            if m < 1 or dim < 1:
                raise ContractViolation("m and dim must be positive")
            self.prototypes = ad.parameter(rng.normal(0.0, scale, size=(m, dim)))
        self.shared = shared is not None

    @property
    def m(self) -> int:
        return self.prototypes.data.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.data.shape[1]


def distance(a: np.ndarray, b: np.ndarray, squared: bool = False) -> float:
    """Euclidean distance between two vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractViolation("distance expects two equal-length vectors")
    d2 = float(np.sum((a - b) ** 2))
    return d2 if squared else float(np.sqrt(d2))


def _pairwise_sq(z: np.ndarray, protos: np.ndarray) -> np.ndarray:
    diff = z[:, None, :] - protos[None, :, :]
    return np.sum(diff * diff, axis=2)


def causal_class_probs(z_c: np.ndarray, lib: CausalLibrary,
                       squared: bool = False) -> np.ndarray:
    """Distance-softmax class probabilities from the causal library.

    Scores are exp(-d) aggregated within each class and normalized over all
    prototypes; the max negative distance is subtracted before
    exponentiation for stability. `squared` switches d to squared Euclidean
    (a config hook; off by default).
    """
    z = np.asarray(z_c, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != lib.dim:
        raise ContractViolation("latent dim does not match library")
    d2 = _pairwise_sq(z, lib.prototypes.data)
    d = d2 if squared else np.sqrt(d2)
    neg = -d
    neg -= neg.max(axis=1, keepdims=True)
    w = np.exp(neg)
    probs = np.zeros((z.shape[0], lib.num_classes))
    for c in range(lib.num_classes):
        probs[:, c] = w[:, lib.class_indices(c)].sum(axis=1)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs[0] if single else probs


def causal_class_log_probs_var(z_c: Var, lib: CausalLibrary,
                               squared: bool = False) -> Var:
    """Differentiable log-probabilities of the distance-softmax classifier.

    Algebraically identical to `causal_class_probs` (per-class log-sum-exp
    of negative distances, then log-softmax over classes), written in
    stable composite ops.
    """
    n = z_c.data.shape[0]
    d2 = _pairwise_sq_var(z_c, lib.prototypes)
    negd = ad.neg(d2 if squared else _safe_sqrt(d2))
    class_scores = []
    for c in range(lib.num_classes):
        idx = lib.class_indices(c)
        class_scores.append(ad.reshape(ad.logsumexp(ad.take_cols(negd, idx), axis=1), (n, 1)))
    return ad.log_softmax(ad.concat(class_scores, axis=1), axis=1)


def _pairwise_sq_var(z: Var, protos: Var) -> Var:
    n, d = z.data.shape
    m = protos.data.shape[0]
    diff = ad.sub(ad.reshape(z, (n, 1, d)), ad.reshape(protos, (1, m, d)))
    return ad.vsum(ad.square(diff), axis=2)


def _safe_sqrt(d2: Var) -> Var:
    # exact zeros appear when a latent sits on a projected prototype; the
    # epsilon keeps the gradient finite there
    return ad.sqrt(ad.add(d2, Var(1e-12)))


def project_prototypes(lib: CausalLibrary, latents: np.ndarray, labels: np.ndarray,
                       sample_ids: list[str]) -> CausalLibrary:
    """Snap every causal prototype to the nearest training latent of its own
    class (bitwise copy), recording provenance. Ties break to the lowest
    sample index. Idempotent: re-projecting a projected library is a no-op.
    """
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if latents.ndim != 2 or latents.shape[1] != lib.dim:
        raise ContractViolation("latents shape does not match library dim")
    if latents.shape[0] != labels.shape[0] or len(sample_ids) != labels.shape[0]:
        raise ContractViolation("latents, labels and sample_ids must align")
    for c in range(lib.num_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise ContractViolation(f"class {c} absent from projection latents")
        pool = latents[members]
        for k in lib.class_indices(c):
            d2 = np.sum((pool - lib.prototypes.data[k]) ** 2, axis=1)
            best = members[int(np.argmin(d2))]  # argmin ties -> lowest index
            lib.prototypes.data[k] = latents[best]
            lib.provenance[k] = sample_ids[best]
    return lib


def cluster_loss(z_s: Var, lib: SpuriousLibrary, tau: float = 0.1) -> Var:
    """Pull each spurious code to its nearest prototype while rewarding a
    spread batch assignment:

        mean_i min_m ||z_s_i - p_m||^2  -  tau * H(mean_i softmax(-d^2_i))

    The entropy ceiling is ln M, reached when the batch-average soft
    assignment is uniform.
    """
    if tau < 0:
        raise ContractViolation("tau must be nonnegative")
    n = z_s.data.shape[0]
    if n < 1:
        raise ContractViolation("cluster_loss needs a nonempty batch")
    d2 = _pairwise_sq_var(z_s, lib.prototypes)
    attraction = ad.vmean(ad.min_axis(d2, axis=1))
    if tau == 0.0:
        return attraction
    assign = ad.softmax(ad.neg(d2), axis=1)
    abar = ad.vmean(assign, axis=0)
    entropy = ad.neg(ad.vsum(ad.mul(abar, ad.log(ad.add(abar, Var(_ENTROPY_EPS))))))
    return ad.sub(attraction, ad.mul(Var(float(tau)), entropy))


def proto_loss(z_c: Var, labels: np.ndarray, lib: CausalLibrary,
               margin: float = 1.0) -> Var:
    """Pull each causal code toward its own class's nearest prototype and
    push it outside `margin` of the nearest other-class prototype:

        mean_i [ min_{k in own} d^2 + max(0, margin - min_{k not in own} d^2) ]

    With a single class the push term is absent.
    """
    if margin < 0:
        raise ContractViolation("margin must be nonnegative")
    labels = np.asarray(labels, dtype=np.int64)
    n = z_c.data.shape[0]
    if n < 1 or labels.shape != (n,):
        raise ContractViolation("labels must match the batch")
    if labels.min() < 0 or labels.max() >= lib.num_classes:
        raise ContractViolation("label outside library classes")
    d2 = _pairwise_sq_var(z_c, lib.prototypes)
    total = None
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        own_cols = lib.class_indices(int(c))
        other_cols = np.flatnonzero(lib.class_of != c)
        sub = ad.take_rows(d2, rows)
        own = ad.min_axis(ad.take_cols(sub, own_cols), axis=1)
        part = own
        if other_cols.size:
            other = ad.min_axis(ad.take_cols(sub, other_cols), axis=1)
            part = ad.add(own, ad.relu(ad.sub(Var(float(margin)), other)))
        s = ad.vsum(part)
        total = s if total is None else ad.add(total, s)
    return ad.div(total, Var(float(n)))
