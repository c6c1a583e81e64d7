"""Variational upper-bound penalty on the dependence between the two codes.

A small conditional network q(z_c | z_s) (diagonal Gaussian with MLP mean
and log-variance heads) is fitted by maximum likelihood, and the penalty is
the contrastive log-ratio bound: mean log-density of matched pairs minus
the mean over all pairings,

    (1/N) sum_i [ log q(z_c_i | z_s_i) - (1/N) sum_j log q(z_c_j | z_s_i) ].

With q fitted well this is an upper bound on the mutual information between
the codes; minimizing it drives the causal code to carry nothing the
spurious code predicts. Training alternates one q maximum-likelihood step
with one encoder step; inside the encoder step q is treated as a constant.

Note the estimator is a *bound*, not the mutual information itself: even a
perfectly fitted q overshoots the true value on correlated Gaussians (the
unnormalized negative term carries a Jensen gap), which the tests document.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ContractViolation, NumericError
from .nn import MLP, Adam, Linear

_LOG_2PI = float(np.log(2.0 * np.pi))
_LOGVAR_LIMIT = 8.0


class GaussianCondModel:
    """MLP trunk with mean and log-variance heads; log-variance is clamped
    to [logvar_min, 8] to keep densities finite.

    Raising ``logvar_min`` above the default puts a floor under the
    conditional variance. That caps the score term (z - mu) / var, which is
    what the penalty's encoder gradient is built from: with an unfloored q
    the fit gets arbitrarily sharp and the penalty shoves the encoder around
    with force out of all proportion to the dependence left. The floored
    model still moves its means freely, so the penalty keeps pricing
    predictability; it just stops resolving structure finer than the floor.
    """

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int = 128,
                 logvar_min: float = -_LOGVAR_LIMIT):
        if dim < 1 or hidden < 1:
            raise ContractViolation("dim and hidden must be positive")
        if not (-_LOGVAR_LIMIT <= logvar_min < _LOGVAR_LIMIT):
            raise ContractViolation("logvar_min must lie in [-8, 8)")
        self.dim = dim
        self.logvar_min = float(logvar_min)
        self.trunk = MLP(rng, [dim, hidden])
        self.mu_head = Linear(rng, hidden, dim)
        self.logvar_head = Linear(rng, hidden, dim)

    def forward_var(self, z_s: Var) -> tuple[Var, Var]:
        h = ad.relu(self.trunk(z_s))
        return self.mu_head(h), ad.clip(self.logvar_head(h), self.logvar_min, _LOGVAR_LIMIT)

    def conditional_params(self, z_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        zs = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
        mu, logvar = self.forward_var(Var(zs))
        if np.asarray(z_s).ndim == 1:
            return mu.data[0], logvar.data[0]
        return mu.data, logvar.data

    def params(self) -> dict[str, Var]:
        out = {f"trunk.{k}": v for k, v in self.trunk.params().items()}
        out.update({f"mu.{k}": v for k, v in self.mu_head.params().items()})
        out.update({f"logvar.{k}": v for k, v in self.logvar_head.params().items()})
        return out


def _row_log_density(mu: Var, logvar: Var, z_c: Var) -> Var:
    """Diagonal Gaussian log-density per row."""
    diff = ad.sub(z_c, mu)
    quad = ad.div(ad.square(diff), ad.exp(logvar))
    terms = ad.add(ad.add(quad, logvar), Var(_LOG_2PI))
    return ad.mul(ad.vsum(terms, axis=1), Var(-0.5))


def log_q(z_c: np.ndarray, z_s: np.ndarray, model: GaussianCondModel) -> float:
    """Log-density of one causal code under the conditional at one spurious
    code."""
    zc = np.asarray(z_c, dtype=np.float64)
    zs = np.asarray(z_s, dtype=np.float64)
    if zc.shape != (model.dim,) or zs.shape != (model.dim,):
        raise ContractViolation("log_q expects single vectors of the model dim")
    mu, logvar = model.forward_var(Var(zs[None]))
    out = _row_log_density(mu, logvar, Var(zc[None]))
    return float(out.data[0])


def _pair_matrix(model: GaussianCondModel, zc: Var, zs: Var) -> Var:
    """A[i, j] = log q(z_c_j | z_s_i) over the batch."""
    n = zc.data.shape[0]
    d = zc.data.shape[1]
    mu, logvar = model.forward_var(zs)
    mu3 = ad.reshape(mu, (n, 1, d))
    lv3 = ad.reshape(logvar, (n, 1, d))
    zc3 = ad.reshape(zc, (1, n, d))
    diff = ad.sub(zc3, mu3)
    quad = ad.div(ad.square(diff), ad.exp(lv3))
    terms = ad.add(ad.add(quad, lv3), Var(_LOG_2PI))
    return ad.mul(ad.vsum(terms, axis=2), Var(-0.5))


def club_penalty(batch_zc, batch_zs, model: GaussianCondModel) -> Var:
    """Contrastive log-ratio penalty over a batch (a Var; differentiable in
    the codes, with q's parameters treated as constants by the caller's
    alternating schedule).

    The positive term averages the matched-pair diagonal; the negative term
    averages the full N x N matrix. For N=1 the two coincide and the
    penalty is exactly zero.
    """
    zc = ad.as_var(batch_zc)
    zs = ad.as_var(batch_zs)
    if zc.data.ndim != 2 or zs.data.ndim != 2 or zc.data.shape != zs.data.shape:
        raise ContractViolation("club_penalty expects matching (N, D) code batches")
    n = zc.data.shape[0]
    if n < 1:
        raise ContractViolation("club_penalty needs at least one sample")
    pair = _pair_matrix(model, zc, zs)
    diag = ad.take_rows(ad.reshape(pair, (n * n,)), np.arange(n) * (n + 1))
    penalty = ad.sub(ad.vmean(diag), ad.vmean(pair))
    if not np.isfinite(penalty.data):
        raise NumericError("club penalty is not finite")
    return penalty


def fit_q_step(batch_zc: np.ndarray, batch_zs: np.ndarray, model: GaussianCondModel,
               opt: Adam, lr: float | None = None) -> float:
    """One maximum-likelihood ascent step on q over the batch; returns the
    mean negative log-likelihood before the step. lr=0 leaves the model's
    parameters bitwise unchanged."""
    zc = np.asarray(batch_zc, dtype=np.float64)
    zs = np.asarray(batch_zs, dtype=np.float64)
    if zc.ndim != 2 or zc.shape != zs.shape:
        raise ContractViolation("fit_q_step expects matching (N, D) code batches")
    mu, logvar = model.forward_var(Var(zs))
    nll = ad.neg(ad.vmean(_row_log_density(mu, logvar, Var(zc))))
    opt.zero_grad()
    nll.backward()
    opt.step(lr=lr)
    if not np.isfinite(nll.data):
        raise NumericError("q negative log-likelihood is not finite")
    return float(nll.data)


def estimate_bound(zc: np.ndarray, zs: np.ndarray, model: GaussianCondModel,
                   block: int = 256) -> float:
    """Evaluate the penalty over a full dataset without building a graph.

    The N x N matrix is accumulated in row blocks so memory stays bounded.
    """
    zc = np.asarray(zc, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    if zc.ndim != 2 or zc.shape != zs.shape:
        raise ContractViolation("estimate_bound expects matching (N, D) arrays")
    n = zc.shape[0]
    if n < 1:
        raise ContractViolation("estimate_bound needs at least one sample")
    pos_sum = 0.0
    all_sum = 0.0
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        mu, logvar = model.conditional_params(zs[lo:hi])
        inv_var = np.exp(-logvar)
        # rows: conditioning index i in [lo, hi); columns: all j
        diff = zc[None, :, :] - mu[:, None, :]
        ll = -0.5 * ((diff * diff) * inv_var[:, None, :] + logvar[:, None, :] + _LOG_2PI).sum(axis=2)
        all_sum += ll.sum()
        pos_sum += np.trace(ll[:, lo:hi])
    return float(pos_sum / n - all_sum / (n * n))


def fit_conditional(zc: np.ndarray, zs: np.ndarray, dim: int | None = None,
                    hidden: int = 128, steps: int = 1500, lr: float = 1e-3,
                    seed: int = 0) -> GaussianCondModel:
    """Fit a fresh conditional model to given codes by full-batch maximum
    likelihood. Used for post-hoc dependence estimates."""
    zc = np.asarray(zc, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    if zc.ndim != 2 or zc.shape != zs.shape:
        raise ContractViolation("fit_conditional expects matching (N, D) arrays")
    dim = zc.shape[1] if dim is None else dim
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    model = GaussianCondModel(rng, dim, hidden=hidden)
    opt = Adam(model.params(), lr=lr)
    for _ in range(steps):
        fit_q_step(zc, zs, model, opt)
    return model
