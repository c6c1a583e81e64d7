"""Training loop, composite objective, checkpointing, evaluation, ablations.

The objective combines four terms:

    total = CE(labels, adjusted prediction)
          + lambda1 * cluster_loss(z_s)
          + lambda2 * proto_loss(z_c)
          + beta    * dependence penalty(z_c, z_s)

Optimization alternates one maximum-likelihood step on the conditional
model q with one Adam step on everything else (encoders, fusion, both
prototype matrices); q is constant inside the main step. Causal prototypes
are periodically snapped to training latents, and the served model is the
best-validation state with a final projection applied.

Ablation variants are spelled as strings in TrainConfig.ablation:
`no_mi` (beta = 0, q never fitted), `no_cluster` (lambda1 = 0), `no_do`
(cross-entropy and inference on the unadjusted distance classifier),
`shared_proto` (one matrix serves as both libraries), `erm_baseline`
(plain single-branch classifier, exclusive of the others).

Checkpoints are single .npz archives holding every parameter and optimizer
array plus a JSON metadata entry (config, RNG state, epoch/step counters,
the current epoch's batch order, prototype provenance). Saving mid-epoch
and resuming reproduces uninterrupted training bitwise.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .club import GaussianCondModel, club_penalty, estimate_bound, fit_conditional, fit_q_step
from .datagen import ImageSample, ScmConfig, batch_arrays, generate_dataset
from .errors import ConfigurationError, ContractViolation, NumericError
from .intervention import conditional_predict, intervene, intervene_log_probs_var
from .metrics import MetricsReport, classification_metrics, prototype_purity, spurious_diversity
from .model import DualEncoder, EncoderSpec, ErmClassifier, FusionNet, to_nchw
from .nn import Adam, cosine_lr, dedup_params
from .prototypes import (
    CausalLibrary,
    SpuriousLibrary,
    causal_class_log_probs_var,
    cluster_loss,
    project_prototypes,
    proto_loss,
)

ABLATIONS = ("no_mi", "no_cluster", "no_do", "shared_proto", "erm_baseline")
VARIANTS = ("full",) + ABLATIONS

_DIVERGENCE_LIMIT = 1e6
_MI_SCALE_CAP = 5.0  # ceiling on the balanced penalty weight


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters. Defaults follow the full-scale schedule; the desk
    preset overrides size and rate fields for minutes-long CPU runs."""

    latent_dim: int = 64
    encoder_width: int = 16
    encoder_depth: int = 3
    share_stem: bool = False
    fusion_hidden: int = 128
    q_hidden: int = 128
    k_per_class: int = 10
    num_spurious: int = 50
    lambda1: float = 0.1
    lambda2: float = 0.1
    beta: float = 0.5
    tau: float = 0.1
    margin: float = 1.0
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 32
    projection_period: int = 10
    squared_distance_in_classifier: bool = False
    nwgm_mode: str = "arithmetic"
    freeze_ps_in_ce: bool = False
    subsample_contexts: int = 0
    mi_floor: float = 1.0
    q_warmup_steps: int = 200
    q_steps_per_main: int = 1
    q_refresh_steps: int = 0
    q_lr: float | None = None
    q_var_floor: float = 0.0
    val_select_tol: float = 0.0
    unit_norm_codes: bool = False
    mi_grad_balance: bool = False
    beta_delay_epochs: int = 0
    beta_warmup_epochs: int = 0
    beta_floor: float = 0.0
    purity_neighbors: int = 20
    nmi_fit_steps: int = 1200
    nmi_fit_lr: float = 1e-3
    seed: int = 0
    ablation: tuple[str, ...] = ()

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "beta", "tau", "margin",
                     "learning_rate", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.latent_dim < 1 or self.encoder_width < 1:
            raise ConfigurationError("latent_dim and encoder_width must be positive")
        if not 1 <= self.encoder_depth <= 4:
            raise ConfigurationError("encoder_depth must be in [1, 4]")
        if self.k_per_class < 1 or self.num_spurious < 1:
            raise ConfigurationError("prototype counts must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.projection_period < 0:
            raise ConfigurationError("projection_period must be >= 0")
        if self.nwgm_mode not in ("arithmetic", "geometric"):
            raise ConfigurationError(f"unknown nwgm_mode {self.nwgm_mode!r}")
        if self.subsample_contexts < 0:
            raise ConfigurationError("subsample_contexts must be >= 0")
        if self.mi_floor < 0:
            raise ConfigurationError("mi_floor must be nonnegative")
        if self.q_warmup_steps < 0:
            raise ConfigurationError("q_warmup_steps must be nonnegative")
        if self.q_steps_per_main < 1:
            raise ConfigurationError("q_steps_per_main must be at least 1")
        if self.q_refresh_steps < 0:
            raise ConfigurationError("q_refresh_steps must be nonnegative")
        if self.q_lr is not None and self.q_lr <= 0:
            raise ConfigurationError("q_lr must be positive when set")
        if self.q_var_floor < 0:
            raise ConfigurationError("q_var_floor must be nonnegative")
        if self.val_select_tol < 0:
            raise ConfigurationError("val_select_tol must be nonnegative")
        if self.beta_delay_epochs < 0 or self.beta_warmup_epochs < 0:
            raise ConfigurationError("beta epoch schedule fields must be nonnegative")
        if self.beta_floor < 0:
            raise ConfigurationError("beta_floor must be nonnegative")
        unknown = set(self.ablation) - set(ABLATIONS)
        if unknown:
            raise ConfigurationError(f"unknown ablation flags {sorted(unknown)}")
        if "erm_baseline" in self.ablation and len(self.ablation) > 1:
            raise ConfigurationError("erm_baseline cannot be combined with other ablations")

    @property
    def is_erm(self) -> bool:
        return "erm_baseline" in self.ablation

    def effective_lambda1(self) -> float:
        return 0.0 if "no_cluster" in self.ablation else self.lambda1

    def effective_beta(self) -> float:
        return 0.0 if "no_mi" in self.ablation else self.beta

    def effective_q_lr(self) -> float:
        return self.learning_rate if self.q_lr is None else self.q_lr

    def q_logvar_min(self) -> float:
        """Lower log-variance clamp for the conditional model; the default
        floor of zero keeps the estimator's native tight fit."""
        return -8.0 if self.q_var_floor == 0.0 else float(np.log(self.q_var_floor))


def config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["ablation"] = list(cfg.ablation)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["ablation"] = tuple(d.get("ablation", ()))
    return TrainConfig(**d)


def _kmeans_rows(z: np.ndarray, m: int, rng: np.random.Generator,
                 iters: int = 60) -> np.ndarray:
    """Lloyd's algorithm with distance-weighted seeding; returns m centroids.

    Degenerate inputs (fewer distinct points than m) leave the surplus
    centroids on their seed points, which is fine for an initializer.
    """
    n = z.shape[0]
    centers = [z[rng.integers(n)]]
    for _ in range(m - 1):
        d2 = np.min([np.sum((z - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0.0:
            centers.append(z[rng.integers(n)])
            continue
        centers.append(z[rng.choice(n, p=d2 / total)])
    cent = np.array(centers)
    for _ in range(iters):
        d = ((z[:, None, :] - cent[None]) ** 2).sum(axis=2)
        assign = d.argmin(axis=1)
        for j in range(m):
            members = assign == j
            if members.any():
                cent[j] = z[members].mean(axis=0)
    return cent


def _nll_from_log_probs(log_probs: Var, labels: np.ndarray) -> Var:
    n, c = log_probs.data.shape
    flat = ad.reshape(log_probs, (n * c,))
    picked = ad.take_rows(flat, np.arange(n) * c + labels)
    return ad.neg(ad.vmean(picked))


# The dependence penalty must see the codes scale-free. The classifier reads
# them through a learned head and is indifferent to per-dimension scale, so
# an unstandardized penalty invites a cheap escape: shrink whatever should be
# hidden until the conditional model cannot resolve it, and let the head
# amplify it back. Standardizing with batch statistics (inside the graph, so
# rescaling moves the penalty too) closes that route; the fitting side uses
# the matching array-level transform.


_STANDARDIZE_EPS = 0.05  # caps the 1/sd gradient gain on near-constant dims


def _standardize_np(z: np.ndarray) -> np.ndarray:
    mu = z.mean(axis=0, keepdims=True)
    sd = np.sqrt(z.var(axis=0, keepdims=True) + 1e-12)
    return (z - mu) / (sd + _STANDARDIZE_EPS)


def _standardize_var(z: Var) -> Var:
    mu = ad.vmean(z, axis=0, keepdims=True)
    cen = ad.sub(z, mu)
    var = ad.vmean(ad.square(cen), axis=0, keepdims=True)
    sd = ad.sqrt(ad.add(var, Var(1e-12)))
    return ad.div(cen, ad.add(sd, Var(_STANDARDIZE_EPS)))


def split_losses(z_c: Var, z_s: Var, labels: np.ndarray, causal_lib: CausalLibrary,
                 spurious_lib: SpuriousLibrary, fusion: FusionNet,
                 q_model: GaussianCondModel | None, cfg: TrainConfig,
                 context_idx: np.ndarray | None = None,
                 ) -> tuple[Var, Var | None, dict]:
    """Task objective and dependence penalty as separate graphs.

    Returns `(base, mi, parts)`: `base` is cross-entropy plus the weighted
    clustering and prototype terms, `mi` is the clipped dependence estimate
    without its coefficient (None when the term is off). Keeping the two
    apart lets the trainer weight the penalty either by a fixed coefficient
    or by measured gradient size.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if "no_do" in cfg.ablation:
        log_probs = causal_class_log_probs_var(
            z_c, causal_lib, squared=cfg.squared_distance_in_classifier)
    else:
        log_probs = intervene_log_probs_var(
            z_c, spurious_lib, fusion,
            freeze_contexts=cfg.freeze_ps_in_ce, context_idx=context_idx)
    ce = _nll_from_log_probs(log_probs, labels)
    parts = {"ce": float(ce.data)}
    base = ce

    lam1 = cfg.effective_lambda1()
    if lam1 > 0.0:
        cl = cluster_loss(z_s, spurious_lib, tau=cfg.tau)
        parts["cluster"] = float(cl.data)
        base = ad.add(base, ad.mul(Var(lam1), cl))
    else:
        parts["cluster"] = 0.0

    if cfg.lambda2 > 0.0:
        pl = proto_loss(z_c, labels, causal_lib, margin=cfg.margin)
        parts["proto"] = float(pl.data)
        base = ad.add(base, ad.mul(Var(cfg.lambda2), pl))
    else:
        parts["proto"] = 0.0

    mi: Var | None = None
    if cfg.effective_beta() > 0.0:
        if q_model is None:
            raise ContractViolation("MI term requested without a conditional model")
        mi_raw = club_penalty(_standardize_var(z_c), _standardize_var(z_s), q_model)
        # the estimate upper-bounds the dependence only while the conditional
        # tracks the codes. Mildly negative values are ordinary estimator lag
        # and their gradient still points away from dependence, but chasing
        # them without limit is a runaway (the codes blow up to starve a stale
        # conditional), so the encoder-facing term is floored at -mi_floor;
        # the raw estimate stays in the log as mi_raw.
        mi = ad.clip(mi_raw, -cfg.mi_floor, np.inf)
        parts["mi_raw"] = float(mi_raw.data)
        parts["mi"] = float(mi.data)
    else:
        parts["mi"] = 0.0

    for name, value in parts.items():
        if not np.isfinite(value):
            raise NumericError(f"loss term {name!r} is not finite")
    return base, mi, parts


def total_loss(z_c: Var, z_s: Var, labels: np.ndarray, causal_lib: CausalLibrary,
               spurious_lib: SpuriousLibrary, fusion: FusionNet,
               q_model: GaussianCondModel | None, cfg: TrainConfig,
               context_idx: np.ndarray | None = None,
               beta_scale: float = 1.0) -> tuple[Var, dict]:
    """Composite objective over an encoded batch. Returns the scalar Var and
    a dict of term values. Terms with zero coefficient are skipped, so a
    zeroed config equals the bare cross-entropy exactly. `beta_scale`
    multiplies the dependence coefficient; the trainer ramps it over the
    first `beta_warmup_epochs` so the penalty lands on formed features
    instead of preventing any from forming."""
    base, mi, parts = split_losses(z_c, z_s, labels, causal_lib, spurious_lib,
                                   fusion, q_model, cfg, context_idx=context_idx)
    beta = cfg.effective_beta() * beta_scale
    total = base if (mi is None or beta <= 0.0) else ad.add(base, ad.mul(Var(beta), mi))
    parts["total"] = float(total.data)
    if not np.isfinite(parts["total"]):
        raise NumericError("total loss is not finite")
    return total, parts


@dataclass
class TrainResult:
    log: list[dict]
    best_epoch: int
    best_val_bacc: float
    wall_seconds: float


class Trainer:
    """Owns the models, optimizers and RNG for one run.

    `fit()` drives epochs; `step_once()` runs a single optimizer step (used
    by the resume tests); `finalize()` restores the best-validation state
    and applies the final prototype projection; `run()` is fit + finalize.
    """

    def __init__(self, cfg: TrainConfig, train_samples: list[ImageSample],
                 val_samples: list[ImageSample] | None = None):
        cfg.validate()
        if not train_samples:
            raise ContractViolation("training set is empty")
        self.cfg = cfg
        self.Xtr, self.ytr = batch_arrays(train_samples)
        self.train_ids = [s.sample_id for s in train_samples]
        self.Xtr_n = to_nchw(self.Xtr)
        self.num_classes = int(self.ytr.max()) + 1
        if val_samples:
            self.Xva, self.yva = batch_arrays(val_samples)
            if self.yva.max() >= self.num_classes:
                raise ContractViolation("validation labels outside training classes")
        else:
            self.Xva = self.yva = None

        root = np.random.SeedSequence(cfg.seed)
        init_ss, loop_ss = root.spawn(2)
        init_rng = np.random.Generator(np.random.PCG64(init_ss))
        self.rng = np.random.Generator(np.random.PCG64(loop_ss))

        spec = EncoderSpec(latent_dim=cfg.latent_dim, width=cfg.encoder_width,
                           depth=cfg.encoder_depth, share_stem=cfg.share_stem,
                           unit_norm=cfg.unit_norm_codes)
        self.erm: ErmClassifier | None = None
        self.encoder: DualEncoder | None = None
        self.fusion: FusionNet | None = None
        self.q_model: GaussianCondModel | None = None
        self.causal_lib: CausalLibrary | None = None
        self.spurious_lib: SpuriousLibrary | None = None
        self.opt_q: Adam | None = None

        self._enc_named: dict[str, Var] = {}
        if cfg.is_erm:
            self.erm = ErmClassifier(init_rng, spec, self.num_classes)
            main_params = {f"erm.{k}": v for k, v in self.erm.params().items()}
        else:
            self.encoder = DualEncoder(init_rng, spec)
            self.fusion = FusionNet(init_rng, cfg.latent_dim, self.num_classes,
                                    hidden=cfg.fusion_hidden)
            self.q_model = GaussianCondModel(init_rng, cfg.latent_dim, hidden=cfg.q_hidden,
                                             logvar_min=cfg.q_logvar_min())
            self.causal_lib = CausalLibrary.init_random(
                init_rng, self.num_classes, cfg.k_per_class, cfg.latent_dim)
            if "shared_proto" in cfg.ablation:
                self.spurious_lib = SpuriousLibrary(shared=self.causal_lib.prototypes)
            else:
                self.spurious_lib = SpuriousLibrary(init_rng, m=cfg.num_spurious,
                                                    dim=cfg.latent_dim)
            self._init_prototypes_from_data(init_rng)
            self._enc_named = self.encoder.params()
            main_params = dedup_params({
                **{f"encoder.{k}": v for k, v in self.encoder.params().items()},
                **{f"fusion.{k}": v for k, v in self.fusion.params().items()},
                "proto_causal": self.causal_lib.prototypes,
                "proto_spurious": self.spurious_lib.prototypes,
            })
            self.opt_q = Adam(self.q_model.params(), lr=cfg.effective_q_lr())
        self.opt_main = Adam(main_params, lr=cfg.learning_rate,
                             weight_decay=cfg.weight_decay)

        n = len(train_samples)
        self.steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
        self.total_steps = self.steps_per_epoch * cfg.epochs
        self.epoch = 0
        self.pos = 0  # batch position inside the current epoch
        self.global_step = 0
        self.perm: np.ndarray | None = None
        self.log: list[dict] = []
        self.best_val_bacc = -1.0
        self.best_epoch = -1
        self._best_snapshot: dict[str, np.ndarray] | None = None
        self._finalized = False

    def _init_prototypes_from_data(self, init_rng: np.random.Generator) -> None:
        """Anchor both libraries in the initial code distribution.

        Random near-origin prototypes start as a tiny simplex: every code is
        equidistant from all of them, so the assignment-entropy bonus is
        satisfied vacuously by collapse and the distance terms live on the
        wrong scale. Causal rows are seeded with actual initial codes of
        their class. Spurious rows are set to k-means centroids of the
        initial spurious codes: an untrained encoder already separates the
        saturated style marks, so the centroids hand the dictionary a
        style-shaped layout, and spreading batch assignments across such a
        dictionary (the entropy bonus) then requires codes that keep
        discriminating styles rather than an empty branch.
        """
        probe = self.encoder.encode(self.Xtr)
        for c in range(self.num_classes):
            members = np.flatnonzero(self.ytr == c)
            if members.size == 0:
                continue
            for j, k in enumerate(self.causal_lib.class_indices(c)):
                self.causal_lib.prototypes.data[k] = probe.z_c[members[j % members.size]]
        if not self.spurious_lib.shared:
            self.spurious_lib.prototypes.data[...] = _kmeans_rows(
                probe.z_s, self.spurious_lib.m, init_rng)

    # ---- parameter bookkeeping -------------------------------------------

    def named_params(self) -> dict[str, Var]:
        if self.cfg.is_erm:
            return {f"erm.{k}": v for k, v in self.erm.params().items()}
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"fusion.{k}": v for k, v in self.fusion.params().items()})
        out.update({f"q.{k}": v for k, v in self.q_model.params().items()})
        out["proto_causal"] = self.causal_lib.prototypes
        if not self.spurious_lib.shared:
            out["proto_spurious"] = self.spurious_lib.prototypes
        return out

    def _snapshot_params(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_params().items()}

    def _restore_params(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.named_params().items():
            v.data[...] = snap[k]

    # ---- core loop --------------------------------------------------------

    def _begin_epoch(self) -> None:
        self.perm = self.rng.permutation(self.Xtr_n.shape[0])
        self.pos = 0

    def _encode_train_latents(self) -> np.ndarray:
        return self.encoder.encode(self.Xtr).z_c

    def _project(self) -> None:
        latents = self._encode_train_latents()
        project_prototypes(self.causal_lib, latents, self.ytr, self.train_ids)

    def step_once(self) -> dict:
        """Run exactly one optimizer step (starting a new epoch if needed)."""
        if self.perm is None or self.pos >= self.steps_per_epoch:
            self._begin_epoch()
        cfg = self.cfg
        lo = self.pos * cfg.batch_size
        idx = self.perm[lo:lo + cfg.batch_size]
        x = Var(self.Xtr_n[idx])
        labels = self.ytr[idx]
        lr_now = cosine_lr(cfg.learning_rate, self.global_step, self.total_steps)

        if cfg.is_erm:
            logits = self.erm.forward_var(x)
            loss = _nll_from_log_probs(ad.log_softmax(logits, axis=1), labels)
            parts = {"ce": float(loss.data), "cluster": 0.0, "proto": 0.0,
                     "mi": 0.0, "total": float(loss.data)}
            if not np.isfinite(parts["total"]):
                raise NumericError("total loss is not finite")
            self.opt_main.zero_grad()
            loss.backward()
            self.opt_main.step(lr=lr_now)
        else:
            z_c, z_s = self.encoder.forward_var(x)
            if cfg.effective_beta() > 0.0:
                # q keeps its constant rate: the penalty upper-bounds the
                # dependence only while the conditional tracks the codes, so
                # its fit must not slow down with the encoder schedule
                for _ in range(cfg.q_steps_per_main):
                    fit_q_step(_standardize_np(z_c.data), _standardize_np(z_s.data),
                               self.q_model, self.opt_q)
            context_idx = None
            m = self.spurious_lib.m
            if cfg.subsample_contexts and 0 < cfg.subsample_contexts < m:
                context_idx = np.sort(self.rng.choice(m, size=cfg.subsample_contexts,
                                                      replace=False))
            beta_scale = self._beta_scale()
            if cfg.mi_grad_balance and cfg.effective_beta() * beta_scale > 0.0:
                parts = self._balanced_step(z_c, z_s, labels, context_idx,
                                            beta_scale, lr_now)
            else:
                loss, parts = total_loss(z_c, z_s, labels, self.causal_lib,
                                         self.spurious_lib, self.fusion, self.q_model,
                                         cfg, context_idx=context_idx,
                                         beta_scale=beta_scale)
                self.opt_main.zero_grad()
                loss.backward()
                self.opt_main.step(lr=lr_now)

        if abs(parts["total"]) > _DIVERGENCE_LIMIT:
            raise NumericError(f"loss diverged: {parts['total']:.3e}")
        self.pos += 1
        self.global_step += 1
        parts["lr"] = lr_now
        if self.pos >= self.steps_per_epoch:
            self._close_epoch()
        return parts

    def _balanced_step(self, z_c: Var, z_s: Var, labels: np.ndarray,
                       context_idx: np.ndarray | None, beta_scale: float,
                       lr_now: float) -> dict:
        """One optimizer step with the dependence gradient sized relative to
        the task gradient.

        A fixed coefficient cannot serve both phases of this training: strong
        enough to evict the artifact shortcut it crushes early feature
        formation (the penalty's score-style gradient dwarfs the
        cross-entropy's long before any dependence is worth that force), and
        weak enough to spare formation it never evicts. Measuring both
        gradients on the causal branch each step and scaling the penalty to
        `beta` times the task gradient keeps the pressure meaningful and
        survivable at every stage, whatever the seed or code scale. `beta`
        therefore reads as a force ratio here, not a loss weight.
        """
        cfg = self.cfg
        base, mi, parts = split_losses(z_c, z_s, labels, self.causal_lib,
                                       self.spurious_lib, self.fusion,
                                       self.q_model, cfg, context_idx=context_idx)
        self.opt_main.zero_grad()
        base.backward()
        task_grads: dict[str, np.ndarray | None] = {}
        task_sq = 0.0
        for name, p in self._enc_named.items():
            task_grads[name] = None if p.grad is None else p.grad.copy()
            if p.grad is not None and name.startswith("enc_c."):
                task_sq += float((p.grad ** 2).sum())
        mi.backward()
        pen_sq = 0.0
        for name, p in self._enc_named.items():
            if p.grad is None or not name.startswith("enc_c."):
                continue
            prev = task_grads[name]
            delta = p.grad if prev is None else p.grad - prev
            pen_sq += float((delta ** 2).sum())
        ratio = np.sqrt(task_sq) / (np.sqrt(pen_sq) + 1e-12)
        scale = min(cfg.effective_beta() * beta_scale * ratio, _MI_SCALE_CAP)
        # The scaled penalty lands on the content branch only.  Letting it
        # shove the style branch as well collapses every sample onto one
        # dictionary atom (the cheapest way to be unpredictable is to be
        # constant), which destroys the contexts the adjustment averages
        # over.  The style branch answers to the clustering term alone;
        # the conditional model still reads its true output, so the bound
        # stays honest.  Style params are reverted first so that on a
        # shared stem the content rewrite wins.
        for name, p in self._enc_named.items():
            if p.grad is None or name.startswith("enc_c."):
                continue
            prev = task_grads[name]
            p.grad = np.zeros_like(p.grad) if prev is None else prev
        for name, p in self._enc_named.items():
            if p.grad is None or not name.startswith("enc_c."):
                continue
            prev = task_grads[name]
            if prev is None:
                p.grad = scale * p.grad
            else:
                p.grad = prev + scale * (p.grad - prev)
        self.opt_main.step(lr=lr_now)
        parts["mi_scale"] = float(scale)
        total = float(base.data) + float(scale) * float(mi.data)
        parts["total"] = total
        if not np.isfinite(total):
            raise NumericError("total loss is not finite")
        return parts

    def _beta_scale(self) -> float:
        """Ramp weight for the dependence term at the current epoch.

        A small floor weight from the first step stops the branches from
        accumulating shared nuisance coordinates, then the ramp (zero
        through the delay window, linear over the warmup window) raises the
        price enough to evict what the floor tolerates. Full pressure from
        the first step stops any feature from forming, and full pressure
        landing on branches that share everything tears the classifier
        apart; the floor keeps the late transition down to the few bits
        the floor itself let through.
        """
        cfg = self.cfg
        beta = cfg.effective_beta()
        t = self.epoch - cfg.beta_delay_epochs
        if t < 0:
            ramp = 0.0
        elif cfg.beta_warmup_epochs > 0:
            ramp = min(1.0, t / cfg.beta_warmup_epochs)
        else:
            ramp = 1.0
        if beta > 0.0 and cfg.beta_floor > 0.0:
            ramp = max(ramp, min(1.0, cfg.beta_floor / beta))
        return ramp

    def _close_epoch(self) -> None:
        self.epoch += 1
        cfg = self.cfg
        if (not cfg.is_erm and cfg.effective_beta() > 0.0
                and cfg.q_refresh_steps > 0):
            # refit the conditional from scratch at every epoch boundary.
            # Warm-started fits die once the codes move: the stale means
            # force the variances wide, and a wide Gaussian passes almost
            # no gradient back to its means, so the estimate reads near
            # zero no matter how much dependence the codes carry. A fresh
            # fit on the current codes is the inner optimum the bound
            # actually calls for. Seeded by (seed, epoch) so resumed runs
            # rebuild the identical model.
            refit_ss = np.random.SeedSequence(entropy=cfg.seed,
                                              spawn_key=(7, self.epoch))
            refit_rng = np.random.Generator(np.random.PCG64(refit_ss))
            self.q_model = GaussianCondModel(refit_rng, cfg.latent_dim,
                                             hidden=cfg.q_hidden,
                                             logvar_min=cfg.q_logvar_min())
            self.opt_q = Adam(self.q_model.params(), lr=cfg.effective_q_lr())
            pair = self.encoder.encode(self.Xtr)
            zc_n, zs_n = _standardize_np(pair.z_c), _standardize_np(pair.z_s)
            for _ in range(cfg.q_refresh_steps):
                fit_q_step(zc_n, zs_n, self.q_model, self.opt_q)
        if (not cfg.is_erm and cfg.projection_period > 0
                and self.epoch % cfg.projection_period == 0):
            self._project()

    def validate(self) -> float:
        """Balanced accuracy on the validation split under the serving path."""
        if self.Xva is None:
            return float("nan")
        probs = self.predict_probs(self.Xva)
        preds = probs.argmax(axis=1)
        _, bacc, _ = classification_metrics(preds, self.yva, self.num_classes)
        return bacc

    def predict_probs(self, pixels: np.ndarray) -> np.ndarray:
        """Class probabilities under this variant's inference path."""
        cfg = self.cfg
        if cfg.is_erm:
            return self.erm.predict_probs(pixels)
        pair = self.encoder.encode(pixels)
        z_c = np.atleast_2d(pair.z_c)
        if "no_do" in cfg.ablation:
            return conditional_predict(z_c, self.causal_lib,
                                       squared=cfg.squared_distance_in_classifier)
        return intervene(z_c, self.spurious_lib, self.fusion, mode=cfg.nwgm_mode).probs

    def fit(self, epochs: int | None = None) -> None:
        """Train for `epochs` more epochs (default: through cfg.epochs).

        `step_once` closes epochs itself, so resuming mid-epoch from a
        checkpoint continues the interrupted epoch; its log entry then
        averages only the steps run here.
        """
        target = self.cfg.epochs if epochs is None else self.epoch + epochs
        target = min(target, self.cfg.epochs)
        if (self.global_step == 0 and not self.cfg.is_erm
                and self.cfg.effective_beta() > 0.0 and self.cfg.q_warmup_steps > 0):
            # burn the conditional in on the initial codes so the dependence
            # estimate starts near the bound instead of chasing from scratch
            pair = self.encoder.encode(self.Xtr)
            zc_n, zs_n = _standardize_np(pair.z_c), _standardize_np(pair.z_s)
            for _ in range(self.cfg.q_warmup_steps):
                fit_q_step(zc_n, zs_n, self.q_model, self.opt_q)
        while self.epoch < target:
            epoch_before = self.epoch
            term_sums: dict[str, float] = {}
            steps = 0
            while self.epoch == epoch_before:
                parts = self.step_once()
                steps += 1
                for k, v in parts.items():
                    term_sums[k] = term_sums.get(k, 0.0) + v
            val_bacc = self.validate()
            entry = {"epoch": self.epoch,
                     **{k: v / steps for k, v in term_sums.items()},
                     "val_bacc": val_bacc}
            self.log.append(entry)
            track = val_bacc if self.Xva is not None else 0.0
            # one-standard-error selection: a later checkpoint statistically
            # indistinguishable from the running maximum (within
            # val_select_tol) displaces it, because the extra epochs keep
            # tightening the dependence penalty while a small validation
            # split cannot rank the two states. Ties always go later; with
            # the tolerance at zero this is plain argmax.
            if self.Xva is None or track >= self.best_val_bacc - self.cfg.val_select_tol:
                self.best_val_bacc = max(track, self.best_val_bacc)
                self.best_epoch = self.epoch
                self._best_snapshot = self._snapshot_params()
                if not self.cfg.is_erm:
                    self._best_snapshot["__provenance__"] = np.array(
                        [p if p is not None else "" for p in self.causal_lib.provenance],
                        dtype=object)

    def finalize(self) -> None:
        """Restore the best-validation state and apply the final projection;
        after this the trainer serves the model that checkpoints as best."""
        if self._finalized:
            return
        if self._best_snapshot is not None:
            prov = self._best_snapshot.pop("__provenance__", None)
            self._restore_params(self._best_snapshot)
            if prov is not None:
                self.causal_lib.provenance = [p if p else None for p in prov.tolist()]
        if not self.cfg.is_erm:
            self._project()
        self._finalized = True

    def run(self, run_dir: str | Path | None = None) -> TrainResult:
        t0 = time.time()
        run_dir = Path(run_dir) if run_dir is not None else None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
        try:
            self.fit()
        except NumericError:
            if run_dir is not None:
                self.save_checkpoint(run_dir / "diverged.npz")
            raise
        if run_dir is not None:
            self.save_checkpoint(run_dir / "last.npz")
        self.finalize()
        if run_dir is not None:
            self.save_checkpoint(run_dir / "best.npz")
            (run_dir / "train_log.json").write_text(
                json.dumps(self.log, indent=2) + "\n", encoding="utf-8")
        return TrainResult(self.log, self.best_epoch, self.best_val_bacc,
                           time.time() - t0)

    # ---- persistence ------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays: dict[str, np.ndarray] = {}
        for k, v in self.named_params().items():
            arrays[f"param/{k}"] = v.data
        opt_states = {"main": self.opt_main}
        if self.opt_q is not None:
            opt_states["q"] = self.opt_q
        opt_meta = {}
        for oname, opt in opt_states.items():
            sd = opt.state_dict()
            opt_meta[oname] = sd["t"]
            for k, arr in sd["m"].items():
                arrays[f"opt_{oname}/m/{k}"] = arr
            for k, arr in sd["v"].items():
                arrays[f"opt_{oname}/v/{k}"] = arr
        if self._best_snapshot is not None:
            for k, arr in self._best_snapshot.items():
                if k == "__provenance__":
                    continue
                arrays[f"best/{k}"] = arr
        meta = {
            "config": config_dict(self.cfg),
            "num_classes": self.num_classes,
            "epoch": self.epoch,
            "pos": self.pos,
            "global_step": self.global_step,
            "perm": None if self.perm is None else self.perm.tolist(),
            "rng_state": self.rng.bit_generator.state,
            "opt_t": opt_meta,
            "log": self.log,
            "best_val_bacc": self.best_val_bacc,
            "best_epoch": self.best_epoch,
            "finalized": self._finalized,
            "class_of": None if self.cfg.is_erm else self.causal_lib.class_of.tolist(),
            "provenance": None if self.cfg.is_erm else [
                p if p is not None else "" for p in self.causal_lib.provenance],
            "best_provenance": None if (self._best_snapshot is None or self.cfg.is_erm)
            else [p if p else "" for p in
                  self._best_snapshot.get("__provenance__", np.array([], dtype=object)).tolist()],
            "spurious_shared": False if self.cfg.is_erm else self.spurious_lib.shared,
        }
        arrays["meta"] = np.array(json.dumps(meta))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load_checkpoint(cls, path: str | Path, train_samples: list[ImageSample],
                        val_samples: list[ImageSample] | None = None) -> "Trainer":
        path = Path(path)
        with np.load(path) as npz:
            meta = json.loads(str(npz["meta"][()]))
            arrays = {k: npz[k] for k in npz.files if k != "meta"}
        cfg = config_from_dict(meta["config"])
        trainer = cls(cfg, train_samples, val_samples)
        for k, v in trainer.named_params().items():
            v.data[...] = arrays[f"param/{k}"]
        for oname, opt in (("main", trainer.opt_main), ("q", trainer.opt_q)):
            if opt is None:
                continue
            sd = {"t": meta["opt_t"][oname],
                  "m": {k: arrays[f"opt_{oname}/m/{k}"] for k in opt.m},
                  "v": {k: arrays[f"opt_{oname}/v/{k}"] for k in opt.v}}
            opt.load_state_dict(sd)
        trainer.epoch = int(meta["epoch"])
        trainer.pos = int(meta["pos"])
        trainer.global_step = int(meta["global_step"])
        trainer.perm = None if meta["perm"] is None else np.asarray(meta["perm"], dtype=np.intp)
        state = meta["rng_state"]
        trainer.rng.bit_generator.state = state
        trainer.log = list(meta["log"])
        trainer.best_val_bacc = float(meta["best_val_bacc"])
        trainer.best_epoch = int(meta["best_epoch"])
        trainer._finalized = bool(meta["finalized"])
        if not cfg.is_erm:
            trainer.causal_lib.provenance = [
                p if p else None for p in meta["provenance"]]
        best = {k[len("best/"):]: arr for k, arr in arrays.items() if k.startswith("best/")}
        if best:
            if meta.get("best_provenance"):
                best["__provenance__"] = np.array(meta["best_provenance"], dtype=object)
            trainer._best_snapshot = best
        return trainer


# ---- serving bundles -------------------------------------------------------


@dataclass
class ModelBundle:
    """Frozen serving view of a checkpoint: enough to predict and evaluate."""

    cfg: TrainConfig
    num_classes: int
    erm: ErmClassifier | None
    encoder: DualEncoder | None
    fusion: FusionNet | None
    causal_lib: CausalLibrary | None
    spurious_lib: SpuriousLibrary | None

    @property
    def is_erm(self) -> bool:
        return self.cfg.is_erm

    def predict_probs(self, pixels: np.ndarray) -> np.ndarray:
        if self.is_erm:
            return self.erm.predict_probs(pixels)
        pair = self.encoder.encode(pixels)
        z_c = np.atleast_2d(pair.z_c)
        if "no_do" in self.cfg.ablation:
            return conditional_predict(z_c, self.causal_lib,
                                       squared=self.cfg.squared_distance_in_classifier)
        return intervene(z_c, self.spurious_lib, self.fusion,
                         mode=self.cfg.nwgm_mode).probs


def load_model_bundle(path: str | Path) -> ModelBundle:
    """Load a checkpoint for inference/evaluation without training data."""
    path = Path(path)
    with np.load(path) as npz:
        meta = json.loads(str(npz["meta"][()]))
        arrays = {k: npz[k] for k in npz.files if k != "meta"}
    cfg = config_from_dict(meta["config"])
    num_classes = int(meta["num_classes"])
    rng = np.random.Generator(np.random.PCG64(0))  # shapes only; weights overwritten
    spec = EncoderSpec(latent_dim=cfg.latent_dim, width=cfg.encoder_width,
                       depth=cfg.encoder_depth, share_stem=cfg.share_stem,
                       unit_norm=cfg.unit_norm_codes)
    if cfg.is_erm:
        erm = ErmClassifier(rng, spec, num_classes)
        for k, v in erm.params().items():
            v.data[...] = arrays[f"param/erm.{k}"]
        return ModelBundle(cfg, num_classes, erm, None, None, None, None)
    encoder = DualEncoder(rng, spec)
    fusion = FusionNet(rng, cfg.latent_dim, num_classes, hidden=cfg.fusion_hidden)
    causal = CausalLibrary.init_random(rng, num_classes, cfg.k_per_class, cfg.latent_dim)
    for k, v in encoder.params().items():
        v.data[...] = arrays[f"param/encoder.{k}"]
    for k, v in fusion.params().items():
        v.data[...] = arrays[f"param/fusion.{k}"]
    causal.prototypes.data[...] = arrays["param/proto_causal"]
    causal.class_of = np.asarray(meta["class_of"], dtype=np.int64)
    causal.provenance = [p if p else None for p in meta["provenance"]]
    if meta["spurious_shared"]:
        spurious = SpuriousLibrary(shared=causal.prototypes)
    else:
        spurious = SpuriousLibrary(rng, m=cfg.num_spurious, dim=cfg.latent_dim)
        spurious.prototypes.data[...] = arrays["param/proto_spurious"]
    return ModelBundle(cfg, num_classes, None, encoder, fusion, causal, spurious)


# ---- evaluation ------------------------------------------------------------


def dependence_probe(z_c: np.ndarray, z_s: np.ndarray, steps: int = 1200,
                     lr: float = 1e-3, hidden: int = 128, seed: int = 0) -> float:
    """Out-of-sample dependence estimate between two code sets.

    A fresh conditional is fitted on the even-indexed codes and the bound is
    evaluated on the odd-indexed codes. Fitting and evaluating on the same
    codes is useless here: with a few hundred samples the conditional
    memorizes its fitting set and the within-sample bound explodes into the
    thousands regardless of the true dependence.
    """
    z_c = np.asarray(z_c, dtype=np.float64)
    z_s = np.asarray(z_s, dtype=np.float64)
    if z_c.shape[0] < 2:
        raise ContractViolation("dependence probe needs at least two samples")
    q = fit_conditional(z_c[0::2], z_s[0::2], steps=steps, lr=lr, hidden=hidden,
                        seed=seed)
    return estimate_bound(z_c[1::2], z_s[1::2], q)


def evaluate_model(bundle: ModelBundle, test_samples: list[ImageSample],
                   train_samples: list[ImageSample] | None = None) -> MetricsReport:
    """Classification metrics plus, for prototype models, the dependence
    probe on test latents, prototype purity (against training latents) and
    spurious assignment diversity."""
    Xte, yte = batch_arrays(test_samples)
    probs = bundle.predict_probs(Xte)
    preds = probs.argmax(axis=1)
    acc, bacc, f1 = classification_metrics(preds, yte, bundle.num_classes)
    if bundle.is_erm:
        return MetricsReport(acc, bacc, f1, None, None, None, bundle.cfg.seed)

    pair = bundle.encoder.encode(Xte)
    nmi = dependence_probe(pair.z_c, pair.z_s, steps=bundle.cfg.nmi_fit_steps,
                           lr=bundle.cfg.nmi_fit_lr, hidden=bundle.cfg.q_hidden,
                           seed=bundle.cfg.seed)
    purity = None
    if train_samples:
        Xtr, ytr = batch_arrays(train_samples)
        latents = bundle.encoder.encode(Xtr).z_c
        n_nb = min(bundle.cfg.purity_neighbors, latents.shape[0])
        purity = prototype_purity(bundle.causal_lib, latents, ytr, n_neighbors=n_nb)
    div = spurious_diversity(pair.z_s, bundle.spurious_lib)
    return MetricsReport(acc, bacc, f1, nmi, purity, div, bundle.cfg.seed)


# ---- ablation suite --------------------------------------------------------

CSV_HEADER = "variant,seed,acc,bacc,f1,nmi,purity,div"


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def run_ablation_suite(scm_cfg: ScmConfig, train_cfg: TrainConfig, seeds: list[int],
                       out_dir: str | Path | None = None,
                       variants: tuple[str, ...] = VARIANTS) -> list[dict]:
    """Train and evaluate every variant on every seed with shared data and
    init per seed. Returns rows; writes results.csv and per-run checkpoints
    when out_dir is given."""
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ConfigurationError(f"unknown variants {sorted(unknown)}")
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for seed in seeds:
        scm_s = dataclasses.replace(scm_cfg, seed=seed)
        train = generate_dataset(scm_s, "train")
        val = generate_dataset(scm_s, "val")
        test = generate_dataset(scm_s, "test")
        for variant in variants:
            ablation = () if variant == "full" else (variant,)
            cfg_v = dataclasses.replace(train_cfg, seed=seed, ablation=ablation)
            run_dir = None if out_dir is None else out_dir / variant / f"seed{seed}"
            trainer = Trainer(cfg_v, train, val)
            trainer.run(run_dir=run_dir)
            if run_dir is not None:
                bundle = load_model_bundle(run_dir / "best.npz")
            else:
                bundle = _bundle_from_trainer(trainer)
            report = evaluate_model(bundle, test, train_samples=train)
            row = {"variant": variant, "seed": seed, **report.to_dict()}
            rows.append(row)
    if out_dir is not None:
        lines = [CSV_HEADER]
        for r in rows:
            lines.append(",".join([
                r["variant"], str(r["seed"]), _fmt(r["acc"]), _fmt(r["bacc"]),
                _fmt(r["macro_f1"]), _fmt(r["nmi_bound"]), _fmt(r["purity"]),
                _fmt(r["div"]),
            ]))
        (out_dir / "results.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


def _bundle_from_trainer(trainer: Trainer) -> ModelBundle:
    return ModelBundle(trainer.cfg, trainer.num_classes, trainer.erm, trainer.encoder,
                       trainer.fusion, trainer.causal_lib, trainer.spurious_lib)
