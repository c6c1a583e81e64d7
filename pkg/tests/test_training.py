"""Objective and trainer contracts.

The composite loss is pinned by a straight-line reimplementation that uses
nothing from the package's graph machinery: plain numpy over the same
weights. Optimizer determinism and checkpoint resume are asserted bitwise.
"""

import dataclasses

import numpy as np
import pytest

from protodebias.autodiff import Var
from protodebias.club import GaussianCondModel
from protodebias.datagen import ScmConfig, generate_dataset
from protodebias.errors import ConfigurationError, NumericError
from protodebias.model import FusionNet
from protodebias.prototypes import CausalLibrary, SpuriousLibrary, causal_class_probs
from protodebias.training import (
    TrainConfig,
    Trainer,
    config_dict,
    config_from_dict,
    evaluate_model,
    load_model_bundle,
    run_ablation_suite,
    total_loss,
)

from test_autodiff import fd_check


def _rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


# ---- hand fixture ----------------------------------------------------------

D = 3        # latent dim
C = 2        # classes
K = 2        # causal prototypes per class
M = 3        # spurious prototypes


def _hand_setup(seed=0):
    rng = _rng(seed)
    z_c = rng.normal(size=(2, D))
    z_s = rng.normal(size=(2, D))
    labels = np.array([0, 1])
    causal = CausalLibrary.init_random(_rng(seed + 1), C, K, D, scale=0.5)
    spurious = SpuriousLibrary(_rng(seed + 2), m=M, dim=D, scale=0.5)
    fusion = FusionNet(_rng(seed + 3), latent_dim=D, num_classes=C, hidden=0)
    q = GaussianCondModel(_rng(seed + 4), D, hidden=4)
    return z_c, z_s, labels, causal, spurious, fusion, q


def _oracle_total(z_c, z_s, labels, causal, spurious, fusion, q, cfg):
    """Straight-line numpy version of the objective, arithmetic adjustment,
    single-linear fusion, reading the same weights off the models."""
    W = fusion.net.layers[0].W.data
    b = fusion.net.layers[0].b.data
    P = causal.prototypes.data
    S = spurious.prototypes.data
    n = z_c.shape[0]

    # cross-entropy through the adjusted prediction
    ce_terms = []
    for i in range(n):
        probs = np.zeros(C)
        for m in range(S.shape[0]):
            logit = np.concatenate([z_c[i], S[m]]) @ W + b
            e = np.exp(logit - logit.max())
            probs += (e / e.sum()) / S.shape[0]
        ce_terms.append(-np.log(probs[labels[i]]))
    ce = float(np.mean(ce_terms))

    # spurious clustering with assignment-entropy bonus
    d2 = ((z_s[:, None, :] - S[None, :, :]) ** 2).sum(axis=2)
    attraction = float(d2.min(axis=1).mean())
    a = np.exp(-d2 - (-d2).max(axis=1, keepdims=True))
    a = a / a.sum(axis=1, keepdims=True)
    abar = a.mean(axis=0)
    entropy = float(-(abar * np.log(abar + 1e-300)).sum())
    cluster = attraction - cfg.tau * entropy

    # causal pull/push
    pp = []
    for i in range(n):
        dp = ((P - z_c[i]) ** 2).sum(axis=1)
        own = dp[causal.class_of == labels[i]].min()
        other = dp[causal.class_of != labels[i]].min()
        pp.append(own + max(0.0, cfg.margin - other))
    proto = float(np.mean(pp))

    # dependence penalty: matched minus all-pairs mean log-density, computed
    # on batch-standardized codes (the loss feeds the conditional scale-free)
    zc_n = (z_c - z_c.mean(axis=0)) / (np.sqrt(z_c.var(axis=0) + 1e-12) + 0.05)
    zs_n = (z_s - z_s.mean(axis=0)) / (np.sqrt(z_s.var(axis=0) + 1e-12) + 0.05)
    Wt = q.trunk.layers[0].W.data
    bt = q.trunk.layers[0].b.data
    Wm = q.mu_head.W.data
    bm = q.mu_head.b.data
    Wl = q.logvar_head.W.data
    bl = q.logvar_head.b.data
    h = np.maximum(zs_n @ Wt + bt, 0.0)
    mu = h @ Wm + bm
    lv = np.clip(h @ Wl + bl, -8.0, 8.0)
    A = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            diff = zc_n[j] - mu[i]
            A[i, j] = -0.5 * float(
                (diff * diff / np.exp(lv[i]) + lv[i] + np.log(2 * np.pi)).sum())
    mi_raw = float(np.trace(A) / n - A.mean())
    mi = max(mi_raw, -cfg.mi_floor)  # encoder-facing term is floored

    total = ce + cfg.lambda1 * cluster + cfg.lambda2 * proto + cfg.beta * mi
    return total, {"ce": ce, "cluster": cluster, "proto": proto, "mi": mi,
                   "mi_raw": mi_raw}


def test_total_loss_matches_straight_line_oracle():
    z_c, z_s, labels, causal, spurious, fusion, q = _hand_setup()
    cfg = TrainConfig(latent_dim=D, lambda1=0.2, lambda2=0.3, beta=0.4,
                      tau=0.1, margin=1.0, fusion_hidden=0)
    loss, parts = total_loss(Var(z_c), Var(z_s), labels, causal, spurious,
                             fusion, q, cfg)
    want_total, want = _oracle_total(z_c, z_s, labels, causal, spurious, fusion, q, cfg)
    for k in ("ce", "cluster", "proto", "mi", "mi_raw"):
        assert abs(parts[k] - want[k]) < 1e-10, k
    assert abs(parts["total"] - want_total) < 1e-10


def test_zeroed_terms_leave_bare_cross_entropy():
    z_c, z_s, labels, causal, spurious, fusion, q = _hand_setup(1)
    cfg = TrainConfig(latent_dim=D, lambda1=0.0, lambda2=0.0, beta=0.0,
                      fusion_hidden=0)
    loss, parts = total_loss(Var(z_c), Var(z_s), labels, causal, spurious,
                             fusion, q, cfg)
    # zero-coefficient terms are skipped, not multiplied by zero
    assert parts["total"] == parts["ce"]
    assert parts["cluster"] == 0.0 and parts["proto"] == 0.0 and parts["mi"] == 0.0
    _, want = _oracle_total(z_c, z_s, labels, causal, spurious, fusion, q,
                            dataclasses.replace(cfg, lambda1=0.0))
    assert abs(parts["ce"] - want["ce"]) < 1e-12


def test_ablation_flags_zero_their_terms():
    z_c, z_s, labels, causal, spurious, fusion, q = _hand_setup(2)
    base = TrainConfig(latent_dim=D, lambda1=0.2, lambda2=0.3, beta=0.4,
                       fusion_hidden=0)
    _, full = total_loss(Var(z_c), Var(z_s), labels, causal, spurious, fusion, q, base)
    for flag, term in (("no_mi", "mi"), ("no_cluster", "cluster")):
        cfg = dataclasses.replace(base, ablation=(flag,))
        _, parts = total_loss(Var(z_c), Var(z_s), labels, causal, spurious,
                              fusion, q, cfg)
        assert parts[term] == 0.0
        assert full[term] != 0.0


def test_no_do_cross_entropy_uses_distance_classifier():
    z_c, z_s, labels, causal, spurious, fusion, q = _hand_setup(3)
    cfg = TrainConfig(latent_dim=D, lambda1=0.0, lambda2=0.0, beta=0.0,
                      fusion_hidden=0, ablation=("no_do",))
    _, parts = total_loss(Var(z_c), Var(z_s), labels, causal, spurious,
                          fusion, q, cfg)
    probs = causal_class_probs(z_c, causal)
    want = -np.mean([np.log(probs[i, labels[i]]) for i in range(len(labels))])
    assert abs(parts["ce"] - want) < 1e-10


def test_total_loss_gradients_match_finite_differences():
    z_c, z_s, labels, causal, spurious, fusion, q = _hand_setup(4)
    cfg = TrainConfig(latent_dim=D, lambda1=0.2, lambda2=0.3, beta=0.4,
                      fusion_hidden=0)
    zc_leaf = Var(z_c, requires_grad=True)
    zs_leaf = Var(z_s, requires_grad=True)
    leaves = [zc_leaf, zs_leaf, causal.prototypes, spurious.prototypes,
              fusion.net.layers[0].W]

    def build():
        loss, _ = total_loss(zc_leaf, zs_leaf, labels, causal, spurious,
                             fusion, q, cfg)
        return loss

    fd_check(build, leaves)


def test_total_loss_rejects_non_finite_terms():
    z_c, z_s, labels, causal, spurious, fusion, q = _hand_setup(5)
    cfg = TrainConfig(latent_dim=D, fusion_hidden=0)
    z_bad = z_c.copy()
    z_bad[0, 0] = np.nan
    with pytest.raises(NumericError):
        total_loss(Var(z_bad), Var(z_s), labels, causal, spurious, fusion, q, cfg)


# ---- trainer ----------------------------------------------------------------

def _tiny_scm(seed=0, n=16):
    return ScmConfig(num_classes=3, num_artifacts=3, image_size=32,
                     rho_train=0.9, rho_test=0.0, samples_per_split=n, seed=seed)


def _tiny_cfg(**kw):
    base = dict(latent_dim=8, encoder_width=4, encoder_depth=2, fusion_hidden=8,
                q_hidden=8, k_per_class=2, num_spurious=4, learning_rate=1e-3,
                epochs=2, batch_size=8, projection_period=1, nmi_fit_steps=10,
                seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    scm = _tiny_scm()
    return (generate_dataset(scm, "train"), generate_dataset(scm, "val", n=8),
            generate_dataset(scm, "test", n=8))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(ablation=("bogus",)).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(ablation=("erm_baseline", "no_mi")).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(nwgm_mode="harmonic").validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(lambda1=-0.1).validate()
    cfg = TrainConfig(ablation=("no_mi", "no_do"))
    cfg.validate()
    assert config_from_dict(config_dict(cfg)) == cfg


def test_trainer_runs_are_bitwise_identical(tiny_data):
    train, val, _ = tiny_data
    ra = Trainer(_tiny_cfg(), train, val)
    rb = Trainer(_tiny_cfg(), train, val)
    ra.fit()
    rb.fit()
    pa, pb = ra.named_params(), rb.named_params()
    assert set(pa) == set(pb)
    for k in pa:
        assert np.array_equal(pa[k].data, pb[k].data), k
    assert ra.log == rb.log


def test_checkpoint_resume_is_bitwise(tmp_path, tiny_data):
    train, val, _ = tiny_data
    ra = Trainer(_tiny_cfg(), train, val)
    ra.fit()

    rb = Trainer(_tiny_cfg(), train, val)
    rb.fit(epochs=1)
    rb.step_once()                       # leave rb mid-epoch
    assert 0 < rb.pos < rb.steps_per_epoch
    path = rb.save_checkpoint(tmp_path / "mid.npz")
    rc = Trainer.load_checkpoint(path, train, val)
    assert rc.epoch == rb.epoch and rc.pos == rb.pos
    rc.fit()                             # finish the interrupted epoch

    pa, pc = ra.named_params(), rc.named_params()
    for k in pa:
        assert np.array_equal(pa[k].data, pc[k].data), k
    assert ra.best_epoch == rc.best_epoch
    assert ra.best_val_bacc == rc.best_val_bacc
    # per-epoch log averages differ for the interrupted epoch; predictions
    # must not
    Xv = np.stack([s.pixels for s in val])
    assert np.array_equal(ra.predict_probs(Xv), rc.predict_probs(Xv))


def test_no_mi_never_touches_the_conditional_model(tiny_data):
    train, val, _ = tiny_data
    tr = Trainer(_tiny_cfg(ablation=("no_mi",), epochs=1), train, val)
    before = {k: v.data.copy() for k, v in tr.q_model.params().items()}
    tr.fit()
    for k, v in tr.q_model.params().items():
        assert np.array_equal(before[k], v.data)


def test_shared_proto_aliases_one_matrix(tiny_data):
    train, val, _ = tiny_data
    tr = Trainer(_tiny_cfg(ablation=("shared_proto",), epochs=1), train, val)
    assert tr.spurious_lib.prototypes is tr.causal_lib.prototypes
    assert "proto_spurious" not in tr.named_params()
    ids = [id(v) for v in tr.opt_main.params.values()]
    assert len(ids) == len(set(ids))
    tr.fit()  # must run without double-updating the alias


def test_erm_trainer_has_no_prototype_state(tiny_data):
    train, val, _ = tiny_data
    tr = Trainer(_tiny_cfg(ablation=("erm_baseline",), epochs=1), train, val)
    assert tr.encoder is None and tr.causal_lib is None
    tr.fit()
    assert all(k.startswith("erm.") for k in tr.named_params())


def test_projection_runs_on_schedule(tiny_data):
    train, val, _ = tiny_data
    tr = Trainer(_tiny_cfg(projection_period=1, epochs=1), train, val)
    tr.fit()
    assert tr.causal_lib.is_projected()
    # every prototype is bitwise equal to some training latent of its class
    latents = tr.encoder.encode(tr.Xtr).z_c
    for k in range(tr.causal_lib.total):
        c = tr.causal_lib.class_of[k]
        pool = latents[tr.ytr == c]
        assert any(np.array_equal(tr.causal_lib.prototypes.data[k], row) for row in pool)


def test_run_finalize_serves_best_and_projects(tmp_path, tiny_data):
    train, val, test = tiny_data
    tr = Trainer(_tiny_cfg(projection_period=0), train, val)
    result = tr.run(run_dir=tmp_path / "run")
    assert (tmp_path / "run" / "best.npz").exists()
    assert (tmp_path / "run" / "last.npz").exists()
    assert tr.causal_lib.is_projected()
    assert result.best_epoch >= 1

    bundle = load_model_bundle(tmp_path / "run" / "best.npz")
    Xt = np.stack([s.pixels for s in test])
    assert np.array_equal(bundle.predict_probs(Xt), tr.predict_probs(Xt))
    report = evaluate_model(bundle, test, train_samples=train)
    assert 0.0 <= report.bacc <= 1.0
    assert report.nmi_bound is not None
    assert report.purity is not None and 0.0 <= report.purity <= 1.0
    assert report.div is not None and report.div <= np.log(tr.spurious_lib.m) + 1e-12


def test_divergent_run_raises_and_dumps_state(tmp_path, tiny_data):
    train, val, _ = tiny_data
    tr = Trainer(_tiny_cfg(learning_rate=1e5, epochs=3), train, val)
    with pytest.raises(NumericError):
        tr.run(run_dir=tmp_path / "boom")
    assert (tmp_path / "boom" / "diverged.npz").exists()


def test_suite_writes_rows_and_csv(tmp_path):
    scm = _tiny_scm(n=12)
    cfg = _tiny_cfg(epochs=1, nmi_fit_steps=5)
    rows = run_ablation_suite(scm, cfg, seeds=[0], out_dir=tmp_path,
                              variants=("full", "erm_baseline"))
    assert [r["variant"] for r in rows] == ["full", "erm_baseline"]
    erm_row = rows[1]
    assert erm_row["nmi_bound"] is None and erm_row["purity"] is None
    csv = (tmp_path / "results.csv").read_text().strip().splitlines()
    assert csv[0] == "variant,seed,acc,bacc,f1,nmi,purity,div"
    assert csv[2].startswith("erm_baseline,0,") and csv[2].endswith(",,,")
    assert (tmp_path / "full" / "seed0" / "best.npz").exists()
