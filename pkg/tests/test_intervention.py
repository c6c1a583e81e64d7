"""Marginalized prediction over the spurious dictionary."""

import numpy as np
import pytest

from protodebias import autodiff as ad
from protodebias.errors import ContractViolation
from protodebias.intervention import conditional_predict, intervene, intervene_log_probs_var
from protodebias.model import FusionNet
from protodebias.prototypes import CausalLibrary, SpuriousLibrary, causal_class_probs

from test_autodiff import fd_check


def _linear_fusion(latent_dim, num_classes, W=None, b=None):
    """Single-linear fusion with directly set weights."""
    fusion = FusionNet(np.random.default_rng(0), latent_dim, num_classes, hidden=0)
    layer = fusion.net.layers[0]
    layer.W.data[...] = 0.0 if W is None else W
    layer.b.data[...] = 0.0 if b is None else b
    return fusion


def _spurious_from(rows):
    rows = np.asarray(rows, dtype=float)
    lib = SpuriousLibrary(np.random.default_rng(1), m=rows.shape[0], dim=rows.shape[1])
    lib.prototypes.data[...] = rows
    return lib


def test_single_context_identity():
    rng = np.random.default_rng(2)
    fusion = FusionNet(rng, 3, 4, hidden=8)
    lib = _spurious_from(rng.normal(size=(1, 3)))
    z = rng.normal(size=3)
    out = intervene(z, lib, fusion)
    logits = fusion.fuse_logits(z, lib.prototypes.data[0])
    direct = np.exp(logits - logits.max())
    direct /= direct.sum()
    np.testing.assert_allclose(out.probs, direct, atol=1e-12)
    np.testing.assert_allclose(out.per_context[0], direct, atol=1e-12)


def test_context_independent_fusion_collapses():
    # zero weight on the p_s half makes the integrand constant
    D, C = 2, 3
    rng = np.random.default_rng(3)
    W = np.zeros((2 * D, C))
    W[:D] = rng.normal(size=(D, C))
    fusion = _linear_fusion(D, C, W=W)
    lib = _spurious_from(rng.normal(size=(6, D)))
    z = rng.normal(size=D)
    out = intervene(z, lib, fusion)
    single = intervene(z, _spurious_from(lib.prototypes.data[:1]), fusion)
    np.testing.assert_allclose(out.probs, single.probs, atol=1e-12)


def test_two_context_hand_values():
    # per-context logits [0, 0] and [ln 3, 0]:
    # mean of [0.5, 0.5] and [0.75, 0.25] = [0.625, 0.375]
    D, C = 2, 2
    W = np.zeros((2 * D, C))
    W[D] = [np.log(3.0), 0.0]  # first spurious dim drives logit 0
    fusion = _linear_fusion(D, C, W=W)
    lib = _spurious_from([[0.0, 0.0], [1.0, 0.0]])
    out = intervene(np.zeros(D), lib, fusion)
    np.testing.assert_allclose(out.per_context, [[0.5, 0.5], [0.75, 0.25]], atol=1e-12)
    np.testing.assert_allclose(out.probs, [0.625, 0.375], atol=1e-6)


def test_probs_is_row_mean_in_arithmetic_mode():
    rng = np.random.default_rng(4)
    fusion = FusionNet(rng, 3, 4, hidden=8)
    lib = _spurious_from(rng.normal(size=(5, 3)))
    z = rng.normal(size=(6, 3))
    out = intervene(z, lib, fusion)
    np.testing.assert_allclose(out.probs, out.per_context.mean(axis=1), atol=1e-12)
    np.testing.assert_allclose(out.probs.sum(axis=1), np.ones(6), atol=1e-12)


def test_duplicated_dictionary_leaves_probs_unchanged():
    rng = np.random.default_rng(5)
    fusion = FusionNet(rng, 2, 3, hidden=8)
    rows = rng.normal(size=(4, 2))
    z = rng.normal(size=2)
    once = intervene(z, _spurious_from(rows), fusion)
    twice = intervene(z, _spurious_from(np.vstack([rows, rows])), fusion)
    np.testing.assert_allclose(twice.probs, once.probs, atol=1e-12)


def test_probs_inside_per_context_hull():
    rng = np.random.default_rng(6)
    fusion = FusionNet(rng, 3, 3, hidden=8)
    lib = _spurious_from(rng.normal(size=(7, 3)))
    out = intervene(rng.normal(size=3), lib, fusion)
    lo = out.per_context.min(axis=0) - 1e-12
    hi = out.per_context.max(axis=0) + 1e-12
    assert np.all(out.probs >= lo) and np.all(out.probs <= hi)


def test_weights_override_uniform_prior():
    rng = np.random.default_rng(7)
    fusion = FusionNet(rng, 2, 2, hidden=8)
    lib = _spurious_from(rng.normal(size=(3, 2)))
    z = rng.normal(size=2)
    w = np.array([1.0, 0.0, 0.0])
    out = intervene(z, lib, fusion, weights=w)
    np.testing.assert_allclose(out.probs, out.per_context[0], atol=1e-12)
    with pytest.raises(ContractViolation):
        intervene(z, lib, fusion, weights=np.array([0.5, 0.2, 0.2]))


def test_geometric_mode_differs_but_normalizes():
    rng = np.random.default_rng(8)
    fusion = FusionNet(rng, 3, 3, hidden=8)
    lib = _spurious_from(rng.normal(size=(4, 3)) * 2.0)
    z = rng.normal(size=3)
    arith = intervene(z, lib, fusion, mode="arithmetic")
    geom = intervene(z, lib, fusion, mode="geometric")
    np.testing.assert_allclose(geom.probs.sum(), 1.0, atol=1e-12)
    assert not np.allclose(arith.probs, geom.probs, atol=1e-9)
    with pytest.raises(ContractViolation):
        intervene(z, lib, fusion, mode="harmonic")


def test_batch_matches_single_loop():
    rng = np.random.default_rng(9)
    fusion = FusionNet(rng, 3, 4, hidden=8)
    lib = _spurious_from(rng.normal(size=(5, 3)))
    z = rng.normal(size=(4, 3))
    batch = intervene(z, lib, fusion)
    for i in range(4):
        one = intervene(z[i], lib, fusion)
        np.testing.assert_allclose(batch.probs[i], one.probs, atol=1e-12)
        np.testing.assert_allclose(batch.per_context[i], one.per_context, atol=1e-12)


def test_var_log_probs_match_numpy_path():
    rng = np.random.default_rng(10)
    fusion = FusionNet(rng, 3, 4, hidden=8)
    lib = _spurious_from(rng.normal(size=(5, 3)))
    z = rng.normal(size=(6, 3))
    lp = intervene_log_probs_var(ad.Var(z), lib, fusion).data
    np.testing.assert_allclose(lp, np.log(intervene(z, lib, fusion).probs), atol=1e-10)


def test_var_log_probs_gradient():
    rng = np.random.default_rng(11)
    fusion = FusionNet(rng, 2, 2, hidden=4)
    lib = _spurious_from(rng.normal(size=(3, 2)))
    z = ad.parameter(rng.normal(size=(2, 2)))

    def build():
        lp = intervene_log_probs_var(z, lib, fusion)
        return ad.vmean(ad.take_rows(ad.reshape(lp, (4,)), np.array([0, 3])))

    fd_check(build, [z, lib.prototypes])


def test_freeze_contexts_blocks_dictionary_gradient():
    rng = np.random.default_rng(12)
    fusion = FusionNet(rng, 2, 2, hidden=4)
    lib = _spurious_from(rng.normal(size=(3, 2)))
    z = ad.parameter(rng.normal(size=(2, 2)))
    lp = intervene_log_probs_var(z, lib, fusion, freeze_contexts=True)
    ad.vmean(lp).backward()
    assert lib.prototypes.grad is None
    assert z.grad is not None


def test_context_subset_matches_sublibrary():
    rng = np.random.default_rng(13)
    fusion = FusionNet(rng, 2, 3, hidden=4)
    rows = rng.normal(size=(6, 2))
    lib = _spurious_from(rows)
    z = rng.normal(size=(3, 2))
    idx = np.array([1, 4])
    lp = intervene_log_probs_var(ad.Var(z), lib, fusion, context_idx=idx).data
    sub = intervene(z, _spurious_from(rows[idx]), fusion)
    np.testing.assert_allclose(np.exp(lp), sub.probs, atol=1e-10)


def test_conditional_predict_delegates():
    rng = np.random.default_rng(14)
    lib = CausalLibrary.init_random(rng, num_classes=3, k_per_class=2, dim=4, scale=1.0)
    z = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(conditional_predict(z, lib), causal_class_probs(z, lib))
