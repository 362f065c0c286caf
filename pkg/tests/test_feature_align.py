import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdamerge import etf, feature_align as fa, toybench
from mdamerge.errors import DegenerateInputError, InvalidArgumentError, ShapeMismatchError

from oracles import (
    align_oracle, entropy_oracle, gradcheck_instance, haar_rotations, planar, random_skew,
)


def test_cayley_zero_is_identity():
    np.testing.assert_array_equal(fa.cayley(np.zeros((4, 4))), np.eye(4))


@pytest.mark.parametrize("t", [0.1, 0.5, 1.0, -2.0, 7.3])
def test_cayley_planar_angle(t):
    r = fa.cayley(np.array([[0.0, t], [-t, 0.0]]))
    np.testing.assert_allclose(r, planar(2 * math.atan(t)), atol=1e-12)


def test_cayley_orthogonality_seeded():
    r = fa.cayley(random_skew(np.random.default_rng(3), 7))
    assert np.linalg.norm(r.T @ r - np.eye(7)) <= 1e-10
    assert abs(np.linalg.det(r) - 1) <= 1e-6


def test_cayley_rejects_non_skew():
    with pytest.raises(InvalidArgumentError):
        fa.cayley(np.eye(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 9))
def test_rotations_preserve_norms(seed, d):
    rng = np.random.default_rng(seed)
    r = fa.RotationParam("t", random_skew(rng, d)).r
    h = rng.standard_normal((5, d))
    np.testing.assert_allclose(np.linalg.norm(h @ r, axis=1), np.linalg.norm(h, axis=1), rtol=1e-8)


def test_procrustes_identity_case():
    m = np.random.default_rng(0).standard_normal((4, 3))
    r = fa.procrustes(m, m)
    assert np.linalg.norm(m @ r - m) < 1e-10


def test_procrustes_thirty_degrees():
    m = np.random.default_rng(1).standard_normal((3, 2))
    r = fa.procrustes(m, m @ planar(math.radians(30)))
    assert abs(math.atan2(r[1, 0], r[0, 0]) - math.radians(30)) < 1e-6


def test_procrustes_det_correction():
    m = np.eye(3)
    reflected = np.diag([1.0, 1.0, -1.0])
    r = fa.procrustes(m, reflected)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_procrustes_beats_random_rotations():
    rng = np.random.default_rng(2)
    m, target = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    best = np.linalg.norm(m @ fa.procrustes(m, target) - target)
    rs = haar_rotations(np.random.default_rng(3), 100_000, 3)
    resid = np.linalg.norm(np.einsum("ij,njk->nik", m, rs) - target, axis=(1, 2))
    assert best <= resid.min() + 1e-12


def test_procrustes_errors():
    with pytest.raises(DegenerateInputError):
        fa.procrustes(np.zeros((2, 2)), np.eye(2))
    with pytest.raises(ShapeMismatchError):
        fa.procrustes(np.eye(2), np.ones((3, 2)))


def test_entropy_examples():
    assert fa.loss_entropy(np.zeros((4, 10))) == pytest.approx(math.log(10), abs=1e-12)
    spike = np.full((2, 5), -1e6)
    spike[:, 1] = 1e6
    assert fa.loss_entropy(spike) <= 1e-6
    logits = np.random.default_rng(4).standard_normal((6, 4)) * 3
    assert abs(fa.loss_entropy(logits) - entropy_oracle(logits)) <= 1e-10


def test_entropy_gradient_formula():
    logits = np.random.default_rng(5).standard_normal((3, 4))
    _, g = fa.entropy_and_grad(logits)
    step = 1e-6
    for i in range(3):
        for j in range(4):
            e = np.zeros_like(logits)
            e[i, j] = step
            fd = (fa.loss_entropy(logits + e) - fa.loss_entropy(logits - e)) / (2 * step)
            assert abs(fd - g[i, j]) <= 1e-7


def test_class_map():
    cmap = fa.ClassMap((3, 2, 4))
    assert cmap.offsets == (0, 3, 5) and cmap.total == 9
    blocks = np.concatenate([cmap.block(t) for t in range(3)])
    np.testing.assert_array_equal(blocks, np.arange(9))
    np.testing.assert_array_equal(cmap.global_index(1, [0, 1]), [3, 4])
    with pytest.raises(InvalidArgumentError):
        cmap.global_index(1, [2])


def test_align_examples():
    rows = etf.build_etf(4, 3, seed=0).w
    cmap = fa.ClassMap((2, 2))
    feats = [rows[[0, 1]] * 3.0, rows[[2, 3]]]
    labels = [np.array([0, 1]), np.array([0, 1])]
    eye = [np.eye(3), np.eye(3)]
    assert fa.loss_align(feats, eye, rows, cmap, labels) == pytest.approx(0.0, abs=1e-24)

    one = fa.ClassMap((1,))
    value = fa.loss_align([-rows[[0]]], [np.eye(3)], rows, one, [np.array([0])])
    assert value == pytest.approx(4 * np.sum(rows[0] ** 2), abs=1e-12)


def test_align_matches_per_sample_oracle():
    rng = np.random.default_rng(6)
    rows = etf.build_etf(5, 4, seed=1).w
    cmap = fa.ClassMap((3, 2))
    feats = [rng.standard_normal((7, 4)), rng.standard_normal((5, 4))]
    feats[0][2] = 0.0
    labels = [rng.integers(0, 3, 7), rng.integers(0, 2, 5)]
    rots = [fa.cayley(random_skew(rng, 4)) for _ in range(2)]
    got = fa.loss_align(feats, rots, rows, cmap, labels)
    assert abs(got - align_oracle(feats, rots, rows, cmap.offsets, labels)) <= 1e-12


def test_rotation_loss_examples():
    rng = np.random.default_rng(7)
    rows = etf.build_etf(3, 3, seed=2).w
    cmap = fa.ClassMap((3,))
    means = [rng.standard_normal((3, 3))]
    target = fa.procrustes(means[0], rows)
    assert fa.loss_rotation([target], means, rows, cmap) == pytest.approx(0.0, abs=1e-24)
    value = fa.loss_rotation([np.eye(3)], means, rows, cmap)
    oracle = sum((np.eye(3)[i, j] - target[i, j]) ** 2 for i in range(3) for j in range(3))
    assert abs(value - oracle) <= 1e-12

    two = fa.ClassMap((3, 3))
    rows6 = etf.build_etf(6, 3, seed=2).w
    m2 = [rng.standard_normal((3, 3)) for _ in range(2)]
    rots = [fa.cayley(random_skew(rng, 3)) for _ in range(2)]
    parts = [
        fa.loss_rotation([rots[t]], [m2[t]], rows6[two.block(t)], fa.ClassMap((3,)))
        for t in range(2)
    ]
    assert fa.loss_rotation(rots, m2, rows6, two) == pytest.approx(sum(parts), rel=1e-14)


def test_class_means_flag_empty_classes():
    h = np.array([[3.0, 4.0], [0.0, 2.0]])
    means, empty = fa.class_means(h, np.array([0, 0]), 2)
    np.testing.assert_allclose(means[0], [0.3, 0.9])
    np.testing.assert_array_equal(means[1], 0.0)
    assert empty == [1]


def test_loss_report_additivity():
    rep = fa.LossReport(1.25, 0.5, 3.0, 0.8, 0.2)
    assert rep.total == 1.25 + 0.8 * 0.5 + 0.2 * 3.0
    assert rep.to_record()["total"] == rep.total


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    from oracles import gradient_errors

    for name, err in gradient_errors(seed).items():
        assert err <= 1e-4, name


def optimize_instance(seed, **hp):
    aligner, _, _ = gradcheck_instance(seed)
    batches = aligner.tasks
    return fa.optimize(
        toybench.init_backbone(5, 7, 6, seed), aligner.updates, aligner.frame_rows, batches,
        fa.AlignHParams(**hp),
    )


def test_zero_epochs_returns_initialisation():
    res = optimize_instance(0, epochs=0)
    assert all(v == 0.5 for v in res.lam.values.values())
    for r in res.rotation_matrices().values():
        np.testing.assert_array_equal(r, np.eye(6))
    assert len(res.trace) == 1


def test_no_rotation_gradient_without_alpha_beta():
    res = optimize_instance(1, epochs=5, alpha=0.0, beta=0.0, lr=1e-2)
    for r in res.rotation_matrices().values():
        np.testing.assert_array_equal(r, np.eye(6))
    assert any(v != 0.5 for v in res.lam.values.values())


def test_optimize_is_deterministic_and_traces():
    a = optimize_instance(2, epochs=4, lr=1e-2, batch=4)
    b = optimize_instance(2, epochs=4, lr=1e-2, batch=4)
    assert a.trace_jsonl() == b.trace_jsonl()
    records = [json.loads(line) for line in a.trace_jsonl().splitlines()]
    assert [r["epoch"] for r in records] == list(range(5))
    assert set(records[0]) == {"epoch", "entropy", "align", "rotation", "total"}


def test_pseudo_labels_run():
    res = optimize_instance(3, epochs=3, lr=1e-2, label_mode="pseudo")
    assert all(np.isfinite(r.total) for r in res.trace)


def test_hparam_validation():
    with pytest.raises(InvalidArgumentError):
        fa.AlignHParams(label_mode="soft")
    with pytest.raises(InvalidArgumentError):
        fa.AlignHParams(frame_orientation="random")


def test_orient_to_heads_keeps_gram():
    rng = np.random.default_rng(8)
    rows = etf.build_etf(6, 6, seed=0).w
    heads = [rng.standard_normal((6, 3)) for _ in range(2)]
    out = fa.orient_to_heads(rows, heads)
    np.testing.assert_allclose(out @ out.T, rows @ rows.T, atol=1e-12)
