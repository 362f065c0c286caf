import numpy as np
import pytest

from mdamerge import feature_align, pipeline, toybench


@pytest.fixture(scope="module")
def exact_regime():
    cfg = pipeline.RunConfig(bench=toybench.BenchConfig(d_feature=16, seed=1))
    cfg.hp.epochs = 20
    return cfg, toybench.build_bench(cfg.bench)


def test_exact_regime_frame(exact_regime):
    cfg, bench = exact_regime
    frame = pipeline.feature_frame(bench, cfg)
    assert frame.kind == "etf-exact" and frame.dim == 16


def test_exact_regime_run(exact_regime):
    cfg, bench = exact_regime
    reports = {r.method: r for r in pipeline.run_seed(cfg, bench)}
    assert set(reports) == set(pipeline.METHODS)
    for name in ("weight-average", "task-arithmetic", "mda-ta", "mda-am"):
        r = reports[name]
        assert 0.0 <= r.mean_accuracy <= 1.0
        assert set(r.nc) == {"nc1", "nc2", "nc3", "nc4"}
        assert set(r.bound["bound_value"]) == {"w1", "w2"}
    assert reports["task-arithmetic"].delta_etf == 0.0
    assert reports["mda-ta"].mean_accuracy > reports["weight-average"].mean_accuracy


def test_identity_rotations_do_not_change_accuracy(exact_regime):
    cfg, bench = exact_regime
    model = pipeline.merge_mda_ta(bench, cfg)
    rotated = pipeline.MergedModel("mda-ta", model.backbone, {t.task_id: np.eye(16) for t in bench.tasks})
    assert pipeline.evaluate(bench, model, cfg) == pipeline.evaluate(bench, rotated, cfg)


def test_etf_nearest_mode_runs(exact_regime):
    cfg, bench = exact_regime
    model, _ = pipeline.merge_mda_am(bench, cfg)
    cfg2 = pipeline.RunConfig(bench=cfg.bench, hp=cfg.hp, classifier_mode="etf-nearest")
    acc = pipeline.evaluate(bench, model, cfg2)
    assert len(acc) == 4 and all(0.0 <= a <= 1.0 for a in acc.values())


def test_oriented_frame_keeps_gram(exact_regime):
    cfg, bench = exact_regime
    raw = pipeline.feature_frame(bench, cfg).w
    rows = pipeline.oriented_rows(bench, cfg)
    np.testing.assert_allclose(rows @ rows.T, raw @ raw.T, atol=1e-12)
    seeded = pipeline.RunConfig(bench=cfg.bench, hp=feature_align.AlignHParams(frame_orientation="seeded"))
    np.testing.assert_array_equal(pipeline.oriented_rows(bench, seeded), raw)
