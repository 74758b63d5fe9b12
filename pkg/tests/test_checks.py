import numpy as np
import pytest

from spegc.checks import (SG_PROBE, GradcheckConfig, build_gradcheck_instance, oracle_row,
                          oracle_table, run_gradcheck)
from spegc.rng import Rng


def test_gradcheck_single_iteration_passes():
    report = run_gradcheck(GradcheckConfig(iters=1))
    assert report.passed, report.table()
    assert report.sinkhorn_iterations == 1


def test_gradcheck_probe_gets_exact_zero():
    report = run_gradcheck(GradcheckConfig(iters=2))
    probe = next(g for g in report.groups if g.group == SG_PROBE)
    assert probe.max_abs_grad == 0.0 and probe.passed


@pytest.mark.parametrize("seed", [1, 3])
def test_gradcheck_residue_shrinks_with_step(seed):
    # a coarse difference step leaves truncation error; a finer one removes it
    fine = run_gradcheck(GradcheckConfig(seed=seed, rel_step=1e-6))
    assert max(g.max_rel_error for g in fine.groups) <= 1e-5, fine.table()


def test_gradcheck_instance_shape():
    inst = build_gradcheck_instance(GradcheckConfig())
    assert len(inst.queued) == 3 and inst.patches.shape[0] == 3
    bundle = inst.loss()
    assert bundle.batch.V == 12 and bundle.cluster.k == 8
    assert np.isfinite(bundle.loss.item())


def test_gradcheck_config_limits():
    with pytest.raises(ValueError):
        GradcheckConfig(nodes_per_block=5, blocks=4).validate()
    with pytest.raises(ValueError):
        GradcheckConfig(iters=0).validate()


def test_report_serialisation():
    report = run_gradcheck(GradcheckConfig(iters=1))
    doc = report.to_dict()
    assert doc["passed"] and {g["group"] for g in doc["groups"]} >= {"backbone", "W_q", SG_PROBE}
    assert "backbone" in report.table()


def test_oracle_sharp_and_flat_limits():
    d = Rng(0).permutation(100) / 100.0
    sharp = oracle_row(d, 10, 1e-3)
    assert sharp.agreement == 1.0
    flat = oracle_row(d, 10, 1e3)
    assert flat.gap_to_uniform <= 1e-3
    linear = oracle_row(d, 10, 0.05, cost_mode="linear")
    assert linear.gap_to_uniform <= 1e-4


def test_oracle_table_rows_and_limits():
    rows = oracle_table(300, 30, [0.001, 0.05, 1000])
    assert [r.theta for r in rows] == [0.001, 0.05, 1000]
    assert rows[0].gap_to_oracle < rows[1].gap_to_oracle
    assert rows[2].gap_to_uniform < rows[1].gap_to_uniform
    with pytest.raises(ValueError):
        oracle_table(20_000, 10, [0.1])
    with pytest.raises(ValueError):
        oracle_table(10, 0, [0.1])
