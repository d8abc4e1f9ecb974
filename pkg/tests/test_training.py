import numpy as np
import pytest

from manetpp import checks, training
from manetpp.losses import LossConfig
from manetpp.sampling import NEGATIVE, POSITIVE, build_minibatch
from manetpp.synthgen import SynthConfig, generate_sequence


@pytest.fixture(scope="module")
def tiny_seqs():
    return [generate_sequence(SynthConfig(length=10, seed=s), f"s{s}") for s in (1, 2)]


def _quick(seqs, iterations=3, seed=0, **kw):
    cfg = training.TrainConfig(iterations=iterations, n_frames=2, n_pos=4, n_neg=8, crop_size=75,
                               probe_frames=2, probe_every=1, seed=seed, **kw)
    return training.train(seqs, checks.small_net_config(), cfg)


def test_minibatch_counts(tiny_seqs, rng):
    b = build_minibatch(tiny_seqs[0], rng, domain=1)
    assert b.domain == 1 and len(b.frames) == 8
    for fb in b.frames:
        assert (fb.samples.labels == POSITIVE).sum() == 32
        assert (fb.samples.labels == NEGATIVE).sum() == 96
        assert fb.rgb.shape[-2:] == (107, 107)
    assert len({fb.frame for fb in b.frames}) == 8


def test_one_branch_per_sequence_and_cycling(tiny_seqs):
    model, log, probes = _quick(tiny_seqs, iterations=4)
    assert len(model.ia.instance) == 2
    assert [r["domain"] for r in log] == [0, 1, 0, 1]
    assert sorted(probes) == [0, 1, 2, 3, 4]


def test_log_records_fields(tiny_seqs):
    _, log, _ = _quick(tiny_seqs, iterations=2)
    keys = {"iter", "domain", "total", "l_cls", "l_inst", "l_hd", "psi_ga", "psi_ma", "nu2"}
    assert keys <= set(log[0])
    r = log[0]
    assert r["l_hd"] == pytest.approx(r["psi_ga"] - r["psi_ma"])
    assert r["total"] == pytest.approx(r["l_cls"] + 0.1 * r["l_inst"] + r["nu2"] * r["l_hd"])


def test_nu2_schedule_in_log():
    off = LossConfig.offline()
    assert off.nu2(0) == 1.0 and off.nu2(600) == 0.01


def test_training_is_deterministic(tiny_seqs):
    m1, l1, _ = _quick(tiny_seqs, seed=3)
    m2, l2, _ = _quick(tiny_seqs, seed=3)
    assert [r["total"] for r in l1] == [r["total"] for r in l2]
    for (k, a), (_, b) in zip(m1.named_params().items(), m2.named_params().items()):
        np.testing.assert_array_equal(a.value, b.value, err_msg=k)


def test_training_changes_every_group(tiny_seqs):
    before, _, _ = _quick(tiny_seqs, iterations=0)
    after, _, _ = _quick(tiny_seqs, iterations=2)
    changed = {k.split(".")[0] for k, p in after.named_params().items()
               if not np.array_equal(p.value, before.named_params()[k].value)}
    assert {"ga", "ma", "ia"} <= changed


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(tiny_seqs):
    with pytest.raises(training.TrainingDiverged) as e:
        _quick(tiny_seqs, iterations=3, lr=1e30)
    assert "iter" in e.value.record


def test_empty_sequence_list():
    with pytest.raises(ValueError):
        training.train([])
