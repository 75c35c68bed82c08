import json

import numpy as np
import pytest
from conftest import GOLDEN
from hypothesis import given
from hypothesis import strategies as st

from qdiff import qsim
from qdiff.ansatz import AnsatzConfig, build_ansatz, build_fqconv, build_hqconv
from qdiff.qsim import CircuitError, CircuitSpec


def trainable_slots(spec):
    return {g.slot.value for g in spec.gates if g.slot.kind == "trainable"}


def entangling(spec):
    return [g for g in spec.gates if g.kind in qsim.CONTROLLED]


def hand_hqconv_layer():
    """Stage A ring pairs per channel, then channel pairs 0->1 and 1->2 on the first pixel."""
    pairs = [(c * 4 + p, c * 4 + (p + 1) % 4) for c in range(3) for p in range(4)]
    return pairs + [(0, 4), (4, 8)]


def test_hqconv_default_sizes():
    spec = build_hqconv(AnsatzConfig())
    assert spec.n_qubits == 12 and spec.n_inputs == 12
    assert len(trainable_slots(spec)) == spec.n_trainable == 3 * (3 * 4 * 2 + 2 * 2) == 84


def test_hqconv_single_channel_has_no_channel_stage():
    spec = build_hqconv(AnsatzConfig(n_channels=1, n_layers=1))
    assert spec.n_qubits == 4 and len(trainable_slots(spec)) == 8
    assert all(g.control // 4 == g.target // 4 for g in entangling(spec))


def test_hqconv_matches_hand_enumeration():
    spec = build_hqconv(AnsatzConfig())
    expected = []
    for _ in range(3):
        for control, target in hand_hqconv_layer():
            expected += [("CRZ", control, target), ("CRX", control, target)]
    assert [(g.kind, g.control, g.target) for g in entangling(spec)] == expected
    assert [g.slot.value for g in entangling(spec)] == list(range(84))


def test_hqconv_stage_a_stays_inside_channels():
    spec = build_hqconv(AnsatzConfig())
    per_layer = len(entangling(spec)) // 3
    for i, g in enumerate(entangling(spec)):
        if i % per_layer < 24:
            assert g.control // 4 == g.target // 4


def test_fqconv_default_sizes_and_stride():
    spec = build_fqconv(AnsatzConfig(kind="FQConv"))
    assert len(trainable_slots(spec)) == spec.n_trainable == 72
    ent = entangling(spec)
    assert len(ent) == 72
    assert sum(g.kind == "CRZ" for g in ent) == sum(g.kind == "CRX" for g in ent) == 36
    for g in ent:
        assert (g.target - g.control) % 12 == 4
        assert g.control // 4 != g.target // 4


def test_fqconv_layer_order_is_all_crz_then_all_crx():
    ent = entangling(build_fqconv(AnsatzConfig(kind="FQConv")))
    for layer in range(3):
        block = ent[24 * layer : 24 * (layer + 1)]
        assert [g.kind for g in block] == ["CRZ"] * 12 + ["CRX"] * 12
        assert [g.control for g in block] == list(range(12)) * 2


@pytest.mark.parametrize("kind", ["HQConv", "FQConv"])
def test_all_zero_parameters_reduce_to_encoding(kind, rng):
    spec = build_ansatz(AnsatzConfig(kind=kind))
    np.testing.assert_allclose(qsim.run_circuit(spec, np.zeros(spec.n_trainable), np.zeros(12)), np.ones(12),
                               atol=1e-12)
    x = rng.uniform(-np.pi, np.pi, 12)
    np.testing.assert_allclose(qsim.run_circuit(spec, np.zeros(spec.n_trainable), x), np.cos(x), atol=1e-12)


@pytest.mark.parametrize("kind", ["HQConv", "FQConv"])
def test_default_matches_golden_file(kind):
    path = GOLDEN / f"{kind.lower()}_default.json"
    spec = build_ansatz(AnsatzConfig(kind=kind))
    assert spec.to_json() + "\n" == path.read_text()
    assert CircuitSpec.from_json(path.read_text()) == spec


def test_golden_files_encode_inputs_first():
    for name in ("hqconv", "fqconv"):
        doc = json.loads((GOLDEN / f"{name}_default.json").read_text())
        head = doc["gates"][:12]
        assert [(g["kind"], g["target"], g["slot"]["kind"], g["slot"]["value"]) for g in head] == \
            [("RX", q, "input", q) for q in range(12)]


@given(st.sampled_from(["HQConv", "FQConv"]), st.integers(2, 4), st.integers(2, 4), st.integers(1, 4),
       st.booleans())
def test_builds_are_deterministic(kind, channels, pixels, layers, wrap):
    cfg = AnsatzConfig(kind, channels, pixels, layers, wrap)
    assert build_ansatz(cfg).to_json() == build_ansatz(cfg).to_json()


def test_no_wrap_drops_ring_pairs():
    spec = build_hqconv(AnsatzConfig(n_layers=1, wrap=False))
    assert len(trainable_slots(spec)) == 3 * 3 * 2 + 2 * 2
    closed = build_hqconv(AnsatzConfig(n_layers=1, close_channel_ring=True))
    assert closed.n_trainable == 28 + 2


@pytest.mark.parametrize("bad", [AnsatzConfig(n_layers=0), AnsatzConfig(kind="XQConv"),
                                 AnsatzConfig(n_channels=5, pixels_per_channel=4),
                                 AnsatzConfig(kind="FQConv", n_channels=1)])
def test_invalid_configs_are_rejected(bad):
    with pytest.raises(CircuitError):
        build_ansatz(bad)


def test_builder_kind_mismatch():
    with pytest.raises(CircuitError):
        build_hqconv(AnsatzConfig(kind="FQConv"))
    with pytest.raises(CircuitError):
        build_fqconv(AnsatzConfig(kind="HQConv"))
