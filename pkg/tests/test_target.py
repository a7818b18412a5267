import json

import pytest

from tinydeploy.target import TargetError, load_preset, load_target, reachable_levels


def test_minimal_preset(minimal):
    assert set(minimal.levels) == {"mem"}
    assert set(minimal.engines) == {"cpu"}
    assert minimal.root_level() == "mem"
    assert reachable_levels(minimal, "cpu") == {"mem"}
    assert minimal.compute_level("cpu") == "mem"


def test_siracusa_preset_numbers(siracusa):
    assert siracusa.level("L1").capacity == 256 * 1024
    assert siracusa.level("L2").capacity == 2 * 1024 * 1024
    assert siracusa.level("weight_mem").capacity == 4 * 1024 * 1024
    assert siracusa.level("L1").parent == "L2"
    assert siracusa.engine("cluster").kind == "multi-core-cluster"
    assert siracusa.engine("npu").kind == "conv-npu"
    assert siracusa.engine("npu").supported_ops == ("conv1x1_q8",)


def test_siracusa_reachability(siracusa):
    assert reachable_levels(siracusa, "npu") == {"L1", "weight_mem"}
    assert reachable_levels(siracusa, "cluster") == {"L1"}
    assert reachable_levels(siracusa, "core") == {"L2"}
    assert siracusa.compute_level("cluster") == "L1"
    assert siracusa.compute_level("npu") == "L1"


def test_levels_form_tree(siracusa):
    roots = [l for l in siracusa.levels.values() if l.parent is None]
    assert len(roots) == 1
    parent_edges = sum(1 for l in siracusa.levels.values() if l.parent)
    assert parent_edges == len(siracusa.levels) - 1


def _doc():
    return {
        "name": "t",
        "levels": [
            {"name": "big", "capacity": 1024, "accessible_by": ["cpu"]},
            {"name": "small", "capacity": 64, "parent": "big",
             "dma": {"bandwidth": 4, "setup": 8}, "accessible_by": ["cpu"]},
        ],
        "engines": [{"name": "cpu", "kind": "scalar-core",
                     "throughput": {"default": 1}}],
        "defaults": {},
    }


def test_load_target_ok():
    t = load_target(json.dumps(_doc()))
    assert t.arena_level["global"] == "big"
    assert t.host_engine == "cpu"


def test_orphan_level_rejected():
    doc = _doc()
    doc["levels"][1]["parent"] = "nonexistent"
    with pytest.raises(TargetError, match="small.*unknown parent|unknown parent"):
        load_target(json.dumps(doc))


def test_zero_capacity_rejected():
    doc = _doc()
    doc["levels"][0]["capacity"] = 0
    with pytest.raises(TargetError, match="capacity"):
        load_target(json.dumps(doc))


def test_unknown_engine_kind_rejected():
    doc = _doc()
    doc["engines"][0]["kind"] = "quantum"
    with pytest.raises(TargetError, match="engine kind"):
        load_target(json.dumps(doc))


def test_missing_dma_rejected():
    doc = _doc()
    del doc["levels"][1]["dma"]
    with pytest.raises(TargetError, match="DMA"):
        load_target(json.dumps(doc))


def test_unreachable_engine_rejected():
    doc = _doc()
    doc["levels"][0]["accessible_by"] = []
    doc["levels"][1]["accessible_by"] = []
    with pytest.raises(TargetError, match="reaches no"):
        load_target(json.dumps(doc))


def test_unknown_preset():
    with pytest.raises(TargetError, match="preset"):
        load_preset("nope")
