"""Config validation, leaf counting, path enumeration, and serialization."""

from __future__ import annotations

import json

import pytest

from treegen import (ConfigError, IncompleteTreeError, LayerSpec, Mode, Role,
                     Tree, TreeConfig, TreeShape, classify_shape, config_hash,
                     config_from_dict, expected_leaf_count, leaf_paths,
                     validate_config)
from treegen.tree import (child_id, config_to_dict, node_from_record,
                          node_to_record, structural_key, TreeNode)

from conftest import build_full_tree, pt_config, sft_config


# --- validate_config ---------------------------------------------------------

def test_odd_depth_sft_is_an_error():
    config = sft_config([2, 2, 2])
    report = validate_config(config)
    assert any("odd depth in SFT mode" in e for e in report.errors)


def test_table_style_config_is_clean():
    # branching 32/16/8/8 with increasing answer budgets: no errors, no warnings
    config = sft_config([32, 16, 8, 8], q_tokens=64, a_tokens=256, a_step=256)
    report = validate_config(config)
    assert report.errors == []
    assert report.warnings == []
    assert report.shape is TreeShape.BALANCE


def test_decreasing_answer_budgets_warn():
    layers = (
        LayerSpec(2, 16, Role.QUESTION, 1.0),
        LayerSpec(2, 512, Role.ANSWER, 0.7),
        LayerSpec(2, 16, Role.QUESTION, 1.0),
        LayerSpec(2, 256, Role.ANSWER, 0.7),
    )
    config = TreeConfig(mode=Mode.SFT, system_prompt="s", layers=layers)
    report = validate_config(config)
    assert report.errors == []
    assert any("answer budgets not increasing with depth" in w for w in report.warnings)


def test_varying_question_budgets_warn():
    layers = (
        LayerSpec(2, 16, Role.QUESTION, 1.0),
        LayerSpec(2, 128, Role.ANSWER, 0.7),
        LayerSpec(2, 32, Role.QUESTION, 1.0),
        LayerSpec(2, 256, Role.ANSWER, 0.7),
    )
    report = validate_config(TreeConfig(mode=Mode.SFT, system_prompt="s", layers=layers))
    assert report.errors == []
    assert any("question budgets vary" in w for w in report.warnings)


def test_role_parity_mismatch_is_an_error():
    layers = (LayerSpec(2, 8, Role.ANSWER, 0.7), LayerSpec(2, 8, Role.QUESTION, 1.0))
    report = validate_config(TreeConfig(mode=Mode.SFT, system_prompt="s", layers=layers))
    assert len(report.errors) == 2


def test_pt_layers_are_continuations():
    config = pt_config([3, 2])
    assert validate_config(config).ok
    bad = TreeConfig(mode=Mode.PT, system_prompt="s",
                     layers=(LayerSpec(2, 8, Role.QUESTION, 1.0),))
    assert not validate_config(bad).ok


def test_parameter_range_errors():
    import dataclasses
    config = sft_config([2, 2])
    for bad in (
        dataclasses.replace(config, oversample_factor=0.5),
        dataclasses.replace(config, mmr_lambda=1.5),
        dataclasses.replace(config, dedup_threshold=0.0),
        dataclasses.replace(config, dedup_threshold=1.5),
    ):
        assert not validate_config(bad).ok


def test_validation_never_raises_on_weird_layers():
    layers = (LayerSpec(0, 0, Role.QUESTION, -1.0), LayerSpec(1, 1, Role.ANSWER, 0.7))
    report = validate_config(TreeConfig(mode=Mode.SFT, system_prompt="s", layers=layers))
    assert len(report.errors) >= 3


# --- classification ------------------------------------------------------------

@pytest.mark.parametrize("branching,shape", [
    ([100000, 1, 1, 1], TreeShape.WIDE),
    ([2, 1, 1, 1], TreeShape.WIDE),
    ([32, 16, 8, 8], TreeShape.BALANCE),
    ([1, 2, 1, 1], TreeShape.BALANCE),
    ([1, 1, 1, 1], TreeShape.CHAIN),
])
def test_shape_classification(branching, shape):
    assert classify_shape(branching) is shape


# --- expected_leaf_count ---------------------------------------------------------

def test_expected_leaf_count_products():
    assert expected_leaf_count(sft_config([4, 2, 2, 2])) == 32
    assert expected_leaf_count(sft_config([32, 16, 8, 8])) == 32768
    assert expected_leaf_count(sft_config([100000, 1, 1, 1])) == 100000


def test_expected_leaf_count_rejects_invalid():
    with pytest.raises(ConfigError):
        expected_leaf_count(sft_config([2, 2, 2]))  # odd depth


# --- tree container and leaf paths ----------------------------------------------

def test_leaf_paths_complete_2x2():
    tree = build_full_tree(sft_config([2, 2]))
    paths = leaf_paths(tree)
    assert len(paths) == 4
    for path in paths:
        assert [n.role for n in path] == [Role.QUESTION, Role.ANSWER]


def test_leaf_paths_match_expected_leaf_count():
    config = sft_config([4, 2, 2, 2])
    tree = build_full_tree(config)
    paths = leaf_paths(tree)
    assert len(paths) == expected_leaf_count(config) == 32
    assert all(len(p) == 4 for p in paths)


def test_leaf_paths_deterministic_order():
    tree = build_full_tree(sft_config([2, 2]))
    ids = [[n.id for n in path] for path in tree.leaf_paths()]
    assert ids == [["0", "0.0"], ["0", "0.1"], ["1", "1.0"], ["1", "1.1"]]


def test_leaf_paths_with_shortfall():
    config = sft_config([2, 2])
    tree = Tree(config)
    q = [TreeNode(id=str(i), parent_id="root", layer=1, role=Role.QUESTION,
                  text=f"q{i}", token_count=1) for i in range(2)]
    tree.add_children("root", q)
    full = [TreeNode(id=child_id("0", r), parent_id="0", layer=2, role=Role.ANSWER,
                     text=f"a{r}", token_count=1) for r in range(2)]
    tree.add_children("0", full)
    short = [TreeNode(id=child_id("1", 0), parent_id="1", layer=2, role=Role.ANSWER,
                      text="a", token_count=1)]
    tree.add_children("1", short, shortfall=1)
    assert tree.complete()
    assert len(tree.leaf_paths()) == 3
    assert tree.shortfall_total == 1
    # recomputation identity: leaves equal the child counts of depth-(d-1) nodes
    penultimate = tree.layer_ids(tree.depth - 1)
    assert len(tree.leaf_paths()) == sum(len(tree.node(n).children) for n in penultimate)


def test_incomplete_tree_raises_unless_permissive():
    config = sft_config([2, 2, 2, 2])
    tree = Tree(config)
    q = [TreeNode(id=str(i), parent_id="root", layer=1, role=Role.QUESTION,
                  text=f"q{i}", token_count=1) for i in range(2)]
    tree.add_children("root", q)
    for pid in ("0", "1"):
        a = [TreeNode(id=child_id(pid, r), parent_id=pid, layer=2, role=Role.ANSWER,
                      text="a", token_count=1) for r in range(2)]
        tree.add_children(pid, a)
    with pytest.raises(IncompleteTreeError):
        tree.leaf_paths()
    paths = tree.leaf_paths(permissive=True)
    assert len(paths) == 4 and all(len(p) == 2 for p in paths)


def test_permissive_rounds_down_to_even_layer_in_sft():
    config = sft_config([2, 2, 2, 2])
    tree = Tree(config)
    q = [TreeNode(id=str(i), parent_id="root", layer=1, role=Role.QUESTION,
                  text="q", token_count=1) for i in range(2)]
    tree.add_children("root", q)
    # only layer 1 complete -> rounds down to 0 -> no paths
    assert tree.leaf_paths(permissive=True) == []


# --- structural ids ---------------------------------------------------------------

def test_structural_key_ordering():
    ids = ["0.10", "0.2", "0.2.1", "1", "0"]
    assert sorted(ids, key=structural_key) == ["0", "0.2", "0.2.1", "0.10", "1"]


# --- config JSON and hashing -------------------------------------------------------

def test_config_json_round_trip():
    config = sft_config([3, 2], template_id="llama2-chat")
    clone = config_from_dict(config_to_dict(config))
    assert clone == config
    assert config_hash(clone) == config_hash(config)


def test_unknown_config_key_is_hard_error():
    raw = config_to_dict(sft_config([2, 2]))
    raw["extra_key"] = 1
    with pytest.raises(ConfigError, match="unknown config keys"):
        config_from_dict(raw)


def test_unknown_layer_key_is_hard_error():
    raw = config_to_dict(sft_config([2, 2]))
    raw["layers"][0]["oops"] = True
    with pytest.raises(ConfigError, match="unknown keys in layer 1"):
        config_from_dict(raw)


def test_layer_roles_inferred_from_parity():
    raw = {
        "mode": "sft",
        "system_prompt": "s",
        "layers": [{"branching": 2, "max_tokens": 8}, {"branching": 2, "max_tokens": 16}],
    }
    config = config_from_dict(raw)
    assert [l.role for l in config.layers] == [Role.QUESTION, Role.ANSWER]
    assert config.layers[0].temperature == 1.0
    assert config.layers[1].temperature == 0.7


def test_config_hash_changes_with_seed():
    a = sft_config([2, 2], seed=1)
    b = sft_config([2, 2], seed=2)
    assert config_hash(a) != config_hash(b)
    assert len(config_hash(a)) == 16


# --- node record round trip ----------------------------------------------------------

def test_node_record_round_trip():
    from treegen.tree import GenMeta
    node = TreeNode(id="0.1", parent_id="0", layer=2, role=Role.ANSWER,
                    text="hello world", token_count=2,
                    embedding=(0.5, 0.25, 0.8292156863),
                    gen_meta=GenMeta("mock", "stop", 3))
    record = json.loads(json.dumps(node_to_record(node, include_embedding=True)))
    clone = node_from_record(record)
    assert clone.id == node.id and clone.text == node.text
    assert clone.embedding == node.embedding
    assert clone.gen_meta == node.gen_meta
