import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinydeploy import zoo
from tinydeploy.ir import (
    DTYPES,
    Buffer,
    Graph,
    GraphError,
    Node,
    graphs_equal,
    parse_graph,
    serialize_graph,
    topo_schedule,
    validate,
)


def graph_2node():
    bufs = {
        "x": Buffer("x", "variable", "global", (4, 8), DTYPES["int8"]),
        "w": Buffer("w", "constant", "global", (8, 2), DTYPES["int8"],
                    payload=bytes(range(16))),
        "b": Buffer("b", "constant", "global", (2,), DTYPES["int32"],
                    payload=bytes(8)),
        "acc": Buffer("acc", "variable", "local", (4, 2), DTYPES["int32"]),
        "y": Buffer("y", "variable", "global", (4, 2), DTYPES["int8"]),
    }
    nodes = [
        Node("mm", "gemm", {"transB": 0}, ("x", "w", "b"), ("acc",)),
        Node("rq", "requant", {"mul": 1, "shift": 0, "zp": 0}, ("acc",), ("y",)),
    ]
    return Graph("two", nodes, bufs, ("x",), ("y",))


def test_identity_graph_parses():
    text, blob = serialize_graph(zoo.build_identity())
    g = parse_graph(text, blob)
    assert len(g.nodes) == 0
    assert g.inputs == g.outputs == ("x",)


def test_single_gemm_roundtrip():
    g = graph_2node()
    assert validate(g) == []
    text, blob = serialize_graph(g)
    g2 = parse_graph(text, blob)
    assert g2.buffer("w").kind == "constant"
    assert g2.buffer("w").payload == g.buffer("w").payload
    assert graphs_equal(g, g2)


def test_llama_file_roundtrip(llama1):
    text, blob = serialize_graph(llama1)
    g2 = parse_graph(text, blob)
    assert graphs_equal(llama1, g2)
    # serialize(parse(serialize(g))) is byte-normalized
    text2, blob2 = serialize_graph(g2)
    assert text2 == text and blob2 == blob


def test_validate_clean(llama1):
    assert validate(llama1) == []


def test_validate_cycle():
    bufs = {
        "a": Buffer("a", "variable", "local", (4,), DTYPES["int32"]),
        "b": Buffer("b", "variable", "local", (4,), DTYPES["int32"]),
    }
    nodes = [
        Node("n0", "requant", {"mul": 1, "shift": 0, "zp": 0}, ("a",), ("b",)),
        Node("n1", "requant", {"mul": 1, "shift": 0, "zp": 0}, ("b",), ("a",)),
    ]
    g = Graph("cyc", nodes, bufs, (), ("b",))
    diags = validate(g)
    codes = {d.code for d in diags}
    assert "cycle" in codes
    cyc = next(d for d in diags if d.code == "cycle")
    assert "n0" in cyc.where and "n1" in cyc.where


def test_validate_payload_size():
    b = Buffer("w", "constant", "global", (64,), DTYPES["int8"], payload=bytes(63))
    g = Graph("p", [], {"w": b}, (), ())
    diags = validate(g)
    assert any(d.code == "payload-size" and d.where == "w" for d in diags)


def test_validate_dangling_and_multiwriter():
    bufs = {"y": Buffer("y", "variable", "local", (4,), DTYPES["int32"])}
    nodes = [
        Node("n0", "requant", {"mul": 1, "shift": 0, "zp": 0}, ("nope",), ("y",)),
        Node("n1", "requant", {"mul": 1, "shift": 0, "zp": 0}, ("nope",), ("y",)),
    ]
    g = Graph("bad", nodes, bufs, (), ())
    codes = {d.code for d in validate(g)}
    assert "dangling-ref" in codes and "multi-writer" in codes


def test_parse_rejects_unknown_op():
    text, blob = serialize_graph(graph_2node())
    with pytest.raises(GraphError, match="unknown op"):
        parse_graph(text.replace('"gemm"', '"frobnicate"'), blob)


def test_parse_rejects_bad_payload_ref():
    text, blob = serialize_graph(graph_2node())
    with pytest.raises(GraphError, match="outside"):
        parse_graph(text, blob[:4])


def test_parse_rejects_wrong_version():
    text, blob = serialize_graph(graph_2node())
    with pytest.raises(GraphError, match="version"):
        parse_graph(text.replace('"version": 1', '"version": 99'), blob)


def test_topo_linear_chain():
    g = graph_2node()
    assert topo_schedule(g).nodes == ("mm", "rq")


def test_topo_diamond_tiebreak():
    bufs = {n: Buffer(n, "variable", "local" if n not in "xz" else "global", (4,),
                      DTYPES["int32"]) for n in "xabz"}
    nodes = [
        Node("n0", "requant", {"mul": 1, "shift": 0, "zp": 0}, ("x",), ("a",)),
        Node("n1", "add_requant", {"mul": 1, "shift": 0, "zp": 0}, ("a", "a"), ("b",)),
        Node("n2", "add_requant", {"mul": 1, "shift": 0, "zp": 0}, ("a", "a"), ("z",)),
    ]
    # n1 declared before n2; both ready after n0
    g = Graph("d", nodes, bufs, ("x",), ("z",))
    assert topo_schedule(g).nodes == ("n0", "n1", "n2")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_topo_random_dag_property(seed):
    r = np.random.default_rng(seed)
    n = 50
    bufs = {"src": Buffer("src", "variable", "global", (2,), DTYPES["int32"])}
    nodes = []
    produced = ["src"]
    for i in range(n):
        k = int(r.integers(1, min(3, len(produced)) + 1))
        ins = [produced[int(r.integers(0, len(produced)))] for _ in range(k)][:2]
        if len(ins) == 1:
            node = Node(f"n{i}", "requant", {"mul": 1, "shift": 0, "zp": 0},
                        (ins[0],), (f"t{i}",))
        else:
            node = Node(f"n{i}", "add_requant", {"mul": 1, "shift": 0, "zp": 0},
                        tuple(ins), (f"t{i}",))
        bufs[f"t{i}"] = Buffer(f"t{i}", "variable", "local", (2,), DTYPES["int32"])
        nodes.append(node)
        produced.append(f"t{i}")
    order = list(r.permutation(n))
    g = Graph("rand", [nodes[i] for i in order], bufs, ("src",), ())
    sched = topo_schedule(g)
    assert sorted(sched.nodes) == sorted(nd.name for nd in g.nodes)
    pos = {nm: i for i, nm in enumerate(sched.nodes)}
    produced_by = {out: nd.name for nd in g.nodes for out in nd.outputs}
    for nd in g.nodes:
        for ref in nd.inputs:
            if ref in produced_by:
                assert pos[produced_by[ref]] < pos[nd.name]
