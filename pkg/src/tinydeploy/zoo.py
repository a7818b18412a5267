"""Deterministic builders for the test corpus.

Builds integer-only decoder graphs (parallel prompting mode and
autoregressive KV-cached mode), a single encoder layer, and micro graphs.
Weights are pseudo-random int8 drawn from the config seed; requantization
parameters are picked by a small calibration run on seeded inputs so every
layer's outputs occupy a healthy slice of the int8 range. Both inference
modes of one config share weight bytes and requant parameters, which is what
makes the KV-cache equivalence tests exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .ir import DTYPES, Buffer, Graph, GraphError, Node
from .kernels import registry
from .reference import np_dtype

# Attention-score quantization: 2^-SCORE_BITS logit units per code. The
# integer-softmax constants derive from this scale (floor'd at build time;
# inference itself never touches floats).
SCORE_BITS = 4
_A, _B_OVER_A, _C_OVER_A = 0.35815147, 2.70733896, 2.79213959  # exp(x) ~= a(x+b)^2+c
SOFTMAX_ATTRS = {
    "x0_q": math.floor(-math.log(2) * (1 << SCORE_BITS)),
    "b_q": math.floor(_B_OVER_A * (1 << SCORE_BITS)),
    "c_q": math.floor(_C_OVER_A * (1 << (2 * SCORE_BITS))),
    "out_bits": 7,
}
RMSNORM_KSHIFT = 10
HSWISH_UNIT = 16  # codes per unit at the gate input: 3.0 -> 48, 6.0 -> 96
CAL_TARGET = 110  # calibrated |accumulator| maps to about this output code


class ZooError(Exception):
    """Invalid model configuration."""


@dataclass(frozen=True)
class LlamaConfig:
    d_m: int = 64
    h: int = 16
    n_layers: int = 8
    d_ff: int = 256
    vocab: int = 256
    context: int = 192
    seed: int = 0
    mode: str = "parallel"    # "parallel" | "autoregressive"
    s: int = 8                # parallel: sequence length; autoregressive: past length

    def __post_init__(self):
        if self.d_m % self.h != 0:
            raise ZooError(f"d_m {self.d_m} not divisible by heads {self.h}")
        if (self.d_m // self.h) % 2 != 0:
            raise ZooError(f"head dim {self.d_m // self.h} must be even for rotary pairs")
        if self.mode not in ("parallel", "autoregressive"):
            raise ZooError(f"unknown mode {self.mode!r}")
        if self.n_layers < 1:
            raise ZooError("need at least one layer")
        if self.mode == "parallel" and not 1 <= self.s <= self.context:
            raise ZooError(f"sequence length {self.s} outside [1, {self.context}]")
        if self.mode == "autoregressive" and not 0 <= self.s < self.context:
            raise ZooError(f"past length {self.s} outside [0, {self.context})")

    def core_key(self) -> tuple:
        return (self.d_m, self.h, self.n_layers, self.d_ff, self.vocab,
                self.context, self.seed)


class GraphBuilder:
    """Incremental graph construction with optional on-the-fly calibration.

    When ``params`` is None the builder runs its reference activations on
    the calibration batch and chooses requant (mul, shift) per node,
    recording them under the node's name; otherwise the recorded values are
    replayed, which keeps parameters identical across inference modes and
    sequence lengths."""

    def __init__(self, name: str, params: dict | None = None,
                 cal_inputs: dict[str, np.ndarray] | None = None):
        self.name = name
        self.buffers: dict[str, Buffer] = {}
        self.nodes: list[Node] = []
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.calibrating = params is None
        self.params: dict[str, tuple[int, int]] = {} if params is None else params
        self.acts: dict[str, np.ndarray] = dict(cal_inputs or {})

    def add_input(self, name: str, shape, dtype: str) -> str:
        self.buffers[name] = Buffer(name, "variable", "global", tuple(shape), DTYPES[dtype])
        self.inputs.append(name)
        return name

    def add_const(self, name: str, arr: np.ndarray) -> str:
        arr = np.ascontiguousarray(arr)
        dt = {np.dtype(np.int8): "int8", np.dtype(np.int16): "int16",
              np.dtype(np.int32): "int32", np.dtype(np.uint8): "uint8"}[arr.dtype]
        self.buffers[name] = Buffer(name, "constant", "global", tuple(arr.shape),
                                    DTYPES[dt], payload=arr.astype(np_dtype(dt)).tobytes())
        if self.calibrating:
            self.acts[name] = arr
        return name

    def emit(self, op: str, node_name: str, ins: list[str], attrs: dict,
             out_name: str | None = None, scope: str = "local") -> str:
        out_name = out_name or node_name + ".out"
        in_shapes = [self.buffers[i].shape for i in ins]
        in_dtypes = [self.buffers[i].dtype.name for i in ins]
        registry.check_node_schema(op, len(ins), 1, attrs)
        out_shape = registry.infer_out_shape(op, in_shapes, attrs)
        out_dtype = registry.infer_out_dtype(op, in_dtypes)
        self.buffers[out_name] = Buffer(out_name, "variable", scope, out_shape,
                                        DTYPES[out_dtype])
        self.nodes.append(Node(node_name, op, dict(attrs), tuple(ins), (out_name,)))
        if self.calibrating:
            arrs = []
            for i, ref in enumerate(ins):
                a = self.acts[ref]
                if op == "rope_q" and i in (1, 2):
                    pos = int(attrs["pos"])
                    a = a[pos:pos + self.acts[ins[0]].shape[0]]
                arrs.append(a)
            self.acts[out_name] = kernels.compute(op, tuple(arrs), attrs,
                                                  out_shape=out_shape)
        return out_name

    def rq(self, key: str, acc_or_none: np.ndarray | None) -> dict:
        """Requant params for node `key`: calibrate from the accumulator or
        replay the frozen value."""
        if self.calibrating:
            amax = int(np.max(np.abs(acc_or_none))) if acc_or_none is not None else 0
            self.params[key] = _pick_mul_shift(amax)
        mul, shift = self.params[key]
        return {"mul": mul, "shift": shift, "zp": 0}

    def emit_rq(self, op: str, node_name: str, ins: list[str], attrs: dict,
                out_name: str | None = None, scope: str = "local") -> str:
        """Emit a fused-requant op, calibrating from its pre-requant accumulator."""
        acc = self._pre_requant_acc(op, ins, attrs) if self.calibrating else None
        return self.emit(op, node_name, ins, {**attrs, **self.rq(node_name, acc)},
                         out_name, scope)

    def _pre_requant_acc(self, op: str, ins: list[str], attrs: dict) -> np.ndarray:
        a = [self.acts[i].astype(np.int64) for i in ins]
        if op == "add_requant":
            return a[0] + a[1]
        if op == "mul_requant":
            return a[0] * a[1]
        if op == "hardswish_q":
            inner = np.clip(a[0] + attrs["three_q"], 0, attrs["six_q"])
            return a[0] * inner
        if op == "rmsnorm_i":
            d = a[0].shape[-1]
            x = a[0].reshape(-1, d)
            r = kernels.isqrt_exact(np.sum(x * x, axis=1, keepdims=True) // d
                                    + attrs["eps_q"])
            num = x * a[1] * (1 << attrs["kshift"])
            return np.sign(num) * (np.abs(num) // r)
        raise ZooError(f"no accumulator rule for {op}")

    def mark_output(self, buf: str) -> None:
        b = self.buffers[buf]
        b.scope = "global"
        self.outputs.append(buf)

    def graph(self) -> Graph:
        g = Graph(self.name, self.nodes, self.buffers,
                  tuple(self.inputs), tuple(self.outputs))
        from .ir import validate
        diags = validate(g)
        if diags:
            raise GraphError(f"builder produced invalid graph: "
                             + "; ".join(str(d) for d in diags))
        return g


def _pick_mul_shift(amax: int, target: int = CAL_TARGET) -> tuple[int, int]:
    """Fixed-point (mul, shift) with mul normalized into [2^14, 2^15)."""
    if amax <= 0:
        return 1, 0
    scale = target / amax
    shift = 0
    while shift < 31 and round(scale * (1 << shift)) < (1 << 14):
        shift += 1
    mul = max(1, round(scale * (1 << shift)))
    if mul >= (1 << 15) and shift > 0:
        # overshoot from rounding: step back into range
        mul = (1 << 15) - 1
    return int(mul), int(shift)


def rope_tables(context: int, d_h: int) -> tuple[np.ndarray, np.ndarray]:
    half = d_h // 2
    inv_freq = 10000.0 ** (-(np.arange(half) * 2.0 / d_h))
    ang = np.arange(context)[:, None] * inv_freq[None, :]
    cos_t = np.round(np.cos(ang) * 32767.0).astype(np.int16)
    sin_t = np.round(np.sin(ang) * 32767.0).astype(np.int16)
    return cos_t, sin_t


def _rand_i8(rng, shape) -> np.ndarray:
    return rng.integers(-127, 128, shape, dtype=np.int64).astype(np.int8)


def _llama_weights(cfg: LlamaConfig) -> dict[str, np.ndarray]:
    """All constant tensors, drawn in a fixed order independent of mode."""
    rng = np.random.default_rng(cfg.seed)
    d_m, d_ff, vocab = cfg.d_m, cfg.d_ff, cfg.vocab
    w: dict[str, np.ndarray] = {}
    w["embed"] = _rand_i8(rng, (vocab, d_m))
    for i in range(cfg.n_layers):
        p = f"L{i}."
        w[p + "attn_norm.w"] = _rand_i8(rng, (d_m,))
        for nm in ("q", "k", "v", "o"):
            w[p + nm + ".w"] = _rand_i8(rng, (d_m, d_m))
            w[p + nm + ".b"] = rng.integers(-(1 << 12), 1 << 12, (d_m,),
                                            dtype=np.int64).astype(np.int32)
        w[p + "ffn_norm.w"] = _rand_i8(rng, (d_m,))
        for nm, shp in (("gate", (d_m, d_ff)), ("up", (d_m, d_ff)), ("down", (d_ff, d_m))):
            w[p + nm + ".w"] = _rand_i8(rng, shp)
            w[p + nm + ".b"] = rng.integers(-(1 << 12), 1 << 12, (shp[1],),
                                            dtype=np.int64).astype(np.int32)
    w["final_norm.w"] = _rand_i8(rng, (d_m,))
    w["lm_head.w"] = _rand_i8(rng, (d_m, vocab))
    w["lm_head.b"] = rng.integers(-(1 << 12), 1 << 12, (vocab,),
                                  dtype=np.int64).astype(np.int32)
    cos_t, sin_t = rope_tables(cfg.context, d_m // cfg.h)
    w["rope.cos"] = cos_t
    w["rope.sin"] = sin_t
    return w


def _build_llama_graph(cfg: LlamaConfig, params: dict | None,
                       cal_tokens: np.ndarray | None) -> tuple[Graph, dict]:
    d_m, h, d_h = cfg.d_m, cfg.h, cfg.d_m // cfg.h
    autoreg = cfg.mode == "autoregressive"
    s = 1 if autoreg else cfg.s
    past = cfg.s if autoreg else 0
    total = past + s
    if total > cfg.context:
        raise ZooError(f"sequence {total} exceeds context {cfg.context}")

    gname = f"llama_{cfg.n_layers}l_{cfg.mode}_{cfg.s}"
    b = GraphBuilder(gname, params,
                     {"tokens": cal_tokens} if cal_tokens is not None else None)
    weights = _llama_weights(cfg)

    b.add_input("tokens", (s,), "int32")
    consts = {k: b.add_const(k, v) for k, v in weights.items()}
    if autoreg and past > 0:
        for i in range(cfg.n_layers):
            b.add_input(f"L{i}.cache_k_in", (past, d_m), "int8")
            b.add_input(f"L{i}.cache_v_in", (past, d_m), "int8")
        if b.calibrating:
            raise ZooError("calibration runs on the parallel-mode graph only")

    x = b.emit("gather_rows", "embed", [consts["embed"], "tokens"], {})
    for i in range(cfg.n_layers):
        p = f"L{i}."
        xn = b.emit_rq("rmsnorm_i", p + "attn_norm", [x, consts[p + "attn_norm.w"]],
                       {"eps_q": 1, "kshift": RMSNORM_KSHIFT})
        fresh_cache = not (autoreg and past > 0)
        qkv = {}
        for nm in ("q", "k", "v"):
            acc = b.emit("gemm", p + nm, [xn, consts[p + nm + ".w"], consts[p + nm + ".b"]],
                         {"transB": 0})
            out = p + "cache_v" if (nm == "v" and fresh_cache) else None
            qkv[nm] = b.emit("requant", p + nm + ".rq", [acc],
                             b.rq(p + nm + ".rq", b.acts.get(acc)), out_name=out)
        q3 = b.emit("reshape", p + "q3", [qkv["q"]], {"shape": [s, h, d_h]})
        k3 = b.emit("reshape", p + "k3", [qkv["k"]], {"shape": [s, h, d_h]})
        qr = b.emit("rope_q", p + "rope_q", [q3, consts["rope.cos"], consts["rope.sin"]],
                    {"pos": past, "mul": 1, "shift": 15, "zp": 0})
        kr = b.emit("rope_q", p + "rope_k", [k3, consts["rope.cos"], consts["rope.sin"]],
                    {"pos": past, "mul": 1, "shift": 15, "zp": 0})
        k2 = b.emit("reshape", p + "k2", [kr], {"shape": [s, d_m]},
                    out_name=p + "cache_k" if fresh_cache else None)
        if autoreg and past > 0:
            k_all = b.emit("concat_seq", p + "cat_k", [p + "cache_k_in", k2], {},
                           out_name=p + "cache_k")
            v_all = b.emit("concat_seq", p + "cat_v", [p + "cache_v_in", qkv["v"]], {},
                           out_name=p + "cache_v")
        else:
            k_all, v_all = k2, qkv["v"]
        b.mark_output(k_all)
        b.mark_output(v_all)

        qt = b.emit("transpose", p + "qT", [qr], {"perm": [1, 0, 2]})
        k3a = b.emit("reshape", p + "k3a", [k_all], {"shape": [total, h, d_h]})
        kt = b.emit("transpose", p + "kT", [k3a], {"perm": [1, 2, 0]})
        sc_acc = b.emit("bmm_i32", p + "scores", [qt, kt], {})
        scores = b.emit("requant", p + "scores.rq", [sc_acc],
                        b.rq(p + "scores.rq", b.acts.get(sc_acc)))
        if not autoreg:
            scores = b.emit("causal_mask", p + "mask", [scores], {"past": past})
        probs = b.emit("softmax_i", p + "softmax", [scores], dict(SOFTMAX_ATTRS))
        v3 = b.emit("reshape", p + "v3", [v_all], {"shape": [total, h, d_h]})
        vt = b.emit("transpose", p + "vT", [v3], {"perm": [1, 0, 2]})
        cx_acc = b.emit("bmm_i32", p + "ctx", [probs, vt], {})
        ctx = b.emit("requant", p + "ctx.rq", [cx_acc],
                     b.rq(p + "ctx.rq", b.acts.get(cx_acc)))
        ctx_t = b.emit("transpose", p + "ctxT", [ctx], {"perm": [1, 0, 2]})
        ctx2 = b.emit("reshape", p + "ctx2", [ctx_t], {"shape": [s, d_m]})
        o_acc = b.emit("gemm", p + "o", [ctx2, consts[p + "o.w"], consts[p + "o.b"]],
                       {"transB": 0})
        o = b.emit("requant", p + "o.rq", [o_acc], b.rq(p + "o.rq", b.acts.get(o_acc)))
        x1 = b.emit_rq("add_requant", p + "res1", [x, o], {})

        xn2 = b.emit_rq("rmsnorm_i", p + "ffn_norm", [x1, consts[p + "ffn_norm.w"]],
                        {"eps_q": 1, "kshift": RMSNORM_KSHIFT})
        g_acc = b.emit("gemm", p + "gate", [xn2, consts[p + "gate.w"], consts[p + "gate.b"]],
                       {"transB": 0})
        gq = b.emit("requant", p + "gate.rq", [g_acc], b.rq(p + "gate.rq", b.acts.get(g_acc)))
        u_acc = b.emit("gemm", p + "up", [xn2, consts[p + "up.w"], consts[p + "up.b"]],
                       {"transB": 0})
        uq = b.emit("requant", p + "up.rq", [u_acc], b.rq(p + "up.rq", b.acts.get(u_acc)))
        gh = b.emit_rq("hardswish_q", p + "hswish", [gq],
                       {"three_q": 3 * HSWISH_UNIT, "six_q": 6 * HSWISH_UNIT})
        f = b.emit_rq("mul_requant", p + "gatemul", [gh, uq], {})
        d_acc = b.emit("gemm", p + "down", [f, consts[p + "down.w"], consts[p + "down.b"]],
                       {"transB": 0})
        dq = b.emit("requant", p + "down.rq", [d_acc], b.rq(p + "down.rq", b.acts.get(d_acc)))
        x = b.emit_rq("add_requant", p + "res2", [x1, dq], {})

    xf = b.emit_rq("rmsnorm_i", "final_norm", [x, consts["final_norm.w"]],
                   {"eps_q": 1, "kshift": RMSNORM_KSHIFT})
    b.emit("gemm", "lm_head", [xf, consts["lm_head.w"], consts["lm_head.b"]],
           {"transB": 0}, out_name="logits")
    b.mark_output("logits")
    return b.graph(), b.params


@lru_cache(maxsize=16)
def _calibrated_params(core_key: tuple) -> dict:
    d_m, h, n_layers, d_ff, vocab, context, seed = core_key
    s_cal = min(8, context)
    cfg = LlamaConfig(d_m, h, n_layers, d_ff, vocab, context, seed, "parallel", s_cal)
    rng = np.random.default_rng(seed ^ 0xCA11B)
    cal_tokens = rng.integers(0, vocab, (s_cal,), dtype=np.int64).astype(np.int32)
    _, params = _build_llama_graph(cfg, None, cal_tokens)
    return params


def build_llama(cfg: LlamaConfig) -> Graph:
    """Decoder graph for one (mode, sequence-length) configuration."""
    params = _calibrated_params(cfg.core_key())
    g, _ = _build_llama_graph(cfg, params, None)
    return g


def build_encoder_layer(d_m: int = 64, h: int = 16, d_ff: int = 256, s: int = 32,
                        seed: int = 0) -> Graph:
    """One attention + feed-forward block: parallel attention, no causal
    mask, no KV I/O. Input and output are [S, d_m] int8 activations."""
    cfg = LlamaConfig(d_m, h, 1, d_ff, vocab=32, context=max(s, 8), seed=seed,
                      mode="parallel", s=s)
    params = _encoder_params(cfg.core_key())
    g, _ = _build_encoder_graph(cfg, params, None)
    return g


@lru_cache(maxsize=16)
def _encoder_params(core_key: tuple) -> dict:
    d_m, h, n_layers, d_ff, vocab, context, seed = core_key
    s_cal = min(8, context)
    cfg = LlamaConfig(d_m, h, 1, d_ff, vocab, context, seed, "parallel", s_cal)
    rng = np.random.default_rng(seed ^ 0x2E5C0)
    cal_x = _rand_i8(rng, (s_cal, d_m))
    _, params = _build_encoder_graph(cfg, None, cal_x)
    return params


def _build_encoder_graph(cfg: LlamaConfig, params: dict | None,
                         cal_x: np.ndarray | None) -> tuple[Graph, dict]:
    d_m, h, d_h, s = cfg.d_m, cfg.h, cfg.d_m // cfg.h, cfg.s
    b = GraphBuilder(f"encoder_{d_m}x{cfg.d_ff}_s{s}", params,
                     {"x_in": cal_x} if cal_x is not None else None)
    weights = _llama_weights(cfg)
    consts = {k: b.add_const(k, v) for k, v in weights.items()
              if not k.startswith(("embed", "lm_head"))}
    b.add_input("x_in", (s, d_m), "int8")
    x = "x_in"
    p = "L0."
    xn = b.emit_rq("rmsnorm_i", p + "attn_norm", [x, consts[p + "attn_norm.w"]],
                   {"eps_q": 1, "kshift": RMSNORM_KSHIFT})
    qkv = {}
    for nm in ("q", "k", "v"):
        acc = b.emit("gemm", p + nm, [xn, consts[p + nm + ".w"], consts[p + nm + ".b"]],
                     {"transB": 0})
        qkv[nm] = b.emit("requant", p + nm + ".rq", [acc],
                         b.rq(p + nm + ".rq", b.acts.get(acc)))
    q3 = b.emit("reshape", p + "q3", [qkv["q"]], {"shape": [s, h, d_h]})
    k3 = b.emit("reshape", p + "k3", [qkv["k"]], {"shape": [s, h, d_h]})
    qt = b.emit("transpose", p + "qT", [q3], {"perm": [1, 0, 2]})
    kt = b.emit("transpose", p + "kT", [k3], {"perm": [1, 2, 0]})
    sc_acc = b.emit("bmm_i32", p + "scores", [qt, kt], {})
    scores = b.emit("requant", p + "scores.rq", [sc_acc],
                    b.rq(p + "scores.rq", b.acts.get(sc_acc)))
    probs = b.emit("softmax_i", p + "softmax", [scores], dict(SOFTMAX_ATTRS))
    v3 = b.emit("reshape", p + "v3", [qkv["v"]], {"shape": [s, h, d_h]})
    vt = b.emit("transpose", p + "vT", [v3], {"perm": [1, 0, 2]})
    cx_acc = b.emit("bmm_i32", p + "ctx", [probs, vt], {})
    ctx = b.emit("requant", p + "ctx.rq", [cx_acc], b.rq(p + "ctx.rq", b.acts.get(cx_acc)))
    ctx_t = b.emit("transpose", p + "ctxT", [ctx], {"perm": [1, 0, 2]})
    ctx2 = b.emit("reshape", p + "ctx2", [ctx_t], {"shape": [s, d_m]})
    o_acc = b.emit("gemm", p + "o", [ctx2, consts[p + "o.w"], consts[p + "o.b"]],
                   {"transB": 0})
    o = b.emit("requant", p + "o.rq", [o_acc], b.rq(p + "o.rq", b.acts.get(o_acc)))
    x1 = b.emit_rq("add_requant", p + "res1", [x, o], {})
    xn2 = b.emit_rq("rmsnorm_i", p + "ffn_norm", [x1, consts[p + "ffn_norm.w"]],
                    {"eps_q": 1, "kshift": RMSNORM_KSHIFT})
    g_acc = b.emit("gemm", p + "gate", [xn2, consts[p + "gate.w"], consts[p + "gate.b"]],
                   {"transB": 0})
    gq = b.emit("requant", p + "gate.rq", [g_acc], b.rq(p + "gate.rq", b.acts.get(g_acc)))
    u_acc = b.emit("gemm", p + "up", [xn2, consts[p + "up.w"], consts[p + "up.b"]],
                   {"transB": 0})
    uq = b.emit("requant", p + "up.rq", [u_acc], b.rq(p + "up.rq", b.acts.get(u_acc)))
    gh = b.emit_rq("hardswish_q", p + "hswish", [gq],
                   {"three_q": 3 * HSWISH_UNIT, "six_q": 6 * HSWISH_UNIT})
    f = b.emit_rq("mul_requant", p + "gatemul", [gh, uq], {})
    d_acc = b.emit("gemm", p + "down", [f, consts[p + "down.w"], consts[p + "down.b"]],
                   {"transB": 0})
    dq = b.emit("requant", p + "down.rq", [d_acc], b.rq(p + "down.rq", b.acts.get(d_acc)))
    x2 = b.emit_rq("add_requant", p + "res2", [x1, dq], {}, out_name="x_out")
    b.mark_output(x2)
    return b.graph(), b.params


def build_identity(shape=(4, 16), dtype: str = "int8") -> Graph:
    """Zero-node graph: one buffer that is both input and output."""
    buf = Buffer("x", "variable", "global", tuple(shape), DTYPES[dtype])
    return Graph("identity", [], {"x": buf}, ("x",), ("x",))


def build_gemm_chain(depth: int = 2, m: int = 16, dims=(64, 256, 64), seed: int = 0) -> Graph:
    """Chain of (gemm -> requant) pairs cycling through the given widths."""
    if depth < 1:
        raise ZooError("chain depth must be >= 1")
    rng = np.random.default_rng(seed ^ 0x6E77)
    b = GraphBuilder(f"gemm_chain_{depth}")
    b.calibrating = True
    widths = [dims[i % len(dims)] for i in range(depth + 1)]
    cal_x = _rand_i8(rng, (m, widths[0]))
    b.acts["x_in"] = cal_x
    b.add_input("x_in", (m, widths[0]), "int8")
    x = "x_in"
    for i in range(depth):
        w = b.add_const(f"w{i}", _rand_i8(rng, (widths[i], widths[i + 1])))
        bias = b.add_const(f"b{i}", rng.integers(-(1 << 12), 1 << 12, (widths[i + 1],),
                                                 dtype=np.int64).astype(np.int32))
        acc = b.emit("gemm", f"mm{i}", [x, w, bias], {"transB": 0})
        out = "y" if i == depth - 1 else None
        x = b.emit("requant", f"mm{i}.rq", [acc], b.rq(f"mm{i}.rq", b.acts.get(acc)),
                   out_name=out)
    b.mark_output(x)
    return b.graph()


def count_macs(g: Graph) -> int:
    """Multiply-accumulate count over all matmul-family nodes."""
    total = 0
    for n in g.nodes:
        if n.op in registry.MATMUL_OPS:
            in_shapes = [g.buffer(i).shape for i in n.inputs]
            out_shape = registry.infer_out_shape(n.op, in_shapes, n.attrs)
            total += registry.work_units(n.op, n.attrs, out_shape, in_shapes)
    return total
