"""Transformer block with mask-routed experts for region-aware updates.

Each block applies global self-attention, then routes background,
per-object exclusive, and overlap regions to dedicated experts whose
outputs are gated by the routing masks and merged through a residual
update, followed by a position-wise FFN.  The overlap expert scores each
object's aggregated code against a gating query derived from the scene
features and blends the codes with a temperature-controlled softmax, so
the blend adapts per location and is agnostic to the order in which
objects are listed.

Feature grids are row-major token sequences shaped ``(hw, d)``; every op
also accepts a leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masks import PARTITION_TOL, RoutingMasks, ShapeError
from .tensor import (
    FFNParams,
    LayerNormParams,
    LinearParams,
    Tensor,
    concat,
    cross_attention,
    avg_pool_2x2,
    ffn,
    layer_norm,
    linear,
    matmul,
    upsample_nearest_2x,
)

BG_MODES = ("zero-residual", "identity-residual")


def _init_linear(rng: np.random.Generator, d_in: int, d_out: int, dtype) -> LinearParams:
    w = rng.normal(0.0, d_in**-0.5, size=(d_in, d_out)).astype(dtype)
    b = np.zeros(d_out, dtype=dtype)
    return LinearParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


class ITBParams:
    """All learned projections of one interaction block.

    ``f_q`` is the shared query projection for every expert's scene-side
    attention; ``g_q`` produces the gating query; ``f_k``/``f_v`` are shared
    between the overlap expert's code aggregation and its context
    injection.  Exclusive experts carry their own key/value projections,
    one pair per object slot.
    """

    def __init__(self, sa_q, sa_k, sa_v, sa_o, f_q, g_q, f_k, f_v,
                 ex_kv, ffn_params, ln, tau):
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        d = f_q.d_in
        for lp in (sa_q, sa_k, sa_v, sa_o, f_q, g_q, f_k, f_v):
            if lp.d_in != d or lp.d_out != d:
                raise ShapeError("all block projections must map d -> d")
        for k_p, v_p in ex_kv:
            if k_p.d_in != d or k_p.d_out != d or v_p.d_in != d or v_p.d_out != d:
                raise ShapeError("exclusive-expert projections must map d -> d")
        self.sa_q, self.sa_k, self.sa_v, self.sa_o = sa_q, sa_k, sa_v, sa_o
        self.f_q, self.g_q, self.f_k, self.f_v = f_q, g_q, f_k, f_v
        self.ex_kv = list(ex_kv)
        self.ffn = ffn_params
        self.ln = ln
        self.tau = float(tau)

    @property
    def d(self) -> int:
        return self.f_q.d_in

    @property
    def n_slots(self) -> int:
        return len(self.ex_kv)

    @staticmethod
    def create(rng: np.random.Generator, d: int, n_slots: int = 2,
               tau: float = 0.5, dtype=np.float64,
               init: str = "random") -> "ITBParams":
        """``random`` draws every projection fresh; ``aligned`` starts the
        residual stream transparent (zero self-attention output, zero FFN
        output layer) and the expert/gate projections at near-identity, so
        query/key inner products begin as feature similarity."""
        lin = lambda: _init_linear(rng, d, d, dtype)

        def near_eye(scale=1.0):
            w = (scale * np.eye(d) + rng.normal(0.0, 0.02, size=(d, d))).astype(dtype)
            return LinearParams(Tensor(w, requires_grad=True),
                                Tensor(np.zeros(d, dtype=dtype), requires_grad=True))

        if init == "aligned":
            # the residual stream keeps standard random mixing (needed for
            # reconstruction capacity); the gate path (g_q with the shared
            # f_k/f_v) starts at near-identity so its scores begin as
            # feature similarity rather than random geometry
            sa = (lin(), lin(), lin(), lin())
            proj = (lin(), near_eye(), near_eye(), near_eye())
            ex_kv = [(lin(), lin()) for _ in range(n_slots)]
            ffn_params = FFNParams(_init_linear(rng, d, 4 * d, dtype),
                                   _init_linear(rng, 4 * d, d, dtype))
        elif init == "random":
            sa = (lin(), lin(), lin(), lin())
            proj = (lin(), lin(), lin(), lin())
            ex_kv = [(lin(), lin()) for _ in range(n_slots)]
            ffn_params = FFNParams(_init_linear(rng, d, 4 * d, dtype),
                                   _init_linear(rng, 4 * d, d, dtype))
        else:
            raise ValueError(f"unknown init scheme {init!r}")
        ln = LayerNormParams(Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                             Tensor(np.zeros(d, dtype=dtype), requires_grad=True))
        return ITBParams(*sa, *proj, ex_kv, ffn_params, ln, tau)

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def put(name, lp):
            out[f"{prefix}{name}.w"] = lp.weight
            if lp.bias is not None:
                out[f"{prefix}{name}.b"] = lp.bias

        for name, lp in (("sa_q", self.sa_q), ("sa_k", self.sa_k),
                         ("sa_v", self.sa_v), ("sa_o", self.sa_o),
                         ("f_q", self.f_q), ("g_q", self.g_q),
                         ("f_k", self.f_k), ("f_v", self.f_v)):
            put(name, lp)
        for i, (k_p, v_p) in enumerate(self.ex_kv):
            put(f"ex{i}_k", k_p)
            put(f"ex{i}_v", v_p)
        put("ffn1", self.ffn.lin1)
        put("ffn2", self.ffn.lin2)
        out[f"{prefix}ln.g"] = self.ln.gain
        out[f"{prefix}ln.b"] = self.ln.bias
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())


@dataclass
class OverlapGateReport:
    """Per-location gate diagnostics from one overlap-expert evaluation.

    ``scores`` and ``alpha`` are ``(.., hw, M)``; ``delta_s`` is the score
    difference ``s_a - s_b`` and present only for object pairs.  Alpha rows
    sum to one and each entry lies strictly inside (0, 1) for finite
    scores; for pairs, ``alpha[..., 0]`` equals the logistic of
    ``delta_s / tau`` bit-for-bit.
    """

    scores: np.ndarray
    alpha: np.ndarray
    delta_s: np.ndarray | None
    tau: float


@dataclass
class RoutingGates:
    """Routing masks flattened to gate tensors of shape ``(.., hw, 1)``."""

    bg: Tensor
    ex: list[Tensor]
    overlap: Tensor
    resolution: tuple[int, int]

    @staticmethod
    def from_masks(rm: RoutingMasks, dtype=np.float64) -> "RoutingGates":
        rm.validate()
        h, w = rm.resolution
        flat = lambda m: Tensor(m.reshape(h * w, 1).astype(dtype))
        return RoutingGates(bg=flat(rm.bg), ex=[flat(m) for m in rm.ex],
                            overlap=flat(rm.overlap), resolution=(h, w))

    @staticmethod
    def stack(gates: list["RoutingGates"]) -> "RoutingGates":
        res = gates[0].resolution
        if any(g.resolution != res or len(g.ex) != len(gates[0].ex) for g in gates):
            raise ShapeError("cannot stack routing gates with mismatched layouts")
        pile = lambda ts: Tensor(np.stack([t.data for t in ts], axis=0))
        return RoutingGates(
            bg=pile([g.bg for g in gates]),
            ex=[pile([g.ex[p] for g in gates]) for p in range(len(gates[0].ex))],
            overlap=pile([g.overlap for g in gates]),
            resolution=res,
        )

    def check_partition(self) -> None:
        total = self.bg.data + self.overlap.data
        for e in self.ex:
            total = total + e.data
        err = np.abs(total - 1.0).max()
        if err > PARTITION_TOL:
            raise ValueError(f"routing gates do not partition unity (max error {err:.3e})")

    def permuted(self, order: list[int]) -> "RoutingGates":
        return RoutingGates(bg=self.bg, ex=[self.ex[p] for p in order],
                            overlap=self.overlap, resolution=self.resolution)


def _as_gates(routing, dtype) -> RoutingGates:
    if isinstance(routing, RoutingGates):
        return routing
    return RoutingGates.from_masks(routing, dtype=dtype)


def self_attention(z: Tensor, params: ITBParams) -> Tensor:
    q = linear(z, params.sa_q)
    k = linear(z, params.sa_k)
    v = linear(z, params.sa_v)
    return linear(cross_attention(q, k, v), params.sa_o)


def background_expert(z: Tensor, mode: str = "zero-residual") -> Tensor:
    """Residual contribution for pure-background locations.

    ``zero-residual`` keeps background features literally unchanged after
    the residual update; ``identity-residual`` returns the features
    themselves, which the residual update then doubles.
    """
    if mode not in BG_MODES:
        raise ValueError(f"unknown background mode {mode!r}; expected one of {BG_MODES}")
    if mode == "identity-residual":
        return z
    return Tensor(np.zeros_like(z.data), _check=False)


def exclusive_expert(z: Tensor, code: Tensor, params: ITBParams, slot: int = 0) -> Tensor:
    """Inject one object's appearance: scene queries attend to its code."""
    if code.shape[-2] == 0:
        raise ShapeError("object code must contain at least one token")
    k_p, v_p = params.ex_kv[slot]
    return cross_attention(linear(z, params.f_q), linear(code, k_p), linear(code, v_p))


def _gate_weights(scores: Tensor, tau: float) -> Tensor:
    """Temperature softmax over the last axis, exponent ``(s - max(s)) / tau``.

    The max shift is detached; it cancels in the normalized output and its
    true gradient contribution is zero by shift invariance.
    """
    shift = Tensor(scores.data.max(axis=-1, keepdims=True), _check=False)
    e = ((scores - shift) / tau).exp()
    return e / e.sum(axis=-1, keepdims=True)


def _overlap_expert(z: Tensor, codes: list[Tensor], params: ITBParams):
    d = params.d
    q_g = linear(z, params.g_q)
    agg = [cross_attention(q_g, linear(c, params.f_k), linear(c, params.f_v))
           for c in codes]
    scale = 1.0 / np.sqrt(d)
    score_cols = [(q_g * c_t).sum(axis=-1, keepdims=True) * scale for c_t in agg]
    scores = concat(score_cols, axis=-1)                      # (.., hw, M)
    alpha = _gate_weights(scores, params.tau)                 # (.., hw, M)

    m = len(codes)
    lead = z.shape[:-2]
    hw = z.shape[-2]
    stacked = concat([c_t.reshape(*lead, hw, 1, d) for c_t in agg], axis=-2)
    # elementwise blend (not matmul): plain multiply-add commutes bitwise,
    # so relabeling a pair leaves the mixed context bit-identical
    mixed = (alpha.reshape(*lead, hw, m, 1) * stacked).sum(axis=-2)
    h = cross_attention(linear(z, params.f_q), linear(mixed, params.f_k),
                        linear(mixed, params.f_v))

    delta = scores.data[..., 0] - scores.data[..., 1] if m == 2 else None
    report = OverlapGateReport(scores=scores.data.copy(), alpha=alpha.data.copy(),
                               delta_s=delta, tau=params.tau)
    return h, report


def overlap_expert_pair(z: Tensor, c_a: Tensor, c_b: Tensor, params: ITBParams):
    """Adaptive blend of two object codes in their shared region.

    Scores each aggregated code against the gating query, converts the
    score gap into a logistic mixing weight, blends, and injects the blend
    into the scene features via cross-attention.
    """
    return _overlap_expert(z, [c_a, c_b], params)


def overlap_expert_multi(z: Tensor, codes: list[Tensor], params: ITBParams):
    """Softmax generalization of the pairwise blend to M >= 2 objects."""
    if len(codes) < 2:
        raise ValueError(f"overlap expert needs at least 2 objects, got {len(codes)}")
    return _overlap_expert(z, codes, params)


def itb_forward(z: Tensor, codes: list[Tensor], routing, params: ITBParams,
                bg_mode: str = "zero-residual", slots: list[int] | None = None,
                collect_gates: list | None = None) -> Tensor:
    """One interaction block: self-attention, routed experts, residual, FFN.

    ``routing`` is a RoutingMasks (or prebuilt RoutingGates) whose
    resolution matches the token count of ``z``.  ``slots`` binds each code
    to an exclusive-expert parameter slot; by default code ``p`` uses slot
    ``p``.  Relabeling objects therefore means permuting ``codes``,
    ``routing.ex`` and ``slots`` together.
    """
    if bg_mode not in BG_MODES:
        raise ValueError(f"unknown background mode {bg_mode!r}; expected one of {BG_MODES}")
    gates = _as_gates(routing, z.dtype)
    gates.check_partition()
    m = len(codes)
    if m < 1:
        raise ValueError("need at least one object code")
    if len(gates.ex) != m:
        raise ShapeError(f"{m} codes but {len(gates.ex)} exclusive gates")
    h, w = gates.resolution
    if z.shape[-2] != h * w:
        raise ShapeError(f"feature tokens {z.shape[-2]} do not match routing {h}x{w}")
    if slots is None:
        slots = list(range(m))

    z1 = z + self_attention(z, params)

    dz = None
    if bg_mode == "identity-residual":
        dz = gates.bg * z1
    for p in range(m):
        term = gates.ex[p] * exclusive_expert(z1, codes[p], params, slot=slots[p])
        dz = term if dz is None else dz + term
    if m >= 2:
        h_ov, report = _overlap_expert(z1, codes, params)
        if collect_gates is not None:
            collect_gates.append(report)
        dz = dz + gates.overlap * h_ov
    elif gates.overlap.data.max() > PARTITION_TOL:
        raise ValueError("single-object routing must have an empty overlap region")

    z2 = z1 + dz
    return z2 + ffn(layer_norm(z2, params.ln), params.ffn)


def stack_levels(depth: int) -> list[int]:
    """Downsampling level of each stage for a symmetric encoder/decoder."""
    if depth < 1 or depth % 2 == 0:
        raise ValueError(f"stack depth must be odd and positive, got {depth}")
    return [min(i, depth - 1 - i) for i in range(depth)]


def stack_resolutions(h: int, w: int, depth: int) -> list[tuple[int, int]]:
    levels = stack_levels(depth)
    for lvl in levels:
        if (h >> lvl) << lvl != h or (w >> lvl) << lvl != w:
            raise ShapeError(f"grid {h}x{w} is not divisible for a depth-{depth} stack")
    return [(h >> lvl, w >> lvl) for lvl in levels]


def itb_stack_forward(z: Tensor, codes: list[Tensor], routings: list,
                      params_list: list[ITBParams], h: int, w: int,
                      bg_mode: str = "zero-residual",
                      slots: list[int] | None = None,
                      collect_gates: list | None = None) -> Tensor:
    """Symmetric stack of interaction blocks over a token grid.

    Stages are separated by stride-2 average pooling on the way down and
    nearest-neighbor upsampling plus skip additions on the way up.
    ``routings`` supplies one routing (masks or gates) per stage, at that
    stage's resolution.
    """
    depth = len(params_list)
    resolutions = stack_resolutions(h, w, depth)
    if len(routings) != depth:
        raise ShapeError(f"{depth} stages but {len(routings)} routings")
    gates = [_as_gates(r, z.dtype) for r in routings]
    for g, res in zip(gates, resolutions):
        if g.resolution != res:
            raise ShapeError(f"routing at {g.resolution} does not match stage {res}")

    skips: list[Tensor] = []
    cur = z
    for i, params in enumerate(params_list):
        sh, sw = resolutions[i]
        cur = itb_forward(cur, codes, gates[i], params, bg_mode=bg_mode,
                          slots=slots, collect_gates=collect_gates)
        if i < depth // 2:
            skips.append(cur)
            cur = avg_pool_2x2(cur, sh, sw)
        elif i < depth - 1:
            cur = upsample_nearest_2x(cur, sh, sw) + skips.pop()
    return cur
