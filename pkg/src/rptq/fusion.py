"""Folding channel reorders into layer norm and linear weights.

Explicit runtime reordering is avoided by (a) scattering layer-norm outputs
directly into reordered positions and (b) permuting linear weight columns by
the input reorder and rows by the output reorder, offline. A decoder layer
wired this way is numerically identical to the unreordered baseline up to
float summation order.

Residual alignment rules: tensors meeting at an add must share a channel
order, so the attention out-projection and the final FFN linear keep identity
output order, and Q/K must share one reorder index per head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .reorder import ReorderPlan

LN_EPS = 1e-5


@dataclass(frozen=True)
class LayerNormOp:
    """Layer norm whose output is optionally written in reordered positions.

    gamma/beta stay in original channel order; only the write placement of
    the result changes, so fusing a reorder never touches the parameters.
    """

    gamma: np.ndarray
    beta: np.ndarray
    eps: float = LN_EPS
    out_plan: ReorderPlan | None = None

    def __post_init__(self) -> None:
        gamma = np.asarray(self.gamma, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if gamma.shape != beta.shape or gamma.ndim != 1:
            raise ValidationError("gamma/beta must be 1-d arrays of equal length")
        if self.out_plan is not None and self.out_plan.num_channels != len(gamma):
            raise ValidationError("out_plan length does not match channel count")
        if self.eps <= 0:
            raise ValidationError("eps must be positive")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)


def layernorm_forward(ln: LayerNormOp, x: np.ndarray) -> np.ndarray:
    """Standard layer norm over the channel axis, then the reorder scatter:
    output channel i holds the normalized value of original channel perm[i].
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != len(ln.gamma):
        raise ValidationError(
            f"channel mismatch: input has {x.shape[-1]}, layer norm has {len(ln.gamma)}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + ln.eps) * ln.gamma + ln.beta
    if ln.out_plan is not None:
        y = y[..., ln.out_plan.perm]
    return y


@dataclass(frozen=True)
class LinearWeights:
    """A (out, in) weight matrix plus bias, tagged with its channel orders."""

    w: np.ndarray
    bias: np.ndarray
    in_plan: ReorderPlan | None = None
    out_plan: ReorderPlan | None = None

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2:
            raise ValidationError("weight must be 2-d (out, in)")
        if bias.shape != (w.shape[0],):
            raise ValidationError("bias length must match output channels")
        if self.in_plan is not None and self.in_plan.num_channels != w.shape[1]:
            raise ValidationError("in_plan length does not match input channels")
        if self.out_plan is not None and self.out_plan.num_channels != w.shape[0]:
            raise ValidationError("out_plan length does not match output channels")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "bias", bias)

    @property
    def out_channels(self) -> int:
        return self.w.shape[0]

    @property
    def in_channels(self) -> int:
        return self.w.shape[1]


def fuse_linear(lin: LinearWeights, in_plan: ReorderPlan | None,
                out_plan: ReorderPlan | None) -> LinearWeights:
    """Permute weight columns by the input reorder and rows by the output
    reorder: w~[r, c] = w[out_perm[r], in_perm[c]]. Done before deployment,
    so inference pays nothing for reordering.
    """
    w, bias = lin.w, lin.bias
    if out_plan is not None:
        if out_plan.num_channels != lin.out_channels:
            raise ValidationError("output plan length does not match rows")
        w = w[out_plan.perm, :]
        bias = bias[out_plan.perm]
    if in_plan is not None:
        if in_plan.num_channels != lin.in_channels:
            raise ValidationError("input plan length does not match columns")
        w = w[:, in_plan.perm]
    return LinearWeights(w=w, bias=bias, in_plan=in_plan, out_plan=out_plan)


def linear_forward(lin: LinearWeights, x: np.ndarray) -> np.ndarray:
    """y = x @ w.T + bias, accumulated in float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != lin.in_channels:
        raise ValidationError("input channel count does not match weight columns")
    return x @ lin.w.T + lin.bias


# ---------------------------------------------------------------------------
# Alignment checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlignmentViolation:
    edge: str
    message: str
    left: list | None = None
    right: list | None = None


@dataclass(frozen=True)
class LayerWiring:
    """Channel orders on every edge of one decoder layer.

    None means identity (original model order). Per-head lists describe the
    head-internal channel orders of the attention path.
    """

    ln1_out: ReorderPlan | None
    qkv_in: ReorderPlan | None
    q_out: tuple
    k_out: tuple
    v_out: tuple
    out_proj_in: tuple
    out_proj_out: ReorderPlan | None
    ln2_out: ReorderPlan | None
    fc1_in: ReorderPlan | None
    fc1_out: ReorderPlan | None
    fc2_in: ReorderPlan | None
    fc2_out: ReorderPlan | None

    def __post_init__(self) -> None:
        object.__setattr__(self, "q_out", tuple(self.q_out))
        object.__setattr__(self, "k_out", tuple(self.k_out))
        object.__setattr__(self, "v_out", tuple(self.v_out))
        object.__setattr__(self, "out_proj_in", tuple(self.out_proj_in))
        heads = {len(self.q_out), len(self.k_out), len(self.v_out), len(self.out_proj_in)}
        if len(heads) != 1:
            raise ValidationError("per-head lists must have equal length")


def _perm_of(plan: ReorderPlan | None) -> np.ndarray | None:
    return None if plan is None else plan.perm


def _same_order(a: ReorderPlan | None, b: ReorderPlan | None) -> bool:
    pa, pb = _perm_of(a), _perm_of(b)
    if pa is None and pb is None:
        return True
    if pa is None:
        return bool(np.array_equal(pb, np.arange(len(pb))))
    if pb is None:
        return bool(np.array_equal(pa, np.arange(len(pa))))
    return bool(np.array_equal(pa, pb))


def _is_identity(plan: ReorderPlan | None) -> bool:
    return plan is None or plan.is_identity()


def _summary(plan: ReorderPlan | None) -> list | None:
    return None if plan is None else plan.perm.tolist()


def check_alignment(wiring: LayerWiring) -> list[AlignmentViolation]:
    """Verify the residual/matmul channel-order rules of a wired layer.

    Checks, per edge: both operands of each residual add carry identical
    orders (so the out-projection and final linear outputs must be identity),
    Q and K share one reorder per head, and every producer/consumer pair
    along the main path agrees. Returns one entry per violating edge;
    an empty list means the wiring is alignment-clean.
    """
    violations: list[AlignmentViolation] = []

    def expect(edge: str, left, right, message: str) -> None:
        if not _same_order(left, right):
            violations.append(AlignmentViolation(
                edge=edge, message=message,
                left=_summary(left), right=_summary(right),
            ))

    expect("qkv_input", wiring.ln1_out, wiring.qkv_in,
           "QKV projection input order must match LN1 output order")
    for h, (qp, kp) in enumerate(zip(wiring.q_out, wiring.k_out)):
        expect(f"qk_matmul[head={h}]", qp, kp,
               "Q and K must share the same reorder index")
    for h, (vp, op) in enumerate(zip(wiring.v_out, wiring.out_proj_in)):
        expect(f"pv_out_proj[head={h}]", vp, op,
               "out-projection input order must match the V path order")
    if not _is_identity(wiring.out_proj_out):
        violations.append(AlignmentViolation(
            edge="residual_attn",
            message="out-projection output must keep the original channel order",
            left=_summary(wiring.out_proj_out), right=None,
        ))
    expect("ffn_input", wiring.ln2_out, wiring.fc1_in,
           "first FFN linear input order must match LN2 output order")
    expect("ffn_hidden", wiring.fc1_out, wiring.fc2_in,
           "second FFN linear input order must match the hidden activation order")
    if not _is_identity(wiring.fc2_out):
        violations.append(AlignmentViolation(
            edge="residual_ffn",
            message="final linear output must keep the original channel order",
            left=_summary(wiring.fc2_out), right=None,
        ))
    return violations
