"""Sequence blocks sharing one residual skeleton.

``y = LN(x + out(mix(x)))`` then ``z = LN(y + FFN(y))``. The mixer is a selective state-space
scan (``TambaBlock``), a state-space scan with constant matrices (``MambaBlock``) or single-head
softmax attention (``AttentionBlock``). Every block also runs one token at a time through
``step`` with an explicit recurrent state, which the decoder threads across recursive steps.
"""

from __future__ import annotations

from typing import Any, Optional, Tuple, Union

import numpy as np

from tamba.errors import ContractError, DimensionError
from tamba.models.config import BlockKind, ModelConfig
from tamba.nn import FeedForward, LayerNorm, Linear, Module
from tamba.tensor import (
    MASK_VALUE,
    Tensor,
    as_tensor,
    charge_flops,
    concat,
    linear_recurrence,
    sigmoid,
    softmax,
)

BlockState = Tuple[Tensor, ...]


def ssm_scan(
    a: Tensor,
    b: Tensor,
    c: Tensor,
    d: Tensor,
    u: Tensor,
    h0: Tensor,
) -> Tensor:
    """Run ``h[t+1] = diag(a[t]) h[t] + B[t] u[t]`` and read ``y[t] = C[t] h[t] + D[t] u[t]``.

    Shapes: ``a`` (.., L, n), ``b`` (.., L, n, m), ``c`` (.., L, p, n), ``d`` (.., L, p, m),
    ``u`` (.., L, m), ``h0`` (.., n). Returns ``y`` of shape (.., L, p).
    """
    length, n_state = a.shape[-2], a.shape[-1]
    if length < 1:
        raise ContractError("scan needs at least one step")
    if u.shape[-1] != b.shape[-1] or b.shape[-2] != n_state or c.shape[-1] != n_state:
        raise DimensionError("scan matrices do not agree with the input", u.shape, b.shape)
    column = u.unsqueeze(-1)
    drive = (b @ column).reshape(a.shape)
    states = linear_recurrence(a, drive, h0)
    batch = int(np.prod(a.shape[:-1]))
    # Dense-transition cost, charged as if A were a full n x n matrix.
    charge_flops(2 * n_state * n_state * batch, "scan")
    previous = states[..., :length, :].unsqueeze(-1)
    out = c @ previous + d @ column
    return out.reshape(out.shape[:-1])


class SelectiveSSM(Module):
    """Per-token emission of A (diagonal, squashed into (0, 1)), B, C and D from the token."""

    def __init__(self, m: int, n_state: int, p: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.m, self.n_state, self.p = m, n_state, p
        self.a_proj = Linear(m, n_state, rng)
        self.b_proj = Linear(m, n_state * m, rng)
        self.c_proj = Linear(m, p * n_state, rng)
        self.d_proj = Linear(m, p * m, rng)

    def matrices(self, u: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        lead = u.shape[:-1]
        a = sigmoid(self.a_proj(u))
        b = self.b_proj(u).reshape(lead + (self.n_state, self.m))
        c = self.c_proj(u).reshape(lead + (self.p, self.n_state))
        d = self.d_proj(u).reshape(lead + (self.p, self.m))
        return a, b, c, d

    def __call__(self, u: Tensor, h0: Tensor) -> Tensor:
        a, b, c, d = self.matrices(u)
        return ssm_scan(a, b, c, d, u, h0)

    def step(self, u: Tensor, h: Tensor) -> Tuple[Tensor, Tensor]:
        a, b, c, d = self.matrices(u)
        column = u.unsqueeze(-1)
        drive = (b @ column).reshape(h.shape)
        y = c @ h.unsqueeze(-1) + d @ column
        charge_flops(2 * self.n_state * self.n_state * int(np.prod(h.shape[:-1])), "scan")
        return y.reshape(y.shape[:-1]), a * h + drive


class FixedSSM(Module):
    """State-space scan whose A, B, C, D are learned constants shared by every token."""

    def __init__(self, m: int, n_state: int, p: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.m, self.n_state, self.p = m, n_state, p
        self.parameter("a_logit", rng.standard_normal(n_state))
        self.parameter("b", rng.standard_normal((n_state, m)) / np.sqrt(m))
        self.parameter("c", rng.standard_normal((p, n_state)) / np.sqrt(n_state))
        self.parameter("d", rng.standard_normal((p, m)) / np.sqrt(m))

    def __call__(self, u: Tensor, h0: Tensor) -> Tensor:
        length, n_state = u.shape[-2], self.n_state
        a = sigmoid(self.a_logit) * np.ones(u.shape[:-1] + (n_state,))
        drive = u @ self.b.swapaxes(0, 1)
        states = linear_recurrence(a, drive, h0)
        charge_flops(2 * n_state * n_state * int(np.prod(u.shape[:-1])), "scan")
        return states[..., :length, :] @ self.c.swapaxes(0, 1) + u @ self.d.swapaxes(0, 1)

    def step(self, u: Tensor, h: Tensor) -> Tuple[Tensor, Tensor]:
        row = u.unsqueeze(-2)
        drive = (row @ self.b.swapaxes(0, 1)).reshape(h.shape)
        y = h.unsqueeze(-2) @ self.c.swapaxes(0, 1) + row @ self.d.swapaxes(0, 1)
        charge_flops(2 * self.n_state * self.n_state * int(np.prod(h.shape[:-1])), "scan")
        return y.reshape(u.shape[:-1] + (self.p,)), sigmoid(self.a_logit) * h + drive


class CausalConv1D(Module):
    """Depthwise causal convolution over the second-to-last axis, left-padded with zeros."""

    def __init__(self, channels: int, width: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.channels, self.width = channels, width
        self.parameter("weight", rng.standard_normal((width, channels)) / np.sqrt(width))
        self.parameter("bias", np.zeros(channels))

    def __call__(self, u: Tensor) -> Tensor:
        length = u.shape[-2]
        pad = Tensor(np.zeros(u.shape[:-2] + (self.width - 1, self.channels)))
        padded = concat([pad, u], axis=-2)
        out = self.bias
        for offset in range(self.width):
            out = out + padded[..., offset : offset + length, :] * self.weight[offset]
        return out

    def step(self, u: Tensor, tail: Tensor) -> Tuple[Tensor, Tensor]:
        window = concat([tail, u.unsqueeze(-2)], axis=-2)
        out = self.bias
        for offset in range(self.width):
            out = out + window[..., offset, :] * self.weight[offset]
        return out, window[..., 1:, :]


class SequenceBlock(Module):
    kind: BlockKind

    def __init__(self, d: int, d_inner: int, d_ff: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.d, self.d_inner, self.d_ff = d, d_inner, d_ff
        self.out_proj = Linear(d_inner, d, rng)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff, rng)
        self.norm2 = LayerNorm(d)

    def mix(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def mix_step(self, x: Tensor, state: BlockState) -> Tuple[Tensor, BlockState]:
        raise NotImplementedError

    def initial_state(self, lead: Tuple[int, ...]) -> BlockState:
        raise NotImplementedError

    def _finish(self, x: Tensor, mixed: Tensor) -> Tensor:
        y = self.norm1(x + self.out_proj(mixed))
        return self.norm2(y + self.ffn(y))

    def __call__(self, x: Tensor) -> Tensor:
        """Whole-sequence forward over (.., L, d)."""
        if x.shape[-1] != self.d:
            raise DimensionError(
                "block input width differs from the model width", x.shape, (self.d,)
            )
        return self._finish(x, self.mix(x))

    def step(self, x: Tensor, state: BlockState) -> Tuple[Tensor, BlockState]:
        """One token (.., d) forward; returns the output and the next recurrent state."""
        mixed, state = self.mix_step(x, state)
        return self._finish(x, mixed), state


class _StateSpaceBlock(SequenceBlock):
    ssm: Union[SelectiveSSM, FixedSSM]

    def __init__(
        self,
        d: int,
        d_inner: int,
        d_ff: int,
        n_state: int,
        conv_width: int,
        rng: np.random.Generator,
    ) -> None:
        super().__init__(d, d_inner, d_ff, rng)
        self.n_state = n_state
        self.in_proj = Linear(d, d_inner, rng)
        self.conv = CausalConv1D(d_inner, conv_width, rng)

    def mix(self, x: Tensor) -> Tensor:
        u = self.conv(self.in_proj(x))
        return self.ssm(u, Tensor(np.zeros(u.shape[:-2] + (self.n_state,))))

    def initial_state(self, lead: Tuple[int, ...]) -> BlockState:
        tail = Tensor(np.zeros(lead + (self.conv.width - 1, self.d_inner)))
        return tail, Tensor(np.zeros(lead + (self.n_state,)))

    def mix_step(self, x: Tensor, state: BlockState) -> Tuple[Tensor, BlockState]:
        tail, h = state
        u, tail = self.conv.step(self.in_proj(x), tail)
        y, h = self.ssm.step(u, h)
        return y, (tail, h)


class TambaBlock(_StateSpaceBlock):
    kind = BlockKind.TAMBA

    def __init__(
        self,
        d: int,
        d_inner: int,
        d_ff: int,
        n_state: int,
        conv_width: int,
        rng: np.random.Generator,
    ) -> None:
        super().__init__(d, d_inner, d_ff, n_state, conv_width, rng)
        self.ssm = SelectiveSSM(d_inner, n_state, d_inner, rng)


class MambaBlock(_StateSpaceBlock):
    kind = BlockKind.MAMBA

    def __init__(
        self,
        d: int,
        d_inner: int,
        d_ff: int,
        n_state: int,
        conv_width: int,
        rng: np.random.Generator,
    ) -> None:
        super().__init__(d, d_inner, d_ff, n_state, conv_width, rng)
        self.ssm = FixedSSM(d_inner, n_state, d_inner, rng)


class AttentionBlock(SequenceBlock):
    """Single-head softmax attention over the sequence axis; key width is the inner width."""

    kind = BlockKind.ATTENTION

    def __init__(
        self,
        d: int,
        d_inner: int,
        d_ff: int,
        rng: np.random.Generator,
        causal: bool = False,
    ) -> None:
        super().__init__(d, d_inner, d_ff, rng)
        self.causal = causal
        self.q_proj = Linear(d, d_inner, rng)
        self.k_proj = Linear(d, d_inner, rng)
        self.v_proj = Linear(d, d_inner, rng)

    def weights(self, x: Tensor) -> Tensor:
        """Attention weight matrix (.., L, L); every row is a distribution."""
        q, k = self.q_proj(x), self.k_proj(x)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.d_inner))
        if self.causal:
            length = x.shape[-2]
            future = np.triu(np.ones((length, length)), k=1)
            scores = scores + future * MASK_VALUE
        return softmax(scores, axis=-1)

    def mix(self, x: Tensor) -> Tensor:
        return self.weights(x) @ self.v_proj(x)

    def initial_state(self, lead: Tuple[int, ...]) -> BlockState:
        empty = Tensor(np.zeros(lead + (0, self.d_inner)))
        return empty, empty

    def mix_step(self, x: Tensor, state: BlockState) -> Tuple[Tensor, BlockState]:
        keys, values = state
        keys = concat([keys, self.k_proj(x).unsqueeze(-2)], axis=-2)
        values = concat([values, self.v_proj(x).unsqueeze(-2)], axis=-2)
        query = self.q_proj(x).unsqueeze(-2)
        scores = (query @ keys.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.d_inner))
        mixed = softmax(scores, axis=-1) @ values
        return mixed.reshape(mixed.shape[:-2] + (self.d_inner,)), (keys, values)


def build_block(
    config: ModelConfig, rng: np.random.Generator, causal: bool = True
) -> SequenceBlock:
    widths = (config.d, config.d_inner, config.d_ff, config.n_state, config.conv_width)
    if config.block_kind is BlockKind.TAMBA:
        return TambaBlock(*widths, rng)
    if config.block_kind is BlockKind.MAMBA:
        return MambaBlock(*widths, rng)
    return AttentionBlock(config.d, config.d_inner, config.d_ff, rng, causal=causal)


def selective_scan(u: Any, params: SelectiveSSM, h0: Optional[Any] = None) -> Tensor:
    """Selective scan of ``u`` (.., L, m) with matrices emitted by ``params``."""
    tokens = as_tensor(u)
    if h0 is None:
        start = Tensor(np.zeros(tokens.shape[:-2] + (params.n_state,)))
    else:
        start = as_tensor(h0)
    return params(tokens, start)
