"""Slice-grouped spatio-temporal transformer autoencoder.

Tokens are per-(frame, joint) coordinate embeddings. Attention is confined
to time slices of F consecutive frames; a depthwise-convolutional
aggregation step mixes information across slices; a squeeze-excitation
style channel gate rescales features globally. The encoder sees only
visible tokens; the decoder rebuilds the full frame-by-joint grid around a
learned mask token and linearly projects every token back to coordinates.

All operations are functional over an explicit named-tensor registry
(:class:`ModelParams`). torch supplies tensor math and reverse-mode
gradients; `msae.oracle` re-derives every kernel independently in scalar
form for testing.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as tf

from .errors import EmptyLossSupport, EmptyVisible, PlanMismatch, PositionOutOfRange, SliceMisaligned
from .masking import MaskPlan, gather_visible, mask_indicator, visible_positions
from .rng import SplitMix64, derive_seed
from .skeleton import SkeletonSequence, build_slice_map, pad_to_slice_multiple

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Widths and depths of the network; all checkpoint-serialized."""

    J: int = 19
    F: int = 3
    d_enc: int = 64
    d_dec: int = 32
    n_enc: int = 9
    n_dec: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    max_T: int = 512
    iffa_kernel: int = 3

    def __post_init__(self):
        if self.J < 2:
            raise ValueError(f"need J >= 2, got {self.J}")
        if self.F < 1 or self.max_T < self.F:
            raise ValueError(f"need max_T >= F >= 1, got F={self.F}, max_T={self.max_T}")
        if self.d_enc % self.heads or self.d_dec % self.heads:
            raise ValueError(
                f"widths must be divisible by heads: d_enc={self.d_enc}, "
                f"d_dec={self.d_dec}, heads={self.heads}"
            )
        if self.iffa_kernel % 2 != 1 or self.iffa_kernel < 1:
            raise ValueError(f"iffa_kernel must be odd, got {self.iffa_kernel}")
        if self.n_enc < 0 or self.n_dec < 0 or self.mlp_ratio < 1:
            raise ValueError("n_enc/n_dec must be >= 0 and mlp_ratio >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenSet:
    """Ragged token set tagged with grid positions and slice membership."""

    tokens: torch.Tensor          # [N, d]
    positions: np.ndarray         # [N, 2] int64, (frame, joint)
    slice_of_token: np.ndarray    # [N] int64, contiguous from 0
    n_slices: int

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def with_tokens(self, tokens: torch.Tensor) -> "TokenSet":
        return TokenSet(tokens, self.positions, self.slice_of_token, self.n_slices)


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    init: str                       # "xavier" | "normal02" | "ones" | "zeros"
    fan: tuple[int, int] | None = None


def _block_specs(prefix: str, d: int, mlp_ratio: int, kernel: int) -> list[TensorSpec]:
    hidden = mlp_ratio * d
    red = max(1, d // 4)
    return [
        TensorSpec(prefix + "ln1.scale", (d,), "ones"),
        TensorSpec(prefix + "ln1.offset", (d,), "zeros"),
        TensorSpec(prefix + "attn.q", (d, d), "xavier", (d, d)),
        TensorSpec(prefix + "attn.k", (d, d), "xavier", (d, d)),
        TensorSpec(prefix + "attn.v", (d, d), "xavier", (d, d)),
        TensorSpec(prefix + "attn.o", (d, d), "xavier", (d, d)),
        TensorSpec(prefix + "ln2.scale", (d,), "ones"),
        TensorSpec(prefix + "ln2.offset", (d,), "zeros"),
        TensorSpec(prefix + "iffa.depthwise", (d, kernel), "xavier", (kernel, kernel)),
        TensorSpec(prefix + "iffa.pointwise", (d, d), "xavier", (d, d)),
        TensorSpec(prefix + "ca.w1", (red, d), "xavier", (d, red)),
        TensorSpec(prefix + "ca.w2", (d, red), "xavier", (red, d)),
        TensorSpec(prefix + "ln3.scale", (d,), "ones"),
        TensorSpec(prefix + "ln3.offset", (d,), "zeros"),
        TensorSpec(prefix + "mlp.w1", (d, hidden), "xavier", (d, hidden)),
        TensorSpec(prefix + "mlp.b1", (hidden,), "zeros"),
        TensorSpec(prefix + "mlp.w2", (hidden, d), "xavier", (hidden, d)),
        TensorSpec(prefix + "mlp.b2", (d,), "zeros"),
    ]


def registry_specs(cfg: ModelConfig) -> list[TensorSpec]:
    """The fixed tensor registry; order defines checkpoint layout and the
    flat parameter/gradient vector."""
    specs = [
        TensorSpec("enc.proj", (2, cfg.d_enc), "xavier", (2, cfg.d_enc)),
        TensorSpec("enc.frame_pos", (cfg.max_T, cfg.d_enc), "normal02"),
        TensorSpec("enc.joint_pos", (cfg.J, cfg.d_enc), "normal02"),
    ]
    for i in range(cfg.n_enc):
        specs += _block_specs(f"enc.block{i}.", cfg.d_enc, cfg.mlp_ratio, cfg.iffa_kernel)
    specs.append(TensorSpec("enc2dec", (cfg.d_enc, cfg.d_dec), "xavier", (cfg.d_enc, cfg.d_dec)))
    specs += [
        TensorSpec("dec.frame_pos", (cfg.max_T, cfg.d_dec), "normal02"),
        TensorSpec("dec.joint_pos", (cfg.J, cfg.d_dec), "normal02"),
        TensorSpec("dec.mask_token", (cfg.d_dec,), "normal02"),
    ]
    for i in range(cfg.n_dec):
        specs += _block_specs(f"dec.block{i}.", cfg.d_dec, cfg.mlp_ratio, cfg.iffa_kernel)
    specs += [
        TensorSpec("head.weight", (2, cfg.d_dec), "xavier", (cfg.d_dec, 2)),
        TensorSpec("head.bias", (2,), "zeros"),
    ]
    return specs


def _init_array(spec: TensorSpec, seed: int) -> np.ndarray:
    rng = SplitMix64(derive_seed(seed, "init", spec.name))
    n = int(np.prod(spec.shape)) if spec.shape else 1
    if spec.init == "ones":
        return np.ones(spec.shape, dtype=np.float64)
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype=np.float64)
    if spec.init == "normal02":
        vals = np.array([0.02 * rng.gaussian() for _ in range(n)])
    elif spec.init == "xavier":
        fan_in, fan_out = spec.fan
        a = math.sqrt(6.0 / (fan_in + fan_out))
        vals = np.array([a * (2.0 * rng.uniform() - 1.0) for _ in range(n)])
    else:
        raise ValueError(f"unknown init {spec.init!r}")
    return vals.reshape(spec.shape)


class ModelParams:
    """Named learnable tensors in a fixed order, flat-indexable.

    The registry order is normative: it defines the checkpoint tensor
    layout and the layout of the flat parameter/gradient vectors used by
    the optimizer and gradient checks.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, torch.Tensor]):
        self.config = config
        self.specs = registry_specs(config)
        expected = [s.name for s in self.specs]
        if list(tensors.keys()) != expected:
            raise ValueError("tensor registry does not match config")
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> "ModelParams":
        tensors = {}
        for spec in registry_specs(config):
            arr = _init_array(spec, seed)
            t = torch.tensor(arr, dtype=dtype)
            t.requires_grad_(True)
            tensors[spec.name] = t
        return cls(config, tensors)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray],
                    dtype: torch.dtype = torch.float32) -> "ModelParams":
        tensors = {}
        for spec in registry_specs(config):
            if spec.name not in arrays:
                raise ValueError(f"missing tensor {spec.name!r}")
            arr = np.asarray(arrays[spec.name])
            if tuple(arr.shape) != spec.shape:
                raise ValueError(f"tensor {spec.name!r} has shape {arr.shape}, expected {spec.shape}")
            t = torch.tensor(arr, dtype=dtype)
            t.requires_grad_(True)
            tensors[spec.name] = t
        return cls(config, tensors)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    @property
    def n_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def layout(self) -> list[tuple[str, int, int]]:
        """(name, start, stop) offsets into the flat vector, registry order."""
        out = []
        pos = 0
        for spec in self.specs:
            n = int(np.prod(spec.shape)) if spec.shape else 1
            out.append((spec.name, pos, pos + n))
            pos += n
        return out

    def to_flat(self) -> np.ndarray:
        np_dtype = np.float64 if self.dtype == torch.float64 else np.float32
        return np.concatenate(
            [t.detach().cpu().numpy().astype(np_dtype, copy=False).ravel() for t in self.tensors.values()]
        )

    def from_flat(self, flat: np.ndarray) -> None:
        if flat.shape != (self.n_params,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({self.n_params},)")
        pos = 0
        with torch.no_grad():
            for t in self.tensors.values():
                n = t.numel()
                chunk = torch.as_tensor(flat[pos : pos + n], dtype=t.dtype).reshape(t.shape)
                t.copy_(chunk)
                pos += n

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads_flat(self) -> np.ndarray:
        np_dtype = np.float64 if self.dtype == torch.float64 else np.float32
        chunks = []
        for t in self.tensors.values():
            if t.grad is None:
                chunks.append(np.zeros(t.numel(), dtype=np_dtype))
            else:
                chunks.append(t.grad.detach().cpu().numpy().astype(np_dtype, copy=False).ravel())
        return np.concatenate(chunks)

    def to_numpy_dict(self, dtype=np.float64) -> dict[str, np.ndarray]:
        return {name: t.detach().cpu().numpy().astype(dtype) for name, t in self.tensors.items()}

    def checkpoint_tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(name, t.detach().cpu().numpy().astype(np.float32)) for name, t in self.tensors.items()]


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------


def _layer_norm(x: torch.Tensor, scale: torch.Tensor, offset: torch.Tensor) -> torch.Tensor:
    # (x - mean) / sqrt(biased_var + eps) * scale + offset, fused kernel
    return tf.layer_norm(x, x.shape[-1:], scale, offset, LN_EPS)


def _check_positions(positions: np.ndarray, cfg: ModelConfig) -> None:
    if positions.size == 0:
        return
    frames, joints = positions[:, 0], positions[:, 1]
    if frames.min() < 0 or frames.max() >= cfg.max_T:
        raise PositionOutOfRange(
            f"frame indices must lie in [0, {cfg.max_T}), got [{frames.min()}, {frames.max()}]"
        )
    if joints.min() < 0 or joints.max() >= cfg.J:
        raise PositionOutOfRange(
            f"joint indices must lie in [0, {cfg.J}), got [{joints.min()}, {joints.max()}]"
        )


def stse_encode(coords, positions: np.ndarray, params: ModelParams, cfg: ModelConfig) -> TokenSet:
    """Tokenize visible coordinates: projection plus positional tables.

    token = coord @ W_proj + frame_pos[frame] + joint_pos[joint]; slice
    indices come from the slice map over the distinct frames present.
    """
    positions = np.asarray(positions, dtype=np.int64)
    _check_positions(positions, cfg)
    coords_t = torch.as_tensor(np.asarray(coords), dtype=params.dtype).reshape(len(positions), 2)
    frames = torch.from_numpy(positions[:, 0])
    joints = torch.from_numpy(positions[:, 1])
    tokens = (
        coords_t @ params["enc.proj"]
        + params["enc.frame_pos"][frames]
        + params["enc.joint_pos"][joints]
    )
    distinct = np.unique(positions[:, 0])
    smap = build_slice_map(distinct.tolist(), cfg.F)
    slice_of_frame = {f: int(s) for f, s in zip(distinct, smap.slice_of_frame)}
    slice_of_token = np.array([slice_of_frame[int(f)] for f in positions[:, 0]], dtype=np.int64)
    return TokenSet(tokens, positions, slice_of_token, smap.n_slices)


def _grouped_attention(
    x: torch.Tensor,
    slice_of_token: np.ndarray,
    n_slices: int,
    wq: torch.Tensor,
    wk: torch.Tensor,
    wv: torch.Tensor,
    wo: torch.Tensor,
    heads: int,
    return_weights: bool = False,
):
    """Multi-head softmax attention restricted to same-slice tokens."""
    n, d = x.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    q, k, v = x @ wq, x @ wk, x @ wv
    counts = np.bincount(slice_of_token, minlength=n_slices)
    uniform = n > 0 and counts.min() == counts.max() and bool(np.all(np.diff(slice_of_token) >= 0))
    weights: list[np.ndarray] = []
    if uniform:
        g = int(counts[0])
        # [S, H, G, dh]
        qs = q.reshape(n_slices, g, heads, dh).permute(0, 2, 1, 3)
        ks = k.reshape(n_slices, g, heads, dh).permute(0, 2, 1, 3)
        vs = v.reshape(n_slices, g, heads, dh).permute(0, 2, 1, 3)
        attn = torch.softmax(qs @ ks.transpose(-1, -2) * scale, dim=-1)
        out = (attn @ vs).permute(0, 2, 1, 3).reshape(n, d)
        if return_weights:
            w = attn.detach().cpu().numpy()
            weights = [w[s] for s in range(n_slices)]
    else:
        pieces = []
        order = []
        for s in range(n_slices):
            idx = np.nonzero(slice_of_token == s)[0]
            order.append(idx)
            ix = torch.from_numpy(idx)
            qs = q[ix].reshape(len(idx), heads, dh).permute(1, 0, 2)
            ks = k[ix].reshape(len(idx), heads, dh).permute(1, 0, 2)
            vs = v[ix].reshape(len(idx), heads, dh).permute(1, 0, 2)
            attn = torch.softmax(qs @ ks.transpose(-1, -2) * scale, dim=-1)
            pieces.append((attn @ vs).permute(1, 0, 2).reshape(len(idx), d))
            if return_weights:
                weights.append(attn.detach().cpu().numpy())
        perm = np.concatenate(order) if order else np.empty(0, dtype=np.int64)
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        out = torch.cat(pieces, dim=0)[torch.from_numpy(inv)]
    out = out @ wo
    if return_weights:
        return out, weights
    return out


def stga(ts: TokenSet, params: ModelParams, prefix: str, cfg: ModelConfig, return_weights: bool = False):
    """Slice-grouped self-attention; positions and slices pass through."""
    res = _grouped_attention(
        ts.tokens,
        ts.slice_of_token,
        ts.n_slices,
        params[prefix + "attn.q"],
        params[prefix + "attn.k"],
        params[prefix + "attn.v"],
        params[prefix + "attn.o"],
        cfg.heads,
        return_weights=return_weights,
    )
    if return_weights:
        out, weights = res
        return ts.with_tokens(out), weights
    return ts.with_tokens(res)


def _slice_means(x: torch.Tensor, slice_of_token: np.ndarray, n_slices: int) -> torch.Tensor:
    idx = torch.from_numpy(slice_of_token)
    sums = x.new_zeros(n_slices, x.shape[1]).index_add(0, idx, x)
    counts = torch.from_numpy(np.bincount(slice_of_token, minlength=n_slices)).to(x.dtype)
    return sums / counts.unsqueeze(1)


def _iffa_mix(x: torch.Tensor, slice_of_token: np.ndarray, n_slices: int,
              depthwise: torch.Tensor, pointwise: torch.Tensor) -> torch.Tensor:
    """Per-slice mean -> depthwise conv along the slice axis -> pointwise mix."""
    summaries = _slice_means(x, slice_of_token, n_slices)          # [S, d]
    conved = tf.conv1d(
        summaries.t().unsqueeze(0),                                # [1, d, S]
        depthwise.unsqueeze(1),                                    # [d, 1, K]
        padding=depthwise.shape[1] // 2,
        groups=depthwise.shape[0],
    ).squeeze(0).t()                                               # [S, d]
    return conved @ pointwise


def iffa(ts: TokenSet, params: ModelParams, prefix: str) -> TokenSet:
    """Inter-slice aggregation: every token gains its slice's mixed summary."""
    mixed = _iffa_mix(
        ts.tokens, ts.slice_of_token, ts.n_slices,
        params[prefix + "iffa.depthwise"], params[prefix + "iffa.pointwise"],
    )
    return ts.with_tokens(ts.tokens + mixed[torch.from_numpy(ts.slice_of_token)])


def _channel_gate(x: torch.Tensor, w1: torch.Tensor, w2: torch.Tensor) -> torch.Tensor:
    m = x.mean(dim=0)
    return torch.sigmoid(w2 @ torch.relu(w1 @ m))


def conv_channel_attention(ts: TokenSet, params: ModelParams, prefix: str) -> TokenSet:
    """Squeeze-excitation channel gate computed from the global token mean."""
    gate = _channel_gate(ts.tokens, params[prefix + "ca.w1"], params[prefix + "ca.w2"])
    return ts.with_tokens(ts.tokens * gate)


def _mlp(x: torch.Tensor, w1, b1, w2, b2) -> torch.Tensor:
    return tf.gelu(x @ w1 + b1) @ w2 + b2


def sstformer_block(ts: TokenSet, params: ModelParams, prefix: str, cfg: ModelConfig) -> TokenSet:
    """Pre-norm residual block: attention, aggregation, gate, MLP.

    With all weights zero (layer-norm scale 1, offset 0) the block reduces
    to a single 0.5 gate: sigmoid(0) from the channel attention.
    """
    x = ts.tokens
    x = x + _grouped_attention(
        _layer_norm(x, params[prefix + "ln1.scale"], params[prefix + "ln1.offset"]),
        ts.slice_of_token, ts.n_slices,
        params[prefix + "attn.q"], params[prefix + "attn.k"],
        params[prefix + "attn.v"], params[prefix + "attn.o"],
        cfg.heads,
    )
    mixed = _iffa_mix(
        _layer_norm(x, params[prefix + "ln2.scale"], params[prefix + "ln2.offset"]),
        ts.slice_of_token, ts.n_slices,
        params[prefix + "iffa.depthwise"], params[prefix + "iffa.pointwise"],
    )
    x = x + mixed[torch.from_numpy(ts.slice_of_token)]
    x = x * _channel_gate(x, params[prefix + "ca.w1"], params[prefix + "ca.w2"])
    x = x + _mlp(
        _layer_norm(x, params[prefix + "ln3.scale"], params[prefix + "ln3.offset"]),
        params[prefix + "mlp.w1"], params[prefix + "mlp.b1"],
        params[prefix + "mlp.w2"], params[prefix + "mlp.b2"],
    )
    return ts.with_tokens(x)


def encoder_forward(coords, positions: np.ndarray, params: ModelParams, cfg: ModelConfig) -> TokenSet:
    """Tokenize visible coordinates and run the encoder stack (no mask tokens)."""
    if len(positions) == 0:
        raise EmptyVisible("encoder requires at least one visible token")
    ts = stse_encode(coords, positions, params, cfg)
    for i in range(cfg.n_enc):
        ts = sstformer_block(ts, params, f"enc.block{i}.", cfg)
    return ts


def decoder_forward(latent: TokenSet, plan: MaskPlan, params: ModelParams, cfg: ModelConfig) -> torch.Tensor:
    """Rebuild the full [T, J, 2] grid from visible latents and the mask token.

    Visible positions take the projected latents, masked positions the
    learned mask token; every position receives the decoder's positional
    embeddings before the decoder stack and linear head.
    """
    T, J = plan.T, plan.J
    if J != cfg.J:
        raise PlanMismatch(f"plan J={J} does not match model J={cfg.J}")
    if T % cfg.F != 0:
        raise SliceMisaligned(f"decoder grid of {T} frames cannot form slices of {cfg.F}")
    if T > cfg.max_T:
        raise PositionOutOfRange(f"T={T} exceeds positional table size {cfg.max_T}")
    expected = visible_positions(plan)
    if latent.positions.shape != expected.shape or not np.array_equal(latent.positions, expected):
        raise PlanMismatch("latent token positions do not match the plan's visible set")
    z = latent.tokens @ params["enc2dec"]
    frames_all = torch.arange(T, dtype=torch.int64).repeat_interleave(J)
    joints_all = torch.arange(J, dtype=torch.int64).repeat(T)
    grid = params["dec.mask_token"].unsqueeze(0).expand(T * J, -1).clone()
    vis_flat = torch.from_numpy(expected[:, 0] * J + expected[:, 1])
    grid[vis_flat] = z
    grid = grid + params["dec.frame_pos"][frames_all] + params["dec.joint_pos"][joints_all]
    positions_all = np.stack(
        [np.repeat(np.arange(T, dtype=np.int64), J), np.tile(np.arange(J, dtype=np.int64), T)],
        axis=1,
    )
    ts = TokenSet(grid, positions_all, positions_all[:, 0] // cfg.F, T // cfg.F)
    for i in range(cfg.n_dec):
        ts = sstformer_block(ts, params, f"dec.block{i}.", cfg)
    pred = ts.tokens @ params["head.weight"].t() + params["head.bias"]
    return pred.reshape(T, J, 2)


def masked_mse(pred: torch.Tensor, target: torch.Tensor, indicator: np.ndarray,
               loss_on: str = "masked") -> torch.Tensor:
    """Mean squared coordinate error over masked positions (or the full grid)."""
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if loss_on == "all":
        return ((pred - target) ** 2).mean()
    if loss_on != "masked":
        raise ValueError(f"loss_on must be 'masked' or 'all', got {loss_on!r}")
    ind = torch.from_numpy(np.asarray(indicator, dtype=bool))
    if not bool(ind.any()):
        raise EmptyLossSupport("mask indicator is all-false; nothing to score")
    diff = pred[ind] - target[ind]
    return (diff**2).mean()


def bout_loss(seq: SkeletonSequence, plan: MaskPlan, params: ModelParams, cfg: ModelConfig,
              loss_on: str = "masked") -> torch.Tensor:
    """Gather -> encode -> decode -> masked MSE for one bout."""
    coords, positions = gather_visible(seq, plan)
    latent = encoder_forward(coords, positions, params, cfg)
    pred = decoder_forward(latent, plan, params, cfg)
    target = torch.tensor(seq.coords, dtype=params.dtype)
    return masked_mse(pred, target, mask_indicator(plan), loss_on=loss_on)


# ---------------------------------------------------------------------------
# batched fast path: same math as the per-bout functions, stacked over a
# batch whose bouts and plans share one shape structure (equal T, J, visible
# frame count, and masked-joints-per-frame, which the mask planner fixes)
# ---------------------------------------------------------------------------


def _uniform_batch(bouts: list[SkeletonSequence], plans: list[MaskPlan]) -> bool:
    p0 = plans[0]
    return all(b.T == p0.T and b.J == p0.J for b in bouts) and all(
        p.T == p0.T
        and p.J == p0.J
        and len(p.visible_frames) == len(p0.visible_frames)
        and p.joints_masked_per_frame == p0.joints_masked_per_frame
        for p in plans
    )


def _batched_blocks(x: torch.Tensor, n_slices: int, group: int, prefix: str,
                    n_blocks: int, params: ModelParams, cfg: ModelConfig) -> torch.Tensor:
    """Run transformer blocks on [B, N, d] tokens with uniform contiguous slices."""
    b, n, d = x.shape
    heads = cfg.heads
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    for i in range(n_blocks):
        p = lambda k: params[f"{prefix}.block{i}.{k}"]
        h = _layer_norm(x, p("ln1.scale"), p("ln1.offset"))
        # scale folded into the query projection: (h @ q) * s == h @ (q * s)
        qs = (h @ (p("attn.q") * scale)).reshape(b, n_slices, group, heads, dh).permute(0, 1, 3, 2, 4)
        ks = (h @ p("attn.k")).reshape(b, n_slices, group, heads, dh).permute(0, 1, 3, 2, 4)
        vs = (h @ p("attn.v")).reshape(b, n_slices, group, heads, dh).permute(0, 1, 3, 2, 4)
        attn = torch.softmax(qs @ ks.transpose(-1, -2), dim=-1)
        out = (attn @ vs).permute(0, 1, 3, 2, 4).reshape(b, n, d)
        x = x + out @ p("attn.o")

        h = _layer_norm(x, p("ln2.scale"), p("ln2.offset"))
        means = h.reshape(b, n_slices, group, d).mean(dim=2)
        conved = tf.conv1d(
            means.transpose(1, 2), p("iffa.depthwise").unsqueeze(1),
            padding=cfg.iffa_kernel // 2, groups=d,
        ).transpose(1, 2)
        mixed = conved @ p("iffa.pointwise")
        x = (x.reshape(b, n_slices, group, d) + mixed.unsqueeze(2)).reshape(b, n, d)

        m = x.mean(dim=1)
        gate = torch.sigmoid(torch.relu(m @ p("ca.w1").t()) @ p("ca.w2").t())
        x = x * gate.unsqueeze(1)

        h = _layer_norm(x, p("ln3.scale"), p("ln3.offset"))
        x = x + _mlp(h, p("mlp.w1"), p("mlp.b1"), p("mlp.w2"), p("mlp.b2"))
    return x


def _batched_loss(bouts: list[SkeletonSequence], plans: list[MaskPlan], params: ModelParams,
                  cfg: ModelConfig, loss_on: str) -> torch.Tensor:
    b = len(bouts)
    p0 = plans[0]
    T, J, F = p0.T, p0.J, cfg.F
    if J != cfg.J:
        raise PlanMismatch(f"plan J={J} does not match model J={cfg.J}")
    if T % F != 0:
        raise SliceMisaligned(f"decoder grid of {T} frames cannot form slices of {F}")
    if T > cfg.max_T:
        raise PositionOutOfRange(f"T={T} exceeds positional table size {cfg.max_T}")
    pos = np.stack([visible_positions(p) for p in plans])            # [B, N, 2]
    if pos.shape[1] == 0:
        raise EmptyVisible("encoder requires at least one visible token")
    coords = np.stack([s.coords[pos[i, :, 0], pos[i, :, 1]] for i, s in enumerate(bouts)])
    frames = torch.from_numpy(pos[:, :, 0])
    joints = torch.from_numpy(pos[:, :, 1])
    x = (
        torch.tensor(coords, dtype=params.dtype) @ params["enc.proj"]
        + params["enc.frame_pos"][frames]
        + params["enc.joint_pos"][joints]
    )
    n_vis_frames = len(p0.visible_frames)
    group_enc = F * (J - p0.joints_masked_per_frame)
    x = _batched_blocks(x, n_vis_frames // F, group_enc, "enc", cfg.n_enc, params, cfg)

    z = x @ params["enc2dec"]
    grid = params["dec.mask_token"].expand(b, T * J, -1).clone()
    vis_flat = torch.from_numpy(pos[:, :, 0] * J + pos[:, :, 1])
    bidx = torch.arange(b, dtype=torch.int64).unsqueeze(1).expand_as(vis_flat)
    grid[bidx, vis_flat] = z
    frames_all = torch.arange(T, dtype=torch.int64).repeat_interleave(J)
    joints_all = torch.arange(J, dtype=torch.int64).repeat(T)
    grid = grid + params["dec.frame_pos"][frames_all] + params["dec.joint_pos"][joints_all]
    grid = _batched_blocks(grid, T // F, F * J, "dec", cfg.n_dec, params, cfg)
    pred = (grid @ params["head.weight"].t() + params["head.bias"]).reshape(b, T, J, 2)

    target = torch.tensor(np.stack([s.coords for s in bouts]), dtype=params.dtype)
    if loss_on == "all":
        return ((pred - target) ** 2).mean()
    ind = torch.from_numpy(np.stack([mask_indicator(p) for p in plans]))
    if not bool(ind.any()):
        raise EmptyLossSupport("mask indicator is all-false; nothing to score")
    sq = ((pred - target) ** 2).sum(dim=-1)                          # [B, T, J]
    m = ind.to(pred.dtype)
    per_bout = (sq * m).sum(dim=(1, 2)) / (m.sum(dim=(1, 2)) * 2.0)
    return per_bout.mean()


def forward_backward(bouts: list[SkeletonSequence], plans: list[MaskPlan], params: ModelParams,
                     cfg: ModelConfig, loss_on: str = "masked") -> tuple[float, np.ndarray]:
    """Mean per-bout loss and the exact gradient as a flat registry vector.

    Bout contributions accumulate in batch index order; unused registry
    tensors receive exactly-zero gradients.
    """
    if not bouts:
        raise ValueError("batch must be non-empty")
    if len(bouts) != len(plans):
        raise PlanMismatch(f"{len(bouts)} bouts but {len(plans)} plans")
    params.zero_grad()
    if len(bouts) > 1 and _uniform_batch(bouts, plans):
        total = _batched_loss(bouts, plans, params, cfg, loss_on)
    else:
        total = None
        for seq, plan in zip(bouts, plans):
            loss = bout_loss(seq, plan, params, cfg, loss_on=loss_on)
            total = loss if total is None else total + loss
        total = total / len(bouts)
    total.backward()
    return float(total.detach()), params.grads_flat()


def batch_loss(bouts: list[SkeletonSequence], plans: list[MaskPlan], params: ModelParams,
               cfg: ModelConfig, loss_on: str = "masked") -> float:
    """Loss only, no gradients; the handle finite-difference checks perturb."""
    with torch.no_grad():
        vals = [float(bout_loss(seq, plan, params, cfg, loss_on=loss_on)) for seq, plan in zip(bouts, plans)]
    return float(sum(vals) / len(vals))


def embed_bout(seq: SkeletonSequence, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Mean-pooled encoder latent of the full, unmasked bout.

    Bouts whose length is not a multiple of F are padded by repeating the
    last frame before encoding.
    """
    seq = pad_to_slice_multiple(seq, cfg.F)
    if seq.J != cfg.J:
        raise PlanMismatch(f"bout has J={seq.J} but model expects J={cfg.J}")
    positions = np.stack(
        [np.repeat(np.arange(seq.T, dtype=np.int64), seq.J),
         np.tile(np.arange(seq.J, dtype=np.int64), seq.T)],
        axis=1,
    )
    with torch.no_grad():
        latent = encoder_forward(seq.coords.reshape(-1, 2), positions, params, cfg)
        return latent.tokens.mean(dim=0).cpu().numpy().astype(np.float64)
