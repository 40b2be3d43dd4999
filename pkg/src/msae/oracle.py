"""Independent brute-force references used by the test suite.

Everything here is written as explicit scalar loops in float64 on plain
numpy storage, sharing no numerical kernels with `msae.model` (which is
torch-based). The references cover grouped attention, the inter-slice
convolution, channel gating, tokenization, the masked loss, Adam, the full
tiny pipeline, and central finite-difference gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_LN_EPS = 1e-5


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def _softmax_row(row: np.ndarray) -> np.ndarray:
    hi = max(float(x) for x in row)
    exps = np.array([math.exp(float(x) - hi) for x in row])
    return exps / exps.sum()


def attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    """Softmax attention for one group and one head, triple-loop form."""
    g, dh = q.shape
    out = np.zeros((g, v.shape[1]), dtype=np.float64)
    for i in range(g):
        logits = np.zeros(g, dtype=np.float64)
        for j in range(g):
            acc = 0.0
            for t in range(dh):
                acc += q[i, t] * k[j, t]
            logits[j] = acc * scale
        weights = _softmax_row(logits)
        for j in range(g):
            for t in range(v.shape[1]):
                out[i, t] += weights[j] * v[j, t]
    return out


def grouped_attention_reference(tokens: np.ndarray, slice_of_token: np.ndarray,
                                wq, wk, wv, wo, heads: int) -> np.ndarray:
    """Full grouped multi-head attention including projections."""
    n, d = tokens.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    q = _matmul(tokens, np.asarray(wq, dtype=np.float64))
    k = _matmul(tokens, np.asarray(wk, dtype=np.float64))
    v = _matmul(tokens, np.asarray(wv, dtype=np.float64))
    mixed = np.zeros((n, d), dtype=np.float64)
    for s in range(int(slice_of_token.max()) + 1 if n else 0):
        idx = [i for i in range(n) if slice_of_token[i] == s]
        for h in range(heads):
            cols = slice(h * dh, (h + 1) * dh)
            out = attention_reference(q[idx, cols], k[idx, cols], v[idx, cols], scale)
            for row, i in enumerate(idx):
                mixed[i, cols] = out[row]
    return _matmul(mixed, np.asarray(wo, dtype=np.float64))


def layer_norm_reference(x: np.ndarray, scale: np.ndarray, offset: np.ndarray) -> np.ndarray:
    n, d = x.shape
    out = np.zeros_like(x)
    for i in range(n):
        mu = sum(float(v) for v in x[i]) / d
        var = sum((float(v) - mu) ** 2 for v in x[i]) / d
        denom = math.sqrt(var + _LN_EPS)
        for j in range(d):
            out[i, j] = (x[i, j] - mu) / denom * scale[j] + offset[j]
    return out


def gelu_reference(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def stse_reference(coords: np.ndarray, positions: np.ndarray,
                   proj: np.ndarray, frame_pos: np.ndarray, joint_pos: np.ndarray) -> np.ndarray:
    n = len(positions)
    d = proj.shape[1]
    out = np.zeros((n, d), dtype=np.float64)
    for i in range(n):
        f, j = int(positions[i, 0]), int(positions[i, 1])
        for c in range(d):
            out[i, c] = (
                coords[i, 0] * proj[0, c]
                + coords[i, 1] * proj[1, c]
                + frame_pos[f, c]
                + joint_pos[j, c]
            )
    return out


def iffa_mix_reference(tokens: np.ndarray, slice_of_token: np.ndarray, n_slices: int,
                       depthwise: np.ndarray, pointwise: np.ndarray) -> np.ndarray:
    """Slice means -> zero-padded depthwise cross-correlation -> pointwise mix."""
    n, d = tokens.shape
    kernel = depthwise.shape[1]
    half = kernel // 2
    means = np.zeros((n_slices, d), dtype=np.float64)
    counts = np.zeros(n_slices, dtype=np.int64)
    for i in range(n):
        s = int(slice_of_token[i])
        counts[s] += 1
        for c in range(d):
            means[s, c] += tokens[i, c]
    for s in range(n_slices):
        means[s] /= counts[s]
    conved = np.zeros((n_slices, d), dtype=np.float64)
    for s in range(n_slices):
        for c in range(d):
            acc = 0.0
            for t in range(kernel):
                src = s + t - half
                if 0 <= src < n_slices:
                    acc += depthwise[c, t] * means[src, c]
            conved[s, c] = acc
    return _matmul(conved, np.asarray(pointwise, dtype=np.float64))


def iffa_reference(tokens: np.ndarray, slice_of_token: np.ndarray, n_slices: int,
                   depthwise: np.ndarray, pointwise: np.ndarray) -> np.ndarray:
    mixed = iffa_mix_reference(tokens, slice_of_token, n_slices, depthwise, pointwise)
    out = tokens.astype(np.float64).copy()
    for i in range(len(tokens)):
        out[i] += mixed[int(slice_of_token[i])]
    return out


def channel_gate_reference(tokens: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    n, d = tokens.shape
    red = w1.shape[0]
    mean = np.zeros(d, dtype=np.float64)
    for i in range(n):
        for c in range(d):
            mean[c] += tokens[i, c]
    mean /= n
    hidden = np.zeros(red, dtype=np.float64)
    for r in range(red):
        acc = 0.0
        for c in range(d):
            acc += w1[r, c] * mean[c]
        hidden[r] = max(0.0, acc)
    gate = np.zeros(d, dtype=np.float64)
    for c in range(d):
        acc = 0.0
        for r in range(red):
            acc += w2[c, r] * hidden[r]
        gate[c] = 1.0 / (1.0 + math.exp(-acc))
    return gate


def conv_channel_attention_reference(tokens: np.ndarray, w1, w2) -> np.ndarray:
    gate = channel_gate_reference(tokens, np.asarray(w1), np.asarray(w2))
    out = tokens.astype(np.float64).copy()
    for i in range(len(tokens)):
        for c in range(tokens.shape[1]):
            out[i, c] *= gate[c]
    return out


def _mlp_reference(x: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    h = _matmul(x, np.asarray(w1, dtype=np.float64))
    for i in range(h.shape[0]):
        for j in range(h.shape[1]):
            h[i, j] = gelu_reference(h[i, j] + b1[j])
    out = _matmul(h, np.asarray(w2, dtype=np.float64))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] += b2[j]
    return out


def block_reference(tokens: np.ndarray, slice_of_token: np.ndarray, n_slices: int,
                    params: dict[str, np.ndarray], prefix: str, heads: int) -> np.ndarray:
    """Scalar re-derivation of one transformer block."""
    p = lambda k: np.asarray(params[prefix + k], dtype=np.float64)
    x = tokens.astype(np.float64).copy()
    x = x + grouped_attention_reference(
        layer_norm_reference(x, p("ln1.scale"), p("ln1.offset")),
        slice_of_token, p("attn.q"), p("attn.k"), p("attn.v"), p("attn.o"), heads,
    )
    mixed = iffa_mix_reference(
        layer_norm_reference(x, p("ln2.scale"), p("ln2.offset")),
        slice_of_token, n_slices, p("iffa.depthwise"), p("iffa.pointwise"),
    )
    for i in range(len(x)):
        x[i] += mixed[int(slice_of_token[i])]
    gate = channel_gate_reference(x, p("ca.w1"), p("ca.w2"))
    for i in range(len(x)):
        for c in range(x.shape[1]):
            x[i, c] *= gate[c]
    x = x + _mlp_reference(
        layer_norm_reference(x, p("ln3.scale"), p("ln3.offset")),
        p("mlp.w1"), p("mlp.b1"), p("mlp.w2"), p("mlp.b2"),
    )
    return x


def masked_mse_reference(pred: np.ndarray, target: np.ndarray, indicator: np.ndarray,
                         loss_on: str = "masked") -> float:
    T, J, _ = pred.shape
    total = 0.0
    count = 0
    for t in range(T):
        for j in range(J):
            if loss_on == "all" or indicator[t, j]:
                for c in range(2):
                    diff = float(pred[t, j, c]) - float(target[t, j, c])
                    total += diff * diff
                count += 2
    if count == 0:
        raise ValueError("empty loss support")
    return total / count


def pipeline_reference(cfg: dict, params: dict[str, np.ndarray], coords: np.ndarray,
                       plan: dict, loss_on: str = "masked") -> float:
    """Scalar re-implementation of the full forward pass and loss.

    ``cfg`` holds the model dimensions, ``params`` the registry arrays,
    ``coords`` the [T, J, 2] bout, ``plan`` the mask plan fields.
    """
    coords = np.asarray(coords, dtype=np.float64)
    T, J = coords.shape[0], coords.shape[1]
    F, heads = cfg["F"], cfg["heads"]
    d_dec = cfg["d_dec"]

    masked_frames = set(plan["masked_frames"])
    visible_frames = list(plan["visible_frames"])
    masked_joints = {f: set(m) for f, m in zip(visible_frames, plan["masked_joints_per_visible_frame"])}

    vis_positions = []
    for f in visible_frames:
        for j in range(J):
            if j not in masked_joints[f]:
                vis_positions.append((f, j))
    vis_coords = np.array([coords[f, j] for f, j in vis_positions], dtype=np.float64)
    vis_pos_arr = np.array(vis_positions, dtype=np.int64)

    # encoder: tokenization then blocks, slices over the visible frame list
    tokens = stse_reference(
        vis_coords, vis_pos_arr,
        np.asarray(params["enc.proj"], dtype=np.float64),
        np.asarray(params["enc.frame_pos"], dtype=np.float64),
        np.asarray(params["enc.joint_pos"], dtype=np.float64),
    )
    slice_of_visible_frame = {f: i // F for i, f in enumerate(visible_frames)}
    enc_slices = np.array([slice_of_visible_frame[f] for f, _ in vis_positions], dtype=np.int64)
    n_enc_slices = len(visible_frames) // F
    for i in range(cfg["n_enc"]):
        tokens = block_reference(tokens, enc_slices, n_enc_slices, params, f"enc.block{i}.", heads)

    # decoder: projected latents and mask tokens on the full grid
    z = _matmul(tokens, np.asarray(params["enc2dec"], dtype=np.float64))
    latent_of_position = {pos: z[i] for i, pos in enumerate(vis_positions)}
    grid = np.zeros((T * J, d_dec), dtype=np.float64)
    dec_fp = np.asarray(params["dec.frame_pos"], dtype=np.float64)
    dec_jp = np.asarray(params["dec.joint_pos"], dtype=np.float64)
    mask_token = np.asarray(params["dec.mask_token"], dtype=np.float64)
    for f in range(T):
        for j in range(J):
            base = latent_of_position.get((f, j), mask_token)
            for c in range(d_dec):
                grid[f * J + j, c] = base[c] + dec_fp[f, c] + dec_jp[j, c]
    dec_slices = np.array([f // F for f in range(T) for _ in range(J)], dtype=np.int64)
    for i in range(cfg["n_dec"]):
        grid = block_reference(grid, dec_slices, T // F, params, f"dec.block{i}.", heads)

    head_w = np.asarray(params["head.weight"], dtype=np.float64)
    head_b = np.asarray(params["head.bias"], dtype=np.float64)
    pred = np.zeros((T, J, 2), dtype=np.float64)
    for f in range(T):
        for j in range(J):
            for c in range(2):
                acc = head_b[c]
                for t in range(d_dec):
                    acc += head_w[c, t] * grid[f * J + j, t]
                pred[f, j, c] = acc

    indicator = np.zeros((T, J), dtype=bool)
    for f in masked_frames:
        indicator[f, :] = True
    for f in visible_frames:
        for j in masked_joints[f]:
            indicator[f, j] = True
    return masked_mse_reference(pred, coords, indicator, loss_on=loss_on)


def adam_reference(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                   lr: float, b1: float, b2: float, eps: float, wd: float):
    """One Adam step with bias correction and decoupled weight decay, scalar form."""
    t = step + 1
    p2, m2, v2 = p.copy(), m.copy(), v.copy()
    for i in range(len(p)):
        m2[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v2[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        mhat = m2[i] / (1.0 - b1**t)
        vhat = v2[i] / (1.0 - b2**t)
        p2[i] = p[i] - lr * (mhat / (math.sqrt(vhat) + eps) + wd * p[i])
    return p2, m2, v2


def finite_diff_grad(loss_fn, params_flat: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences (L(p+h*e_i) - L(p-h*e_i)) / 2h per coordinate."""
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    base = np.asarray(params_flat, dtype=np.float64).copy()
    grad = np.zeros_like(base)
    for i in range(len(base)):
        saved = base[i]
        base[i] = saved + h
        hi = loss_fn(base)
        base[i] = saved - h
        lo = loss_fn(base)
        base[i] = saved
        grad[i] = (hi - lo) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class FinDiffReport:
    """Per-tensor and global agreement between analytic and numeric gradients."""

    per_tensor: dict[str, float]
    global_max: float
    failing: tuple[str, int] | None


def compare_gradients(analytic: np.ndarray, numeric: np.ndarray,
                      layout: list[tuple[str, int, int]],
                      rel_tol: float = 1e-4, abs_floor: float = 1e-8) -> FinDiffReport:
    """Relative error per coordinate; magnitudes below ``abs_floor`` compare absolutely."""
    per_tensor: dict[str, float] = {}
    global_max = 0.0
    failing = None
    for name, start, stop in layout:
        worst = 0.0
        for i in range(start, stop):
            a, n = float(analytic[i]), float(numeric[i])
            if abs(a) + abs(n) < abs_floor:
                err = abs(a - n)
            else:
                err = abs(a - n) / max(abs(a), abs(n))
            if err > worst:
                worst = err
            if err > rel_tol and failing is None:
                failing = (name, i - start)
        per_tensor[name] = worst
        global_max = max(global_max, worst)
    return FinDiffReport(per_tensor=per_tensor, global_max=global_max, failing=failing)
