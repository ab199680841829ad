"""A small encoder-decoder segmentation network with manual backprop.

Architecture: L encoder stages (two 3x3 convs + tanh each, 2x average-pool
between stages), a bottleneck block, and a mirrored decoder with nearest
upsampling and skip concatenation. Four heads:

  - seg head: 1x1 conv to K logit maps;
  - dense representation head: two 1x1 convs with tanh, per-pixel L2 norm;
  - global projector: two-layer MLP on the pooled bottleneck, L2 norm;
  - local projector: two-layer MLP on grid-pooled decoder cells, L2 norm;
  - a shared two-layer predictor applied to the projector outputs.

Everything runs per sample (one GEMM per conv per sample), which keeps each
sample's outputs bitwise independent of the rest of the batch. tanh is the
only nonlinearity, so finite-difference checks stay clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream


class ShapeMismatchError(ValueError):
    """Input or gradient shape incompatible with the network."""


class NonFiniteGradientError(ArithmeticError):
    """An optimizer step received NaN/Inf gradients."""


@dataclass(frozen=True)
class ArchitectureConfig:
    """Static shape description of the network.

    input_mean/input_scale standardize images on entry (identity by
    default); with raw intensities in [0, 1] the tanh trunk barely sees the
    contrast, so training configs set them to the dataset profile.
    """

    in_channels: int = 1
    base_width: int = 16
    depth: int = 3
    num_classes: int = 4
    latent_dim: int = 128
    local_grid: int = 4
    input_mean: float = 0.0
    input_scale: float = 1.0

    def __post_init__(self):
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")

    def stage_width(self, level: int) -> int:
        return self.base_width * (2 ** level)

    @property
    def bottleneck_width(self) -> int:
        return self.base_width * (2 ** self.depth)


@dataclass
class SegmentationNetwork:
    """Named parameter store plus its architecture description."""

    arch: ArchitectureConfig
    params: dict
    init_seed: int

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class HeadOutputs:
    """Batched head outputs; all embedding rows are unit-norm."""

    v_global: np.ndarray   # B x d
    v_local: np.ndarray    # B x G^2 x d
    w_global: np.ndarray   # B x d
    w_local: np.ndarray    # B x G^2 x d
    dense_reps: np.ndarray  # B x d x H x W


@dataclass
class StudentTeacher:
    """EMA-coupled parameter pair; structures always match."""

    student: SegmentationNetwork
    teacher: SegmentationNetwork
    ema_decay: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        s, t = self.student.params, self.teacher.params
        if set(s) != set(t) or any(s[k].shape != t[k].shape for k in s):
            raise ShapeMismatchError("student/teacher parameter sets differ")


def _param_shapes(arch: ArchitectureConfig) -> dict:
    shapes = {}
    c_in = arch.in_channels
    for l in range(arch.depth):
        w = arch.stage_width(l)
        shapes[f"enc{l}_c1_w"] = (w, c_in, 3, 3)
        shapes[f"enc{l}_c1_b"] = (w,)
        shapes[f"enc{l}_c2_w"] = (w, w, 3, 3)
        shapes[f"enc{l}_c2_b"] = (w,)
        c_in = w
    wb = arch.bottleneck_width
    shapes["bott_c1_w"] = (wb, c_in, 3, 3)
    shapes["bott_c1_b"] = (wb,)
    shapes["bott_c2_w"] = (wb, wb, 3, 3)
    shapes["bott_c2_b"] = (wb,)
    for l in reversed(range(arch.depth)):
        w = arch.stage_width(l)
        up_w = arch.stage_width(l + 1) if l + 1 < arch.depth else wb
        shapes[f"dec{l}_c1_w"] = (w, up_w + w, 3, 3)
        shapes[f"dec{l}_c1_b"] = (w,)
        shapes[f"dec{l}_c2_w"] = (w, w, 3, 3)
        shapes[f"dec{l}_c2_b"] = (w,)
    w0 = arch.base_width
    d = arch.latent_dim
    shapes["seg_w"] = (arch.num_classes, w0)
    shapes["seg_b"] = (arch.num_classes,)
    shapes["rep1_w"] = (d, w0)
    shapes["rep1_b"] = (d,)
    shapes["rep2_w"] = (d, d)
    shapes["rep2_b"] = (d,)
    shapes["glob1_w"] = (d, wb)
    shapes["glob1_b"] = (d,)
    shapes["glob2_w"] = (d, d)
    shapes["glob2_b"] = (d,)
    shapes["loc1_w"] = (d, w0)
    shapes["loc1_b"] = (d,)
    shapes["loc2_w"] = (d, d)
    shapes["loc2_b"] = (d,)
    shapes["pred1_w"] = (d, d)
    shapes["pred1_b"] = (d,)
    shapes["pred2_w"] = (d, d)
    shapes["pred2_b"] = (d,)
    return shapes


def init_network(arch: ArchitectureConfig, seed: int) -> SegmentationNetwork:
    """Glorot-normal weights, zero biases, deterministic per (seed, name)."""
    stream = RngStream(seed)
    params = {}
    for name, shape in _param_shapes(arch).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 4:
            fan_in = shape[1] * 9
            fan_out = shape[0] * 9
        else:
            fan_in, fan_out = shape[1], shape[0]
        std = np.sqrt(2.0 / (fan_in + fan_out))
        gen = stream.substream("init", name).generator()
        params[name] = gen.standard_normal(shape) * std
    return SegmentationNetwork(arch=arch, params=params, init_seed=int(seed))


# ---------------------------------------------------------------- layers


def _conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution on (C, H, W); returns output and cache."""
    c_in, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c_in, 3, 3, H, W))
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[:, dy:dy + H, dx:dx + W]
    cols2 = cols.reshape(c_in * 9, H * W)
    w2 = w.reshape(w.shape[0], -1)
    out = (w2 @ cols2 + b[:, None]).reshape(w.shape[0], H, W)
    return out, (cols2, x.shape)


def _conv3x3_backward(grad_out, w, cache):
    cols2, x_shape = cache
    c_in, H, W = x_shape
    c_out = w.shape[0]
    g2 = grad_out.reshape(c_out, H * W)
    w2 = w.reshape(c_out, -1)
    grad_w = (g2 @ cols2.T).reshape(w.shape)
    grad_b = g2.sum(axis=1)
    grad_cols = (w2.T @ g2).reshape(c_in, 3, 3, H, W)
    grad_xp = np.zeros((c_in, H + 2, W + 2))
    for dy in range(3):
        for dx in range(3):
            grad_xp[:, dy:dy + H, dx:dx + W] += grad_cols[:, dy, dx]
    return grad_xp[:, 1:-1, 1:-1], grad_w, grad_b


def _avgpool2_forward(x):
    c, H, W = x.shape
    return x.reshape(c, H // 2, 2, W // 2, 2).mean(axis=(2, 4))


def _avgpool2_backward(grad_out):
    c, h, w = grad_out.shape
    g = np.repeat(np.repeat(grad_out, 2, axis=1), 2, axis=2)
    return g / 4.0


def _upsample2_forward(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample2_backward(grad_out):
    c, H, W = grad_out.shape
    return grad_out.reshape(c, H // 2, 2, W // 2, 2).sum(axis=(2, 4))


def _gridpool_forward(x, grid):
    c, H, W = x.shape
    ph, pw = H // grid, W // grid
    pooled = x.reshape(c, grid, ph, grid, pw).mean(axis=(2, 4))  # c x G x G
    return pooled.reshape(c, grid * grid).T  # G^2 x c


def _gridpool_backward(grad_cells, c, H, W, grid):
    ph, pw = H // grid, W // grid
    g = grad_cells.T.reshape(c, grid, 1, grid, 1) / (ph * pw)
    return np.broadcast_to(g, (c, grid, ph, grid, pw)).reshape(c, H, W)


def _normalize_rows_forward(v):
    """Row-normalize (n, d) or a single (d,) vector; cache for backward."""
    single = v.ndim == 1
    m = v[None, :] if single else v
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    out = m / norms
    if single:
        return out[0], (out, norms, True)
    return out, (out, norms, False)


def _normalize_rows_backward(grad_out, cache):
    out, norms, single = cache
    g = grad_out[None, :] if single else grad_out
    radial = np.sum(g * out, axis=1, keepdims=True)
    grad_in = (g - radial * out) / norms
    return grad_in[0] if single else grad_in


# ------------------------------------------------------------ full passes


def forward_single(net: SegmentationNetwork, image, with_cache: bool = False):
    """One sample through the network.

    Args:
        image: (in_channels, H, W) with H, W divisible by 2^depth.

    Returns:
        (logits (K,H,W), heads dict, cache or None). Head keys: v_global,
        v_local, w_global, w_local, dense_reps.
    """
    arch = net.arch
    p = net.params
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != arch.in_channels:
        raise ShapeMismatchError(f"expected ({arch.in_channels}, H, W) input")
    H, W = x.shape[1:]
    if H % (2 ** arch.depth) or W % (2 ** arch.depth):
        raise ShapeMismatchError("input dims must be divisible by 2^depth")
    if H % arch.local_grid or W % arch.local_grid:
        raise ShapeMismatchError("input dims must be divisible by the local grid")

    cache = {"H": H, "W": W} if with_cache else None
    h = (x - arch.input_mean) / arch.input_scale
    skips = []
    for l in range(arch.depth):
        for j in (1, 2):
            out, cc = _conv3x3_forward(h, p[f"enc{l}_c{j}_w"], p[f"enc{l}_c{j}_b"])
            h = np.tanh(out)
            if with_cache:
                cache[f"enc{l}_c{j}"] = (cc, h)
        skips.append(h)
        h = _avgpool2_forward(h)
    for j in (1, 2):
        out, cc = _conv3x3_forward(h, p[f"bott_c{j}_w"], p[f"bott_c{j}_b"])
        h = np.tanh(out)
        if with_cache:
            cache[f"bott_c{j}"] = (cc, h)
    bott = h
    for l in reversed(range(arch.depth)):
        h = _upsample2_forward(h)
        h = np.concatenate([h, skips[l]], axis=0)
        if with_cache:
            cache[f"dec{l}_split"] = h.shape[0] - skips[l].shape[0]
        for j in (1, 2):
            out, cc = _conv3x3_forward(h, p[f"dec{l}_c{j}_w"], p[f"dec{l}_c{j}_b"])
            h = np.tanh(out)
            if with_cache:
                cache[f"dec{l}_c{j}"] = (cc, h)
    dec = h  # (w0, H, W)

    logits = np.einsum("kc,chw->khw", p["seg_w"], dec) + p["seg_b"][:, None, None]

    # dense representation head (per-pixel two-layer 1x1)
    dec2 = dec.reshape(arch.base_width, H * W).T           # HW x w0
    r1 = np.tanh(dec2 @ p["rep1_w"].T + p["rep1_b"])       # HW x d
    r2 = r1 @ p["rep2_w"].T + p["rep2_b"]                  # HW x d
    dense, dense_nc = _normalize_rows_forward(r2)

    # global projector on pooled bottleneck
    gpool = bott.mean(axis=(1, 2))                         # (wb,)
    g1 = np.tanh(p["glob1_w"] @ gpool + p["glob1_b"])
    g2 = p["glob2_w"] @ g1 + p["glob2_b"]
    v_global, vg_nc = _normalize_rows_forward(g2)

    # local projector on grid-pooled decoder cells
    cells = _gridpool_forward(dec, arch.local_grid)        # G^2 x w0
    l1 = np.tanh(cells @ p["loc1_w"].T + p["loc1_b"])
    l2 = l1 @ p["loc2_w"].T + p["loc2_b"]
    v_local, vl_nc = _normalize_rows_forward(l2)

    # shared predictor
    pg1 = np.tanh(p["pred1_w"] @ v_global + p["pred1_b"])
    pg2 = p["pred2_w"] @ pg1 + p["pred2_b"]
    w_global, wg_nc = _normalize_rows_forward(pg2)
    pl1 = np.tanh(v_local @ p["pred1_w"].T + p["pred1_b"])
    pl2 = pl1 @ p["pred2_w"].T + p["pred2_b"]
    w_local, wl_nc = _normalize_rows_forward(pl2)

    heads = {
        "v_global": v_global,
        "v_local": v_local,
        "w_global": w_global,
        "w_local": w_local,
        "dense_reps": dense.T.reshape(arch.latent_dim, H, W),
    }
    if with_cache:
        cache.update(
            dec=dec, dec2=dec2, r1=r1, dense_nc=dense_nc,
            bott=bott, gpool=gpool, g1=g1, vg_nc=vg_nc,
            cells=cells, l1=l1, vl_nc=vl_nc,
            v_global=v_global, v_local=v_local,
            pg1=pg1, wg_nc=wg_nc, pl1=pl1, wl_nc=wl_nc,
        )
    return logits, heads, cache


def forward(net: SegmentationNetwork, images) -> tuple:
    """Batched forward: (B, C, H, W) -> (logits (B,K,H,W), HeadOutputs)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeMismatchError("expected a (B, C, H, W) batch")
    logits, vg, vl, wg, wl, dr = [], [], [], [], [], []
    for b in range(images.shape[0]):
        lg, heads, _ = forward_single(net, images[b])
        logits.append(lg)
        vg.append(heads["v_global"])
        vl.append(heads["v_local"])
        wg.append(heads["w_global"])
        wl.append(heads["w_local"])
        dr.append(heads["dense_reps"])
    return np.stack(logits), HeadOutputs(
        v_global=np.stack(vg),
        v_local=np.stack(vl),
        w_global=np.stack(wg),
        w_local=np.stack(wl),
        dense_reps=np.stack(dr),
    )


def backward_single(net: SegmentationNetwork, cache, out_grads: dict) -> dict:
    """Backpropagate head/logit gradients to every parameter for one sample.

    out_grads may contain any subset of: logits (K,H,W), dense_reps (d,H,W),
    v_global (d,), v_local (G^2,d), w_global (d,), w_local (G^2,d).
    Returns a dict of parameter gradients (missing inputs mean zero).
    """
    arch = net.arch
    p = net.params
    H, W = cache["H"], cache["W"]
    d = arch.latent_dim
    G2 = arch.local_grid ** 2
    grads = {name: np.zeros_like(val) for name, val in p.items()}

    # --- predictor paths back to projector outputs
    grad_v_global = np.asarray(out_grads.get("v_global", np.zeros(d)), dtype=float).copy()
    grad_v_local = np.asarray(out_grads.get("v_local", np.zeros((G2, d))), dtype=float).copy()

    if "w_global" in out_grads:
        g = _normalize_rows_backward(out_grads["w_global"], cache["wg_nc"])
        grads["pred2_w"] += np.outer(g, cache["pg1"])
        grads["pred2_b"] += g
        g = (p["pred2_w"].T @ g) * (1.0 - cache["pg1"] ** 2)
        grads["pred1_w"] += np.outer(g, cache["v_global"])
        grads["pred1_b"] += g
        grad_v_global += p["pred1_w"].T @ g
    if "w_local" in out_grads:
        g = _normalize_rows_backward(out_grads["w_local"], cache["wl_nc"])
        grads["pred2_w"] += g.T @ cache["pl1"]
        grads["pred2_b"] += g.sum(axis=0)
        g = (g @ p["pred2_w"]) * (1.0 - cache["pl1"] ** 2)
        grads["pred1_w"] += g.T @ cache["v_local"]
        grads["pred1_b"] += g.sum(axis=0)
        grad_v_local += g @ p["pred1_w"]

    # --- global projector back to bottleneck
    grad_bott = np.zeros_like(cache["bott"])
    if np.any(grad_v_global):
        g = _normalize_rows_backward(grad_v_global, cache["vg_nc"])
        grads["glob2_w"] += np.outer(g, cache["g1"])
        grads["glob2_b"] += g
        g = (p["glob2_w"].T @ g) * (1.0 - cache["g1"] ** 2)
        grads["glob1_w"] += np.outer(g, cache["gpool"])
        grads["glob1_b"] += g
        gpool_grad = p["glob1_w"].T @ g
        hb, wb_ = cache["bott"].shape[1:]
        grad_bott += gpool_grad[:, None, None] / (hb * wb_)

    # --- local projector back to decoder features
    grad_dec = np.zeros((arch.base_width, H, W))
    if np.any(grad_v_local):
        g = _normalize_rows_backward(grad_v_local, cache["vl_nc"])
        grads["loc2_w"] += g.T @ cache["l1"]
        grads["loc2_b"] += g.sum(axis=0)
        g = (g @ p["loc2_w"]) * (1.0 - cache["l1"] ** 2)
        grads["loc1_w"] += g.T @ cache["cells"]
        grads["loc1_b"] += g.sum(axis=0)
        grad_cells = g @ p["loc1_w"]
        grad_dec += _gridpool_backward(grad_cells, arch.base_width, H, W, arch.local_grid)

    # --- dense representation head back to decoder features
    if "dense_reps" in out_grads:
        g = out_grads["dense_reps"].reshape(d, H * W).T    # HW x d
        g = _normalize_rows_backward(g, cache["dense_nc"])
        grads["rep2_w"] += g.T @ cache["r1"]
        grads["rep2_b"] += g.sum(axis=0)
        g = (g @ p["rep2_w"]) * (1.0 - cache["r1"] ** 2)
        grads["rep1_w"] += g.T @ cache["dec2"]
        grads["rep1_b"] += g.sum(axis=0)
        grad_dec += (g @ p["rep1_w"]).T.reshape(arch.base_width, H, W)

    # --- segmentation head
    if "logits" in out_grads:
        gl = out_grads["logits"]
        grads["seg_w"] += np.einsum("khw,chw->kc", gl, cache["dec"])
        grads["seg_b"] += gl.sum(axis=(1, 2))
        grad_dec += np.einsum("kc,khw->chw", p["seg_w"], gl)

    # --- decoder chain
    g = grad_dec
    for l in range(arch.depth):
        for j in (2, 1):
            cc, out = cache[f"dec{l}_c{j}"]
            g = g * (1.0 - out ** 2)
            g, gw, gb = _conv3x3_backward(g, p[f"dec{l}_c{j}_w"], cc)
            grads[f"dec{l}_c{j}_w"] += gw
            grads[f"dec{l}_c{j}_b"] += gb
        split = cache[f"dec{l}_split"]
        g_up, g_skip = g[:split], g[split:]
        cache[f"skip_grad{l}"] = g_skip
        g = _upsample2_backward(g_up)
    grad_bott += g

    # --- bottleneck
    g = grad_bott
    for j in (2, 1):
        cc, out = cache[f"bott_c{j}"]
        g = g * (1.0 - out ** 2)
        g, gw, gb = _conv3x3_backward(g, p[f"bott_c{j}_w"], cc)
        grads[f"bott_c{j}_w"] += gw
        grads[f"bott_c{j}_b"] += gb

    # --- encoder chain (reverse)
    for l in reversed(range(arch.depth)):
        g = _avgpool2_backward(g)
        g = g + cache[f"skip_grad{l}"]
        for j in (2, 1):
            cc, out = cache[f"enc{l}_c{j}"]
            g = g * (1.0 - out ** 2)
            g, gw, gb = _conv3x3_backward(g, p[f"enc{l}_c{j}_w"], cc)
            grads[f"enc{l}_c{j}_w"] += gw
            grads[f"enc{l}_c{j}_b"] += gb
    return grads


def ema_update(pair: StudentTeacher) -> StudentTeacher:
    """teacher <- m * teacher + (1 - m) * student, parameter-wise."""
    m = pair.ema_decay
    t, s = pair.teacher.params, pair.student.params
    for name in t:
        t[name] = m * t[name] + (1.0 - m) * s[name]
    return pair


@dataclass
class SgdState:
    """Momentum buffers, one per parameter, created lazily at zero."""

    velocities: dict = field(default_factory=dict)


def sgd_step(
    net: SegmentationNetwork,
    grads: dict,
    state: SgdState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> SegmentationNetwork:
    """Classical momentum SGD: v <- mu v + (g + wd p); p <- p - lr v."""
    for name, g in grads.items():
        if name not in net.params:
            raise ShapeMismatchError(f"unknown parameter {name!r}")
        pval = net.params[name]
        if g.shape != pval.shape:
            raise ShapeMismatchError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}")
        eff = g + weight_decay * pval
        v = state.velocities.get(name)
        v = eff if v is None else momentum * v + eff
        state.velocities[name] = v
        net.params[name] = pval - lr * v
    return net
