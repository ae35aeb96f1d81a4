"""Noise-predicting and displacement-refining point networks.

Both networks share one backbone: a set-abstraction (SA) encoder on the
noisy/coarse branch, an SA encoder on the sparse condition branch, feature
transfer (FT) from condition to main branch at every level (including the
input level), and a feature-propagation (FP) decoder back to full
resolution.  Arrays are batched: points are (B, N, 3), features (B, N, D).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry as geo
from . import metrics, nn
from .nn import ParamStore, Tensor

IN_FEATS = 4  # xyz + polarity


@dataclass(frozen=True)
class NetworkConfig:
    n_points: int = 256
    n_cond: int = 64
    levels: int = 3
    widths: tuple = (32, 64, 128)
    sa_points: tuple | None = None
    cond_points: tuple | None = None
    radii: tuple = (0.15, 0.3, 0.6)
    input_radius: float = 0.15
    t_scale: float = 1.5
    max_k: int = 16
    step_embed_dim: int = 64
    use_ball_query: bool = False
    knn_k: int = 3
    head_hidden: int = 64

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        for name in ("widths", "radii"):
            if len(getattr(self, name)) != self.levels:
                raise ValueError(f"{name} needs one entry per level")
        sa = self.sa_points or tuple(max(1, self.n_points >> (l + 1)) for l in range(self.levels))
        cp = self.cond_points or tuple(max(1, self.n_cond >> (l + 1)) for l in range(self.levels))
        object.__setattr__(self, "sa_points", tuple(sa))
        object.__setattr__(self, "cond_points", tuple(cp))
        for name, counts, top in (("sa_points", sa, self.n_points), ("cond_points", cp, self.n_cond)):
            if len(counts) != self.levels:
                raise ValueError(f"{name} needs one entry per level")
            if counts[0] > top or any(b >= a for a, b in zip(counts[:-1], counts[1:])):
                raise ValueError(f"{name} must be strictly decreasing and not exceed the input size")
        if self.step_embed_dim % 2:
            raise ValueError("step_embed_dim must be even")

    def cuboid(self, level: int) -> geo.CuboidSpec:
        r = self.input_radius if level == 0 else self.radii[level - 1]
        return geo.CuboidSpec(r, self.t_scale, self.max_k)

    def ablated(self, use_ball_query: bool = True) -> NetworkConfig:
        return replace(self, use_ball_query=use_ball_query)


def group(cfg: NetworkConfig, points: np.ndarray, centers: np.ndarray, level: int):
    spec = cfg.cuboid(level)
    if cfg.use_ball_query:
        idx, mask = geo.group_ball(points, centers, spec.r, spec.max_k)
        scale = np.full(3, spec.r)
    else:
        idx, mask = geo.group_cuboid(points, centers, spec)
        scale = spec.half_extents
    return idx, mask, scale


# parameters ---------------------------------------------------------------


def init_params(cfg: NetworkConfig, seed=0, kind: str = "edn", dtype=np.float32) -> ParamStore:
    """Fresh parameters; the output head is zero-initialised."""
    if kind not in ("edn", "ern"):
        raise ValueError(f"unknown network kind {kind!r}")
    rng = np.random.default_rng(seed)
    p = ParamStore(dtype)
    w = cfg.widths
    step = kind == "edn"
    if step:
        nn.init_mlp(p, "step.mlp", [cfg.step_embed_dim, cfg.step_embed_dim, cfg.step_embed_dim], rng)
    # condition encoder
    c_in = IN_FEATS
    for l in range(cfg.levels):
        nn.init_mlp(p, f"csa{l + 1}.mlp", [3 + c_in, w[l], w[l]], rng)
        nn.init_attention(p, f"csa{l + 1}.att", w[l], rng)
        c_in = w[l]
    cond_w = [IN_FEATS] + list(w)
    # main encoder with transfer at every level
    main_w = []
    d = IN_FEATS
    for l in range(cfg.levels + 1):
        if l > 0:
            nn.init_mlp(p, f"sa{l}.mlp", [3 + d, w[l - 1], w[l - 1]], rng)
            nn.init_attention(p, f"sa{l}.att", w[l - 1], rng)
            if step:
                nn.init_dense(p, f"sa{l}.step", cfg.step_embed_dim, w[l - 1], rng)
            d = w[l - 1]
        ft_w = w[max(l - 1, 0)]
        nn.init_mlp(p, f"ft{l}.mlp", [3 + cond_w[l], ft_w, ft_w], rng)
        nn.init_attention(p, f"ft{l}.att", ft_w, rng)
        d = d + ft_w
        main_w.append(d)
    # decoder
    h = main_w[-1]
    for l in range(cfg.levels, 0, -1):
        out_w = w[l - 2] if l >= 2 else w[0]
        nn.init_mlp(p, f"fp{l}.mlp", [h + main_w[l - 1], out_w, out_w], rng)
        nn.init_dense(p, f"fp{l}.gate", out_w, out_w, rng)
        if step:
            nn.init_dense(p, f"fp{l}.step", cfg.step_embed_dim, out_w, rng)
        h = out_w
    nn.init_dense(p, "head.0", h, cfg.head_hidden, rng)
    nn.init_dense(p, "head.1", cfg.head_hidden, 4 if step else 3, rng, zero=True)
    return p


# blocks -------------------------------------------------------------------


def set_abstraction(params: ParamStore, name: str, cfg: NetworkConfig, level: int,
                    points: np.ndarray, feats, n_out: int, step=None, start=None):
    """Subsample ``n_out`` centers by FPS and aggregate their neighbourhoods.

    Returns (center indices, center points, center features).
    """
    b, m, _ = points.shape
    if n_out > m:
        raise ValueError(f"cannot abstract {m} points into {n_out}")
    if start is None:
        start = geo.batch_centroid_nearest(points)
    sel = geo.batch_fps(points, n_out, start)
    centers = geo.gather_points(points, sel)
    idx, mask, scale = group(cfg, points, centers, level)
    offs = (geo.gather_points(points, idx) - centers[:, :, None, :]) / scale
    x = nn.concat([offs.astype(params.dtype), nn.gather(nn.as_tensor(feats), idx)])
    hidden = nn.mlp(params, f"{name}.mlp", x, 2)
    out = nn.attention_aggregate(params, f"{name}.att", hidden, mask)
    if step is not None:
        out = nn.add(out, nn.reshape(nn.dense(params, f"{name}.step", step), (b, 1, -1)))
    return sel, centers, out


def feature_transfer(params: ParamStore, name: str, cfg: NetworkConfig, level: int,
                     points: np.ndarray, cond_points: np.ndarray, cond_feats):
    """Fusion vector per main-branch point gathered from the condition branch."""
    if cond_points.shape[1] == 0:
        raise ValueError("empty condition branch")
    idx, mask, scale = group(cfg, cond_points, points, level)
    offs = (geo.gather_points(cond_points, idx) - points[:, :, None, :]) / scale
    x = nn.concat([offs.astype(params.dtype), nn.gather(nn.as_tensor(cond_feats), idx)])
    hidden = nn.mlp(params, f"{name}.mlp", x, 2)
    return nn.attention_aggregate(params, f"{name}.att", hidden, mask)


def interpolation_weights(coarse: np.ndarray, fine: np.ndarray, k: int):
    """Inverse-distance weights over the k nearest coarse points of each fine point."""
    k = min(k, coarse.shape[1])
    idx, d = geo.batch_knn(coarse, fine, k)
    w = 1.0 / (d + 1e-8)
    return idx, w / w.sum(axis=-1, keepdims=True)


def feature_propagation(params: ParamStore, name: str, cfg: NetworkConfig,
                        coarse: np.ndarray, coarse_feats, fine: np.ndarray, skip, step=None):
    if coarse.shape[1] == 0:
        raise ValueError("empty coarse set")
    idx, w = interpolation_weights(coarse, fine, cfg.knn_k)
    interp = nn.tsum(nn.mul(nn.gather(nn.as_tensor(coarse_feats), idx), w[..., None].astype(params.dtype)), axis=-2)
    x = nn.concat([interp, skip]) if skip is not None else interp
    hidden = nn.mlp(params, f"{name}.mlp", x, 2)
    hidden = nn.mul(hidden, nn.sigmoid(nn.dense(params, f"{name}.gate", hidden)))
    if step is not None:
        b = coarse.shape[0]
        hidden = nn.add(hidden, nn.reshape(nn.dense(params, f"{name}.step", step), (b, 1, -1)))
    return hidden


# backbone -----------------------------------------------------------------


@dataclass
class EncodedCondition:
    points: list = field(default_factory=list)
    feats: list = field(default_factory=list)


def _input_feats(points: np.ndarray, pol: np.ndarray, dtype) -> np.ndarray:
    return np.concatenate([points, pol[..., None]], axis=-1).astype(dtype)


def encode_condition(params: ParamStore, cfg: NetworkConfig, cond: np.ndarray, cond_pol: np.ndarray):
    """Condition-branch pyramid; independent of the diffusion step."""
    if cond.ndim != 3 or cond.shape[-1] != 3:
        raise ValueError(f"condition must be (B, N, 3), got {cond.shape}")
    enc = EncodedCondition([cond], [nn.as_tensor(_input_feats(cond, cond_pol, params.dtype))])
    pts, feats = cond, enc.feats[0]
    for l in range(cfg.levels):
        _, pts, feats = set_abstraction(params, f"csa{l + 1}", cfg, l + 1, pts, feats, cfg.cond_points[l])
        enc.points.append(pts)
        enc.feats.append(feats)
    return enc


def step_features(params: ParamStore, cfg: NetworkConfig, t) -> Tensor:
    emb = nn.sinusoidal_step_embedding(np.asarray(t), cfg.step_embed_dim).astype(params.dtype)
    return nn.mlp(params, "step.mlp", emb, 2)


def backbone(params: ParamStore, cfg: NetworkConfig, points: np.ndarray, pol: np.ndarray,
             enc: EncodedCondition, step=None) -> Tensor:
    if points.ndim != 3 or points.shape[-1] != 3:
        raise ValueError(f"points must be (B, N, 3), got {points.shape}")
    if points.shape[0] != enc.points[0].shape[0]:
        raise ValueError("batch size mismatch between points and condition")
    if points.shape[1] < cfg.sa_points[0]:
        raise ValueError(f"{points.shape[1]} points is fewer than the first SA level needs")
    pts = [points]
    feats = [nn.concat([nn.as_tensor(_input_feats(points, pol, params.dtype)),
                        feature_transfer(params, "ft0", cfg, 0, points, enc.points[0], enc.feats[0])])]
    for l in range(1, cfg.levels + 1):
        _, p, f = set_abstraction(params, f"sa{l}", cfg, l, pts[-1], feats[-1], cfg.sa_points[l - 1], step)
        f = nn.concat([f, feature_transfer(params, f"ft{l}", cfg, l, p, enc.points[l], enc.feats[l])])
        pts.append(p)
        feats.append(f)
    h = feats[-1]
    for l in range(cfg.levels, 0, -1):
        h = feature_propagation(params, f"fp{l}", cfg, pts[l], h, pts[l - 1], feats[l - 1], step)
    return nn.dense(params, "head.1", nn.leaky_relu(nn.dense(params, "head.0", h)))


def edn_forward(params: ParamStore, cfg: NetworkConfig, noisy: np.ndarray, pol: np.ndarray,
                cond, cond_pol=None, t=None):
    """Predicted coordinate noise (B,N,3) and polarity logits (B,N).

    ``cond`` is either condition points (B,Nc,3) with ``cond_pol`` or an
    ``EncodedCondition`` reused across sampling steps.
    """
    enc = cond if isinstance(cond, EncodedCondition) else encode_condition(params, cfg, cond, cond_pol)
    t = np.broadcast_to(np.asarray(t), (noisy.shape[0],))
    if np.any(t < 0):
        raise ValueError("diffusion step must be non-negative")
    out = backbone(params, cfg, noisy, pol, enc, step_features(params, cfg, t))
    noise = nn.take_last(out, 0, 3)
    logit = nn.reshape(nn.take_last(out, 3, 4), out.data.shape[:-1])
    return noise, logit


def ern_forward(params: ParamStore, cfg: NetworkConfig, coarse: np.ndarray, coarse_pol: np.ndarray,
                cond, cond_pol=None):
    """Refined coordinates: coarse + predicted displacement, clamped to [-1, 1]."""
    enc = cond if isinstance(cond, EncodedCondition) else encode_condition(params, cfg, cond, cond_pol)
    disp = backbone(params, cfg, coarse, coarse_pol, enc, None)
    moved = nn.add(nn.as_tensor(coarse.astype(params.dtype)), disp)
    return nn.clamp_unit(moved)


def chamfer_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Batch-mean Chamfer distance between predicted (B,N,3) and target (B,M,3) clouds."""
    x = pred.data.astype(np.float64)
    b = x.shape[0]
    vals = np.array([metrics.chamfer(x[i], gt[i]) for i in range(b)])
    grad = np.stack([metrics.chamfer_gradient(x[i], gt[i]) for i in range(b)]) / b

    def back(g):
        nn._accum(pred, (g * grad).astype(pred.data.dtype))

    return Tensor(np.asarray(vals.mean(), dtype=pred.data.dtype), (pred,), back)
