"""End-to-end orchestration: data, two-stage training, completion, evaluation, rendering.

Everything operates on ``Pair`` lists in normalized space.  On disk a pair
set is two block caches (``dense.evcl`` and ``sparse.evcl``) keyed by
sample id; the sparse slice is normalized with its dense slice's anchor.
Logs are one ``key=value`` record per line on the ``evcomplete`` logger.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import io, metrics, nn
from .datagen import CaptureSpec, Pair, build_pairs, synthetic_pairs
from .denoiser import NetworkConfig, chamfer_loss, encode_condition, ern_forward, init_params
from .diffusion import ancestral_sample, fast_sample, make_schedule, training_loss
from .events import EventCloud, RawEventSlice, SensorGeometry, TimeAnchor, denormalize, normalize, slice_stream

log = logging.getLogger("evcomplete")

BASELINE_COPIES = 4
BASELINE_SIGMA = 0.05
CD_SCALE = 1e3
EMD_SCALE = 1e2


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class Divergence(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    width: int = 128
    height: int = 128
    n_dense: int = 256
    n_sparse: int = 64
    n_pairs: int = 2000
    n_test: int = 200
    scene_duration: int = 200_000
    max_objects: int = 1
    threshold: float = 0.2
    frame_dt: int = 500
    # network
    levels: int = 3
    widths: tuple = (32, 64, 128)
    radii: tuple = (0.15, 0.3, 0.6)
    input_radius: float = 0.15
    t_scale: float = 1.5
    max_k: int = 16
    step_embed_dim: int = 64
    head_hidden: int = 64
    knn_k: int = 3
    use_ball_query: bool = False
    # schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # optimization and sampling
    lr: float = 2e-4
    lr_schedule: str = "constant"
    batch: int = 16
    epochs_edn: int = 120
    epochs_ern: int = 30
    ern_pairs: int = 0
    fast_steps: int = 27
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        counts = ("width", "height", "n_dense", "n_sparse", "n_pairs", "scene_duration", "max_objects",
                  "frame_dt", "levels", "max_k", "step_embed_dim", "head_hidden", "knn_k", "T", "batch",
                  "epochs_edn", "epochs_ern", "fast_steps", "threads")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_test < 0 or self.ern_pairs < 0 or self.seed < 0:
            raise ConfigError("n_test, ern_pairs and seed must be >= 0")
        if not self.lr > 0 or not self.threshold > 0:
            raise ConfigError("lr and threshold must be > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be constant or cosine")
        if self.n_sparse >= self.n_dense:
            raise ConfigError("n_sparse must be smaller than n_dense")
        if self.fast_steps > self.T:
            raise ConfigError("fast_steps cannot exceed T")
        try:
            self.network()
            make_schedule(self.T, self.beta_start, self.beta_end)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def network(self) -> NetworkConfig:
        return NetworkConfig(n_points=self.n_dense, n_cond=self.n_sparse, levels=self.levels, widths=self.widths,
                             radii=self.radii, input_radius=self.input_radius, t_scale=self.t_scale,
                             max_k=self.max_k, step_embed_dim=self.step_embed_dim, use_ball_query=self.use_ball_query,
                             knn_k=self.knn_k, head_hidden=self.head_hidden)

    def schedule(self):
        return make_schedule(self.T, self.beta_start, self.beta_end)

    @property
    def geometry(self) -> SensorGeometry:
        return SensorGeometry(self.width, self.height)


def toy_preset(**overrides) -> RunConfig:
    """Desk-scale preset: 20/10 epochs and a narrower network that trains in minutes on one core."""
    base = dict(epochs_edn=20, epochs_ern=10, widths=(16, 32, 64), max_k=8, step_embed_dim=32, lr=1e-3,
                lr_schedule="cosine", ern_pairs=1800)
    base.update(overrides)
    return RunConfig(**base)


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        kind = type(default[0])
        return tuple(kind(v) for v in raw.replace(",", " ").split())
    return type(default)(raw)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Read ``key = value`` lines (``#`` comments) on top of ``base``."""
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    vals = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {no}: unknown key {key!r}")
        try:
            vals[key] = _parse_value(raw, known[key])
        except ValueError as e:
            raise ConfigError(f"line {no}: bad value for {key}: {e}") from e
    return override(base, **vals)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, base)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(map(str, v))
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def override(cfg: RunConfig, **kw) -> RunConfig:
    try:
        return replace(cfg, **kw)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def log_kv(event: str, **kv):
    parts = [f"event={event}"]
    for k, v in kv.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    log.info(" ".join(parts))


# ---------------------------------------------------------------- data


def generate_pairs(cfg: RunConfig) -> list[Pair]:
    capture = CaptureSpec(threshold=cfg.threshold, frame_dt=cfg.frame_dt, ref_jitter=0.5)
    return synthetic_pairs(cfg.n_pairs, cfg.n_dense, cfg.n_sparse, seed=cfg.seed, geometry=cfg.geometry,
                           capture=capture, duration=cfg.scene_duration, max_objects=cfg.max_objects)


def slice_pairs(path, cfg: RunConfig) -> list[Pair]:
    """Dense/sparse pairs from a recorded event file."""
    events, geometry = read_input(path)
    return build_pairs(events, geometry, cfg.n_dense, cfg.n_sparse, seed=cfg.seed)


def read_input(path):
    try:
        return io.read_events(path)
    except (OSError, io.FormatError) as e:
        raise DataError(f"cannot read {path}: {e}") from e


def save_pairs(pairs: list[Pair], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dense, sparse = [], []
    for pr in pairs:
        dense.append((pr.sample_id, denormalize(pr.dense, pr.geometry, pr.anchor).events, pr.geometry))
        sparse.append((pr.sample_id, denormalize(pr.sparse, pr.geometry, pr.anchor).events, pr.geometry))
    io.write_block_cache(out / "dense.evcl", dense)
    io.write_block_cache(out / "sparse.evcl", sparse)
    return out


def load_pairs(data_dir) -> list[Pair]:
    d = Path(data_dir)
    try:
        dense = io.read_block_cache(d / "dense.evcl")
        sparse = io.read_block_cache(d / "sparse.evcl")
    except (OSError, io.FormatError) as e:
        raise DataError(f"cannot read pair caches in {d}: {e}") from e
    missing = [k for k in dense if k not in sparse]
    if missing:
        raise DataError(f"sparse cache lacks ids: {' '.join(missing)}")
    pairs = []
    for sid, (ev, g) in dense.items():
        dcloud, anchor = normalize(RawEventSlice(ev, g))
        sev = sparse[sid][0]
        scloud, _ = normalize(RawEventSlice(sev, g), anchor)
        pairs.append(Pair(scloud, dcloud, anchor, g, sid))
    return pairs


def split_pairs(pairs: list[Pair], cfg: RunConfig, part: str) -> list[Pair]:
    """``train`` keeps all but the last ``n_test`` pairs, ``test`` the rest."""
    cut = max(0, len(pairs) - cfg.n_test)
    if part == "train":
        return pairs[:cut]
    if part == "test":
        return pairs[cut:]
    if part == "all":
        return pairs
    raise ConfigError(f"unknown split {part!r}")


def _stack(pairs: list[Pair]):
    return (np.stack([p.dense.coords for p in pairs]), np.stack([p.dense.polarity for p in pairs]),
            np.stack([p.sparse.coords for p in pairs]), np.stack([p.sparse.polarity for p in pairs]))


def _check_sizes(pairs: list[Pair], cfg: RunConfig):
    if not pairs:
        raise DataError("empty dataset")
    for p in pairs:
        if len(p.dense) != cfg.n_dense or len(p.sparse) != cfg.n_sparse:
            raise DataError(f"{p.sample_id}: expected {cfg.n_dense}/{cfg.n_sparse} events, "
                            f"got {len(p.dense)}/{len(p.sparse)}")


# ---------------------------------------------------------------- training


def save_model(params: nn.ParamStore, cfg: RunConfig, path) -> Path:
    path = Path(path)
    nn.save_checkpoint(params, path)
    path.with_suffix(path.suffix + ".cfg").write_text(dump_config(cfg))
    return path


def load_model(path) -> nn.ParamStore:
    try:
        return nn.load_checkpoint(path)
    except (OSError, nn.CheckpointError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from e


def _train(stage, params, cfg, n, epochs, step_fn, ckpt_path):
    """Shared epoch loop; ``step_fn(idx)`` returns (loss, parts) with grads in ``params``."""
    rng = np.random.default_rng([cfg.seed, 1 if stage == "edn" else 2])
    state = nn.AdamState(lr=cfg.lr)
    good = params.copy()
    history = []
    total = epochs * -(-n // cfg.batch)
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n)
        losses, parts_sum = [], {}
        try:
            for i in range(0, n, cfg.batch):
                if cfg.lr_schedule == "cosine":
                    state.lr = cfg.lr * 0.5 * (1 + np.cos(np.pi * state.step / total))
                loss, parts = step_fn(order[i:i + cfg.batch], rng)
                nn.adam_step(params, params.grads(), state)
                losses.append(loss)
                for k, v in parts.items():
                    parts_sum[k] = parts_sum.get(k, 0.0) + v
        except FloatingPointError as e:
            save_model(good, cfg, ckpt_path)
            log_kv("diverged", stage=stage, epoch=epoch, reason=str(e).replace(" ", "_"))
            raise Divergence(f"{stage} diverged in epoch {epoch}: {e}; kept last good checkpoint") from e
        mean = float(np.mean(losses))
        history.append(mean)
        extra = {k: v / len(losses) for k, v in parts_sum.items()}
        log_kv("epoch", stage=stage, epoch=epoch, loss=mean, **extra, seconds=time.perf_counter() - start)
        good = params.copy()
    save_model(params, cfg, ckpt_path)
    return params, history


def train_edn(pairs: list[Pair], cfg: RunConfig, ckpt_path):
    """Fit the noise predictor; returns (params, per-epoch mean losses)."""
    _check_sizes(pairs, cfg)
    net, sched = cfg.network(), cfg.schedule()
    params = init_params(net, cfg.seed, "edn")
    E, P, C, CP = _stack(pairs)

    def step(idx, rng):
        return training_loss(params, net, E[idx], P[idx], C[idx].astype(np.float32), CP[idx], sched, rng)

    return _train("edn", params, cfg, len(pairs), cfg.epochs_edn, step, ckpt_path)


def _sample_seed(cfg: RunConfig, sample_id: str) -> int:
    return int(np.random.SeedSequence([cfg.seed, *sample_id.encode()]).generate_state(1)[0])


def _batches(n: int, size: int):
    return [np.arange(i, min(n, i + size)) for i in range(0, n, size)]


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


def sample_coarse(edn: nn.ParamStore, cfg: RunConfig, pairs: list[Pair], ancestral: bool = False):
    """Coarse completions (coords (B,N,3), polarity (B,N)) for each pair's sparse input.

    Batches are independent and seeded from the first sample id in the batch,
    so outputs do not depend on the thread count.
    """
    net, sched = cfg.network(), cfg.schedule()
    C, CP = np.stack([p.sparse.coords for p in pairs]), np.stack([p.sparse.polarity for p in pairs])

    def run(idx):
        seed = _sample_seed(cfg, pairs[idx[0]].sample_id)
        if ancestral:
            x, pol, _ = ancestral_sample(edn, net, C[idx], CP[idx], cfg.n_dense, sched, np.random.default_rng(seed))
        else:
            x, pol, _ = fast_sample(edn, net, C[idx], CP[idx], cfg.n_dense, sched, cfg.fast_steps, seed)
        return x, pol

    out = _map(run, _batches(len(pairs), cfg.batch), cfg.threads)
    return np.concatenate([o[0] for o in out]), np.concatenate([o[1] for o in out])


def quantize(coords: np.ndarray, polarity: np.ndarray, pair: Pair) -> EventCloud:
    """Snap a cloud to the pixel/microsecond grid of ``pair``; points come back in event order."""
    sl = denormalize(EventCloud(np.clip(coords, -1, 1), polarity), pair.geometry, pair.anchor)
    return normalize(sl, pair.anchor)[0]


def cache_coarse(edn: nn.ParamStore, cfg: RunConfig, pairs: list[Pair], path) -> Path:
    """Fast-sample every pair and store the quantized coarse events as a block cache."""
    _check_sizes(pairs, cfg)
    x, pol = sample_coarse(edn, cfg, pairs)
    blocks = []
    for i, pr in enumerate(pairs):
        sl = denormalize(EventCloud(x[i], pol[i]), pr.geometry, pr.anchor)
        blocks.append((pr.sample_id, sl.events, pr.geometry))
    io.write_block_cache(path, blocks)
    log_kv("cached", count=len(blocks), path=path)
    return Path(path)


def load_coarse(path, pairs: list[Pair]):
    """Cached coarse clouds aligned with ``pairs``, normalized with each pair's anchor."""
    try:
        cache = io.read_block_cache(path)
    except (OSError, io.FormatError) as e:
        raise DataError(f"cannot read coarse cache {path}: {e}") from e
    missing = [p.sample_id for p in pairs if p.sample_id not in cache]
    if missing:
        raise DataError(f"coarse cache lacks ids: {' '.join(missing)}")
    clouds = [normalize(RawEventSlice(*cache[p.sample_id]), p.anchor)[0] for p in pairs]
    return np.stack([c.coords for c in clouds]), np.stack([c.polarity for c in clouds])


def train_ern(pairs: list[Pair], coarse, cfg: RunConfig, ckpt_path):
    """Fit the refiner on cached coarse clouds; returns (params, history).

    ``history[0]`` is the mean Chamfer distance of the untouched coarse
    clouds (the zero-initialized head leaves them unchanged); the rest are
    per-epoch mean training losses.
    """
    _check_sizes(pairs, cfg)
    X, XP = coarse
    if len(X) != len(pairs):
        raise DataError(f"{len(X)} coarse clouds for {len(pairs)} pairs")
    net = cfg.network()
    params = init_params(net, cfg.seed, "ern")
    E, _, C, CP = _stack(pairs)
    initial = float(np.mean([metrics.chamfer(X[i], E[i]) for i in range(len(X))]))
    log_kv("epoch", stage="ern", epoch=0, loss=initial)

    def step(idx, rng):
        params.zero_grad()
        out = ern_forward(params, net, X[idx].astype(np.float32), XP[idx], C[idx].astype(np.float32), CP[idx])
        loss = chamfer_loss(out, E[idx])
        if not np.isfinite(loss.data):
            raise FloatingPointError("non-finite refinement loss")
        loss.backward()
        return float(loss.data), {}

    params, hist = _train("ern", params, cfg, len(pairs), cfg.epochs_ern, step, ckpt_path)
    return params, [initial] + hist


def refine(ern: nn.ParamStore, cfg: RunConfig, coarse, pairs: list[Pair]) -> np.ndarray:
    net = cfg.network()
    X, XP = coarse
    C, CP = np.stack([p.sparse.coords for p in pairs]), np.stack([p.sparse.polarity for p in pairs])

    def run(idx):
        enc = encode_condition(ern, net, C[idx].astype(ern.dtype), CP[idx])
        return ern_forward(ern, net, X[idx].astype(ern.dtype), XP[idx], enc).data.astype(np.float64)

    return np.concatenate(_map(run, _batches(len(pairs), cfg.batch), cfg.threads))


def complete_pairs(edn, ern, cfg: RunConfig, pairs: list[Pair]):
    """Full inference on pair inputs: returns (quantized coarse, final) EventCloud lists."""
    _check_sizes(pairs, cfg)
    x, pol = sample_coarse(edn, cfg, pairs)
    coarse = [quantize(x[i], pol[i], p) for i, p in enumerate(pairs)]
    X = (np.stack([c.coords for c in coarse]), np.stack([c.polarity for c in coarse]))
    fine = refine(ern, cfg, X, pairs)
    final = [quantize(fine[i], X[1][i], p) for i, p in enumerate(pairs)]
    return coarse, final


def complete_file(input_path, edn, ern, cfg: RunConfig, out_path) -> int:
    """Complete every ``n_sparse``-event slice of a sparse recording; returns the slice count."""
    events, geometry = read_input(input_path)
    if len(events) == 0 or len(events) % cfg.n_sparse:
        raise DataError(f"{input_path}: {len(events)} events is not a multiple of n_sparse={cfg.n_sparse}")
    slices = slice_stream(events, geometry, cfg.n_sparse)
    if len(slices) * cfg.n_sparse != len(events):
        raise DataError(f"{input_path}: a slice has zero duration")
    pairs = []
    for k, sl in enumerate(slices):
        cloud, anchor = normalize(sl)
        # the dense side is a placeholder; only the sparse input and anchor are used
        dummy = EventCloud(np.zeros((cfg.n_dense, 3)), np.ones(cfg.n_dense))
        pairs.append(Pair(cloud, dummy, anchor, geometry, f"in{k}"))
    _, final = complete_pairs(edn, ern, cfg, pairs)
    out = [denormalize(c, geometry, p.anchor).events for c, p in zip(final, pairs)]
    io.write_evcl(out_path, np.concatenate(out), geometry)
    log_kv("completed", slices=len(pairs), events=sum(len(o) for o in out), path=out_path)
    return len(pairs)


# ---------------------------------------------------------------- evaluation


def baseline_cloud(pair: Pair, n_out: int, seed) -> np.ndarray:
    """Sparse input replicated to ``n_out`` points with Gaussian jitter."""
    reps = -(-n_out // len(pair.sparse))
    base = np.tile(pair.sparse.coords, (reps, 1))[:n_out]
    return base + np.random.default_rng(seed).normal(0.0, BASELINE_SIGMA, base.shape)


def emd(a: np.ndarray, b: np.ndarray) -> float:
    try:
        return metrics.emd_exact(a, b)
    except metrics.EMDTooLarge:
        return metrics.emd_approx(a, b)


@dataclass
class Report:
    rows: list[dict]
    means: dict

    def summary(self) -> str:
        lines = [f"samples {len(self.rows)}"]
        for k, v in self.means.items():
            lines.append(f"{k:>14} {v:.4f}")
        return "\n".join(lines)


def score(pred: list[np.ndarray], pairs: list[Pair], cfg: RunConfig, extra: dict | None = None) -> Report:
    """CD x 1e3 and EMD x 1e2 against the dense slice, plus the jittered-copy baseline."""
    rows = []
    for i, (x, p) in enumerate(zip(pred, pairs)):
        gt = p.dense.coords
        base = baseline_cloud(p, len(gt), _sample_seed(cfg, p.sample_id))
        row = {"sample_id": p.sample_id, "cd": CD_SCALE * metrics.chamfer(x, gt), "emd": EMD_SCALE * emd(x, gt),
               "baseline_cd": CD_SCALE * metrics.chamfer(base, gt), "baseline_emd": EMD_SCALE * emd(base, gt)}
        for name, arrs in (extra or {}).items():
            row[f"{name}_cd"] = CD_SCALE * metrics.chamfer(arrs[i], gt)
            row[f"{name}_emd"] = EMD_SCALE * emd(arrs[i], gt)
        rows.append(row)
    keys = [k for k in rows[0] if k != "sample_id"] if rows else []
    return Report(rows, {k: float(np.mean([r[k] for r in rows])) for k in keys})


def evaluate(edn, ern, cfg: RunConfig, pairs: list[Pair]) -> Report:
    coarse, final = complete_pairs(edn, ern, cfg, pairs)
    return score([c.coords for c in final], pairs, cfg, {"coarse": [c.coords for c in coarse]})


def write_report(report: Report, csv_path) -> Path:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(report.rows[0]) if report.rows else ["sample_id"])
        w.writeheader()
        for r in report.rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
    csv_path.with_suffix(".txt").write_text(report.summary() + "\n")
    return csv_path


# ---------------------------------------------------------------- rendering

MID_GRAY = 128


def accumulate(events: np.ndarray, geometry: SensorGeometry) -> np.ndarray:
    """Per-pixel signed polarity sum, shape (H, W)."""
    img = np.zeros((geometry.H, geometry.W), dtype=np.int64)
    sign = events["p"].astype(np.int64) * 2 - 1
    np.add.at(img, (events["y"].astype(np.intp), events["x"].astype(np.intp)), sign)
    return img


def colorize(acc: np.ndarray) -> np.ndarray:
    """Diverging map: gray at zero, red for positive, blue for negative sums."""
    peak = np.abs(acc).max() if acc.size else 0
    v = acc / peak if peak else np.zeros(acc.shape)
    pos, neg = np.clip(v, 0, 1), np.clip(-v, 0, 1)
    r = MID_GRAY + 127 * pos - 96 * neg
    g = MID_GRAY - 96 * pos - 96 * neg
    b = MID_GRAY - 96 * pos + 127 * neg
    return np.rint(np.stack([r, g, b], axis=-1)).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(rgb).tobytes())


def render(events_path, out_path) -> Path:
    events, geometry = read_input(events_path)
    write_ppm(out_path, colorize(accumulate(events, geometry)))
    return Path(out_path)
