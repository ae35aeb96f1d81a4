import numpy as np
import pytest

from evcomplete import io, metrics, nn
from evcomplete import pipeline as pl
from evcomplete.datagen import synthetic_pairs
from evcomplete.diffusion import training_loss
from evcomplete.events import SensorGeometry, events_from_tuples, make_events, validate_events


def test_config_roundtrip_and_errors(tiny_cfg):
    assert pl.parse_config(pl.dump_config(tiny_cfg)) == tiny_cfg
    assert pl.parse_config(pl.dump_config(pl.RunConfig())) == pl.RunConfig()
    assert pl.parse_config("use_ball_query = yes\n# note\n").use_ball_query
    d = pl.RunConfig()
    assert (d.epochs_edn, d.epochs_ern, d.lr, d.fast_steps, d.batch) == (120, 30, 2e-4, 27, 16)
    t = pl.toy_preset()
    assert (t.epochs_edn, t.epochs_ern) == (20, 10)
    bad = ["nope = 1", "batch", "batch = x", "batch = 0", "lr = 0", "epochs_edn = 0", "n_sparse = 300",
           "widths = 8,16", "use_ball_query = maybe", "fast_steps = 2000"]
    for text in bad:
        with pytest.raises(pl.ConfigError):
            pl.parse_config(text)
    with pytest.raises(pl.ConfigError):
        pl.load_config("/nonexistent/cfg")


def test_network_config_follows_run_config(tiny_cfg):
    net = tiny_cfg.network()
    assert (net.n_points, net.n_cond, net.widths, net.max_k) == (64, 16, (8, 16), 4)
    assert pl.override(tiny_cfg, use_ball_query=True).network() == net.ablated()


def test_pair_cache_roundtrip(tiny_run, tiny_cfg):
    back = pl.load_pairs(tiny_run["dir"] / "data")
    assert len(back) == tiny_cfg.n_pairs
    for a, b in zip(tiny_run["pairs"], back):
        assert a.sample_id == b.sample_id and a.anchor == b.anchor
        assert a.dense == b.dense and a.sparse == b.sparse
    assert len(pl.split_pairs(back, tiny_cfg, "test")) == tiny_cfg.n_test
    assert len(pl.split_pairs(back, tiny_cfg, "train")) == tiny_cfg.n_pairs - tiny_cfg.n_test
    with pytest.raises(pl.DataError):
        pl.load_pairs(tiny_run["dir"] / "missing")


def test_train_edn_smoke_and_snapshot(tiny_run, tiny_cfg, tmp_path):
    cfg = pl.override(tiny_cfg, epochs_edn=1)
    params, hist = pl.train_edn(tiny_run["train"][:1], cfg, tmp_path / "e.ckpt")
    assert len(hist) == 1 and np.isfinite(hist[0])
    assert nn.load_checkpoint(tmp_path / "e.ckpt").names() == params.names()
    assert pl.load_config(tmp_path / "e.ckpt.cfg") == cfg
    with pytest.raises(pl.DataError):
        pl.train_edn([], cfg, tmp_path / "x.ckpt")


def test_train_edn_deterministic(tiny_run, tiny_cfg, tmp_path):
    cfg = pl.override(tiny_cfg, epochs_edn=1)
    pl.train_edn(tiny_run["train"], cfg, tmp_path / "a.ckpt")
    pl.train_edn(tiny_run["train"], cfg, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_frozen_batch_loss_decreases():
    # toy preset network on one fixed (t, eps, polarity-noise) batch
    cfg = pl.toy_preset(n_pairs=4)
    pairs = synthetic_pairs(4, seed=0)
    net, sched = cfg.network(), cfg.schedule()
    params = pl.init_params(net, 0, "edn")
    E, P, C, CP = pl._stack(pairs)
    rng = np.random.default_rng(0)
    t = rng.integers(1, 1001, 4)
    eps = rng.standard_normal(E.shape)
    npol = rng.choice([-1.0, 1.0], P.shape)
    state = nn.AdamState(lr=cfg.lr)
    losses = []
    for _ in range(51):
        loss, _ = training_loss(params, net, E, P, C.astype(np.float32), CP, sched, None, t, eps, npol)
        losses.append(loss)
        nn.adam_step(params, params.grads(), state)
    assert losses[-1] < losses[0]


def test_divergence_keeps_last_good_checkpoint(tiny_run, tiny_cfg, tmp_path, monkeypatch):
    cfg = pl.override(tiny_cfg, epochs_edn=3)
    calls = {"n": 0}
    real = pl.training_loss

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] > 2:  # two clean batches make up epoch 1
            raise FloatingPointError("non-finite training loss")
        return real(*a, **kw)

    monkeypatch.setattr(pl, "training_loss", flaky)
    with pytest.raises(pl.Divergence):
        pl.train_edn(tiny_run["train"], cfg, tmp_path / "d.ckpt")
    monkeypatch.setattr(pl, "training_loss", real)
    ref, _ = pl.train_edn(tiny_run["train"], pl.override(cfg, epochs_edn=1), tmp_path / "r.ckpt")
    kept = nn.load_checkpoint(tmp_path / "d.ckpt")
    assert np.array_equal(kept.flat(), ref.flat())


def test_cache_coarse_contract(tiny_run, tiny_cfg, tmp_path):
    train = tiny_run["train"]
    path = tmp_path / "c.evcl"
    pl.cache_coarse(tiny_run["edn"], tiny_cfg, train, path)
    cache = io.read_block_cache(path)
    assert list(cache) == [p.sample_id for p in train]
    for ev, g in cache.values():
        assert len(ev) == tiny_cfg.n_dense
        validate_events(ev, g)
    X, XP = pl.load_coarse(path, train)
    assert X.shape == (len(train), 64, 3) and np.all(np.abs(X) <= 1) and set(np.unique(XP)) <= {-1.0, 1.0}
    assert path.read_bytes() == (tiny_run["dir"] / "coarse.evcl").read_bytes()
    with pytest.raises(pl.DataError):
        pl.load_model(tmp_path / "missing.ckpt")


def test_coarse_cache_mismatch_lists_ids(tiny_run, tiny_cfg):
    pairs = tiny_run["pairs"]
    with pytest.raises(pl.DataError) as err:
        pl.load_coarse(tiny_run["dir"] / "coarse.evcl", pairs)
    for p in pl.split_pairs(pairs, tiny_cfg, "test"):
        assert p.sample_id in str(err.value)


def test_train_ern_initial_loss_and_improvement(tiny_run, tiny_cfg):
    train = tiny_run["train"]
    X, _ = tiny_run["coarse"]
    hist = tiny_run["ern_hist"]
    want = np.mean([metrics.chamfer(X[i], p.dense.coords) for i, p in enumerate(train)])
    assert abs(hist[0] - want) < 1e-12
    assert len(hist) == tiny_cfg.epochs_ern + 1
    # the zero-initialized head leaves the coarse cloud untouched
    fresh = pl.init_params(tiny_cfg.network(), 0, "ern")
    assert np.array_equal(pl.refine(fresh, tiny_cfg, tiny_run["coarse"], train).astype(np.float32),
                          X.astype(np.float32))
    refined = pl.refine(tiny_run["ern"], tiny_cfg, tiny_run["coarse"], train)
    after = np.mean([metrics.chamfer(refined[i], p.dense.coords) for i, p in enumerate(train)])
    assert after <= hist[0]


def test_train_ern_smoke_one_sample(tiny_run, tiny_cfg, tmp_path):
    one = tiny_run["train"][:1]
    coarse = (tiny_run["coarse"][0][:1], tiny_run["coarse"][1][:1])
    _, hist = pl.train_ern(one, coarse, pl.override(tiny_cfg, epochs_ern=1), tmp_path / "r.ckpt")
    assert len(hist) == 2 and (tmp_path / "r.ckpt").exists()
    with pytest.raises(pl.DataError):
        pl.train_ern(tiny_run["train"][:2], coarse, tiny_cfg, tmp_path / "x.ckpt")


def _sparse_file(pairs, path):
    evs = [pl.denormalize(p.sparse, p.geometry, p.anchor).events for p in pairs]
    # keep slices disjoint in time so re-slicing recovers them
    shift, out = 0, []
    for ev in evs:
        ev = ev.copy()
        ev["t"] += shift - ev["t"][0]
        shift = int(ev["t"][-1]) + 1
        out.append(ev)
    io.write_evcl(path, np.concatenate(out), pairs[0].geometry)
    return out


def test_complete_file_contract(tiny_run, tiny_cfg, tmp_path):
    test = pl.split_pairs(tiny_run["pairs"], tiny_cfg, "test")
    slices = _sparse_file(test, tmp_path / "in.evcl")
    n = pl.complete_file(tmp_path / "in.evcl", tiny_run["edn"], tiny_run["ern"], tiny_cfg, tmp_path / "out.evcl")
    out, g = io.read_evcl(tmp_path / "out.evcl")
    assert n == len(test) and len(out) == n * tiny_cfg.n_dense
    for k, sl in enumerate(slices):
        part = out[k * tiny_cfg.n_dense:(k + 1) * tiny_cfg.n_dense]
        assert part["t"].min() >= sl["t"][0] and part["t"].max() <= sl["t"][-1]
        assert np.all(np.diff(part["t"]) >= 0)
        validate_events(part, g)
    pl.complete_file(tmp_path / "in.evcl", tiny_run["edn"], tiny_run["ern"], tiny_cfg, tmp_path / "again.evcl")
    assert (tmp_path / "out.evcl").read_bytes() == (tmp_path / "again.evcl").read_bytes()


def test_complete_file_errors(tiny_run, tiny_cfg, tmp_path):
    ev = events_from_tuples([(1, 1, t, 1) for t in range(10)])
    io.write_evcl(tmp_path / "short.evcl", ev, SensorGeometry(32, 32))
    (tmp_path / "junk.evcl").write_bytes(b"garbage")
    for name in ("short.evcl", "junk.evcl", "none.evcl"):
        with pytest.raises(pl.DataError):
            pl.complete_file(tmp_path / name, tiny_run["edn"], tiny_run["ern"], tiny_cfg, tmp_path / "o.evcl")


def test_score_scales_and_identity(tiny_run, tiny_cfg):
    pairs = tiny_run["pairs"][:3]
    rep = pl.score([p.dense.coords for p in pairs], pairs, tiny_cfg)
    assert all(r["cd"] == 0 and r["emd"] == 0 for r in rep.rows)
    shifted = [p.dense.coords + 0.01 for p in pairs]
    rep = pl.score(shifted, pairs, tiny_cfg)
    for r, p, x in zip(rep.rows, pairs, shifted):
        assert abs(r["cd"] - 1e3 * metrics.chamfer(x, p.dense.coords)) < 1e-9
        assert abs(r["emd"] - 1e2 * metrics.emd_exact(x, p.dense.coords)) < 1e-9
    for k, v in rep.means.items():
        assert abs(sum(r[k] for r in rep.rows) / len(rep.rows) - v) < 1e-12


def test_baseline_construction(tiny_run):
    p = tiny_run["pairs"][0]
    b = pl.baseline_cloud(p, 64, 7)
    jitter = b - np.tile(p.sparse.coords, (4, 1))
    assert b.shape == (64, 3) and abs(jitter.std() - 0.05) < 0.015
    assert np.array_equal(b, pl.baseline_cloud(p, 64, 7))


def test_evaluate_report_files(tiny_run, tiny_cfg, tmp_path):
    test = pl.split_pairs(tiny_run["pairs"], tiny_cfg, "test")
    rep = pl.evaluate(tiny_run["edn"], tiny_run["ern"], tiny_cfg, test)
    assert len(rep.rows) == len(test)
    assert {"cd", "emd", "baseline_emd", "coarse_emd"} <= set(rep.means)
    pl.write_report(rep, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("sample_id,cd,emd") and len(lines) == len(test) + 1
    assert "emd" in (tmp_path / "r.txt").read_text()


def test_render_examples(tmp_path):
    g = SensorGeometry(5, 4)
    io.write_evcl(tmp_path / "e.evcl", make_events([], [], [], []), g)
    pl.render(tmp_path / "e.evcl", tmp_path / "e.ppm")
    raw = (tmp_path / "e.ppm").read_bytes()
    header = b"P6\n5 4\n255\n"
    assert raw.startswith(header) and set(raw[len(header):]) == {128}
    io.write_evcl(tmp_path / "one.evcl", events_from_tuples([(2, 1, 10, 1)]), g)
    pl.render(tmp_path / "one.evcl", tmp_path / "one.ppm")
    img = np.frombuffer((tmp_path / "one.ppm").read_bytes()[len(header):], np.uint8).reshape(4, 5, 3)
    hot = np.argwhere(np.any(img != 128, axis=-1))
    assert hot.tolist() == [[1, 2]]
    r, gr, b = img[1, 2].astype(int)
    assert r > 128 and r > gr and r > b
    pl.render(tmp_path / "one.evcl", tmp_path / "two.ppm")
    assert (tmp_path / "one.ppm").read_bytes() == (tmp_path / "two.ppm").read_bytes()


def test_colorize_is_diverging():
    rgb = pl.colorize(np.array([[-2, 0, 2]]))[0].astype(int)
    assert rgb[1].tolist() == [128, 128, 128]
    assert rgb[0][2] > rgb[0][0] and rgb[2][0] > rgb[2][2]
