import numpy as np
import pytest

from evcomplete import nn


def projected_loss(out: nn.Tensor, seed=123) -> nn.Tensor:
    """Scalar sum(out * R) with a fixed random R, so every output entry matters."""
    r = np.random.default_rng(seed).standard_normal(out.data.shape)
    return nn.tsum(nn.mul(out, r))


def fd_param_check(params: nn.ParamStore, loss_fn, h=1e-6, max_entries=4000, seed=0, directions=3):
    """Relative error between analytic and central-difference parameter gradients.

    ``loss_fn()`` must rebuild the graph from ``params`` and return a scalar
    Tensor.  Stores with at most ``max_entries`` total entries are checked
    entry by entry; beyond that, ``directions`` random directions per tensor are used.
    The error is taken over all tensors jointly because some gradients are
    exactly zero (a softmax score bias, for one).
    """
    params.zero_grad()
    loss = loss_fn()
    loss.backward()
    grads = params.grads()
    rng = np.random.default_rng(seed)
    full = params.count <= max_entries
    nums, anas = [], []
    for name in params.names():
        arr = params[name]
        g = grads[name]
        if full:
            num = np.zeros_like(arr)
            for i in np.ndindex(arr.shape):
                keep = arr[i]
                arr[i] = keep + h
                fp = float(loss_fn().data)
                arr[i] = keep - h
                fm = float(loss_fn().data)
                arr[i] = keep
                num[i] = (fp - fm) / (2 * h)
            nums.append(num.ravel())
            anas.append(np.asarray(g, dtype=np.float64).ravel())
        else:
            for _ in range(directions):
                v = rng.standard_normal(arr.shape)
                keep = arr.copy()
                arr[...] = keep + h * v
                fp = float(loss_fn().data)
                arr[...] = keep - h * v
                fm = float(loss_fn().data)
                arr[...] = keep
                nums.append(np.array([(fp - fm) / (2 * h)]))
                anas.append(np.array([float((g * v).sum())]))
    num, ana = np.concatenate(nums), np.concatenate(anas)
    return np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)


def fd_input_check(x: np.ndarray, loss_of, h=1e-6):
    """Relative error of d loss / d x where ``loss_of(Tensor) -> scalar Tensor``."""
    xt = nn.Tensor(x.copy(), requires_grad=True)
    loss_of(xt).backward()
    g = xt.grad
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        num[i] = (float(loss_of(nn.Tensor(xp)).data) - float(loss_of(nn.Tensor(xm)).data)) / (2 * h)
    return np.linalg.norm(num - g) / max(np.linalg.norm(num), np.linalg.norm(g), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY_CONFIG = """
width = 32
height = 32
n_dense = 64
n_sparse = 16
n_pairs = 12
n_test = 4
scene_duration = 60000
levels = 2
widths = 8,16
radii = 0.3,0.6
max_k = 4
step_embed_dim = 8
head_hidden = 16
T = 50
epochs_edn = 2
epochs_ern = 3
fast_steps = 5
batch = 4
lr = 1e-3
"""


@pytest.fixture(scope="session")
def tiny_cfg():
    from evcomplete import pipeline as pl
    return pl.parse_config(TINY_CONFIG)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_cfg):
    """Tiny data set plus trained EDN/ERN checkpoints, built once per session."""
    from evcomplete import pipeline as pl
    d = tmp_path_factory.mktemp("tiny")
    pairs = pl.generate_pairs(tiny_cfg)
    pl.save_pairs(pairs, d / "data")
    train = pl.split_pairs(pairs, tiny_cfg, "train")
    edn, edn_hist = pl.train_edn(train, tiny_cfg, d / "edn.ckpt")
    pl.cache_coarse(edn, tiny_cfg, train, d / "coarse.evcl")
    coarse = pl.load_coarse(d / "coarse.evcl", train)
    ern, ern_hist = pl.train_ern(train, coarse, tiny_cfg, d / "ern.ckpt")
    return {"dir": d, "pairs": pairs, "train": train, "edn": edn, "ern": ern, "coarse": coarse,
            "edn_hist": edn_hist, "ern_hist": ern_hist}


# acceptance results, filled by tests/test_acceptance.py and printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
