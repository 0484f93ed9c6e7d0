import numpy as np
import pytest

from asrvc import neural as nn

from asrvc.encoder import EncoderConfig, init_random_encoder, save_encoder


@pytest.fixture(scope="session")
def toy_encoder_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("enc") / "encoder.ntar"
    cfg = EncoderConfig.toy()
    save_encoder(path, cfg, init_random_encoder(cfg, 0))
    return path


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x, idx, eps=1e-3):
    """Central differences of scalar f() w.r.t. entries ``idx`` (flat) of array x, in place."""
    flat = x.reshape(-1)
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * eps)
    return out


def sample_idx(size, rng, k=30):
    return rng.choice(size, size=min(size, k), replace=False)


def rf_influence(params, config, t, n_audio, seed=0):
    """Return (changed_at, first_unchanged) offsets for the raw-index perturbation probe at step t.

    ``changed[d]`` is True when perturbing raw index ``x[t-d]`` changes ``logits[:, t]``.
    """
    from asrvc.decoder import ConditioningSeq, forward

    rng = np.random.default_rng(seed)
    x = rng.integers(0, 256, n_audio)
    cond = ConditioningSeq(rng.standard_normal((config.latent_channels, -(-n_audio // 320))).astype(np.float32),
                           rng.standard_normal(config.speaker_dim).astype(np.float32), None, n_audio)
    base = forward(params, x, cond, config).data[:, t]

    def changed(d):
        y = x.copy()
        y[t - d] = (y[t - d] + 97) % 256
        return not np.array_equal(forward(params, y, cond, config).data[:, t], base)

    return changed


def gradcheck(build, arrays, seed=0, eps=1e-3):
    """Compare backward() against central differences for ``sum(build(*inputs) * R)``."""
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    params = [nn.Parameter(a) for a in arrays]
    out = build(*params)
    R = rng.standard_normal(out.shape)
    out.backward(R)

    def f():
        return float((build(*[nn.Tensor(a) for a in arrays]).data * R).sum())

    worst = 0.0
    for a, p in zip(arrays, params):
        idx = sample_idx(a.size, rng)
        analytic = np.zeros(a.size) if p.grad is None else p.grad.reshape(-1)[idx]
        worst = max(worst, rel_err(analytic, numeric_grad(f, a, idx, eps)))
    return worst


def away_from(x, points, margin=0.05):
    """Nudge entries of x that sit within ``margin`` of any kink."""
    x = np.array(x, dtype=np.float64)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + margin * np.where(x[close] >= p, 2, -2)
    return x


# -- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict[int, tuple[bool | None, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): numbered acceptance criterion")


@pytest.fixture
def criterion(request):
    """``record(detail)`` stores the measured values shown on the criterion's summary line."""
    n = request.node.get_closest_marker("criterion").args[0]

    def record(detail: str):
        _CRITERIA[n] = (None, detail)
        print(f"criterion {n}: {detail}")

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n = marker.args[0]
    _, detail = _CRITERIA.get(n, (None, ""))
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    _CRITERIA[n] = (rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
