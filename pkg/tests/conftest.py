import numpy as np
import pytest

from diffreg.autodiff import Tape, Tensor


def fd_gradcheck(fn, tensors, rel_tol, h=1e-3, max_coords=25, seed=0,
                 exclude=None):
    """Compare tape gradients with central finite differences.

    fn builds a scalar loss from the given leaf tensors. A random subset
    of coordinates per tensor is perturbed. `exclude(tensor, flat_index)`
    can veto coordinates sitting on a kink (ReLU zero, bilinear cell
    boundary) where the analytic and numeric derivatives legitimately
    disagree. Relative error uses a small floor so near-zero gradients
    compare absolutely.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.requires_grad = True
    with Tape() as tape:
        loss = fn(*tensors)
        tape.backward(loss, leaves=tensors)
    analytic = [t.grad.copy() for t in tensors]

    def eval_loss():
        return fn(*tensors).item()

    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        idx = rng.choice(n, size=min(max_coords, n), replace=False)
        for i in idx:
            if exclude is not None and exclude(t, int(i)):
                continue
            orig = flat[i]
            flat[i] = orig + h
            up = eval_loss()
            flat[i] = orig - h
            down = eval_loss()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            a = float(g.reshape(-1)[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-2)
            worst = max(worst, err)
            assert err <= rel_tol, (
                f"gradient mismatch at flat index {i}: analytic {a}, fd {fd}, "
                f"rel err {err:.3e} > {rel_tol}")
    return worst


def rand_tensor(rng, shape, lo=-1.0, hi=1.0, requires_grad=True):
    return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float32),
                  requires_grad=requires_grad)


def random_smooth_field(seed, amplitude_px, sigma_px, height, width):
    """Blurred-noise velocity in normalized units with a pixel cap.

    Standalone generator (no synth-module amplitude precondition) for
    property tests that push beyond the synthetic-data envelope.
    """
    from diffreg.autodiff import _corr1d_reflect, gaussian_kernel1d

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((2, height, width))
    if sigma_px > 0:
        k = gaussian_kernel1d(sigma_px).astype(np.float64)
        noise = _corr1d_reflect(_corr1d_reflect(noise, k, 1), k, 2)
    peak = np.abs(noise).max()
    if peak > 0 and amplitude_px > 0:
        noise *= amplitude_px / peak
    else:
        noise[:] = 0
    v = np.empty_like(noise)
    v[0] = noise[0] * (2.0 / (width - 1))
    v[1] = noise[1] * (2.0 / (height - 1))
    return v[None].astype(np.float32)


@pytest.fixture(scope="session")
def synthetic_suite():
    """The 10 seeded default-config registrations (64x64, 6px amplitude).

    Session-scoped: several acceptance criteria read from the same runs.
    """
    from diffreg import synth
    from diffreg.engine import RegistrationConfig, register

    runs = []
    for seed in range(10):
        pair = synth.generate_pair(seed, size=64, amplitude_px=6.0, sigma_px=10.0)
        result = register(pair.moving, pair.fixed, RegistrationConfig(seed=seed))
        runs.append((pair, result))
    return runs


@pytest.fixture(scope="session")
def unidirectional_suite():
    from diffreg import synth
    from diffreg.engine import RegistrationConfig, register

    runs = []
    for seed in range(10):
        pair = synth.generate_pair(seed, size=64, amplitude_px=6.0, sigma_px=10.0)
        cfg = RegistrationConfig(seed=seed, bidirectional=False)
        runs.append((pair, register(pair.moving, pair.fixed, cfg)))
    return runs


def _levels_suite(levels):
    from diffreg import synth
    from diffreg.engine import RegistrationConfig, register

    runs = []
    for seed in range(10):
        pair = synth.generate_pair(seed, size=64, amplitude_px=6.0, sigma_px=10.0)
        cfg = RegistrationConfig(levels=levels, seed=seed)
        runs.append((pair, register(pair.moving, pair.fixed, cfg)))
    return runs


@pytest.fixture(scope="session")
def k1_suite():
    return _levels_suite(1)


@pytest.fixture(scope="session")
def k3_suite():
    return _levels_suite(3)
