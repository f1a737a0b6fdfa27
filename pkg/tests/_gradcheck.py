"""Central finite-difference checking shared by the nn and acceptance tests."""

import numpy as np

from ecgdenoise.nn import Tensor, backward

H = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f, arrays: list[np.ndarray], k: int, h: float = H) -> np.ndarray:
    x = arrays[k]
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(*arrays)
        flat[i] = old - h
        down = f(*arrays)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def check(build, arrays: list[np.ndarray], h: float = H) -> float:
    """Max relative error over every input of ``build(*tensors) -> scalar Tensor``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = backward(build(*leaves), leaves)

    def f(*arrs):
        return float(build(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for k in range(len(arrays)):
        num = numeric_grad(f, arrays, k, h)
        worst = max(worst, float(relative_error(analytic[k], num).max(initial=0.0)))
    return worst


def away_from_zero(rng, shape, margin: float = 0.05) -> np.ndarray:
    """Normal samples with |x| >= margin so kinks sit outside the FD stencil."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def model_check(model, x: np.ndarray, y: np.ndarray, h: float = H) -> tuple[float, float, int]:
    """Central differences over every parameter of a float64 model.

    Returns ``(worst_smooth, worst_kink, n_kink)``. An element counts as
    near a kink when some leaky-ReLU input changes sign between its +h and
    -h evaluations, i.e. the stencil straddles the non-differentiable point.
    """
    import ecgdenoise.model as model_mod
    from ecgdenoise.nn import mse_loss

    _, grads = model.loss_and_grads(x, y, training=True)
    signs: list[np.ndarray] = []
    real = model_mod.leaky_relu

    def spy(t, slope=0.2):
        signs.append(t.data > 0)
        return real(t, slope)

    def loss():
        signs.clear()
        out = model.graph(x, model.leaves(False), training=True)
        return float(mse_loss(out, y.reshape(out.shape)).data), list(signs)

    smooth, kink, n_kink = 0.0, 0.0, 0
    model_mod.leaky_relu = spy
    try:
        for name, p in model.params.items():
            flat, g = p.reshape(-1), grads[name].reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up, s_up = loss()
                flat[i] = old - h
                down, s_down = loss()
                flat[i] = old
                err = float(relative_error(g[i:i + 1], np.array([(up - down) / (2 * h)]))[0])
                if any((a != b).any() for a, b in zip(s_up, s_down)):
                    kink, n_kink = max(kink, err), n_kink + 1
                else:
                    smooth = max(smooth, err)
    finally:
        model_mod.leaky_relu = real
    return smooth, kink, n_kink
