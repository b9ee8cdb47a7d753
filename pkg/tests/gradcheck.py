"""Central finite-difference gradient checks for the autodiff engine."""
import numpy as np

from idsr import autodiff as ad


def numeric_grad(fn, arrays, index, h=1e-3):
    """d fn / d arrays[index] by central differences; ``fn`` maps arrays to a float."""
    base = [a.copy() for a in arrays]
    x = base[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fn(base)
        x[i] = old - h
        fm = fn(base)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grad(build, arrays, h=1e-3):
    """Max relative error between analytic and numeric gradients over all inputs.

    ``build`` maps a list of float64 Tensors to a scalar Tensor. The error of
    each input is ``max|analytic - numeric| / max|numeric|`` (infinity norms).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(tensors)
    out.backward()

    def value(arrs):
        with ad.no_grad():
            return build([ad.Tensor(a) for a in arrs]).item()

    worst = 0.0
    for k, t in enumerate(tensors):
        num = numeric_grad(value, arrays, k, h)
        scale = max(np.abs(num).max(), 1e-12)
        worst = max(worst, float(np.abs(t.grad - num).max() / scale))
    return worst


def projected(op, seed=0):
    """Turn a tensor-valued op into a scalar via a fixed random projection."""
    cache = {}

    def build(tensors):
        out = op(*tensors)
        if out.shape not in cache:
            cache[out.shape] = np.random.default_rng(seed).standard_normal(out.shape)
        return ad.sum_all(ad.mul(out, ad.Tensor(cache[out.shape])))

    return build


def away_from_zero(x, margin=0.05):
    """Push entries away from ReLU/l1 kinks so finite differences stay on one side."""
    return np.where(np.abs(x) < margin, np.sign(x) * margin + (x == 0) * margin, x)


def crosses_kink(build, arrays, h=1e-3):
    """True if any +-h stencil point flips a ReLU mask, a max routing or an l1 sign.

    Central differences are only meaningful where the function is smooth over
    the whole stencil; this check is independent of the gradient being tested.
    """
    relu, route, l1 = ad.relu, ad._max_with_routing, ad.l1_loss
    trace = []

    def l1_rec(a, b):
        trace.append(np.sign(a.data - b.data).tobytes())
        return l1(a, b)

    def relu_rec(x):
        trace.append((x.data > 0).tobytes())
        return relu(x)

    def route_rec(data, axis):
        mx, mask = route(data, axis)
        trace.append(mask.tobytes())
        return mx, mask

    def signature(arrs):
        trace.clear()
        with ad.no_grad():
            build([ad.Tensor(a) for a in arrs])
        return list(trace)

    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    ad.relu, ad._max_with_routing, ad.l1_loss = relu_rec, route_rec, l1_rec
    try:
        base = signature(arrays)
        for x in arrays:
            for i in np.ndindex(x.shape):
                old = x[i]
                for step in (h, -h):
                    x[i] = old + step
                    if signature(arrays) != base:
                        return True
                x[i] = old
    finally:
        ad.relu, ad._max_with_routing, ad.l1_loss = relu, route, l1
    return False
