"""Central finite-difference probes of network parameter gradients."""
import numpy as np


def probe_gradients(net, x, n_probes, rng, h=1e-5, training=True, floor=1e-6,
                    stratified=False):
    """Relative errors of ``net.backward`` against central differences.

    The scalar objective is ``sum(R * logits)`` for a fixed random ``R``.
    Probes are drawn uniformly over every parameter entry, or cycle through
    the parameter tensors when ``stratified`` so small tensors are covered.
    """
    logits, caches = net.forward(x, training)
    r = rng.normal(size=logits.shape)
    grads = net.backward(r, caches)
    params = net.parameters()
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    errors = []
    for t in range(n_probes):
        k = names[t % len(names)] if stratified else names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = np.unravel_index(rng.integers(params[k].size), params[k].shape)
        base = params[k][idx]
        vals = []
        for step in (h, -h):
            p = params[k].copy()
            p[idx] = base + step
            net.set_parameters({k: p})
            vals.append(float(np.sum(r * net.forward(x, training)[0])))
        net.set_parameters({k: params[k]})
        num = (vals[0] - vals[1]) / (2 * h)
        ana = float(grads[k][idx])
        errors.append((k, abs(ana - num) / max(abs(ana), abs(num), floor)))
    return errors
