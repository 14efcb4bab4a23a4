"""Random StripeModels for serialization tests."""

import numpy as np

from stripeprune.engine import Affine, GapSpec, LinearSpec, MaxPoolSpec, ReLUSpec, ResidualSpec, StripeModel
from stripeprune.prune import StripeLayer


def random_stripe_layer(rng, c, n=None, k=None, stride=None, name="conv"):
    n = n or int(rng.integers(1, 6))
    k = k or int(rng.choice([1, 3, 5]))
    stride = stride or int(rng.choice([1, 2]))
    mask = rng.random((n, k, k)) < rng.random()
    index = np.argwhere(mask)
    bias = rng.normal(size=len(index)) if rng.random() < 0.3 else None
    return StripeLayer(index, rng.normal(size=(len(index), c)), n, c, k, stride,
                       bias=bias, dense_filters=n + int(rng.integers(0, 3)), name=name)


def random_model(rng) -> StripeModel:
    """A runnable model mixing every layer kind, including empty stripe layers."""
    c = int(rng.integers(1, 4))
    h = 8
    in_shape = (c, h, h)
    layers = []
    for t in range(int(rng.integers(1, 4))):
        sl = random_stripe_layer(rng, c, stride=1 if h < 4 else None, name=f"l{t}.conv")
        h = (h - 1) // sl.stride + 1
        n = sl.n_filters
        layers += [sl, Affine(rng.normal(size=n), rng.normal(size=n), f"l{t}.bn"), ReLUSpec()]
        if h >= 4 and rng.random() < 0.3:
            layers.append(MaxPoolSpec())
            h //= 2
        if rng.random() < 0.3:
            body = random_stripe_layer(rng, n, n=n, k=3, stride=1, name=f"r{t}")
            layers.append(ResidualSpec([body, Affine(rng.normal(size=n), rng.normal(size=n))], []))
        c = n
    classes = int(rng.integers(2, 6))
    layers += [GapSpec(), LinearSpec(rng.normal(size=(classes, c)), rng.normal(size=classes), "fc")]
    return StripeModel(layers, in_shape, classes)


def flatten(layers):
    for l in layers:
        if isinstance(l, ResidualSpec):
            yield "residual", len(l.body), len(l.shortcut)
            yield from flatten(l.body + l.shortcut)
        else:
            yield type(l).__name__, tuple(
                (k, v.tobytes() if isinstance(v, np.ndarray) else v) for k, v in sorted(vars(l).items())
                if not k.startswith("_"))
