"""Published per-layer structure of a stripe-pruned ResNet18 on ImageNet.

Each row is (name, in_channels, kept_stripes, stride, kept_filters,
dense_filters, kernel, output_size).  ``in_channels`` is the channel count
after upstream filters were removed, ``kept_filters`` the width of the
following batch norm, and ``output_size`` the spatial side of the layer's
output for 224x224 inputs.  Replaying the rows through the cost counter
checks the accounting on a real, non-trivial network.
"""

from __future__ import annotations

import numpy as np

from .prune import CostReport, StripeLayer, stripe_layer_cost

RESNET18_PRUNED = [
    ("conv1", 3, 324, 2, 64, 64, 7, 112),
    ("layer1.0.conv1", 64, 102, 1, 57, 64, 3, 56),
    ("layer1.0.conv2", 57, 164, 1, 64, 64, 3, 56),
    ("layer1.1.conv1", 64, 175, 1, 62, 64, 3, 56),
    ("layer1.1.conv2", 62, 300, 1, 64, 64, 3, 56),
    ("layer2.0.conv1", 64, 475, 2, 119, 128, 3, 28),
    ("layer2.0.conv2", 119, 636, 1, 128, 128, 3, 28),
    ("layer2.1.conv1", 128, 662, 1, 128, 128, 3, 28),
    ("layer2.1.conv2", 128, 648, 1, 128, 128, 3, 28),
    ("layer3.0.conv1", 128, 995, 2, 252, 256, 3, 14),
    ("layer3.0.conv2", 252, 1502, 1, 256, 256, 3, 14),
    ("layer3.1.conv1", 256, 1148, 1, 256, 256, 3, 14),
    ("layer3.1.conv2", 256, 944, 1, 256, 256, 3, 14),
    ("layer4.0.conv1", 256, 1304, 2, 498, 512, 3, 7),
    ("layer4.0.conv2", 498, 2448, 1, 512, 512, 3, 7),
    ("layer4.1.conv1", 512, 3111, 1, 512, 512, 3, 7),
    ("layer4.1.conv2", 512, 2927, 1, 512, 512, 3, 7),
]


def synthetic_layer(name, in_channels, stripes, stride, kept_filters, dense_filters, k) -> StripeLayer:
    """A StripeLayer with the given counts: every kept filter gets at least one stripe, dealt round-robin."""
    if not kept_filters <= stripes <= kept_filters * k * k:
        raise ValueError(f"{name}: {stripes} stripes cannot cover {kept_filters} filters of {k}x{k}")
    s = np.arange(stripes)
    pos = s // kept_filters
    index = np.stack([s % kept_filters, pos // k, pos % k], axis=1)
    return StripeLayer(index, np.zeros((stripes, in_channels)), kept_filters, in_channels, k, stride,
                       dense_filters=dense_filters, name=name)


def replay_resnet18() -> CostReport:
    report = CostReport()
    for name, c, s, stride, kept, dense, k, out in RESNET18_PRUNED:
        layer = synthetic_layer(name, c, s, stride, kept, dense, k)
        report.layers.append(stripe_layer_cost(layer, (out, out)))
    return report
