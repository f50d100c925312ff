"""Builders for the reference topologies shipped with the package."""

from .topology import INPUT, LayerSpec, NetworkTopology


def _conv(lid, src, channels, kernel_size=3, stride=1, relu=None):
    return LayerSpec(lid, "conv", (src,), kernel_size=kernel_size, stride=stride,
                     channels=channels, relu=relu)


def _head(layers, src, num_classes):
    layers.append(LayerSpec("pool", "pool", (src,), global_pool=True))
    layers.append(LayerSpec("fc", "fc", ("pool",), channels=num_classes))


def chain_net(n_layers=3, channels=16, image_size=32, num_classes=10, in_channels=3):
    """Plain stack of 3x3 stride-1 convolutions, all adjustable."""
    layers, src = [], INPUT
    for i in range(1, n_layers + 1):
        layers.append(_conv(f"conv{i}", src, channels))
        src = f"conv{i}"
    _head(layers, src, num_classes)
    ids = [f"conv{i}" for i in range(1, n_layers + 1)]
    return NetworkTopology((in_channels, image_size, image_size), layers, ids, name="chain")


def toy_net(channels=(16, 16, 16, 16), image_size=16, num_classes=4, in_channels=3):
    """Four 3x3 convolutions, downsampling after the first and third."""
    strides = (1, 2, 1, 2)
    layers, src = [], INPUT
    for i, (c, s) in enumerate(zip(channels, strides), start=1):
        layers.append(_conv(f"conv{i}", src, c, stride=s))
        src = f"conv{i}"
    _head(layers, src, num_classes)
    return NetworkTopology((in_channels, image_size, image_size), layers,
                           [f"conv{i}" for i in range(1, 5)], name="toy4")


def resnet_cifar(depth=20, width=16, num_classes=100, image_size=32, in_channels=3):
    """CIFAR-style ResNet with zero-padding shortcuts.

    Blocks are conv-BN-ReLU, conv-BN, add, ReLU. Downsampling shortcuts are a
    stride-2 subsample; channel mismatches at every add junction are resolved
    by zero padding, so all convolutions are adjustable.
    """
    if (depth - 2) % 6:
        raise ValueError("depth must be 6n + 2")
    n = (depth - 2) // 6
    layers = [_conv("stem", INPUT, width)]
    src = "stem"
    for stage in range(3):
        c = width * 2**stage
        for block in range(n):
            stride = 2 if stage > 0 and block == 0 else 1
            pre = f"s{stage + 1}b{block + 1}"
            layers.append(_conv(f"{pre}c1", src, c, stride=stride))
            layers.append(_conv(f"{pre}c2", f"{pre}c1", c, relu=False))
            shortcut = src
            if stride != 1:
                shortcut = f"{pre}down"
                layers.append(LayerSpec(shortcut, "pool", (src,), kernel_size=1, stride=stride))
            layers.append(LayerSpec(f"{pre}add", "add_junction", (f"{pre}c2", shortcut)))
            src = f"{pre}add"
    _head(layers, src, num_classes)
    ids = [l.id for l in layers if l.kind == "conv"]
    return NetworkTopology((in_channels, image_size, image_size), layers, ids,
                           name=f"resnet{depth}")
