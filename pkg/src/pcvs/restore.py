"""Feature encoding of source views and the two additive restoration stages."""

from __future__ import annotations

from .autodiff import Conv2d, Module, ResBlockStack, as_tensor, ops
from .cloud import DESCRIPTOR_DIM, FEATURE_DIM


class FeatureEncoder(Module):
    """Full-resolution encoder: 3 -> 16 -> 32 channels, then residual blocks."""

    def __init__(self, rng, width=16, out_channels=FEATURE_DIM, blocks=2):
        self.conv1 = Conv2d(3, width, rng)
        self.conv2 = Conv2d(width, out_channels, rng)
        self.res = ResBlockStack(blocks, out_channels, rng)

    def forward(self, image):
        x = ops.relu(self.conv1(image))
        x = ops.relu(self.conv2(x))
        return self.res(x)


def encode_features(view, encoder):
    """(H, W, 3) image -> (H, W, 32) per-pixel features."""
    return encoder(as_tensor(view))


class AdditiveCNN(Module):
    """head conv -> residual stack -> zero-initialised 3-channel tail.

    At initialisation the output is exactly zero, so the stage it feeds
    starts out as the identity.
    """

    def __init__(self, in_channels, blocks, rng, channels=32):
        self.in_channels = in_channels
        self.head = Conv2d(in_channels, channels, rng)
        self.body = ResBlockStack(blocks, channels, rng)
        self.tail = Conv2d(channels, 3, rng, zero_init=True)

    def forward(self, x):
        if x.shape[-1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[-1]}")
        return self.tail(self.body(ops.relu(self.head(x))))


def hole_filler(rng, channels=32, blocks=6):
    return AdditiveCNN(DESCRIPTOR_DIM, blocks, rng, channels)


def refiner(n_views, rng, channels=32, blocks=4, with_masks=True):
    per_view = 4 if with_masks else 3
    return AdditiveCNN(3 + per_view * n_views, blocks, rng, channels)


def fill_holes(feature_map, coarse, net):
    """Ĩ_p = f_h(F̂_t) + Ĩ_c."""
    coarse = as_tensor(coarse)
    additive = net(as_tensor(feature_map))
    if additive.shape != coarse.shape:
        raise ValueError(f"hole filler output {additive.shape} does not match coarse render {coarse.shape}")
    return additive + coarse


def refine(inpainted, warped, masks, net):
    """Ĩ_t = f_r(CAT(Ĩ_p, Î_1..Î_N[, masks])) + Ĩ_p."""
    inpainted = as_tensor(inpainted)
    parts = [inpainted] + [as_tensor(w) for w in warped]
    n = len(warped)
    expected = 3 + 3 * n + (n if masks is not None else 0)
    if masks is not None:
        if len(masks) != n:
            raise ValueError(f"{n} warped views but {len(masks)} masks")
        parts += [ops.reshape(as_tensor(m), m.shape[:2] + (1,)) for m in masks]
    if expected != net.in_channels:
        raise ValueError(f"refiner expects {net.in_channels} channels, got {expected} from {n} views")
    return net(ops.concat(parts, axis=-1)) + inpainted
