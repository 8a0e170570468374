"""One linear layer with a few outlier channels, quantized four ways.

Run: python3 demos/rotation_and_smoothing.py
"""
import numpy as np

from quantsmooth import QuantScheme, apply_rotation, build_quant_linear, make_rng, random_rotation
from quantsmooth.qlinear import quant_layer_loss
from quantsmooth.tensor import excess_kurtosis, gen_heavy_tailed

rng = make_rng(0)
d = 64
outliers = rng.choice(d, size=4, replace=False)
x = gen_heavy_tailed(rng, (256, d), outliers, 20.0)
w = rng.standard_normal((128, d)) / np.sqrt(d)

# A random-signed Hadamard rotation spreads the four hot channels over all 64.
xr = apply_rotation(x, random_rotation(d, 0))
print(f"kurtosis  raw {excess_kurtosis(x):8.2f}   rotated {excess_kurtosis(xr):6.2f}")
print(f"max |x|   raw {np.abs(x).max():8.2f}   rotated {np.abs(xr).max():6.2f}")

# Output MSE of the quantized layer against the float product.
for bits in (4, 8):
    row = []
    for variant in ("naive", "rotation", "scale", "dsfq"):
        layer = build_quant_linear(w, x, QuantScheme.make(variant, bits))
        row.append(f"{variant} {quant_layer_loss(layer, w, x):.2e}")
    print(f"W{bits}A{bits}: " + "  ".join(row))

# With axis-aligned outliers a per-channel scale alone already fixes most of the
# error at this single layer; the model-level comparison (toy_model_schemes.py)
# is where rotation plus smoothing pays off.
