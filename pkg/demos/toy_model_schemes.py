"""Quantize the toy transformer with each scheme and compare final-feature error.

Run: python3 demos/toy_model_schemes.py
"""
from quantsmooth import QuantScheme, ToyModelConfig, build_model, forward, gen_scene, make_rng
from quantsmooth import model_quant_loss, quantize_model

cfg = ToyModelConfig(seed=0)
model = build_model(cfg)
calib = [gen_scene(i % 4, make_rng(1, i), cfg) for i in range(40)]
held_out = [gen_scene(i % 4, make_rng(2, i), cfg) for i in range(40)]
fp = forward(model, held_out).final

x = forward(model, calib).block_inputs
print("block input |x| max per block:", " ".join(f"{abs(b).max():.0f}" for b in x))

for bits in (4, 8):
    for variant in ("naive", "rotation", "scale", "dsfq"):
        q = quantize_model(model, calib, QuantScheme.make(variant, bits))
        print(f"W{bits}A{bits} {variant:>8s}  {model_quant_loss(model, q, held_out, fp):.5f}")
