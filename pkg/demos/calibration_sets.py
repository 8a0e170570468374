"""Pick a calibration set from a noisy pool, then calibrate block by block.

Takes a couple of minutes: two calibrations of the 8-block model.
Run: python3 demos/calibration_sets.py
"""
import numpy as np

from quantsmooth import CalibConfig, QuantScheme, RunConfig, calibrate_blockwise, model_quant_loss, quantize_model
from quantsmooth.ablation import PoolContext
from quantsmooth.sampling import filter_pool

ctx = PoolContext(RunConfig())
outliers = [sc.scene_id for sc in ctx.pool if sc.is_outlier]
kept = set(filter_pool(ctx.ids, ctx.scores, keep=0.2, ids=ctx.ids))
print(f"pool {len(ctx.pool)}, kept {len(kept)}, planted outliers kept: {sum(i in kept for i in outliers)}")
print(f"noise score: clean median {np.median(np.delete(ctx.scores, outliers)):.2f}, "
      f"outlier min {ctx.scores[outliers].min():.2f}")

scheme = QuantScheme.make("dsfq", 4)
for arm in ("random", "nfds"):
    ids = ctx.select(arm, seed=0)
    calib = ctx.scenes(ids)
    before = ctx.loss(quantize_model(ctx.model, calib, scheme))
    qmodel, logs = calibrate_blockwise(ctx.model, calib, scheme, CalibConfig.fast(),
                                       progress=lambda lg: print(f"  block {lg.block}: {lg.initial_loss:.5f} -> "
                                                                 f"{lg.final_loss:.5f} ({lg.wall_time:.1f}s)"))
    print(f"{arm:>6s}: {before:.5f} uncalibrated -> {ctx.loss(qmodel):.5f} calibrated")
