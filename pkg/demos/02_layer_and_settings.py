"""DLQATLinear and the six ablation settings."""

import numpy as np

from dlqat.layer import AblationSetting, DLQATLinear, Phase, trainable_kinds
from dlqat.quant import QuantSpec
from dlqat.tensor import Tensor

print(f"{'setting':<8}{'m':<7}{'clipping':<16}{'warm-up':<9}main phase")
for setting in AblationSetting:
    lab = setting.label()
    warm = "s,b" if setting.has_warmup else "-"
    main = ",".join(sorted(trainable_kinds(setting, Phase.MAIN)))
    print(f"{lab['setting']:<8}{lab['m']:<7}{lab['clipping']:<16}{warm:<9}{main}")

rng = np.random.default_rng(0)
w0 = rng.normal(size=(16, 32))
layer = DLQATLinear(w0, QuantSpec(4, 8), AblationSetting.S5, rank=4, rng=rng)
x = Tensor(rng.normal(size=(32, 10)))  # columns are tokens: Y = Wq X

y0 = layer.forward(x).data
print("\nat init B = 0, so the layer is just quantized W0:",
      np.allclose(layer.effective_weight().data, w0))

layer.adapter.B.data = rng.normal(scale=0.05, size=(16, 4))
layer.qparams.m.data *= 1.1
y1 = layer.forward(x).data
print("after touching B and m, outputs moved by", float(np.abs(y1 - y0).max()))
