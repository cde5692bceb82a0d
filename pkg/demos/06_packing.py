"""Pack a quantized model, read it back, and run inference from the packed grids."""

import numpy as np

from dlqat.model import TinyLMConfig, build_model
from dlqat.packing import load_packed_weights, pack_model, packed_size, unpack_model
from dlqat.quant import QuantSpec

config = TinyLMConfig(d_model=32, n_layers=2, n_heads=4, ffn_hidden=64, context_length=16,
                      quant=QuantSpec(3, 8), rank=4)
model = build_model(config, seed=0)
rng = np.random.default_rng(0)
for layer in model.linears().values():  # pretend some training happened
    layer.adapter.B.data = rng.normal(scale=0.01, size=layer.adapter.B.shape)

raw = pack_model(model)  # also pins s, b, m at float32 in memory
grid = sum(packed_size(l.shape[0] * l.shape[1], 3) for l in model.linears().values())
dense = sum(l.shape[0] * l.shape[1] * 4 for l in model.linears().values())
print(f"pack file {len(raw)} bytes: {grid} bytes of 3-bit grids (float32 weights would be {dense})")

pack = unpack_model(raw)
name = "layers.0.up"
print(name, "grid range", pack[name].grid.min(), "..", pack[name].grid.max())
same = np.array_equal(pack[name].dequantize(), model.linears()[name].quantized_weight().data)
print("dequantized pack equals in-memory quantized weight:", same)

ids = rng.integers(0, 256, size=(1, 16))
before = model(ids).data
load_packed_weights(model, pack)
print("logits identical after swapping in packed layers:", np.array_equal(before, model(ids).data))
