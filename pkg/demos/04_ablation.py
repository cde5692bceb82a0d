"""A miniature version of the six-setting ablation (two seeds, short runs)."""

from dataclasses import replace

from dlqat.data import corpus_from_bytes, synthetic_text
from dlqat.model import TinyLMConfig, build_model
from dlqat.quant import QuantSpec
from dlqat.trainer import TrainConfig, pretrain, run_ablation

corpus = corpus_from_bytes(synthetic_text(30_000, seed=0))
config = TinyLMConfig(d_model=32, n_layers=1, n_heads=4, ffn_hidden=64, context_length=32, rank=4)

# a float base worth quantizing
base_model = build_model(config, seed=0)
pretrain(base_model, corpus, 150, lr=3e-3, batch_size=8)
base = base_model.base_weights()


def factory(setting, quant, seed):
    return build_model(replace(config, quant=quant, setting=setting), seed=seed, base_weights=base)


train = TrainConfig(batch_size=8, learning_rate=1e-3, total_iters=40, warmup_sb_iters=10, quant=QuantSpec(3))
print(run_ablation(factory, corpus, train, bit_widths=(3,), seeds=(0, 1)).table())
