"""
Adapting to an unseen speaker
=============================

A small recognizer is trained on some synthetic speakers, then scored on a
speaker it never saw. Prompts are tuned on a few clips of that speaker while
the model stays frozen. Full finetuning on the same clips is the comparison.

This uses the default benchmark corpus and settings and runs in about a minute.
"""

from vsprompt.adaptation import AdaptationConfig, TrainConfig, adapt, evaluate, finetune, pretrain
from vsprompt.model import build, grid_tiny
from vsprompt.prompts import init_prompts
from vsprompt.synthdata import budget_subset, generate_corpus, split_unseen_speakers

corpus = generate_corpus(0, num_speakers=10, K=10, samples_per_speaker=100, mode="ctc_sentence")
train, seen_test, held = split_unseen_speakers(corpus, num_test_speakers=2)
speaker, (adapt_pool, test) = next(iter(held.items()))
print(f"train {len(train)} clips, unseen speaker {speaker}: {len(adapt_pool)} adapt / {len(test)} test")

model = build(grid_tiny(), seed=0)
model, log = pretrain(model, train, TrainConfig())
print("final training loss", round(log[-1].loss, 3))

# %%
# The gap the prompts should close.
print("seen speakers  ", round(evaluate(model, None, seen_test)["accuracy"], 1))
print("unseen speaker ", round(evaluate(model, None, test)["accuracy"], 1))

# %%
# Twenty clips of the new speaker.
clips = budget_subset(adapt_pool, 20, seed=0)
digest = model.digest()
prompts, _ = adapt(model, init_prompts(model.config, "A+P+C", seed=0), clips, AdaptationConfig(epochs=30))
assert model.digest() == digest  # the recognizer itself never changed
print("A+P+C prompts  ", round(evaluate(model, prompts, test)["accuracy"], 1))

tuned, _, n = finetune(model, clips, "F", AdaptationConfig(epochs=30))
print("full finetune  ", round(evaluate(tuned, None, test)["accuracy"], 1), f"({n} parameters)")
