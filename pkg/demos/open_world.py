"""Open-world alignment: hide some test entities during training.

Entities that never appear in training triples still get a representation,
because decentRL builds it from neighbors only.
"""

from decentrl import evaluation as ev
from decentrl import kg, tasks

SEED = 1

g = kg.generate_synthetic_kg(200, 5, 4.0, SEED, skew=1.0)
src, copy, pairs = kg.make_aligned_copy(g, SEED, 0.1)
pairs = pairs.resplit(0.3, SEED)

splits = [kg.split_open_world(side, pairs.test[:, i], 0.2, SEED)
          for i, side in enumerate((src, copy))]
for name, sp, side in zip(("kg1", "kg2"), splits, (src, copy)):
    print(f"{name}: {len(sp.open_entities)} open entities, "
          f"{len(sp.test_triples) / len(side):.1%} of triples held out")

train1, train2 = (side.with_triples(sp.train_triples) for side, sp in zip((src, copy), splits))
cfg = tasks.AlignConfig(dim=64, layers=4, epochs=150, lr=3e-3, margin=30.0, alpha=1.0,
                        neg_per_pos=30, dropout=0.0, seed=SEED)
model, _ = tasks.train_alignment(train1, train2, pairs, cfg)

closed = model.outputs()
_, full_index, _ = tasks.prepare_alignment(src, copy, pairs, cfg)
opened = model.outputs(full_index)
print("closed graph :", ev.rank_alignment(closed, closed, model.pairs.test).summary())
print("with new edges:", ev.rank_alignment(opened, opened, model.pairs.test).summary())
