"""Entity prediction on a synthetic KG with the three decoders.

Relations in the generator are assigned at random, so there is little to learn
beyond degree; expect small but above-chance MRR (chance is about 0.04).
"""

from decentrl import kg, tasks

g = kg.generate_synthetic_kg(150, 4, 5.0, 2)
perm = kg.rng_for(2, "demo-split").permutation(len(g))
test_rows, train_rows = perm[:60], perm[60:]
train = g.with_triples(g.triples[train_rows])

for decoder in (tasks.TRANSE, tasks.DISTMULT, tasks.COMPLEX):
    cfg = tasks.PredictConfig(decoder=decoder, dim=32, layers=2, epochs=20, batch_size=128,
                              neg_per_triple=32, lr=1e-2)
    model, history = tasks.train_prediction(train, cfg)
    filtered, raw = model.evaluate(g.triples[test_rows], g.triples)
    print(f"{decoder:>8}: loss {history.epochs[-1]['task_loss']:.3f}  "
          f"filtered MRR {filtered.mrr:.3f}  raw MRR {raw.mrr:.3f}  H@10 {filtered.hits(10):.3f}")
