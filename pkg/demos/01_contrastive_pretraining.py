"""
Contrastive pretraining on synthetic clusters
=============================================

Pretrain an encoder with the support-set contrastive loss, then compare a
linear probe on its embeddings with a few-shot supervised baseline.
"""
import numpy as np

from exemplar_cssl import data, evaluation
from exemplar_cssl import pipelines as P
from exemplar_cssl.encoder import embed

# overlapping blobs, so the task is not trivially separable
samples = data.gen_clusters(data.SyntheticSpec(num_classes=8, dim=64, per_class_count=200, centroid_scale=1.0, seed=0))
train, test = data.holdout(samples, test_fraction=0.25, seed=0)
x = np.stack([s.x for s in train])
ids = np.array([s.id for s in train])
y = np.array([s.label for s in train])
tx = np.stack([s.x for s in test])
ty = np.array([s.label for s in test])

# keep 5 labels per class visible
shots = np.concatenate([np.flatnonzero(y == c)[:5] for c in range(8)])
visible = np.full(len(y), -1)
visible[shots] = y[shots]

params, history = P.pretrain_cssl(x, ids, visible, P.TrainConfig(epochs=30, batch_size=128, seed=0), P.new_encoder(64, 0))
print("contrastive loss per epoch:", np.round(history, 3))

probe = evaluation.linear_probe(embed(params, x[shots]), y[shots], embed(params, tx), ty)
print(f"probe on 5-shot labels: {probe:.3f}")

sup, classes, _ = P.finetune_supervised(P.new_encoder(64, 0), x[shots], y[shots], P.TrainConfig(epochs=100, batch_size=8, seed=0))
print(f"supervised on the same shots: {np.mean(P.predict_labeled(sup, classes, tx) == ty):.3f}")

print(f"kNN accuracy of pretrained embeddings: {evaluation.knn_accuracy(embed(params, x), y, embed(params, tx), ty):.3f}")
print(f"separation ratio: {evaluation.separation_ratio(embed(params, tx), ty):.3f}")
