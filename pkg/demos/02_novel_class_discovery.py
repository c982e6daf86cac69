"""
Discovering novel classes
=========================

Four classes are labeled and two are not. The three-stage pipeline learns
from the labeled pool, pulls neighbours together in the unlabeled pool and
finally clusters it through a second classifier head.
"""
import numpy as np

from exemplar_cssl import data, evaluation
from exemplar_cssl import pipelines as P
from exemplar_cssl.contrastive import LossConfig

samples = data.gen_clusters(data.SyntheticSpec(num_classes=6, dim=64, per_class_count=200, seed=1))
split = data.split(samples, ncd_mode=True, known_classes=[0, 1, 2, 3])
print(f"labeled: {len(split.labeled)} samples, unlabeled: {len(split.unlabeled)} samples, novel classes: {split.num_novel}")

config = P.TrainConfig(epochs=10, batch_size=128, seed=1, loss=LossConfig(tau=0.1, rho=0.5))
result = P.ncl_pipeline(split, config, P.new_encoder(64, 1))

for stage, losses in result.history.items():
    print(stage, np.round(losses, 3))

truth = split.unlabeled.eval_labels()
clusters = result.cluster_ids(split.unlabeled.x)
print(f"clustering accuracy on the unlabeled pool: {evaluation.cluster_accuracy(clusters, truth):.3f}")
