"""
Few-shot class-incremental sessions
===================================

Train on five base classes, then add two new classes per session from five
shots each. Base-class forgetting is compared with and without the two
distillation penalties.
"""
import numpy as np

from exemplar_cssl import cil, data
from exemplar_cssl import pipelines as P

samples = data.gen_clusters(data.SyntheticSpec(num_classes=11, dim=64, per_class_count=200, centroid_scale=1.0, seed=5))
protocol = data.CilProtocol(base_classes=tuple(range(5)), sessions=((5, 6), (7, 8), (9, 10)), shots=5, test_per_class=50)
sessions = data.make_sessions(samples, protocol, seed=5)
base_train = P.TrainConfig(epochs=10, batch_size=128, seed=5)

for distill in ("none", "ng", "erg"):
    config = cil.CilConfig(distill=distill, mu=1000.0, seed=5)
    state, rows = cil.run_protocol(sessions.base, sessions.sessions, sessions.test, base_train, P.new_encoder(64, 5), config)
    base_acc = [np.mean([row[c] for c in range(5)]) for row in rows]
    print(f"{distill:>4}: base accuracy by session {np.round(base_acc, 3)}, forgetting {cil.base_forgetting(rows, range(5)):.3f}")
