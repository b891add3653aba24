"""
One client's model: item table, score head, BCE and SGD
=======================================================
"""
import numpy as np

from cgfedrec.model import (LearningRates, TrainBatch, bce_gradients, bce_loss, init_head,
                            init_table, predict, sgd_step)

rng = np.random.default_rng(0)
table = init_table(20, 8, rng)  # 20 items, d=8
head = init_head(8, rng)

# items 0-4 are positives, 10-19 negatives
batch = TrainBatch(np.r_[0:5, 10:20], np.r_[np.ones(5), np.zeros(10)])

for step in range(200):
    grad_w, grad_E = bce_gradients(head, table, batch)
    sgd_step(head, table, grad_w, grad_E, None, LearningRates(0.1, 0.1))
    if step % 50 == 0:
        print(step, round(bce_loss(head, table, batch), 4))

print("p(item 0) =", round(predict(head, table, 0), 3), " p(item 15) =", round(predict(head, table, 15), 3))
