"""Train the matrix factorization recommender on ML-100K and look at what it learned.

Run from the repository root after ``python -m recguard.fetch data/ml-100k``.
Takes about ten seconds.
"""

import time

import numpy as np

from recguard.data import load_dataset, split
from recguard.metrics import hr_test
from recguard.mf import TrainConfig, init_model, predict, project, recommend_topk, train

data = load_dataset("data/ml-100k/u.data", "ml100k")
print(f"{data.n_users} users, {data.n_items} items, {len(data)} ratings "
      f"(density {len(data) / (data.n_users * data.n_items):.3%})")

# one held-out item per user for testing, a slice of the rest for model selection
s = split(data, seed=0)
print(f"train {len(s.train)}, validation {len(s.validation)}, test {len(s.test)}")

cfg = TrainConfig()
started = time.perf_counter()
model, history = train(init_model(data.n_users, data.n_items, cfg), s.train, cfg, validation=s.validation)
print(f"trained {cfg.epochs} epochs in {time.perf_counter() - started:.1f} s")
best = int(np.argmin(history.val_mse))
print(f"validation MSE: first {history.val_mse[0]:.4f}, best {history.val_mse[best]:.4f} at epoch {best + 1}")

# how often the held-out item makes the top 50 of the items a user has not rated yet
print(f"test HR@50 = {hr_test(model, s, 50):.4f}  (a random ranking gives about {50 / data.n_items:.3f})")

u = 0
seen = set(s.observed().items[s.observed().users == u].tolist())
top = recommend_topk(model, u, 10, exclude=seen)
print(f"user {u} has rated {len(seen)} items; top 10 new items:")
for i in top:
    score = predict(model, u, i)
    print(f"  item {i:4d}  predicted {score:.3f}  -> {5 * project(score):.0f} stars")
