"""Train the small Gaussian-layer counter on synthetic dots and report
count errors per epoch. Takes about a minute on one core."""
import numpy as np

from gaussconv.experiments import DataSpec
from gaussconv.net import build_model, evaluate, tiny_config, train

train_set, test_set = DataSpec(train_size=200, test_size=50).build()
for kind in ("standard", "gaussian"):
    cfg = tiny_config(kind)
    print(f"{kind}: {build_model(cfg).n_params()} parameters")
    state, report = train(cfg, train_set, 30, test=test_set)
    for row in report.rows[::5] + report.rows[-1:]:
        print(f"  epoch {row['epoch']:2d}  median loss {row['median_loss']:.4f}  MAE {row['mae']:.2f}")
    mae, rmse = evaluate(state.model, test_set)
    print(f"  test MAE {mae:.2f}, RMSE {rmse:.2f}, mean count {np.mean(test_set.counts):.1f}")
