"""Regenerate probe_ckpt.caf and probe_golden.json (run from the repo root).

The training loss and diversity entries are recomputed here from raw logits and
learner probabilities; the flatness, robust-risk and discrimination entries are
frozen from the first probe run so later changes show up as regressions.
"""

import json
import tempfile
from pathlib import Path

import numpy as np
from scipy.special import log_softmax

from caflab.cli import main, parse_config
from caflab.continual import run_sequence
from caflab.model import learner_predictions, mcl_forward, save_checkpoint

HERE = Path(__file__).parent
CONFIG = {
    "seeds": [0],
    "data": {"synthetic": {"n_tasks": 2, "dim": 4, "n_train": 15, "n_test": 15, "conflict": 60.0}},
    "model": {"hidden": [6], "feature_dim": 3, "k": 2},
    "reg": {"lambda_sp": 10.0},
    "train": {"epochs": 3},
}
PROBE = 'b = 0.2\nn_directions = 2\nn_radii = 4\nn_ascent_steps = 3\nseed = 7\nrobust_radii = [0.0, 0.1]\n'


def oracle(model, seq):
    losses, cos, euc = [], [], []
    for t in seq:
        x, y = t.train.as_batch()
        losses.append(-log_softmax(mcl_forward(model, x, t.task_id), axis=1)[np.arange(y.size), y].mean())
        p = np.stack(learner_predictions(model, t.test.features, t.task_id))
        a, b = p[0], p[1]
        cos.append(np.mean(1 - np.sum(a * b, 1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))))
        euc.append(np.mean(np.linalg.norm(a - b, axis=1)))
    return float(np.mean(losses)), float(np.mean(cos)), float(np.mean(euc))


if __name__ == "__main__":
    cfg = parse_config(CONFIG)
    seq = cfg.sequence(0)
    res = run_sequence(seq, cfg.reg, cfg.train, cfg.model_config(4), 0, with_scratch=False)
    save_checkpoint(HERE / "probe_ckpt.caf", res.state.model, metadata={"config": CONFIG, "run_seed": 0})
    (HERE / "probe.toml").write_text(PROBE)
    loss, cos, euc = oracle(res.state.model, seq)
    with tempfile.TemporaryDirectory() as tmp:
        code = main(["probe", "--checkpoint", str(HERE / "probe_ckpt.caf"), "--config", str(HERE / "probe.toml"),
                     "--out", tmp, "--force"])
        assert code == 0
        rep = json.loads((Path(tmp) / "probe.json").read_text())
    golden = {
        "training_loss": loss,
        "diversity": {"cos": cos, "euc": euc},
        "flatness_mean": rep["flatness"]["mean"],
        "robust_risk": [r["value"] for r in rep["robust_risk"]],
        "discrimination_bce": rep["discrimination_bce"],
    }
    (HERE / "probe_golden.json").write_text(json.dumps(golden, indent=2) + "\n")
