"""
Transfer from a related high-resource parent
============================================

The parent pair has 2000 training sentences, the child 200. Half of the
child's word forms also occur in the parent language. The child model starts
from the parent's weights, with embedding rows carried over for shared
subwords. About six minutes on one CPU core.
"""

import sys
import tempfile
from pathlib import Path

from lowres_nmt import toy
from lowres_nmt.pipelines import (BaselineExperimentConfig, ModelSpec, TransferExperimentConfig,
                                  run_baseline_experiment, run_transfer_experiment)
from lowres_nmt.trainer import TrainConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
_, parent, child = toy.transfer_task(seed)
print("parent:", parent.train.sources[0], "=>", parent.train.targets[0])
print("child: ", child.train.sources[0], "=>", child.train.targets[0])

spec = ModelSpec(num_layers=2, hidden_size=64, num_heads=4, ffn_size=256, max_positions=64)
tc = TrainConfig(learning_rate=1e-3, dropout=0.1, max_updates=1000, batch_size=32,
                 validate_every=100)

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    p_paths, _ = toy.write_splits(parent, root / "data", "parent")
    c_paths, _ = toy.write_splits(child, root / "data", "child")
    scratch = run_baseline_experiment(BaselineExperimentConfig(c_paths, str(root / "scratch"), 300,
                                                               spec, tc, seed=seed))
    transfer = run_transfer_experiment(TransferExperimentConfig(
        p_paths, c_paths, str(root / "transfer"), 300, spec, tc, tc.replace(criterion="focal"),
        seed=seed))
    print("scratch: ", scratch.report.format())
    print("transfer:", transfer.report.format())
