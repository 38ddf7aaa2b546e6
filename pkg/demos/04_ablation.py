"""Does the cycle loss buy controllability?  A two-arm ablation.

Trains the same generator twice on the 64-scene set, once with the condition
loss switched off and once with it on, then scores held-out scenes from the
four frontal views.  The full budget (2000 steps per arm) takes a while on
one core; pass a smaller step count for a quick look.

    python3 demos/04_ablation.py edge|depth [STEPS] [WORK_DIR]
"""

import json
import sys
from pathlib import Path

from condcycle.ablation import run_ablation
from condcycle.losses import LossWeights

ARMS = {
    "edge": (LossWeights(lam=0.0), LossWeights(lam=1.0)),
    "depth": (LossWeights(beta=0.0), LossWeights(beta=0.1)),
}


def main(kind: str, steps: int, root: Path) -> None:
    off, on = ARMS[kind]
    doc = run_ablation(root, kind, off, on, steps=steps, out_json=root / f"{kind}.json", log=print)
    print(json.dumps({k: doc[k] for k in ("kind", "metric", "relative_drop", "n_train", "n_held_out")}, indent=1))
    for arm in ("off", "on"):
        a = doc["arms"][arm]
        print(f"{arm:>3}: {doc['metric']} {a['headline']:.4f}  ({a['train_seconds'] / 60:.1f} min)")


if __name__ == "__main__":
    args = sys.argv[1:]
    main(args[0] if args else "edge", int(args[1]) if len(args) > 1 else 200,
         Path(args[2] if len(args) > 2 else "demo_out/ablation"))
