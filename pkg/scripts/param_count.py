"""Parameter count of a model config, per layer group and in total."""
import argparse
import json
from collections import Counter

from cgg.neuralcore.model import ModelConfig, init_params, param_count, param_count_formula

REFERENCE_TOTAL = 909_837


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="run config JSON; its 'model' section is used")
    args = ap.parse_args()
    model = {}
    if args.config:
        with open(args.config) as fh:
            model = json.load(fh).get("model", {})
    cfg = ModelConfig(**model)
    params = init_params(cfg)
    groups = Counter()
    for name, arr in params.arrays.items():
        groups[name.split(".")[0]] += arr.size
    for group, n in groups.items():
        print(f"{group:8s} {n:>10,d}")
    total = param_count(params)
    assert total == param_count_formula(cfg)
    print(f"{'total':8s} {total:>10,d}")
    print(f"reference total {REFERENCE_TOTAL:,d} (difference {total - REFERENCE_TOTAL:+,d})")


if __name__ == "__main__":
    main()
