"""Write manifest.json for a directory of PhysioNet gait files (GaPt03_01.txt etc.).

Severity is optional: pass a JSON file mapping subject ids (GaPt03) to
H&Y codes or stages, e.g. transcribed from the demographics sheet.
"""
import argparse
import json
from collections import Counter

from cgg.gaitdata import manifest_from_physionet


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root", help="directory holding the *.txt recordings")
    ap.add_argument("--out", default="manifest.json")
    ap.add_argument("--walks", choices=("first", "all"), default="first",
                    help="keep the first walk per subject or every walk")
    ap.add_argument("--severity", help="JSON file: subject id -> H&Y stage")
    args = ap.parse_args()
    severities = None
    if args.severity:
        with open(args.severity) as fh:
            severities = json.load(fh)
    manifest = manifest_from_physionet(args.root, walks=args.walks, severities=severities)
    with open(args.out, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    counts = Counter((e["cohort"], "PD" if e["label"] else "CO") for e in manifest.values())
    for (cohort, cls), n in sorted(counts.items()):
        print(f"{cohort} {cls}: {n}")
    print(f"{len(manifest)} recordings -> {args.out}")


if __name__ == "__main__":
    main()
