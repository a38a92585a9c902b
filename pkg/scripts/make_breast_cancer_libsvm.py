"""Regenerate ``tests/data/breast_cancer.libsvm`` from scikit-learn's bundled copy.

Features are min-max scaled to [-1, 1] (the usual LIBSVM preprocessing) and
written with 1-based indices; malignant maps to ``-1``, benign to ``+1``.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_breast_cancer


def main(out: Path) -> None:
    X, y = load_breast_cancer(return_X_y=True)
    lo, hi = X.min(axis=0), X.max(axis=0)
    X = 2.0 * (X - lo) / (hi - lo) - 1.0
    with open(out, "w", encoding="utf-8") as fh:
        for row, lab in zip(X, y):
            feats = " ".join(f"{j + 1}:{v:.6g}" for j, v in enumerate(row) if v != 0.0)
            fh.write(f"{'+1' if lab == 1 else '-1'} {feats}\n")


if __name__ == "__main__":
    default = Path(__file__).resolve().parents[1] / "tests" / "data" / "breast_cancer.libsvm"
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else default)
