"""Per-dataset loss weights (lambda1, lambda2, lambda3) for the two benchmarks."""

from __future__ import annotations

from .errors import ConfigurationError
from .objective import LossWeights

# dataset -> benchmark -> (lambda1, lambda2, lambda3)
LAMBDAS: dict[str, dict[str, tuple[float, float, float]]] = {
    "BTMRI": {"fewshot": (0.5, 0.25, 0.5), "base2novel": (0.5, 0.5, 0.5)},
    "BUSI": {"fewshot": (0.75, 0.75, 0.75), "base2novel": (0.5, 0.5, 0.5)},
    "COVID-QU-Ex": {"fewshot": (0.5, 2.0, 0.5), "base2novel": (20.0, 1.0, 20.0)},
    "CTKIDNEY": {"fewshot": (1.0, 0.5, 1.0), "base2novel": (10.0, 0.25, 10.0)},
    "DermaMNIST": {"fewshot": (5.0, 20.0, 5.0), "base2novel": (2.0, 0.5, 2.0)},
    "Kvasir": {"fewshot": (0.75, 0.75, 0.75), "base2novel": (1.0, 1.0, 1.0)},
    "CHMNIST": {"fewshot": (0.25, 0.25, 0.25), "base2novel": (10.0, 1.0, 10.0)},
    "LC25000": {"fewshot": (0.5, 0.5, 0.5), "base2novel": (0.25, 0.75, 0.25)},
    "RETINA": {"fewshot": (0.25, 0.25, 0.25), "base2novel": (5.0, 1.0, 5.0)},
    "KneeXray": {"fewshot": (5.0, 20.0, 5.0), "base2novel": (0.25, 3.0, 0.25)},
    "OCTMNIST": {"fewshot": (1.0, 0.75, 1.0), "base2novel": (0.75, 0.5, 0.75)},
}

# Reported base/novel/HM accuracies (%) for the base-to-novel benchmark.
BASE_NOVEL_REPORTED: dict[str, tuple[float, float, float]] = {
    "Average": (80.05, 74.58, 77.22),
    "BTMRI": (85.69, 95.86, 90.49),
    "COVID-QU-Ex": (78.41, 90.36, 83.96),
    "CTKIDNEY": (86.15, 78.99, 82.41),
    "BUSI": (82.22, 100.00, 90.24),
    "DermaMNIST": (59.39, 75.0, 66.28),
    "Kvasir": (87.89, 50.11, 63.80),
    "CHMNIST": (93.48, 45.30, 61.03),
    "LC25000": (96.25, 95.44, 95.84),
    "RETINA": (75.99, 81.31, 78.56),
    "KneeXray": (46.98, 58.03, 51.92),
    "OCTMNIST": (88.13, 50.00, 63.80),
}


def preset_weights(dataset: str, benchmark: str = "fewshot") -> LossWeights:
    try:
        l1, l2, l3 = LAMBDAS[dataset][benchmark]
    except KeyError:
        raise ConfigurationError(
            f"no preset for dataset={dataset!r}, benchmark={benchmark!r}; "
            f"datasets: {sorted(LAMBDAS)}") from None
    return LossWeights(l1, l2, l3, tie_lambda13=True)
