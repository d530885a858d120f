"""
Reference tables for replicating the published IoT Trace experiments.

REFERENCE_MAC_MAP maps the nine IoT device MACs to their labels; every other
MAC collapses into the non-IoT class. REFERENCE_CLASS_ORDER is the class-index
order of the published confusion matrix. HELD_OUT_RESULTS lists, per held-out
device, the epoch count, rejection threshold and 9-way test accuracy that were
reported.
"""

from __future__ import annotations
from typing import NamedTuple

from iotprint.config import Config


REFERENCE_MAC_MAP: dict[str, str] = {
    "ec:1a:59:83:28:11": "Belkin Wemo motion sensor",
    "44:65:0d:56:cc:d3": "Amazon Echo",
    "00:16:6c:ab:6b:88": "Samsung SmartCam",
    "ec:1a:59:79:f4:89": "Belkin Wemo switch",
    "70:ee:50:18:34:43": "Netatmo Welcome",
    "00:62:6e:51:27:2e": "Insteon camera",
    "00:24:e4:20:28:c6": "Withings Aura smart sleep sensor",
    "70:ee:50:03:b8:ac": "Netatmo weather station",
    "e0:76:d0:33:bb:85": "PIX-STAR photoframe",
}

# Total sessions per device after preprocessing
REFERENCE_SESSION_TOTALS: dict[str, int] = {
    "Belkin Wemo motion sensor": 9029,
    "Amazon Echo": 3584,
    "Samsung SmartCam": 4055,
    "Belkin Wemo switch": 3407,
    "Netatmo Welcome": 2338,
    "Insteon camera": 2688,
    "Withings Aura smart sleep sensor": 1118,
    "Netatmo weather station": 7031,
    "PIX-STAR photoframe": 38518,
    Config.NON_IOT_LABEL: 24735,
}

REFERENCE_CLASS_ORDER: tuple[str, ...] = (
    Config.NON_IOT_LABEL,
    "Amazon Echo",
    "Samsung SmartCam",
    "Belkin Wemo switch",
    "Netatmo Welcome",
    "Insteon camera",
    "Withings Aura smart sleep sensor",
    "Netatmo weather station",
    "PIX-STAR photoframe",
    "Belkin Wemo motion sensor",
)

IOT_CLASS_ORDER: tuple[str, ...] = REFERENCE_CLASS_ORDER[1:]


class HeldOutResult(NamedTuple):
    excluded_label: str
    epochs: int
    threshold: float
    test_accuracy: float


HELD_OUT_RESULTS: tuple[HeldOutResult, ...] = (
    HeldOutResult("Amazon Echo", 9, 0.97, 0.989),
    HeldOutResult("Samsung SmartCam", 27, 0.99, 0.979),
    HeldOutResult("Belkin Wemo switch", 5, 0.77, 0.993),
    HeldOutResult("Netatmo Welcome", 18, 0.99, 0.983),
    HeldOutResult("Insteon camera", 8, 0.92, 0.988),
    HeldOutResult("Withings Aura smart sleep sensor", 6, 0.80, 0.998),
    HeldOutResult("Netatmo weather station", 3, 0.76, 0.998),
    HeldOutResult("PIX-STAR photoframe", 3, 0.87, 0.998),
    HeldOutResult("Belkin Wemo motion sensor", 3, 0.90, 0.990),
)

EXPERIMENT1_EPOCHS: int = 7
EXPERIMENT1_SELECTION_EPOCHS: int = 25
EXPERIMENT1_TEST_ACCURACY: float = 0.9986


def held_out_row(excluded_label: str) -> HeldOutResult | None:
    """Published held-out result for a device, if it is one of the nine."""
    for row in HELD_OUT_RESULTS:
        if row.excluded_label == excluded_label:
            return row
    return None
