"""Regenerate src/twinloop/data/fitted.yaml.

Load positions: least-squares placement of the six extra masses so the loaded
vehicle matches the reference loaded inertias and CM, inside the cabin/trunk box.
Tire coefficients: magic-formula fit of the planar baseline to the twin's
pure-slip curves at the nominal load.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import yaml

from twinloop.benchmark import fit_pacejka
from twinloop.config import BASE_VEHICLE, LOAD_MASSES, LOAD_NAMES
from twinloop.rigidbody import fit_load_positions
from twinloop.twin import TwinConfig

TARGETS = {"jxx": 901.9, "jyy": 4394.4, "jzz": 4760.0, "dx": -1.316, "dy": 0.016, "dz": 0.684}
INITIAL = np.array([[-1.45, -0.4, 0.75], [-2.35, 0.45, 0.8], [-2.35, 0.0, 0.8],
                    [-2.35, -0.45, 0.8], [-3.0, 0.4, 0.7], [-3.0, -0.4, 0.7]])
BOX_LOW = (-3.05, -0.6, 0.3)
BOX_HIGH = (0.55, 0.6, 0.9)


def main(out: Path) -> None:
    lower = np.tile(BOX_LOW, (len(LOAD_MASSES), 1))
    upper = np.tile(BOX_HIGH, (len(LOAD_MASSES), 1))
    fit = fit_load_positions(BASE_VEHICLE, LOAD_MASSES, TARGETS, INITIAL, lower, upper, cm_weight=0.05)
    tires = fit_pacejka(TwinConfig())
    data = {
        "loads": [{"name": n, "mass": float(m), "position": [round(float(c), 4) for c in p]}
                  for n, m, p in zip(LOAD_NAMES, LOAD_MASSES, fit.positions)],
        "tires": {k: round(v, 6) + 0.0 for k, v in tires.to_dict().items()},
    }
    out.write_text("# generated by scripts/fit_defaults.py\n" + yaml.safe_dump(data, sort_keys=False))
    print({k: round(v, 5) for k, v in fit.rel_errors.items()}, np.round(fit.params.cm, 4))


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else
         Path(__file__).resolve().parents[1] / "src/twinloop/data/fitted.yaml")
