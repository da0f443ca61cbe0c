import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tkgrank.synth import PlantedRule, SynthConfig, generate


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """A compact planted-signal market shared by integration tests."""
    out = tmp_path_factory.mktemp("synth_small")
    cfg = SynthConfig(
        seed=11, n_assets=10, n_days=200, n_sectors=5,
        rules=(PlantedRule(effect=0.01, lag=2),),
    )
    data = generate(cfg, out)
    return {"dir": out, "config": cfg, "data": data}
