import copy
import os
import sys

import pytest
import yaml

sys.path.append(os.path.join(os.path.dirname(__file__), "helpers"))

BASE_CONFIG = {
    "seeds": {"protocol": 42, "data": 7, "model": 1},
    "dataset": {"kind": "blobs", "samples": 400, "features": 2, "classes": 4, "spread": 0.05},
    "model": {"hidden": [8]},
    "clients": {"count": 4, "classesPerClient": 2},
    "rounds": {"count": 6, "evalInterval": 2},
    "optimizer": {"learningRate": 0.1, "localSteps": 3, "batchSize": 32},
    "evolution": {"populationSize": 16, "sigma": 0.27, "learningRate": 0.4, "partitions": 2},
}


def _merge(base, overrides):
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


# config_file fixture requires the following param: (str, dict)
# the method to run and overrides merged into the small base config above
@pytest.fixture(scope="function")
def config_file(request, tmp_path):
    method, overrides = request.param
    config = _merge(copy.deepcopy(BASE_CONFIG), {"method": method, **overrides})
    config.setdefault("output", {})["directory"] = str(tmp_path / "runs" / method)
    path = tmp_path / "config.yml"
    with open(path, "w") as f:
        yaml.safe_dump(config, f, sort_keys=False)
    yield path


@pytest.fixture()
def output_root(tmp_path, monkeypatch):
    root = tmp_path / "output-root"
    monkeypatch.setenv("EVOFED_OUTPUT_ROOT", str(root))
    yield root
