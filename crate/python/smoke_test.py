"""Smoke test for the ocmlab_py extension.

Build and install first:
    pip install --no-build-isolation -e crates/py
then run:
    python python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import ocmlab_py as ocm


def check_primitives():
    a = [[0.0, 0.0], [1.0, 0.0]]
    b = [[0.0, 1.0], [1.0, 1.0]]
    assert ocm.exact_w2(a, b) == 1.0
    assert ocm.exact_w2(a, a) == 0.0
    assert ocm.exact_w2(a, b) == ocm.exact_w2(b, a)

    s = ocm.similarity(a, b, 10.0)
    assert abs(s[0][0] - math.exp(-1.0 / 200.0)) < 1e-12
    assert ocm.similarity(a, a, 1.0)[1][1] == 1.0

    try:
        ocm.similarity(a, [[1.0, 2.0, 3.0]], 1.0)
    except ocm.ConfigError:
        pass
    else:
        raise AssertionError("width mismatch should raise ConfigError")


def check_run_and_checkpoint():
    assert "tiny" in ocm.preset_names()
    toml = ocm.preset_toml("tiny", 2)
    result = ocm.run_config(toml)
    records = [json.loads(line) for line in result.metrics_ndjson.splitlines()]
    final = [r for r in records if r["record"] == "final"]
    assert len(final) == 1 and final[0]["stm_size"] == 0
    assert result.summary_csv.splitlines()[0].startswith("step")

    ck = result.checkpoint
    assert ck.learner == "single" and ck.components == 1
    assert len(ck.digests) == 1

    # Reruns are deterministic.
    again = ocm.run_config(toml)
    assert again.metrics_ndjson == result.metrics_ndjson

    ltm = ck.long_term()
    assert len(ltm) == final[0]["ltm_size"]
    ll = ck.log_likelihood(ltm, m=20)
    assert math.isfinite(ll)
    assert len(ck.features(ltm)[0]) == 2

    raw = ck.to_bytes()
    back = ocm.Checkpoint.from_bytes(raw)
    assert back.digests == ck.digests
    damaged = bytearray(raw)
    damaged[-5] ^= 1
    try:
        ocm.Checkpoint.from_bytes(bytes(damaged))
    except ocm.IntegrityError:
        pass
    else:
        raise AssertionError("damaged checkpoint should raise IntegrityError")

    with tempfile.TemporaryDirectory() as d:
        out = Path(d) / "run"
        ocm.run_config(toml, str(out))
        loaded = ocm.Checkpoint.load(str(out / "checkpoint.json"))
        assert loaded.digests == ck.digests
        assert (out / "metrics.ndjson").read_text() == result.metrics_ndjson


def check_config_errors():
    try:
        ocm.run_config("[stream]\nbatch_size = 10\nsurprise = 1\n")
    except ocm.ConfigError as e:
        assert "surprise" in str(e)
    else:
        raise AssertionError("unknown key should raise ConfigError")


if __name__ == "__main__":
    check_primitives()
    check_run_and_checkpoint()
    check_config_errors()
    print("ocmlab_py smoke test passed")
