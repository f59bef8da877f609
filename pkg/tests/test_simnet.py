import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest

from vdc import errors
from vdc.simnet import SimConfig, run_simulation, simulated_transform, splitmix64_bytes
from vdc.simnet import kernels

MASK = (1 << 64) - 1


def splitmix_reference(seed, n):
    # textbook integer form, kept separate from both kernels
    out, state = [], seed & MASK
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_known_outputs():
    # widely published first outputs for state 0
    assert splitmix_reference(0, 3) == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    assert splitmix64_bytes(0, 2).hex() == "e220a8397b1dcdaf6e789e6aa1b965f4"


@pytest.mark.parametrize("seed", [0, 1, 12345, 2**63, MASK])
def test_numpy_kernel_matches_reference(seed):
    assert kernels.splitmix64_numpy(seed, 50).tolist() == splitmix_reference(seed, 50)


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba unavailable")
@pytest.mark.parametrize("seed", [0, 7, 2**64 - 59, 0xDEADBEEFCAFEBABE])
def test_numba_matches_numpy(seed):
    a = kernels.splitmix64_numba(np.uint64(seed), 1000)
    b = kernels.splitmix64_numpy(seed, 1000)
    assert np.array_equal(a, b)


def test_env_flag_selects_numpy():
    code = "from vdc.simnet import kernels as k; print(k.BACKEND, k.splitmix64_bytes(99, 4).hex())"
    env = dict(os.environ, VDC_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()
    assert out[0] == "numpy"
    assert out[1] == splitmix64_bytes(99, 4).hex()


def _derivation(events, oid="vd1:" + "00" * 32):
    return {"output_id": oid, "bound_params": {"REPRO": {"events": events}, "APP": {}, "SITE": {}}}


def test_zero_events_is_empty_payload():
    payload, digest = simulated_transform(_derivation(0))
    assert payload == b""
    assert digest.hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_payload_from_output_id():
    payload, digest = simulated_transform(_derivation(1))
    assert payload.hex() == "e220a8397b1dcdaf6e789e6aa1b965f4"
    assert digest == hashlib.sha256(payload).digest()


def test_inputs_fold_into_seed():
    oid = "vd1:" + "00" * 32
    up = b"upstream"
    fold = int.from_bytes(hashlib.sha256(up).digest()[:8], "big")
    payload, _ = simulated_transform(_derivation(2, oid), [up])
    assert payload == b"".join(v.to_bytes(8, "big") for v in splitmix_reference(fold, 4))


def test_events_from_app_and_missing():
    d = {"output_id": "vd1:" + "00" * 32, "bound_params": {"REPRO": {}, "APP": {"events": 1}}}
    assert len(simulated_transform(d)[0]) == 16
    with pytest.raises(errors.MissingEventsParam):
        simulated_transform({"output_id": d["output_id"], "bound_params": {"REPRO": {}}})


SMALL = dict(compute_elements=20, network_domains=4, countries=2, transformations=8, invocations=200, datasets=16)


def test_small_sim_completes():
    r = run_simulation(SimConfig(**SMALL))
    assert (r.invocations, r.completed, r.failed, r.requeued) == (200, 200, 0, 0)
    assert r.stuck_claimed == 0 and r.stuck_defined == 0
    assert r.catalog["transformations"] == 8
    assert r.catalog["invocations"] == 200


def test_sim_reproducible():
    cfg = dict(SMALL, ce_crash_probability=0.1, server_outage_windows=[[3, 4]])
    a = run_simulation(SimConfig(**cfg)).comparable()
    b = run_simulation(SimConfig(**cfg)).comparable()
    assert a == b


def test_sim_conservation_under_crashes():
    r = run_simulation(SimConfig(**SMALL, ce_crash_probability=0.2, server_outage_windows=[[2, 3], [10, 5]]))
    assert r.completed + r.failed == r.invocations
    assert r.failed == 0
    assert r.requeued == r.total_claims - r.invocations
    assert r.nondeterminism_incidents == 0
    assert r.crashes > 0
    assert r.crashed_then_completed == r.crashed_derivations


def test_single_invocation():
    r = run_simulation(SimConfig(compute_elements=1, network_domains=1, countries=1, transformations=1,
                                 invocations=1, datasets=1))
    assert r.completed == 1 and r.catalog["compute_elements"] == 1


def test_config_validation():
    with pytest.raises(errors.BadRequest):
        SimConfig(invocations=0)
    with pytest.raises(errors.BadRequest):
        SimConfig(ce_crash_probability=1.5)
    with pytest.raises(errors.BadRequest):
        SimConfig.from_json({"invocatons": 3})
