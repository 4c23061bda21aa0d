"""Results must not depend on the number of worker threads."""

import os
import subprocess
import sys


SCRIPT = r"""
import hashlib, numpy as np, numba
from harrisflow.corrfn import CorrelationFunction as C
from harrisflow.sde import RegimeSchedule, SwitchingModel
from harrisflow.flows import run_npoint, simulate_joint_pair, JoiningSpec
from harrisflow.spectra import generating_function, spectral_hits, sample_spectral_sets
f = C.exp_power(1.0, 0.5)
F = RegimeSchedule.parse("0.25,0.5")
h = hashlib.sha256()
r = SwitchingModel.l_diffusion(f, F).run(64, 7, query_times=(0.5,))
for a in (r.int_b, r.end_value, r.wiener_time, r.query):
    h.update(np.ascontiguousarray(a).tobytes())
h.update(run_npoint(f, [0.0, 0.1, 0.3], 32, 7, T=0.3).final.tobytes())
h.update(simulate_joint_pair(f, JoiningSpec(0.5), 32, 7, T=0.3).tobytes())
h.update(np.array([g.value for g in generating_function(f, F, [0.3, 0.8], 32, 7)]).tobytes())
h.update(spectral_hits(f, F, 64, 7).tobytes())
for s in sample_spectral_sets(C.indicator(), 16, 7, dt=2.0**-10, tau=1.0):
    h.update(s.zero_times.tobytes())
print(numba.get_num_threads(), h.hexdigest())
"""


def _digest(threads):
    env = dict(os.environ, NUMBA_NUM_THREADS="8", HARRIS_THREADS=str(threads))
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    n, digest = out.stdout.split()
    assert int(n) == threads
    return digest


def test_bit_exact_across_thread_counts():
    digests = {t: _digest(t) for t in (1, 4, 8)}
    assert len(set(digests.values())) == 1, digests
