"""Time the numba kernels against the pure-numpy fallback on oracle-sized inputs.

    python3 benchmarks/bench_kernels.py --repeat 3
"""

import argparse
import time

import numpy as np

from gridarena import kernels
from gridarena.grid_model import ieee14
from gridarena.oracle import enumerate_topologies, table_dictionary


def _best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def dp_inputs(seed=0):
    case = ieee14(calibrated=True)
    space = enumerate_topologies(case, table_dictionary())
    nbr, nbr_asset = space.neighbors()
    rng = np.random.default_rng(seed)
    N, A = len(space), len(space.assets) + 1
    V = rng.uniform(0, 100, size=(N, A, A))
    V[rng.uniform(size=V.shape) < 0.5] = kernels.NEG
    C = rng.integers(0, 20, size=(N, A, A)).astype(np.int64)
    r = rng.uniform(0, 20, size=N)
    feas = np.ones(N, dtype=bool)
    return V, C, r, feas, nbr, nbr_asset


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--horizon", type=int, default=288, help="timesteps for chain kernels")
    p.add_argument("--chains", type=int, default=256, help="topologies per chain batch")
    args = p.parse_args(argv)
    if kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")

    V, C, r, feas, nbr, nbr_asset = dp_inputs()
    outs = [(np.empty_like(V), np.empty_like(C), np.empty(V.shape, np.int16)) for _ in range(2)]
    rng = np.random.default_rng(1)
    amps = rng.uniform(0, 150, size=(args.chains, args.horizon, 20))
    imax = rng.uniform(80, 120, size=20)
    ins = np.ones((args.chains, 20), dtype=bool)

    cases = {
        "dp_layer (8640 topologies)": (
            lambda: kernels.dp_layer_numpy(V, C, r, feas, nbr, nbr_asset, 3, False, *outs[0]),
            lambda: kernels.dp_layer_numba(V, C, r, feas, nbr, nbr_asset, 3, False, *outs[1])),
        f"line_scores ({args.chains}x{args.horizon})": (
            lambda: kernels.line_scores_numpy(amps, imax, ins),
            lambda: kernels.line_scores_numba(amps, imax, ins)),
        f"first_trip ({args.chains}x{args.horizon})": (
            lambda: kernels.first_trip_numpy(amps, imax, ins, 2, 1.5),
            lambda: kernels.first_trip_numba(amps, imax, ins, 2, 1.5)),
    }
    print(f"{'kernel':32s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}")
    for name, (slow, fast) in cases.items():
        fast()                                    # compile outside the timing
        t_np, t_nb = _best_of(slow, args.repeat), _best_of(fast, args.repeat)
        print(f"{name:32s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}")
    same = all(np.array_equal(a, b) for a, b in zip(outs[0], outs[1]))
    print(f"dp_layer outputs identical: {same}")


if __name__ == "__main__":
    main()
