"""Open loop against the two feedback laws, on a modest ensemble.

Without feedback the final level is drawn from the binomial prior, so only
about a quarter of the runs end at m=0.  Law 1 moves that to roughly 90%,
law 2 to nearly all.  The full 10^4-trajectory versions of these numbers
are in tests/test_acceptance.py.

Run:  python demos/feedback_comparison.py [n_traj]
"""
import sys

from qndspin import SimParams, run_ensemble

n_traj = int(sys.argv[1]) if len(sys.argv) > 1 else 300

for controller in ("none", "law1", "law2"):
    stats = run_ensemble(SimParams(n_traj=n_traj, controller=controller, seed=11), n_keep=0)
    hist = dict(zip(stats.levels.astype(int), stats.histogram))
    print(f"{controller:5s} converged to m=0: {stats.convergence_fraction:.3f}   "
          f"E[Jz^2](T)={stats.mean['jz2'][-1]:.3f}   final levels {hist}")
