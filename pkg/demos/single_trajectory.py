"""Watch one x-polarized spin collapse onto a Dicke level.

Run:  python demos/single_trajectory.py
"""
import numpy as np

from qndspin import SimParams, simulate_trajectory
from qndspin.hilbert import levels

params = SimParams(seed=4)
rec = simulate_trajectory(params)

# The measurement starts with a binomial spread over eleven levels...
m = levels(params.N)
print("t=0 populations:", np.round(rec.populations[0], 3))

# ...and the variance shrinks roughly as 1/(4 M t) until two levels remain.
for t in (0.0, 0.5, 1.0, 2.0, 5.0):
    k = int(np.argmin(np.abs(rec.t - t)))
    print(f"t={rec.t[k]:4.1f}  <Jz>={rec.jz[k]:+.3f}  var={rec.var[k]:.2e}  Y/t={rec.y_int[k] / max(rec.t[k], 1e-12):+.3f}")

print("final level:", m[np.argmax(rec.populations[-1])])

try:
    import matplotlib.pyplot as plt
except ImportError:
    raise SystemExit(0)

fig, ax = plt.subplots(1, 2, figsize=(10, 4))
ax[0].plot(rec.t, rec.populations)
ax[0].set(xlabel="t", ylabel="level population")
ax[1].semilogy(rec.t, rec.var)
ax[1].set(xlabel="t", ylabel="<dJz^2>")
plt.show()
