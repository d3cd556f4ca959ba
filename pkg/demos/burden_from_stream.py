"""
From classifier probabilities to an EA burden level
===================================================

A day of 2-second EEG segments is simulated as a two-state Markov chain with a
noisy classifier on top. HMM smoothing cleans up the labels, sliding 6-hour
windows give the EA fraction over time, and the peak fraction E_max sets the
burden level.
"""
import numpy as np

from eacause.burden import (E_MAX_EDGES, LEVELS, bin_index, burden_summary, ea_fraction_series,
                            smooth_labels_hmm)

rng = np.random.default_rng(3)
n_seg = 24 * 3600 // 2
a = np.array([[0.995, 0.005], [0.01, 0.99]])

# hidden EA state, with the first 8 hours more active
state = np.empty(n_seg, dtype=int)
state[0] = 0
u = rng.random(n_seg)
for t in range(1, n_seg):
    stay = a[state[t - 1], state[t - 1]]
    if t < 8 * 1800:
        stay = 0.995 if state[t - 1] else 0.99
    state[t] = state[t - 1] if u[t] < stay else 1 - state[t - 1]

# classifier output: informative but noisy
p_ea = np.clip(np.where(state == 1, rng.beta(5, 2, n_seg), rng.beta(2, 5, n_seg)), 1e-6, 1 - 1e-6)
raw = (p_ea > 0.5).astype(int)
smoothed, post = smooth_labels_hmm(p_ea, a)

print(f"segment accuracy: thresholded {np.mean(raw == state):.3f}, smoothed {np.mean(smoothed == state):.3f}")

for name, labels in [("true", state), ("thresholded", raw), ("smoothed", smoothed)]:
    frac = ea_fraction_series(labels)
    e_max, e_mean = burden_summary(frac)
    level = LEVELS[int(bin_index(e_max, E_MAX_EDGES))]
    print(f"{name:12s} E_max {e_max:.3f}  E_mean {e_mean:.3f}  level {level}")

frac = ea_fraction_series(smoothed)
print()
print("window start (h)  EA fraction")
for t0, f in zip(frac.start_hours[::12], frac.fraction[::12]):
    print(f"{t0:14.1f}  {f:11.3f}")
