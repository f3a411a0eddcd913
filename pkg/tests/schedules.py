"""Shared schedules and measurements for the test suite."""
import numpy as np

from qestlab import core
from qestlab.adaptive import AdaptiveSchedule, fixed_schedule


def z_instrument():
    return core.luders_instrument(core.axis_povm([0, 0, 1]))


def x_instrument():
    return core.luders_instrument(core.axis_povm([1, 0, 0]))


def weak_z_instrument(s=0.6):
    return core.luders_instrument(core.Povm.from_elements([(core.I2 + s * core.SZ) / 2, (core.I2 - s * core.SZ) / 2]))


def tilted_instrument(angle):
    return core.luders_instrument(core.axis_povm([np.sin(angle), 0, np.cos(angle)]))


def binary_adaptive_schedule():
    """Two samples, two rounds, binary outcomes.

    Round 0 measures each sample weakly along z. In round 1 each sample is
    measured along an axis picked from both samples' round-0 outcomes.
    """
    weak = weak_z_instrument()
    agree = tilted_instrument(0.3)
    differ = tilted_instrument(1.1)

    def choose(r, k, history):
        if r == 0:
            return weak
        return agree if history[0] == history[1] else differ

    return AdaptiveSchedule(2, 2, choose)


def sequential_z_then_switch():
    """One sample, two rounds: z, then z after outcome 0 and x after outcome 1."""
    z, x = z_instrument(), x_instrument()

    def choose(r, k, history):
        if r == 0:
            return z
        return z if history[0] == 0 else x

    return AdaptiveSchedule(1, 2, choose)


def product_z_schedule(n):
    return fixed_schedule([[z_instrument()] * n])


def cross_estimator_table(paths, theta0=0.3):
    """An estimator that mixes both samples' data non-additively."""
    table = {}
    for p in paths:
        s = np.array([1 - 2 * x for x in p], dtype=float)
        table[p] = [0.4 * s[0] + 0.3 * s[1] + 0.5 * s[2] + 0.2 * s[3] + 0.25 * s[0] * s[3] - 0.15 * s[1] * s[2] + theta0]
    return table
